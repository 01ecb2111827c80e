//! Finite-difference gradient checking.
//!
//! The checker only ever runs forward passes of the function under test, so
//! it stays independent of the backward implementation it verifies.

use crate::tensor::{Tape, Tensor, TensorId};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Worst relative mismatch between the analytic gradient and central finite
/// differences over every element of every leaf.
///
/// `build` must construct the same scalar-valued graph each time it is
/// called with freshly registered leaves.
pub fn max_rel_error<F>(leaves: &[Tensor], build: F, h: f64) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let eval = |perturb: Option<(usize, usize, f64)>| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = leaves
            .iter()
            .enumerate()
            .map(|(li, t)| {
                let mut t = t.clone();
                t.requires_grad = true;
                if let Some((pl, pe, d)) = perturb {
                    if pl == li {
                        t.data[pe] += d;
                    }
                }
                tape.leaf(t)
            })
            .collect();
        let out = build(&mut tape, &ids);
        let value = tape.item(out);
        if perturb.is_none() {
            tape.backward(out);
            let grads = ids
                .iter()
                .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
                .collect();
            (value, Some(grads))
        } else {
            (value, None)
        }
    };

    let (_, grads) = eval(None);
    let grads = grads.unwrap();

    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.numel() {
            let (fp, _) = eval(Some((li, e, h)));
            let (fm, _) = eval(Some((li, e, -h)));
            let fd = (fp - fm) / (2.0 * h);
            let analytic = if grads[li].is_empty() { 0.0 } else { grads[li][e] };
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((analytic - fd).abs() / denom);
        }
    }
    worst
}

/// Relative mismatch between the analytic directional derivative
/// `sum(grad . dir)` and a central finite difference along `dir`.
///
/// One probe covers every element of the leaf, which keeps whole-network
/// checks affordable.
pub fn directional_rel_error<F>(
    leaves: &[Tensor],
    which: usize,
    dir: &[f64],
    build: F,
    h: f64,
) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    assert_eq!(dir.len(), leaves[which].numel());
    let eval = |scale: f64, want_grad: bool| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = leaves
            .iter()
            .enumerate()
            .map(|(li, t)| {
                let mut t = t.clone();
                t.requires_grad = true;
                if li == which && scale != 0.0 {
                    for (v, d) in t.data.iter_mut().zip(dir) {
                        *v += scale * d;
                    }
                }
                tape.leaf(t)
            })
            .collect();
        let out = build(&mut tape, &ids);
        let value = tape.item(out);
        if want_grad {
            tape.backward(out);
            let g = tape.grad(ids[which]).map(|g| g.to_vec());
            (value, g)
        } else {
            (value, None)
        }
    };

    let (_, grad) = eval(0.0, true);
    let analytic: f64 = match grad {
        Some(g) => g.iter().zip(dir).map(|(a, b)| a * b).sum(),
        None => 0.0,
    };
    let (fp, _) = eval(h, false);
    let (fm, _) = eval(-h, false);
    let fd = (fp - fm) / (2.0 * h);
    let denom = analytic.abs().max(fd.abs()).max(1e-6);
    (analytic - fd).abs() / denom
}
