//! Self-supervised training objective: photometric reconstruction error with
//! per-pixel minimum over source views and an auto-mask for static pixels,
//! plus first- and second-order edge-aware smoothness on mean-normalized
//! inverse depth.

use crate::czda::ZoomedSample;
use crate::error::{Error, Result};
use crate::geometry::{synthesize_view, Intrinsics, PoseIds};
use crate::tensor::{DiffAxis, Tape, Tensor, TensorId};

/// Loss weights and SSIM stabilizers.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// SSIM term weight in the photometric mix.
    pub alpha: f64,
    /// L1 term weight in the photometric mix.
    pub beta: f64,
    /// Photometric weight in the total.
    pub lambda: f64,
    /// Smoothness weight in the total.
    pub mu: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.85,
            beta: 0.15,
            lambda: 1.0,
            mu: 1e-3,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

/// Scalar loss values read off the tape after assembly.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub photometric: f64,
    pub smooth1: f64,
    pub smooth2: f64,
    /// Fraction of pixels surviving the auto-mask and validity mask.
    pub mask_coverage: f64,
}

/// Tape nodes of the assembled objective.
pub struct LossNodes {
    pub total: TensorId,
    pub photometric: TensorId,
    pub smooth1: TensorId,
    pub smooth2: TensorId,
    pub breakdown: LossBreakdown,
}

/// Mean over the channel axis: [C, H, W] -> [1, H, W].
fn channel_mean(tape: &mut Tape, x: TensorId) -> TensorId {
    let c = tape.shape(x)[0];
    let mut acc = tape.slice_axis0(x, 0, 1);
    for ch in 1..c {
        let s = tape.slice_axis0(x, ch, 1);
        acc = tape.add(acc, s);
    }
    tape.affine(acc, 1.0 / c as f64, 0.0)
}

/// Sum over the channel axis: [C, H, W] -> [1, H, W].
fn channel_sum(tape: &mut Tape, x: TensorId) -> TensorId {
    let c = tape.shape(x)[0];
    let mut acc = tape.slice_axis0(x, 0, 1);
    for ch in 1..c {
        let s = tape.slice_axis0(x, ch, 1);
        acc = tape.add(acc, s);
    }
    acc
}

/// Per-pixel SSIM over a 3x3 replicate-padded window, per channel.
pub fn ssim(tape: &mut Tape, a: TensorId, b: TensorId, cfg: &LossConfig) -> TensorId {
    assert_eq!(tape.shape(a), tape.shape(b), "ssim shape mismatch");
    let mu_a = tape.box_filter3(a);
    let mu_b = tape.box_filter3(b);
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let ab = tape.mul(a, b);
    let m_aa = tape.box_filter3(aa);
    let m_bb = tape.box_filter3(bb);
    let m_ab = tape.box_filter3(ab);
    let mu_aa = tape.mul(mu_a, mu_a);
    let mu_bb = tape.mul(mu_b, mu_b);
    let mu_ab = tape.mul(mu_a, mu_b);
    let var_a = tape.sub(m_aa, mu_aa);
    let var_b = tape.sub(m_bb, mu_bb);
    let cov = tape.sub(m_ab, mu_ab);

    let n1 = tape.affine(mu_ab, 2.0, cfg.ssim_c1);
    let n2 = tape.affine(cov, 2.0, cfg.ssim_c2);
    let num = tape.mul(n1, n2);
    let d1a = tape.add(mu_aa, mu_bb);
    let d1 = tape.affine(d1a, 1.0, cfg.ssim_c1);
    let d2a = tape.add(var_a, var_b);
    let d2 = tape.affine(d2a, 1.0, cfg.ssim_c2);
    let den = tape.mul(d1, d2);
    tape.div(num, den)
}

/// Per-pixel photometric error, channel-averaged:
/// alpha * (1 - SSIM)/2 + beta * |a - b|  ->  [1, H, W]
pub fn photometric(tape: &mut Tape, target: TensorId, recon: TensorId, cfg: &LossConfig) -> TensorId {
    let s = ssim(tape, target, recon, cfg);
    let s_mean = channel_mean(tape, s);
    let dssim = tape.affine(s_mean, -0.5 * cfg.alpha, 0.5 * cfg.alpha);
    let diff = tape.sub(target, recon);
    let l1 = tape.abs(diff);
    let l1_mean = channel_mean(tape, l1);
    let l1_term = tape.affine(l1_mean, cfg.beta, 0.0);
    tape.add(dssim, l1_term)
}

/// Per-pixel minimum over per-source loss maps.
pub fn min_reprojection(tape: &mut Tape, losses: &[TensorId]) -> TensorId {
    assert!(!losses.is_empty(), "min_reprojection of zero maps");
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.minimum(acc, l);
    }
    acc
}

/// Binary mask: 1 where the best warped loss beats the best unwarped
/// (identity) loss, i.e. the pixel shows real parallax.
pub fn auto_mask(warped_min: &[f64], identity_min: &[f64]) -> Vec<f64> {
    assert_eq!(warped_min.len(), identity_min.len(), "auto_mask shape mismatch");
    warped_min
        .iter()
        .zip(identity_min)
        .map(|(&w, &i)| if w < i { 1.0 } else { 0.0 })
        .collect()
}

/// Mean-normalized inverse depth: (1/D) / mean(1/D).
pub fn normalize_disparity(tape: &mut Tape, depth: TensorId) -> TensorId {
    let one = tape.scalar_const(1.0);
    let disp = tape.div(one, depth);
    let mean = tape.mean_all(disp);
    assert!(tape.item(mean) > 0.0, "mean disparity must be positive");
    tape.div(disp, mean)
}

/// Edge-aware smoothness of order 1 or 2: mean over positions and axes of
/// exp(-|grad^i I|_1) * |grad^i d|_1, image gradients channel-summed.
pub fn smoothness(tape: &mut Tape, disp_norm: TensorId, image: TensorId, order: usize) -> TensorId {
    assert!(order == 1 || order == 2, "smoothness order must be 1 or 2");
    let mut total = tape.scalar_const(0.0);
    for axis in [DiffAxis::H, DiffAxis::W] {
        let mut d = disp_norm;
        let mut g = image;
        for _ in 0..order {
            d = tape.spatial_diff(d, axis);
            g = tape.spatial_diff(g, axis);
        }
        let d_abs = tape.abs(d);
        let g_abs = tape.abs(g);
        let g_sum = channel_sum(tape, g_abs);
        let g_neg = tape.neg(g_sum);
        let weight = tape.exp(g_neg);
        let term = tape.mul(weight, d_abs);
        let m = tape.mean_all(term);
        total = tape.add(total, m);
    }
    total
}

/// Penalty added to warped losses at invalid samples so the per-pixel
/// minimum avoids them. Far above any photometric value on [0,1] images.
const INVALID_PENALTY: f64 = 1e4;

/// Inputs to the total objective, all living on one tape.
pub struct TotalLossInputs {
    /// Zoomed target frame (constant node).
    pub target_z: TensorId,
    /// Zoomed source frames (constant nodes), order (t-1, t+1).
    pub sources_z: [TensorId; 2],
    /// Predicted depth of the zoomed target, [1, H, W].
    pub depth: TensorId,
    /// Relative poses target -> source for each source.
    pub poses: [PoseIds; 2],
    /// Zoomed intrinsics.
    pub k_r: Intrinsics,
}

/// Assemble the total objective over both source views.
pub fn total_loss(tape: &mut Tape, inp: &TotalLossInputs, cfg: &LossConfig) -> Result<LossNodes> {
    let (h, w) = {
        let s = tape.shape(inp.depth);
        (s[1], s[2])
    };
    let n = h * w;

    let mut warped_pe = Vec::with_capacity(2);
    let mut identity_pe = Vec::with_capacity(2);
    let mut valid_masks = Vec::with_capacity(2);
    for (src, pose) in inp.sources_z.iter().zip(&inp.poses) {
        let (recon, valid) = synthesize_view(tape, *src, inp.depth, pose, &inp.k_r);
        let pe = photometric(tape, inp.target_z, recon, cfg);
        let penalty = tape.affine(valid, -INVALID_PENALTY, INVALID_PENALTY);
        let pe_adj = tape.add(pe, penalty);
        warped_pe.push(pe_adj);
        identity_pe.push(photometric(tape, inp.target_z, *src, cfg));
        valid_masks.push(valid);
    }

    let min_warped = min_reprojection(tape, &warped_pe);
    let min_identity = min_reprojection(tape, &identity_pe);

    let moving = auto_mask(tape.data(min_warped), tape.data(min_identity));
    let any_valid: Vec<f64> = (0..n)
        .map(|p| {
            let a = tape.data(valid_masks[0])[p];
            let b = tape.data(valid_masks[1])[p];
            a.max(b)
        })
        .collect();
    let final_mask: Vec<f64> = moving
        .iter()
        .zip(&any_valid)
        .map(|(&m, &v)| m * v)
        .collect();
    let count: f64 = final_mask.iter().sum();
    if count == 0.0 {
        return Err(Error::DegenerateBatch);
    }
    let mask_coverage = count / n as f64;

    let mask = tape.constant(Tensor::new(vec![1, h, w], final_mask));
    let masked = tape.mul(min_warped, mask);
    let sum = tape.sum_all(masked);
    let l_ph = tape.affine(sum, 1.0 / count, 0.0);

    let disp_norm = normalize_disparity(tape, inp.depth);
    let l_sm1 = smoothness(tape, disp_norm, inp.target_z, 1);
    let l_sm2 = smoothness(tape, disp_norm, inp.target_z, 2);

    let ph_term = tape.affine(l_ph, cfg.lambda, 0.0);
    let sm_sum = tape.add(l_sm1, l_sm2);
    let sm_term = tape.affine(sm_sum, cfg.mu, 0.0);
    let total = tape.add(ph_term, sm_term);

    Ok(LossNodes {
        total,
        photometric: l_ph,
        smooth1: l_sm1,
        smooth2: l_sm2,
        breakdown: LossBreakdown {
            total: tape.item(total),
            photometric: tape.item(l_ph),
            smooth1: tape.item(l_sm1),
            smooth2: tape.item(l_sm2),
            mask_coverage,
        },
    })
}

/// Convenience wrapper building the objective for a zoomed sample with
/// constant (non-learned) depth and poses — used by oracles and tests.
pub fn total_loss_with_gt(
    tape: &mut Tape,
    sample: &ZoomedSample,
    depth: &Tensor,
    poses: [&crate::geometry::PoseSE3; 2],
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let target_z = tape.constant(sample.target_z().clone());
    let srcs = sample.sources_z();
    let s0 = tape.constant(srcs[0].clone());
    let s1 = tape.constant(srcs[1].clone());
    let d = tape.constant(depth.clone());
    let p0 = PoseIds::constant(tape, poses[0]);
    let p1 = PoseIds::constant(tape, poses[1]);
    total_loss(
        tape,
        &TotalLossInputs {
            target_z,
            sources_z: [s0, s1],
            depth: d,
            poses: [p0, p1],
            k_r: sample.k_r,
        },
        cfg,
    )
}
