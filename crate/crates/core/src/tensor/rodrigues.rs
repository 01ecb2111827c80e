//! Axis-angle to rotation matrix as a differentiable tape op.
//!
//! R(w) = I + A(s)[w]x + B(s)[w]x^2 with s = |w|^2, A = sin(t)/t,
//! B = (1-cos(t))/t^2, t = sqrt(s). Taylor branches keep both the forward
//! map and its derivative stable through w = 0, where PoseNet starts.

use super::tape::{OpRecord, Tape, TensorId};
use super::Tensor;

/// A(s), B(s) and their derivatives in s = theta^2.
fn ab_coeffs(s: f64) -> (f64, f64, f64, f64) {
    if s < 1e-8 {
        let a = 1.0 - s / 6.0 + s * s / 120.0;
        let b = 0.5 - s / 24.0 + s * s / 720.0;
        let da = -1.0 / 6.0 + s / 60.0;
        let db = -1.0 / 24.0 + s / 360.0;
        (a, b, da, db)
    } else {
        let t = s.sqrt();
        let (st, ct) = (t.sin(), t.cos());
        let a = st / t;
        let b = (1.0 - ct) / s;
        let da = (t * ct - st) / (2.0 * t * t * t);
        let db = (t * st - 2.0 * (1.0 - ct)) / (2.0 * s * s);
        (a, b, da, db)
    }
}

pub(crate) fn rodrigues_forward(w: &[f64]) -> [f64; 9] {
    let (x, y, z) = (w[0], w[1], w[2]);
    let s = x * x + y * y + z * z;
    let (a, b, _, _) = ab_coeffs(s);
    // I + A*[w]x + B*(w w^T - s I)
    [
        1.0 + b * (x * x - s),
        -a * z + b * x * y,
        a * y + b * x * z,
        a * z + b * x * y,
        1.0 + b * (y * y - s),
        -a * x + b * y * z,
        -a * y + b * x * z,
        a * x + b * y * z,
        1.0 + b * (z * z - s),
    ]
}

pub(crate) fn rodrigues_vjp(w: &[f64], up: &[f64]) -> Vec<f64> {
    let (x, y, z) = (w[0], w[1], w[2]);
    let s = x * x + y * y + z * z;
    let (a, b, da, db) = ab_coeffs(s);
    let g = |r: usize, c: usize| up[r * 3 + c];

    // <G, [w]x> and <G, w w^T - s I>
    let gw = -z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1);
    let tr = g(0, 0) + g(1, 1) + g(2, 2);
    let mut gw2 = -s * tr;
    let wv = [x, y, z];
    for (j, &wj) in wv.iter().enumerate() {
        for (k, &wk) in wv.iter().enumerate() {
            gw2 += g(j, k) * wj * wk;
        }
    }

    // <G, d[w]x/dw_i> for each axis
    let c = [
        -g(1, 2) + g(2, 1),
        g(0, 2) - g(2, 0),
        -g(0, 1) + g(1, 0),
    ];

    let mut out = vec![0.0; 3];
    for i in 0..3 {
        // d(w w^T - s I)/dw_i contracted with G
        let mut q = -2.0 * wv[i] * tr;
        for (k, &wk) in wv.iter().enumerate() {
            q += g(i, k) * wk + g(k, i) * wk;
        }
        out[i] = 2.0 * wv[i] * (da * gw + db * gw2) + a * c[i] + b * q;
    }
    out
}

impl Tape {
    /// Rotation matrix [3,3] from an axis-angle vector [3].
    pub fn rodrigues(&mut self, w: TensorId) -> TensorId {
        assert_eq!(self.shape(w), &[3], "rodrigues input must be [3]");
        let r = rodrigues_forward(self.data(w));
        let mut t = Tensor::new(vec![3, 3], r.to_vec());
        t.requires_grad = self.value(w).requires_grad;
        self.push(t, OpRecord::Rodrigues { w: w.0 })
    }
}
