//! Spatial ops on [C, H, W] tensors: convolution, pooling, resampling.

use rayon::prelude::*;

use super::tape::{DiffAxis, OpRecord, Tape, TensorId};
use super::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Sampling coordinates within this distance of an integer snap onto it,
/// so grids that are integral up to rounding noise sample exactly.
const SNAP_EPS: f64 = 1e-9;

impl Tape {
    /// 2-D cross-correlation with zero padding.
    /// x: [C, H, W], w: [Co, C, kh, kw], b: [Co] -> [Co, Ho, Wo]
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W], got {:?}", xs);
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co,C,kh,kw], got {:?}", ws);
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch: {:?} vs {:?}", ws, xs);
        assert_eq!(bs, vec![ws[0]], "conv2d bias must be [Co]");
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let (h, w_in) = (xs[1], xs[2]);
        let (kh, kw) = (ws[2], ws[3]);
        assert!(
            h + 2 * pad >= kh && w_in + 2 * pad >= kw,
            "conv2d kernel {}x{} does not fit padded input {}x{}",
            kh,
            kw,
            h + 2 * pad,
            w_in + 2 * pad
        );
        let geom = ConvGeom {
            ci: xs[0],
            co: ws[0],
            kh,
            kw,
            h,
            w: w_in,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w_in + 2 * pad - kw) / stride + 1,
        };
        let data = conv2d_forward(self.data(x), self.data(w), self.data(b), &geom);
        let mut t = Tensor::new(vec![geom.co, geom.ho, geom.wo], data);
        t.requires_grad = self.value(x).requires_grad
            || self.value(w).requires_grad
            || self.value(b).requires_grad;
        self.push(
            t,
            OpRecord::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
            },
        )
    }

    /// Adaptive average pooling to exactly `(th, tw)`.
    pub fn pool_adaptive(&mut self, x: TensorId, target_hw: (usize, usize)) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "pool input must be [C,H,W]");
        let (th, tw) = target_hw;
        assert!(th > 0 && tw > 0, "pool target must be positive");
        assert!(
            th <= xs[1] && tw <= xs[2],
            "pool target {}x{} exceeds input {}x{}",
            th,
            tw,
            xs[1],
            xs[2]
        );
        let data = pool_adaptive_forward(self.data(x), xs[0], (xs[1], xs[2]), target_hw);
        let mut t = Tensor::new(vec![xs[0], th, tw], data);
        t.requires_grad = self.value(x).requires_grad;
        self.push(
            t,
            OpRecord::PoolAdaptive {
                a: x.0,
                channels: xs[0],
                in_hw: (xs[1], xs[2]),
                out_hw: target_hw,
            },
        )
    }

    /// Global average pooling to [C, 1, 1].
    pub fn gap(&mut self, x: TensorId) -> TensorId {
        self.pool_adaptive(x, (1, 1))
    }

    /// Bilinear upsampling (align-corners-false, edge-clamped).
    pub fn upsample_bilinear(&mut self, x: TensorId, target_hw: (usize, usize)) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "upsample input must be [C,H,W]");
        assert!(target_hw.0 > 0 && target_hw.1 > 0, "upsample target must be positive");
        let data = upsample_bilinear_forward(self.data(x), xs[0], (xs[1], xs[2]), target_hw);
        let mut t = Tensor::new(vec![xs[0], target_hw.0, target_hw.1], data);
        t.requires_grad = self.value(x).requires_grad;
        self.push(
            t,
            OpRecord::UpsampleBilinear {
                a: x.0,
                channels: xs[0],
                in_hw: (xs[1], xs[2]),
                out_hw: target_hw,
            },
        )
    }

    /// 3x3 box mean with replicate padding (the SSIM window).
    pub fn box_filter3(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "box_filter3 input must be [C,H,W]");
        let data = box_filter3_forward(self.data(x), xs[0], (xs[1], xs[2]));
        let mut t = Tensor::new(xs.clone(), data);
        t.requires_grad = self.value(x).requires_grad;
        self.push(
            t,
            OpRecord::BoxFilter3 {
                a: x.0,
                channels: xs[0],
                hw: (xs[1], xs[2]),
            },
        )
    }

    /// Forward difference along H or W; the reduced axis shrinks by one.
    pub fn spatial_diff(&mut self, x: TensorId, axis: DiffAxis) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "spatial_diff input must be [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = match axis {
            DiffAxis::H => (h - 1, w),
            DiffAxis::W => (h, w - 1),
        };
        assert!(oh > 0 && ow > 0, "spatial_diff on degenerate extent");
        let xd = self.data(x);
        let mut data = vec![0.0; c * oh * ow];
        for cc in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let (i1, j1) = match axis {
                        DiffAxis::H => (i + 1, j),
                        DiffAxis::W => (i, j + 1),
                    };
                    data[(cc * oh + i) * ow + j] =
                        xd[(cc * h + i1) * w + j1] - xd[(cc * h + i) * w + j];
                }
            }
        }
        let mut t = Tensor::new(vec![c, oh, ow], data);
        t.requires_grad = self.value(x).requires_grad;
        self.push(
            t,
            OpRecord::SpatialDiff {
                a: x.0,
                axis,
                channels: c,
                hw: (h, w),
            },
        )
    }

    /// Bilinear sampling of `img` at continuous pixel coordinates.
    ///
    /// grid: [2, Hg, Wg] with channel 0 = u (width axis), channel 1 = v.
    /// Out-of-bounds samples produce 0; the returned mask (a constant
    /// [1, Hg, Wg] node) is 0 there and 1 on valid samples. Differentiable
    /// w.r.t. both the image and the grid.
    pub fn grid_sample(&mut self, img: TensorId, grid: TensorId) -> (TensorId, TensorId) {
        let is = self.shape(img).to_vec();
        let gs = self.shape(grid).to_vec();
        assert_eq!(is.len(), 3, "grid_sample image must be [C,H,W]");
        assert_eq!(gs.len(), 3, "grid_sample grid must be [2,Hg,Wg]");
        assert_eq!(gs[0], 2, "grid_sample grid needs 2 coordinate channels");
        let (c, h, w) = (is[0], is[1], is[2]);
        let (hg, wg) = (gs[1], gs[2]);
        let (data, mask) = grid_sample_forward(self.data(img), self.data(grid), c, (h, w), (hg, wg));
        let mut t = Tensor::new(vec![c, hg, wg], data);
        t.requires_grad = self.value(img).requires_grad || self.value(grid).requires_grad;
        let out = self.push(
            t,
            OpRecord::GridSample {
                img: img.0,
                grid: grid.0,
                channels: c,
                in_hw: (h, w),
                out_hw: (hg, wg),
            },
        );
        let mask = self.constant(Tensor::new(vec![1, hg, wg], mask));
        (out, mask)
    }
}

// Forward kernels ------------------------------------------------------------

fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.co * g.ho * g.wo];
    out.par_chunks_mut(g.ho * g.wo).enumerate().for_each(|(co, oc)| {
        oc.fill(b[co]);
        for ci in 0..g.ci {
            let xplane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = w[((co * g.ci + ci) * g.kh + ki) * g.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    for oi in 0..g.ho {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let xrow = &xplane[ii as usize * g.w..(ii as usize + 1) * g.w];
                        let orow = &mut oc[oi * g.wo..(oi + 1) * g.wo];
                        if g.stride == 1 {
                            // jj = oj + kj - pad
                            let shift = kj as isize - g.pad as isize;
                            let oj_lo = (-shift).max(0) as usize;
                            let oj_hi = ((g.w as isize - shift).min(g.wo as isize)).max(0) as usize;
                            let src = &xrow[(oj_lo as isize + shift) as usize..];
                            for (o, xv) in orow[oj_lo..oj_hi].iter_mut().zip(src) {
                                *o += wv * xv;
                            }
                        } else {
                            for (oj, o) in orow.iter_mut().enumerate() {
                                let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                if jj >= 0 && jj < g.w as isize {
                                    *o += wv * xrow[jj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_vjp(
    x: &[f64],
    w: &[f64],
    up: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // bias
    let mut db = vec![0.0; g.co];
    for co in 0..g.co {
        db[co] = up[co * g.ho * g.wo..(co + 1) * g.ho * g.wo].iter().sum();
    }

    // weights: each output channel's slice is independent
    let mut dw = vec![0.0; w.len()];
    dw.par_chunks_mut(g.ci * g.kh * g.kw)
        .enumerate()
        .for_each(|(co, dwc)| {
            let uplane = &up[co * g.ho * g.wo..(co + 1) * g.ho * g.wo];
            for ci in 0..g.ci {
                let xplane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let mut acc = 0.0;
                        for oi in 0..g.ho {
                            let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                            if ii < 0 || ii >= g.h as isize {
                                continue;
                            }
                            let xrow = &xplane[ii as usize * g.w..(ii as usize + 1) * g.w];
                            let urow = &uplane[oi * g.wo..(oi + 1) * g.wo];
                            for (oj, uv) in urow.iter().enumerate() {
                                let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                if jj >= 0 && jj < g.w as isize {
                                    acc += uv * xrow[jj as usize];
                                }
                            }
                        }
                        dwc[(ci * g.kh + ki) * g.kw + kj] = acc;
                    }
                }
            }
        });

    // input: each input channel's slice is independent
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(g.h * g.w).enumerate().for_each(|(ci, dxc)| {
        for co in 0..g.co {
            let uplane = &up[co * g.ho * g.wo..(co + 1) * g.ho * g.wo];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = w[((co * g.ci + ci) * g.kh + ki) * g.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    for oi in 0..g.ho {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dxc[ii as usize * g.w..(ii as usize + 1) * g.w];
                        let urow = &uplane[oi * g.wo..(oi + 1) * g.wo];
                        for (oj, uv) in urow.iter().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                drow[jj as usize] += wv * uv;
                            }
                        }
                    }
                }
            }
        }
    });

    (dx, dw, db)
}

fn pool_window(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = i * n_in / n_out;
    let hi = ((i + 1) * n_in).div_ceil(n_out);
    (lo, hi)
}

fn pool_adaptive_forward(
    x: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; c * th * tw];
    for cc in 0..c {
        let plane = &x[cc * h * w..(cc + 1) * h * w];
        for i in 0..th {
            let (r0, r1) = pool_window(i, h, th);
            for j in 0..tw {
                let (c0, c1) = pool_window(j, w, tw);
                let mut s = 0.0;
                for r in r0..r1 {
                    for cx in c0..c1 {
                        s += plane[r * w + cx];
                    }
                }
                out[(cc * th + i) * tw + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    out
}

pub(crate) fn pool_adaptive_vjp(
    up: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
) -> Vec<f64> {
    let mut dx = vec![0.0; c * h * w];
    for cc in 0..c {
        let dplane = &mut dx[cc * h * w..(cc + 1) * h * w];
        for i in 0..th {
            let (r0, r1) = pool_window(i, h, th);
            for j in 0..tw {
                let (c0, c1) = pool_window(j, w, tw);
                let g = up[(cc * th + i) * tw + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for cx in c0..c1 {
                        dplane[r * w + cx] += g;
                    }
                }
            }
        }
    }
    dx
}

struct ResampleTaps {
    i0: Vec<usize>,
    i1: Vec<usize>,
    f: Vec<f64>,
}

fn bilinear_taps(n_in: usize, n_out: usize) -> ResampleTaps {
    let scale = n_in as f64 / n_out as f64;
    let mut t = ResampleTaps {
        i0: Vec::with_capacity(n_out),
        i1: Vec::with_capacity(n_out),
        f: Vec::with_capacity(n_out),
    };
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        t.i0.push(lo);
        t.i1.push((lo + 1).min(n_in - 1));
        t.f.push(src - lo as f64);
    }
    t
}

fn upsample_bilinear_forward(
    x: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
) -> Vec<f64> {
    let ty = bilinear_taps(h, th);
    let tx = bilinear_taps(w, tw);
    let mut out = vec![0.0; c * th * tw];
    for cc in 0..c {
        let plane = &x[cc * h * w..(cc + 1) * h * w];
        for i in 0..th {
            let (r0, r1, fy) = (ty.i0[i], ty.i1[i], ty.f[i]);
            let row0 = &plane[r0 * w..r0 * w + w];
            let row1 = &plane[r1 * w..r1 * w + w];
            let orow = &mut out[(cc * th + i) * tw..(cc * th + i) * tw + tw];
            for (j, o) in orow.iter_mut().enumerate() {
                let (c0, c1, fx) = (tx.i0[j], tx.i1[j], tx.f[j]);
                let top = row0[c0] * (1.0 - fx) + row0[c1] * fx;
                let bot = row1[c0] * (1.0 - fx) + row1[c1] * fx;
                *o = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear_vjp(
    up: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
) -> Vec<f64> {
    let ty = bilinear_taps(h, th);
    let tx = bilinear_taps(w, tw);
    let mut dx = vec![0.0; c * h * w];
    for cc in 0..c {
        let dplane = &mut dx[cc * h * w..(cc + 1) * h * w];
        for i in 0..th {
            let (r0, r1, fy) = (ty.i0[i], ty.i1[i], ty.f[i]);
            for j in 0..tw {
                let (c0, c1, fx) = (tx.i0[j], tx.i1[j], tx.f[j]);
                let u = up[(cc * th + i) * tw + j];
                dplane[r0 * w + c0] += u * (1.0 - fy) * (1.0 - fx);
                dplane[r0 * w + c1] += u * (1.0 - fy) * fx;
                dplane[r1 * w + c0] += u * fy * (1.0 - fx);
                dplane[r1 * w + c1] += u * fy * fx;
            }
        }
    }
    dx
}

fn box_filter3_forward(x: &[f64], c: usize, (h, w): (usize, usize)) -> Vec<f64> {
    let clamp = |v: isize, n: usize| -> usize { v.clamp(0, n as isize - 1) as usize };
    let mut out = vec![0.0; x.len()];
    for cc in 0..c {
        let plane = &x[cc * h * w..(cc + 1) * h * w];
        let oplane = &mut out[cc * h * w..(cc + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for di in -1..=1isize {
                    let r = clamp(i as isize + di, h);
                    for dj in -1..=1isize {
                        s += plane[r * w + clamp(j as isize + dj, w)];
                    }
                }
                oplane[i * w + j] = s / 9.0;
            }
        }
    }
    out
}

pub(crate) fn box_filter3_vjp(up: &[f64], c: usize, (h, w): (usize, usize)) -> Vec<f64> {
    let clamp = |v: isize, n: usize| -> usize { v.clamp(0, n as isize - 1) as usize };
    let mut dx = vec![0.0; up.len()];
    for cc in 0..c {
        let uplane = &up[cc * h * w..(cc + 1) * h * w];
        let dplane = &mut dx[cc * h * w..(cc + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let g = uplane[i * w + j] / 9.0;
                for di in -1..=1isize {
                    let r = clamp(i as isize + di, h);
                    for dj in -1..=1isize {
                        dplane[r * w + clamp(j as isize + dj, w)] += g;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn spatial_diff_vjp(
    up: &[f64],
    axis: DiffAxis,
    c: usize,
    (h, w): (usize, usize),
) -> Vec<f64> {
    let (oh, ow) = match axis {
        DiffAxis::H => (h - 1, w),
        DiffAxis::W => (h, w - 1),
    };
    let mut dx = vec![0.0; c * h * w];
    for cc in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let u = up[(cc * oh + i) * ow + j];
                let (i1, j1) = match axis {
                    DiffAxis::H => (i + 1, j),
                    DiffAxis::W => (i, j + 1),
                };
                dx[(cc * h + i1) * w + j1] += u;
                dx[(cc * h + i) * w + j] -= u;
            }
        }
    }
    dx
}

struct SampleTap {
    valid: bool,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

fn sample_tap(u: f64, v: f64, (h, w): (usize, usize)) -> SampleTap {
    let snap = |x: f64| -> f64 {
        let r = x.round();
        if (x - r).abs() < SNAP_EPS {
            r
        } else {
            x
        }
    };
    let u = snap(u);
    let v = snap(v);
    let inside =
        u.is_finite() && v.is_finite() && u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64;
    if !inside {
        return SampleTap {
            valid: false,
            x0: 0,
            x1: 0,
            y0: 0,
            y1: 0,
            fx: 0.0,
            fy: 0.0,
        };
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    SampleTap {
        valid: true,
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: u - x0 as f64,
        fy: v - y0 as f64,
    }
}

fn grid_sample_forward(
    img: &[f64],
    grid: &[f64],
    c: usize,
    in_hw: (usize, usize),
    (hg, wg): (usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let n = hg * wg;
    let (h, w) = in_hw;
    let mut out = vec![0.0; c * n];
    let mut mask = vec![0.0; n];
    for p in 0..n {
        let t = sample_tap(grid[p], grid[n + p], in_hw);
        if !t.valid {
            continue;
        }
        mask[p] = 1.0;
        for cc in 0..c {
            let plane = &img[cc * h * w..(cc + 1) * h * w];
            let v00 = plane[t.y0 * w + t.x0];
            let v01 = plane[t.y0 * w + t.x1];
            let v10 = plane[t.y1 * w + t.x0];
            let v11 = plane[t.y1 * w + t.x1];
            out[cc * n + p] = v00 * (1.0 - t.fy) * (1.0 - t.fx)
                + v01 * (1.0 - t.fy) * t.fx
                + v10 * t.fy * (1.0 - t.fx)
                + v11 * t.fy * t.fx;
        }
    }
    (out, mask)
}

pub(crate) fn grid_sample_vjp(
    img: &[f64],
    grid: &[f64],
    up: &[f64],
    c: usize,
    in_hw: (usize, usize),
    (hg, wg): (usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let n = hg * wg;
    let (h, w) = in_hw;
    let mut dimg = vec![0.0; img.len()];
    let mut dgrid = vec![0.0; 2 * n];
    for p in 0..n {
        let t = sample_tap(grid[p], grid[n + p], in_hw);
        if !t.valid {
            continue;
        }
        let mut du = 0.0;
        let mut dv = 0.0;
        for cc in 0..c {
            let u = up[cc * n + p];
            if u == 0.0 {
                continue;
            }
            let plane = &img[cc * h * w..(cc + 1) * h * w];
            let dplane = &mut dimg[cc * h * w..(cc + 1) * h * w];
            let v00 = plane[t.y0 * w + t.x0];
            let v01 = plane[t.y0 * w + t.x1];
            let v10 = plane[t.y1 * w + t.x0];
            let v11 = plane[t.y1 * w + t.x1];
            dplane[t.y0 * w + t.x0] += u * (1.0 - t.fy) * (1.0 - t.fx);
            dplane[t.y0 * w + t.x1] += u * (1.0 - t.fy) * t.fx;
            dplane[t.y1 * w + t.x0] += u * t.fy * (1.0 - t.fx);
            dplane[t.y1 * w + t.x1] += u * t.fy * t.fx;
            du += u * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
            dv += u * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
        }
        dgrid[p] = du;
        dgrid[n + p] = dv;
    }
    (dimg, dgrid)
}
