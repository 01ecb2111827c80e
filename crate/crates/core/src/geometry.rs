//! Pinhole camera model, rigid poses, and differentiable view synthesis.
//!
//! Coordinates: x right, y down, z forward. Integer pixel centers sit at
//! integer coordinates, so pixel (row i, col j) is (u, v) = (j, i).

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Pinhole intrinsics. Image extent is carried by the image itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(
            fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite(),
            "intrinsics must be finite"
        );
        Intrinsics { fx, fy, cx, cy }
    }

    /// Project a camera-frame point to pixel coordinates.
    pub fn project(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        if p[2] <= 0.0 {
            return Err(Error::BehindCamera(p[2]));
        }
        Ok([
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ])
    }

    /// Camera-frame point of pixel (u, v) at the given depth.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ]
    }

    /// Unit-depth ray direction of pixel (u, v).
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Rigid transform: p -> R p + t.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0, 0.0, 0.0],
        }
    }

    pub fn new(r: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let p = PoseSE3 { r, t };
        debug_assert!(p.orthonormality_error() < 1e-9, "rotation not orthonormal");
        p
    }

    /// Rotation from an axis-angle vector.
    pub fn from_axis_angle(w: [f64; 3], t: [f64; 3]) -> Self {
        let m = crate::tensor::rodrigues_matrix(&w);
        PoseSE3 {
            r: [
                [m[0], m[1], m[2]],
                [m[3], m[4], m[5]],
                [m[6], m[7], m[8]],
            ],
            t,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.r;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.t[2],
        ]
    }

    /// Rotate without translating.
    pub fn rotate(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.r;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    /// self after other: (self * other).apply(p) == self.apply(other.apply(p))
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| self.r[i][k] * other.r[k][j]).sum();
            }
        }
        let t = self.apply(other.t);
        PoseSE3 { r, t }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.r[j][i];
            }
        }
        let p = PoseSE3 { r, t: [0.0; 3] };
        let nt = p.rotate(self.t);
        PoseSE3 {
            r,
            t: [-nt[0], -nt[1], -nt[2]],
        }
    }

    pub fn orthonormality_error(&self) -> f64 {
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.r[k][i] * self.r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                err = err.max((dot - expect).abs());
            }
        }
        let det = self.r[0][0] * (self.r[1][1] * self.r[2][2] - self.r[1][2] * self.r[2][1])
            - self.r[0][1] * (self.r[1][0] * self.r[2][2] - self.r[1][2] * self.r[2][0])
            + self.r[0][2] * (self.r[1][0] * self.r[2][1] - self.r[1][1] * self.r[2][0]);
        err.max((det - 1.0).abs())
    }

    /// Flattened row-major rotation, for lifting onto a tape.
    pub fn rotation_flat(&self) -> [f64; 9] {
        let r = &self.r;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ]
    }
}

/// Homogeneous pixel coordinates of an H x W image as a [3, H*W] tensor:
/// row 0 = u, row 1 = v, row 2 = 1.
pub fn pixel_grid(h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for i in 0..h {
        for j in 0..w {
            data[i * w + j] = j as f64;
            data[n + i * w + j] = i as f64;
            data[2 * n + i * w + j] = 1.0;
        }
    }
    Tensor::new(vec![3, h * w], data)
}

/// Unit-depth rays K^-1 p for every pixel, [3, H*W].
pub fn ray_grid(k: &Intrinsics, h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for i in 0..h {
        for j in 0..w {
            let r = k.ray(j as f64, i as f64);
            data[i * w + j] = r[0];
            data[n + i * w + j] = r[1];
            data[2 * n + i * w + j] = 1.0;
        }
    }
    Tensor::new(vec![3, h * w], data)
}

/// Pose of the warp source frame relative to the target, on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PoseIds {
    /// [3, 3] rotation matrix node.
    pub rot: TensorId,
    /// [3] translation node.
    pub trans: TensorId,
}

impl PoseIds {
    /// Lift a constant pose onto the tape.
    pub fn constant(tape: &mut Tape, pose: &PoseSE3) -> PoseIds {
        let rot = tape.constant(Tensor::new(vec![3, 3], pose.rotation_flat().to_vec()));
        let trans = tape.constant(Tensor::new(vec![3], pose.t.to_vec()));
        PoseIds { rot, trans }
    }

    /// Build from axis-angle + translation nodes (each [3]); the rotation
    /// matrix stays differentiable w.r.t. the axis-angle vector.
    pub fn from_axis_angle(tape: &mut Tape, axis_angle: TensorId, trans: TensorId) -> PoseIds {
        let rot = tape.rodrigues(axis_angle);
        PoseIds { rot, trans }
    }
}

/// Camera-frame points D * K^-1 p as a [3, H*W] node.
pub fn backproject_grid(tape: &mut Tape, depth: TensorId, k: &Intrinsics) -> TensorId {
    let shape = tape.shape(depth).to_vec();
    assert_eq!(shape.len(), 3, "depth must be [1,H,W]");
    assert_eq!(shape[0], 1, "depth must be [1,H,W]");
    let (h, w) = (shape[1], shape[2]);
    let rays = tape.constant(ray_grid(k, h, w));
    let d_flat = tape.reshape(depth, vec![1, h * w]);
    tape.mul(rays, d_flat)
}

/// Apply a pose to a [3, N] point grid.
pub fn transform_points(tape: &mut Tape, points: TensorId, pose: &PoseIds) -> TensorId {
    let rotated = tape.matmul(pose.rot, points);
    let t_col = tape.reshape(pose.trans, vec![3, 1]);
    tape.add(rotated, t_col)
}

const Z_EPS: f64 = 1e-6;

/// Projected pixel coordinates of transformed points plus the
/// in-front-of-camera mask. Returns ([2, H, W] grid, [1, H, W] constant mask).
fn project_grid(
    tape: &mut Tape,
    points: TensorId,
    k: &Intrinsics,
    (h, w): (usize, usize),
) -> (TensorId, TensorId) {
    let x = tape.slice_axis0(points, 0, 1);
    let y = tape.slice_axis0(points, 1, 1);
    let z = tape.slice_axis0(points, 2, 1);
    let front: Vec<f64> = tape
        .data(z)
        .iter()
        .map(|&v| if v > Z_EPS { 1.0 } else { 0.0 })
        .collect();
    let zc = tape.clamp_min(z, Z_EPS);
    let xn = tape.div(x, zc);
    let yn = tape.div(y, zc);
    let u = tape.affine(xn, k.fx, k.cx);
    let v = tape.affine(yn, k.fy, k.cy);
    let uv = tape.concat_axis0(&[u, v]);
    let grid = tape.reshape(uv, vec![2, h, w]);
    let mask = tape.constant(Tensor::new(vec![1, h, w], front));
    (grid, mask)
}

/// Warp grid mapping each target pixel to source-frame coordinates,
/// K (T (D K^-1 p)), plus the in-front mask.
pub fn warp_grid(
    tape: &mut Tape,
    depth: TensorId,
    pose: &PoseIds,
    k: &Intrinsics,
) -> (TensorId, TensorId) {
    let shape = tape.shape(depth).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let points = backproject_grid(tape, depth, k);
    let moved = transform_points(tape, points, pose);
    project_grid(tape, moved, k, (h, w))
}

/// Differentiable view synthesis: reconstruct the target view by sampling
/// the source image at depth- and pose-induced correspondences.
///
/// Returns the synthesized image and a validity mask that is 1 only where
/// the sample is in front of the camera and inside the source image.
pub fn synthesize_view(
    tape: &mut Tape,
    source: TensorId,
    depth: TensorId,
    pose: &PoseIds,
    k: &Intrinsics,
) -> (TensorId, TensorId) {
    let (grid, front) = warp_grid(tape, depth, pose, k);
    let (warped, inbounds) = tape.grid_sample(source, grid);
    let mask = tape.mul(front, inbounds);
    (warped, mask)
}
