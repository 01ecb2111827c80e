//! Dense f64 tensors and the reverse-mode autodiff tape.

mod rodrigues;
mod spatial;
mod tape;

pub use tape::{BinaryKind, DiffAxis, Tape, TensorId, UnaryKind};

/// Rotation matrix (row-major, 9 values) from an axis-angle vector.
pub fn rodrigues_matrix(w: &[f64]) -> [f64; 9] {
    rodrigues::rodrigues_forward(w)
}

/// Dense N-dimensional array of f64, row-major.
///
/// Plain `Tensor` values hold images, depth maps and parameters outside the
/// tape; the tape stores one per node. `grad` is populated on tape nodes
/// after `backward`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![v; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Flat index for a [C, H, W] tensor.
    #[inline]
    pub fn idx3(&self, c: usize, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (c * self.shape[1] + i) * self.shape[2] + j
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.idx3(c, i, j)]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let idx = self.idx3(c, i, j);
        self.data[idx] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// (height, width) of a [C, H, W] tensor.
    pub fn hw(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 3, "hw() on tensor of shape {:?}", self.shape);
        (self.shape[1], self.shape[2])
    }
}

/// Bilinear lookup on a plain [C, H, W] tensor at continuous pixel
/// coordinates (u along width, v along height), edge-clamped.
///
/// Integer pixel centers sit at integer coordinates. Used by the zoom
/// augmentation and evaluation resampling; the differentiable sampler on the
/// tape has its own out-of-bounds policy.
pub fn sample_bilinear_clamped(img: &Tensor, c: usize, u: f64, v: f64) -> f64 {
    let (h, w) = img.hw();
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let v00 = img.at3(c, y0, x0);
    let v01 = img.at3(c, y0, x1);
    let v10 = img.at3(c, y1, x0);
    let v11 = img.at3(c, y1, x1);
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "does not match")]
    fn shape_mismatch_panics() {
        let _ = Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn bilinear_center_of_2x2() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let v = sample_bilinear_clamped(&img, 0, 0.5, 0.5);
        assert_eq!(v, 1.5);
    }

    #[test]
    fn bilinear_integer_coordinates_exact() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.25, 1.5, 2.75, 3.125]);
        assert_eq!(sample_bilinear_clamped(&img, 0, 1.0, 1.0), 3.125);
        assert_eq!(sample_bilinear_clamped(&img, 0, 0.0, 1.0), 2.75);
    }
}
