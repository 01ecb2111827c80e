//! Camera zoom data augmentation.
//!
//! Zooming multiplies the focal lengths by the ratio while the principal
//! point stays put; the image is resized by the same ratio and cropped back
//! to its original extent about the scaled principal point. A 3D point then
//! projects to corresponding pixels in both views, so ground-truth depth is
//! untouched.

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::rng::Rng;
use crate::tensor::{sample_bilinear_clamped, Tensor};

/// Zoom ratio along width (r_x) and height (r_y); both >= 1 so the crop
/// fits inside the resized image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZoomRatio {
    pub rx: f64,
    pub ry: f64,
}

impl ZoomRatio {
    pub fn new(rx: f64, ry: f64) -> Result<Self> {
        if !(rx >= 1.0 && ry >= 1.0 && rx.is_finite() && ry.is_finite()) {
            return Err(Error::Config(format!(
                "zoom ratio must be >= 1, got ({rx}, {ry})"
            )));
        }
        Ok(ZoomRatio { rx, ry })
    }

    pub fn isotropic(r: f64) -> Result<Self> {
        ZoomRatio::new(r, r)
    }

    pub fn unity() -> Self {
        ZoomRatio { rx: 1.0, ry: 1.0 }
    }

    pub fn is_unity(&self) -> bool {
        self.rx == 1.0 && self.ry == 1.0
    }
}

/// An image triplet (previous, target, next) sharing one camera.
#[derive(Clone, Debug)]
pub struct Sample {
    pub images: [Tensor; 3],
    pub k: Intrinsics,
}

impl Sample {
    pub fn new(images: [Tensor; 3], k: Intrinsics) -> Self {
        let hw = images[0].hw();
        assert!(
            images.iter().all(|i| i.hw() == hw && i.shape[0] == 3),
            "triplet frames must share [3,H,W]"
        );
        Sample { images, k }
    }

    pub fn target(&self) -> &Tensor {
        &self.images[1]
    }
}

/// A sample after zoom augmentation. The original frames are retained for
/// pose estimation, which always sees the unzoomed views.
#[derive(Clone, Debug)]
pub struct ZoomedSample {
    pub zoomed: [Tensor; 3],
    pub k_r: Intrinsics,
    pub ratio: ZoomRatio,
    pub original: Sample,
    /// True when the draw requested a zoom but the crop did not fit.
    pub skipped: bool,
}

impl ZoomedSample {
    pub fn target_z(&self) -> &Tensor {
        &self.zoomed[1]
    }

    pub fn sources_z(&self) -> [&Tensor; 2] {
        [&self.zoomed[0], &self.zoomed[2]]
    }
}

/// Zoomed intrinsics: focal lengths scale, principal point is unchanged.
pub fn zoom_intrinsics(k: &Intrinsics, r: ZoomRatio) -> Intrinsics {
    Intrinsics::new(k.fx * r.rx, k.fy * r.ry, k.cx, k.cy)
}

/// Maximum shift (px) that crop clamping may introduce before the
/// augmentation is skipped for the sample.
const MAX_CLAMP_SHIFT: f64 = 1.0;

/// Source-coordinate offsets of the crop window. The final pixel u maps to
/// resized coordinate u + off, and the resize maps that back to u_src =
/// (u + off) / r, so u_src - cx = (u - cx) / r exactly.
fn crop_offsets(k: &Intrinsics, r: ZoomRatio) -> (f64, f64) {
    (k.cx * (r.rx - 1.0), k.cy * (r.ry - 1.0))
}

/// Resize by the zoom ratio and crop back to H x W about the scaled
/// principal point, as one bilinear sampling of the composed map.
///
/// The crop sits at a fractional offset in general, where a literal
/// two-pass resize-then-crop would interpolate twice; the composed map
/// keeps the geometric correspondence exact and interpolates once.
pub fn zoom_image(img: &Tensor, r: ZoomRatio, k: &Intrinsics) -> Result<Tensor> {
    let (h, w) = img.hw();
    let (off_x, off_y) = crop_offsets(k, r);

    // Crop window in resized coordinates, clamped to the resized image.
    let resized_w = (w as f64) * r.rx;
    let resized_h = (h as f64) * r.ry;
    let clamped_x = off_x.clamp(0.0, (resized_w - 1.0) - (w as f64 - 1.0));
    let clamped_y = off_y.clamp(0.0, (resized_h - 1.0) - (h as f64 - 1.0));
    if (clamped_x - off_x).abs() > MAX_CLAMP_SHIFT || (clamped_y - off_y).abs() > MAX_CLAMP_SHIFT {
        return Err(Error::AugmentationSkipped);
    }

    let c = img.shape[0];
    let mut out = Tensor::zeros(vec![c, h, w]);
    for cc in 0..c {
        for i in 0..h {
            let v = (i as f64 + clamped_y) / r.ry;
            for j in 0..w {
                let u = (j as f64 + clamped_x) / r.rx;
                out.set3(cc, i, j, sample_bilinear_clamped(img, cc, u, v));
            }
        }
    }
    Ok(out)
}

/// Settings for the random zoom draw.
#[derive(Clone, Copy, Debug)]
pub struct CzdaConfig {
    pub enabled: bool,
    pub probability: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub isotropic: bool,
}

impl Default for CzdaConfig {
    fn default() -> Self {
        CzdaConfig {
            enabled: true,
            probability: 0.5,
            ratio_min: 1.0,
            ratio_max: 2.0,
            isotropic: true,
        }
    }
}

impl CzdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1.0 <= self.ratio_min && self.ratio_min <= self.ratio_max) {
            return Err(Error::Config(format!(
                "zoom range [{}, {}] must satisfy 1 <= min <= max",
                self.ratio_min, self.ratio_max
            )));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "czda.probability {} outside [0,1]",
                self.probability
            )));
        }
        Ok(())
    }
}

/// Apply the zoom augmentation to a triplet. One ratio is drawn per sample
/// and applied identically to all three frames and to the intrinsics.
pub fn apply_czda(sample: &Sample, rng: &mut Rng, cfg: &CzdaConfig) -> Result<ZoomedSample> {
    cfg.validate()?;
    let draw_zoom = cfg.enabled && rng.chance(cfg.probability);
    let ratio = if draw_zoom {
        if cfg.isotropic {
            ZoomRatio::isotropic(rng.uniform_in(cfg.ratio_min, cfg.ratio_max))?
        } else {
            ZoomRatio::new(
                rng.uniform_in(cfg.ratio_min, cfg.ratio_max),
                rng.uniform_in(cfg.ratio_min, cfg.ratio_max),
            )?
        }
    } else {
        ZoomRatio::unity()
    };

    if ratio.is_unity() {
        return Ok(ZoomedSample {
            zoomed: sample.images.clone(),
            k_r: sample.k,
            ratio,
            original: sample.clone(),
            skipped: false,
        });
    }

    let mut zoomed = Vec::with_capacity(3);
    for img in &sample.images {
        match zoom_image(img, ratio, &sample.k) {
            Ok(z) => zoomed.push(z),
            Err(Error::AugmentationSkipped) => {
                return Ok(ZoomedSample {
                    zoomed: sample.images.clone(),
                    k_r: sample.k,
                    ratio: ZoomRatio::unity(),
                    original: sample.clone(),
                    skipped: true,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ZoomedSample {
        zoomed: [zoomed.remove(0), zoomed.remove(0), zoomed.remove(0)],
        k_r: zoom_intrinsics(&sample.k, ratio),
        ratio,
        original: sample.clone(),
        skipped: false,
    })
}

/// Max pixel discrepancy between projecting through the zoomed intrinsics
/// and applying the resize-and-crop coordinate map to the plain projection.
pub fn verify_correspondence(k: &Intrinsics, r: ZoomRatio, points: &[[f64; 3]]) -> Result<f64> {
    let k_r = zoom_intrinsics(k, r);
    let mut worst = 0.0f64;
    for &p in points {
        let [u, v] = k.project(p)?;
        let [ur, vr] = k_r.project(p)?;
        let mapped_u = k.cx + (u - k.cx) * r.rx;
        let mapped_v = k.cy + (v - k.cy) * r.ry;
        worst = worst.max((ur - mapped_u).abs()).max((vr - mapped_v).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_image(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut t = Tensor::zeros(vec![3, h, w]);
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    t.set3(c, i, j, f(c, i, j));
                }
            }
        }
        t
    }

    #[test]
    fn zoom_intrinsics_identity() {
        let k = Intrinsics::new(100.0, 80.0, 48.0, 32.0);
        let kz = zoom_intrinsics(&k, ZoomRatio::unity());
        assert_eq!(kz, k);
    }

    #[test]
    fn zoom_intrinsics_scales_focals_only() {
        let k = Intrinsics::new(100.0, 80.0, 48.0, 32.0);
        let kz = zoom_intrinsics(&k, ZoomRatio::isotropic(2.0).unwrap());
        assert_eq!(kz.fx, 200.0);
        assert_eq!(kz.cx, 48.0);
        assert_eq!(kz.cy, 32.0);

        let kz = zoom_intrinsics(&k, ZoomRatio::new(1.5, 2.0).unwrap());
        assert_eq!((kz.fx, kz.fy), (150.0, 160.0));
    }

    #[test]
    fn ratio_below_one_rejected() {
        assert!(ZoomRatio::new(0.9, 1.0).is_err());
        assert!(ZoomRatio::isotropic(1.0).is_ok());
    }

    #[test]
    fn zoom_image_unity_is_identity() {
        let img = check_image(8, 12, |c, i, j| (c * 100 + i * 12 + j) as f64 * 0.01);
        let k = Intrinsics::new(10.0, 10.0, 5.5, 3.5);
        let out = zoom_image(&img, ZoomRatio::unity(), &k).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn zoom_constant_image_stays_constant() {
        let img = Tensor::full(vec![3, 8, 8], 0.37);
        let k = Intrinsics::new(10.0, 10.0, 4.0, 4.0);
        let out = zoom_image(&img, ZoomRatio::isotropic(1.7).unwrap(), &k).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    /// Two-step oracle: bilinear resize to (H*ry, W*rx) about the pixel
    /// origin, then integer crop. Agrees exactly with the one-pass map when
    /// the crop offset is integral.
    fn two_step_oracle(img: &Tensor, r: ZoomRatio, k: &Intrinsics) -> Tensor {
        let (h, w) = img.hw();
        let (rh, rw) = ((h as f64 * r.ry) as usize, (w as f64 * r.rx) as usize);
        let mut resized = Tensor::zeros(vec![3, rh, rw]);
        for c in 0..3 {
            for i in 0..rh {
                for j in 0..rw {
                    resized.set3(
                        c,
                        i,
                        j,
                        sample_bilinear_clamped(img, c, j as f64 / r.rx, i as f64 / r.ry),
                    );
                }
            }
        }
        let off_x = (k.cx * (r.rx - 1.0)).round() as usize;
        let off_y = (k.cy * (r.ry - 1.0)).round() as usize;
        let mut out = Tensor::zeros(vec![3, h, w]);
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    out.set3(c, i, j, resized.at3(c, i + off_y, j + off_x));
                }
            }
        }
        out
    }

    #[test]
    fn checkerboard_zoom_matches_two_step_oracle() {
        // period-8 checkerboard, centered principal point with integer
        // crop offset at r = 2
        let (h, w) = (16, 24);
        let img = check_image(h, w, |_, i, j| (((i / 8) + (j / 8)) % 2) as f64);
        let k = Intrinsics::new(20.0, 20.0, w as f64 / 2.0, h as f64 / 2.0);
        let r = ZoomRatio::isotropic(2.0).unwrap();
        let got = zoom_image(&img, r, &k).unwrap();
        let expect = two_step_oracle(&img, r, &k);
        for (a, e) in got.data.iter().zip(&expect.data) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn zoom_samples_geometrically_corresponding_point() {
        // one-pass map against the Eq-style scalar correspondence
        let (h, w) = (10, 14);
        let img = check_image(h, w, |c, i, j| {
            ((i as f64 * 0.3).sin() + (j as f64 * 0.2).cos() + c as f64) * 0.2
        });
        let k = Intrinsics::new(12.0, 9.0, 6.3, 4.7); // fractional offsets
        let r = ZoomRatio::new(1.6, 1.3).unwrap();
        let out = zoom_image(&img, r, &k).unwrap();
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let u = k.cx + (j as f64 - k.cx) / r.rx;
                    let v = k.cy + (i as f64 - k.cy) / r.ry;
                    let expect = sample_bilinear_clamped(&img, c, u, v);
                    let got = out.at3(c, i, j);
                    assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn double_zoom_composes_within_tolerance() {
        // smooth image: composition of zooms approximates the product zoom
        let (h, w) = (32, 32);
        let img = check_image(h, w, |_, i, j| {
            0.5 + 0.3 * ((i as f64 / 9.0).sin() * (j as f64 / 11.0).cos())
        });
        let k = Intrinsics::new(20.0, 20.0, 15.5, 15.5);
        let r1 = ZoomRatio::isotropic(1.4).unwrap();
        let r2 = ZoomRatio::isotropic(1.3).unwrap();
        let once = zoom_image(
            &img,
            ZoomRatio::isotropic(1.4 * 1.3).unwrap(),
            &k,
        )
        .unwrap();
        let k1 = zoom_intrinsics(&k, r1);
        let twice = zoom_image(&zoom_image(&img, r1, &k).unwrap(), r2, &k1).unwrap();
        let mad: f64 = once
            .data
            .iter()
            .zip(&twice.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / once.numel() as f64;
        assert!(mad <= 2e-2, "mean abs diff {mad}");
    }

    fn demo_sample() -> Sample {
        let img = |seed: u64| {
            let mut rng = Rng::new(seed);
            Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.uniform()).collect())
        };
        Sample::new(
            [img(1), img(2), img(3)],
            Intrinsics::new(10.0, 10.0, 4.0, 4.0),
        )
    }

    #[test]
    fn apply_czda_probability_zero_is_identity() {
        let s = demo_sample();
        let mut rng = Rng::new(0);
        let cfg = CzdaConfig {
            probability: 0.0,
            ..CzdaConfig::default()
        };
        let z = apply_czda(&s, &mut rng, &cfg).unwrap();
        assert_eq!(z.k_r, s.k);
        assert!(z.ratio.is_unity());
        for (a, b) in z.zoomed.iter().zip(&s.images) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn apply_czda_degenerate_range_is_deterministic() {
        let s = demo_sample();
        let cfg = CzdaConfig {
            probability: 1.0,
            ratio_min: 2.0,
            ratio_max: 2.0,
            ..CzdaConfig::default()
        };
        let mut rng1 = Rng::new(42);
        let mut rng2 = Rng::new(42);
        let z1 = apply_czda(&s, &mut rng1, &cfg).unwrap();
        let z2 = apply_czda(&s, &mut rng2, &cfg).unwrap();
        assert_eq!(z1.ratio, ZoomRatio::isotropic(2.0).unwrap());
        assert_eq!(z1.k_r.fx, 20.0);
        for (a, b) in z1.zoomed.iter().zip(&z2.zoomed) {
            assert_eq!(a.data, b.data);
        }
        // originals retained for pose estimation
        for (a, b) in z1.original.images.iter().zip(&s.images) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn apply_czda_default_range_draws_inside_table_best_row() {
        let s = demo_sample();
        let cfg = CzdaConfig {
            probability: 1.0,
            ..CzdaConfig::default()
        };
        for seed in 0..50 {
            let mut rng = Rng::new(seed);
            let z = apply_czda(&s, &mut rng, &cfg).unwrap();
            assert!(z.ratio.rx >= 1.0 && z.ratio.rx < 2.0);
            assert_eq!(z.ratio.rx, z.ratio.ry);
            assert_eq!(z.zoomed[0].hw(), s.images[0].hw());
        }
    }

    #[test]
    fn apply_czda_invalid_range_is_config_error() {
        let s = demo_sample();
        let mut rng = Rng::new(0);
        let cfg = CzdaConfig {
            ratio_min: 2.0,
            ratio_max: 1.5,
            ..CzdaConfig::default()
        };
        assert!(matches!(
            apply_czda(&s, &mut rng, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn correspondence_on_axis_and_unity_are_exact() {
        let k = Intrinsics::new(120.0, 110.0, 60.0, 40.0);
        let r = ZoomRatio::isotropic(1.8).unwrap();
        let err = verify_correspondence(&k, r, &[[0.0, 0.0, 5.0]]).unwrap();
        assert_eq!(err, 0.0);

        let err = verify_correspondence(
            &k,
            ZoomRatio::unity(),
            &[[1.0, -2.0, 3.0], [0.4, 0.2, 9.0]],
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn correspondence_random_cloud_stays_below_1e9() {
        let mut rng = Rng::new(7);
        let k = Intrinsics::new(150.0, 140.0, 96.0, 32.0);
        for _ in 0..20 {
            let r = ZoomRatio::new(
                rng.uniform_in(1.0, 3.33),
                rng.uniform_in(1.0, 3.33),
            )
            .unwrap();
            let pts: Vec<[f64; 3]> = (0..50)
                .map(|_| {
                    [
                        rng.uniform_in(-10.0, 10.0),
                        rng.uniform_in(-10.0, 10.0),
                        rng.uniform_in(0.1, 100.0),
                    ]
                })
                .collect();
            let err = verify_correspondence(&k, r, &pts).unwrap();
            assert!(err <= 1e-9, "max pixel error {err}");
        }
    }
}
