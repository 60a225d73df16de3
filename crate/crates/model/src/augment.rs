//! Data augmentation for EM slices: one sampled geometric warp (rotation,
//! scale, elastic deformation, flips) applied identically to image and mask,
//! plus image-only intensity jitter. Geometry uses bilinear sampling for the
//! image and nearest-neighbor for the mask, which is re-binarized.

use emstack_tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation sampled uniformly in ±this many degrees.
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Control-point spacing of the elastic grid, in pixels.
    pub elastic_grid: usize,
    /// Std of control-point offsets, as a fraction of the magnitude.
    pub elastic_sigma: f64,
    /// Largest elastic displacement in pixels; 0 disables the warp.
    pub elastic_magnitude: f64,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Brightness offset sampled in ±this value.
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            max_rotation_deg: 15.0,
            scale_min: 0.9,
            scale_max: 1.1,
            elastic_grid: 8,
            elastic_sigma: 0.5,
            elastic_magnitude: 2.0,
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            gamma_min: 0.8,
            gamma_max: 1.2,
            brightness: 0.1,
        }
    }
}

impl AugmentConfig {
    /// A config whose samples are always the identity transform.
    pub fn identity() -> Self {
        AugmentConfig {
            enabled: true,
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            elastic_grid: 8,
            elastic_sigma: 0.0,
            elastic_magnitude: 0.0,
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            gamma_min: 1.0,
            gamma_max: 1.0,
            brightness: 0.0,
        }
    }
}

/// Per-pixel displacement field added to the source coordinates.
#[derive(Clone, Debug)]
pub struct DisplacementField {
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug)]
pub struct GeometricTransform {
    pub angle_rad: f64,
    pub scale: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub elastic: Option<DisplacementField>,
}

impl GeometricTransform {
    pub fn identity() -> Self {
        GeometricTransform {
            angle_rad: 0.0,
            scale: 1.0,
            flip_h: false,
            flip_v: false,
            elastic: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angle_rad == 0.0
            && self.scale == 1.0
            && !self.flip_h
            && !self.flip_v
            && self.elastic.is_none()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IntensityTransform {
    pub gamma: f64,
    pub brightness: f64,
}

impl IntensityTransform {
    pub fn is_identity(&self) -> bool {
        self.gamma == 1.0 && self.brightness == 0.0
    }
}

/// Incompressible elastic warp: displacements are the curl of a random
/// bilinear potential, so the field is divergence-free and foreground area
/// is preserved up to resampling noise. Tissue slices stretch and shear but
/// do not locally grow or shrink.
fn elastic_field(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    grid: usize,
    sigma: f64,
    magnitude: f64,
) -> DisplacementField {
    let g = grid as f64;
    let gh = h.div_ceil(grid) + 2;
    let gw = w.div_ceil(grid) + 2;
    // Potential nodes scaled so gradient magnitudes land near `magnitude`.
    let node_std = (sigma * magnitude * g / 2.0).max(1e-12);
    let normal = Normal::new(0.0, node_std).expect("elastic sigma");
    let psi: Vec<f64> = (0..gh * gw).map(|_| normal.sample(rng)).collect();
    let mut dy = vec![0.0; h * w];
    let mut dx = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / g;
            let fx = x as f64 / g;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
            let (ry, rx) = (fy - y0 as f64, fx - x0 as f64);
            let p00 = psi[y0 * gw + x0];
            let p01 = psi[y0 * gw + x1];
            let p10 = psi[y1 * gw + x0];
            let p11 = psi[y1 * gw + x1];
            let dpsi_dx = ((p01 - p00) * (1.0 - ry) + (p11 - p10) * ry) / g;
            let dpsi_dy = ((p10 - p00) * (1.0 - rx) + (p11 - p01) * rx) / g;
            dx[y * w + x] = dpsi_dy.clamp(-magnitude, magnitude);
            dy[y * w + x] = (-dpsi_dx).clamp(-magnitude, magnitude);
        }
    }
    DisplacementField { dy, dx, h, w }
}

/// Draw one geometric and one intensity transform.
pub fn sample_transforms(
    cfg: &AugmentConfig,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> (GeometricTransform, IntensityTransform) {
    if !cfg.enabled {
        return (
            GeometricTransform::identity(),
            IntensityTransform {
                gamma: 1.0,
                brightness: 0.0,
            },
        );
    }
    let angle = if cfg.max_rotation_deg > 0.0 {
        rng.random_range(-cfg.max_rotation_deg..cfg.max_rotation_deg)
            .to_radians()
    } else {
        0.0
    };
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.random_range(cfg.scale_min..cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let flip_h = cfg.flip_h_prob > 0.0 && rng.random_bool(cfg.flip_h_prob);
    let flip_v = cfg.flip_v_prob > 0.0 && rng.random_bool(cfg.flip_v_prob);
    let elastic = (cfg.elastic_magnitude > 0.0).then(|| {
        elastic_field(
            rng,
            h,
            w,
            cfg.elastic_grid.max(2),
            cfg.elastic_sigma,
            cfg.elastic_magnitude,
        )
    });
    let gamma = if cfg.gamma_max > cfg.gamma_min {
        rng.random_range(cfg.gamma_min..cfg.gamma_max)
    } else {
        cfg.gamma_min
    };
    let brightness = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..cfg.brightness)
    } else {
        0.0
    };
    (
        GeometricTransform {
            angle_rad: angle,
            scale,
            flip_h,
            flip_v,
            elastic,
        },
        IntensityTransform { gamma, brightness },
    )
}

/// Apply one warp to image (bilinear) and mask (nearest, re-binarized).
pub fn apply_geometric<T: Scalar>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    g: &GeometricTransform,
) -> (Tensor<T>, Tensor<T>) {
    assert_eq!(image.shape(), mask.shape(), "image/mask must align");
    if g.is_identity() {
        return (image.clone(), mask.clone());
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let (sin, cos) = g.angle_rad.sin_cos();
    let mut out_img = Tensor::zeros(image.shape());
    let mut out_mask = Tensor::zeros(mask.shape());
    for y in 0..h {
        for x in 0..w {
            let oy = if g.flip_v { (h - 1 - y) as f64 } else { y as f64 };
            let ox = if g.flip_h { (w - 1 - x) as f64 } else { x as f64 };
            // Inverse of scale-then-rotate about the center.
            let dy = (oy - cy) / g.scale;
            let dx = (ox - cx) / g.scale;
            let mut sy = cy + cos * dy + sin * dx;
            let mut sx = cx - sin * dy + cos * dx;
            if let Some(field) = &g.elastic {
                sy += field.dy[y * w + x];
                sx += field.dx[y * w + x];
            }
            let syc = sy.clamp(0.0, (h - 1) as f64);
            let sxc = sx.clamp(0.0, (w - 1) as f64);
            // Image: bilinear.
            let y0 = syc.floor() as usize;
            let x0 = sxc.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = syc - y0 as f64;
            let fx = sxc - x0 as f64;
            let at = |yy: usize, xx: usize| image.data()[yy * w + xx].as_f64();
            let top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
            let bot = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
            out_img.data_mut()[y * w + x] = T::from_f64(top + fy * (bot - top));
            // Mask: nearest, re-binarized.
            let my = syc.round() as usize;
            let mx = sxc.round() as usize;
            let mv = mask.data()[my.min(h - 1) * w + mx.min(w - 1)].as_f64();
            out_mask.data_mut()[y * w + x] = if mv > 0.5 { T::one() } else { T::zero() };
        }
    }
    (out_img, out_mask)
}

/// Gamma then brightness, clamped to [0,1]; image only.
pub fn apply_intensity<T: Scalar>(image: &Tensor<T>, it: &IntensityTransform) -> Tensor<T> {
    if it.is_identity() {
        return image.clone();
    }
    image.map(|v| {
        let x = v.as_f64().clamp(0.0, 1.0);
        T::from_f64((x.powf(it.gamma) + it.brightness).clamp(0.0, 1.0))
    })
}

/// One full augmentation draw; deterministic for a given rng state.
pub fn augment<T: Scalar>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (geo, intensity) = sample_transforms(cfg, h, w, rng);
    let (img, msk) = apply_geometric(image, mask, &geo);
    (apply_intensity(&img, &intensity), msk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn blob(h: usize, w: usize, cy: usize, cx: usize, r: f64) -> Tensor<f64> {
        let mut m = Tensor::zeros(&[1, h, w]);
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy as f64;
                let dx = x as f64 - cx as f64;
                if dy * dy + dx * dx <= r * r {
                    m.data_mut()[y * w + x] = 1.0;
                }
            }
        }
        m
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[1, h, w], (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn identity_config_returns_inputs_unchanged() {
        let img = noise_image(16, 16, 1);
        let msk = blob(16, 16, 8, 8, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (i2, m2) = augment(&img, &msk, &AugmentConfig::identity(), &mut rng);
        assert_eq!(i2, img);
        assert_eq!(m2, msk);
    }

    #[test]
    fn pure_flip_is_an_involution() {
        let img = noise_image(16, 16, 3);
        let msk = blob(16, 16, 5, 11, 3.0);
        let cfg = AugmentConfig {
            flip_h_prob: 1.0,
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            elastic_magnitude: 0.0,
            gamma_min: 1.0,
            gamma_max: 1.0,
            brightness: 0.0,
            ..AugmentConfig::default()
        };
        let cfg = AugmentConfig { flip_v_prob: 0.0, ..cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (i1, m1) = augment(&img, &msk, &cfg, &mut rng);
        assert_ne!(i1, img);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (i2, m2) = augment(&i1, &m1, &cfg, &mut rng);
        assert_eq!(i2, img);
        assert_eq!(m2, msk);
    }

    #[test]
    fn flip_matches_index_oracle() {
        let img = noise_image(8, 8, 5);
        let msk = blob(8, 8, 3, 2, 2.0);
        let g = GeometricTransform {
            flip_h: true,
            ..GeometricTransform::identity()
        };
        let (_, m2) = apply_geometric(&img, &msk, &g);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m2.data()[y * 8 + x], msk.data()[y * 8 + (7 - x)]);
            }
        }
    }

    #[test]
    fn quarter_turn_matches_index_rotation_oracle() {
        let img = noise_image(9, 9, 6);
        let msk = blob(9, 9, 2, 6, 2.0);
        let g = GeometricTransform {
            angle_rad: std::f64::consts::FRAC_PI_2,
            ..GeometricTransform::identity()
        };
        let (_, m2) = apply_geometric(&img, &msk, &g);
        // Inverse mapping of a +90° warp sends output (y,x) to source
        // coordinates rotated by +90°: (sy,sx) = (cx+dx, cy-dy).
        let mut matches = 0usize;
        let mut total = 0usize;
        for y in 0..9usize {
            for x in 0..9usize {
                let dy = y as f64 - 4.0;
                let dx = x as f64 - 4.0;
                let sy = (4.0 + dx).round() as usize;
                let sx = (4.0 - dy).round() as usize;
                total += 1;
                if m2.data()[y * 9 + x] == msk.data()[sy * 9 + sx] {
                    matches += 1;
                }
            }
        }
        assert_eq!(matches, total, "lossless 90° rotation must agree everywhere");
    }

    #[test]
    fn small_elastic_warp_roughly_preserves_area() {
        let msk = blob(32, 32, 16, 16, 6.0);
        let img = noise_image(32, 32, 7);
        let cfg = AugmentConfig {
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            elastic_magnitude: 2.0,
            gamma_min: 1.0,
            gamma_max: 1.0,
            brightness: 0.0,
            ..AugmentConfig::default()
        };
        let area_before: f64 = msk.data().iter().sum();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, m2) = augment(&img, &msk, &cfg, &mut rng);
            let area_after: f64 = m2.data().iter().sum();
            let rel = (area_after - area_before).abs() / area_before;
            assert!(rel <= 0.10, "seed {seed}: area drifted {rel}");
        }
    }

    #[test]
    fn deterministic_for_a_fixed_seed() {
        let img = noise_image(16, 16, 8);
        let msk = blob(16, 16, 8, 8, 4.0);
        let cfg = AugmentConfig::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment(&img, &msk, &cfg, &mut rng)
        };
        let (a_img, a_msk) = run(9);
        let (b_img, b_msk) = run(9);
        assert_eq!(a_img, b_img);
        assert_eq!(a_msk, b_msk);
        let (c_img, _) = run(10);
        assert_ne!(a_img, c_img);
    }
}
