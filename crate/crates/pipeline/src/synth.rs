//! Synthetic EM-like fixture volumes with exact labels: a drifting ellipse
//! over textured background, and a branching variant whose blob splits into
//! two components halfway through the stack.

use emstack_tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::stack::VolumeStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    DriftingBlob,
    Branching,
}

impl SynthKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "drifting-blob" => Some(SynthKind::DriftingBlob),
            "branching" => Some(SynthKind::Branching),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::DriftingBlob => "drifting-blob",
            SynthKind::Branching => "branching",
        }
    }
}

/// Coarse value-noise texture in [-1, 1].
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h.div_ceil(cell) + 1;
    let gw = w.div_ceil(cell) + 1;
    let nodes: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / cell as f64;
            let fx = x as f64 / cell as f64;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ry, rx) = (fy - y0 as f64, fx - x0 as f64);
            let top = nodes[y0 * gw + x0] * (1.0 - rx) + nodes[y0 * gw + x0 + 1] * rx;
            let bot = nodes[(y0 + 1) * gw + x0] * (1.0 - rx) + nodes[(y0 + 1) * gw + x0 + 1] * rx;
            out[y * w + x] = top * (1.0 - ry) + bot * ry;
        }
    }
    out
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

fn render_slice<T: Scalar>(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    blobs: &[Ellipse],
) -> (Tensor<T>, Tensor<T>) {
    let tex = texture(rng, h, w, 8);
    let mut img = Tensor::zeros(&[1, h, w]);
    let mut mask = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let inside = blobs.iter().any(|b| b.contains(y as f64, x as f64));
            let base = if inside { 0.30 } else { 0.60 };
            let t = if inside { 0.04 } else { 0.10 };
            let v = base + t * tex[y * w + x] + rng.random_range(-0.03..0.03);
            img.data_mut()[y * w + x] = T::from_f64(v.clamp(0.0, 1.0));
            if inside {
                mask.data_mut()[y * w + x] = T::one();
            }
        }
    }
    (img, mask)
}

/// Deterministic synthetic stack; labels are the exact ellipse masks.
pub fn make_synthetic_volume<T: Scalar>(
    kind: SynthKind,
    depth: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<VolumeStack<T>> {
    if depth < 2 {
        return Err(PipelineError::Config(format!(
            "synthetic volume needs depth >= 2, got {depth}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slices = Vec::with_capacity(depth);
    let mut labels = Vec::with_capacity(depth);
    let base_r = (h.min(w) as f64) / 6.5;
    let margin = base_r * 1.4 + 3.0;
    let (mut cy, mut cx) = (h as f64 / 2.0, w as f64 / 2.0);
    for z in 0..depth {
        // Center drifts at most 3 px per slice, clamped away from borders.
        if z > 0 {
            cy = (cy + rng.random_range(-3.0..3.0)).clamp(margin, h as f64 - margin);
            cx = (cx + rng.random_range(-3.0..3.0)).clamp(margin, w as f64 - margin);
        }
        let squeeze = rng.random_range(0.9..1.1);
        let blobs = match kind {
            SynthKind::DriftingBlob => vec![Ellipse {
                cy,
                cx,
                ry: base_r * squeeze,
                rx: base_r / squeeze,
            }],
            SynthKind::Branching => {
                if z < depth / 2 {
                    vec![Ellipse {
                        cy,
                        cx,
                        ry: base_r * squeeze,
                        rx: base_r / squeeze,
                    }]
                } else {
                    // Two clearly separated components after the split.
                    let r = base_r * 0.62;
                    let gap = r + 4.0;
                    vec![
                        Ellipse {
                            cy: cy - gap,
                            cx,
                            ry: r * squeeze,
                            rx: r / squeeze,
                        },
                        Ellipse {
                            cy: cy + gap,
                            cx,
                            ry: r * squeeze,
                            rx: r / squeeze,
                        },
                    ]
                }
            }
        };
        let (img, mask) = render_slice::<T>(&mut rng, h, w, &blobs);
        slices.push(img);
        labels.push(mask);
    }
    let mut stack = VolumeStack::from_parts(
        format!("synth-{}-{seed}", kind.name()),
        slices,
        Some(labels),
    )?;
    stack.intensity_range = (0.0, 255.0);
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use emstack_model::prompt::connected_components;

    #[test]
    fn drifting_blob_has_expected_geometry() {
        let stack: VolumeStack<f64> =
            make_synthetic_volume(SynthKind::DriftingBlob, 24, 64, 64, 7).unwrap();
        assert_eq!(stack.depth(), 24);
        assert_eq!(stack.labels.as_ref().unwrap().len(), 24);
        for (z, label) in stack.labels.as_ref().unwrap().iter().enumerate() {
            let frac: f64 =
                label.data().iter().sum::<f64>() / (64.0 * 64.0);
            assert!(
                (0.02..=0.30).contains(&frac),
                "slice {z}: foreground fraction {frac}"
            );
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a: VolumeStack<f64> =
            make_synthetic_volume(SynthKind::DriftingBlob, 4, 32, 32, 9).unwrap();
        let b: VolumeStack<f64> =
            make_synthetic_volume(SynthKind::DriftingBlob, 4, 32, 32, 9).unwrap();
        for (x, y) in a.slices.iter().zip(b.slices.iter()) {
            assert_eq!(x.data(), y.data());
        }
        let c: VolumeStack<f64> =
            make_synthetic_volume(SynthKind::DriftingBlob, 4, 32, 32, 10).unwrap();
        assert_ne!(a.slices[0].data(), c.slices[0].data());
    }

    #[test]
    fn branching_splits_at_half_depth() {
        let stack: VolumeStack<f64> =
            make_synthetic_volume(SynthKind::Branching, 12, 64, 64, 3).unwrap();
        for (z, label) in stack.labels.as_ref().unwrap().iter().enumerate() {
            let comps = connected_components(label, 0.5).len();
            let expect = if z < 6 { 1 } else { 2 };
            assert_eq!(comps, expect, "slice {z}");
        }
    }

    #[test]
    fn centers_drift_slowly() {
        let stack: VolumeStack<f64> =
            make_synthetic_volume(SynthKind::DriftingBlob, 10, 64, 64, 11).unwrap();
        let com = |m: &Tensor<f64>| -> (f64, f64) {
            let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
            for y in 0..64 {
                for x in 0..64 {
                    if m.at3(0, y, x) > 0.5 {
                        sy += y as f64;
                        sx += x as f64;
                        n += 1.0;
                    }
                }
            }
            (sy / n, sx / n)
        };
        let labels = stack.labels.as_ref().unwrap();
        for z in 1..10 {
            let (ay, ax) = com(&labels[z - 1]);
            let (by, bx) = com(&labels[z]);
            assert!((ay - by).abs() <= 4.0 && (ax - bx).abs() <= 4.0, "slice {z} jumped");
        }
    }

    #[test]
    fn depth_below_two_is_rejected() {
        assert!(make_synthetic_volume::<f64>(SynthKind::DriftingBlob, 1, 32, 32, 1).is_err());
    }
}
