//! Prompt encoding from mask inputs: a dense embedding from two strided
//! convolutions, and sparse tokens built from a learned default token plus
//! sinusoidal encodings of connected-component centroids (synthetic point
//! prompts, capped at the largest components).

use emstack_tensor::{Scalar, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::Conv2dLayer;
use crate::params::{init_normal, ParamSet};
use crate::posenc::point_encoding;

/// Dense spatial embedding plus a non-empty sparse token matrix.
pub struct PromptEmbedding {
    pub dense: Var,  // [C, H/4, W/4]
    pub sparse: Var, // [K, C], K >= 1
    pub token_count: usize,
}

pub struct PromptEncoder {
    conv1: Conv2dLayer, // 3x3 stride 2, 1 -> C/2
    conv2: Conv2dLayer, // 3x3 stride 2, C/2 -> C
    default_token: Var, // [1, C]
    channels: usize,
    max_components: usize,
}

/// Connected component of a binarized mask (4-neighborhood).
#[derive(Clone, Copy, Debug)]
pub struct Component {
    pub pixels: usize,
    pub centroid_y: f64,
    pub centroid_x: f64,
    first_index: usize,
}

/// Extract components of `mask > threshold`, largest first (ties broken by
/// scan order).
pub fn connected_components<T: Scalar>(
    mask: &Tensor<T>,
    threshold: f64,
) -> Vec<Component> {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let data = mask.data();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = Vec::new();
    for start in 0..h * w {
        if seen[start] || data[start].as_f64() <= threshold {
            continue;
        }
        let mut pixels = 0usize;
        let (mut sy, mut sx) = (0f64, 0f64);
        queue.clear();
        queue.push(start);
        seen[start] = true;
        while let Some(idx) = queue.pop() {
            pixels += 1;
            let (y, x) = (idx / w, idx % w);
            sy += y as f64;
            sx += x as f64;
            let mut visit = |ny: usize, nx: usize| {
                let n = ny * w + nx;
                if !seen[n] && data[n].as_f64() > threshold {
                    seen[n] = true;
                    queue.push(n);
                }
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
        }
        out.push(Component {
            pixels,
            centroid_y: sy / pixels as f64,
            centroid_x: sx / pixels as f64,
            first_index: start,
        });
    }
    out.sort_by(|a, b| b.pixels.cmp(&a.pixels).then(a.first_index.cmp(&b.first_index)));
    out
}

impl PromptEncoder {
    pub fn build<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        max_components: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mid = (channels / 2).max(1);
        let conv1 = Conv2dLayer::new(
            tape,
            params,
            &format!("{name}.conv1"),
            1,
            mid,
            3,
            2,
            1,
            false,
            &mut rng,
        );
        let conv2 = Conv2dLayer::new(
            tape,
            params,
            &format!("{name}.conv2"),
            mid,
            channels,
            3,
            2,
            1,
            false,
            &mut rng,
        );
        let default_token = params.register(
            tape,
            format!("{name}.default_token"),
            init_normal(&mut rng, &[1, channels], 0.02),
            false,
        );
        PromptEncoder {
            conv1,
            conv2,
            default_token,
            channels,
            max_components,
        }
    }

    /// Encode a [1,H,W] probability mask.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, mask: Var) -> Result<PromptEmbedding> {
        let shape = tape.data(mask).shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(TensorError::BadShape {
                op: "encode_prompt",
                shape,
                msg: "expects a [1,H,W] mask".into(),
            }
            .into());
        }
        let (h, w) = (shape[1], shape[2]);

        let x = self.conv1.forward(tape, mask)?;
        let x = tape.gelu(x)?;
        let x = self.conv2.forward(tape, x)?;
        let dense = tape.gelu(x)?;

        // Centroid tokens are constants derived from the binarized mask.
        let comps = connected_components(tape.data(mask), 0.5);
        let mut tokens = vec![self.default_token];
        let take = comps.len().min(self.max_components);
        for comp in comps.iter().take(take) {
            let enc =
                point_encoding::<T>(comp.centroid_y, comp.centroid_x, h, w, self.channels);
            let t = tape.constant(Tensor::from_vec(&[1, self.channels], enc).expect("token"));
            tokens.push(t);
        }
        let token_count = tokens.len();
        let sparse = tape.concat(&tokens, 0)?;
        Ok(PromptEmbedding {
            dense,
            sparse,
            token_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(tape: &mut Tape<f64>) -> (PromptEncoder, ParamSet) {
        let mut params = ParamSet::new();
        let enc = PromptEncoder::build(tape, &mut params, "prompt1", 32, 8, 17);
        (enc, params)
    }

    fn blob_mask(blobs: &[(usize, usize, usize)], h: usize, w: usize) -> Tensor<f64> {
        let mut m = Tensor::zeros(&[1, h, w]);
        for &(cy, cx, r) in blobs {
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - cy as f64;
                    let dx = x as f64 - cx as f64;
                    if dy * dy + dx * dx <= (r * r) as f64 {
                        m.data_mut()[y * w + x] = 1.0;
                    }
                }
            }
        }
        m
    }

    #[test]
    fn empty_mask_yields_default_token_only() {
        let mut tape = Tape::new();
        let (enc, _) = build(&mut tape);
        let m = tape.constant(Tensor::zeros(&[1, 64, 64]));
        let p = enc.encode(&mut tape, m).unwrap();
        assert_eq!(p.token_count, 1);
        assert_eq!(tape.data(p.sparse).shape(), &[1, 32]);
        assert_eq!(tape.data(p.dense).shape(), &[32, 16, 16]);
    }

    #[test]
    fn two_blobs_yield_three_tokens() {
        let mut tape = Tape::new();
        let (enc, _) = build(&mut tape);
        let m = tape.constant(blob_mask(&[(16, 16, 5), (48, 48, 3)], 64, 64));
        let p = enc.encode(&mut tape, m).unwrap();
        assert_eq!(p.token_count, 3);
        assert_eq!(tape.data(p.sparse).shape(), &[3, 32]);
    }

    #[test]
    fn centroid_token_equals_direct_encoding_of_centroid() {
        let mut tape = Tape::new();
        let (enc, _) = build(&mut tape);
        let mask = blob_mask(&[(20, 28, 4)], 64, 64);
        let comps = connected_components(&mask, 0.5);
        assert_eq!(comps.len(), 1);
        let m = tape.constant(mask);
        let p = enc.encode(&mut tape, m).unwrap();
        let sparse = tape.data(p.sparse);
        let token = &sparse.data()[32..64]; // row 1: first centroid
        let oracle =
            point_encoding::<f64>(comps[0].centroid_y, comps[0].centroid_x, 64, 64, 32);
        for (a, b) in token.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // A symmetric disc centers exactly on its generator.
        assert!((comps[0].centroid_y - 20.0).abs() < 1e-9);
        assert!((comps[0].centroid_x - 28.0).abs() < 1e-9);
    }

    #[test]
    fn component_cap_keeps_the_largest_eight() {
        let mut tape = Tape::new();
        let (enc, _) = build(&mut tape);
        // 12 isolated single pixels plus one large blob.
        let mut mask = blob_mask(&[(32, 32, 6)], 64, 64);
        for i in 0..12usize {
            mask.data_mut()[(2 + 4 * i) * 64 + 2] = 1.0;
        }
        let m = tape.constant(mask);
        let p = enc.encode(&mut tape, m).unwrap();
        assert_eq!(p.token_count, 9, "default + capped 8 components");
    }
}
