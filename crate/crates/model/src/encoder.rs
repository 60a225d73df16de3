//! ViT-style image encoder with frozen base weights, trainable low-rank
//! bypasses on the attention query/value projections, and a frozen pyramid
//! producing features at 1/4, 1/8 and 1/16 resolution.
//!
//! Base weights are randomly initialized and then frozen, standing in for a
//! pretrained backbone; every architectural contract (freeze behavior,
//! zero-init bypass identity, multi-scale geometry) is independent of where
//! the base weights came from.

use emstack_tensor::{Scalar, Tape, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::layers::{Attention, Conv2dLayer, LayerNormLayer, Linear, Mlp};
use crate::params::ParamSet;
use crate::posenc::grid_encoding;

pub struct EncoderBlock {
    norm1: LayerNormLayer,
    attn: Attention,
    norm2: LayerNormLayer,
    mlp: Mlp,
}

/// Features at 1/4, 1/8 and 1/16 of the input resolution, common width C.
pub struct MultiScale {
    pub f4: Var,
    pub f8: Var,
    pub f16: Var,
}

pub struct Encoder {
    pub patch_size: usize,
    pub embed_dim: usize,
    patch_embed: Linear,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNormLayer,
    neck: Conv2dLayer,
    down8: Conv2dLayer,
    down16: Conv2dLayer,
}

impl Encoder {
    pub fn build<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let scale = cfg.effective_lora_scale();
        let patch_embed = Linear::new(
            tape,
            params,
            "encoder.patch_embed",
            p * p,
            d,
            true,
            &mut rng,
        );
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = format!("encoder.block{i}");
            blocks.push(EncoderBlock {
                norm1: LayerNormLayer::new(tape, params, &format!("{name}.norm1"), d, true),
                attn: Attention::new_lora(
                    tape,
                    params,
                    &format!("{name}.attn"),
                    d,
                    cfg.num_heads,
                    cfg.lora_rank,
                    scale,
                    &mut rng,
                ),
                norm2: LayerNormLayer::new(tape, params, &format!("{name}.norm2"), d, true),
                mlp: Mlp::new(
                    tape,
                    params,
                    &format!("{name}.mlp"),
                    d,
                    4 * d,
                    d,
                    true,
                    &mut rng,
                ),
            });
        }
        let final_norm = LayerNormLayer::new(tape, params, "encoder.final_norm", d, true);
        // The multi-scale pyramid belongs to the frozen base, mirroring a
        // pretrained neck; adaptation happens in the bypasses and downstream.
        let c = cfg.feature_channels;
        let neck = Conv2dLayer::new(tape, params, "encoder.neck", d, c, 1, 1, 0, true, &mut rng);
        let down8 = Conv2dLayer::new(tape, params, "encoder.down8", c, c, 3, 2, 1, true, &mut rng);
        let down16 =
            Conv2dLayer::new(tape, params, "encoder.down16", c, c, 3, 2, 1, true, &mut rng);
        Encoder {
            patch_size: p,
            embed_dim: d,
            patch_embed,
            blocks,
            final_norm,
            neck,
            down8,
            down16,
        }
    }

    /// Encode a [1,H,W] slice into 1/4, 1/8 and 1/16 feature maps.
    /// `with_lora = false` runs the frozen base path only.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        with_lora: bool,
    ) -> Result<MultiScale> {
        let shape = tape.data(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 || shape[1] % 16 != 0 || shape[2] % 16 != 0 {
            return Err(TensorError::BadShape {
                op: "encode",
                shape,
                msg: "expects [1,H,W] with H and W divisible by 16".into(),
            }
            .into());
        }
        let (h, w) = (shape[1], shape[2]);
        let (gh, gw) = (h / self.patch_size, w / self.patch_size);

        let patches = tape.patchify(image, self.patch_size)?;
        let mut tokens = self.patch_embed.forward(tape, patches)?;
        let pos = tape.constant(grid_encoding::<T>(gh, gw, self.embed_dim));
        tokens = tape.add(tokens, pos)?;

        for block in &self.blocks {
            let normed = block.norm1.forward(tape, tokens)?;
            let attended = block.attn.forward(tape, normed, normed, normed, with_lora)?;
            tokens = tape.add(tokens, attended)?;
            let normed = block.norm2.forward(tape, tokens)?;
            let fed = block.mlp.forward(tape, normed)?;
            tokens = tape.add(tokens, fed)?;
        }
        tokens = self.final_norm.forward(tape, tokens)?;

        // [N,D] -> [D,gh,gw]
        let t = tape.transpose2d(tokens)?;
        let chw = tape.reshape(t, &[self.embed_dim, gh, gw])?;

        let f4 = self.neck.forward(tape, chw)?;
        let f8 = self.down8.forward(tape, f4)?;
        let f16 = self.down16.forward(tape, f8)?;
        Ok(MultiScale { f4, f8, f16 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use emstack_tensor::Tensor;

    fn toy_encoder(tape: &mut Tape<f64>) -> (Encoder, ParamSet) {
        let mut params = ParamSet::new();
        let cfg = ModelConfig::toy();
        let enc = Encoder::build(tape, &mut params, &cfg, 7);
        (enc, params)
    }

    fn rand_image(seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[1, 64, 64], (0..4096).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn multi_scale_shapes_for_toy_profile() {
        let mut tape = Tape::new();
        let (enc, _) = toy_encoder(&mut tape);
        let img = tape.constant(rand_image(1));
        let ms = enc.encode(&mut tape, img, true).unwrap();
        assert_eq!(tape.data(ms.f4).shape(), &[32, 16, 16]);
        assert_eq!(tape.data(ms.f8).shape(), &[32, 8, 8]);
        assert_eq!(tape.data(ms.f16).shape(), &[32, 4, 4]);
    }

    #[test]
    fn encode_is_deterministic() {
        let mut tape = Tape::new();
        let (enc, _) = toy_encoder(&mut tape);
        let img = tape.constant(rand_image(2));
        let a = enc.encode(&mut tape, img, true).unwrap();
        let b = enc.encode(&mut tape, img, true).unwrap();
        assert_eq!(tape.data(a.f4).data(), tape.data(b.f4).data());
        assert_eq!(tape.data(a.f16).data(), tape.data(b.f16).data());
    }

    #[test]
    fn zero_init_bypass_matches_frozen_base_exactly() {
        let mut tape = Tape::new();
        let (enc, _) = toy_encoder(&mut tape);
        let img = tape.constant(rand_image(3));
        let with = enc.encode(&mut tape, img, true).unwrap();
        let base = enc.encode(&mut tape, img, false).unwrap();
        let diff = tape.data(with.f4).max_abs_diff(tape.data(base.f4));
        assert_eq!(diff, 0.0);
        let diff16 = tape.data(with.f16).max_abs_diff(tape.data(base.f16));
        assert_eq!(diff16, 0.0);
    }

    #[test]
    fn indivisible_resolution_is_a_dimension_error() {
        let mut tape = Tape::new();
        let (enc, _) = toy_encoder(&mut tape);
        let img = tape.constant(Tensor::zeros(&[1, 60, 64]));
        assert!(enc.encode(&mut tape, img, true).is_err());
    }

    #[test]
    fn trainable_parameters_are_exactly_the_bypass_matrices() {
        let mut tape = Tape::new();
        let (_, params) = toy_encoder(&mut tape);
        let cfg = ModelConfig::toy();
        let (d, r) = (cfg.embed_dim, cfg.lora_rank);
        let expect = cfg.depth * 2 * (r * d + d * r);
        let trainable = params.count_scalars(&tape, Some(false));
        assert_eq!(trainable, expect);
        for e in params.trainable() {
            assert!(
                e.name.contains("lora_a") || e.name.contains("lora_b"),
                "unexpected trainable {}",
                e.name
            );
        }
    }

    #[test]
    fn trainable_fraction_below_15_percent() {
        let mut tape = Tape::new();
        let (_, params) = toy_encoder(&mut tape);
        let trainable = params.count_scalars(&tape, Some(false)) as f64;
        let total = params.count_scalars(&tape, None) as f64;
        assert!(trainable / total < 0.15, "fraction {}", trainable / total);
    }

    #[test]
    fn gradients_reach_bypasses_but_never_base_weights() {
        let mut tape = Tape::new();
        let (enc, params) = toy_encoder(&mut tape);
        let img = tape.constant(rand_image(4));
        let ms = enc.encode(&mut tape, img, true).unwrap();
        let loss_parts = tape.concat(&[ms.f4], 0).unwrap();
        let loss = tape.sum_all(loss_parts).unwrap();
        tape.backward(loss).unwrap();
        for e in params.trainable() {
            assert!(tape.grad(e.var).is_some(), "no grad for {}", e.name);
        }
        for e in params.frozen() {
            assert!(tape.grad(e.var).is_none(), "grad leaked into {}", e.name);
        }
    }
}
