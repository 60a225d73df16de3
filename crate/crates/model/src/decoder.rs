//! Two-stage hierarchical mask decoding.
//!
//! Each stage runs a small two-way transformer (token self-attention,
//! token→image and image→token cross-attention) between prompt tokens and
//! image embeddings. Stage 1 emits quarter-resolution logits and its final
//! image features; stage 2 consumes those features through a skip connection
//! and upsamples with two stride-2 transposed convolutions to emit logits at
//! the full input resolution.

use emstack_tensor::{Scalar, Tape, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{Attention, Conv2dLayer, ConvT2dLayer, LayerNormLayer, Mlp};
use crate::params::{init_normal, ParamSet};
use crate::posenc::grid_encoding;
use crate::prompt::PromptEmbedding;

/// Quarter-resolution logits plus the skip-connection payload.
#[derive(Debug)]
pub struct StageOutput {
    pub logits: Var,           // [1, H/4, W/4]
    pub decoder_features: Var, // [C, H/4, W/4]
}

struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNormLayer,
    cross_t2i: Attention,
    norm2: LayerNormLayer,
    mlp: Mlp,
    norm3: LayerNormLayer,
    cross_i2t: Attention,
    norm4: LayerNormLayer,
}

impl TwoWayBlock {
    fn new<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TwoWayBlock {
            self_attn: Attention::new(tape, params, &format!("{name}.self_attn"), dim, heads, rng),
            norm1: LayerNormLayer::new(tape, params, &format!("{name}.norm1"), dim, false),
            cross_t2i: Attention::new(tape, params, &format!("{name}.cross_t2i"), dim, heads, rng),
            norm2: LayerNormLayer::new(tape, params, &format!("{name}.norm2"), dim, false),
            mlp: Mlp::new(tape, params, &format!("{name}.mlp"), dim, 2 * dim, dim, false, rng),
            norm3: LayerNormLayer::new(tape, params, &format!("{name}.norm3"), dim, false),
            cross_i2t: Attention::new(tape, params, &format!("{name}.cross_i2t"), dim, heads, rng),
            norm4: LayerNormLayer::new(tape, params, &format!("{name}.norm4"), dim, false),
        }
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        tokens: Var,
        image: Var,
    ) -> Result<(Var, Var)> {
        let a = self.self_attn.forward(tape, tokens, tokens, tokens, true)?;
        let t = tape.add(tokens, a)?;
        let t = self.norm1.forward(tape, t)?;

        let a = self.cross_t2i.forward(tape, t, image, image, true)?;
        let t = tape.add(t, a)?;
        let t = self.norm2.forward(tape, t)?;

        let m = self.mlp.forward(tape, t)?;
        let t = tape.add(t, m)?;
        let t = self.norm3.forward(tape, t)?;

        let a = self.cross_i2t.forward(tape, image, t, t, true)?;
        let img = tape.add(image, a)?;
        let img = self.norm4.forward(tape, img)?;
        Ok((t, img))
    }
}

/// Shared transformer trunk of both stages.
struct DecoderCore {
    blocks: Vec<TwoWayBlock>,
    final_t2i: Attention,
    final_norm: LayerNormLayer,
    mask_token: Var, // [1, C]
    dim: usize,
}

impl DecoderCore {
    fn new<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| TwoWayBlock::new(tape, params, &format!("{name}.block{i}"), dim, heads, rng))
            .collect();
        let final_t2i = Attention::new(tape, params, &format!("{name}.final_t2i"), dim, heads, rng);
        let final_norm = LayerNormLayer::new(tape, params, &format!("{name}.final_norm"), dim, false);
        let mask_token = params.register(
            tape,
            format!("{name}.mask_token"),
            init_normal(rng, &[1, dim], 0.02),
            false,
        );
        DecoderCore {
            blocks,
            final_t2i,
            final_norm,
            mask_token,
            dim,
        }
    }

    /// Returns (final mask-token embedding [1,C], final image tokens [N,C]).
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        image_tokens: Var,
        sparse: Var,
    ) -> Result<(Var, Var)> {
        let mut tokens = tape.concat(&[self.mask_token, sparse], 0)?;
        let mut image = image_tokens;
        for block in &self.blocks {
            let (t, img) = block.forward(tape, tokens, image)?;
            tokens = t;
            image = img;
        }
        let a = self.final_t2i.forward(tape, tokens, image, image, true)?;
        let t = tape.add(tokens, a)?;
        let t = self.final_norm.forward(tape, t)?;
        let mask_tok = tape.narrow(t, 0, 0, 1)?;
        Ok((mask_tok, image))
    }
}

fn chw_to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, usize, usize, usize)> {
    let s = tape.data(x).shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = tape.reshape(x, &[c, h * w])?;
    let tokens = tape.transpose2d(flat)?;
    Ok((tokens, c, h, w))
}

fn tokens_to_chw<T: Scalar>(tape: &mut Tape<T>, tokens: Var, c: usize, h: usize, w: usize) -> Result<Var> {
    let t = tape.transpose2d(tokens)?;
    Ok(tape.reshape(t, &[c, h, w])?)
}

/// Dot the per-position features with a token-derived filter vector.
fn dot_head<T: Scalar>(tape: &mut Tape<T>, feats: Var, filter: Var) -> Result<Var> {
    let s = tape.data(feats).shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = tape.reshape(feats, &[c, h * w])?;
    let ft = tape.transpose2d(flat)?; // [hw, c]
    let fv = tape.transpose2d(filter)?; // [c, 1]
    let logits = tape.matmul(ft, fv)?; // [hw, 1]
    Ok(tape.reshape(logits, &[1, h, w])?)
}

fn check_image_prompt<T: Scalar>(tape: &Tape<T>, img: Var, prompt: &PromptEmbedding) -> Result<()> {
    let si = tape.data(img).shape();
    let sd = tape.data(prompt.dense).shape();
    if si != sd {
        return Err(TensorError::DimMismatch {
            op: "decode: image features vs dense prompt",
            lhs: si.to_vec(),
            rhs: sd.to_vec(),
        }
        .into());
    }
    Ok(())
}

/// First stage: coarse mask hint. Stage-1 image features are exposed for the
/// stage-2 skip connection.
pub struct DecoderStage1 {
    core: DecoderCore,
    px_conv1: Conv2dLayer,
    px_conv2: Conv2dLayer,
    out_mlp: Mlp,
}

impl DecoderStage1 {
    pub fn build<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        dim: usize,
        heads: usize,
        depth: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecoderStage1 {
            core: DecoderCore::new(tape, params, "stage1", dim, heads, depth, &mut rng),
            px_conv1: Conv2dLayer::new(tape, params, "stage1.px_conv1", dim, dim, 3, 1, 1, false, &mut rng),
            px_conv2: Conv2dLayer::new(tape, params, "stage1.px_conv2", dim, dim, 3, 1, 1, false, &mut rng),
            out_mlp: Mlp::new(tape, params, "stage1.out_mlp", dim, dim, dim, false, &mut rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        img_feat: Var,
        prompt: &PromptEmbedding,
    ) -> Result<StageOutput> {
        check_image_prompt(tape, img_feat, prompt)?;
        let img = tape.add(img_feat, prompt.dense)?;
        let (tokens, c, h, w) = chw_to_tokens(tape, img)?;
        let pos = tape.constant(grid_encoding::<T>(h, w, self.core.dim));
        let tokens = tape.add(tokens, pos)?;
        let (mask_tok, image_out) = self.core.forward(tape, tokens, prompt.sparse)?;
        let chw = tokens_to_chw(tape, image_out, c, h, w)?;
        let f = self.px_conv1.forward(tape, chw)?;
        let f = tape.relu(f)?;
        let feats = self.px_conv2.forward(tape, f)?;
        let filter = self.out_mlp.forward(tape, mask_tok)?;
        let logits = dot_head(tape, feats, filter)?;
        Ok(StageOutput {
            logits,
            decoder_features: feats,
        })
    }
}

/// Second stage: refined full-resolution decoding with a stage-1 skip.
pub struct DecoderStage2 {
    core: DecoderCore,
    skip_reduce: Conv2dLayer,
    up1: ConvT2dLayer,
    up2: ConvT2dLayer,
    out_mlp: Mlp,
}

impl DecoderStage2 {
    pub fn build<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        dim: usize,
        heads: usize,
        depth: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecoderStage2 {
            core: DecoderCore::new(tape, params, "stage2", dim, heads, depth, &mut rng),
            skip_reduce: Conv2dLayer::new(tape, params, "stage2.skip_reduce", 2 * dim, dim, 1, 1, 0, false, &mut rng),
            up1: ConvT2dLayer::new(tape, params, "stage2.up1", dim, dim / 2, 2, &mut rng),
            up2: ConvT2dLayer::new(tape, params, "stage2.up2", dim / 2, dim / 4, 2, &mut rng),
            out_mlp: Mlp::new(tape, params, "stage2.out_mlp", dim, dim, dim / 4, false, &mut rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        img_feat: Var,
        prompt: &PromptEmbedding,
        stage1: &StageOutput,
    ) -> Result<Var> {
        check_image_prompt(tape, img_feat, prompt)?;
        let s1 = tape.data(stage1.decoder_features).shape().to_vec();
        let si = tape.data(img_feat).shape().to_vec();
        if s1[1] != si[1] || s1[2] != si[2] {
            return Err(TensorError::DimMismatch {
                op: "decode: stage-1 features vs image features",
                lhs: s1,
                rhs: si,
            }
            .into());
        }
        let img = tape.add(img_feat, prompt.dense)?;
        let (tokens, c, h, w) = chw_to_tokens(tape, img)?;
        let pos = tape.constant(grid_encoding::<T>(h, w, self.core.dim));
        let tokens = tape.add(tokens, pos)?;
        let (mask_tok, image_out) = self.core.forward(tape, tokens, prompt.sparse)?;
        let chw = tokens_to_chw(tape, image_out, c, h, w)?;

        let cat = tape.concat(&[chw, stage1.decoder_features], 0)?;
        let x = self.skip_reduce.forward(tape, cat)?;
        let x = tape.relu(x)?;
        let x = self.up1.forward(tape, x)?;
        let x = tape.gelu(x)?;
        let x = self.up2.forward(tape, x)?;
        let x = tape.gelu(x)?;

        let filter = self.out_mlp.forward(tape, mask_tok)?;
        dot_head(tape, x, filter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptEncoder;
    use emstack_tensor::Tensor;
    use rand::Rng;

    struct Rig {
        tape: Tape<f64>,
        params: ParamSet,
        p1: PromptEncoder,
        s1: DecoderStage1,
        s2: DecoderStage2,
    }

    fn rig() -> Rig {
        let mut tape = Tape::new();
        let mut params = ParamSet::new();
        let p1 = PromptEncoder::build(&mut tape, &mut params, "prompt1", 32, 8, 31);
        let s1 = DecoderStage1::build(&mut tape, &mut params, 32, 4, 2, 32);
        let s2 = DecoderStage2::build(&mut tape, &mut params, 32, 4, 2, 33);
        Rig { tape, params, p1, s1, s2 }
    }

    fn rand_map(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn stage_shapes_for_toy_profile() {
        let mut r = rig();
        let img = r.tape.constant(rand_map(1, &[32, 16, 16]));
        let mask = r.tape.constant(Tensor::zeros(&[1, 64, 64]));
        let prompt = r.p1.encode(&mut r.tape, mask).unwrap();
        let out1 = r.s1.forward(&mut r.tape, img, &prompt).unwrap();
        assert_eq!(r.tape.data(out1.logits).shape(), &[1, 16, 16]);
        assert_eq!(r.tape.data(out1.decoder_features).shape(), &[32, 16, 16]);
        let out2 = r.s2.forward(&mut r.tape, img, &prompt, &out1).unwrap();
        assert_eq!(r.tape.data(out2).shape(), &[1, 64, 64]);
    }

    #[test]
    fn stage1_is_deterministic() {
        let mut r = rig();
        let img = r.tape.constant(rand_map(2, &[32, 16, 16]));
        let mask = r.tape.constant(Tensor::zeros(&[1, 64, 64]));
        let prompt = r.p1.encode(&mut r.tape, mask).unwrap();
        let a = r.s1.forward(&mut r.tape, img, &prompt).unwrap();
        let b = r.s1.forward(&mut r.tape, img, &prompt).unwrap();
        assert_eq!(
            r.tape.data(a.logits).data(),
            r.tape.data(b.logits).data()
        );
    }

    #[test]
    fn mismatched_prompt_names_the_offending_operand() {
        let mut r = rig();
        let img = r.tape.constant(rand_map(3, &[32, 8, 8]));
        let mask = r.tape.constant(Tensor::zeros(&[1, 64, 64]));
        let prompt = r.p1.encode(&mut r.tape, mask).unwrap(); // dense is 16x16
        let err = r.s1.forward(&mut r.tape, img, &prompt).unwrap_err().to_string();
        assert!(err.contains("dense prompt"), "{err}");
    }

    #[test]
    fn zeroing_stage1_features_changes_stage2_output() {
        let mut r = rig();
        let img = r.tape.constant(rand_map(4, &[32, 16, 16]));
        let mask = r.tape.constant(Tensor::zeros(&[1, 64, 64]));
        let prompt = r.p1.encode(&mut r.tape, mask).unwrap();
        let out1 = r.s1.forward(&mut r.tape, img, &prompt).unwrap();
        let live = r.s2.forward(&mut r.tape, img, &prompt, &out1).unwrap();
        let zeroed = StageOutput {
            logits: out1.logits,
            decoder_features: r.tape.constant(Tensor::zeros(&[32, 16, 16])),
        };
        let dead = r.s2.forward(&mut r.tape, img, &prompt, &zeroed).unwrap();
        let diff = r.tape.data(live).max_abs_diff(r.tape.data(dead));
        assert!(diff > 0.0, "skip path must be live");
    }

    #[test]
    fn gradient_reaches_stage1_weights_through_the_skip() {
        let mut r = rig();
        let img = r.tape.constant(rand_map(5, &[32, 16, 16]));
        let mask = r.tape.constant(Tensor::zeros(&[1, 64, 64]));
        let prompt = r.p1.encode(&mut r.tape, mask).unwrap();
        let out1 = r.s1.forward(&mut r.tape, img, &prompt).unwrap();
        let logits2 = r.s2.forward(&mut r.tape, img, &prompt, &out1).unwrap();
        let loss = r.tape.mean_all(logits2).unwrap();
        r.tape.backward(loss).unwrap();
        let s1_params: Vec<_> = r
            .params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("stage1.px_conv"))
            .collect();
        assert!(!s1_params.is_empty());
        for e in s1_params {
            let g = r.tape.grad(e.var).expect("stage-1 grad through skip");
            assert!(g.iter().any(|&v| v != 0.0), "{} grad all zero", e.name);
        }
    }
}
