//! Layer building blocks: thin structs holding parameter vars plus a forward
//! method on the tape.

use emstack_tensor::{Scalar, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{init_normal, init_uniform, ParamSet};

/// Fully connected layer on row-major token matrices: y = x·W (+ b).
pub struct Linear {
    pub weight: Var,       // [d_in, d_out]
    pub bias: Option<Var>, // [d_out]
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        frozen: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_bias(tape, params, name, d_in, d_out, frozen, true, rng)
    }

    /// A bias on an attention key projection shifts every score by the same
    /// amount and cancels in the softmax, so key projections skip it.
    #[allow(clippy::too_many_arguments)]
    pub fn with_bias<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        frozen: bool,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = params.register(
            tape,
            format!("{name}.weight"),
            init_uniform(rng, &[d_in, d_out], d_in),
            frozen,
        );
        let bias = bias.then(|| {
            params.register(
                tape,
                format!("{name}.bias"),
                Tensor::zeros(&[d_out]),
                frozen,
            )
        });
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => Ok(tape.add_bias_rows(y, b)?),
            None => Ok(y),
        }
    }
}

/// Frozen linear layer with a trainable low-rank bypass:
/// y = base(x) + scale · (x·A)·B.
///
/// A is Gaussian-initialized, B starts at zero, so a freshly built layer
/// computes exactly the frozen base function.
pub struct LoraLinear {
    pub base: Linear,
    pub down: Var, // [d_in, r]
    pub up: Var,   // [r, d_out]
    pub scale: f64,
}

impl LoraLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let base = Linear::new(tape, params, &format!("{name}.base"), d_in, d_out, true, rng);
        let down = params.register(
            tape,
            format!("{name}.lora_a"),
            init_normal(rng, &[d_in, rank], 0.02),
            false,
        );
        let up = params.register(
            tape,
            format!("{name}.lora_b"),
            Tensor::zeros(&[rank, d_out]),
            false,
        );
        LoraLinear {
            base,
            down,
            up,
            scale,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, with_lora: bool) -> Result<Var> {
        let y = self.base.forward(tape, x)?;
        if !with_lora {
            return Ok(y);
        }
        let mid = tape.matmul(x, self.down)?;
        let bypass = tape.matmul(mid, self.up)?;
        let scaled = tape.scale(bypass, T::from_f64(self.scale))?;
        Ok(tape.add(y, scaled)?)
    }
}

/// 2D convolution with optional per-channel bias.
pub struct Conv2dLayer {
    pub weight: Var, // [c_out, c_in, k, k]
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        frozen: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_bias(tape, params, name, c_in, c_out, k, stride, padding, frozen, true, rng)
    }

    /// A conv feeding straight into batch normalization drops its bias: the
    /// per-channel mean subtraction cancels any constant offset.
    #[allow(clippy::too_many_arguments)]
    pub fn with_bias<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        frozen: bool,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = params.register(
            tape,
            format!("{name}.weight"),
            init_uniform(rng, &[c_out, c_in, k, k], c_in * k * k),
            frozen,
        );
        let bias = bias.then(|| {
            params.register(
                tape,
                format!("{name}.bias"),
                Tensor::zeros(&[c_out]),
                frozen,
            )
        });
        Conv2dLayer {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, self.weight, self.stride, self.padding)?;
        match self.bias {
            Some(b) => Ok(tape.add_bias_chw(y, b)?),
            None => Ok(y),
        }
    }
}

/// Stride-s transposed convolution (kernel size == stride).
pub struct ConvT2dLayer {
    pub weight: Var, // [c_in, c_out, s, s]
    pub bias: Var,
    pub stride: usize,
}

impl ConvT2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = params.register(
            tape,
            format!("{name}.weight"),
            init_uniform(rng, &[c_in, c_out, stride, stride], c_in),
            false,
        );
        let bias = params.register(tape, format!("{name}.bias"), Tensor::zeros(&[c_out]), false);
        ConvT2dLayer {
            weight,
            bias,
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.conv_transpose2d(x, self.weight, self.stride)?;
        Ok(tape.add_bias_chw(y, self.bias)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch normalization over the spatial extent, with running statistics
/// (momentum 0.1, ε = 1e-5) used in eval mode.
pub struct BatchNorm2d<T: Scalar> {
    pub name: String,
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(tape: &mut Tape<T>, params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = params.register(
            tape,
            format!("{name}.gamma"),
            Tensor::filled(&[channels], T::one()),
            false,
        );
        let beta = params.register(
            tape,
            format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            false,
        );
        BatchNorm2d {
            name: name.to_string(),
            gamma,
            beta,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: NormMode) -> Result<Var> {
        match mode {
            NormMode::Train => {
                let (y, mean, var) = tape.batchnorm_train(x, self.gamma, self.beta, self.eps)?;
                let m = T::from_f64(self.momentum);
                let keep = T::one() - m;
                for (r, b) in self.running_mean.iter_mut().zip(mean.iter()) {
                    *r = keep * *r + m * *b;
                }
                for (r, b) in self.running_var.iter_mut().zip(var.iter()) {
                    *r = keep * *r + m * *b;
                }
                Ok(y)
            }
            NormMode::Eval => Ok(tape.batchnorm_eval(
                x,
                self.gamma,
                self.beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            )?),
        }
    }

    pub fn buffers(&self) -> Vec<(String, Vec<T>)> {
        vec![
            (format!("{}.running_mean", self.name), self.running_mean.clone()),
            (format!("{}.running_var", self.name), self.running_var.clone()),
        ]
    }

    pub fn set_buffer(&mut self, name: &str, data: &[T]) -> bool {
        if name == format!("{}.running_mean", self.name) {
            self.running_mean = data.to_vec();
            true
        } else if name == format!("{}.running_var", self.name) {
            self.running_var = data.to_vec();
            true
        } else {
            false
        }
    }
}

/// Layer normalization over the last axis.
pub struct LayerNormLayer {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        frozen: bool,
    ) -> Self {
        let gamma = params.register(
            tape,
            format!("{name}.gamma"),
            Tensor::filled(&[dim], T::one()),
            frozen,
        );
        let beta = params.register(tape, format!("{name}.beta"), Tensor::zeros(&[dim]), frozen);
        LayerNormLayer {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, self.gamma, self.beta, self.eps)?)
    }
}

/// Two-layer MLP with GELU.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        frozen: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fc1 = Linear::new(tape, params, &format!("{name}.fc1"), d_in, d_hidden, frozen, rng);
        let fc2 = Linear::new(tape, params, &format!("{name}.fc2"), d_hidden, d_out, frozen, rng);
        Mlp { fc1, fc2 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }
}

/// Multi-head scaled dot-product attention between token matrices.
///
/// Queries, keys and values may come from different sources (cross
/// attention). Heads are computed as column slices and recombined through
/// per-head blocks of the output projection.
pub struct Attention {
    pub q: QueryProj,
    pub k: Linear,
    pub v: VProj,
    pub proj: Linear,
    pub heads: usize,
}

/// Query projection: plain or LoRA-bypassed.
pub enum QueryProj {
    Plain(Linear),
    Lora(LoraLinear),
}

/// Value projection: plain or LoRA-bypassed.
pub enum VProj {
    Plain(Linear),
    Lora(LoraLinear),
}

impl Attention {
    /// Fully trainable attention (decoder blocks).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Attention {
            q: QueryProj::Plain(Linear::new(tape, params, &format!("{name}.q"), dim, dim, false, rng)),
            k: Linear::with_bias(tape, params, &format!("{name}.k"), dim, dim, false, false, rng),
            v: VProj::Plain(Linear::new(tape, params, &format!("{name}.v"), dim, dim, false, rng)),
            proj: Linear::new(tape, params, &format!("{name}.proj"), dim, dim, false, rng),
            heads,
        }
    }

    /// Frozen-base attention with LoRA bypasses on the query and value
    /// projections (encoder blocks).
    #[allow(clippy::too_many_arguments)]
    pub fn new_lora<T: Scalar>(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rank: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Attention {
            q: QueryProj::Lora(LoraLinear::new(
                tape,
                params,
                &format!("{name}.q"),
                dim,
                dim,
                rank,
                scale,
                rng,
            )),
            k: Linear::with_bias(tape, params, &format!("{name}.k"), dim, dim, true, false, rng),
            v: VProj::Lora(LoraLinear::new(
                tape,
                params,
                &format!("{name}.v"),
                dim,
                dim,
                rank,
                scale,
                rng,
            )),
            proj: Linear::new(tape, params, &format!("{name}.proj"), dim, dim, true, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        with_lora: bool,
    ) -> Result<Var> {
        let q = match &self.q {
            QueryProj::Plain(l) => l.forward(tape, q_in)?,
            QueryProj::Lora(l) => l.forward(tape, q_in, with_lora)?,
        };
        let k = self.k.forward(tape, k_in)?;
        let v = match &self.v {
            VProj::Plain(l) => l.forward(tape, v_in)?,
            VProj::Lora(l) => l.forward(tape, v_in, with_lora)?,
        };
        let dim = tape.data(q).shape()[1];
        let dh = dim / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut mixed: Option<Var> = None;
        for h in 0..self.heads {
            let qh = tape.narrow(q, 1, h * dh, dh)?;
            let kh = tape.narrow(k, 1, h * dh, dh)?;
            let vh = tape.narrow(v, 1, h * dh, dh)?;
            let kt = tape.transpose2d(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1)?;
            let oh = tape.matmul(attn, vh)?;
            // Per-head block of the output projection; summing the blocks is
            // identical to concat-then-project.
            let w_block = tape.narrow(self.proj.weight, 0, h * dh, dh)?;
            let contrib = tape.matmul(oh, w_block)?;
            mixed = Some(match mixed {
                Some(acc) => tape.add(acc, contrib)?,
                None => contrib,
            });
        }
        let out = mixed.expect("at least one head");
        match self.proj.bias {
            Some(b) => Ok(tape.add_bias_rows(out, b)?),
            None => Ok(out),
        }
    }
}
