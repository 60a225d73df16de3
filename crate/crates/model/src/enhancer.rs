//! Multi-scale feature fusion: the 1/8 and 1/16 maps are upsampled with
//! residual smoothing blocks, fused with the 1/4 map through channel
//! reduction and dual 3×3 convolutions, and re-anchored to the 1/4 map by a
//! final residual.

use emstack_tensor::{Scalar, Tape, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{BatchNorm2d, Conv2dLayer, NormMode};
use crate::params::ParamSet;

struct SmoothBlock<T: Scalar> {
    conv: Conv2dLayer,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> SmoothBlock<T> {
    fn new(
        tape: &mut Tape<T>,
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SmoothBlock {
            conv: Conv2dLayer::with_bias(
                tape,
                params,
                &format!("{name}.conv"),
                channels,
                channels,
                3,
                1,
                1,
                false,
                false,
                rng,
            ),
            bn: BatchNorm2d::new(tape, params, &format!("{name}.bn"), channels),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: NormMode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, mode)?;
        Ok(tape.relu(y)?)
    }
}

pub struct Enhancer<T: Scalar> {
    smooth8: SmoothBlock<T>,
    smooth16: SmoothBlock<T>,
    reduce: Conv2dLayer,
    fuse_bn: BatchNorm2d<T>,
    fuse_conv1: Conv2dLayer,
    fuse_conv2: Conv2dLayer,
    proj_out: Conv2dLayer,
}

impl<T: Scalar> Enhancer<T> {
    pub fn build(tape: &mut Tape<T>, params: &mut ParamSet, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = channels;
        Enhancer {
            smooth8: SmoothBlock::new(tape, params, "enhancer.smooth8", c, &mut rng),
            smooth16: SmoothBlock::new(tape, params, "enhancer.smooth16", c, &mut rng),
            reduce: Conv2dLayer::with_bias(tape, params, "enhancer.reduce", 3 * c, c, 1, 1, 0, false, false, &mut rng),
            fuse_bn: BatchNorm2d::new(tape, params, "enhancer.fuse_bn", c),
            fuse_conv1: Conv2dLayer::new(tape, params, "enhancer.fuse_conv1", c, c, 3, 1, 1, false, &mut rng),
            fuse_conv2: Conv2dLayer::new(tape, params, "enhancer.fuse_conv2", c, c, 3, 1, 1, false, &mut rng),
            proj_out: Conv2dLayer::new(tape, params, "enhancer.proj_out", c, c, 1, 1, 0, false, &mut rng),
        }
    }

    pub fn enhance(
        &mut self,
        tape: &mut Tape<T>,
        f4: Var,
        f8: Var,
        f16: Var,
        mode: NormMode,
    ) -> Result<Var> {
        let s4 = tape.data(f4).shape().to_vec();
        let s8 = tape.data(f8).shape().to_vec();
        let s16 = tape.data(f16).shape().to_vec();
        let ratio_ok = s4[0] == s8[0]
            && s8[0] == s16[0]
            && s8[1] * 2 == s4[1]
            && s8[2] * 2 == s4[2]
            && s16[1] * 4 == s4[1]
            && s16[2] * 4 == s4[2];
        if !ratio_ok {
            return Err(TensorError::DimMismatch {
                op: "enhance",
                lhs: s4,
                rhs: s8,
            }
            .into());
        }
        let (h, w) = (s4[1], s4[2]);

        let u8_ = tape.bilinear_resize(f8, h, w)?;
        let s8_ = self.smooth8.forward(tape, u8_, mode)?;
        let u8_ = tape.add(u8_, s8_)?;

        let u16 = tape.bilinear_resize(f16, h, w)?;
        let s16_ = self.smooth16.forward(tape, u16, mode)?;
        let u16 = tape.add(u16, s16_)?;

        let cat = tape.concat(&[f4, u8_, u16], 0)?;
        let x = self.reduce.forward(tape, cat)?;
        let x = self.fuse_bn.forward(tape, x, mode)?;
        let x = self.fuse_conv1.forward(tape, x)?;
        let x = tape.relu(x)?;
        let x = self.fuse_conv2.forward(tape, x)?;
        let x = tape.relu(x)?;
        let x = self.proj_out.forward(tape, x)?;
        Ok(tape.add(x, f4)?)
    }

    pub fn buffers(&self) -> Vec<(String, Vec<T>)> {
        let mut out = self.smooth8.bn.buffers();
        out.extend(self.smooth16.bn.buffers());
        out.extend(self.fuse_bn.buffers());
        out
    }

    pub fn set_buffer(&mut self, name: &str, data: &[T]) -> bool {
        self.smooth8.bn.set_buffer(name, data)
            || self.smooth16.bn.set_buffer(name, data)
            || self.fuse_bn.set_buffer(name, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use emstack_tensor::Tensor;
    use rand::Rng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn output_matches_f4_shape() {
        let mut tape = Tape::new();
        let mut params = ParamSet::new();
        let mut enh = Enhancer::build(&mut tape, &mut params, 32, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f4 = tape.constant(rand_map(&mut rng, 32, 16, 16));
        let f8 = tape.constant(rand_map(&mut rng, 32, 8, 8));
        let f16 = tape.constant(rand_map(&mut rng, 32, 4, 4));
        let out = enh.enhance(&mut tape, f4, f8, f16, NormMode::Train).unwrap();
        assert_eq!(tape.data(out).shape(), &[32, 16, 16]);
    }

    #[test]
    fn ratio_violation_is_a_dimension_error() {
        let mut tape = Tape::<f64>::new();
        let mut params = ParamSet::new();
        let mut enh = Enhancer::build(&mut tape, &mut params, 8, 5);
        let f4 = tape.constant(Tensor::zeros(&[8, 16, 16]));
        let f8 = tape.constant(Tensor::zeros(&[8, 9, 8]));
        let f16 = tape.constant(Tensor::zeros(&[8, 4, 4]));
        assert!(enh.enhance(&mut tape, f4, f8, f16, NormMode::Train).is_err());
    }

    #[test]
    fn zeroed_weights_reduce_to_the_final_residual() {
        let mut tape = Tape::new();
        let mut params = ParamSet::new();
        let mut enh = Enhancer::build(&mut tape, &mut params, 8, 5);
        // Zero every enhancer conv weight and bias; BN stays at gamma=1,
        // beta=0 which maps zero features to zero.
        for e in params.entries() {
            if e.name.contains("conv") || e.name.contains("reduce") || e.name.contains("proj_out")
            {
                let t = tape.data_mut(e.var);
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f4t = rand_map(&mut rng, 8, 8, 8);
        let f4 = tape.constant(f4t.clone());
        let f8 = tape.constant(rand_map(&mut rng, 8, 4, 4));
        let f16 = tape.constant(rand_map(&mut rng, 8, 2, 2));
        let out = enh.enhance(&mut tape, f4, f8, f16, NormMode::Train).unwrap();
        assert_eq!(tape.data(out).data(), f4t.data());
    }

    #[test]
    fn every_input_influences_the_output() {
        let mut tape = Tape::new();
        let mut params = ParamSet::new();
        let mut enh = Enhancer::build(&mut tape, &mut params, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f4 = rand_map(&mut rng, 8, 8, 8);
        let f8 = rand_map(&mut rng, 8, 4, 4);
        let f16 = rand_map(&mut rng, 8, 2, 2);
        let run = |enh: &mut Enhancer<f64>, tape: &mut Tape<f64>, a: &Tensor<f64>, b: &Tensor<f64>, c: &Tensor<f64>| {
            let av = tape.constant(a.clone());
            let bv = tape.constant(b.clone());
            let cv = tape.constant(c.clone());
            let out = enh.enhance(tape, av, bv, cv, NormMode::Eval).unwrap();
            tape.detach(out)
        };
        let base = run(&mut enh, &mut tape, &f4, &f8, &f16);
        let z4 = run(&mut enh, &mut tape, &Tensor::zeros(&[8, 8, 8]), &f8, &f16);
        let z8 = run(&mut enh, &mut tape, &f4, &Tensor::zeros(&[8, 4, 4]), &f16);
        let z16 = run(&mut enh, &mut tape, &f4, &f8, &Tensor::zeros(&[8, 2, 2]));
        assert!(base.max_abs_diff(&z4) > 0.0);
        assert!(base.max_abs_diff(&z8) > 0.0);
        assert!(base.max_abs_diff(&z16) > 0.0);
    }

    #[test]
    fn perturbing_f4_with_zero_weights_shifts_output_by_exactly_delta() {
        let mut tape = Tape::new();
        let mut params = ParamSet::new();
        let mut enh = Enhancer::build(&mut tape, &mut params, 8, 5);
        for e in params.entries() {
            if e.name.contains("conv") || e.name.contains("reduce") || e.name.contains("proj_out")
            {
                for v in tape.data_mut(e.var).data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f4 = rand_map(&mut rng, 8, 8, 8);
        let delta = rand_map(&mut rng, 8, 8, 8).map(|v| v * 0.1);
        let f8 = rand_map(&mut rng, 8, 4, 4);
        let f16 = rand_map(&mut rng, 8, 2, 2);
        let mut run = |f4t: &Tensor<f64>| {
            let av = tape.constant(f4t.clone());
            let bv = tape.constant(f8.clone());
            let cv = tape.constant(f16.clone());
            let out = enh.enhance(&mut tape, av, bv, cv, NormMode::Train).unwrap();
            tape.detach(out)
        };
        let base = run(&f4);
        let mut shifted = f4.clone();
        for (s, d) in shifted.data_mut().iter_mut().zip(delta.data()) {
            *s += d;
        }
        let moved = run(&shifted);
        for ((m, b), d) in moved.data().iter().zip(base.data()).zip(delta.data()) {
            assert!((m - b - d).abs() < 1e-12);
        }
    }
}
