//! Training losses: soft Dice and logit-space binary cross-entropy, combined
//! with equal weights.

use emstack_tensor::{Scalar, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const DICE_EPS: f64 = 1e-6;

/// Component weights of the combined loss; equal by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_dice: f64,
    pub w_bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_dice: 0.5,
            w_bce: 0.5,
        }
    }
}

/// Soft Dice loss on probabilities: 1 − (2Σpt + ε)/(Σp + Σt + ε).
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if tape.data(pred).shape() != target.shape() {
        return Err(TensorError::DimMismatch {
            op: "dice_loss",
            lhs: tape.data(pred).shape().to_vec(),
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    let eps = T::from_f64(DICE_EPS);
    let two = T::from_f64(2.0);
    let t = tape.constant(target.clone());
    let inter = tape.mul(pred, t)?;
    let inter = tape.sum_all(inter)?;
    let sum_p = tape.sum_all(pred)?;
    let sum_t = tape.sum_all(t)?;
    let numer = tape.affine(inter, two, eps)?;
    let denom = tape.add(sum_p, sum_t)?;
    let denom = tape.affine(denom, T::one(), eps)?;
    let frac = tape.div(numer, denom)?;
    Ok(tape.affine(frac, -T::one(), T::one())?)
}

/// Mean binary cross-entropy from logits (numerically stable form).
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    Ok(tape.bce_with_logits(logits, target)?)
}

/// Weighted sum of Dice (on sigmoid probabilities) and BCE (on logits).
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    probs: Var,
    target: &Tensor<T>,
    weights: LossWeights,
) -> Result<Var> {
    let d = dice_loss(tape, probs, target)?;
    let b = bce_loss(tape, logits, target)?;
    let wd = tape.scale(d, T::from_f64(weights.w_dice))?;
    let wb = tape.scale(b, T::from_f64(weights.w_bce))?;
    Ok(tape.add(wd, wb)?)
}

/// Downsample a binary mask by average pooling then re-thresholding at 0.5;
/// used to build the stage-1 supervision target.
pub fn downsample_mask<T: Scalar>(mask: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[1, oh, ow]);
    let half = T::from_f64(0.5);
    let area = T::from_f64((factor * factor) as f64);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = T::zero();
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += mask.at3(0, oy * factor + dy, ox * factor + dx);
                }
            }
            if acc / area >= half {
                out.data_mut()[oy * ow + ox] = T::one();
            }
        }
    }
    out
}
