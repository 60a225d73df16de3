//! Segmentation metrics on binary masks.

use emstack_tensor::{Scalar, Tensor};

use crate::error::{ModelError, Result};

/// Binarize a probability map at `threshold`.
pub fn binarize<T: Scalar>(mask: &Tensor<T>, threshold: f64) -> Vec<bool> {
    mask.data().iter().map(|v| v.as_f64() > threshold).collect()
}

fn check_len(op: &'static str, a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(ModelError::Shape {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// Dice coefficient 2|P∩T| / (|P|+|T|); 1.0 when both masks are empty.
pub fn dice_score(pred: &[bool], target: &[bool]) -> Result<f64> {
    check_len("dice_score", pred, target)?;
    let inter = pred.iter().zip(target).filter(|(p, t)| **p && **t).count();
    let p: usize = pred.iter().filter(|v| **v).count();
    let t: usize = target.iter().filter(|v| **v).count();
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

fn class_iou(pred: &[bool], target: &[bool], class: bool) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p == class, t == class);
        if p && t {
            inter += 1;
        }
        if p || t {
            union += 1;
        }
    }
    if union == 0 {
        1.0 // both masks empty for this class
    } else {
        inter as f64 / union as f64
    }
}

/// Mean IoU over the foreground and background classes.
pub fn mean_iou(pred: &[bool], target: &[bool]) -> Result<f64> {
    check_len("mean_iou", pred, target)?;
    Ok(0.5 * (class_iou(pred, target, true) + class_iou(pred, target, false)))
}

/// Foreground-only IoU (used by the Dice/IoU algebra checks).
pub fn foreground_iou(pred: &[bool], target: &[bool]) -> Result<f64> {
    check_len("foreground_iou", pred, target)?;
    Ok(class_iou(pred, target, true))
}

/// Pixel count of the symmetric difference between two binary masks.
pub fn symmetric_difference(a: &[bool], b: &[bool]) -> Result<usize> {
    check_len("symmetric_difference", a, b)?;
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}
