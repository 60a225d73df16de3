//! Metric evaluation against labels and CSV report rendering.

use emstack_model::metrics::{binarize, dice_score, mean_iou};
use emstack_model::SliceModel;
use emstack_tensor::{Scalar, Tape, Tensor};

use crate::error::{PipelineError, Result};
use crate::infer::segment_volume;
use crate::stack::VolumeStack;

/// Per-volume evaluation; Dice and mIoU are slice means in percent.
pub struct EvalResult {
    pub dataset: String,
    pub dice_pct: f64,
    pub miou_pct: f64,
    pub per_slice: Vec<(f64, f64)>,
}

/// Compare probability masks against binary labels at `threshold`.
pub fn evaluate_masks<T: Scalar>(
    preds: &[Tensor<T>],
    labels: &[Tensor<T>],
    threshold: f64,
) -> Result<(f64, f64, Vec<(f64, f64)>)> {
    if preds.len() != labels.len() {
        return Err(PipelineError::Format(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut per_slice = Vec::with_capacity(preds.len());
    for (p, l) in preds.iter().zip(labels.iter()) {
        let pb = binarize(p, threshold);
        let lb = binarize(l, 0.5);
        let d = dice_score(&pb, &lb).map_err(PipelineError::Model)?;
        let iou = mean_iou(&pb, &lb).map_err(PipelineError::Model)?;
        per_slice.push((d, iou));
    }
    let n = per_slice.len().max(1) as f64;
    let dice = per_slice.iter().map(|(d, _)| d).sum::<f64>() / n;
    let miou = per_slice.iter().map(|(_, m)| m).sum::<f64>() / n;
    Ok((dice, miou, per_slice))
}

/// Run inference on a labeled stack and evaluate it.
pub fn eval_volume<T: Scalar>(
    tape: &mut Tape<T>,
    model: &mut SliceModel<T>,
    stack: &VolumeStack<T>,
    window: usize,
    overlap: usize,
    threshold: f64,
) -> Result<EvalResult> {
    let labels = stack
        .labels
        .as_ref()
        .ok_or_else(|| PipelineError::Config(format!("volume {} has no labels", stack.name)))?;
    let masks = segment_volume(tape, model, stack, window, overlap)?;
    let (dice, miou, per_slice) = evaluate_masks(&masks, labels, threshold)?;
    Ok(EvalResult {
        dataset: stack.name.clone(),
        dice_pct: 100.0 * dice,
        miou_pct: 100.0 * miou,
        per_slice,
    })
}

/// Three-column table mirroring the metric pair: dataset, dice, miou.
pub fn eval_table(results: &[EvalResult]) -> String {
    let mut out = String::from("dataset,dice,miou\n");
    for r in results {
        out.push_str(&format!("{},{:.1},{:.1}\n", r.dataset, r.dice_pct, r.miou_pct));
    }
    out
}

/// Four-column per-class metric report: dataset, class, dice, miou.
pub fn metrics_report(results: &[EvalResult]) -> String {
    let mut out = String::from("dataset,class,dice,miou\n");
    for r in results {
        out.push_str(&format!(
            "{},foreground,{:.1},{:.1}\n",
            r.dataset, r.dice_pct, r.miou_pct
        ));
    }
    out
}
