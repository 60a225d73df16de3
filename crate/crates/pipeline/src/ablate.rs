//! Component ablations: train and evaluate a model per on/off combination of
//! {feature enhancer, memory attention, bi-directional prompting} under a
//! shared seed and step budget.
//!
//! Off-paths: no enhancer feeds the decoders f4 directly; no memory makes
//! slot attention the identity with no bank updates; no bi-directional
//! prompting decodes in a single stage from a zero prompt and upsamples the
//! quarter-resolution logits.

use std::collections::BTreeMap;

use emstack_model::metrics::{binarize, dice_score, mean_iou, symmetric_difference};
use emstack_model::optim::AdamW;
use emstack_model::{AblationFlags, ModelConfig, SliceModel};
use emstack_tensor::{Scalar, Tape};

use crate::error::Result;
use crate::infer::segment_volume;
use crate::stack::VolumeStack;
use crate::synth::{make_synthetic_volume, SynthKind};
use crate::train::{train, train_slice_count, TrainConfig};

/// Mean metrics of one component combination over its seeds.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub mean_dice_pct: f64,
    pub mean_miou_pct: f64,
    /// Mean pixel count of consecutive-slice mask symmetric differences.
    pub mean_inter_slice_symdiff: f64,
}

/// Benchmark geometry shared by all rows of one study.
#[derive(Clone, Debug)]
pub struct AblationBench {
    pub kind: SynthKind,
    pub depth: usize,
    pub size: usize,
    pub data_seed: u64,
}

/// Train one model per seed with the given flags and average the metrics of
/// full inference over the training slices.
pub fn ablation_row<T: Scalar>(
    bench: &AblationBench,
    flags: AblationFlags,
    seeds: &[u64],
    model_cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<AblationRow> {
    let volume: VolumeStack<T> =
        make_synthetic_volume(bench.kind, bench.depth, bench.size, bench.size, bench.data_seed)?;
    let labels = volume.labels.as_ref().expect("synthetic volumes are labeled");
    let n_train = train_slice_count(bench.depth, tcfg.holdout_fraction);
    let sub = VolumeStack::from_parts(
        volume.name.clone(),
        volume.slices[..n_train].to_vec(),
        Some(labels[..n_train].to_vec()),
    )?;

    let mut dices = Vec::new();
    let mut mious = Vec::new();
    let mut symdiffs = Vec::new();
    for &seed in seeds {
        let mut tape = Tape::<T>::new();
        let mut model = SliceModel::build(&mut tape, model_cfg.clone(), flags, seed)?;
        let mut opt = AdamW::new(&tape, &model.active_params(), tcfg.optim());
        let mut cfg = tcfg.clone();
        cfg.seed = seed;
        cfg.eval_window = bench.size.max(16);
        let mut sink = std::io::sink();
        train(
            &mut tape,
            &mut model,
            &mut opt,
            std::slice::from_ref(&volume),
            &cfg,
            None,
            &BTreeMap::new(),
            &mut sink,
        )?;
        let masks = segment_volume(&mut tape, &mut model, &sub, cfg.eval_window, 0)?;
        let mut run_dice = Vec::new();
        let mut run_miou = Vec::new();
        for (m, l) in masks.iter().zip(sub.labels.as_ref().unwrap()) {
            let p = binarize(m, 0.5);
            let t = binarize(l, 0.5);
            run_dice.push(dice_score(&p, &t)?);
            run_miou.push(mean_iou(&p, &t)?);
        }
        dices.push(run_dice.iter().sum::<f64>() / run_dice.len() as f64);
        mious.push(run_miou.iter().sum::<f64>() / run_miou.len() as f64);
        let mut sd = 0.0;
        for t in 1..masks.len() {
            sd += symmetric_difference(&binarize(&masks[t], 0.5), &binarize(&masks[t - 1], 0.5))?
                as f64;
        }
        symdiffs.push(sd / (masks.len() - 1).max(1) as f64);
    }
    let n = seeds.len() as f64;
    Ok(AblationRow {
        flags,
        mean_dice_pct: 100.0 * dices.iter().sum::<f64>() / n,
        mean_miou_pct: 100.0 * mious.iter().sum::<f64>() / n,
        mean_inter_slice_symdiff: symdiffs.iter().sum::<f64>() / n,
    })
}

/// CSV table of ablation rows, components marked on/off.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("enhancer,memory,bidirectional,dice,miou\n");
    for r in rows {
        let mark = |b: bool| if b { "on" } else { "off" };
        out.push_str(&format!(
            "{},{},{},{:.1},{:.1}\n",
            mark(r.flags.enhancer),
            mark(r.flags.memory),
            mark(r.flags.bidirectional),
            r.mean_dice_pct,
            r.mean_miou_pct
        ));
    }
    out
}
