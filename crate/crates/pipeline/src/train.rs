//! Training loop: clips of consecutive slices with scheduled self-prompting,
//! per-clip augmentation, the combined Dice+BCE loss on both decoder stages,
//! and AdamW updates.
//!
//! All per-step randomness (clip sampling, augmentation, prompt scheduling)
//! is derived from `hash(seed, step)`, so a run resumed from a checkpoint at
//! step s replays exactly the same schedule a straight run would.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use emstack_model::augment::{apply_geometric, apply_intensity, sample_transforms, AugmentConfig};
use emstack_model::loss::{bce_loss, dice_loss, downsample_mask, LossWeights};
use emstack_model::metrics::{binarize, dice_score};
use emstack_model::model::save_model;
use emstack_model::optim::{AdamW, OptimConfig};
use emstack_model::{NormMode, SliceModel, SliceState};
use emstack_tensor::{Scalar, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::infer::segment_volume;
use crate::stack::VolumeStack;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u64,
    /// Consecutive slices per clip. Three slices are the minimum that trains
    /// the memory q/k projections (the slot softmax needs two keys).
    pub clip_len: usize,
    pub clips_per_step: usize,
    pub seed: u64,
    /// Probability of prompting with the ground-truth previous mask instead
    /// of the model's own detached prediction.
    pub gt_prompt_prob: f64,
    /// Weight of the stage-1 (quarter-resolution) supervision term.
    pub stage1_weight: f64,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    /// Evaluate mean training-slice Dice every this many steps (0 = never).
    pub eval_every: u64,
    /// Stop once the evaluation reaches this Dice (0 = run all steps).
    pub early_stop_dice: f64,
    /// Write a rolling checkpoint every this many steps (0 = final only).
    pub checkpoint_every: u64,
    /// Fraction of trailing slices held out from training.
    pub holdout_fraction: f64,
    /// Kernel thread count; recorded for reproducibility (this build
    /// computes on one thread).
    pub threads: usize,
    /// Inference window/overlap used by in-training evaluations.
    pub eval_window: usize,
    pub eval_overlap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 0.01,
            steps: 500,
            clip_len: 3,
            clips_per_step: 1,
            seed: 7,
            gt_prompt_prob: 0.5,
            stage1_weight: 0.5,
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            eval_every: 0,
            early_stop_dice: 0.0,
            checkpoint_every: 0,
            holdout_fraction: 0.2,
            threads: 1,
            eval_window: 64,
            eval_overlap: 16,
        }
    }
}

impl TrainConfig {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..OptimConfig::default()
        }
    }
}

/// One structured log record per optimizer step.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_total: f64,
    pub l_dice: f64,
    pub l_bce: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

pub struct TrainOutcome {
    pub steps_run: u64,
    pub records: Vec<StepRecord>,
    pub early_stopped: bool,
    pub last_eval_dice: Option<f64>,
}

fn splitmix(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Number of leading slices available for training.
pub fn train_slice_count(depth: usize, holdout_fraction: f64) -> usize {
    let holdout = ((depth as f64 * holdout_fraction).ceil() as usize).min(depth - 1);
    depth - holdout
}

/// Separate Dice and BCE accumulators so the log can report the components
/// of L_total = w_dice·L_dice + w_bce·L_bce.
struct LossParts {
    dice: Vec<Var>,
    bce: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn clip_losses<T: Scalar>(
    tape: &mut Tape<T>,
    model: &mut SliceModel<T>,
    volume: &VolumeStack<T>,
    start: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    parts: &mut LossParts,
) -> Result<()> {
    let labels = volume
        .labels
        .as_ref()
        .ok_or_else(|| PipelineError::Config("training requires labeled volumes".into()))?;
    let (h, w) = (volume.height(), volume.width());
    let (geo, intensity) = sample_transforms(&cfg.augment, h, w, rng);

    let mut state = SliceState::fresh(&model.cfg, h, w);
    for offset in 0..cfg.clip_len {
        let z = start + offset;
        let (img, gt) = {
            let (i, m) = apply_geometric(&volume.slices[z], &labels[z], &geo);
            (apply_intensity(&i, &intensity), m)
        };
        // Scheduled self-prompting: ground truth of the previous slice at
        // the clip boundary and with probability gt_prompt_prob inside it;
        // otherwise the model's own detached prediction already in `state`.
        if offset == 0 {
            if z > 0 {
                let (_, prev_gt) = apply_geometric(&volume.slices[z - 1], &labels[z - 1], &geo);
                state.prev_mask = prev_gt;
            }
        } else if rng.random_bool(cfg.gt_prompt_prob) {
            let (_, prev_gt) = apply_geometric(&volume.slices[z - 1], &labels[z - 1], &geo);
            state.prev_mask = prev_gt;
        }
        let step = model.segment_slice(tape, &img, &mut state, NormMode::Train)?;

        let gt1 = downsample_mask(&gt, 4);
        let s1w = T::from_f64(cfg.stage1_weight);
        let p1 = tape.sigmoid(step.stage1_logits)?;
        let d1 = dice_loss(tape, p1, &gt1)?;
        let b1 = bce_loss(tape, step.stage1_logits, &gt1)?;
        let d2 = dice_loss(tape, step.final_probs, &gt)?;
        let b2 = bce_loss(tape, step.final_logits, &gt)?;
        let d1w = tape.scale(d1, s1w)?;
        let b1w = tape.scale(b1, s1w)?;
        parts.dice.push(tape.add(d2, d1w)?);
        parts.bce.push(tape.add(b2, b1w)?);
    }
    Ok(())
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut total = vars[0];
    for &v in &vars[1..] {
        total = tape.add(total, v)?;
    }
    Ok(tape.scale(total, T::from_f64(1.0 / vars.len() as f64))?)
}

/// Mean per-slice foreground Dice of full inference over the leading
/// (training) slices of each volume.
pub fn mean_train_dice<T: Scalar>(
    tape: &mut Tape<T>,
    model: &mut SliceModel<T>,
    volumes: &[VolumeStack<T>],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut dices = Vec::new();
    for volume in volumes {
        let labels = volume
            .labels
            .as_ref()
            .ok_or_else(|| PipelineError::Config("evaluation requires labels".into()))?;
        let n_train = train_slice_count(volume.depth(), cfg.holdout_fraction);
        let sub = VolumeStack::from_parts(
            volume.name.clone(),
            volume.slices[..n_train].to_vec(),
            Some(labels[..n_train].to_vec()),
        )?;
        let masks = segment_volume(tape, model, &sub, cfg.eval_window, cfg.eval_overlap)?;
        for (mask, label) in masks.iter().zip(labels.iter()) {
            let p = binarize(mask, 0.5);
            let t = binarize(label, 0.5);
            dices.push(dice_score(&p, &t).map_err(PipelineError::Model)?);
        }
    }
    Ok(dices.iter().sum::<f64>() / dices.len().max(1) as f64)
}

/// Run the training loop from `start_step`, logging one line per step.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    tape: &mut Tape<T>,
    model: &mut SliceModel<T>,
    opt: &mut AdamW<T>,
    volumes: &[VolumeStack<T>],
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
    extra_meta: &BTreeMap<String, String>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    if volumes.is_empty() {
        return Err(PipelineError::Config("no training volumes".into()));
    }
    for v in volumes {
        if v.labels.is_none() {
            return Err(PipelineError::Config(format!(
                "volume {} has no labels",
                v.name
            )));
        }
        let n_train = train_slice_count(v.depth(), cfg.holdout_fraction);
        if n_train < cfg.clip_len {
            return Err(PipelineError::Config(format!(
                "volume {} has {} training slices, need at least clip_len {}",
                v.name, n_train, cfg.clip_len
            )));
        }
    }
    if cfg.clip_len < 2 {
        return Err(PipelineError::Config(
            "clip_len must be >= 2 so the memory path participates".into(),
        ));
    }
    let mark = model.base_mark();
    let mut records = Vec::new();
    let mut early_stopped = false;
    let mut last_eval = None;

    let start_step = opt.step;
    let mut step = start_step;
    while step < cfg.steps {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed, step));
        let mut parts = LossParts {
            dice: Vec::new(),
            bce: Vec::new(),
        };
        for _ in 0..cfg.clips_per_step.max(1) {
            let vi = rng.random_range(0..volumes.len());
            let volume = &volumes[vi];
            let n_train = train_slice_count(volume.depth(), cfg.holdout_fraction);
            let start = rng.random_range(0..=(n_train - cfg.clip_len));
            clip_losses(tape, model, volume, start, cfg, &mut rng, &mut parts)?;
        }
        let dice_mean = mean_of(tape, &parts.dice)?;
        let bce_mean = mean_of(tape, &parts.bce)?;
        let wd = tape.scale(dice_mean, T::from_f64(cfg.loss.w_dice))?;
        let wb = tape.scale(bce_mean, T::from_f64(cfg.loss.w_bce))?;
        let total = tape.add(wd, wb)?;

        let record = StepRecord {
            step: step + 1,
            l_total: tape.data(total).data()[0].as_f64(),
            l_dice: tape.data(dice_mean).data()[0].as_f64(),
            l_bce: tape.data(bce_mean).data()[0].as_f64(),
            lr: cfg.lr,
            wall_ms: 0.0,
        };

        tape.backward(total)?;
        opt.step(tape).map_err(PipelineError::Model)?;
        opt.zero_grads(tape);
        tape.rollback(mark);
        step = opt.step;

        let record = StepRecord {
            wall_ms: t0.elapsed().as_secs_f64() * 1000.0,
            ..record
        };
        writeln!(
            log,
            "step={} l_total={:.6} l_dice={:.6} l_bce={:.6} lr={} wall_ms={:.1}",
            record.step, record.l_total, record.l_dice, record.l_bce, record.lr, record.wall_ms
        )
        .map_err(|e| PipelineError::io("training log", e))?;
        records.push(record);

        if let Some(path) = checkpoint_path {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                save_model(path, tape, model, Some(opt), extra_meta)
                    .map_err(PipelineError::Model)?;
            }
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let dice = mean_train_dice(tape, model, volumes, cfg)?;
            last_eval = Some(dice);
            writeln!(log, "eval step={step} train_dice={dice:.4}")
                .map_err(|e| PipelineError::io("training log", e))?;
            if cfg.early_stop_dice > 0.0 && dice >= cfg.early_stop_dice {
                early_stopped = true;
                break;
            }
        }
    }
    if let Some(path) = checkpoint_path {
        save_model(path, tape, model, Some(opt), extra_meta).map_err(PipelineError::Model)?;
    }
    Ok(TrainOutcome {
        steps_run: step - start_step,
        records,
        early_stopped,
        last_eval_dice: last_eval,
    })
}
