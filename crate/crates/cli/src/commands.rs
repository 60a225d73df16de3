//! Subcommand implementations, generic over the run scalar type.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use emstack_model::checkpoint::file_sha256_hex;
use emstack_model::model::{load_model, save_model};
use emstack_model::optim::AdamW;
use emstack_model::{AblationFlags, SliceModel};
use emstack_pipeline::ablate::{ablation_row, ablation_table, AblationBench, AblationRow};
use emstack_pipeline::eval::{eval_table, eval_volume, metrics_report, EvalResult};
use emstack_pipeline::manifest::RunManifest;
use emstack_pipeline::masks::save_masks;
use emstack_pipeline::train::{train, train_slice_count};
use emstack_pipeline::{
    load_stack, make_synthetic_volume, save_slice_dir, segment_volume, SynthKind, VolumeStack,
};
use emstack_tensor::{Scalar, Tape};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Line-based log fanned out to stdout and an optional file.
pub struct TeeLog {
    file: Option<std::fs::File>,
    quiet: bool,
}

impl TeeLog {
    pub fn create(path: Option<&Path>, quiet: bool) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
                }
                Some(
                    std::fs::File::create(p)
                        .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
                )
            }
            None => None,
        };
        Ok(TeeLog { file, quiet })
    }
}

impl Write for TeeLog {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        if !self.quiet {
            std::io::stdout().write_all(buf)?;
        }
        if let Some(f) = &mut self.file {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        std::io::stdout().flush()
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.io.out_dir);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_volumes<T: Scalar>(cfg: &RunConfig) -> Result<Vec<VolumeStack<T>>> {
    if cfg.io.stacks.is_empty() {
        return Err(CliError::Config(
            "io.stacks is empty; nothing to process".into(),
        ));
    }
    let mut out = Vec::new();
    for (i, s) in cfg.io.stacks.iter().enumerate() {
        let masks = cfg.io.mask_dirs.get(i).map(PathBuf::from);
        let stack = load_stack(Path::new(s), masks.as_deref())?;
        out.push(stack);
    }
    Ok(out)
}

fn checkpoint_for_reading(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.io.checkpoint.is_empty() {
        return Err(CliError::Config(
            "io.checkpoint is not set; point it at a trained model".into(),
        ));
    }
    let path = PathBuf::from(&cfg.io.checkpoint);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn manifest_for(cfg: &RunConfig, command: &str, ckpt: Option<&Path>) -> Result<RunManifest> {
    let sha = match ckpt {
        Some(p) => Some(file_sha256_hex(p).map_err(CliError::from)?),
        None => None,
    };
    Ok(RunManifest {
        command: command.to_string(),
        seed: cfg.train.seed,
        threads: cfg.train.threads,
        threshold: cfg.infer.threshold,
        checkpoint: ckpt.map(|p| p.display().to_string()),
        checkpoint_sha256: sha,
        config_toml: cfg.to_toml()?,
        metrics: BTreeMap::new(),
    })
}

// ── synth ───────────────────────────────────────────────────────────

pub fn run_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let kind = SynthKind::parse(&cfg.synth.kind)
        .ok_or_else(|| CliError::Config(format!("unknown synth kind {:?}", cfg.synth.kind)))?;
    let dir = out_dir(cfg)?;
    let stack: VolumeStack<f32> = make_synthetic_volume(
        kind,
        cfg.synth.depth,
        cfg.synth.height,
        cfg.synth.width,
        cfg.synth.seed,
    )?;
    save_slice_dir(&stack, &dir, "slice")?;
    let manifest = manifest_for(cfg, "synth", None)?;
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(dir)
}

// ── train ───────────────────────────────────────────────────────────

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps_run: u64,
    pub holdout: Vec<EvalResult>,
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    match cfg.dtype.as_str() {
        "f64" => run_train_t::<f64>(cfg),
        _ => run_train_t::<f32>(cfg),
    }
}

fn run_train_t<T: Scalar>(cfg: &RunConfig) -> Result<TrainSummary> {
    let dir = out_dir(cfg)?;
    let volumes: Vec<VolumeStack<T>> = load_volumes(cfg)?;
    for v in &volumes {
        if v.labels.is_none() {
            return Err(CliError::Config(format!(
                "volume {} has no labels; training needs a masks directory",
                v.name
            )));
        }
    }
    let model_cfg = cfg.model_config()?;
    let ckpt_path = if cfg.io.checkpoint.is_empty() {
        dir.join("model.ckpt")
    } else {
        PathBuf::from(&cfg.io.checkpoint)
    };

    let mut tape = Tape::<T>::new();
    let (mut model, restored) = if ckpt_path.exists() {
        let (model, ckpt) = load_model::<T>(&ckpt_path, &mut tape)?;
        (model, Some(ckpt))
    } else {
        (
            SliceModel::build(
                &mut tape,
                model_cfg,
                AblationFlags::default(),
                cfg.train.seed,
            )?,
            None,
        )
    };
    let mut opt = AdamW::new(&tape, &model.active_params(), cfg.train.optim());
    if let Some(ckpt) = &restored {
        if let Some(step) = ckpt.meta.get("optim_step").and_then(|s| s.parse().ok()) {
            let entries: Vec<(String, Vec<T>)> = ckpt
                .entries
                .iter()
                .filter(|e| e.name.starts_with("optim."))
                .map(|e| (e.name.clone(), e.data.clone()))
                .collect();
            opt.restore_state(step, &entries)?;
        }
    }

    let mut log = TeeLog::create(Some(&dir.join("train.log")), false)?;
    let meta = BTreeMap::from([("seed".to_string(), cfg.train.seed.to_string())]);
    let outcome = train(
        &mut tape,
        &mut model,
        &mut opt,
        &volumes,
        &cfg.train,
        Some(&ckpt_path),
        &meta,
        &mut log,
    )?;

    // Final metrics on the held-out trailing slices of each volume.
    let mut holdout = Vec::new();
    for v in &volumes {
        let n_train = train_slice_count(v.depth(), cfg.train.holdout_fraction);
        if n_train >= v.depth() {
            continue;
        }
        let sub = VolumeStack::from_parts(
            format!("{}-holdout", v.name),
            v.slices[n_train..].to_vec(),
            Some(v.labels.as_ref().unwrap()[n_train..].to_vec()),
        )?;
        holdout.push(eval_volume(
            &mut tape,
            &mut model,
            &sub,
            cfg.infer.window,
            cfg.infer.overlap,
            cfg.infer.threshold,
        )?);
    }
    std::fs::write(dir.join("metrics.csv"), metrics_report(&holdout))
        .map_err(|e| CliError::Data(format!("metrics.csv: {e}")))?;
    writeln!(log, "{}", eval_table(&holdout)).ok();

    let mut manifest = manifest_for(cfg, "train", Some(&ckpt_path))?;
    for r in &holdout {
        manifest
            .metrics
            .insert(format!("{}_dice", r.dataset), r.dice_pct);
        manifest
            .metrics
            .insert(format!("{}_miou", r.dataset), r.miou_pct);
    }
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        steps_run: outcome.steps_run,
        holdout,
    })
}

// ── infer ───────────────────────────────────────────────────────────

pub fn run_infer(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    match cfg.dtype.as_str() {
        "f64" => run_infer_t::<f64>(cfg),
        _ => run_infer_t::<f32>(cfg),
    }
}

fn run_infer_t<T: Scalar>(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    let ckpt_path = checkpoint_for_reading(cfg)?;
    let volumes: Vec<VolumeStack<T>> = load_volumes(cfg)?;
    let mut tape = Tape::<T>::new();
    let (mut model, _) = load_model::<T>(&ckpt_path, &mut tape)?;
    let mut written = Vec::new();
    for v in &volumes {
        let masks = segment_volume(&mut tape, &mut model, v, cfg.infer.window, cfg.infer.overlap)?;
        let mut manifest = manifest_for(cfg, "infer", Some(&ckpt_path))?;
        if let Some(labels) = &v.labels {
            let (dice, miou, _) =
                emstack_pipeline::eval::evaluate_masks(&masks, labels, cfg.infer.threshold)?;
            manifest.metrics.insert("dice".into(), 100.0 * dice);
            manifest.metrics.insert("miou".into(), 100.0 * miou);
        }
        let vol_dir = dir.join(&v.name);
        save_masks(&masks, v, &vol_dir, cfg.infer.threshold, &manifest)?;
        written.push(vol_dir);
    }
    Ok(written)
}

// ── eval ────────────────────────────────────────────────────────────

pub fn run_eval(cfg: &RunConfig) -> Result<Vec<EvalResult>> {
    match cfg.dtype.as_str() {
        "f64" => run_eval_t::<f64>(cfg),
        _ => run_eval_t::<f32>(cfg),
    }
}

fn run_eval_t<T: Scalar>(cfg: &RunConfig) -> Result<Vec<EvalResult>> {
    let dir = out_dir(cfg)?;
    let ckpt_path = checkpoint_for_reading(cfg)?;
    let volumes: Vec<VolumeStack<T>> = load_volumes(cfg)?;
    let mut tape = Tape::<T>::new();
    let (mut model, _) = load_model::<T>(&ckpt_path, &mut tape)?;
    let mut results = Vec::new();
    for v in &volumes {
        if v.labels.is_none() {
            return Err(CliError::Config(format!(
                "volume {} has no labels; eval needs masks",
                v.name
            )));
        }
        results.push(eval_volume(
            &mut tape,
            &mut model,
            v,
            cfg.infer.window,
            cfg.infer.overlap,
            cfg.infer.threshold,
        )?);
    }
    print!("{}", eval_table(&results));
    std::fs::write(dir.join("metrics.csv"), metrics_report(&results))
        .map_err(|e| CliError::Data(format!("metrics.csv: {e}")))?;
    let mut manifest = manifest_for(cfg, "eval", Some(&ckpt_path))?;
    for r in &results {
        manifest
            .metrics
            .insert(format!("{}_dice", r.dataset), r.dice_pct);
        manifest
            .metrics
            .insert(format!("{}_miou", r.dataset), r.miou_pct);
    }
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(results)
}

// ── ablate ──────────────────────────────────────────────────────────

pub fn run_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    match cfg.dtype.as_str() {
        "f64" => run_ablate_t::<f64>(cfg),
        _ => run_ablate_t::<f32>(cfg),
    }
}

fn run_ablate_t<T: Scalar>(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let dir = out_dir(cfg)?;
    let kind = SynthKind::parse(&cfg.ablate.kind)
        .ok_or_else(|| CliError::Config(format!("unknown benchmark kind {:?}", cfg.ablate.kind)))?;
    let bench = AblationBench {
        kind,
        depth: cfg.ablate.depth,
        size: cfg.ablate.size,
        data_seed: cfg.ablate.data_seed,
    };
    let model_cfg = cfg.model_config()?;
    let mut tcfg = cfg.train.clone();
    tcfg.steps = cfg.ablate.steps;
    tcfg.eval_every = 0;
    tcfg.checkpoint_every = 0;
    let mut rows = Vec::new();
    for flags in AblationFlags::all_combinations() {
        let row =
            ablation_row::<T>(&bench, flags, &cfg.ablate.seeds, &model_cfg, &tcfg)?;
        println!(
            "{} dice={:.1} miou={:.1}",
            row.flags.label(),
            row.mean_dice_pct,
            row.mean_miou_pct
        );
        rows.push(row);
    }
    std::fs::write(dir.join("ablation.csv"), ablation_table(&rows))
        .map_err(|e| CliError::Data(format!("ablation.csv: {e}")))?;
    let manifest = manifest_for(cfg, "ablate", None)?;
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(rows)
}

/// Persist a freshly built, untrained model; handy for smoke-testing the
/// infer/eval path without a training run.
pub fn write_untrained_checkpoint(cfg: &RunConfig, path: &Path) -> Result<()> {
    match cfg.dtype.as_str() {
        "f64" => write_untrained_t::<f64>(cfg, path),
        _ => write_untrained_t::<f32>(cfg, path),
    }
}

fn write_untrained_t<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut tape = Tape::<T>::new();
    let model = SliceModel::<T>::build(
        &mut tape,
        cfg.model_config()?,
        AblationFlags::default(),
        cfg.train.seed,
    )?;
    save_model(path, &tape, &model, None, &BTreeMap::new())?;
    Ok(())
}
