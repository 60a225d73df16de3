use emstack_model::metrics::{binarize, symmetric_difference};
use emstack_model::optim::AdamW;
use emstack_model::{AblationFlags, ModelConfig, SliceModel};
use emstack_pipeline::train::{train, TrainConfig};
use emstack_pipeline::{make_synthetic_volume, segment_volume, SynthKind};
use emstack_tensor::Tape;
use std::collections::BTreeMap;
use std::time::Instant;

fn run(kind: SynthKind, flags: AblationFlags, seed: u64, steps: u64, size: usize, depth: usize)
    -> (f64, f64) {
    let volume = make_synthetic_volume::<f32>(kind, depth, size, size, 7).unwrap();
    let mut tape = Tape::<f32>::new();
    let mut model = SliceModel::build(&mut tape, ModelConfig::toy(), flags, seed).unwrap();
    let tcfg = TrainConfig {
        lr: 2e-3, steps, clip_len: 3, seed,
        eval_window: size, eval_overlap: 16,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&tape, &model.active_params(), tcfg.optim());
    let mut sink = std::io::sink();
    train(&mut tape, &mut model, &mut opt, std::slice::from_ref(&volume), &tcfg, None, &BTreeMap::new(), &mut sink).unwrap();
    // inference on train slices
    let n_train = emstack_pipeline::train::train_slice_count(depth, 0.2);
    let sub = emstack_pipeline::VolumeStack::from_parts(
        "s".to_string(), volume.slices[..n_train].to_vec(),
        Some(volume.labels.as_ref().unwrap()[..n_train].to_vec())).unwrap();
    let masks = segment_volume(&mut tape, &mut model, &sub, size, 16).unwrap();
    let mut dices = Vec::new();
    for (m, l) in masks.iter().zip(volume.labels.as_ref().unwrap()) {
        dices.push(emstack_model::metrics::dice_score(&binarize(m, 0.5), &binarize(l, 0.5)).unwrap());
    }
    let dice = dices.iter().sum::<f64>() / dices.len() as f64;
    let mut sd = 0.0;
    for t in 1..masks.len() {
        sd += symmetric_difference(&binarize(&masks[t], 0.5), &binarize(&masks[t-1], 0.5)).unwrap() as f64;
    }
    (dice, sd / (masks.len() - 1) as f64)
}

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let t0 = Instant::now();
    let full = AblationFlags::default();
    let baseline = AblationFlags { enhancer: false, memory: false, bidirectional: false };
    let no_mem = AblationFlags { memory: false, ..full };
    let mut acc = vec![0.0; 4];
    for seed in [1u64, 2, 3] {
        let (d_full, _) = run(SynthKind::Branching, full, seed, steps, 32, 10);
        let (d_base, _) = run(SynthKind::Branching, baseline, seed, steps, 32, 10);
        let (_, c_full) = run(SynthKind::DriftingBlob, full, seed, steps, 32, 10);
        let (_, c_nomem) = run(SynthKind::DriftingBlob, no_mem, seed, steps, 32, 10);
        println!("seed {seed}: branching dice full={d_full:.3} base={d_base:.3} | blob symdiff full={c_full:.1} nomem={c_nomem:.1}");
        acc[0] += d_full; acc[1] += d_base; acc[2] += c_full; acc[3] += c_nomem;
    }
    println!("MEANS: dice full={:.3} base={:.3} | symdiff full={:.1} nomem={:.1}  ({:.0}s)",
        acc[0]/3.0, acc[1]/3.0, acc[2]/3.0, acc[3]/3.0, t0.elapsed().as_secs_f64());
}
