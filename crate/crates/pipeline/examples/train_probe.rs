use emstack_model::optim::AdamW;
use emstack_model::{AblationFlags, ModelConfig, SliceModel};
use emstack_pipeline::train::{mean_train_dice, train, TrainConfig};
use emstack_pipeline::{make_synthetic_volume, SynthKind};
use emstack_tensor::Tape;
use std::collections::BTreeMap;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);

    let volume = make_synthetic_volume::<f32>(SynthKind::DriftingBlob, 24, 64, 64, 7).unwrap();
    let mut tape = Tape::<f32>::new();
    let cfg = ModelConfig::toy();
    let mut model = SliceModel::build(&mut tape, cfg, AblationFlags::default(), 7).unwrap();
    let tcfg = TrainConfig {
        lr,
        steps,
        clip_len: 3,
        clips_per_step: 1,
        seed: 7,
        eval_every: 50,
        early_stop_dice: 0.95,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&tape, &model.active_params(), tcfg.optim());
    let t0 = Instant::now();
    let mut sink = std::io::sink();
    let out = train(
        &mut tape, &mut model, &mut opt, std::slice::from_ref(&volume),
        &tcfg, None, &BTreeMap::new(), &mut sink,
    ).unwrap();
    let el = t0.elapsed().as_secs_f64();
    let first = &out.records[0];
    let last = out.records.last().unwrap();
    println!("lr={lr} steps_run={} time={el:.0}s ({:.2}s/step)", out.steps_run, el / out.steps_run as f64);
    println!("loss: {:.4} -> {:.4} | dice eval: {:?} early_stop={}",
        first.l_total, last.l_total, out.last_eval_dice, out.early_stopped);
    let d = mean_train_dice(&mut tape, &mut model, &[volume], &tcfg).unwrap();
    println!("final train dice {d:.4}");
}
