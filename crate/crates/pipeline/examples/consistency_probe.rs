use emstack_model::metrics::{binarize, symmetric_difference};
use emstack_model::optim::AdamW;
use emstack_model::{AblationFlags, ModelConfig, SliceModel};
use emstack_pipeline::train::{train, TrainConfig};
use emstack_pipeline::{make_synthetic_volume, segment_volume, SynthKind};
use emstack_tensor::{Tape, Tensor};
use std::collections::BTreeMap;

fn train_model(flags: AblationFlags, seed: u64, steps: u64, size: usize, depth: usize)
    -> (Tape<f32>, SliceModel<f32>) {
    let volume = make_synthetic_volume::<f32>(SynthKind::DriftingBlob, depth, size, size, 7).unwrap();
    let mut tape = Tape::<f32>::new();
    let mut model = SliceModel::build(&mut tape, ModelConfig::toy(), flags, seed).unwrap();
    let tcfg = TrainConfig { lr: 2e-3, steps, clip_len: 3, seed, eval_window: size, ..TrainConfig::default() };
    let mut opt = AdamW::new(&tape, &model.active_params(), tcfg.optim());
    let mut sink = std::io::sink();
    train(&mut tape, &mut model, &mut opt, std::slice::from_ref(&volume), &tcfg, None, &BTreeMap::new(), &mut sink).unwrap();
    (tape, model)
}

fn consistency(tape: &mut Tape<f32>, model: &mut SliceModel<f32>, vol_seed: u64, size: usize, depth: usize) -> (f64, f64) {
    let vol = make_synthetic_volume::<f32>(SynthKind::DriftingBlob, depth, size, size, vol_seed).unwrap();
    let masks = segment_volume(tape, model, &vol, size, 0).unwrap();
    let mut sd = 0.0; let mut l1 = 0.0;
    for t in 1..masks.len() {
        sd += symmetric_difference(&binarize(&masks[t], 0.5), &binarize(&masks[t-1], 0.5)).unwrap() as f64;
        l1 += masks[t].data().iter().zip(masks[t-1].data()).map(|(a,b)| (a-b).abs() as f64).sum::<f64>();
    }
    let n = (masks.len()-1) as f64;
    (sd/n, l1/n)
}

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let size = 32; let depth = 10;
    let full = AblationFlags::default();
    let no_mem = AblationFlags { memory: false, ..full };
    let (mut sd_f, mut sd_n, mut l1_f, mut l1_n) = (0.0, 0.0, 0.0, 0.0);
    for seed in [1u64, 2, 3] {
        let (mut tf, mut mf) = train_model(full, seed, steps, size, depth);
        let (mut tn, mut mn) = train_model(no_mem, seed, steps, size, depth);
        // consistency on an unseen volume (different generator seed)
        let (a_sd, a_l1) = consistency(&mut tf, &mut mf, 99, size, depth);
        let (b_sd, b_l1) = consistency(&mut tn, &mut mn, 99, size, depth);
        println!("seed {seed}: unseen symdiff full={a_sd:.1} nomem={b_sd:.1} | L1 full={a_l1:.1} nomem={b_l1:.1}");
        sd_f += a_sd; sd_n += b_sd; l1_f += a_l1; l1_n += b_l1;
    }
    println!("MEANS unseen: symdiff full={:.1} nomem={:.1} | L1 full={:.1} nomem={:.1}", sd_f/3.0, sd_n/3.0, l1_f/3.0, l1_n/3.0);
}
