use emstack_model::{AblationFlags, ModelConfig, NormMode, SliceModel, SliceState};
use emstack_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blob_image(h: usize, w: usize, cy: f64, cx: f64, r: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Tensor::zeros(&[1, h, w]);
    for y in 0..h { for x in 0..w {
        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
        let base: f64 = if d <= r { 0.3 } else { 0.6 };
        let v: f64 = base + rng.random_range(-0.08..0.08);
        img.data_mut()[y * w + x] = v.clamp(0.0, 1.0);
    }}
    img
}

fn main() {
    for seed in [7u64, 8, 9, 10, 11] {
        let mut tape = Tape::new();
        let cfg = ModelConfig::toy();
        let mut model = SliceModel::build(&mut tape, cfg.clone(), AblationFlags::default(), seed).unwrap();
        let mark = model.base_mark();
        let img = blob_image(64, 64, 32.0, 32.0, 10.0, 40);
        let mut state = SliceState::fresh(&cfg, 64, 64);
        let mut masks: Vec<Tensor<f64>> = Vec::new();
        for _ in 0..8 {
            let step = model.segment_slice(&mut tape, &img, &mut state, NormMode::Eval).unwrap();
            masks.push(tape.detach(step.final_probs));
            tape.rollback(mark);
        }
        let l1 = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum()
        };
        let bin = |a: &Tensor<f64>| -> Vec<bool> { a.data().iter().map(|&v| v > 0.5).collect() };
        let sd = |a: &Vec<bool>, b: &Vec<bool>| -> usize { a.iter().zip(b).filter(|(x, y)| x != y).count() };
        print!("seed {seed}: L1 seq ");
        for i in 1..8 { print!("{:.1} ", l1(&masks[i], &masks[i-1])); }
        print!(" | bin seq ");
        for i in 1..8 { print!("{} ", sd(&bin(&masks[i]), &bin(&masks[i-1]))); }
        println!();
    }
}
