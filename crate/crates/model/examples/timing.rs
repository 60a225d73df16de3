use emstack_model::{ModelConfig, NormMode, SliceModel, SliceState, AblationFlags};
use emstack_model::loss::{combined_loss, downsample_mask, LossWeights};
use emstack_tensor::{Tape, Tensor};
use std::time::Instant;

fn main() {
    let mut tape = Tape::<f32>::new();
    let cfg = ModelConfig::toy();
    let mut model = SliceModel::build(&mut tape, cfg.clone(), AblationFlags::default(), 7).unwrap();
    let mark = model.base_mark();
    let img = Tensor::<f32>::filled(&[1, 64, 64], 0.5);
    let mut target = Tensor::<f32>::zeros(&[1, 64, 64]);
    for y in 20..40 { for x in 20..40 { target.data_mut()[y*64+x] = 1.0; } }

    // forward only
    let t0 = Instant::now();
    let n = 5;
    for _ in 0..n {
        let mut state = SliceState::fresh(&cfg, 64, 64);
        model.segment_slice(&mut tape, &img, &mut state, NormMode::Eval).unwrap();
        tape.rollback(mark);
    }
    println!("forward only: {:.1} ms/slice", t0.elapsed().as_secs_f64()*1000.0/n as f64);

    // forward+backward
    let t0 = Instant::now();
    for _ in 0..n {
        let mut state = SliceState::fresh(&cfg, 64, 64);
        let step = model.segment_slice(&mut tape, &img, &mut state, NormMode::Train).unwrap();
        let t1 = downsample_mask(&target, 4);
        let p1 = tape.sigmoid(step.stage1_logits).unwrap();
        let l1 = combined_loss(&mut tape, step.stage1_logits, p1, &t1, LossWeights::default()).unwrap();
        let l2 = combined_loss(&mut tape, step.final_logits, step.final_probs, &target, LossWeights::default()).unwrap();
        let l1w = tape.scale(l1, 0.5f32).unwrap();
        let total = tape.add(l1w, l2).unwrap();
        tape.backward(total).unwrap();
        tape.rollback(mark);
    }
    println!("train step (1 slice): {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/n as f64);
    println!("tape len after rollback: {}", tape.len());
}
