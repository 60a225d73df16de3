use emstack_model::params::ParamSet;
use emstack_model::prompt::PromptEncoder;
use emstack_model::decoder::DecoderStage1;
use emstack_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() {
    let mut tape = Tape::new();
    let mut params = ParamSet::new();
    let prompt = PromptEncoder::build(&mut tape, &mut params, "prompt1", 8, 8, 47);
    let stage1 = DecoderStage1::build(&mut tape, &mut params, 8, 2, 1, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(49);
    let img = tape.leaf(rand_map(&mut rng, &[8, 4, 4]), true);
    let mask_t = Tensor::from_vec(&[1,16,16], (0..256).map(|_| if rng.random_bool(0.3) {1.0} else {0.0}).collect()).unwrap();
    let mask = tape.leaf(mask_t, true);
    let proj_shape_logits = rand_map(&mut ChaCha8Rng::seed_from_u64(50), &[1,4,4]);
    let proj_shape_feats = rand_map(&mut ChaCha8Rng::seed_from_u64(51), &[8,4,4]);
    let p = prompt.encode(&mut tape, mask).unwrap();
    let out = stage1.forward(&mut tape, img, &p).unwrap();
    let w1 = tape.constant(proj_shape_logits);
    let w2 = tape.constant(proj_shape_feats);
    let a = tape.mul(out.logits, w1).unwrap();
    let a = tape.sum_all(a).unwrap();
    let b = tape.mul(out.decoder_features, w2).unwrap();
    let b = tape.sum_all(b).unwrap();
    let loss = tape.add(a, b).unwrap();
    tape.backward(loss).unwrap();
    let mut rows: Vec<(String, f64)> = Vec::new();
    for e in params.trainable() {
        let scale = tape.grad(e.var).map(|g| g.iter().fold(0.0f64, |m, v| m.max(v.abs()))).unwrap_or(-1.0);
        rows.push((e.name.clone(), scale));
    }
    rows.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap());
    for (n, s) in rows.iter().take(8) { println!("{s:12.3e}  {n}"); }
    let _ = Var::index;
}
