//! Volume-level contracts: degenerate tiling equivalence, stitching
//! determinism, causal propagation along z, and cost scaling.

use emstack_model::{AblationFlags, ModelConfig, SliceModel};
use emstack_pipeline::{
    make_synthetic_volume, segment_volume, segment_volume_ordered, SynthKind, VolumeStack,
};
use emstack_tensor::{Tape, Tensor};

fn toy_model(tape: &mut Tape<f32>, seed: u64) -> SliceModel<f32> {
    SliceModel::build(tape, ModelConfig::toy(), AblationFlags::default(), seed).unwrap()
}

fn bits(masks: &[Tensor<f32>]) -> Vec<u32> {
    masks
        .iter()
        .flat_map(|m| m.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn degenerate_tiling_is_bitwise_equal_to_direct_processing() {
    let volume = make_synthetic_volume::<f32>(SynthKind::DriftingBlob, 4, 64, 64, 3).unwrap();
    let mut tape = Tape::new();
    let mut model = toy_model(&mut tape, 7);
    // window == slice size -> single full tile, same as no tiling at all.
    let tiled = segment_volume(&mut tape, &mut model, &volume, 64, 16).unwrap();
    // Direct per-slice path.
    let direct = {
        use emstack_model::{NormMode, SliceState};
        let mark = model.base_mark();
        let mut state = SliceState::fresh(&model.cfg, 64, 64);
        let mut out = Vec::new();
        for img in &volume.slices {
            let step = model
                .segment_slice(&mut tape, img, &mut state, NormMode::Eval)
                .unwrap();
            out.push(tape.detach(step.final_probs));
            tape.rollback(mark);
        }
        out
    };
    assert_eq!(bits(&tiled), bits(&direct));
    // An even larger window clamps to the same single tile.
    let bigger = segment_volume(&mut tape, &mut model, &volume, 128, 0).unwrap();
    assert_eq!(bits(&bigger), bits(&direct));
}

#[test]
fn stitched_outputs_are_valid_and_order_independent() {
    let volume = make_synthetic_volume::<f32>(SynthKind::DriftingBlob, 3, 96, 96, 5).unwrap();
    let mut tape = Tape::new();
    let mut model = toy_model(&mut tape, 7);
    let forward = segment_volume_ordered(&mut tape, &mut model, &volume, 64, 32, None).unwrap();
    for m in &forward {
        assert_eq!(m.shape(), &[1, 96, 96]);
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    // 4 tiles processed in reversed and shuffled orders.
    let reversed =
        segment_volume_ordered(&mut tape, &mut model, &volume, 64, 32, Some(&[3, 2, 1, 0]))
            .unwrap();
    let shuffled =
        segment_volume_ordered(&mut tape, &mut model, &volume, 64, 32, Some(&[2, 0, 3, 1]))
            .unwrap();
    assert_eq!(bits(&forward), bits(&reversed));
    assert_eq!(bits(&forward), bits(&shuffled));
    // Two independent runs are bitwise identical.
    let mut tape2 = Tape::new();
    let mut model2 = toy_model(&mut tape2, 7);
    let again = segment_volume(&mut tape2, &mut model2, &volume, 64, 32).unwrap();
    assert_eq!(bits(&forward), bits(&again));
}

#[test]
fn editing_slice_t_only_affects_outputs_from_t_onward() {
    let volume = make_synthetic_volume::<f32>(SynthKind::DriftingBlob, 5, 64, 64, 6).unwrap();
    let mut edited = volume.clone();
    let t = 3;
    for v in edited.slices[t].data_mut() {
        *v = (*v + 0.25).min(1.0);
    }
    let mut tape = Tape::new();
    let mut model = toy_model(&mut tape, 7);
    let base = segment_volume(&mut tape, &mut model, &volume, 64, 0).unwrap();
    let changed = segment_volume(&mut tape, &mut model, &edited, 64, 0).unwrap();
    for z in 0..t {
        assert_eq!(
            bits(&base[z..=z]),
            bits(&changed[z..=z]),
            "slice {z} before the edit must be untouched"
        );
    }
    assert_ne!(bits(&base[t..=t]), bits(&changed[t..=t]));
}

#[test]
fn inference_work_grows_linearly_in_slice_count() {
    let short = make_synthetic_volume::<f32>(SynthKind::DriftingBlob, 2, 64, 64, 8).unwrap();
    let long = make_synthetic_volume::<f32>(SynthKind::DriftingBlob, 6, 64, 64, 8).unwrap();
    let mut tape = Tape::new();
    let mut model = toy_model(&mut tape, 7);

    // Kernel operation counts scale exactly with slice count.
    tape.reset_flops();
    segment_volume(&mut tape, &mut model, &short, 64, 0).unwrap();
    let f_short = tape.flops();
    tape.reset_flops();
    segment_volume(&mut tape, &mut model, &long, 64, 0).unwrap();
    let f_long = tape.flops();
    let ratio = f_long as f64 / f_short as f64;
    assert!(
        (ratio - 3.0).abs() < 0.05,
        "3x slices should cost ~3x the operations, got {ratio}"
    );

    // Wall time follows within generous tolerance (single-core CI noise).
    let time_of = |stack: &VolumeStack<f32>, model: &mut SliceModel<f32>, tape: &mut Tape<f32>| {
        let t0 = std::time::Instant::now();
        segment_volume(tape, model, stack, 64, 0).unwrap();
        t0.elapsed().as_secs_f64()
    };
    let t_short = (0..3)
        .map(|_| time_of(&short, &mut model, &mut tape))
        .fold(f64::INFINITY, f64::min);
    let t_long = (0..3)
        .map(|_| time_of(&long, &mut model, &mut tape))
        .fold(f64::INFINITY, f64::min);
    let ratio = t_long / t_short;
    assert!(
        (1.8..=4.5).contains(&ratio),
        "wall-time ratio {ratio} far from linear scaling"
    );
}
