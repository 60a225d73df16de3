//! Slice-sequential volume inference with sliding-window tiling.
//!
//! Each tile owns its memory bank and prompt chain: tile (i,j) of slice t is
//! prompted by tile (i,j) of slice t−1. Overlaps are blended by Hann-weighted
//! averaging of logits in a fixed tile order, so the stitched output is
//! independent of tile processing order. A window covering the whole slice
//! bypasses tiling entirely and is bitwise identical to the direct path.

use emstack_model::{NormMode, SliceModel, SliceState};
use emstack_tensor::{Scalar, Tape, Tensor};

use crate::error::{PipelineError, Result};
use crate::stack::VolumeStack;
use crate::tiles::{hann_weights, plan_tiles};

fn crop<T: Scalar>(src: &Tensor<T>, oy: usize, ox: usize, th: usize, tw: usize) -> Tensor<T> {
    let w = src.shape()[2];
    let mut out = Tensor::zeros(&[1, th, tw]);
    for y in 0..th {
        let srow = (oy + y) * w + ox;
        let drow = y * tw;
        out.data_mut()[drow..drow + tw]
            .copy_from_slice(&src.data()[srow..srow + tw]);
    }
    out
}

fn sigmoid_host<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    logits.map(|z| {
        if z >= T::zero() {
            T::one() / (T::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (T::one() + e)
        }
    })
}

/// Segment every slice, ascending in z. See module docs for tiling rules.
pub fn segment_volume<T: Scalar>(
    tape: &mut Tape<T>,
    model: &mut SliceModel<T>,
    stack: &VolumeStack<T>,
    window: usize,
    overlap: usize,
) -> Result<Vec<Tensor<T>>> {
    segment_volume_ordered(tape, model, stack, window, overlap, None)
}

/// As [`segment_volume`], processing tiles within each slice in the given
/// order (useful for demonstrating order independence).
pub fn segment_volume_ordered<T: Scalar>(
    tape: &mut Tape<T>,
    model: &mut SliceModel<T>,
    stack: &VolumeStack<T>,
    window: usize,
    overlap: usize,
    tile_order: Option<&[usize]>,
) -> Result<Vec<Tensor<T>>> {
    let (h, w) = (stack.height(), stack.width());
    let grid = plan_tiles(h, w, window, overlap)?;
    let mark = model.base_mark();
    let mut masks = Vec::with_capacity(stack.depth());

    if grid.is_single_full_tile(h, w) {
        // Degenerate tiling: identical to direct per-slice processing.
        let mut state = SliceState::fresh(&model.cfg, h, w);
        for image in &stack.slices {
            let step = model.segment_slice(tape, image, &mut state, NormMode::Eval)?;
            masks.push(tape.detach(step.final_probs));
            tape.rollback(mark);
        }
        return Ok(masks);
    }

    let tiles = grid.origins.len();
    let order: Vec<usize> = match tile_order {
        Some(o) => {
            let mut seen = vec![false; tiles];
            for &i in o {
                if i >= tiles || seen[i] {
                    return Err(PipelineError::Config(format!(
                        "tile order must be a permutation of 0..{tiles}"
                    )));
                }
                seen[i] = true;
            }
            if !seen.iter().all(|&s| s) {
                return Err(PipelineError::Config(format!(
                    "tile order must be a permutation of 0..{tiles}"
                )));
            }
            o.to_vec()
        }
        None => (0..tiles).collect(),
    };

    let (th, tw) = (grid.tile_h, grid.tile_w);
    let weights: Vec<T> = hann_weights(th, tw);
    let mut states: Vec<SliceState<T>> = (0..tiles)
        .map(|_| SliceState::fresh(&model.cfg, th, tw))
        .collect();

    for image in &stack.slices {
        // Per-tile logits, keyed by canonical tile index regardless of
        // processing order.
        let mut tile_logits: Vec<Option<Tensor<T>>> = vec![None; tiles];
        for &ti in &order {
            let (oy, ox) = grid.origins[ti];
            let tile_img = crop(image, oy, ox, th, tw);
            let step = model.segment_slice(tape, &tile_img, &mut states[ti], NormMode::Eval)?;
            tile_logits[ti] = Some(tape.detach(step.final_logits));
            tape.rollback(mark);
        }
        // Blend in canonical order with a fixed accumulation sequence.
        let mut acc = vec![T::zero(); h * w];
        let mut norm = vec![T::zero(); h * w];
        for (ti, logits) in tile_logits.iter().enumerate() {
            let logits = logits.as_ref().expect("tile computed");
            let (oy, ox) = grid.origins[ti];
            for y in 0..th {
                for x in 0..tw {
                    let wgt = weights[y * tw + x];
                    let idx = (oy + y) * w + (ox + x);
                    acc[idx] += wgt * logits.data()[y * tw + x];
                    norm[idx] += wgt;
                }
            }
        }
        let blended: Vec<T> = acc
            .iter()
            .zip(norm.iter())
            .map(|(&a, &n)| a / n)
            .collect();
        let logits = Tensor::from_vec(&[1, h, w], blended).expect("blend shape");
        masks.push(sigmoid_host(&logits));
    }
    Ok(masks)
}
