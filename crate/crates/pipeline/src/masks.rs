//! Mask persistence: thresholded per-slice PNGs mirroring the input
//! z-indices, next to the run manifest.

use std::path::Path;

use emstack_tensor::{Scalar, Tensor};

use crate::error::{PipelineError, Result};
use crate::manifest::RunManifest;
use crate::stack::VolumeStack;

/// Write binary 0/255 PNG masks plus the run manifest into `out_dir`.
pub fn save_masks<T: Scalar>(
    masks: &[Tensor<T>],
    stack: &VolumeStack<T>,
    out_dir: &Path,
    threshold: f64,
    manifest: &RunManifest,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir.display(), e))?;
    for (z, mask) in masks.iter().enumerate() {
        let (h, w) = (mask.shape()[1], mask.shape()[2]);
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = if mask.at3(0, y, x).as_f64() > threshold {
                    255u8
                } else {
                    0
                };
                img.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        let path = out_dir.join(format!("{}_{z:04}.png", stack.name));
        img.save(&path)
            .map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))?;
    }
    manifest.save(&out_dir.join("manifest.toml"))
}

/// Reload masks written by [`save_masks`] as 0/1 tensors.
pub fn load_masks<T: Scalar>(out_dir: &Path, stack_name: &str, depth: usize) -> Result<Vec<Tensor<T>>> {
    let mut masks = Vec::with_capacity(depth);
    for z in 0..depth {
        let path = out_dir.join(format!("{stack_name}_{z:04}.png"));
        let img = image::open(&path)
            .map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .into_raw()
            .into_iter()
            .map(|v| if v > 127 { T::one() } else { T::zero() })
            .collect();
        masks.push(Tensor::from_vec(&[1, h, w], data).expect("mask shape"));
    }
    Ok(masks)
}
