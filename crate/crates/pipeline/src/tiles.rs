//! Sliding-window tiling of large slices.

use emstack_tensor::Scalar;

use crate::error::{PipelineError, Result};

/// Tile anchors covering an image, row-major, with the last tile in each
/// axis clamped to end exactly at the border.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub window: usize,
    pub overlap: usize,
    pub origins: Vec<(usize, usize)>,
    pub tile_h: usize,
    pub tile_w: usize,
}

fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    if window >= dim {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        if pos + window >= dim {
            out.push(dim - window);
            break;
        }
        out.push(pos);
        pos += stride;
    }
    out
}

pub fn plan_tiles(h: usize, w: usize, window: usize, overlap: usize) -> Result<TileGrid> {
    if window < 16 || window % 16 != 0 {
        return Err(PipelineError::Config(format!(
            "window {window} must be >= 16 and divisible by 16"
        )));
    }
    if overlap >= window {
        return Err(PipelineError::Config(format!(
            "overlap {overlap} must be smaller than window {window}"
        )));
    }
    let stride = window - overlap;
    let ys = axis_origins(h, window, stride);
    let xs = axis_origins(w, window, stride);
    let mut origins = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            origins.push((y, x));
        }
    }
    Ok(TileGrid {
        window,
        overlap,
        origins,
        tile_h: window.min(h),
        tile_w: window.min(w),
    })
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// True when one tile spans the whole image.
    pub fn is_single_full_tile(&self, h: usize, w: usize) -> bool {
        self.origins.len() == 1 && self.tile_h == h && self.tile_w == w
    }
}

/// Strictly positive 2D Hann weights for seam-free blending; half-sample
/// offset keeps the border weights nonzero.
pub fn hann_weights<T: Scalar>(th: usize, tw: usize) -> Vec<T> {
    let axis = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * (i as f64 + 0.5) / n as f64).cos())
            .collect()
    };
    let wy = axis(th);
    let wx = axis(tw);
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        for x in 0..tw {
            out.push(T::from_f64(wy[y] * wx[x]));
        }
    }
    out
}
