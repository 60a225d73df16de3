//! 2D sinusoidal positional encodings, recomputed per resolution.
//!
//! A position (y, x) normalized to [0,1]² maps to interleaved sin/cos pairs
//! at octave frequencies: channels [4i..4i+4] hold
//! (sin 2^i·2π·ny, cos 2^i·2π·ny, sin 2^i·2π·nx, cos 2^i·2π·nx).

use emstack_tensor::{Scalar, Tensor};

/// Encoding of a single point; `dim` must be divisible by 4.
pub fn point_encoding<T: Scalar>(y: f64, x: f64, h: usize, w: usize, dim: usize) -> Vec<T> {
    assert_eq!(dim % 4, 0, "positional dim must be divisible by 4");
    let ny = (y + 0.5) / h as f64;
    let nx = (x + 0.5) / w as f64;
    let tau = std::f64::consts::TAU;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 4 {
        let f = (1u64 << i) as f64 * tau;
        out.push(T::from_f64((f * ny).sin()));
        out.push(T::from_f64((f * ny).cos()));
        out.push(T::from_f64((f * nx).sin()));
        out.push(T::from_f64((f * nx).cos()));
    }
    out
}

/// Row-major grid of [`point_encoding`]s at cell centers: [gh·gw, dim].
pub fn grid_encoding<T: Scalar>(gh: usize, gw: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            data.extend(point_encoding::<T>(gy as f64, gx as f64, gh, gw, dim));
        }
    }
    Tensor::from_vec(&[gh * gw, dim], data).expect("grid encoding shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rows_match_point_encodings() {
        let g: Tensor<f64> = grid_encoding(3, 2, 8);
        assert_eq!(g.shape(), &[6, 8]);
        let row = &g.data()[(2 * 2 + 1) * 8..(2 * 2 + 2) * 8]; // gy=2, gx=1
        let expect = point_encoding::<f64>(2.0, 1.0, 3, 2, 8);
        assert_eq!(row, expect.as_slice());
    }

    #[test]
    fn distinct_positions_get_distinct_codes() {
        let a = point_encoding::<f64>(3.0, 4.0, 16, 16, 16);
        let b = point_encoding::<f64>(4.0, 3.0, 16, 16, 16);
        assert_ne!(a, b);
    }
}
