//! Inner numeric loops shared by tape forward and backward passes.
//!
//! Everything here is sequential and accumulates in a fixed order, so results
//! are bitwise reproducible run to run.

use crate::scalar::Scalar;

/// C[m,n] += A[m,k] · B[k,n]
pub fn matmul_nn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_nn_acc(a, b, &mut c, m, k, n);
    c
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ (dot products of rows)
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// Spatial size after a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Cross-correlation of x[ci,h,w] with w[co,ci,kh,kw].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, k, stride, padding);
    let ow = conv_out_dim(wd, k, stride, padding);
    let mut y = vec![T::zero(); c_out * oh * ow];
    for co in 0..c_out {
        let y_plane = &mut y[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c_in {
            let x_plane = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * c_in + ci) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * wd..(iy as usize + 1) * wd];
                        let y_row = &mut y_plane[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            y_row[ox] += wv * x_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulate input gradient of conv2d into dx.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input<T: Scalar>(
    dy: &[T],
    w: &[T],
    dx: &mut [T],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) {
    let oh = conv_out_dim(h, k, stride, padding);
    let ow = conv_out_dim(wd, k, stride, padding);
    for co in 0..c_out {
        let dy_plane = &dy[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c_in {
            let dx_plane = &mut dx[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * c_in + ci) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dy_row = &dy_plane[oy * ow..(oy + 1) * ow];
                        let dx_row = &mut dx_plane[iy as usize * wd..(iy as usize + 1) * wd];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            dx_row[ix as usize] += wv * dy_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate kernel gradient of conv2d into dw.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_kernel<T: Scalar>(
    dy: &[T],
    x: &[T],
    dw: &mut [T],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) {
    let oh = conv_out_dim(h, k, stride, padding);
    let ow = conv_out_dim(wd, k, stride, padding);
    for co in 0..c_out {
        let dy_plane = &dy[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c_in {
            let x_plane = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * wd..(iy as usize + 1) * wd];
                        let dy_row = &dy_plane[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += dy_row[ox] * x_row[ix as usize];
                        }
                    }
                    dw[((co * c_in + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

/// Transposed convolution with kernel size == stride (exact s× upsampling).
/// Weight layout: w[ci, co, ky, kx].
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    s: usize,
) -> Vec<T> {
    let oh = h * s;
    let ow = wd * s;
    let mut y = vec![T::zero(); c_out * oh * ow];
    for ci in 0..c_in {
        let x_plane = &x[ci * h * wd..(ci + 1) * h * wd];
        for co in 0..c_out {
            let y_plane = &mut y[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..s {
                for kx in 0..s {
                    let wv = w[((ci * c_out + co) * s + ky) * s + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for iy in 0..h {
                        let x_row = &x_plane[iy * wd..(iy + 1) * wd];
                        let y_row = &mut y_plane[(iy * s + ky) * ow..(iy * s + ky + 1) * ow];
                        for ix in 0..wd {
                            y_row[ix * s + kx] += wv * x_row[ix];
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    s: usize,
) {
    let oh = h * s;
    let ow = wd * s;
    if let Some(dx) = dx {
        for ci in 0..c_in {
            let dx_plane = &mut dx[ci * h * wd..(ci + 1) * h * wd];
            for co in 0..c_out {
                let dy_plane = &dy[co * oh * ow..(co + 1) * oh * ow];
                for ky in 0..s {
                    for kx in 0..s {
                        let wv = w[((ci * c_out + co) * s + ky) * s + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for iy in 0..h {
                            let dy_row =
                                &dy_plane[(iy * s + ky) * ow..(iy * s + ky + 1) * ow];
                            let dx_row = &mut dx_plane[iy * wd..(iy + 1) * wd];
                            for ix in 0..wd {
                                dx_row[ix] += wv * dy_row[ix * s + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for ci in 0..c_in {
            let x_plane = &x[ci * h * wd..(ci + 1) * h * wd];
            for co in 0..c_out {
                let dy_plane = &dy[co * oh * ow..(co + 1) * oh * ow];
                for ky in 0..s {
                    for kx in 0..s {
                        let mut acc = T::zero();
                        for iy in 0..h {
                            let dy_row =
                                &dy_plane[(iy * s + ky) * ow..(iy * s + ky + 1) * ow];
                            let x_row = &x_plane[iy * wd..(iy + 1) * wd];
                            for ix in 0..wd {
                                acc += dy_row[ix * s + kx] * x_row[ix];
                            }
                        }
                        dw[((ci * c_out + co) * s + ky) * s + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Per-axis sampling plan for half-pixel-center bilinear interpolation.
///
/// For each output index: source low index, high index and the fractional
/// weight of the high sample.
pub fn bilinear_axis_plan<T: Scalar>(in_dim: usize, out_dim: usize) -> Vec<(usize, usize, T)> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_dim - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_dim - 1);
            (lo, hi, T::from_f64(src - lo as f64))
        })
        .collect()
}

/// Bilinear resize of x[c,h,w] to (oh, ow).
///
/// Written in lerp form `a + f·(b−a)` so constant inputs reproduce exactly
/// and same-size resizes are bitwise identities.
pub fn bilinear_resize_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ys = bilinear_axis_plan::<T>(h, oh);
    let xs = bilinear_axis_plan::<T>(w, ow);
    let mut y = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let x_plane = &x[ch * h * w..(ch + 1) * h * w];
        let y_plane = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let row0 = &x_plane[y0 * w..(y0 + 1) * w];
            let row1 = &x_plane[y1 * w..(y1 + 1) * w];
            let out_row = &mut y_plane[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = row0[x0] + fx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                out_row[ox] = top + fy * (bot - top);
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_resize_backward<T: Scalar>(
    dy: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    let ys = bilinear_axis_plan::<T>(h, oh);
    let xs = bilinear_axis_plan::<T>(w, ow);
    let one = T::one();
    for ch in 0..c {
        let dx_plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let dy_plane = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let dy_row = &dy_plane[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = dy_row[ox];
                dx_plane[y0 * w + x0] += g * (one - fy) * (one - fx);
                dx_plane[y0 * w + x1] += g * (one - fy) * fx;
                dx_plane[y1 * w + x0] += g * fy * (one - fx);
                dx_plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

/// Softmax along the middle extent of an (outer, axis, inner) view.
pub fn softmax_forward<T: Scalar>(x: &[T], outer: usize, axis: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * axis + a) * inner + i;
            let mut max = x[idx(0)];
            for a in 1..axis {
                if x[idx(a)] > max {
                    max = x[idx(a)];
                }
            }
            let mut sum = T::zero();
            for a in 0..axis {
                let e = (x[idx(a)] - max).exp();
                y[idx(a)] = e;
                sum += e;
            }
            for a in 0..axis {
                y[idx(a)] = y[idx(a)] / sum;
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nt_is_row_dot_row() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![1.0, 0.5, -1.0, 2.0, 0.0, 3.0]; // 2x3, consumed as Bᵀ
        let mut c = vec![0.0; 4];
        matmul_nt_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, vec![-1.0, 11.0, 0.5, 26.0]);
    }

    #[test]
    fn conv_out_dim_formula() {
        assert_eq!(conv_out_dim(5, 3, 1, 1), 5);
        assert_eq!(conv_out_dim(64, 3, 2, 1), 32);
        assert_eq!(conv_out_dim(5, 1, 1, 0), 5);
    }
}
