//! Define-by-run reverse-mode differentiation tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! enough context to run the backward step. Nodes reference their inputs by
//! index, so an operation always appears after the operations producing its
//! inputs and [`Tape::backward`] can traverse in exact reverse execution
//! order. Persistent values (model parameters) are pushed first; a
//! [`TapeMark`] taken after construction lets callers roll the per-pass
//! portion back while keeping parameters and their accumulated gradients.

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Snapshot of the tape length, used to roll back per-pass nodes.
#[derive(Clone, Copy, Debug)]
pub struct TapeMark(usize);

enum Op<T: Scalar> {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        mul: T,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose2d {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    AddBiasRows {
        x: Var,
        bias: Var,
    },
    AddBiasChw {
        x: Var,
        bias: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        stride: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mean: Vec<T>,
        var: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    },
    BilinearResize {
        x: Var,
    },
    Patchify {
        x: Var,
        patch: usize,
    },
    SlotAttention {
        q: Var,
        keys: Vec<Var>,
        values: Vec<Var>,
        weights: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<T>,
    },
}

struct Node<T: Scalar> {
    data: Tensor<T>,
    grad: Option<Vec<T>>,
    requires: bool,
    op: Op<T>,
}

/// Reverse-mode differentiation tape; see module docs.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    flops: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count attributed to executed forward kernels.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops = 0;
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark(self.nodes.len())
    }

    /// Drop every node recorded after `mark`. Parameters pushed before the
    /// mark keep their data and accumulated gradients.
    pub fn rollback(&mut self, mark: TapeMark) {
        assert!(mark.0 <= self.nodes.len(), "rollback beyond tape length");
        self.nodes.truncate(mark.0);
    }

    pub fn leaf(&mut self, data: Tensor<T>, requires_grad: bool) -> Var {
        self.push(data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Tensor<T>) -> Var {
        self.leaf(data, false)
    }

    pub fn data(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].data
    }

    /// Mutable access to a leaf's value (optimizer updates).
    pub fn data_mut(&mut self, v: Var) -> &mut Tensor<T> {
        &mut self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Copy a value off the tape.
    pub fn detach(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].data.clone()
    }

    pub fn zero_grad(&mut self, v: Var) {
        self.nodes[v.0].grad = None;
    }

    fn push(&mut self, data: Tensor<T>, requires: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            data,
            grad: None,
            requires,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].data.shape()
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::DimMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .data()
            .iter()
            .zip(self.nodes[b.0].data.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), data).expect("add shape");
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, req, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .data()
            .iter()
            .zip(self.nodes[b.0].data.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), data).expect("sub shape");
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, req, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .data()
            .iter()
            .zip(self.nodes[b.0].data.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), data).expect("mul shape");
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, req, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .data()
            .iter()
            .zip(self.nodes[b.0].data.data())
            .map(|(&x, &y)| x / y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), data).expect("div shape");
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, req, Op::Div { a, b }))
    }

    /// `mul·x + add`, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: Var, mul: T, add: T) -> Result<Var> {
        let t = self.nodes[x.0].data.map(|v| mul * v + add);
        let req = self.req(x);
        Ok(self.push(t, req, Op::Affine { x, mul }))
    }

    pub fn scale(&mut self, x: Var, mul: T) -> Result<Var> {
        self.affine(x, mul, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.nodes[x.0]
            .data
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let req = self.req(x);
        Ok(self.push(t, req, Op::Relu { x }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.nodes[x.0].data.map(sigmoid_scalar);
        let req = self.req(x);
        Ok(self.push(t, req, Op::Sigmoid { x }))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.nodes[x.0].data.map(gelu_scalar);
        let req = self.req(x);
        Ok(self.push(t, req, Op::Gelu { x }))
    }

    // ── Linear algebra & shape ──────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul_nn(
            self.nodes[a.0].data.data(),
            self.nodes[b.0].data.data(),
            m,
            k,
            n,
        );
        self.flops += 2 * (m * k * n) as u64;
        let t = Tensor::from_vec(&[m, n], data).expect("matmul shape");
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, req, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose2d",
                shape: s.to_vec(),
                msg: "expects a rank-2 tensor".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.nodes[x.0].data.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::from_vec(&[c, r], data).expect("transpose shape");
        let req = self.req(x);
        Ok(self.push(t, req, Op::Transpose2d { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].data.clone().reshaped(shape)?;
        let req = self.req(x);
        Ok(self.push(t, req, Op::Reshape { x }))
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(TensorError::BadShape {
                op: "narrow",
                shape: s,
                msg: format!("axis {axis}, start {start}, len {len} out of range"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.nodes[x.0].data.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let t = Tensor::from_vec(&out_shape, data).expect("narrow shape");
        let req = self.req(x);
        Ok(self.push(t, req, Op::Narrow { x, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat",
                msg: "needs at least one input".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::BadShape {
                op: "concat",
                shape: first,
                msg: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::DimMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut data = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let blk = self.shape(p)[axis] * inner;
            let src = self.nodes[p.0].data.data();
            for o in 0..outer {
                let dst = (o * axis_total) * inner + offset;
                data[dst..dst + blk].copy_from_slice(&src[o * blk..(o + 1) * blk]);
            }
            offset += blk;
        }
        let req = parts.iter().any(|&p| self.req(p));
        let t = Tensor::from_vec(&out_shape, data).expect("concat shape");
        Ok(self.push(
            t,
            req,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    // ── Reductions & bias ───────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut s = T::zero();
        for &v in self.nodes[x.0].data.data() {
            s += v;
        }
        let req = self.req(x);
        Ok(self.push(Tensor::scalar(s), req, Op::SumAll { x }))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].data.numel();
        if n == 0 {
            return Err(TensorError::BadShape {
                op: "mean_all",
                shape: self.shape(x).to_vec(),
                msg: "empty tensor".into(),
            });
        }
        let mut s = T::zero();
        for &v in self.nodes[x.0].data.data() {
            s += v;
        }
        let m = s / T::from_f64(n as f64);
        let req = self.req(x);
        Ok(self.push(Tensor::scalar(m), req, Op::MeanAll { x }))
    }

    /// x[N,D] + bias[D] broadcast over rows.
    pub fn add_bias_rows(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::DimMismatch {
                op: "add_bias_rows",
                lhs: sx,
                rhs: sb,
            });
        }
        let b = self.nodes[bias.0].data.data().to_vec();
        let src = self.nodes[x.0].data.data();
        let d = sx[1];
        let data: Vec<T> = src
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % d])
            .collect();
        let t = Tensor::from_vec(&sx, data).expect("bias shape");
        let req = self.req(x) || self.req(bias);
        Ok(self.push(t, req, Op::AddBiasRows { x, bias }))
    }

    /// x[C,H,W] + bias[C] broadcast over the spatial extent.
    pub fn add_bias_chw(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(TensorError::DimMismatch {
                op: "add_bias_chw",
                lhs: sx,
                rhs: sb,
            });
        }
        let b = self.nodes[bias.0].data.data().to_vec();
        let src = self.nodes[x.0].data.data();
        let plane = sx[1] * sx[2];
        let data: Vec<T> = src
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i / plane])
            .collect();
        let t = Tensor::from_vec(&sx, data).expect("bias shape");
        let req = self.req(x) || self.req(bias);
        Ok(self.push(t, req, Op::AddBiasChw { x, bias }))
    }

    // ── Normalization & nonlinearity over axes ──────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::BadShape {
                op: "softmax",
                shape: s,
                msg: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let data = kernels::softmax_forward(self.nodes[x.0].data.data(), outer, s[axis], inner);
        self.flops += (outer * inner * s[axis] * 3) as u64;
        let t = Tensor::from_vec(&s, data).expect("softmax shape");
        let req = self.req(x);
        Ok(self.push(t, req, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or(TensorError::BadShape {
            op: "layer_norm",
            shape: s.clone(),
            msg: "rank must be >= 1".into(),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::DimMismatch {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::from_f64(eps);
        let rows = self.nodes[x.0].data.numel() / d;
        let src = self.nodes[x.0].data.data();
        let g = self.nodes[gamma.0].data.data();
        let b = self.nodes[beta.0].data.data();
        let mut data = vec![T::zero(); src.len()];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        let dn = T::from_f64(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean / dn;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var / dn;
            let inv_std = T::one() / (var + eps).sqrt();
            for i in 0..d {
                data[r * d + i] = (row[i] - mean) * inv_std * g[i] + b[i];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        self.flops += (rows * d * 6) as u64;
        let t = Tensor::from_vec(&s, data).expect("layer_norm shape");
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            t,
            req,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
        ))
    }

    // ── Convolutions ────────────────────────────────────────────────

    /// Cross-correlation of x[Cin,H,W] with w[Cout,Cin,k,k].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let k = sw[2];
        if !(k == 1 || k == 3) || !(stride == 1 || stride == 2) {
            return Err(TensorError::Contract {
                op: "conv2d",
                msg: format!("kernel {k} / stride {stride} unsupported (k in {{1,3}}, stride in {{1,2}})"),
            });
        }
        let (h, wd) = (sx[1], sx[2]);
        if k > h + 2 * padding || k > wd + 2 * padding {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (c_in, c_out) = (sx[0], sw[0]);
        let oh = kernels::conv_out_dim(h, k, stride, padding);
        let ow = kernels::conv_out_dim(wd, k, stride, padding);
        let data = kernels::conv2d_forward(
            self.nodes[x.0].data.data(),
            self.nodes[w.0].data.data(),
            c_in,
            h,
            wd,
            c_out,
            k,
            stride,
            padding,
        );
        self.flops += 2 * (c_out * c_in * k * k * oh * ow) as u64;
        let t = Tensor::from_vec(&[c_out, oh, ow], data).expect("conv2d shape");
        let req = self.req(x) || self.req(w);
        Ok(self.push(
            t,
            req,
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
        ))
    }

    /// Transposed convolution with kernel size == stride; w[Cin,Cout,s,s].
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != stride || sw[3] != stride {
            return Err(TensorError::DimMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let c_out = sw[1];
        let data = kernels::conv_transpose2d_forward(
            self.nodes[x.0].data.data(),
            self.nodes[w.0].data.data(),
            c_in,
            h,
            wd,
            c_out,
            stride,
        );
        self.flops += 2 * (c_in * c_out * stride * stride * h * wd) as u64;
        let t =
            Tensor::from_vec(&[c_out, h * stride, wd * stride], data).expect("conv_t shape");
        let req = self.req(x) || self.req(w);
        Ok(self.push(t, req, Op::ConvTranspose2d { x, w, stride }))
    }

    // ── Batch normalization ─────────────────────────────────────────

    /// Normalize x[C,H,W] by its per-channel spatial statistics. Returns the
    /// batch mean/variance so the caller can maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let s = self.shape(x).to_vec();
        self.check_bn_shapes(&s, gamma, beta)?;
        let (c, plane) = (s[0], s[1] * s[2]);
        let eps = T::from_f64(eps);
        let src = self.nodes[x.0].data.data();
        let g = self.nodes[gamma.0].data.data();
        let b = self.nodes[beta.0].data.data();
        let n = T::from_f64(plane as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let sl = &src[ch * plane..(ch + 1) * plane];
            let mut m = T::zero();
            for &v in sl {
                m += v;
            }
            m = m / n;
            let mut vs = T::zero();
            for &v in sl {
                vs += (v - m) * (v - m);
            }
            mean[ch] = m;
            var[ch] = vs / n;
        }
        let mut data = vec![T::zero(); src.len()];
        for ch in 0..c {
            let inv_std = T::one() / (var[ch] + eps).sqrt();
            for i in 0..plane {
                let idx = ch * plane + i;
                data[idx] = (src[idx] - mean[ch]) * inv_std * g[ch] + b[ch];
            }
        }
        self.flops += (c * plane * 4) as u64;
        let t = Tensor::from_vec(&s, data).expect("bn shape");
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let var_out = var.clone();
        let mean_out = mean.clone();
        let v = self.push(
            t,
            req,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            },
        );
        Ok((v, mean_out, var_out))
    }

    /// Normalize x[C,H,W] by the provided running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        self.check_bn_shapes(&s, gamma, beta)?;
        let (c, plane) = (s[0], s[1] * s[2]);
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::DimMismatch {
                op: "batchnorm_eval",
                lhs: s,
                rhs: vec![running_mean.len()],
            });
        }
        let eps = T::from_f64(eps);
        let src = self.nodes[x.0].data.data();
        let g = self.nodes[gamma.0].data.data();
        let b = self.nodes[beta.0].data.data();
        let mut data = vec![T::zero(); src.len()];
        for ch in 0..c {
            let inv_std = T::one() / (running_var[ch] + eps).sqrt();
            for i in 0..plane {
                let idx = ch * plane + i;
                data[idx] = (src[idx] - running_mean[ch]) * inv_std * g[ch] + b[ch];
            }
        }
        self.flops += (c * plane * 3) as u64;
        let t = Tensor::from_vec(&s, data).expect("bn shape");
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            t,
            req,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                eps,
            },
        ))
    }

    fn check_bn_shapes(&self, s: &[usize], gamma: Var, beta: Var) -> Result<()> {
        if s.len() != 3 {
            return Err(TensorError::BadShape {
                op: "batchnorm",
                shape: s.to_vec(),
                msg: "expects [C,H,W]".into(),
            });
        }
        if s[1] * s[2] == 0 {
            return Err(TensorError::BadShape {
                op: "batchnorm",
                shape: s.to_vec(),
                msg: "zero spatial extent".into(),
            });
        }
        if self.shape(gamma) != [s[0]] || self.shape(beta) != [s[0]] {
            return Err(TensorError::DimMismatch {
                op: "batchnorm",
                lhs: s.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        Ok(())
    }

    // ── Resampling & layout ─────────────────────────────────────────

    /// Half-pixel-center bilinear resize of x[C,H,W] to [C,th,tw].
    pub fn bilinear_resize(&mut self, x: Var, th: usize, tw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::BadShape {
                op: "bilinear_resize",
                shape: s,
                msg: "expects [C,H,W]".into(),
            });
        }
        if th == 0 || tw == 0 {
            return Err(TensorError::BadShape {
                op: "bilinear_resize",
                shape: s,
                msg: "target dims must be >= 1".into(),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let data =
            kernels::bilinear_resize_forward(self.nodes[x.0].data.data(), c, h, w, th, tw);
        self.flops += (c * th * tw * 8) as u64;
        let t = Tensor::from_vec(&[c, th, tw], data).expect("resize shape");
        let req = self.req(x);
        Ok(self.push(t, req, Op::BilinearResize { x }))
    }

    /// Rearrange x[C,H,W] into non-overlapping patch rows
    /// [(H/p)(W/p), C·p·p], row-major over the patch grid.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % patch != 0 || s[2] % patch != 0 {
            return Err(TensorError::BadShape {
                op: "patchify",
                shape: s,
                msg: format!("spatial dims must divide patch size {patch}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (gh, gw) = (h / patch, w / patch);
        let src = self.nodes[x.0].data.data();
        let cols = c * patch * patch;
        let mut data = vec![T::zero(); gh * gw * cols];
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let col = (ch * patch + dy) * patch + dx;
                            data[row * cols + col] =
                                src[(ch * h + gy * patch + dy) * w + gx * patch + dx];
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[gh * gw, cols], data).expect("patchify shape");
        let req = self.req(x);
        Ok(self.push(t, req, Op::Patchify { x, patch }))
    }

    // ── Fused attention & loss ──────────────────────────────────────

    /// Per-position attention of q[d,H,W] over `m` slot maps.
    ///
    /// At every spatial position, scores between the query vector and each
    /// slot's key vector are softmax-normalized (scaled by 1/√d) and used to
    /// mix the slot value vectors. Spatial dimensions are preserved.
    pub fn slot_attention(&mut self, q: Var, keys: &[Var], values: &[Var]) -> Result<Var> {
        if keys.is_empty() || keys.len() != values.len() {
            return Err(TensorError::Contract {
                op: "slot_attention",
                msg: format!(
                    "needs matching non-empty key/value lists, got {}/{}",
                    keys.len(),
                    values.len()
                ),
            });
        }
        let s = self.shape(q).to_vec();
        if s.len() != 3 {
            return Err(TensorError::BadShape {
                op: "slot_attention",
                shape: s,
                msg: "query expects [d,H,W]".into(),
            });
        }
        for &v in keys.iter().chain(values.iter()) {
            if self.shape(v) != s.as_slice() {
                return Err(TensorError::DimMismatch {
                    op: "slot_attention",
                    lhs: s,
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let (d, plane) = (s[0], s[1] * s[2]);
        let m = keys.len();
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let qd = self.nodes[q.0].data.data();
        let mut weights = vec![T::zero(); plane * m];
        let mut out = vec![T::zero(); d * plane];
        let mut scores = vec![T::zero(); m];
        for p in 0..plane {
            for (i, &kv) in keys.iter().enumerate() {
                let kd = self.nodes[kv.0].data.data();
                let mut sc = T::zero();
                for c in 0..d {
                    sc += qd[c * plane + p] * kd[c * plane + p];
                }
                scores[i] = sc * scale;
            }
            let mut max = scores[0];
            for &sc in &scores[1..] {
                if sc > max {
                    max = sc;
                }
            }
            let mut sum = T::zero();
            for i in 0..m {
                let e = (scores[i] - max).exp();
                weights[p * m + i] = e;
                sum += e;
            }
            for i in 0..m {
                weights[p * m + i] = weights[p * m + i] / sum;
            }
            for (i, &vv) in values.iter().enumerate() {
                let vd = self.nodes[vv.0].data.data();
                let w = weights[p * m + i];
                for c in 0..d {
                    out[c * plane + p] += w * vd[c * plane + p];
                }
            }
        }
        self.flops += (plane * m * (4 * d + 2)) as u64;
        let t = Tensor::from_vec(&s, out).expect("slot_attention shape");
        let req =
            self.req(q) || keys.iter().chain(values.iter()).any(|&v| self.req(v));
        Ok(self.push(
            t,
            req,
            Op::SlotAttention {
                q,
                keys: keys.to_vec(),
                values: values.to_vec(),
                weights,
            },
        ))
    }

    /// Mean binary cross-entropy from logits, in log-sum-exp form.
    /// The target is a constant and receives no gradient.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(TensorError::DimMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let z = self.nodes[logits.0].data.data();
        let t = target.data();
        let n = T::from_f64(z.len() as f64);
        let mut acc = T::zero();
        for (&zi, &ti) in z.iter().zip(t.iter()) {
            let pos = if zi > T::zero() { zi } else { T::zero() };
            acc += pos - zi * ti + (T::one() + (-zi.abs()).exp()).ln();
        }
        let loss = acc / n;
        let req = self.req(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            req,
            Op::BceWithLogits {
                logits,
                target: t.to_vec(),
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulate gradients of `loss` into every reachable node that
    /// requires them. Repeated calls without `zero_grad` keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.numel() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!(
                    "loss must be scalar, got shape {:?}",
                    self.shape(loss)
                ),
            });
        }
        if !self.nodes[loss.0].requires {
            return Err(TensorError::Contract {
                op: "backward",
                msg: "loss does not depend on any tensor requiring gradients".into(),
            });
        }
        // Intermediate gradients are per-call scratch; only leaf gradients
        // accumulate across repeated backward calls.
        for node in self.nodes[..=loss.0].iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        {
            let node = &mut self.nodes[loss.0];
            let g = node.grad.get_or_insert_with(|| vec![T::zero(); 1]);
            g[0] += T::one();
        }
        for i in (0..=loss.0).rev() {
            let (lower, upper) = self.nodes.split_at_mut(i);
            let node = &upper[0];
            if !node.requires {
                continue;
            }
            let Some(grad) = node.grad.as_ref() else {
                continue;
            };
            backward_step(lower, node, grad);
        }
        Ok(())
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

/// Add `contrib` into the gradient buffer of `v` if it participates in
/// differentiation.
fn accumulate<T: Scalar>(nodes: &mut [Node<T>], v: Var, contrib: &[T]) {
    let node = &mut nodes[v.0];
    if !node.requires {
        return;
    }
    let g = node
        .grad
        .get_or_insert_with(|| vec![T::zero(); node.data.numel()]);
    for (gv, &c) in g.iter_mut().zip(contrib.iter()) {
        *gv += c;
    }
}

fn backward_step<T: Scalar>(lower: &mut [Node<T>], node: &Node<T>, grad: &[T]) {
    match &node.op {
        Op::Leaf => {}

        Op::Add { a, b } => {
            accumulate(lower, *a, grad);
            accumulate(lower, *b, grad);
        }

        Op::Sub { a, b } => {
            accumulate(lower, *a, grad);
            let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
            accumulate(lower, *b, &neg);
        }

        Op::Mul { a, b } => {
            if a == b {
                let two = T::from_f64(2.0);
                let da: Vec<T> = grad
                    .iter()
                    .zip(lower[a.0].data.data())
                    .map(|(&g, &x)| two * g * x)
                    .collect();
                accumulate(lower, *a, &da);
            } else {
                let da: Vec<T> = grad
                    .iter()
                    .zip(lower[b.0].data.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                let db: Vec<T> = grad
                    .iter()
                    .zip(lower[a.0].data.data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                accumulate(lower, *a, &da);
                accumulate(lower, *b, &db);
            }
        }

        Op::Div { a, b } => {
            if a == b {
                return; // d(x/x) = 0 away from zero
            }
            let da: Vec<T> = grad
                .iter()
                .zip(lower[b.0].data.data())
                .map(|(&g, &y)| g / y)
                .collect();
            let db: Vec<T> = grad
                .iter()
                .zip(lower[a.0].data.data().iter().zip(lower[b.0].data.data()))
                .map(|(&g, (&x, &y))| -g * x / (y * y))
                .collect();
            accumulate(lower, *a, &da);
            accumulate(lower, *b, &db);
        }

        Op::Affine { x, mul } => {
            let dx: Vec<T> = grad.iter().map(|&g| g * *mul).collect();
            accumulate(lower, *x, &dx);
        }

        Op::Relu { x } => {
            let dx: Vec<T> = grad
                .iter()
                .zip(lower[x.0].data.data())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(lower, *x, &dx);
        }

        Op::Sigmoid { x } => {
            let dx: Vec<T> = grad
                .iter()
                .zip(node.data.data())
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect();
            accumulate(lower, *x, &dx);
        }

        Op::Gelu { x } => {
            let dx: Vec<T> = grad
                .iter()
                .zip(lower[x.0].data.data())
                .map(|(&g, &v)| g * gelu_grad_scalar(v))
                .collect();
            accumulate(lower, *x, &dx);
        }

        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if lower[a.0].requires {
                let mut da = vec![T::zero(); m * k];
                kernels::matmul_nt_acc(grad, lower[b.0].data.data(), &mut da, m, n, k);
                accumulate(lower, *a, &da);
            }
            if lower[b.0].requires {
                let mut db = vec![T::zero(); k * n];
                kernels::matmul_tn_acc(lower[a.0].data.data(), grad, &mut db, m, k, n);
                accumulate(lower, *b, &db);
            }
        }

        Op::Transpose2d { x } => {
            let s = node.data.shape();
            let (r, c) = (s[0], s[1]);
            let mut dx = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[j * r + i] = grad[i * c + j];
                }
            }
            accumulate(lower, *x, &dx);
        }

        Op::Reshape { x } => {
            accumulate(lower, *x, grad);
        }

        Op::Narrow { x, axis, start } => {
            let in_shape = lower[x.0].data.shape().to_vec();
            let out_shape = node.data.shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let len = out_shape[*axis];
            let mut dx = vec![T::zero(); lower[x.0].data.numel()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * in_shape[*axis] + start) * inner;
                dx[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
            }
            accumulate(lower, *x, &dx);
        }

        Op::Concat { parts, axis } => {
            let out_shape = node.data.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let blk = lower[p.0].data.shape()[*axis] * inner;
                if lower[p.0].requires {
                    let mut dp = vec![T::zero(); lower[p.0].data.numel()];
                    for o in 0..outer {
                        let src = o * total + offset;
                        dp[o * blk..(o + 1) * blk].copy_from_slice(&grad[src..src + blk]);
                    }
                    accumulate(lower, p, &dp);
                }
                offset += blk;
            }
        }

        Op::SumAll { x } => {
            let dx = vec![grad[0]; lower[x.0].data.numel()];
            accumulate(lower, *x, &dx);
        }

        Op::MeanAll { x } => {
            let n = lower[x.0].data.numel();
            let g = grad[0] / T::from_f64(n as f64);
            let dx = vec![g; n];
            accumulate(lower, *x, &dx);
        }

        Op::AddBiasRows { x, bias } => {
            accumulate(lower, *x, grad);
            if lower[bias.0].requires {
                let d = lower[bias.0].data.numel();
                let mut db = vec![T::zero(); d];
                for (i, &g) in grad.iter().enumerate() {
                    db[i % d] += g;
                }
                accumulate(lower, *bias, &db);
            }
        }

        Op::AddBiasChw { x, bias } => {
            accumulate(lower, *x, grad);
            if lower[bias.0].requires {
                let c = lower[bias.0].data.numel();
                let plane = grad.len() / c;
                let mut db = vec![T::zero(); c];
                for (i, &g) in grad.iter().enumerate() {
                    db[i / plane] += g;
                }
                accumulate(lower, *bias, &db);
            }
        }

        Op::Softmax { x, axis } => {
            let s = node.data.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[*axis + 1..].iter().product();
            let ax = s[*axis];
            let y = node.data.data();
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * ax + a) * inner + i;
                    let mut dot = T::zero();
                    for a in 0..ax {
                        dot += grad[idx(a)] * y[idx(a)];
                    }
                    for a in 0..ax {
                        dx[idx(a)] = y[idx(a)] * (grad[idx(a)] - dot);
                    }
                }
            }
            accumulate(lower, *x, &dx);
        }

        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let d = lower[gamma.0].data.numel();
            let rows = grad.len() / d;
            let xs = lower[x.0].data.data();
            let gs = lower[gamma.0].data.data();
            let dn = T::from_f64(d as f64);
            let mut dx = vec![T::zero(); xs.len()];
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            for r in 0..rows {
                let base = r * d;
                let (mu, istd) = (mean[r], inv_std[r]);
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for i in 0..d {
                    let xhat = (xs[base + i] - mu) * istd;
                    let dy = grad[base + i];
                    dgamma[i] += dy * xhat;
                    dbeta[i] += dy;
                    let dxhat = dy * gs[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for i in 0..d {
                    let xhat = (xs[base + i] - mu) * istd;
                    let dxhat = grad[base + i] * gs[i];
                    dx[base + i] =
                        istd * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / dn);
                }
            }
            accumulate(lower, *x, &dx);
            accumulate(lower, *gamma, &dgamma);
            accumulate(lower, *beta, &dbeta);
        }

        Op::Conv2d {
            x,
            w,
            stride,
            padding,
        } => {
            let sx = lower[x.0].data.shape().to_vec();
            let sw = lower[w.0].data.shape().to_vec();
            let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
            let (c_out, k) = (sw[0], sw[2]);
            if lower[x.0].requires {
                let mut dx = vec![T::zero(); lower[x.0].data.numel()];
                kernels::conv2d_backward_input(
                    grad,
                    lower[w.0].data.data(),
                    &mut dx,
                    c_in,
                    h,
                    wd,
                    c_out,
                    k,
                    *stride,
                    *padding,
                );
                accumulate(lower, *x, &dx);
            }
            if lower[w.0].requires {
                let mut dw = vec![T::zero(); lower[w.0].data.numel()];
                kernels::conv2d_backward_kernel(
                    grad,
                    lower[x.0].data.data(),
                    &mut dw,
                    c_in,
                    h,
                    wd,
                    c_out,
                    k,
                    *stride,
                    *padding,
                );
                accumulate(lower, *w, &dw);
            }
        }

        Op::ConvTranspose2d { x, w, stride } => {
            let sx = lower[x.0].data.shape().to_vec();
            let sw = lower[w.0].data.shape().to_vec();
            let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
            let c_out = sw[1];
            let need_dx = lower[x.0].requires;
            let need_dw = lower[w.0].requires;
            let mut dx = if need_dx {
                vec![T::zero(); lower[x.0].data.numel()]
            } else {
                Vec::new()
            };
            let mut dw = if need_dw {
                vec![T::zero(); lower[w.0].data.numel()]
            } else {
                Vec::new()
            };
            kernels::conv_transpose2d_backward(
                grad,
                lower[x.0].data.data(),
                lower[w.0].data.data(),
                need_dx.then_some(dx.as_mut_slice()),
                need_dw.then_some(dw.as_mut_slice()),
                c_in,
                h,
                wd,
                c_out,
                *stride,
            );
            if need_dx {
                accumulate(lower, *x, &dx);
            }
            if need_dw {
                accumulate(lower, *w, &dw);
            }
        }

        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            eps,
            mean,
            var,
        } => {
            let s = node.data.shape();
            let (c, plane) = (s[0], s[1] * s[2]);
            let xs = lower[x.0].data.data();
            let gs = lower[gamma.0].data.data();
            let n = T::from_f64(plane as f64);
            let mut dx = vec![T::zero(); xs.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                let istd = T::one() / (var[ch] + *eps).sqrt();
                let base = ch * plane;
                let mut sum_dy = T::zero();
                let mut sum_dy_xhat = T::zero();
                for i in 0..plane {
                    let dy = grad[base + i];
                    let xhat = (xs[base + i] - mean[ch]) * istd;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
                dgamma[ch] += sum_dy_xhat;
                dbeta[ch] += sum_dy;
                let gch = gs[ch];
                for i in 0..plane {
                    let dy = grad[base + i];
                    let xhat = (xs[base + i] - mean[ch]) * istd;
                    dx[base + i] =
                        gch * istd * (dy - (sum_dy + xhat * sum_dy_xhat) / n);
                }
            }
            accumulate(lower, *x, &dx);
            accumulate(lower, *gamma, &dgamma);
            accumulate(lower, *beta, &dbeta);
        }

        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            var,
            eps,
        } => {
            let s = node.data.shape();
            let (c, plane) = (s[0], s[1] * s[2]);
            let xs = lower[x.0].data.data();
            let gs = lower[gamma.0].data.data();
            let mut dx = vec![T::zero(); xs.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                let istd = T::one() / (var[ch] + *eps).sqrt();
                let base = ch * plane;
                for i in 0..plane {
                    let dy = grad[base + i];
                    dx[base + i] = dy * gs[ch] * istd;
                    dgamma[ch] += dy * (xs[base + i] - mean[ch]) * istd;
                    dbeta[ch] += dy;
                }
            }
            accumulate(lower, *x, &dx);
            accumulate(lower, *gamma, &dgamma);
            accumulate(lower, *beta, &dbeta);
        }

        Op::BilinearResize { x } => {
            let out = node.data.shape();
            let input = lower[x.0].data.shape().to_vec();
            let mut dx = vec![T::zero(); lower[x.0].data.numel()];
            kernels::bilinear_resize_backward(
                grad,
                &mut dx,
                input[0],
                input[1],
                input[2],
                out[1],
                out[2],
            );
            accumulate(lower, *x, &dx);
        }

        Op::Patchify { x, patch } => {
            let s = lower[x.0].data.shape().to_vec();
            let (c, h, w) = (s[0], s[1], s[2]);
            let p = *patch;
            let (gh, gw) = (h / p, w / p);
            let cols = c * p * p;
            let mut dx = vec![T::zero(); c * h * w];
            for gy in 0..gh {
                for gx in 0..gw {
                    let row = gy * gw + gx;
                    for ch in 0..c {
                        for dy in 0..p {
                            for dxp in 0..p {
                                let col = (ch * p + dy) * p + dxp;
                                dx[(ch * h + gy * p + dy) * w + gx * p + dxp] +=
                                    grad[row * cols + col];
                            }
                        }
                    }
                }
            }
            accumulate(lower, *x, &dx);
        }

        Op::SlotAttention {
            q,
            keys,
            values,
            weights,
        } => {
            let s = node.data.shape();
            let (d, plane) = (s[0], s[1] * s[2]);
            let m = keys.len();
            let scale = T::from_f64(1.0 / (d as f64).sqrt());
            let qd = lower[q.0].data.data();
            let mut dq = vec![T::zero(); d * plane];
            let mut dks = vec![vec![T::zero(); d * plane]; m];
            let mut dvs = vec![vec![T::zero(); d * plane]; m];
            let mut dw = vec![T::zero(); m];
            let mut ds = vec![T::zero(); m];
            for p in 0..plane {
                let wrow = &weights[p * m..(p + 1) * m];
                for i in 0..m {
                    let vd = lower[values[i].0].data.data();
                    let mut acc = T::zero();
                    for c in 0..d {
                        let g = grad[c * plane + p];
                        dvs[i][c * plane + p] += wrow[i] * g;
                        acc += g * vd[c * plane + p];
                    }
                    dw[i] = acc;
                }
                let mut dot = T::zero();
                for i in 0..m {
                    dot += dw[i] * wrow[i];
                }
                for i in 0..m {
                    ds[i] = wrow[i] * (dw[i] - dot) * scale;
                }
                for i in 0..m {
                    let kd = lower[keys[i].0].data.data();
                    for c in 0..d {
                        dq[c * plane + p] += ds[i] * kd[c * plane + p];
                        dks[i][c * plane + p] += ds[i] * qd[c * plane + p];
                    }
                }
            }
            accumulate(lower, *q, &dq);
            for i in 0..m {
                accumulate(lower, keys[i], &dks[i]);
                accumulate(lower, values[i], &dvs[i]);
            }
        }

        Op::BceWithLogits { logits, target } => {
            let z = lower[logits.0].data.data();
            let n = T::from_f64(z.len() as f64);
            let g = grad[0] / n;
            let dz: Vec<T> = z
                .iter()
                .zip(target.iter())
                .map(|(&zi, &ti)| g * (sigmoid_scalar(zi) - ti))
                .collect();
            accumulate(lower, *logits, &dz);
        }
    }
}
