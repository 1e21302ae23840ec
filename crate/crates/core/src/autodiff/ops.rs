//! Forward and backward rules for every primitive the tape can record.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::{numel, Tensor};

/// Inputs to `exp` are clamped to this value before evaluation.
pub const EXP_CLAMP: f64 = 700.0;

/// Eigenvalues below this are treated as zero by [`Primitive::TracePower`].
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub enum Primitive {
    /// Elementwise; the right operand may broadcast when its shape is a
    /// suffix of the left operand's shape (bias rows, scalars).
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    /// Sum over one axis, or over everything when `None`.
    Sum(Option<usize>),
    Mean(Option<usize>),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softmax(usize),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Inputs: image `[n, c, h, w]`, kernel `[o, c, kh, kw]`, bias `[o]`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    /// Embedding lookup: gathers leading-axis entries by index.
    Gather(Arc<[usize]>),
    Scale(f64),
    /// Left-multiplication by a constant sparse matrix.
    SparseMatMul(Arc<CsrMatrix>),
    /// `[n, d] -> [n, n]` squared Euclidean distances.
    PairwiseSqDist,
    Trace,
    /// `tr(A^alpha)` of a symmetric PSD matrix over eigenvalues above [`EIGEN_FLOOR`].
    TracePower(f64),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::Permute(_) => "permute",
            Primitive::Sum(_) => "sum",
            Primitive::Mean(_) => "mean",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softmax(_) => "softmax",
            Primitive::Concat(_) => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::MaxPool2d { .. } => "maxpool2d",
            Primitive::Gather(_) => "embedding_lookup",
            Primitive::Scale(_) => "scale",
            Primitive::SparseMatMul(_) => "sparse_matmul",
            Primitive::PairwiseSqDist => "pairwise_sq_dist",
            Primitive::Trace => "trace",
            Primitive::TracePower(_) => "trace_power",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => Some(2),
            Primitive::Conv2d { .. } => Some(3),
            Primitive::Concat(_) => None,
            _ => Some(1),
        }
    }
}

/// Intermediates kept from the forward pass for the backward rule.
#[derive(Debug, Default)]
pub(crate) enum Saved {
    #[default]
    Nothing,
    Indices(Vec<usize>),
    Tensor(Tensor),
}

pub(crate) struct Forward {
    pub value: Tensor,
    pub saved: Saved,
    pub exp_clamps: usize,
}

fn dim_err(p: &Primitive, shapes: &[&[usize]]) -> Error {
    Error::dim(p.name(), format!("incompatible input shapes {shapes:?}"))
}

fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `(outer, axis_len, inner)` decomposition around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major `c = op(a) · op(b)` where `op` optionally transposes.
/// `a` is `m×k` after op, `b` is `k×n` after op.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    // SAFETY: slices cover m*k, k*n and m*n elements with the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
            return None;
        }
        let ho = conv_out(x[2], k[2], stride, pad)?;
        let wo = conv_out(x[3], k[3], stride, pad)?;
        Some(ConvGeom {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: k[0],
            kh: k[2],
            kw: k[3],
            ho,
            wo,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Visits `(col_row, position, image_offset)` for every in-bounds tap of one image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            let src = (ci * self.h + ii as usize) * self.w + jj as usize;
                            f(row, oi * self.wo + oj, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, image: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.patch() * p];
        self.for_each_tap(|row, pos, src| cols[row * p + pos] = image[src]);
        cols
    }

    fn col2im_add(&self, cols: &[f64], image_grad: &mut [f64]) {
        let p = self.positions();
        self.for_each_tap(|row, pos, src| image_grad[src] += cols[row * p + pos]);
    }
}

pub(crate) fn forward(p: &Primitive, inputs: &[&Tensor]) -> Result<Forward> {
    if let Some(arity) = p.arity() {
        if inputs.len() != arity {
            return Err(Error::contract(format!(
                "{} expects {arity} inputs, got {}",
                p.name(),
                inputs.len()
            )));
        }
    } else if inputs.is_empty() {
        return Err(Error::contract(format!("{} needs at least one input", p.name())));
    }
    let mut exp_clamps = 0;
    let mut saved = Saved::Nothing;
    let x = inputs[0];
    let value = match p {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let b = inputs[1];
            if !broadcasts(x.shape(), b.shape()) {
                return Err(dim_err(p, &[x.shape(), b.shape()]));
            }
            let bn = b.numel();
            let f: fn(f64, f64) -> f64 = match p {
                Primitive::Add => |u, v| u + v,
                Primitive::Sub => |u, v| u - v,
                Primitive::Mul => |u, v| u * v,
                _ => |u, v| u / v,
            };
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &u)| f(u, b.data()[i % bn]))
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Primitive::MatMul => {
            let b = inputs[1];
            let (xs, bs) = (x.shape(), b.shape());
            if xs.len() != 2 || bs.len() != 2 || xs[1] != bs[0] {
                return Err(dim_err(p, &[xs, bs]));
            }
            let data = gemm(xs[0], xs[1], bs[1], x.data(), false, b.data(), false);
            Tensor::from_parts(vec![xs[0], bs[1]], data)
        }
        Primitive::Transpose => {
            let s = x.shape();
            if s.len() != 2 {
                return Err(dim_err(p, &[s]));
            }
            Tensor::from_parts(vec![s[1], s[0]], transpose(x.data(), s[0], s[1]))
        }
        Primitive::Reshape(shape) => {
            if numel(shape) != x.numel() || shape.iter().any(|&d| d == 0) {
                return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", x.shape())));
            }
            Tensor::from_parts(shape.clone(), x.data().to_vec())
        }
        Primitive::Permute(axes) => {
            let mut seen = vec![false; x.ndim()];
            if axes.len() != x.ndim() || axes.iter().any(|&a| a >= x.ndim() || std::mem::replace(&mut seen[a], true)) {
                return Err(Error::dim("permute", format!("axes {axes:?} for shape {:?}", x.shape())));
            }
            let (shape, data) = permute(x.shape(), x.data(), axes);
            Tensor::from_parts(shape, data)
        }
        Primitive::Sum(axis) | Primitive::Mean(axis) => {
            let mean = matches!(p, Primitive::Mean(_));
            match axis {
                None => {
                    let s = x.sum();
                    Tensor::scalar(if mean { s / x.numel() as f64 } else { s })
                }
                Some(ax) => {
                    if *ax >= x.ndim() {
                        return Err(Error::dim(p.name(), format!("axis {ax} for shape {:?}", x.shape())));
                    }
                    let (outer, len, inner) = split_axis(x.shape(), *ax);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for i in 0..inner {
                                out[o * inner + i] += x.data()[base + i];
                            }
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(*ax);
                    Tensor::from_parts(shape, out)
                }
            }
        }
        Primitive::Relu => x.map(|v| v.max(0.0)),
        Primitive::Sigmoid => x.map(sigmoid),
        Primitive::Tanh => x.map(f64::tanh),
        Primitive::Exp => {
            let mut data = Vec::with_capacity(x.numel());
            for &v in x.data() {
                if v > EXP_CLAMP {
                    exp_clamps += 1;
                    data.push(EXP_CLAMP.exp());
                } else {
                    data.push(v.exp());
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Primitive::Log => {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || !v.is_finite()) {
                return Err(Error::numeric("log", format!("non-positive input {bad}")));
            }
            x.map(f64::ln)
        }
        Primitive::Softmax(axis) => {
            if *axis >= x.ndim() {
                return Err(Error::dim("softmax", format!("axis {axis} for shape {:?}", x.shape())));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let max = (0..len).map(|a| out[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for a in 0..len {
                        let e = (out[idx(a)] - max).exp();
                        out[idx(a)] = e;
                        total += e;
                    }
                    for a in 0..len {
                        out[idx(a)] /= total;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Primitive::Concat(axis) => {
            let first = x.shape();
            if *axis >= first.len() {
                return Err(Error::dim("concat", format!("axis {axis} for shape {first:?}")));
            }
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                let ok = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !ok {
                    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
                    return Err(dim_err(p, &shapes));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = split_axis(first, *axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let len = t.shape()[*axis];
                    data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Tensor::from_parts(shape, data)
        }
        Primitive::Slice { axis, start, end } => {
            if *axis >= x.ndim() || start >= end || *end > x.shape()[*axis] {
                return Err(Error::dim(
                    "slice",
                    format!("[{start}, {end}) on axis {axis} of {:?}", x.shape()),
                ));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let width = end - start;
            let mut data = Vec::with_capacity(outer * width * inner);
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = width;
            Tensor::from_parts(shape, data)
        }
        Primitive::Conv2d { stride, padding } => {
            let (k, b) = (inputs[1], inputs[2]);
            let g = ConvGeom::new(x.shape(), k.shape(), *stride, *padding)
                .filter(|g| b.shape() == [g.o])
                .ok_or_else(|| dim_err(p, &[x.shape(), k.shape(), b.shape()]))?;
            let (patch, pos) = (g.patch(), g.positions());
            let img = g.c * g.h * g.w;
            let mut all_cols = Vec::with_capacity(g.n * patch * pos);
            let mut out = Vec::with_capacity(g.n * g.o * pos);
            for s in 0..g.n {
                let cols = g.im2col(&x.data()[s * img..(s + 1) * img]);
                let mut y = gemm(g.o, patch, pos, k.data(), false, &cols, false);
                for (oc, chunk) in y.chunks_mut(pos).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b.data()[oc]);
                }
                out.extend_from_slice(&y);
                all_cols.extend_from_slice(&cols);
            }
            saved = Saved::Tensor(Tensor::from_parts(vec![g.n, patch, pos], all_cols));
            Tensor::from_parts(vec![g.n, g.o, g.ho, g.wo], out)
        }
        Primitive::MaxPool2d { size, stride } => {
            let s = x.shape();
            if s.len() != 4 || *size == 0 {
                return Err(dim_err(p, &[s]));
            }
            let (ho, wo) = match (conv_out(s[2], *size, *stride, 0), conv_out(s[3], *size, *stride, 0)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(dim_err(p, &[s])),
            };
            let planes = s[0] * s[1];
            let (h, w) = (s[2], s[3]);
            let mut out = Vec::with_capacity(planes * ho * wo);
            let mut arg = Vec::with_capacity(planes * ho * wo);
            for pl in 0..planes {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for di in 0..*size {
                            for dj in 0..*size {
                                let idx = pl * h * w + (oi * stride + di) * w + oj * stride + dj;
                                if x.data()[idx] > best_v || best == usize::MAX {
                                    best = idx;
                                    best_v = x.data()[idx];
                                }
                            }
                        }
                        out.push(best_v);
                        arg.push(best);
                    }
                }
            }
            saved = Saved::Indices(arg);
            Tensor::from_parts(vec![s[0], s[1], ho, wo], out)
        }
        Primitive::Gather(idx) => {
            if idx.is_empty() {
                return Err(Error::dim("embedding_lookup", "empty index list"));
            }
            x.select_rows(idx)
                .map_err(|_| Error::dim("embedding_lookup", format!("index out of range for {:?}", x.shape())))?
        }
        Primitive::Scale(s) => x.scale(*s),
        Primitive::SparseMatMul(m) => {
            let s = x.shape();
            if s.len() != 2 || s[0] != m.cols() {
                return Err(Error::dim(
                    "sparse_matmul",
                    format!("{}x{} operator on {s:?}", m.rows(), m.cols()),
                ));
            }
            Tensor::from_parts(vec![m.rows(), s[1]], m.mul_dense(x.data(), s[1]))
        }
        Primitive::PairwiseSqDist => {
            let s = x.shape();
            if s.len() != 2 {
                return Err(dim_err(p, &[s]));
            }
            Tensor::from_parts(vec![s[0], s[0]], pairwise_sq_dist(x.data(), s[0], s[1]))
        }
        Primitive::Trace => {
            let s = x.shape();
            if s.len() != 2 || s[0] != s[1] {
                return Err(dim_err(p, &[s]));
            }
            Tensor::scalar((0..s[0]).map(|i| x.data()[i * s[0] + i]).sum())
        }
        Primitive::TracePower(alpha) => {
            let s = x.shape();
            if s.len() != 2 || s[0] != s[1] {
                return Err(dim_err(p, &[s]));
            }
            let (value, grad) = trace_power(x.data(), s[0], *alpha);
            saved = Saved::Tensor(grad);
            Tensor::scalar(value)
        }
    };
    if !value.is_finite() {
        return Err(Error::numeric(p.name(), "non-finite output"));
    }
    Ok(Forward {
        value,
        saved,
        exp_clamps,
    })
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn permute(shape: &[usize], data: &[f64], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum();
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn pairwise_sq_dist(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = x[i * d..(i + 1) * d]
                .iter()
                .zip(&x[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[i * n + j] = dist;
            out[j * n + i] = dist;
        }
    }
    out
}

/// Returns `tr(A^alpha)` and its gradient `alpha · A^(alpha-1)` restricted to
/// the retained spectrum.
fn trace_power(a: &[f64], n: usize, alpha: f64) -> (f64, Tensor) {
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[i * n + j] + a[j * n + i]));
    let eig = SymmetricEigen::new(m);
    let mut value = 0.0;
    let mut grad = vec![0.0; n * n];
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < EIGEN_FLOOR {
            continue;
        }
        value += lambda.powf(alpha);
        let w = alpha * lambda.powf(alpha - 1.0);
        let v = eig.eigenvectors.column(k);
        for i in 0..n {
            let vi = w * v[i];
            for j in 0..n {
                grad[i * n + j] += vi * v[j];
            }
        }
    }
    (value, Tensor::from_parts(vec![n, n], grad))
}

/// Gradients with respect to each input, given the gradient of the output.
pub(crate) fn backward(p: &Primitive, inputs: &[&Tensor], out: &Tensor, saved: &Saved, g: &Tensor) -> Vec<Tensor> {
    let x = inputs[0];
    let gd = g.data();
    let like = |t: &Tensor, data: Vec<f64>| Tensor::from_parts(t.shape().to_vec(), data);
    match p {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let b = inputs[1];
            let bn = b.numel();
            let bd = b.data();
            let mut gb = vec![0.0; bn];
            let ga: Vec<f64> = match p {
                Primitive::Add | Primitive::Sub => {
                    let sign = if matches!(p, Primitive::Add) { 1.0 } else { -1.0 };
                    for (i, &v) in gd.iter().enumerate() {
                        gb[i % bn] += sign * v;
                    }
                    gd.to_vec()
                }
                Primitive::Mul => {
                    for (i, &v) in gd.iter().enumerate() {
                        gb[i % bn] += v * x.data()[i];
                    }
                    gd.iter().enumerate().map(|(i, &v)| v * bd[i % bn]).collect()
                }
                _ => {
                    for (i, &v) in gd.iter().enumerate() {
                        let q = bd[i % bn];
                        gb[i % bn] -= v * x.data()[i] / (q * q);
                    }
                    gd.iter().enumerate().map(|(i, &v)| v / bd[i % bn]).collect()
                }
            };
            vec![like(x, ga), like(b, gb)]
        }
        Primitive::MatMul => {
            let b = inputs[1];
            let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
            let ga = gemm(m, n, k, gd, false, b.data(), true);
            let gb = gemm(k, m, n, x.data(), true, gd, false);
            vec![like(x, ga), like(b, gb)]
        }
        Primitive::Transpose => {
            let s = out.shape();
            vec![like(x, transpose(gd, s[0], s[1]))]
        }
        Primitive::Reshape(_) => vec![like(x, gd.to_vec())],
        Primitive::Permute(axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (_, data) = permute(out.shape(), gd, &inverse);
            vec![like(x, data)]
        }
        Primitive::Sum(axis) | Primitive::Mean(axis) => {
            let mean = matches!(p, Primitive::Mean(_));
            match axis {
                None => {
                    let scale = if mean { 1.0 / x.numel() as f64 } else { 1.0 };
                    vec![Tensor::full(x.shape(), gd[0] * scale)]
                }
                Some(ax) => {
                    let (outer, len, inner) = split_axis(x.shape(), *ax);
                    let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                    let mut data = vec![0.0; x.numel()];
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                data[(o * len + a) * inner + i] = gd[o * inner + i] * scale;
                            }
                        }
                    }
                    vec![like(x, data)]
                }
            }
        }
        Primitive::Relu => vec![like(
            x,
            x.data().iter().zip(gd).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
        )],
        Primitive::Sigmoid => vec![like(
            x,
            out.data().iter().zip(gd).map(|(&s, &g)| g * s * (1.0 - s)).collect(),
        )],
        Primitive::Tanh => vec![like(
            x,
            out.data().iter().zip(gd).map(|(&t, &g)| g * (1.0 - t * t)).collect(),
        )],
        Primitive::Exp => vec![like(
            x,
            x.data()
                .iter()
                .zip(out.data())
                .zip(gd)
                .map(|((&v, &e), &g)| if v > EXP_CLAMP { 0.0 } else { g * e })
                .collect(),
        )],
        Primitive::Log => vec![like(x, x.data().iter().zip(gd).map(|(&v, &g)| g / v).collect())],
        Primitive::Softmax(axis) => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let y = out.data();
            let mut data = vec![0.0; x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| gd[idx(a)] * y[idx(a)]).sum();
                    for a in 0..len {
                        data[idx(a)] = y[idx(a)] * (gd[idx(a)] - dot);
                    }
                }
            }
            vec![like(x, data)]
        }
        Primitive::Concat(axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let len = t.shape()[*axis];
                    let mut data = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    offset += len;
                    like(t, data)
                })
                .collect()
        }
        Primitive::Slice { axis, start, end } => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let width = end - start;
            let mut data = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                data[base..base + width * inner].copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
            }
            vec![like(x, data)]
        }
        Primitive::Conv2d { stride, padding } => {
            let (k, b) = (inputs[1], inputs[2]);
            let g = ConvGeom::new(x.shape(), k.shape(), *stride, *padding).expect("validated in forward");
            let Saved::Tensor(cols) = saved else {
                unreachable!("conv2d saves its im2col buffer")
            };
            let (patch, pos) = (g.patch(), g.positions());
            let img = g.c * g.h * g.w;
            let mut gx = vec![0.0; x.numel()];
            let mut gk = vec![0.0; k.numel()];
            let mut gb = vec![0.0; b.numel()];
            for s in 0..g.n {
                let gs = &gd[s * g.o * pos..(s + 1) * g.o * pos];
                let cs = &cols.data()[s * patch * pos..(s + 1) * patch * pos];
                let dk = gemm(g.o, pos, patch, gs, false, cs, true);
                gk.iter_mut().zip(&dk).for_each(|(a, d)| *a += d);
                for (oc, chunk) in gs.chunks(pos).enumerate() {
                    gb[oc] += chunk.iter().sum::<f64>();
                }
                let dcols = gemm(patch, g.o, pos, k.data(), true, gs, false);
                g.col2im_add(&dcols, &mut gx[s * img..(s + 1) * img]);
            }
            vec![like(x, gx), like(k, gk), like(b, gb)]
        }
        Primitive::MaxPool2d { .. } => {
            let Saved::Indices(arg) = saved else {
                unreachable!("maxpool saves argmax indices")
            };
            let mut data = vec![0.0; x.numel()];
            for (&src, &gv) in arg.iter().zip(gd) {
                data[src] += gv;
            }
            vec![like(x, data)]
        }
        Primitive::Gather(idx) => {
            let w = x.row_len();
            let mut data = vec![0.0; x.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..w {
                    data[i * w + c] += gd[r * w + c];
                }
            }
            vec![like(x, data)]
        }
        Primitive::Scale(s) => vec![like(x, gd.iter().map(|v| v * s).collect())],
        Primitive::SparseMatMul(m) => {
            let w = x.shape()[1];
            vec![like(x, m.transpose().mul_dense(gd, w))]
        }
        Primitive::PairwiseSqDist => {
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let xd = x.data();
            let mut data = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let s = 2.0 * (gd[i * n + j] + gd[j * n + i]);
                    for c in 0..d {
                        data[i * d + c] += s * (xd[i * d + c] - xd[j * d + c]);
                    }
                }
            }
            vec![like(x, data)]
        }
        Primitive::Trace => {
            let n = x.shape()[0];
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                data[i * n + i] = gd[0];
            }
            vec![like(x, data)]
        }
        Primitive::TracePower(_) => {
            let Saved::Tensor(grad) = saved else {
                unreachable!("trace_power saves its gradient")
            };
            vec![grad.scale(gd[0])]
        }
    }
}
