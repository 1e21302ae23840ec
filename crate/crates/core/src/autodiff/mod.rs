//! Reverse-mode differentiation scoped to one recording context.
//!
//! Every trainable module records its forward pass on its own [`Tape`].
//! A [`Var`] belongs to exactly one tape; when a value produced on another
//! tape is fed into an operation it is copied in as a constant, so no
//! gradient can ever flow across a tape boundary. A tape is consumed by
//! [`Tape::backward`] and cannot be differentiated twice.

mod ops;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use ops::{Primitive, EIGEN_FLOOR, EXP_CLAMP};
pub(crate) use ops::pairwise_sq_dist;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Counters for silent numeric adjustments made during recording.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub exp_clamps: usize,
}

struct Node {
    value: Tensor,
    prim: Option<Primitive>,
    inputs: Vec<usize>,
    saved: ops::Saved,
    tracks_grad: bool,
    is_param: bool,
}

struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
    diagnostics: Diagnostics,
}

pub struct Tape {
    id: u64,
    owner: usize,
    inner: RefCell<Inner>,
}

impl Tape {
    /// A fresh tape owned by module `owner`.
    pub fn new(owner: usize) -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            owner,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
                diagnostics: Diagnostics::default(),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.inner.borrow().diagnostics
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, is_param: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            prim: None,
            inputs: Vec::new(),
            saved: ops::Saved::Nothing,
            tracks_grad: is_param,
            is_param,
        });
        Var {
            tape: self,
            index: inner.nodes.len() - 1,
        }
    }

    /// Registers a trainable leaf.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.push_leaf(value.clone(), true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, value: &Tensor) -> Var<'_> {
        self.push_leaf(value.clone(), false)
    }

    pub fn constant_owned(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn adopt<'t>(&'t self, v: Var<'_>) -> usize {
        if v.tape.id == self.id {
            v.index
        } else {
            self.constant_owned(v.value()).index
        }
    }

    /// Records one primitive application. Inputs recorded on other tapes
    /// enter as constants.
    pub fn apply(&self, prim: Primitive, inputs: &[Var<'_>]) -> Result<Var<'_>> {
        let ids: Vec<usize> = inputs.iter().map(|&v| self.adopt(v)).collect();
        let (fwd, tracks_grad) = {
            let inner = self.inner.borrow();
            let values: Vec<&Tensor> = ids.iter().map(|&i| &inner.nodes[i].value).collect();
            let tracks = ids.iter().any(|&i| inner.nodes[i].tracks_grad);
            (ops::forward(&prim, &values)?, tracks)
        };
        let mut inner = self.inner.borrow_mut();
        inner.diagnostics.exp_clamps += fwd.exp_clamps;
        inner.nodes.push(Node {
            value: fwd.value,
            prim: Some(prim),
            inputs: ids,
            saved: if tracks_grad { fwd.saved } else { ops::Saved::Nothing },
            tracks_grad,
            is_param: false,
        });
        Ok(Var {
            tape: self,
            index: inner.nodes.len() - 1,
        })
    }

    /// Gradients of a scalar `loss` with respect to every parameter leaf it
    /// depends on. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<GradientMap> {
        if loss.tape.id != self.id {
            return Err(Error::contract("loss was recorded on a different tape"));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed(self.id));
        }
        let loss_value = &inner.nodes[loss.index].value;
        if loss_value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        inner.consumed = true;
        let nodes = std::mem::take(&mut inner.nodes);
        drop(inner);

        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(nodes[loss.index].value.shape(), 1.0));
        let mut entries = BTreeMap::new();
        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            if !node.tracks_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.is_param {
                entries.insert(i, g);
                continue;
            }
            let prim = node.prim.as_ref().expect("non-leaf has a primitive");
            let values: Vec<&Tensor> = node.inputs.iter().map(|&j| &nodes[j].value).collect();
            let input_grads = ops::backward(prim, &values, &node.value, &node.saved, &g);
            for (&j, gj) in node.inputs.iter().zip(input_grads) {
                if !nodes[j].tracks_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.data_mut().iter_mut().zip(gj.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gj),
                }
            }
        }
        Ok(GradientMap {
            tape: self.id,
            entries,
        })
    }
}

/// A tensor recorded on a particular tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(tape {}, #{})", self.tape.id, self.index)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.index].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.index].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.inner.borrow().nodes[self.index].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.index].tracks_grad
    }

    fn unary(self, p: Primitive) -> Result<Var<'t>> {
        self.tape.apply(p, &[self])
    }

    fn binary(self, p: Primitive, other: Var<'_>) -> Result<Var<'t>> {
        self.tape.apply(p, &[self, other])
    }

    pub fn add(self, other: Var<'_>) -> Result<Var<'t>> {
        self.binary(Primitive::Add, other)
    }

    pub fn sub(self, other: Var<'_>) -> Result<Var<'t>> {
        self.binary(Primitive::Sub, other)
    }

    pub fn mul(self, other: Var<'_>) -> Result<Var<'t>> {
        self.binary(Primitive::Mul, other)
    }

    pub fn div(self, other: Var<'_>) -> Result<Var<'t>> {
        self.binary(Primitive::Div, other)
    }

    pub fn matmul(self, other: Var<'_>) -> Result<Var<'t>> {
        self.binary(Primitive::MatMul, other)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(Primitive::Transpose)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Primitive::Reshape(shape.to_vec()))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        self.unary(Primitive::Permute(axes.to_vec()))
    }

    /// `[n, ...] -> [n, rest]`.
    pub fn flatten_rows(self) -> Result<Var<'t>> {
        let s = self.shape();
        let n = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product::<usize>().max(1);
        self.reshape(&[n, rest])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sum(None))
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.unary(Primitive::Sum(Some(axis)))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(Primitive::Mean(None))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.unary(Primitive::Mean(Some(axis)))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Primitive::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Primitive::Tanh)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Primitive::Exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(Primitive::Log)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.unary(Primitive::Softmax(axis))
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary(Primitive::Slice { axis, start, end })
    }

    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        self.unary(Primitive::Gather(indices.into()))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary(Primitive::Scale(s))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn sparse_left_mul(self, m: &Arc<CsrMatrix>) -> Result<Var<'t>> {
        self.unary(Primitive::SparseMatMul(Arc::clone(m)))
    }

    pub fn pairwise_sq_dist(self) -> Result<Var<'t>> {
        self.unary(Primitive::PairwiseSqDist)
    }

    pub fn trace(self) -> Result<Var<'t>> {
        self.unary(Primitive::Trace)
    }

    pub fn trace_power(self, alpha: f64) -> Result<Var<'t>> {
        self.unary(Primitive::TracePower(alpha))
    }

    pub fn conv2d(self, kernel: Var<'_>, bias: Var<'_>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Conv2d { stride, padding }, &[self, kernel, bias])
    }

    pub fn maxpool2d(self, size: usize, stride: usize) -> Result<Var<'t>> {
        self.unary(Primitive::MaxPool2d { size, stride })
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of no tensors"))?;
        first.tape.apply(Primitive::Concat(axis), parts)
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug)]
pub struct GradientMap {
    tape: u64,
    entries: BTreeMap<usize, Tensor>,
}

impl GradientMap {
    /// The gradient for `param`, or `None` when it is not a parameter of
    /// this tape or the loss does not depend on it.
    pub fn get(&self, param: Var<'_>) -> Option<&Tensor> {
        if param.tape.id != self.tape {
            return None;
        }
        self.entries.get(&param.index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of a scalar function at `x`.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let tape = Tape::new(0);
    let xv = tape.param(x);
    let y = f(xv)?;
    if y.value().numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new(0);
        f(tape.constant(t))?.item()
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new(0);
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(&Tensor::identity(2));
        assert_eq!(a.matmul(i).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_and_softmax_examples() {
        let tape = Tape::new(0);
        let x = tape.constant(&Tensor::vector(vec![-1.0, 0.0, 2.5]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.5]);
        let z = tape.constant(&Tensor::vector(vec![0.0; 3]));
        for v in z.softmax(0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new(0);
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn linear_map_gradient() {
        let tape = Tape::new(0);
        let w = tape.param(&t(&[1, 2], &[1.0, 1.0]));
        let x = tape.constant(&t(&[2, 1], &[3.0, 5.0]));
        let loss = w.matmul(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 5.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn shape_mismatch_names_op() {
        let tape = Tape::new(0);
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn log_of_zero_is_numeric_error() {
        let tape = Tape::new(0);
        let a = tape.constant(&Tensor::vector(vec![1.0, 0.0]));
        assert!(a.ln().unwrap_err().is_numeric());
    }

    #[test]
    fn exp_clamp_is_counted() {
        let tape = Tape::new(0);
        let a = tape.constant(&Tensor::vector(vec![800.0, 1.0, 701.0]));
        let e = a.exp().unwrap().value();
        assert_eq!(e.data()[0], EXP_CLAMP.exp());
        assert_eq!(tape.diagnostics().exp_clamps, 2);
    }

    #[test]
    fn backward_rejects_nonscalar_and_reuse() {
        let tape = Tape::new(0);
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let y = x.relu().unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        let s = y.sum().unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed(_))));
    }

    #[test]
    fn foreign_tape_values_enter_as_constants() {
        let upstream = Tape::new(0);
        let w0 = upstream.param(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let h = upstream.constant(&t(&[1, 2], &[1.0, 1.0])).matmul(w0).unwrap();

        let local = Tape::new(1);
        let w1 = local.param(&t(&[2, 1], &[0.5, -0.5]));
        let loss = local.constant(&Tensor::zeros(&[1, 2])).add(h).unwrap().matmul(w1).unwrap().sum().unwrap();
        let g = local.backward(loss).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.get(w0).is_none());
        assert_eq!(g.get(w1).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn unreachable_params_get_no_entry() {
        let tape = Tape::new(0);
        let a = tape.param(&Tensor::scalar(2.0));
        let _b = tape.param(&Tensor::scalar(3.0));
        let g = tape.backward(a.mul(a).unwrap()).unwrap();
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn grad_check_linear_and_sigmoid() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        assert!(grad_check(|v| v.sum(), &x, 1e-5).unwrap() <= 1e-9);
        let x = Tensor::vector(vec![0.3, -1.2]);
        assert!(grad_check(|v| v.sigmoid()?.sum(), &x, 1e-5).unwrap() <= 1e-6);
        assert!(grad_check(|v| v.relu(), &x, 1e-5).is_err());
    }
}
