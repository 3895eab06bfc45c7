//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation on a [`Var`]
//! computes its value eagerly, appends a node, and the node's backward rule
//! is replayed in reverse order by [`Tape::backward`]. Gradients flow in
//! `f64` through the whole backward sweep and are rounded to the storage type
//! only when handed back in [`Gradients`].

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, softplus, Tensor};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Sigmoid(usize),
    Relu(usize),
    SoftmaxRows(usize),
    L2Normalize {
        input: usize,
        axis: usize,
        norms: Vec<f64>,
    },
    AddRowVector(usize, usize),
    BceWithLogits {
        logits: usize,
        targets: Tensor<T>,
    },
    Stack(Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations for one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; a zero tensor when the leaf did not influence the loss.
    pub fn get(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.leaves.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape().to_vec()),
        }
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Tensor<T> {
        match self.leaves.get_mut(var.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(var.value().shape().to_vec()),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var<'_, T>> {
        value.check_finite(name)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs_of(&op).iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn owns(&self, var: Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, var.tape) {
            Ok(())
        } else {
            Err(Error::Validation("variable belongs to a different tape".into()))
        }
    }

    /// Stacks equally shaped variables along a new leading axis.
    pub fn stack(&self, items: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        for v in items {
            self.owns(*v)?;
        }
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor<T>> = items.iter().map(|v| &nodes[v.id].value).collect();
            Tensor::stack(&refs)?
        };
        self.push(value, Op::Stack(items.iter().map(|v| v.id).collect()), "stack")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.owns(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads)?;
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                let g = grads.get_mut(id).and_then(|g| g.take())?;
                if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                    return None;
                }
                let t = Tensor::from_parts(
                    node.value.shape().to_vec(),
                    g.into_iter().map(T::from_f64_lossy).collect(),
                );
                Some(t)
            })
            .collect::<Vec<_>>();
        for t in leaves.iter().flatten() {
            t.check_finite("backward")?;
        }
        Ok(Gradients { leaves })
    }
}

fn inputs_of<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRowVector(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumAxis(a, _)
        | Op::MeanAxis(a, _)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::SoftmaxRows(a) => vec![*a],
        Op::L2Normalize { input, .. } => vec![*input],
        Op::BceWithLogits { logits, .. } => vec![*logits],
        Op::Stack(ids) => ids.clone(),
    }
}

fn widen<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.to_f64_vec()
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<f64>>], id: usize, delta: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.numel();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; n]);
    delta(slot);
}

/// `m×k · k×n` in f64, optionally reading either side transposed.
fn gemm64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot += av * b[j * k + p];
                }
            } else {
                for (slot, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *slot += av * bv;
                }
            }
        }
    }
}

fn axis_parts(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn propagate<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(bv.data()) {
                    *s += g * y.widen();
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for ((s, g), x) in s.iter_mut().zip(g).zip(av.data()) {
                    *s += g * x.widen();
                }
            });
        }
        Op::Scale(a, f) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * f));
        }
        Op::MatMul(a, b) => {
            let (m, k) = nodes[*a].value.dims2("matmul")?;
            let (_, n) = nodes[*b].value.dims2("matmul")?;
            if nodes[*a].requires_grad {
                let bw = widen(&nodes[*b].value);
                accumulate(nodes, grads, *a, |s| gemm64(g, &bw, m, n, k, false, true, s));
            }
            if nodes[*b].requires_grad {
                let aw = widen(&nodes[*a].value);
                accumulate(nodes, grads, *b, |s| gemm64(&aw, g, k, m, n, true, false, s));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = nodes[*a].value.dims2("transpose")?;
            accumulate(nodes, grads, *a, |s| {
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.numel() as f64;
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0] / n));
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let (outer, n, inner) = axis_parts(nodes[*a].value.shape(), *axis);
            let w = if matches!(node.op, Op::MeanAxis(..)) {
                1.0 / n as f64
            } else {
                1.0
            };
            accumulate(nodes, grads, *a, |s| {
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            s[(o * n + k) * inner + i] += w * g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            accumulate(nodes, grads, *a, |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(y.data()) {
                    let y = y.widen();
                    *s += g * y * (1.0 - y);
                }
            });
        }
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, |s| {
                for ((s, g), x) in s.iter_mut().zip(g).zip(x.data()) {
                    if *x > T::zero() {
                        *s += g;
                    }
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let (r, c) = node.value.dims2("softmax_rows")?;
            let y = widen(&node.value);
            accumulate(nodes, grads, *a, |s| {
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(y, g)| y * g).sum();
                    for p in row {
                        s[p] += y[p] * (g[p] - dot);
                    }
                }
            });
        }
        Op::L2Normalize { input, axis, norms } => {
            let (outer, n, inner) = axis_parts(node.value.shape(), *axis);
            let y = widen(&node.value);
            accumulate(nodes, grads, *input, |s| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
                        let norm = norms[o * inner + i];
                        for k in 0..n {
                            s[at(k)] += (g[at(k)] - y[at(k)] * dot) / norm;
                        }
                    }
                }
            });
        }
        Op::AddRowVector(x, b) => {
            let (m, n) = node.value.dims2("add_row_vector")?;
            accumulate(nodes, grads, *x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| {
                for i in 0..m {
                    for j in 0..n {
                        s[j] += g[i * n + j];
                    }
                }
            });
        }
        Op::BceWithLogits { logits, targets } => {
            let z = &nodes[*logits].value;
            let rows = bce_rows(z.shape()) as f64;
            accumulate(nodes, grads, *logits, |s| {
                for ((s, z), y) in s.iter_mut().zip(z.data()).zip(targets.data()) {
                    *s += g[0] * (sigmoid(z.widen()) - y.widen()) / rows;
                }
            });
        }
        Op::Stack(ids) => {
            let chunk = nodes[ids[0]].value.numel();
            for (k, &src) in ids.iter().enumerate() {
                accumulate(nodes, grads, src, |s| {
                    for (s, g) in s.iter_mut().zip(&g[k * chunk..(k + 1) * chunk]) {
                        *s += g;
                    }
                });
            }
        }
    }
    Ok(())
}

/// Number of samples a BCE loss averages over: leading dimension of a matrix, else 1.
fn bce_rows(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[0]
    } else {
        1
    }
}

/// Mean over samples of the per-sample summed binary cross-entropy,
/// evaluated as `max(z,0) − z·y + log(1 + e^{−|z|})`.
pub fn bce_with_logits_value<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    logits.same_shape(targets, "bce_with_logits")?;
    validate_binary(targets)?;
    let total: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(z, y)| {
            let (z, y) = (z.widen(), y.widen());
            softplus(z) - z * y
        })
        .sum();
    Ok(total / bce_rows(logits.shape()) as f64)
}

fn validate_binary<T: Scalar>(targets: &Tensor<T>) -> Result<()> {
    if let Some(pos) = targets
        .data()
        .iter()
        .position(|v| *v != T::zero() && *v != T::one())
    {
        return Err(Error::Validation(format!(
            "bce target at index {pos} is {}, expected 0 or 1",
            targets.data()[pos]
        )));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, name: &str, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Self> {
        let value = f(&self.value())?;
        self.tape.push(value, op, name)
    }

    fn binary(
        self,
        other: Self,
        name: &str,
        op: Op<T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        self.tape.owns(other)?;
        let value = f(&self.value(), &other.value())?;
        self.tape.push(value, op, name)
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, "add", Op::Add(self.id, other.id), Tensor::add)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), Tensor::sub)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), Tensor::mul)
    }

    pub fn scale(self, factor: f64) -> Result<Self> {
        self.unary("scale", Op::Scale(self.id, factor), |x| Ok(x.scale(factor)))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.binary(other, "matmul", Op::MatMul(self.id, other.id), Tensor::matmul)
    }

    pub fn transpose(self) -> Result<Self> {
        self.unary("transpose", Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        self.unary("reshape", Op::Reshape(self.id), |x| x.reshape(shape))
    }

    pub fn sum(self) -> Result<Self> {
        self.unary("sum", Op::Sum(self.id), |x| {
            Ok(Tensor::scalar(T::from_f64_lossy(x.sum())))
        })
    }

    pub fn mean(self) -> Result<Self> {
        self.unary("mean", Op::Mean(self.id), |x| {
            Ok(Tensor::scalar(T::from_f64_lossy(x.mean())))
        })
    }

    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        self.unary("sum_axis", Op::SumAxis(self.id, axis), |x| x.sum_axis(axis))
    }

    /// Mean over `axis`; `mean_axis(1)` on a C×HW map is global average pooling.
    pub fn mean_axis(self, axis: usize) -> Result<Self> {
        self.unary("mean_axis", Op::MeanAxis(self.id, axis), |x| x.mean_axis(axis))
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |x| Ok(x.sigmoid()))
    }

    pub fn relu(self) -> Result<Self> {
        self.unary("relu", Op::Relu(self.id), |x| Ok(x.relu()))
    }

    pub fn softmax_rows(self) -> Result<Self> {
        self.unary("softmax_rows", Op::SoftmaxRows(self.id), Tensor::softmax_rows)
    }

    pub fn l2_normalize(self, axis: usize) -> Result<Self> {
        let (value, norms) = self.value().l2_normalize_with_norms(axis)?;
        self.tape.push(
            value,
            Op::L2Normalize {
                input: self.id,
                axis,
                norms,
            },
            "l2_normalize",
        )
    }

    pub fn add_row_vector(self, row: Self) -> Result<Self> {
        self.binary(row, "add_row_vector", Op::AddRowVector(self.id, row.id), Tensor::add_row_vector)
    }

    /// Scalar BCE loss of these logits against fixed binary `targets`.
    pub fn bce_with_logits(self, targets: &Tensor<T>) -> Result<Self> {
        let loss = bce_with_logits_value(&self.value(), targets)?;
        self.tape.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::BceWithLogits {
                logits: self.id,
                targets: targets.clone(),
            },
            "bce_with_logits",
        )
    }

    pub fn backward(self) -> Result<Gradients<T>> {
        self.tape.backward(self)
    }
}
