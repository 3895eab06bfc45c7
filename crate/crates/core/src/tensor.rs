//! Dense row-major tensors and the tape-free forms of every operation.
//!
//! All reductions and products accumulate in `f64` and round once per output
//! element. Reshape copies; there are no strided views.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<T>(), self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis length, inner) strides.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("new", format!("zero-sized dimension in {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!(
                    "shape {shape:?} needs {} elements, got {}",
                    numel_of(&shape),
                    data.len()
                ),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("new")?;
        Ok(t)
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        let data = (0..numel_of(&shape)).map(&mut f).collect();
        Tensor { shape, data }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(vec![n, n], |k| {
            if k / n == k % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Unchecked constructor for internal callers that already own a valid buffer.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the buffer. Shape is fixed; callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.widen()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.widen())).collect(),
        }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            )),
        }
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    pub fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ))
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.contains(&0) || numel_of(&shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| T::from_f64_lossy(v.widen() * factor))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.widen()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let w = v.widen();
                w * w
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.widen() * b.widen())
            .sum())
    }

    /// Reduces `axis` away by summation.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let (outer, n, inner) = axis_split("sum_axis", &self.shape, axis)?;
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    acc[o * inner + i] += self.data[base + i].widen();
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor::from_parts(
            shape,
            acc.into_iter().map(T::from_f64_lossy).collect(),
        ))
    }

    /// Reduces `axis` away by averaging; on a C×HW map with `axis = 1` this is
    /// global average pooling over spatial positions.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let n = *self
            .shape
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        Ok(Tensor::from_parts(
            vec![m, n],
            gemm(&self.data, &rhs.data, m, k, n),
        ))
    }

    /// Row-wise softmax of a matrix with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2("softmax_rows")?;
        let mut out = Vec::with_capacity(r * c);
        let mut row = vec![0.0f64; c];
        for i in 0..r {
            let src = &self.data[i * c..(i + 1) * c];
            let max = src.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.widen()));
            let mut total = 0.0;
            for (dst, v) in row.iter_mut().zip(src) {
                *dst = (v.widen() - max).exp();
                total += *dst;
            }
            out.extend(row.iter().map(|v| T::from_f64_lossy(v / total)));
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Per-slice Euclidean norms along `axis`, laid out like `sum_axis(axis)`.
    pub fn norms_along(&self, axis: usize) -> Result<Vec<f64>> {
        let (outer, n, inner) = axis_split("norms_along", &self.shape, axis)?;
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    let v = self.data[base + i].widen();
                    acc[o * inner + i] += v * v;
                }
            }
        }
        Ok(acc.into_iter().map(f64::sqrt).collect())
    }

    /// Scales every slice along `axis` to unit Euclidean norm.
    ///
    /// For a `C×M` matrix, `axis = 0` normalises each column.
    pub fn l2_normalize(&self, axis: usize) -> Result<Self> {
        Ok(self.l2_normalize_with_norms(axis)?.0)
    }

    pub(crate) fn l2_normalize_with_norms(&self, axis: usize) -> Result<(Self, Vec<f64>)> {
        let (outer, n, inner) = axis_split("l2_normalize", &self.shape, axis)?;
        let norms = self.norms_along(axis)?;
        if let Some(pos) = norms.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::degenerate(
                "l2_normalize",
                format!("slice {pos} along axis {axis} has zero norm"),
            ));
        }
        let mut out = self.data.clone();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    let v = self.data[base + i].widen() / norms[o * inner + i];
                    out[base + i] = T::from_f64_lossy(v);
                }
            }
        }
        Ok((Tensor::from_parts(self.shape.clone(), out), norms))
    }

    pub fn sigmoid(&self) -> Self {
        self.map(|v| T::from_f64_lossy(sigmoid(v.widen())))
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_vector(&self, row: &Self) -> Result<Self> {
        let (m, n) = self.dims2("add_row_vector")?;
        if row.shape != [n] {
            return Err(Error::shape(
                "add_row_vector",
                format!("matrix {:?} with row vector {:?}", self.shape, row.shape),
            ));
        }
        let mut out = self.data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + row.data[j];
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            t.same_shape(first, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, i: usize) -> Result<Self> {
        let (r, c) = self.dims2("row")?;
        if i >= r {
            return Err(Error::shape("row", format!("row {i} of {r}")));
        }
        Ok(Tensor::from_parts(vec![c], self.data[i * c..(i + 1) * c].to_vec()))
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&self, j: usize) -> Result<Self> {
        let (r, c) = self.dims2("column")?;
        if j >= c {
            return Err(Error::shape("column", format!("column {j} of {c}")));
        }
        Ok(Tensor::from_parts(
            vec![r],
            (0..r).map(|i| self.data[i * c + j]).collect(),
        ))
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-major `m×k · k×n` product with `f64` accumulation.
fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    let bw: Vec<f64> = b.iter().map(|v| v.widen()).collect();
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = a[i * k + p].widen();
            if av == 0.0 {
                continue;
            }
            for (slot, bv) in acc.iter_mut().zip(&bw[p * n..(p + 1) * n]) {
                *slot += av * bv;
            }
        }
        out.extend(acc.iter().map(|&v| T::from_f64_lossy(v)));
    }
    out
}
