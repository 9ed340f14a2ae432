//! Dense tensors with curried-composition semantics.
//!
//! A tensor of shape `(n, s)` is read as a linear map from `R^n` into tensors
//! of shape `s`. Storage is row-major with the first axis slowest. The first
//! axis is the one consumed by [`compose`] when the tensor is the left
//! operand, so a gradient `∇f` of `f: R^d -> R^c` has shape `(d, c)` and is
//! indexed `[parameter, output]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reciprocal-condition threshold below which a matrix counts as singular.
pub const SINGULAR_RCOND: f64 = 1e-12;

/// Axis lengths of a tensor. The empty shape is a scalar.
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(axes: impl Into<Vec<usize>>) -> Result<Self> {
        let axes = axes.into();
        if let Some(pos) = axes.iter().position(|&a| a == 0) {
            return Err(Error::SizeMismatch(format!(
                "axis {pos} of shape {axes:?} has length zero"
            )));
        }
        Ok(Shape(axes))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn axes(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(self, other)`.
    pub fn concat(&self, other: &Shape) -> Shape {
        let mut axes = self.0.clone();
        axes.extend_from_slice(&other.0);
        Shape(axes)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<&[usize]> for Shape {
    fn from(axes: &[usize]) -> Self {
        Shape::new(axes.to_vec()).expect("shape axes must be positive")
    }
}

impl From<Vec<usize>> for Shape {
    fn from(axes: Vec<usize>) -> Self {
        Shape::new(axes).expect("shape axes must be positive")
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(axes: [usize; N]) -> Self {
        Shape::new(axes.to_vec()).expect("shape axes must be positive")
    }
}

/// Immutable dense tensor of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

/// Builds a tensor, copying `data`. Rejects length mismatches and NaN/Inf.
pub fn make_tensor(shape: impl Into<Shape>, data: &[f64]) -> Result<Tensor> {
    let shape = shape.into();
    let expected = shape.numel();
    if data.len() != expected {
        return Err(Error::LengthMismatch {
            shape: shape.axes().to_vec(),
            expected,
            actual: data.len(),
        });
    }
    if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteEntry { index, value });
    }
    Ok(Tensor {
        shape,
        data: data.to_vec(),
    })
}

impl Tensor {
    /// Takes ownership of `data` without the finiteness scan. Callers inside
    /// the crate use this for intermediate results whose length is known.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                shape: shape.axes().to_vec(),
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn vector(data: &[f64]) -> Tensor {
        Tensor {
            shape: Shape(vec![data.len()]),
            data: data.to_vec(),
        }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Tensor {
        let shape = shape.into();
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: Shape(vec![n, n]),
            data,
        }
    }

    /// Square matrix from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::SizeMismatch("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        make_tensor(Shape::new(vec![r, c])?, &data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.axes()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major copy of the entries.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        index
            .iter()
            .zip(self.dims())
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of bounds for axis of length {n}");
                acc * n + i
            })
    }

    pub fn as_scalar(&self) -> Option<f64> {
        (self.data.len() == 1 && self.rank() <= 1).then(|| self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.numel() != self.data.len() {
            return Err(Error::LengthMismatch {
                shape: shape.axes().to_vec(),
                expected: shape.numel(),
                actual: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::AxisMismatch(format!(
                "elementwise operation on shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `‖self − other‖` in the Frobenius norm.
    pub fn distance(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let [r, c] = self.matrix_dims()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: Shape(vec![c, r]),
            data,
        })
    }

    pub fn matrix_dims(&self) -> Result<[usize; 2]> {
        match self.dims() {
            &[r, c] => Ok([r, c]),
            other => Err(Error::AxisMismatch(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets a rank-2 tensor as a matrix and applies it to `v`:
    /// `out[i] = Σ_j self[i, j] v[j]`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let [r, c] = self.matrix_dims()?;
        if v.len() != c {
            return Err(Error::AxisMismatch(format!(
                "matrix with {c} columns applied to vector of length {}",
                v.len()
            )));
        }
        Ok((0..r)
            .map(|i| dot(&self.data[i * c..(i + 1) * c], v))
            .collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain composition `g ∘ f`: contracts the last axis of `f` with the first
/// axis of `g`. For `g: (b, s)` and `f: (t, b)` the result has shape
/// `(t, s)` with `(g∘f)[t, s] = Σ_b f[t, b] g[b, s]`. A rank-0 operand acts as
/// scalar multiplication.
pub fn compose(g: &Tensor, f: &Tensor) -> Result<Tensor> {
    if g.rank() == 0 {
        return Ok(f.scale(g.data[0]));
    }
    if f.rank() == 0 {
        return Ok(g.scale(f.data[0]));
    }
    let b = *f.dims().last().expect("rank >= 1");
    if g.dims()[0] != b {
        return Err(Error::AxisMismatch(format!(
            "cannot compose {:?} after {:?}: last axis {} vs first axis {}",
            g.shape,
            f.shape,
            b,
            g.dims()[0]
        )));
    }
    let t_len = f.data.len() / b;
    let s_len = g.data.len() / b;
    let mut out = vec![0.0; t_len * s_len];
    for ti in 0..t_len {
        let f_row = &f.data[ti * b..(ti + 1) * b];
        let out_row = &mut out[ti * s_len..(ti + 1) * s_len];
        for (bi, &fv) in f_row.iter().enumerate() {
            if fv == 0.0 {
                continue;
            }
            let g_row = &g.data[bi * s_len..(bi + 1) * s_len];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += fv * gv;
            }
        }
    }
    let mut axes = f.dims()[..f.rank() - 1].to_vec();
    axes.extend_from_slice(&g.dims()[1..]);
    Ok(Tensor::from_parts(Shape(axes), out))
}

/// `k`-th component composition `g ∘_k f` (1-based `k`): contracts the last
/// axis of `f` with axis `k` of `g`, splicing the leading axes of `f` in at
/// position `k`. For `g: (a, b, c)` and `f: (d, b)`, `g ∘_2 f` has shape
/// `(a, d, c)`.
pub fn compose_k(g: &Tensor, f: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 || (k > g.rank() && !(k == 1 && g.rank() == 0)) {
        return Err(Error::IndexOutOfRange(format!(
            "component {k} of a rank-{} tensor",
            g.rank()
        )));
    }
    if k == 1 {
        return compose(g, f);
    }
    if f.rank() == 0 {
        return Ok(g.scale(f.data[0]));
    }
    let b = *f.dims().last().expect("rank >= 1");
    let gk = g.dims()[k - 1];
    if gk != b {
        return Err(Error::AxisMismatch(format!(
            "cannot compose {:?} into component {k} of {:?}: {} vs {}",
            f.shape, g.shape, b, gk
        )));
    }
    let pre: usize = g.dims()[..k - 1].iter().product();
    let post: usize = g.dims()[k..].iter().product();
    let t_len = f.data.len() / b;
    let mut out = vec![0.0; pre * t_len * post];
    for pi in 0..pre {
        for ti in 0..t_len {
            let f_row = &f.data[ti * b..(ti + 1) * b];
            let out_off = (pi * t_len + ti) * post;
            for (bi, &fv) in f_row.iter().enumerate() {
                if fv == 0.0 {
                    continue;
                }
                let g_off = (pi * b + bi) * post;
                for q in 0..post {
                    out[out_off + q] += fv * g.data[g_off + q];
                }
            }
        }
    }
    let mut axes = g.dims()[..k - 1].to_vec();
    axes.extend_from_slice(&f.dims()[..f.rank() - 1]);
    axes.extend_from_slice(&g.dims()[k..]);
    Ok(Tensor::from_parts(Shape(axes), out))
}

/// Inverse of a square matrix by Gauss–Jordan elimination with partial
/// pivoting. Fails with [`Error::Singular`] when the reciprocal 1-norm
/// condition number falls below [`SINGULAR_RCOND`].
pub fn invert_square(a: &Tensor) -> Result<Tensor> {
    let (inv, rcond) = invert_with_rcond(a)?;
    if rcond < SINGULAR_RCOND {
        return Err(Error::Singular { rcond });
    }
    Ok(inv)
}

/// Reciprocal 1-norm condition number, `0` for exactly singular input.
pub fn reciprocal_condition(a: &Tensor) -> Result<f64> {
    match invert_with_rcond(a) {
        Ok((_, rcond)) => Ok(rcond),
        Err(Error::Singular { rcond }) => Ok(rcond),
        Err(e) => Err(e),
    }
}

fn invert_with_rcond(a: &Tensor) -> Result<(Tensor, f64)> {
    let [n, m] = a.matrix_dims()?;
    if n != m {
        return Err(Error::AxisMismatch(format!(
            "cannot invert a non-square {n}x{m} matrix"
        )));
    }
    let mut work = a.data.clone();
    let mut inv = Tensor::identity(n).data;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                work[i * n + col]
                    .abs()
                    .partial_cmp(&work[j * n + col].abs())
                    .expect("finite entries")
            })
            .expect("non-empty range");
        let pv = work[pivot * n + col];
        if pv == 0.0 || !pv.is_finite() {
            return Err(Error::Singular { rcond: 0.0 });
        }
        if pivot != col {
            for j in 0..n {
                work.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        let scale = 1.0 / pv;
        for j in 0..n {
            work[col * n + j] *= scale;
            inv[col * n + j] *= scale;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = work[row * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                work[row * n + j] -= factor * work[col * n + j];
                inv[row * n + j] -= factor * inv[col * n + j];
            }
        }
    }
    let rcond = 1.0 / (one_norm(&a.data, n) * one_norm(&inv, n));
    let rcond = if rcond.is_finite() { rcond } else { 0.0 };
    Ok((Tensor::from_parts(Shape(vec![n, n]), inv), rcond))
}

fn one_norm(m: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| m[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        make_tensor(Shape::from(shape), data).unwrap()
    }

    #[test]
    fn make_tensor_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.get(&[0, 0]), 1.0);
        assert_eq!(a.get(&[1, 1]), 4.0);
        let s = make_tensor(Shape::scalar(), &[5.0]).unwrap();
        assert_eq!(s.rank(), 0);
        assert_eq!(s.as_scalar(), Some(5.0));
        assert!(matches!(
            make_tensor([3], &[1.0, 2.0]),
            Err(Error::LengthMismatch { expected: 3, actual: 2, .. })
        ));
        assert!(matches!(
            make_tensor([2], &[1.0, f64::NAN]),
            Err(Error::NonFiniteEntry { index: 1, .. })
        ));
    }

    #[test]
    fn zero_length_axis_rejected() {
        assert!(Shape::new(vec![2, 0]).is_err());
    }

    #[test]
    fn compose_identity_and_hand_contraction() {
        let f = t(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 3.0, 7.0]);
        assert_eq!(compose(&Tensor::identity(2), &f).unwrap(), f);

        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let x = Tensor::vector(&[1.0, 0.0]);
        // Σ_i A[i, j] x[i]
        assert_eq!(compose(&a, &x).unwrap().data(), &[1.0, 2.0]);

        let g = Tensor::zeros([2, 3]);
        let f = Tensor::zeros([4, 5]);
        assert!(matches!(compose(&g, &f), Err(Error::AxisMismatch(_))));
    }

    #[test]
    fn bilinear_form_via_both_components() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let x = Tensor::vector(&[1.0, 0.0]);
        let y = Tensor::vector(&[0.0, 1.0]);
        let via_second = compose(&compose_k(&a, &y, 2).unwrap(), &x).unwrap();
        assert_eq!(via_second.as_scalar(), Some(2.0));
        let via_first = compose(&compose(&a, &x).unwrap(), &y).unwrap();
        assert_eq!(via_first.as_scalar(), Some(2.0));
    }

    #[test]
    fn compose_k_shapes_and_errors() {
        let g = Tensor::zeros([2, 3, 5]);
        let f = Tensor::zeros([4, 3]);
        assert_eq!(compose_k(&g, &f, 2).unwrap().dims(), &[2, 4, 5]);

        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let g = t(&[2, 3, 2], &data);
        assert_eq!(compose_k(&g, &Tensor::identity(3), 2).unwrap(), g);
        assert!(matches!(
            compose_k(&g, &Tensor::identity(3), 5),
            Err(Error::IndexOutOfRange(_))
        ));
        assert!(matches!(
            compose_k(&g, &Tensor::identity(2), 2),
            Err(Error::AxisMismatch(_))
        ));
    }

    #[test]
    fn scalar_composition_is_multiplication() {
        let f = t(&[2], &[1.5, -2.0]);
        assert_eq!(compose(&Tensor::scalar(2.0), &f).unwrap().data(), &[3.0, -4.0]);
        assert_eq!(compose(&f, &Tensor::scalar(-1.0)).unwrap().data(), &[-1.5, 2.0]);
    }

    #[test]
    fn inversion_examples() {
        assert_eq!(invert_square(&Tensor::identity(3)).unwrap(), Tensor::identity(3));
        let d = t(&[2, 2], &[2.0, 0.0, 0.0, 4.0]);
        assert_eq!(invert_square(&d).unwrap().data(), &[0.5, 0.0, 0.0, 0.25]);
        assert!(matches!(
            invert_square(&Tensor::zeros([2, 2])),
            Err(Error::Singular { .. })
        ));
        let nearly = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0 + 1e-15]);
        assert!(matches!(invert_square(&nearly), Err(Error::Singular { .. })));
    }

    #[test]
    fn inverse_roundtrip() {
        let a = t(&[3, 3], &[4.0, 1.0, -2.0, 0.5, 3.0, 1.0, -1.0, 2.0, 5.0]);
        let inv = invert_square(&a).unwrap();
        let prod = compose(&a, &inv).unwrap();
        assert!(prod.distance(&Tensor::identity(3)).unwrap() < 1e-10 * 3.0);
    }
}
