use serde::{Deserialize, Serialize};

use super::{kernels, Real};
use crate::error::{dim_err, Error, Result};

/// Dense row-major n-dimensional array.
///
/// Gradients are not stored here; they live on the [`Tape`](super::Tape)
/// node that holds the tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(dim_err(format!("shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(v: Real) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    /// One-dimensional tensor. Panics on an empty vector, which has no valid shape.
    pub fn vector(data: Vec<Real>) -> Self {
        assert!(!data.is_empty(), "tensor extents must be positive");
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<Real>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
            return Err(dim_err("ragged or empty row list"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[Real] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Real {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Real>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

fn as_matrix(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(dim_err(format!("expected a matrix, got shape {other:?}"))),
    }
}

/// Standard matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a)?;
    let (k2, n) = as_matrix(b)?;
    if k != k2 {
        return Err(dim_err(format!(
            "matmul inner extents disagree: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `exp(s_i/τ) / Σ_j exp(s_j/τ)`, computed with max subtraction.
pub fn softmax_with_temperature(scores: &Tensor, tau: Real) -> Result<Tensor> {
    check_temperature(tau)?;
    if scores.is_empty() {
        return Err(dim_err("softmax of an empty vector"));
    }
    let mut out = scores.data().to_vec();
    kernels::softmax_in_place(&mut out, tau);
    Ok(Tensor::from_parts(vec![out.len()], out))
}

pub(crate) fn check_temperature(tau: Real) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive and finite, got {tau}")));
    }
    Ok(())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(kernels::sigmoid)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(Real::tanh)
}

/// `aᵀb / (‖a‖‖b‖)`; zero-norm inputs are rejected.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Real> {
    if a.len() != b.len() {
        return Err(dim_err(format!(
            "cosine similarity of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let na = kernels::dot(a.data(), a.data()).sqrt();
    let nb = kernels::dot(b.data(), b.data()).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine similarity of a zero-norm vector".into()));
    }
    Ok((kernels::dot(a.data(), b.data()) / (na * nb)).clamp(-1.0, 1.0))
}

/// Arithmetic mean along `axis` of a matrix (axis 0 averages rows) or of a vector.
pub fn mean_over_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    match (x.shape(), axis) {
        ([n], 0) => Ok(Tensor::scalar(x.data().iter().sum::<Real>() / *n as Real)),
        ([r, c], 0) => {
            let mut out = vec![0.0; *c];
            for i in 0..*r {
                kernels::axpy(1.0, x.row(i), &mut out);
            }
            let inv = 1.0 / *r as Real;
            out.iter_mut().for_each(|v| *v *= inv);
            Ok(Tensor::from_parts(vec![*c], out))
        }
        ([r, c], 1) => {
            let out = (0..*r).map(|i| x.row(i).iter().sum::<Real>() / *c as Real).collect();
            Ok(Tensor::from_parts(vec![*r], out))
        }
        (shape, _) => Err(dim_err(format!("axis {axis} is not valid for shape {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[Real]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal_rows() {
        let id = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let x = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&id, &x).unwrap(), x);
        let r = matmul(&m(1, 2, &[1.0, 0.0]), &m(2, 1, &[0.0, 5.0])).unwrap();
        assert_eq!(r.data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] × [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_with_temperature(&Tensor::vector(vec![0.3; 3]), 0.7).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_with_temperature(&Tensor::vector(vec![1.0, 0.0]), 1.0).unwrap();
        assert!((s.data()[0] - 0.7311).abs() < 1e-4);
        assert!((s.data()[1] - 0.2689).abs() < 1e-4);
        let s = softmax_with_temperature(&Tensor::vector(vec![1.0, 0.0]), 0.05).unwrap();
        assert!(s.data()[0] >= 1.0 - 1e-8);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = Tensor::vector(vec![1.0]);
        assert!(matches!(softmax_with_temperature(&x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax_with_temperature(&x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn sigmoid_and_tanh_examples() {
        let s = sigmoid(&Tensor::vector(vec![0.0, -100.0, 1.0]));
        assert_eq!(s.data()[0], 0.5);
        assert!(s.data()[1] < 1e-40 && s.data()[1] > 0.0);
        assert!((s.data()[2] - 0.73106).abs() < 1e-5);
        let t = tanh(&Tensor::vector(vec![0.0, 1.0, -1.0]));
        assert_eq!(t.data()[0], 0.0);
        assert!((t.data()[1] - 0.76159).abs() < 1e-5);
        assert_eq!(t.data()[2], -t.data()[1]);
    }

    #[test]
    fn cosine_examples() {
        let a = Tensor::vector(vec![3.0, 4.0]);
        let b = Tensor::vector(vec![4.0, 3.0]);
        assert!((cosine_similarity(&a, &b).unwrap() - 0.96).abs() < 1e-15);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let e1 = Tensor::vector(vec![1.0, 0.0]);
        let e2 = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert!(matches!(cosine_similarity(&a, &z), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn mean_over_axis_examples() {
        let x = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mean_over_axis(&x, 0).unwrap().data(), &[2.0, 3.0]);
        let single = m(1, 3, &[1.0, -2.0, 5.0]);
        assert_eq!(mean_over_axis(&single, 0).unwrap().data(), single.data());
        let c = Tensor::filled(&[4, 3], 2.5);
        assert_eq!(mean_over_axis(&c, 0).unwrap().data(), &[2.5; 3]);
        assert!(mean_over_axis(&x, 2).is_err());
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
