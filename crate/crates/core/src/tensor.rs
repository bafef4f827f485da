//! Dense row-major `f64` tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {dims:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero-sized dimension in {dims:?}");
        Self {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    /// Samples i.i.d. `Normal(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_fn(dims, |_| normal.sample(rng))
    }

    pub fn rand_uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| rng.random_range(lo..hi))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what} (element {i} = {})",
                self.data[i]
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_batch(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack_batch of nothing".into()))?;
        let tail = &first.dims[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        let mut lead = 0;
        for p in parts {
            if &p.dims[1..] != tail {
                return Err(Error::shape(
                    "stack_batch",
                    format!("{:?} vs {:?}", first.dims, p.dims),
                ));
            }
            lead += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(tail);
        Ok(Self { dims, data })
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.dims[0] {
            return Err(Error::shape(
                "narrow_batch",
                format!("{start}..{} of {:?}", start + len, self.dims),
            ));
        }
        let inner: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = len;
        Ok(Self {
            dims,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        })
    }
}

/// `c = alpha * a * b + beta * c` for row-major matrices, with optional transposes.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice length checks above cover every element addressed by the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_len() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn detects_non_finite() {
        let t = Tensor::new(&[3], vec![1.0, f64::NAN, 0.0]).unwrap();
        assert!(matches!(t.ensure_finite("x"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &a, false, &b, false, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2 stored as 2x3) times b^T
        let bt: Vec<f64> = (0..8).map(|v| v as f64).collect(); // 4x2 -> used as 2x4 transposed
        let mut c2 = vec![0.0; 12];
        gemm(3, 2, 4, 1.0, &a, true, &bt, true, 0.0, &mut c2);
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|p| a[p * 3 + i] * bt[j * 2 + p]).sum();
                assert_eq!(c2[i * 4 + j], want);
            }
        }
    }
}
