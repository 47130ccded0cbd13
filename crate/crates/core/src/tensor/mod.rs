//! Dense row-major tensors and the forward kernels shared by the tape.
//!
//! Values are stored as `f32` for training. Every kernel is generic over
//! [`Scalar`] so gradient checks can re-run the same forward pass in `f64`.

mod file;
pub mod kernels;

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

use crate::error::{ensure, Error, Result};

pub use file::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, TENSOR_MAGIC};

/// Floating point element type usable by tensors and the tape.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// An n-dimensional array. `shape.iter().product() == data.len()` always.
#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!("shape {shape:?} holds {n} elements but {} were given", data.len())));
        }
        ensure!(shape.iter().all(|&d| d > 0) || n == 0, "zero extent in shape {shape:?}");
        Ok(Self { shape, data })
    }

    /// Builds a tensor without checking; callers guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(v: S) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { S::one() } else { S::zero() })
    }

    /// 2-D tensor from a list of equally long rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == cols), "ragged rows in from_rows");
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[numel / cols, cols]`.
    pub fn rows(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data.len() / self.cols()
        }
    }

    /// Row `i` of the `[rows, cols]` view.
    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| T::of(v.as_f64())).collect())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |a, &b| a + b)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        kernels::matmul(self, rhs)
    }

    pub fn transpose(&self) -> Result<Self> {
        let r = self.rank();
        ensure!(r >= 2, "transpose needs rank >= 2, got {:?}", self.shape);
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        kernels::permute(self, &axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        kernels::permute(self, axes)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        kernels::concat(parts, axis)
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        kernels::slice(self, axis, start, end)
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        kernels::gather_rows(self, idx)
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        kernels::softmax(self, axis)
    }
}

/// Cosine similarity `<u,v> / (|u||v|)` accumulated in `f64`.
pub fn cosine_sim<S: Scalar>(u: &[S], v: &[S]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_sim", &[u.len()], &[v.len()]));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.as_f64(), b.as_f64());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu <= 1e-12 || nv <= 1e-12 {
        return Err(Error::Degenerate(format!("cosine similarity of a zero-norm vector (norms {nu:e}, {nv:e})")));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn cosine_closed_forms() {
        let v = [0.3f32, -1.2, 4.0];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_sim(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        let c = cosine_sim(&[1.0f32, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_degenerate() {
        let err = cosine_sim(&[0.0f32, 0.0], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn reshape_round_trip() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let back = t.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
        assert_eq!(t, back);
        assert!(t.reshape(&[5, 5]).is_err());
    }
}
