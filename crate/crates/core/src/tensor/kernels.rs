//! Forward kernels. Loop orders are fixed so reductions are reproducible.

use super::{Scalar, Tensor};
use crate::error::{ensure, Error, Result};

/// `sqrt(2/pi)` for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[.., k, n]`
/// with identical leading dims or a plain `[k, n]` shared by every batch.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    let lead_a = &a.shape()[..ra - 2];
    let lead_b = &b.shape()[..rb - 2];
    if k != k2 || !(lead_b.is_empty() || lead_a == lead_b) {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let batch: usize = lead_a.iter().product();
    let shared_b = lead_b.is_empty();
    let mut out = vec![S::zero(); batch * m * n];
    for bi in 0..batch {
        let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bd = if shared_b { b.data() } else { &b.data()[bi * k * n..(bi + 1) * k * n] };
        let od = &mut out[bi * m * n..(bi + 1) * m * n];
        matmul_into(ad, bd, od, m, k, n);
    }
    let mut shape = lead_a.to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

/// `out[m,n] += a[m,k] * b[k,n]`, accumulating over `k` in increasing order.
pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `(outer, axis_len, inner)` decomposition for reductions along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    ensure!(axis < x.rank(), "softmax axis {axis} out of range for {:?}", x.shape());
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut mx = S::neg_infinity();
            for j in 0..len {
                mx = mx.max(src[at(j)]);
            }
            let mut total = S::zero();
            for j in 0..len {
                let e = (src[at(j)] - mx).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Per-row statistics produced by [`layer_norm`], reused by its backward pass.
pub(crate) struct NormStats<S> {
    pub xhat: Vec<S>,
    pub rstd: Vec<S>,
}

/// Layer normalisation over the last axis followed by `gamma * xhat + beta`.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    Ok(layer_norm_with_stats(x, gamma, beta, eps)?.0)
}

pub(crate) fn layer_norm_with_stats<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, NormStats<S>)> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    ensure!(eps > 0.0, "layer_norm eps must be positive");
    let rows = x.rows();
    let inv_d = S::of(1.0 / d as f64);
    let mut out = vec![S::zero(); x.numel()];
    let mut xhat = vec![S::zero(); x.numel()];
    let mut rstd = vec![S::zero(); rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().fold(S::zero(), |a, &b| a + b) * inv_d;
        let var = row.iter().fold(S::zero(), |a, &b| a + (b - mean) * (b - mean)) * inv_d;
        let rs = S::one() / (var + S::of(eps)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), NormStats { xhat, rstd }))
}

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::of(3.0) * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

pub fn permute<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    ensure!(axes.len() == r, "permute axes {axes:?} for rank {r}");
    for &a in axes {
        ensure!(a < r && !seen[a], "invalid permutation {axes:?}");
        seen[a] = true;
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x.data()[off]);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    ensure!(!parts.is_empty(), "concat of zero tensors");
    let first = parts[0].shape();
    ensure!(axis < first.len(), "concat axis {axis} out of range for {first:?}");
    for p in &parts[1..] {
        let s = p.shape();
        let compatible = s.len() == first.len() && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", first, s));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total_axis;
    Ok(Tensor::from_parts(shape, out))
}

pub fn slice<S: Scalar>(x: &Tensor<S>, axis: usize, start: usize, end: usize) -> Result<Tensor<S>> {
    ensure!(axis < x.rank(), "slice axis {axis} out of range for {:?}", x.shape());
    let len = x.shape()[axis];
    ensure!(start < end && end <= len, "slice {start}..{end} out of range for extent {len}");
    let (outer, _, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Ok(Tensor::from_parts(shape, out))
}

/// Rows of the `[rows, cols]` view picked by `idx` (repeats allowed).
pub fn gather_rows<S: Scalar>(x: &Tensor<S>, idx: &[usize]) -> Result<Tensor<S>> {
    ensure!(x.rank() >= 1, "gather_rows on a scalar");
    ensure!(!idx.is_empty(), "gather_rows with no indices");
    let rows = x.shape()[0];
    let inner = x.numel() / rows;
    let mut out = Vec::with_capacity(idx.len() * inner);
    for &i in idx {
        ensure!(i < rows, "row index {i} out of range for {rows} rows");
        out.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, bound: f32) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
    }

    // Independent reference: textbook i-j-k loop, same accumulation order over k.
    fn triple_loop(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let mut s = 0.0f32;
            for p in 0..k {
                s += a.get(&[i, p]) * b.get(&[p, j]);
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = rand_tensor(&[3, 3], &mut rng, 1.0);
        assert_eq!(matmul(&Tensor::eye(3), &b).unwrap(), b);
        let z = matmul(&Tensor::zeros(&[2, 2]), &rand_tensor(&[2, 2], &mut rng, 1.0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&[3, 4], &mut rng, 1.0);
        let b = rand_tensor(&[4, 2], &mut rng, 1.0);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-6);
        for _ in 0..20 {
            let (m, k, n) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
            let a = rand_tensor(&[m, k], &mut rng, 10.0);
            let b = rand_tensor(&[k, n], &mut rng, 10.0);
            assert!(matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-6);
        }
    }

    #[test]
    fn matmul_batched_and_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&[2, 3, 4], &mut rng, 1.0);
        let b = rand_tensor(&[2, 4, 5], &mut rng, 1.0);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        let second =
            matmul(&a.slice(0, 1, 2).unwrap().reshape(&[3, 4]).unwrap(), &b.slice(0, 1, 2).unwrap().reshape(&[4, 5]).unwrap()).unwrap();
        assert_eq!(&c.data()[15..], second.data());

        let err = matmul(&rand_tensor(&[2, 3], &mut rng, 1.0), &rand_tensor(&[4, 2], &mut rng, 1.0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_shift_and_reference() {
        let t = Tensor::<f32>::new(vec![1, 3], vec![2.5; 3]).unwrap();
        for &v in softmax(&t, 1).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = Tensor::<f32>::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        let shifted = softmax(&x.map(|v| v + 100.0), 0).unwrap();
        assert!(s.max_abs_diff(&shifted) < 1e-6);
        let z: f64 = (0..3).map(|i| (i as f64).exp()).sum();
        for i in 0..3 {
            assert!((s.data()[i] as f64 - (i as f64).exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_inner_axis_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[3, 4, 5], &mut rng, 5.0);
        let s = softmax(&x, 1).unwrap();
        for o in 0..3 {
            for i in 0..5 {
                let total: f32 = (0..4).map(|j| s.get(&[o, j, i])).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::<f32>::new(vec![2, 4], vec![3.0; 8]).unwrap();
        let out = layer_norm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[1, 6], &mut rng, 2.0);
        let beta = rand_tensor(&[6], &mut rng, 1.0);
        let out = layer_norm(&x, &Tensor::zeros(&[6]), &beta, 1e-5).unwrap();
        assert_eq!(out.data(), beta.data());

        let gamma = rand_tensor(&[6], &mut rng, 1.0);
        let out = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let mean = xs.iter().sum::<f64>() / 6.0;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for j in 0..6 {
            let want = gamma.data()[j] as f64 * (xs[j] - mean) / (var + 1e-5).sqrt() + beta.data()[j] as f64;
            assert!((out.data()[j] as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_192).abs() < 1e-5);
        let h = 1e-6;
        for &x in &[-2.0f64, -0.5, 0.3, 1.7] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[4, 3], |i| 100.0 + i as f32);
        let c = concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[6, 3]);
        assert_eq!(&c.data()[..6], a.data());
        assert_eq!(&c.data()[6..], b.data());
        assert_eq!(slice(&c, 0, 0, 2).unwrap(), a);
        assert_eq!(slice(&c, 0, 2, 6).unwrap(), b);

        let d = concat(&[&a, &a], 1).unwrap();
        assert_eq!(d.shape(), &[2, 6]);
        assert_eq!(d.row(1), &[3.0, 4.0, 5.0, 3.0, 4.0, 5.0]);
        assert!(concat(&[&a, &b], 1).is_err());
    }

    #[test]
    fn permute_matches_index_math() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.get(&[c, a, b]), x.get(&[a, b, c]));
                }
            }
        }
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }
}
