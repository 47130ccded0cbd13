//! Central finite differences evaluated in `f64`, and a harness comparing
//! them against the tape's `f32` reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_diff_grad(f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    let vals = finite_diff_at(f, x, h, &coords);
    Tensor::from_parts(x.shape().to_vec(), vals)
}

/// Central differences for selected coordinates only.
pub fn finite_diff_at(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// A scalar-valued computation that can be recorded at any precision.
pub trait ScalarFn {
    fn name(&self) -> String;

    /// Records the computation on `tape` from `inputs` and returns a scalar node.
    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, inputs: &[Var]) -> Result<Var>;
}

/// Evaluates `f` in `f64` with every input held constant.
pub fn eval_f64<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub index: usize,
    pub checked: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub inputs: Vec<InputCheck>,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }
}

/// Below this gradient norm, errors are measured in absolute terms: an `f32`
/// tape cannot resolve gradients that are exactly zero in exact arithmetic
/// (key biases under softmax, for instance) more finely than this.
pub const GRADIENT_NORM_FLOOR: f64 = 1e-6;

/// Normwise relative error `|a - n| / max(|a|, |n|, GRADIENT_NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric)).max(GRADIENT_NORM_FLOOR);
    norm(&diff) / scale
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, max_coords: None, seed: 0 }
    }
}

/// Compares `f32` tape gradients with `f64` central differences for every input.
pub fn check<F: ScalarFn>(f: &F, inputs: &[Tensor<f32>], opts: &CheckOptions) -> Result<CheckReport> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    ensure!(tape.value(out).numel() == 1, "{} is not scalar-valued", f.name());
    let grads = tape.backward(out)?;

    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => rand::seq::index::sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let numeric = {
            let mut args = wide.clone();
            let probe = |x: &Tensor<f64>| {
                args[i] = x.clone();
                eval_f64(f, &args).expect("finite-difference re-evaluation")
            };
            finite_diff_at(probe, &wide[i], opts.step, &coords)
        };
        let g = grads.wrt(*var);
        let analytic: Vec<f64> = coords.iter().map(|&c| g.data()[c] as f64).collect();
        reports.push(InputCheck { index: i, checked: coords.len(), rel_error: relative_error(&analytic, &numeric) });
    }
    Ok(CheckReport { name: f.name(), inputs: reports })
}

/// Uniform random tensor in `[-bound, bound]`.
pub fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// One differentiable primitive, reduced to a scalar by a fixed random probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    BatchedMatMul,
    Add,
    AddBroadcast,
    Sub,
    Mul,
    Scale,
    Gelu,
    SoftmaxLast,
    SoftmaxFirst,
    LayerNorm,
    Reshape,
    Permute,
    Transpose,
    Concat,
    Slice,
    GatherRows,
    Sum,
    Mean,
    Mse,
}

impl Primitive {
    pub const ALL: [Primitive; 20] = [
        Primitive::MatMul,
        Primitive::BatchedMatMul,
        Primitive::Add,
        Primitive::AddBroadcast,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Gelu,
        Primitive::SoftmaxLast,
        Primitive::SoftmaxFirst,
        Primitive::LayerNorm,
        Primitive::Reshape,
        Primitive::Permute,
        Primitive::Transpose,
        Primitive::Concat,
        Primitive::Slice,
        Primitive::GatherRows,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Mse,
    ];

    /// Input shapes for this primitive.
    pub fn input_shapes(self) -> Vec<Vec<usize>> {
        use Primitive::*;
        match self {
            MatMul => vec![vec![3, 4], vec![4, 2]],
            BatchedMatMul => vec![vec![2, 3, 4], vec![2, 4, 3]],
            Add | Sub | Mul | Mse => vec![vec![3, 4], vec![3, 4]],
            AddBroadcast => vec![vec![2, 3, 4], vec![4]],
            LayerNorm => vec![vec![3, 5], vec![5], vec![5]],
            Concat => vec![vec![2, 3], vec![4, 3]],
            _ => vec![vec![3, 4]],
        }
    }

    /// Random inputs in `[-2, 2]`.
    pub fn sample_inputs(self, rng: &mut impl Rng) -> Vec<Tensor<f32>> {
        self.input_shapes().iter().map(|s| uniform(s, 2.0, rng)).collect()
    }

    fn apply<S: Scalar>(self, tape: &mut Tape<S>, x: &[Var]) -> Result<Var> {
        use Primitive::*;
        match self {
            MatMul | BatchedMatMul => tape.matmul(x[0], x[1]),
            Add => tape.add(x[0], x[1]),
            AddBroadcast => tape.add_broadcast(x[0], x[1]),
            Sub => tape.sub(x[0], x[1]),
            Mul => tape.mul(x[0], x[1]),
            Scale => tape.scale(x[0], S::of(-1.75)),
            Gelu => tape.gelu(x[0]),
            SoftmaxLast => tape.softmax(x[0], 1),
            SoftmaxFirst => tape.softmax(x[0], 0),
            LayerNorm => tape.layer_norm(x[0], x[1], x[2], 1e-5),
            Reshape => tape.reshape(x[0], &[2, 6]),
            Permute => {
                let r = tape.reshape(x[0], &[3, 2, 2])?;
                tape.permute(r, &[2, 0, 1])
            }
            Transpose => tape.transpose(x[0]),
            Concat => tape.concat(&[x[0], x[1]], 0),
            Slice => tape.slice(x[0], 1, 1, 3),
            GatherRows => tape.gather_rows(x[0], &[2, 0, 2, 1]),
            Sum => tape.sum(x[0]),
            Mean => tape.mean(x[0]),
            Mse => tape.mse(x[0], x[1]),
        }
    }
}

/// A primitive followed by `sum(out * probe)`, with the probe fixed by `seed`.
pub struct ProbedPrimitive {
    pub primitive: Primitive,
    pub seed: u64,
}

impl ScalarFn for ProbedPrimitive {
    fn name(&self) -> String {
        format!("{:?}", self.primitive)
    }

    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, inputs: &[Var]) -> Result<Var> {
        let out = self.primitive.apply(tape, inputs)?;
        let shape = tape.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let probe = tape.constant(uniform(&shape, 1.0, &mut rng).cast());
        let weighted = tape.mul(out, probe)?;
        tape.sum(weighted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_normwise_with_absolute_floor() {
        assert!((relative_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        // Round-off around an exactly-zero gradient is judged against the floor.
        let e = relative_error(&[2e-10, -1e-10], &[1e-13, 0.0]);
        assert!(e < 1e-3 && e > 1e-5, "{e}");
        assert!(relative_error(&[1e-5], &[0.0]) >= 1.0);
    }

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Tensor::from_fn(&[4], |i| i as f64 - 1.3);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-3);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_of_square_at_three() {
        let x = Tensor::scalar(3.0f64);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-3);
        assert!((g.data()[0] - 6.0).abs() < 1e-5);
    }

    #[test]
    fn fd_matches_softmax_jacobian_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Tensor<f64> = uniform(&[5], 2.0, &mut rng).cast();
        let pick = 2;
        let sm = |t: &Tensor<f64>| t.softmax(0).unwrap().data()[pick];
        let g = finite_diff_grad(sm, &x, 1e-4);
        let y = x.softmax(0).unwrap();
        for j in 0..5 {
            let delta = if j == pick { 1.0 } else { 0.0 };
            let analytic = y.data()[pick] * (delta - y.data()[j]);
            assert!((g.data()[j] - analytic).abs() < 1e-4);
        }
    }

    #[test]
    fn every_primitive_passes_one_trial() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in Primitive::ALL {
            let inputs = p.sample_inputs(&mut rng);
            let f = ProbedPrimitive { primitive: p, seed: 3 };
            let rep = check(&f, &inputs, &CheckOptions::default()).unwrap();
            assert!(rep.max_rel_error() <= 1e-4, "{p:?}: {}", rep.max_rel_error());
        }
    }

    #[test]
    fn harness_detects_wrong_gradient() {
        // A function whose f32 and f64 recordings disagree must be flagged.
        struct Lying;
        impl ScalarFn for Lying {
            fn name(&self) -> String {
                "lying".into()
            }
            fn eval<S: Scalar>(&self, tape: &mut Tape<S>, x: &[Var]) -> Result<Var> {
                let k = if std::mem::size_of::<S>() == 4 { 2.0 } else { 3.0 };
                let y = tape.scale(x[0], S::of(k))?;
                tape.sum(y)
            }
        }
        let rep = check(&Lying, &[Tensor::ones(&[3])], &CheckOptions::default()).unwrap();
        assert!(rep.max_rel_error() > 0.1);
    }
}
