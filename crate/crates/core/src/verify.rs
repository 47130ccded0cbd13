//! The finite-difference gradient suite: every primitive plus the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check, CheckOptions, CheckReport, Primitive, ProbedPrimitive};
use crate::error::Result;
use crate::model::{CrossViewSample, MaskedView, ModelConfig, ModelLoss, ModelParams};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Outcome of one seeded trial.
#[derive(Clone, Debug)]
pub struct Trial {
    pub name: String,
    pub seed: u64,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl Trial {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub trials: Vec<Trial>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.trials.iter().all(Trial::passed)
    }

    /// Worst relative error per check name, in first-seen order.
    pub fn worst_by_name(&self) -> Vec<(String, f64, f64)> {
        let mut out: Vec<(String, f64, f64)> = Vec::new();
        for t in &self.trials {
            match out.iter_mut().find(|(n, _, _)| *n == t.name) {
                Some(e) => e.1 = e.1.max(t.rel_error),
                None => out.push((t.name.clone(), t.rel_error, t.tolerance)),
            }
        }
        out
    }
}

fn trial_from(report: CheckReport, seed: u64, tolerance: f64) -> Trial {
    Trial { rel_error: report.max_rel_error(), name: report.name, seed, tolerance }
}

/// Every primitive on `trials` seeded inputs drawn from `[-2, 2]`.
pub fn primitive_trials(trials: usize, seed: u64) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for p in Primitive::ALL {
        for t in 0..trials as u64 {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(t);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let inputs = p.sample_inputs(&mut rng);
            let f = ProbedPrimitive { primitive: p, seed: s };
            let rep = check(&f, &inputs, &CheckOptions { seed: s, ..CheckOptions::default() })?;
            out.push(trial_from(rep, s, PRIMITIVE_TOLERANCE));
        }
    }
    Ok(out)
}

/// A random sample and parameters for one end-to-end check. Parameters are
/// the seeded initialisation plus uniform noise of width 0.25 so that no
/// gradient sits at the finite-difference noise floor.
pub fn model_case(cfg: &ModelConfig, seed: u64) -> Result<ModelLoss> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(cfg, seed)?;
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.25..0.25);
        }
    }
    let s = cfg.image_size;
    let mut view = |ratio: f64| -> Result<MaskedView> {
        let img = Tensor::from_fn(&[s, s, cfg.channels], |_| rng.gen_range(0.0..1.0));
        MaskedView::new(&img, cfg.patch_size, ratio, rng.gen())
    };
    let target = view(cfg.target_mask)?;
    let anchors = (0..cfg.num_anchors).map(|_| view(cfg.anchor_mask)).collect::<Result<Vec<_>>>()?;
    Ok(ModelLoss { params, sample: CrossViewSample { target, anchors } })
}

/// Encoder, decoder and loss end to end, `coords` sampled coordinates per parameter tensor.
pub fn model_trials(cfg: &ModelConfig, trials: usize, seed: u64, coords: usize) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for t in 0..trials as u64 {
        let s = seed.wrapping_mul(7_919).wrapping_add(t);
        let f = model_case(cfg, s)?;
        let inputs: Vec<Tensor<f32>> = f.params.iter().map(|(_, t)| t.clone()).collect();
        let opts = CheckOptions { step: 1e-3, max_coords: Some(coords), seed: s };
        out.push(trial_from(check(&f, &inputs, &opts)?, s, MODEL_TOLERANCE));
    }
    Ok(out)
}

/// Primitives and the tiny model, `trials` seeds each.
pub fn run_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut trials_out = primitive_trials(trials, seed)?;
    trials_out.extend(model_trials(&ModelConfig::tiny(), trials, seed, 5)?);
    Ok(SuiteReport { trials: trials_out })
}
