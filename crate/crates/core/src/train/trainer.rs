use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Strategy, TrainConfig};
use super::data::BagDataset;
use super::optim::{adamw_update, lr_at, AdamW, OptimizerState};
use super::select::{knn_pair_select, select_views};
use crate::autodiff::Tape;
use crate::error::{ensure, Error, Result};
use crate::io::{atomic_write, render_records, Record};
use crate::model::{sample_loss, save_checkpoint, CrossViewSample, MaskedView, ModelParams};
use crate::synth::{apply_crop, sample_crop};
use crate::tensor::Tensor;

/// Independent random stream for one (step, slot) pair, so batches do not
/// depend on thread scheduling.
pub fn sample_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 24) | slot as u64);
    rng
}

/// Builds one training sample from bag `index`: choose views, crop, mask.
pub fn prepare_sample(
    cfg: &TrainConfig,
    data: &BagDataset,
    descriptors: Option<&[Vec<f32>]>,
    index: usize,
    rng: &mut impl Rng,
) -> Result<CrossViewSample> {
    let bag = &data.bags[index];
    let (target, anchors): (&Tensor<f32>, Vec<&Tensor<f32>>) = if cfg.strategy == Strategy::KnnPair {
        let desc = descriptors.ok_or_else(|| Error::Contract("knn_pair needs dataset descriptors".into()))?;
        let picked = knn_pair_select(desc, index, cfg.knn_k, cfg.num_anchors, rng)?;
        (&bag.real, picked.iter().map(|&i| &data.bags[i].real).collect())
    } else {
        let sel = select_views(bag.m(), cfg.strategy, cfg.num_anchors, rng)?;
        (bag.image(sel.target), sel.anchors.iter().map(|&i| bag.image(i)).collect())
    };

    let (h, w) = (target.shape()[0], target.shape()[1]);
    let crop = |img: &Tensor<f32>, shared: Option<&crate::synth::CropParams>, rng: &mut dyn rand::RngCore| -> Result<Tensor<f32>> {
        if !cfg.augment {
            return Ok(img.clone());
        }
        match shared {
            Some(c) => apply_crop(img, c),
            None => apply_crop(img, &sample_crop(h, w, cfg.crop_scale, cfg.crop_aspect, rng)?),
        }
    };
    let shared = if cfg.augment && cfg.same_crop { Some(sample_crop(h, w, cfg.crop_scale, cfg.crop_aspect, rng)?) } else { None };
    let p = cfg.model.patch_size;
    let target_img = crop(target, shared.as_ref(), rng)?;
    let target = MaskedView::new(&target_img, p, cfg.target_mask, rng.gen())?;
    let mut views = Vec::with_capacity(anchors.len());
    for a in anchors {
        let img = crop(a, shared.as_ref(), rng)?;
        views.push(MaskedView::new(&img, p, cfg.anchor_mask, rng.gen())?);
    }
    Ok(CrossViewSample { target, anchors: views })
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(params: &ModelParams, sample: &CrossViewSample) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, true);
    let loss = sample_loss(&mut tape, &bound, sample)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).data()[0] as f64;
    Ok((value, bound.vars().iter().map(|&v| grads.wrt(v)).collect()))
}

/// Per-step summary.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn record(&self) -> Record {
        Record::new().text("step", self.step).num("lr", self.lr).num("loss", self.loss).num("grad_norm", self.grad_norm)
    }

    /// Wall-clock time kept apart from [`StepRecord::record`] so that logs of
    /// seeded runs compare byte for byte.
    pub fn timing_record(&self) -> Record {
        Record::new().text("step", self.step).num("wall_ms", self.wall_ms)
    }
}

fn worker_count(cfg: &TrainConfig, jobs: usize) -> usize {
    let n = if cfg.threads == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { cfg.threads };
    n.clamp(1, jobs.max(1))
}

/// Forward, backward and one AdamW update on a prepared batch.
/// Returns the mean loss and the global gradient norm.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &[CrossViewSample],
    cfg: &TrainConfig,
    step: usize,
    lr: f64,
) -> Result<(f64, f64)> {
    ensure!(!batch.is_empty(), "empty batch");
    let workers = worker_count(cfg, batch.len());
    let chunk = batch.len().div_ceil(workers);
    let shared: &ModelParams = params;
    let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            batch.chunks(chunk).map(|part| s.spawn(move || part.iter().map(|x| sample_gradients(shared, x)).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    });

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<Vec<Vec<f64>>> = None;
    for r in results {
        let (l, grads) = r.map_err(|e| diagnose(step, lr, e))?;
        loss += l * scale;
        let acc = total.get_or_insert_with(|| grads.iter().map(|g| vec![0.0; g.numel()]).collect());
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (x, &y) in a.iter_mut().zip(g.data()) {
                *x += y as f64 * scale;
            }
        }
    }
    let total = total.expect("non-empty batch");
    let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
    let norms: Vec<f64> = total.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let grad_norm = norms.iter().map(|n| n * n).sum::<f64>().sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        let worst: Vec<String> =
            names.iter().zip(&norms).filter(|(_, n)| !n.is_finite() || **n > 1e3).map(|(name, n)| format!("{name}={n:e}")).collect();
        return Err(Error::Numerical(format!(
            "non-finite training state at step {step} (lr {lr:e}, loss {loss}, grad norm {grad_norm}); offending gradients: [{}]",
            worst.join(", ")
        )));
    }
    let grads: Vec<Tensor<f32>> = total
        .into_iter()
        .zip(params.iter())
        .map(|(g, (_, p))| Tensor::from_parts(p.shape().to_vec(), g.into_iter().map(|v| v as f32).collect()))
        .collect();
    let hp = AdamW { lr, beta1: cfg.beta1, beta2: cfg.beta2, weight_decay: cfg.weight_decay };
    let mut slots: Vec<&mut Tensor<f32>> = params.tensors_mut().collect();
    adamw_update(&mut slots, &grads, opt, &hp)?;
    Ok((loss, grad_norm))
}

fn diagnose(step: usize, lr: f64, e: Error) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("step {step} (lr {lr:e}): {msg}")),
        other => other,
    }
}

/// Owns the model, optimizer and data of a run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub data: BagDataset,
    descriptors: Option<Vec<Vec<f32>>>,
    pub step: usize,
    order: Vec<usize>,
    order_epoch: Option<usize>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: BagDataset) -> Result<Self> {
        cfg.validate()?;
        ensure!(!data.is_empty(), "training needs at least one bag");
        let size = cfg.model.image_size;
        ensure!(
            data.image_shape() == [size, size, cfg.model.channels],
            "bag images are {:?} but the model expects {size}x{size}x{}",
            data.image_shape(),
            cfg.model.channels
        );
        ensure!(
            cfg.strategy == Strategy::KnnPair || data.bags.iter().all(|b| b.m() >= cfg.num_anchors),
            "bags hold fewer views than the {} anchors requested",
            cfg.num_anchors
        );
        if cfg.strategy == Strategy::KnnPair {
            ensure!(data.len() > cfg.knn_k, "knn_pair needs more than k = {} bags", cfg.knn_k);
        }
        let params = ModelParams::init(&cfg.model_config(), cfg.seed)?;
        let opt = OptimizerState::for_model(&params);
        let descriptors = (cfg.strategy == Strategy::KnnPair).then(|| data.pixel_descriptors());
        Ok(Self { cfg, params, opt, data, descriptors, step: 0, order: Vec::new(), order_epoch: None })
    }

    /// Generates the configured synthetic dataset and builds a trainer on it.
    pub fn from_config(cfg: TrainConfig) -> Result<Self> {
        let data = BagDataset::generate(cfg.num_bags, cfg.model.image_size, cfg.bag_size, cfg.view_strength, cfg.data_seed)?;
        Self::new(cfg, data)
    }

    fn bag_at(&mut self, global: usize) -> usize {
        let n = self.data.len();
        let epoch = global / n;
        if self.order_epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(u64::MAX - epoch as u64);
            self.order = rand::seq::index::sample(&mut rng, n, n).into_vec();
            self.order_epoch = Some(epoch);
        }
        self.order[global % n]
    }

    /// Bag indices and samples for the current step.
    pub fn next_batch(&mut self) -> Result<Vec<CrossViewSample>> {
        let b = self.cfg.batch_size;
        let mut batch = Vec::with_capacity(b);
        for slot in 0..b {
            let index = self.bag_at(self.step * b + slot);
            let mut rng = sample_rng(self.cfg.seed, self.step, slot);
            batch.push(prepare_sample(&self.cfg, &self.data, self.descriptors.as_deref(), index, &mut rng)?);
        }
        Ok(batch)
    }

    pub fn train_one(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let total = self.cfg.total_steps();
        let lr = lr_at(self.step, total, self.cfg.base_lr, self.cfg.warmup_fraction);
        let batch = self.next_batch()?;
        let (loss, grad_norm) = train_step(&mut self.params, &mut self.opt, &batch, &self.cfg, self.step, lr)?;
        let rec = StepRecord { step: self.step, lr, loss, grad_norm, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
        self.step += 1;
        Ok(rec)
    }

    /// Runs all remaining steps. The log (if any) is rewritten after every
    /// logged step, with timings in a sibling `.timing` file; a checkpoint
    /// (if any) is written at the end.
    pub fn run(&mut self, log: Option<&Path>, checkpoint: Option<&Path>) -> Result<Vec<StepRecord>> {
        let total = self.cfg.total_steps();
        let mut history = Vec::with_capacity(total);
        let (mut logged, mut timings) = (Vec::new(), Vec::new());
        while self.step < total {
            let rec = self.train_one()?;
            if self.cfg.log_every > 0 && (rec.step % self.cfg.log_every == 0 || rec.step + 1 == total) {
                logged.push(rec.record());
                timings.push(rec.timing_record());
                if let Some(path) = log {
                    atomic_write(path, render_records(&logged).as_bytes())?;
                    atomic_write(&path.with_extension("timing"), render_records(&timings).as_bytes())?;
                }
            }
            history.push(rec);
        }
        if let Some(dir) = checkpoint {
            save_checkpoint(dir, &self.params, self.step as u64)?;
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy(steps: usize) -> TrainConfig {
        let mut cfg = TrainConfig::for_model(ModelConfig::tiny());
        cfg.steps = steps;
        cfg.batch_size = 4;
        cfg.num_bags = 8;
        cfg.base_lr = 1e-3;
        cfg
    }

    #[test]
    fn samples_have_the_configured_masks() {
        let cfg = toy(1);
        let t = Trainer::from_config(cfg.clone()).unwrap();
        let mut rng = sample_rng(0, 0, 0);
        let s = prepare_sample(&cfg, &t.data, None, 0, &mut rng).unwrap();
        assert_eq!(s.anchors.len(), 2);
        assert_eq!(s.target.plan.visible_idx.len(), 1);
        assert_eq!(s.anchors[0].plan.visible_idx.len(), 12);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut a = Trainer::from_config(TrainConfig { threads: 1, ..toy(3) }).unwrap();
        let mut b = Trainer::from_config(TrainConfig { threads: 3, ..toy(3) }).unwrap();
        let la: Vec<f64> = a.run(None, None).unwrap().iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = b.run(None, None).unwrap().iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn knn_strategy_runs() {
        let cfg = TrainConfig { strategy: Strategy::KnnPair, knn_k: 3, ..toy(2) };
        let mut t = Trainer::from_config(cfg).unwrap();
        let hist = t.run(None, None).unwrap();
        assert!(hist.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn log_and_checkpoint_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::from_config(toy(2)).unwrap();
        t.run(Some(&dir.path().join("log.txt")), Some(&dir.path().join("ckpt"))).unwrap();
        let recs = crate::io::read_records(&dir.path().join("log.txt")).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[1].get_f64("loss").unwrap() > 0.0);
        assert!(recs[1].get("wall_ms").is_none());
        let timing = crate::io::read_records(&dir.path().join("log.timing")).unwrap();
        assert!(timing[1].get_f64("wall_ms").is_some());
        let (p, step) = crate::model::load_checkpoint(&dir.path().join("ckpt")).unwrap();
        assert_eq!(step, 2);
        assert_eq!(p, t.params);
    }
}
