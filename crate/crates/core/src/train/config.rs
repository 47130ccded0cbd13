use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// How target and anchors are chosen from a bag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    AlwaysReal,
    AlwaysGenerated,
    RandomChoice,
    /// Target is a real image; anchors are real images of its nearest neighbours.
    KnnPair,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::AlwaysReal, Strategy::AlwaysGenerated, Strategy::RandomChoice, Strategy::KnnPair];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::AlwaysReal => "always_real",
            Strategy::AlwaysGenerated => "always_generated",
            Strategy::RandomChoice => "random_choice",
            Strategy::KnnPair => "knn_pair",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Everything that controls a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub strategy: Strategy,
    pub num_anchors: usize,
    pub target_mask: f64,
    pub anchor_mask: f64,
    pub norm_pix: bool,
    /// Used when `steps` is 0: total steps = epochs * ceil(num_bags / batch_size).
    pub epochs: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub crop_scale: (f64, f64),
    pub crop_aspect: (f64, f64),
    pub same_crop: bool,
    pub augment: bool,
    pub knn_k: usize,
    pub num_bags: usize,
    pub bag_size: usize,
    pub view_strength: f64,
    pub data_seed: u64,
    /// Worker threads for per-sample forward/backward; 0 picks the machine's parallelism.
    pub threads: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_model(ModelConfig::small())
    }
}

impl TrainConfig {
    pub fn for_model(model: ModelConfig) -> Self {
        Self {
            strategy: Strategy::RandomChoice,
            num_anchors: model.num_anchors,
            target_mask: model.target_mask,
            anchor_mask: model.anchor_mask,
            norm_pix: model.norm_pix,
            model,
            epochs: 10,
            steps: 0,
            batch_size: 32,
            base_lr: 1.5e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            seed: 0,
            crop_scale: (0.5, 1.0),
            crop_aspect: (0.75, 1.33),
            same_crop: true,
            augment: true,
            knn_k: 5,
            num_bags: 64,
            bag_size: 4,
            view_strength: 0.5,
            data_seed: 1,
            threads: 0,
            log_every: 1,
        }
    }

    /// Model configuration with the masking and anchor settings of this run.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_anchors: self.num_anchors,
            target_mask: self.target_mask,
            anchor_mask: self.anchor_mask,
            norm_pix: self.norm_pix,
            ..self.model.clone()
        }
    }

    pub fn total_steps(&self) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * self.num_bags.div_ceil(self.batch_size.max(1))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.model_config().validate()?;
        if self.strategy == Strategy::KnnPair {
            if self.num_anchors > self.knn_k {
                return fail(format!("knn_pair needs num_anchors ({}) <= knn_k ({})", self.num_anchors, self.knn_k));
            }
            if self.num_bags < self.knn_k + 1 {
                return fail(format!("knn_pair needs at least knn_k + 1 = {} bags", self.knn_k + 1));
            }
        } else if self.num_anchors > self.bag_size {
            return fail(format!("num_anchors ({}) must be at most the bag size M ({})", self.num_anchors, self.bag_size));
        }
        if self.batch_size == 0 || self.num_bags == 0 || self.bag_size == 0 {
            return fail("batch_size, num_bags and bag_size must be positive".into());
        }
        if self.total_steps() == 0 {
            return fail("training would run zero steps".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || self.weight_decay < 0.0 {
            return fail("base_lr must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        let (s0, s1) = self.crop_scale;
        let (a0, a1) = self.crop_aspect;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) || !(0.0 < a0 && a0 <= a1) {
            return fail("invalid crop scale or aspect range".into());
        }
        if !(self.view_strength > 0.0 && self.view_strength <= 1.0) {
            return fail(format!("view_strength {} outside (0, 1]", self.view_strength));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 26] = [
        "preset",
        "strategy",
        "num_anchors",
        "target_mask",
        "anchor_mask",
        "norm_pix",
        "epochs",
        "steps",
        "batch_size",
        "base_lr",
        "warmup_fraction",
        "weight_decay",
        "betas",
        "seed",
        "crop_scale",
        "crop_aspect",
        "same_crop",
        "augment",
        "knn_k",
        "num_bags",
        "bag_size",
        "view_strength",
        "data_seed",
        "threads",
        "log_every",
        "image_size",
    ];

    /// Builds a config from `key = value` pairs; unknown keys are rejected.
    /// `model.*` keys override individual architecture fields.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut allowed: Vec<String> = Self::KEYS.iter().map(|k| k.to_string()).collect();
        allowed.extend(ModelConfig::KEYS.iter().map(|k| format!("model.{k}")));
        let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
        kv.reject_unknown(&allowed)?;

        let mut model = match kv.get_str("preset") {
            Some(name) => ModelConfig::preset(name)?,
            None => ModelConfig::small(),
        };
        model.apply_kv(kv, "model.")?;
        if let Some(size) = kv.get::<usize>("image_size")? {
            model.image_size = size;
        }
        let mut c = Self::for_model(model);
        kv.read_into("strategy", &mut c.strategy)?;
        kv.read_into("num_anchors", &mut c.num_anchors)?;
        kv.read_into("target_mask", &mut c.target_mask)?;
        kv.read_into("anchor_mask", &mut c.anchor_mask)?;
        kv.read_into("norm_pix", &mut c.norm_pix)?;
        kv.read_into("epochs", &mut c.epochs)?;
        kv.read_into("steps", &mut c.steps)?;
        kv.read_into("batch_size", &mut c.batch_size)?;
        kv.read_into("base_lr", &mut c.base_lr)?;
        kv.read_into("warmup_fraction", &mut c.warmup_fraction)?;
        kv.read_into("weight_decay", &mut c.weight_decay)?;
        kv.read_into("seed", &mut c.seed)?;
        kv.read_into("same_crop", &mut c.same_crop)?;
        kv.read_into("augment", &mut c.augment)?;
        kv.read_into("knn_k", &mut c.knn_k)?;
        kv.read_into("num_bags", &mut c.num_bags)?;
        kv.read_into("bag_size", &mut c.bag_size)?;
        kv.read_into("view_strength", &mut c.view_strength)?;
        kv.read_into("data_seed", &mut c.data_seed)?;
        kv.read_into("threads", &mut c.threads)?;
        kv.read_into("log_every", &mut c.log_every)?;
        if let Some(v) = kv.get_str("betas") {
            (c.beta1, c.beta2) = parse_pair(v, "betas")?;
        }
        if let Some(v) = kv.get_str("crop_scale") {
            c.crop_scale = parse_pair(v, "crop_scale")?;
        }
        if let Some(v) = kv.get_str("crop_aspect") {
            c.crop_aspect = parse_pair(v, "crop_aspect")?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    /// Every setting as `key = value` pairs that [`TrainConfig::from_kv`] reads back.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_kv("model.");
        let mut set = |k: &str, v: String| kv.set(k, v);
        set("strategy", self.strategy.to_string());
        set("num_anchors", self.num_anchors.to_string());
        set("target_mask", format!("{:?}", self.target_mask));
        set("anchor_mask", format!("{:?}", self.anchor_mask));
        set("norm_pix", self.norm_pix.to_string());
        set("epochs", self.epochs.to_string());
        set("steps", self.steps.to_string());
        set("batch_size", self.batch_size.to_string());
        set("base_lr", format!("{:?}", self.base_lr));
        set("warmup_fraction", format!("{:?}", self.warmup_fraction));
        set("weight_decay", format!("{:?}", self.weight_decay));
        set("betas", format!("{:?}, {:?}", self.beta1, self.beta2));
        set("seed", self.seed.to_string());
        set("crop_scale", format!("{:?}, {:?}", self.crop_scale.0, self.crop_scale.1));
        set("crop_aspect", format!("{:?}, {:?}", self.crop_aspect.0, self.crop_aspect.1));
        set("same_crop", self.same_crop.to_string());
        set("augment", self.augment.to_string());
        set("knn_k", self.knn_k.to_string());
        set("num_bags", self.num_bags.to_string());
        set("bag_size", self.bag_size.to_string());
        set("view_strength", format!("{:?}", self.view_strength));
        set("data_seed", self.data_seed.to_string());
        set("threads", self.threads.to_string());
        set("log_every", self.log_every.to_string());
        kv
    }
}

fn parse_pair(s: &str, key: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("`{key}` expects two numbers like `0.5, 1.0`, got {s:?}"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.target_mask, 0.9);
        assert_eq!(c.base_lr, 1.5e-4);
        assert_eq!(c.weight_decay, 0.05);
        assert_eq!((c.beta1, c.beta2), (0.9, 0.95));
        assert_eq!(c.crop_scale, (0.5, 1.0));
        assert_eq!(c.crop_aspect, (0.75, 1.33));
        assert_eq!(c.bag_size, 4);
        assert_eq!(c.batch_size, 32);
        assert!(c.same_crop);
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip_and_unknown_keys() {
        let mut c = TrainConfig::for_model(ModelConfig::tiny());
        c.strategy = Strategy::KnnPair;
        (c.beta1, c.beta2) = (0.85, 0.97);
        c.crop_scale = (0.6, 0.9);
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);

        let kv = KeyValues::parse("preset = tiny\nbogus = 1\n").unwrap();
        assert!(matches!(TrainConfig::from_kv(&kv), Err(Error::Config(_))));
        let kv = KeyValues::parse("preset = tiny\nstrategy = sometimes\n").unwrap();
        assert!(TrainConfig::from_kv(&kv).is_err());
        let kv = KeyValues::parse("preset = tiny\nnum_anchors = 5\n").unwrap();
        assert!(TrainConfig::from_kv(&kv).is_err());
        let kv = KeyValues::parse("preset = tiny\nbetas = 0.8, 0.99\nsteps = 7\n").unwrap();
        let c = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!((c.beta1, c.beta2, c.total_steps()), (0.8, 0.99, 7));
        assert_eq!(c.model, ModelConfig::tiny());
    }
}
