use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Truncated normal, sigma 0.02, cut at two sigma.
    Normal,
    Zeros,
    Ones,
}

/// Every trainable tensor, keyed by a dotted name, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: IndexMap<String, Tensor<f32>>,
}

/// Names and shapes of all parameters for `cfg`, in canonical order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let linear = |push: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, i: usize, o: usize| {
        push(format!("{name}.w"), vec![i, o], Init::Normal);
        push(format!("{name}.b"), vec![o], Init::Zeros);
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, d: usize| {
        push(format!("{name}.g"), vec![d], Init::Ones);
        push(format!("{name}.b"), vec![d], Init::Zeros);
    };
    let (e, d, pd) = (cfg.enc_dim, cfg.dec_dim, cfg.patch_dim());

    linear(&mut push, "patch_embed", pd, e);
    push("cls_token".into(), vec![1, e], Init::Normal);
    for i in 0..cfg.enc_depth {
        let p = format!("enc.{i}");
        norm(&mut push, &format!("{p}.norm1"), e);
        linear(&mut push, &format!("{p}.attn.qkv"), e, 3 * e);
        linear(&mut push, &format!("{p}.attn.proj"), e, e);
        norm(&mut push, &format!("{p}.norm2"), e);
        linear(&mut push, &format!("{p}.mlp.fc1"), e, cfg.mlp_ratio * e);
        linear(&mut push, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * e, e);
    }
    norm(&mut push, "enc.norm", e);

    linear(&mut push, "dec_embed", e, d);
    push("mask_token".into(), vec![1, d], Init::Normal);
    for i in 0..cfg.dec_depth {
        let p = format!("dec.{i}");
        norm(&mut push, &format!("{p}.norm1"), d);
        linear(&mut push, &format!("{p}.self_attn.qkv"), d, 3 * d);
        linear(&mut push, &format!("{p}.self_attn.proj"), d, d);
        norm(&mut push, &format!("{p}.norm2"), d);
        linear(&mut push, &format!("{p}.cross_attn.q"), d, d);
        linear(&mut push, &format!("{p}.cross_attn.kv"), d, 2 * d);
        linear(&mut push, &format!("{p}.cross_attn.proj"), d, d);
        norm(&mut push, &format!("{p}.norm3"), d);
        linear(&mut push, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d);
        linear(&mut push, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d);
    }
    norm(&mut push, "dec.norm", d);
    linear(&mut push, "head", d, pd);
    out
}

impl ModelParams {
    /// Truncated-normal weights, zero biases, unit norm scales; deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid sigma");
        let mut tensors = IndexMap::new();
        for (name, shape, init) in layout(config) {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Normal => Tensor::from_fn(&shape, |_| loop {
                    let v = normal.sample(&mut rng);
                    if v.abs() <= 0.04 {
                        break v;
                    }
                }),
            };
            tensors.insert(name, t);
        }
        Ok(Self { config: config.clone(), tensors })
    }

    /// Assembles parameters loaded from disk, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        config.validate()?;
        let mut given: IndexMap<String, Tensor<f32>> = named.into_iter().collect();
        let mut tensors = IndexMap::new();
        for (name, shape, _) in layout(&config) {
            let t = given.shift_remove(&name).ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("load parameter", t.shape(), &shape));
            }
            tensors.insert(name, t);
        }
        if let Some(extra) = given.keys().next() {
            return Err(Error::Contract(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { config, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.tensors.values_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    /// Records every parameter on `tape`, cast to the tape's precision.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, tracked: bool) -> Bound<'_> {
        let vars = self.tensors.values().map(|t| tape.leaf(t.cast(), tracked)).collect();
        Bound { params: self, vars }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    /// Binds existing tape nodes, one per parameter in layout order.
    pub fn from_vars(params: &'a ModelParams, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), params.len(), "one node per parameter");
        Self { params, vars }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Tape node of a named parameter. Names come from the fixed layout, so
    /// an unknown name is a programming error.
    pub fn var(&self, name: &str) -> Var {
        let i = self.params.index_of(name).unwrap_or_else(|| panic!("no parameter named `{name}`"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
