//! Weight-shared ViT encoder and cross-attention decoder.

mod checkpoint;
mod config;
mod forward;
mod params;
pub mod posembed;

pub use checkpoint::{load_checkpoint, save_checkpoint, MANIFEST};
pub use config::{ModelConfig, LN_EPS};
pub use forward::{
    concat_anchors, decode, decoder_input, embed_anchors, encode, encode_view, extract_features, predict, reconstruction_targets,
    sample_loss, CrossViewSample, MaskedView,
};
pub use params::{Bound, ModelParams};

use crate::autodiff::gradcheck::ScalarFn;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Scalar;

/// Reconstruction loss of one sample as a function of every parameter, in
/// layout order. Used by the end-to-end gradient check.
pub struct ModelLoss {
    pub params: ModelParams,
    pub sample: CrossViewSample,
}

impl ScalarFn for ModelLoss {
    fn name(&self) -> String {
        "model-loss".into()
    }

    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, inputs: &[Var]) -> Result<Var> {
        let w = Bound::from_vars(&self.params, inputs.to_vec());
        sample_loss(tape, &w, &self.sample)
    }
}
