//! Cross-view masked autoencoder pretraining with procedurally generated
//! multi-view data.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autodiff`] provide the
//! numeric substrate, [`patch`] and [`model`] implement the Siamese encoder
//! and cross-attending decoder, [`train`] drives pretraining, and
//! [`metrics`] and [`labelprop`] evaluate the learned features.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod io;
pub mod labelprop;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
