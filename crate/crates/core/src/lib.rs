//! Domain-generalized nuclei segmentation at desk scale.
//!
//! The crate is organized around a small dense-tensor core with reverse-mode
//! gradients ([`tensor`], [`graph`]), the three model stages (adapter
//! attention in [`encoder`], Gaussian point prompts in [`prompt`], mask
//! decoding in [`decoder`]), a deterministic semantic-to-instance conversion
//! ([`instance`]), the nuclei metric suite ([`metrics`]), and the end-to-end
//! harness: synthetic domains ([`synth`]), training ([`train`]) and the
//! leave-one-domain-out / split / ablation protocols ([`harness`]).

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod graph;
pub mod harness;
pub mod instance;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prompt;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
