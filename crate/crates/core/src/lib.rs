//! Image-to-report generation with a frozen decoder-only language model,
//! a trainable vision encoder and projection, and prompts customized per
//! image by a learned affine transform.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: tensors, the gradient tape, Adam, checkpoints
//! - [`data`]: synthetic scenes, rendering, report templates, tokenizer, manifests
//! - [`model`]: vision encoder, projection, frozen backbone, vocabulary head
//! - [`prompt`]: the promptbook and the parameter network that customizes it
//! - [`pipeline`]: sequence assembly, teacher-forced training, greedy decoding, ablations
//! - [`metrics`]: corpus BLEU, ROUGE-L and an exact-match METEOR variant

pub mod autodiff;
pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod rng;

pub use error::{Error, Result};
