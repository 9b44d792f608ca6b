//! A desk-scale hybrid autoregressive sequence model that interleaves
//! discrete text tokens with continuous latent sketch vectors.
//!
//! The decoder-only backbone runs in two modes: textual thinking mode emits
//! ordinary vocabulary tokens, and visual sketching mode feeds the model's
//! own last hidden state back in as the next input, producing a run of
//! latent sketch tokens that are never decoded to pixels. Training pairs a
//! masked next-token cross-entropy with a latent reconstruction loss against
//! pooled embeddings of intermediate sketch images; the sketch encoder path
//! exists only at training time.
//!
//! Everything is f64 and seed-deterministic, built on a small reverse-mode
//! autodiff tape with a finite-difference oracle. Synthetic maze and jigsaw
//! task generators provide fully checkable training data.
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `sketchlm` binary for the data/train/eval command line.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod perception;
pub mod taskgen;
pub mod train;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
