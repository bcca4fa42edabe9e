//! A synthetic stand-in for a text-to-audio corpus.
//!
//! Each condition class is a cluster of Gaussian components in a small latent
//! space. Training captions are noisy: with probability `caption_noise` an
//! example carries a uniformly drawn label instead of its own. A fixed
//! `tanh`-affine decoder maps latents to an "audio" space, and a small
//! contrastive embedder, trained once on clean labels and then frozen, scores
//! generated audio against audio or condition references.

mod checksum;
mod decoder;
mod embedder;
mod error;
mod oracle;
mod world;

pub use checksum::checksum_tensors;
pub use decoder::ToyDecoder;
pub use embedder::{pretrain_embedder, train_embedder, EmbedderConfig, ToyEmbedder};
pub use error::{Result, WorldError};
pub use oracle::{analytic_denoiser, Gaussian, Posterior};
pub use world::{make_dataset, Batch, ToyDataset, ToyWorld, WorldConfig};
