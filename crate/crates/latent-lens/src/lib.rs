//! Explain the latent dimensions of generative models.
//!
//! The crate trains small variational autoencoders (standard VAE, β-VAE,
//! β-TCVAE), decodes per-dimension latent traversals into image strips,
//! samples natural-language explanations of each strip from a pluggable
//! backend (a remote vision chat API, a scripted mock, or an offline
//! image-statistics heuristic), scores the agreement of the sampled
//! explanations as a certainty value, and displays the best explanation only
//! when certainty clears a calibrated threshold. Explanation quality can be
//! evaluated against human references with BLEU, ROUGE-L, METEOR, and an
//! embedding-F1 score.
//!
//! The `pipeline` module wires the stages into a reproducible run directory;
//! the `latent-lens` binary exposes each stage as a subcommand.

pub mod calibration;
pub mod dataset;
pub mod explainers;
pub mod imgcodec;
pub mod linalg;
mod net;
pub mod nlgmetrics;
pub mod pipeline;
pub mod rng;
pub mod similarity;
pub mod tinyvae;
pub mod traversal;
