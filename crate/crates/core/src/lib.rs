//! A desk-scale multimodal machine translation testbed on a synthetic
//! world.
//!
//! The pipeline imagines a symbolic scene for each source sentence with a
//! small conditional diffusion model, aligns the imagination to the
//! sentence by fine-tuning the sampler against a scene-graph consistency
//! reward with policy gradients, and conditions a decoder-only translator
//! on the imagined scene through a visual projector. Every quantity is
//! computable and checkable on one CPU core.
//!
//! Module map:
//! - [`tensor`]: dense f64 tensors, reverse-mode autodiff, Adam, checkpoints
//! - [`world`]: scenes, bilingual sentence rendering, scene-vector codec,
//!   rule-based scene-graph extraction, dataset generation
//! - [`reward`]: triple-level structured similarity between language and
//!   visual scene graphs
//! - [`diffusion`]: conditional DDPM over scene vectors with a
//!   log-density-recording ancestral sampler
//! - [`ddpo`]: REINFORCE fine-tuning of the sampler against the reward
//! - [`translator`]: visual-prefix decoder language model
//! - [`trainer`]: the three ordered training stages and run artifacts
//! - [`eval`]: BLEU, scene-consistency cosine, curves, ablation matrix
//! - [`config`]: run configuration, hashing, overrides
//! - [`streams`]: named deterministic RNG streams

pub mod config;
pub mod ddpo;
pub mod diffusion;
pub mod eval;
pub mod reward;
pub mod streams;
pub mod tensor;
pub mod trainer;
pub mod translator;
pub mod world;
