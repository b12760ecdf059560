//! Multi-task contrastive training of a small text + image dual encoder.
//!
//! The crate is self-contained: a dense `f64` tensor core with reverse-mode
//! differentiation, byte-level text and patch image towers, InfoNCE losses
//! with and without hard negatives, a three-stage trainer with checkpoint
//! handoff, retrieval and similarity metrics, and a synthetic data generator
//! with a known latent ground truth.
//!
//! | module | contents |
//! |---|---|
//! | [`numcore`] | [`numcore::Tensor`], the tape [`numcore::Graph`], finite-difference [`numcore::grad_check`], seeded [`numcore::Rng`], tensor files |
//! | [`encoders`] | ALiBi self-attention, text and image towers |
//! | [`losses`] | bidirectional InfoNCE, hard-negative InfoNCE, per-stage joint loss, temperatures |
//! | [`data`] | records, corpora, tokenizer, synthetic generator |
//! | [`trainer`] | stage configs, AdamW, cosine schedule, checkpoints, pipeline |
//! | [`eval`] | recall@k, nDCG@k, Spearman, cross-modal harness |
//! | [`cli`] | the `duocontrast` command line |
//!
//! Runnable examples live in `examples/`:
//!
//! - `tensor_autodiff`: tape gradients checked against finite differences
//! - `alibi_attention`: head slopes and masked attention
//! - `contrastive_losses`: the two losses across temperatures
//! - `synthetic_corpus`: generate, inspect and round-trip a dataset
//! - `train_stage_one`: a short stage-1 run and its loss curve
//! - `three_stage_pipeline`: all stages with per-stage evaluation
//! - `retrieval_metrics`: metrics on hand-made scores
//! - `checkpoint_handoff`: save, reload and resume from a checkpoint
//!
//! ```
//! use duocontrast::losses::{nce_bidirectional, EmbeddingBatch, Temperature};
//! use duocontrast::numcore::Tensor;
//!
//! let eye = EmbeddingBatch::new(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.])?)?;
//! let loss = nce_bidirectional(&eye, &eye, &Temperature::fixed(1.0)?)?;
//! assert!(loss > 0.0);
//! # Ok::<(), duocontrast::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numcore;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
