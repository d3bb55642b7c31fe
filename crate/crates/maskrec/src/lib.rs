//! Masked-denoising generative recommendation laboratory.
//!
//! The pipeline, end to end:
//!
//! 1. [`codebook`] — quantize item embeddings into parallel semantic IDs
//!    (one sub-codebook per embedding subspace) and keep the inverse
//!    SID→items index used at retrieval.
//! 2. [`model`] — a small encoder–decoder denoiser: the encoder embeds a
//!    user's interaction history, the bidirectional decoder maps a
//!    partially masked SID plus a difficulty embedding to per-position
//!    token distributions.
//! 3. [`schedule`] — training-time noise: a curriculum over how many SID
//!    positions to mask (ramping from few to many masks over training) and
//!    history-aware allocation of which positions to mask.
//! 4. [`trainer`] — the masked cross-entropy training loop with Adam.
//! 5. [`decoder`] — inference: warm-up single-position steps, then
//!    multi-position parallel steps, confidence-guided position selection,
//!    and joint beam expansion with Top-B pruning.
//! 6. [`eval`] — leave-one-out Recall/NDCG and the decoding-cost (steps vs
//!    QPS) benchmark.
//!
//! [`numerics`] supplies the dense-tensor arithmetic, reverse-mode
//! autodiff, Adam step, and the seeded deterministic RNG everything else
//! is built on. [`data`] handles dataset files, the synthetic-data
//! generators, and batch iteration. All randomness flows from explicit
//! [`numerics::Rng`] values, so every run is reproducible from its seed.

pub mod codebook;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
