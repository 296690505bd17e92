//! Workbench for denoising implicit-feedback recommendation data.
//!
//! An autonomous agent loop (planning plus confidence/rule reflections over
//! three memory stores) drives a GMF recommender trained with BPR, unlearns
//! flagged interactions through a gradient-reversal objective instead of
//! retraining from scratch, emits executable hierarchical denoising rules,
//! and scores the result with Recall@K / NDCG@K.
//!
//! Numeric modules ([`model`], [`training`], [`eval`], [`rules`]) are generic
//! over the [`scalar::Scalar`] float type; the agent and persistence layers
//! run on [`Real`] (`f64`).

pub mod agent;
pub mod dataset;
pub mod eval;
pub mod llm;
pub mod memory;
pub mod model;
pub mod rules;
pub mod scalar;
pub mod stats;
pub mod training;

/// Scalar type used by the agent loop, memories, and the CLI.
pub type Real = f64;

/// Model parameters at the default precision.
pub type GmfParams64 = model::GmfParams<f64>;
/// Single-precision model parameters.
pub type GmfParams32 = model::GmfParams<f32>;
/// Loss trace at the default precision.
pub type LossTrace64 = training::LossTrace<f64>;
