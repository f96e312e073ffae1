//! Deterministic engine and performance simulator for hybrid (inter-layer x
//! data) parallel training over a simulated worker fabric.
//!
//! Workers form a `g_inter x g_data` grid: each column of replicas is a
//! data-parallel group, each pipeline is a chain of stages exchanging
//! activation and gradient messages. The crate provides the numeric training
//! engine (message-driven scheduling, activation checkpointing, emulated half
//! precision, bucketed optimizer offload, overlapped all-reduce), serial
//! reference paths for equivalence checking, and an analytic plus
//! discrete-event performance model.
//!
//! Core numerics are generic over the scalar type via [`scalar::Scalar`];
//! `f64` is the default working precision of the CLI and the test suites.

pub mod analytics;
pub mod config;
pub mod data;
pub mod engine;
pub mod fabric;
pub mod halfprec;
pub mod matrix;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod seeds;

pub use config::{validate, RunConfig, ValidatedRun};
pub use scalar::Scalar;

/// Double-precision engine: the default for training and equivalence runs.
pub type Engine64 = engine::HybridEngine<f64>;
/// Single-precision engine.
pub type Engine32 = engine::HybridEngine<f32>;
/// Double-precision serial reference trainer.
pub type SerialTrainer64 = engine::serial::SerialTrainer<f64>;
/// Double-precision matrix.
pub type Matrix64 = matrix::Matrix<f64>;
/// Double-precision synthetic data stream.
pub type SyntheticStream64 = data::SyntheticStream<f64>;
