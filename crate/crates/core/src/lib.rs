//! Idempotent test-time training for dual-input MLPs.
//!
//! A model `f(x, a)` takes the features and an auxiliary input that is
//! either the label or a neutral signal. It is trained so that
//! `f(x, f(x, 0)) ≈ f(x, 0)`; at test time the gap between the two
//! applications is an out-of-distribution score and a training signal.
//!
//! - [`diff`]: reverse-mode autodiff, parameters, optimizers
//! - [`dualnet`]: the dual-input MLP and its weight format
//! - [`training`]: supervised pre-training
//! - [`adapt`]: offline, naive and online test-time adaptation
//! - [`baselines`]: unadapted model and activation-statistics alignment
//! - [`ood`]: corruptions and drifting streams
//! - [`bench`]: datasets, configs, the experiment runner and reports
//! - [`check`]: gradient and invariant self-tests

// `!(a >= b)` is used on purpose so NaN lands in the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod baselines;
pub mod bench;
pub mod check;
pub mod diff;
pub mod dualnet;
pub mod error;
pub mod ood;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
