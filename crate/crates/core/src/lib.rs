//! Data-free knowledge distillation with label differential privacy.
//!
//! A teacher trained on private data is distilled into a student using only
//! synthetic samples from a generator. Labels for the synthetic samples are
//! released through selective randomized response, so the student's training
//! signal satisfies ε-label differential privacy with respect to the teacher.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod generator;
pub mod label_privacy;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod verifier;

pub use error::{Error, Result};
pub use tensor::{ProbVector, Tensor};
