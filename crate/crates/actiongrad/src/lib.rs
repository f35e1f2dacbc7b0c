//! Offline reinforcement learning toolkit built around three pieces:
//!
//! * a minimal reverse-mode autodiff tape ([`autodiff`]) sized for small MLPs
//!   and causal transformers,
//! * sequence policies with return-to-go conditioning plus expectile critics
//!   ([`policy`], [`critic`]), and
//! * inference-time action refinement that climbs a frozen critic's gradient
//!   and keeps the best candidate it saw ([`inference`]).
//!
//! Two toy environments ([`envs`]) and a CLI experiment harness ([`harness`])
//! tie it together. Everything is deterministic given a seed: reruns of any
//! command produce byte-identical artifacts.

pub mod autodiff;
pub mod critic;
pub mod data;
pub mod envs;
pub mod harness;
pub mod inference;
pub mod policy;
pub mod rng;

/// Crate-wide error type. `Config` covers bad shapes/hyperparameters, `Usage`
/// covers API misuse (stepping a finished episode, backward on a foreign
/// node), `Parse` carries the line number of a malformed dataset record.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
