//! Human-object interaction detection with layout priming.
//!
//! A layout branch reads two-channel interaction patterns and predicts
//! predicate priors; a visual branch over the union crop refines them. The
//! crate bundles its own small autodiff engine, pairing and evaluation code,
//! and a synthetic scene generator with exact labels.

pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod pairing;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod training;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Pair(#[from] pairing::PairError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
}
