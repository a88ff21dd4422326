//! Decentralized federated learning with sporadic local SGD and sporadic
//! gossip: simulator, error-bound evaluation, and experiment harness.

pub mod engine;
pub mod graph;
pub mod harness;
pub mod mc;
pub mod metrics;
pub mod mixing;
pub mod objectives;
pub mod par;
pub mod rng;
pub mod sporadic;
pub mod theory;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Mixing(#[from] mixing::MixingError),
    #[error(transparent)]
    Sporadic(#[from] sporadic::SporadicError),
    #[error(transparent)]
    Objective(#[from] objectives::ObjectiveError),
    #[error(transparent)]
    Theory(#[from] theory::TheoryError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Config(#[from] harness::ConfigError),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
