//! Command implementations and configuration for the `posemap` binary:
//! dataset generation, training, and reporting over the desk-scale pose
//! estimation testbed.

pub mod commands;
pub mod config;

use thiserror::Error;

/// Command-level failures, split by exit code: validation problems
/// (bad config, missing inputs) exit 1, runtime failures exit 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    std::io::Error,
    posemap_core::scene::SceneError,
    posemap_core::model::ModelError,
    posemap_core::training::TrainError,
    posemap_core::eval::EvalError,
    posemap_core::autodiff::DiffError,
    posemap_core::geometry::GeomError
);
