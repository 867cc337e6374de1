use thiserror::Error;

use crate::atmosphere::AtmosphereError;
use crate::dataio::DataError;
use crate::fpca::FpcaError;
use crate::generator::GenerationError;
use crate::latent::LatentError;
use crate::metrics::MetricsError;
use crate::physics::PhysicsError;

/// Crate-level error; each variant wraps the error type of one module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("atmosphere: {0}")]
    Atmosphere(#[from] AtmosphereError),
    #[error("physics: {0}")]
    Physics(#[from] PhysicsError),
    #[error("fpca: {0}")]
    Fpca(#[from] FpcaError),
    #[error("latent model: {0}")]
    Latent(#[from] LatentError),
    #[error("generation: {0}")]
    Generation(#[from] GenerationError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("data: {0}")]
    Data(#[from] DataError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
