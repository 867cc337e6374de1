//! Probabilistic simulation of aircraft descents.
//!
//! Drag and calibrated airspeed are modelled as functions of altitude with a
//! gappy functional PCA. The joint distribution of the expansion weights is
//! learned by a Gaussian, a Gaussian mixture or a masked autoregressive flow.
//! Sampled drag/CAS profiles parameterise the total-energy equation, which is
//! integrated to produce physically consistent descents.
//!
//! Module map:
//!
//! * [`atmosphere`]: ISA state and airspeed conversions.
//! * [`physics`]: energy share factor, ROCD, drag inference, descent integration.
//! * [`fpca`]: altitude grid, gappy fPCA, reconstruction.
//! * [`latent`]: Gaussian / GMM / normalizing-flow density models.
//! * [`generator`]: plausibility bounds and the rejection-sampling pipeline.
//! * [`metrics`]: KS / Wasserstein / MAE distances, per-level evaluation, KDE.
//! * [`dataio`]: blip CSV ingestion, cleaning, splitting, synthetic fleets, artifacts.
//! * [`pipeline`]: the fit / sample / evaluate / sweep stages shared by the CLI.

pub mod atmosphere;
pub mod dataio;
pub mod error;
pub mod fpca;
pub mod generator;
pub mod latent;
pub mod metrics;
pub mod physics;
pub mod pipeline;
pub mod rng;
pub mod units;

pub use error::{Error, Result};
