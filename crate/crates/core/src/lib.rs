//! Particle filters for slow/fast diffusions with correlated observation
//! noise, together with the cell-problem machinery that produces the
//! averaged (homogenized) filter and the tools to compare the two.
//!
//! The typical pipeline:
//!
//! 1. build a [`MultiscaleModel`],
//! 2. tabulate its averaged coefficients with [`averaged_coefficients`],
//! 3. simulate a truth path with [`simulate_multiscale`],
//! 4. run [`particle_filter_full`] and [`particle_filter_averaged`] on the
//!    same observation and compare them.

pub mod cell;
pub mod error;
pub mod filters;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod registry;
pub mod rng;
pub mod sde;

pub use cell::{averaged_coefficients, AveragedModel, AveragingParams, TensorGrid};
pub use error::{Error, Result, Warning};
pub use filters::{
    kalman_bucy, particle_filter_averaged, particle_filter_full, FilterOptions, FilterOutput, KalmanScheme,
    MeasurePath, ParticleEnsemble,
};
pub use rng::RootSeed;
pub use sde::{
    simulate_multiscale, Dims, InitialLaw, LinearCoefficients, ModelFlags, MultiscaleModel, ObservationPath,
    PathBundle, SimulationOptions,
};
