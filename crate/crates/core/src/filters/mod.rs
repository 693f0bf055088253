//! Weighted-particle realizations of the full and averaged unnormalized
//! filters, and the Kalman–Bucy oracle for linear-Gaussian models.

mod ensemble;
pub mod kalman;
mod particle;

pub use ensemble::{log_sum_exp, ParticleEnsemble};
pub use kalman::{kalman_bucy, GaussianState, KalmanScheme, LinearGaussianSpec};
pub use particle::{
    particle_filter_averaged, particle_filter_full, read_ensemble_dump, write_ensemble_dump,
    FilterOptions, FilterOutput, ResamplePolicy, SummaryRow, PF_DUMP_TAG,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    Full,
    Averaged,
    Kalman,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeasureEntry {
    Particles(ParticleEnsemble),
    Gaussian(GaussianState),
}

impl MeasureEntry {
    pub fn t(&self) -> f64 {
        match self {
            MeasureEntry::Particles(e) => e.t,
            MeasureEntry::Gaussian(g) => g.t,
        }
    }

    pub fn as_particles(&self) -> Option<&ParticleEnsemble> {
        match self {
            MeasureEntry::Particles(e) => Some(e),
            MeasureEntry::Gaussian(_) => None,
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianState> {
        match self {
            MeasureEntry::Gaussian(g) => Some(g),
            MeasureEntry::Particles(_) => None,
        }
    }
}

/// Time-indexed filter output.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurePath {
    pub kind: FilterKind,
    pub entries: Vec<MeasureEntry>,
}

impl MeasurePath {
    pub fn new(kind: FilterKind) -> Self {
        MeasurePath { kind, entries: Vec::new() }
    }

    pub fn times(&self) -> Vec<f64> {
        self.entries.iter().map(MeasureEntry::t).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<&MeasureEntry> {
        self.entries.last()
    }

    /// Particle ensembles in time order; errors on a Gaussian path.
    pub fn ensembles(&self) -> Result<Vec<&ParticleEnsemble>> {
        self.entries
            .iter()
            .map(|e| {
                e.as_particles()
                    .ok_or_else(|| Error::InvalidArgument("expected a particle path".into()))
            })
            .collect()
    }
}
