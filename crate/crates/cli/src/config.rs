//! TOML experiment configuration.
//!
//! ```toml
//! [experiment]
//! model = "ou-decay"
//! eps_list = [0.5, 0.35, 0.25, 0.18, 0.125]
//! horizon = 1.0
//! dt_factor = 0.1
//! seed = 1
//!
//! [grid]
//! lower = [-5.0]
//! upper = [5.0]
//! nodes = [21]
//!
//! [filter]
//! particles = 2000
//! replications = 50
//! ```
//!
//! Every section and field is optional except `experiment.model`.

use std::path::PathBuf;

use msfilter::cell::{PoissonParams, SamplerParams};
use msfilter::filters::ResamplePolicy;
use msfilter::metrics::{ConvergenceSettings, DEFAULT_DICTIONARY_SIZE, MIN_DICTIONARY_SIZE};
use msfilter::{AveragingParams, FilterOptions, TensorGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default)]
    pub filter: Filter,
    #[serde(default)]
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub model: String,
    #[serde(default = "default_eps_list")]
    pub eps_list: Vec<f64>,
    /// Scale used by `simulate` and `filter`; defaults to the first entry of `eps_list`.
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// `dt = dt_factor * eps^2`.
    #[serde(default = "default_dt_factor")]
    pub dt_factor: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub nodes: Vec<usize>,
    pub margin: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Grid { lower: vec![-5.0], upper: vec![5.0], nodes: vec![21], margin: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Solver {
    /// Semigroup truncation horizon; omitted means automatic.
    pub t_max: Option<f64>,
    pub burn_in: f64,
    pub samples: usize,
    pub thinning: f64,
    pub sampler_dt: f64,
    pub poisson_dt: f64,
    pub paths: usize,
    /// Relative finite-difference step in `x`.
    pub dx_rel: f64,
    pub ess_floor: f64,
}

impl Default for Solver {
    fn default() -> Self {
        let s = SamplerParams::default();
        let p = PoissonParams::default();
        Solver {
            t_max: p.t_max,
            burn_in: s.burn_in,
            samples: s.n_samples,
            thinning: s.thinning,
            sampler_dt: s.dt,
            poisson_dt: p.dt,
            paths: p.n_paths,
            dx_rel: p.dx_rel,
            ess_floor: s.ess_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Filter {
    pub particles: usize,
    pub replications: usize,
    /// Resample when ESS drops below this fraction of the particle count; 0 disables.
    pub ess_threshold: f64,
    /// Spacing of the comparison times in `converge`; 0 compares at every step.
    pub record_dt: f64,
    /// Also write binary ensemble dumps from `filter`.
    pub dump: bool,
}

impl Default for Filter {
    fn default() -> Self {
        Filter { particles: 2000, replications: 50, ess_threshold: 0.5, record_dt: 0.05, dump: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Metric {
    pub dictionary_size: usize,
    pub dictionary_seed: u64,
}

impl Default for Metric {
    fn default() -> Self {
        Metric { dictionary_size: DEFAULT_DICTIONARY_SIZE, dictionary_seed: 7 }
    }
}

fn default_eps_list() -> Vec<f64> {
    vec![0.5, 0.35, 0.25, 0.18, 0.125]
}

fn default_horizon() -> f64 {
    1.0
}

fn default_dt_factor() -> f64 {
    msfilter::sde::DEFAULT_DT_FACTOR
}

fn default_seed() -> u64 {
    1
}

/// A parsed configuration together with the digest of its source text.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub sha256: String,
}

pub fn parse(text: &str) -> Result<LoadedConfig, String> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    config.validate()?;
    Ok(LoadedConfig { config, sha256: hex::encode(Sha256::digest(text.as_bytes())) })
}

fn positive(name: &str, v: f64) -> Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("{name} must be > 0, got {v}"))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        let e = &self.experiment;
        if e.eps_list.is_empty() {
            return Err("experiment.eps_list must not be empty".into());
        }
        if e.eps_list.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err("experiment.eps_list entries must lie in (0, 1]".into());
        }
        if e.eps_list.windows(2).any(|w| !(w[1] < w[0])) {
            return Err("experiment.eps_list must be strictly decreasing".into());
        }
        if let Some(eps) = e.eps {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(format!("experiment.eps must lie in (0, 1], got {eps}"));
            }
        }
        positive("experiment.horizon", e.horizon)?;
        positive("experiment.dt_factor", e.dt_factor)?;

        let g = &self.grid;
        if g.lower.len() != g.upper.len() || g.lower.len() != g.nodes.len() || g.lower.is_empty() {
            return Err("grid.lower, grid.upper and grid.nodes must have the same non-zero length".into());
        }
        if g.lower.iter().zip(&g.upper).any(|(a, b)| !(a < b)) || g.nodes.iter().any(|n| *n < 2) {
            return Err("grid needs lower < upper and at least 2 nodes per axis".into());
        }
        if !(g.margin >= 0.0) {
            return Err("grid.margin must be >= 0".into());
        }

        let s = &self.solver;
        if let Some(t) = s.t_max {
            positive("solver.t_max", t)?;
        }
        for (name, v) in [
            ("solver.thinning", s.thinning),
            ("solver.sampler_dt", s.sampler_dt),
            ("solver.poisson_dt", s.poisson_dt),
            ("solver.dx_rel", s.dx_rel),
        ] {
            positive(name, v)?;
        }
        if !(s.burn_in >= 0.0) || !(s.ess_floor >= 0.0) {
            return Err("solver.burn_in and solver.ess_floor must be >= 0".into());
        }
        if s.samples < 2 || s.paths < 2 {
            return Err("solver.samples and solver.paths must be >= 2".into());
        }

        let f = &self.filter;
        if f.particles == 0 || f.replications == 0 {
            return Err("filter.particles and filter.replications must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&f.ess_threshold) {
            return Err("filter.ess_threshold must lie in [0, 1]".into());
        }
        if !(f.record_dt >= 0.0) {
            return Err("filter.record_dt must be >= 0".into());
        }
        if self.metric.dictionary_size < MIN_DICTIONARY_SIZE {
            return Err(format!("metric.dictionary_size must be >= {MIN_DICTIONARY_SIZE}"));
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        self.experiment.eps.unwrap_or(self.experiment.eps_list[0])
    }

    pub fn grid(&self) -> msfilter::Result<TensorGrid> {
        TensorGrid::uniform(&self.grid.lower, &self.grid.upper, &self.grid.nodes)
    }

    pub fn averaging(&self) -> AveragingParams {
        let s = &self.solver;
        let mut p = AveragingParams { grid_margin: self.grid.margin, ..Default::default() };
        p.poisson.sampler = SamplerParams {
            dt: s.sampler_dt,
            burn_in: s.burn_in,
            n_samples: s.samples,
            thinning: s.thinning,
            ess_floor: s.ess_floor,
        };
        p.poisson.dt = s.poisson_dt;
        p.poisson.t_max = s.t_max;
        p.poisson.n_paths = s.paths;
        p.poisson.dx_rel = s.dx_rel;
        p
    }

    pub fn filter_options(&self) -> FilterOptions {
        let resample = if self.filter.ess_threshold > 0.0 {
            ResamplePolicy::Systematic { threshold: self.filter.ess_threshold }
        } else {
            ResamplePolicy::Never
        };
        FilterOptions {
            particles: self.filter.particles,
            resample,
            dt_factor: self.experiment.dt_factor,
            ..Default::default()
        }
    }

    pub fn convergence(&self, seed: u64) -> ConvergenceSettings {
        ConvergenceSettings {
            eps_list: self.experiment.eps_list.clone(),
            replications: self.filter.replications,
            horizon: self.experiment.horizon,
            dt_factor: self.experiment.dt_factor,
            filter: self.filter_options(),
            record_dt: (self.filter.record_dt > 0.0).then_some(self.filter.record_dt),
            dictionary_size: self.metric.dictionary_size,
            dictionary_seed: self.metric.dictionary_seed,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse("[experiment]\nmodel = \"ou-linear\"\n").unwrap();
        assert_eq!(c.config.experiment.eps_list.len(), 5);
        assert_eq!(c.config.filter.particles, 2000);
        assert_eq!(c.config.eps(), 0.5);
        assert_eq!(c.sha256.len(), 64);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "[experiment]\nmodel = \"ou-linear\"\nhorizon = 0.0\n",
            "[experiment]\nmodel = \"ou-linear\"\neps_list = [0.25, 0.5]\n",
            "[experiment]\nmodel = \"ou-linear\"\neps_list = [1.5]\n",
            "[experiment]\nmodel = \"ou-linear\"\n[filter]\nparticles = 0\n",
            "[experiment]\nmodel = \"ou-linear\"\n[metric]\ndictionary_size = 8\n",
            "[experiment]\nmodel = \"ou-linear\"\n[grid]\nlower = [1.0]\nupper = [0.0]\nnodes = [3]\nmargin = 1.0\n",
            "[experiment]\nmodel = \"ou-linear\"\nunknown = 1\n",
            "[filter]\nparticles = 10\n",
        ] {
            assert!(parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn digest_tracks_the_text() {
        let a = parse("[experiment]\nmodel = \"ou-linear\"\n").unwrap();
        let b = parse("[experiment]\nmodel = \"ou-linear\"\n\n").unwrap();
        assert_ne!(a.sha256, b.sha256);
    }
}
