//! Distances between filter outputs and the eps-sweep convergence experiment.
//!
//! The distance is a surrogate for a bounded-Lipschitz metric: the largest
//! discrepancy over a fixed, seeded dictionary of test functions that are
//! bounded by 1 and 1-Lipschitz. It only sees the signed measure `mu - nu`.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::AveragedModel;
use crate::error::{Error, Result};
use crate::filters::{particle_filter_averaged, particle_filter_full, FilterOptions, MeasurePath, ParticleEnsemble};
use crate::io::fmt_g17;
use crate::rng::{fill_normal, RootSeed};
use crate::sde::{simulate_multiscale, uniform_grid, MultiscaleModel, SimulationOptions};

pub const MIN_DICTIONARY_SIZE: usize = 32;
pub const DEFAULT_DICTIONARY_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TestFunction {
    Constant { value: f64 },
    /// `amp * exp(-|x - center|^2 / (2 scale^2))`, Lipschitz constant `amp / (scale sqrt(e))`.
    Bump { center: Vec<f64>, scale: f64, amp: f64 },
    /// `amp * tanh(slope * (<direction, x> - offset))` with a unit direction.
    Sigmoid { direction: Vec<f64>, offset: f64, slope: f64, amp: f64 },
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Constant { value } => *value,
            TestFunction::Bump { center, scale, amp } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                amp * (-r2 / (2.0 * scale * scale)).exp()
            }
            TestFunction::Sigmoid { direction, offset, slope, amp } => {
                let s: f64 = x.iter().zip(direction).map(|(a, d)| a * d).sum();
                amp * (slope * (s - offset)).tanh()
            }
        }
    }

    pub fn sup_bound(&self) -> f64 {
        match self {
            TestFunction::Constant { value } => value.abs(),
            TestFunction::Bump { amp, .. } | TestFunction::Sigmoid { amp, .. } => amp.abs(),
        }
    }

    pub fn lipschitz_bound(&self) -> f64 {
        match self {
            TestFunction::Constant { .. } => 0.0,
            TestFunction::Bump { scale, amp, .. } => amp.abs() / (scale * 0.5f64.exp()),
            TestFunction::Sigmoid { slope, amp, .. } => amp.abs() * slope.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestDictionary {
    pub dim: usize,
    pub seed: u64,
    pub functions: Vec<TestFunction>,
}

impl TestDictionary {
    /// The constant 1, then alternating Gaussian bumps and sigmoids with
    /// random centers/directions in `[-3, 3]^dim`.
    pub fn seeded(dim: usize, size: usize, seed: u64) -> Result<Self> {
        if size < MIN_DICTIONARY_SIZE {
            return Err(Error::InvalidArgument(format!(
                "dictionary size must be >= {MIN_DICTIONARY_SIZE}, got {size}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("dictionary dimension must be >= 1".into()));
        }
        let mut rng = RootSeed(seed).stream("dictionary", 0);
        let mut functions = vec![TestFunction::Constant { value: 1.0 }];
        for k in 1..size {
            if k % 2 == 1 {
                let center = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                let scale: f64 = rng.random_range(0.25..2.0);
                let amp = (scale * 0.5f64.exp()).min(1.0);
                functions.push(TestFunction::Bump { center, scale, amp });
            } else {
                let mut direction = vec![0.0; dim];
                fill_normal(&mut rng, 1.0, &mut direction);
                let len = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                direction.iter_mut().for_each(|v| *v /= len);
                let offset = rng.random_range(-3.0..3.0);
                let slope: f64 = rng.random_range(0.25..4.0);
                let amp = (1.0 / slope).min(1.0);
                functions.push(TestFunction::Sigmoid { direction, offset, slope, amp });
            }
        }
        Self::from_functions(dim, seed, functions)
    }

    /// Rejects members whose declared bounds exceed 1.
    pub fn from_functions(dim: usize, seed: u64, functions: Vec<TestFunction>) -> Result<Self> {
        for (k, f) in functions.iter().enumerate() {
            if f.sup_bound() > 1.0 || f.lipschitz_bound() > 1.0 + 1e-12 {
                return Err(Error::InvalidArgument(format!("dictionary member {k} is not bounded-Lipschitz(1)")));
            }
        }
        Ok(TestDictionary { dim, seed, functions })
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Largest `|phi(x)|` over the dictionary and the probe points.
    pub fn probe_sup(&self, probes: &[Vec<f64>]) -> f64 {
        self.functions
            .iter()
            .flat_map(|f| probes.iter().map(move |p| f.eval(p).abs()))
            .fold(0.0, f64::max)
    }

    /// `mu(phi_k)` for every member, using the first `dim` coordinates of
    /// each particle. `normalized` selects `pi` (weights summing to one)
    /// or `rho` (weights times the total mass).
    pub fn integrals(&self, ens: &ParticleEnsemble, normalized: bool) -> Vec<f64> {
        assert!(ens.dim >= self.dim, "ensemble dimension {} < dictionary dimension {}", ens.dim, self.dim);
        let mut w = ens.weights();
        if !normalized {
            let mass = ens.total_mass();
            w.iter_mut().for_each(|v| *v *= mass);
        }
        self.functions
            .iter()
            .map(|f| {
                w.iter()
                    .enumerate()
                    .map(|(i, wi)| wi * f.eval(&ens.state(i)[..self.dim]))
                    .sum()
            })
            .collect()
    }
}

/// The signed measure `mu - nu`, integrated against the dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDifference {
    /// `(mu - nu)(phi_k)` per dictionary member.
    pub values: Vec<f64>,
}

impl SignedDifference {
    pub fn new(mu: &ParticleEnsemble, nu: &ParticleEnsemble, dict: &TestDictionary, normalized: bool) -> Self {
        let a = dict.integrals(mu, normalized);
        let b = dict.integrals(nu, normalized);
        SignedDifference { values: a.iter().zip(&b).map(|(x, y)| x - y).collect() }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// `max_k |pi_mu(phi_k) - pi_nu(phi_k)|` over normalized measures.
pub fn bl_distance(mu: &ParticleEnsemble, nu: &ParticleEnsemble, dict: &TestDictionary) -> f64 {
    SignedDifference::new(mu, nu, dict, true).sup_norm()
}

/// Same as [`bl_distance`] on the unnormalized measures, not capped.
pub fn unnormalized_distance(mu: &ParticleEnsemble, nu: &ParticleEnsemble, dict: &TestDictionary) -> f64 {
    SignedDifference::new(mu, nu, dict, false).sup_norm()
}

fn sup_over_path(
    p: &MeasurePath,
    q: &MeasurePath,
    mut dist: impl FnMut(&ParticleEnsemble, &ParticleEnsemble) -> f64,
) -> Result<f64> {
    let (a, b) = (p.ensembles()?, q.ensembles()?);
    if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.t != y.t) {
        return Err(Error::GridMismatch);
    }
    Ok(a.iter().zip(&b).map(|(x, y)| dist(x, y)).fold(0.0, f64::max))
}

/// `1 ∧ max_t bl_distance(p_t, q_t)` over the recorded times.
pub fn path_distance(p: &MeasurePath, q: &MeasurePath, dict: &TestDictionary) -> Result<f64> {
    Ok(sup_over_path(p, q, |x, y| bl_distance(x, y, dict))?.min(1.0))
}

/// `max_t` of [`unnormalized_distance`], uncapped.
pub fn unnormalized_path_distance(p: &MeasurePath, q: &MeasurePath, dict: &TestDictionary) -> Result<f64> {
    sup_over_path(p, q, |x, y| unnormalized_distance(x, y, dict))
}

/// Per-replication values whose summary does not depend on the order in
/// which they were collected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicationStats {
    values: Vec<f64>,
}

impl ReplicationStats {
    pub fn push(&mut self, v: f64) {
        self.values.push(v);
    }

    pub fn merge(&mut self, other: &ReplicationStats) {
        self.values.extend_from_slice(&other.values);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mean and standard error, summed in sorted order.
    pub fn mean_se(&self) -> (f64, f64) {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return (mean, 0.0);
        }
        let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
        dev.sort_by(f64::total_cmp);
        let var = dev.iter().sum::<f64>() / (n - 1) as f64;
        (mean, (var / n as f64).sqrt())
    }
}

impl FromIterator<f64> for ReplicationStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        ReplicationStats { values: iter.into_iter().collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSettings {
    /// Strictly decreasing, in `(0, 1]`.
    pub eps_list: Vec<f64>,
    pub replications: usize,
    pub horizon: f64,
    /// `dt = dt_factor * eps^2`.
    pub dt_factor: f64,
    pub filter: FilterOptions,
    /// Spacing of the times at which the filters are compared; `None`
    /// compares at every grid time.
    pub record_dt: Option<f64>,
    pub dictionary_size: usize,
    pub dictionary_seed: u64,
    pub seed: u64,
}

impl Default for ConvergenceSettings {
    fn default() -> Self {
        ConvergenceSettings {
            eps_list: vec![0.5, 0.35, 0.25, 0.18, 0.125],
            replications: 50,
            horizon: 1.0,
            dt_factor: crate::sde::DEFAULT_DT_FACTOR,
            filter: FilterOptions { particles: 2000, ..Default::default() },
            record_dt: Some(0.05),
            dictionary_size: DEFAULT_DICTIONARY_SIZE,
            dictionary_seed: 7,
            seed: 1,
        }
    }
}

impl ConvergenceSettings {
    pub fn validate(&self) -> Result<()> {
        if self.eps_list.is_empty() {
            return Err(Error::Config("eps_list must not be empty".into()));
        }
        if self.eps_list.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(Error::Config("eps_list entries must lie in (0, 1]".into()));
        }
        if self.eps_list.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config("eps_list must be strictly decreasing".into()));
        }
        if self.replications == 0 || self.filter.particles == 0 {
            return Err(Error::Config("replications and particles must be >= 1".into()));
        }
        if !(self.horizon > 0.0) || !(self.dt_factor > 0.0) {
            return Err(Error::Config("horizon and dt_factor must be > 0".into()));
        }
        if self.dictionary_size < MIN_DICTIONARY_SIZE {
            return Err(Error::Config(format!("dictionary_size must be >= {MIN_DICTIONARY_SIZE}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub mean_dnorm: f64,
    pub se_dnorm: f64,
    pub mean_dunnorm: f64,
    pub se_dunnorm: f64,
    /// Replications attempted.
    pub replications: usize,
    pub failures: usize,
    pub dnorm: ReplicationStats,
    pub dunnorm: ReplicationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub model: String,
    pub eps_list: Vec<f64>,
    pub rows: Vec<ConvergenceRow>,
    pub dictionary_seed: u64,
    pub dictionary_size: usize,
    pub runtime_secs: f64,
}

impl ConvergenceReport {
    /// `eps,mean_dnorm,se_dnorm,mean_dunnorm,se_dunnorm,R,failures`.
    pub fn write_csv<W: Write>(&self, mut out: W, provenance: Option<&str>) -> Result<()> {
        if let Some(p) = provenance {
            writeln!(out, "# {p}")?;
        }
        writeln!(out, "eps,mean_dnorm,se_dnorm,mean_dunnorm,se_dunnorm,R,failures")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                fmt_g17(r.eps),
                fmt_g17(r.mean_dnorm),
                fmt_g17(r.se_dnorm),
                fmt_g17(r.mean_dunnorm),
                fmt_g17(r.se_dunnorm),
                r.replications,
                r.failures
            )?;
        }
        Ok(())
    }
}

struct Replication {
    dnorm: f64,
    dunnorm: f64,
}

fn replicate(
    model: &MultiscaleModel,
    avg: &AveragedModel,
    eps: f64,
    settings: &ConvergenceSettings,
    dict: &TestDictionary,
    r: usize,
) -> Result<Replication> {
    let root = RootSeed(settings.seed);
    let dt = settings.dt_factor * eps * eps;
    let sim = SimulationOptions { dt_factor: settings.dt_factor, ..Default::default() };
    let truth = simulate_multiscale(model, eps, dt, settings.horizon, root.derive("truth", r as u64), &sim)?;
    let obs = truth.observation();
    let mut opts = settings.filter.clone();
    opts.dt_factor = settings.dt_factor;
    opts.keep_fast = false;
    if let Some(rec) = settings.record_dt {
        opts.record_stride = (rec / obs.dt(0)).round().max(1.0) as usize;
    }
    // Both filters draw their initial states and slow noise from the same streams.
    let fseed = root.derive("filter", r as u64);
    let full = particle_filter_full(model, eps, &obs, &opts, fseed)?;
    let reduced = particle_filter_averaged(avg, &obs, &opts, fseed)?;
    Ok(Replication {
        dnorm: path_distance(&full.path, &reduced.path, dict)?,
        dunnorm: unnormalized_path_distance(&full.path, &reduced.path, dict)?,
    })
}

/// For every `eps` and replication: simulate a truth path, run the full and
/// averaged filters on its observation, and record
/// `D_norm = 1 ∧ sup_t d(pi_eps, pi_0)` and `D_unnorm = sup_t d(rho_eps, rho_0)`.
///
/// Replication `r` uses the same truth seed at every `eps`. Failed
/// replications are counted and excluded from the averages.
pub fn convergence_experiment(
    model: &MultiscaleModel,
    avg: &AveragedModel,
    settings: &ConvergenceSettings,
) -> Result<ConvergenceReport> {
    settings.validate()?;
    let start = Instant::now();
    let dict = TestDictionary::seeded(model.dims.m, settings.dictionary_size, settings.dictionary_seed)?;
    // Fail fast on a bad horizon/step combination before fanning out.
    uniform_grid(settings.horizon, settings.dt_factor * settings.eps_list[0].powi(2))?;
    let mut rows = Vec::with_capacity(settings.eps_list.len());
    for &eps in &settings.eps_list {
        let results: Vec<Result<Replication>> = (0..settings.replications)
            .into_par_iter()
            .map(|r| replicate(model, avg, eps, settings, &dict, r))
            .collect();
        let mut dnorm = ReplicationStats::default();
        let mut dunnorm = ReplicationStats::default();
        let mut failures = 0;
        for (r, res) in results.into_iter().enumerate() {
            match res {
                Ok(rep) => {
                    dnorm.push(rep.dnorm);
                    dunnorm.push(rep.dunnorm);
                }
                Err(e) => {
                    log::warn!("eps = {eps}, replication {r}: {e}");
                    failures += 1;
                }
            }
        }
        let (mean_dnorm, se_dnorm) = dnorm.mean_se();
        let (mean_dunnorm, se_dunnorm) = dunnorm.mean_se();
        log::info!("eps = {eps}: D_norm = {mean_dnorm:.4} +- {se_dnorm:.4}, failures = {failures}");
        rows.push(ConvergenceRow {
            eps,
            mean_dnorm,
            se_dnorm,
            mean_dunnorm,
            se_dunnorm,
            replications: settings.replications,
            failures,
            dnorm,
            dunnorm,
        });
    }
    Ok(ConvergenceReport {
        model: model.name.clone(),
        eps_list: settings.eps_list.clone(),
        rows,
        dictionary_seed: settings.dictionary_seed,
        dictionary_size: settings.dictionary_size,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}
