use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_and_se, FrozenStepper};
use crate::error::{Error, Result, Warning};
use crate::linalg::{self, dot, norm};
use crate::rng::{fill_normal, RootSeed};
use crate::sde::MultiscaleModel;

/// Long-run sampler settings for the frozen-fast chain. Times are in the
/// fast (eps-free) clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub dt: f64,
    pub burn_in: f64,
    pub n_samples: usize,
    /// Time between retained samples.
    pub thinning: f64,
    pub ess_floor: f64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            dt: 0.01,
            burn_in: 10.0,
            n_samples: 2000,
            thinning: 0.5,
            ess_floor: 100.0,
        }
    }
}

/// Draws approximating the frozen-fast invariant law at a slow state.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryEstimate {
    pub x: Vec<f64>,
    pub n: usize,
    /// `n_samples x n`, row-major.
    pub samples: Vec<f64>,
    pub params: SamplerParams,
    /// Smallest per-component effective sample size.
    pub ess: f64,
    pub warnings: Vec<Warning>,
}

impl StationaryEstimate {
    pub fn len(&self) -> usize {
        self.params.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.params.n_samples == 0
    }

    pub fn sample(&self, j: usize) -> &[f64] {
        &self.samples[j * self.n..(j + 1) * self.n]
    }

    /// Mean of `phi` under the sample measure, with an ESS-based standard error.
    pub fn average(&self, phi: impl Fn(&[f64]) -> f64) -> (f64, f64) {
        let vals: Vec<f64> = (0..self.len()).map(|j| phi(self.sample(j))).collect();
        mean_and_se(&vals, self.ess)
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.average(|z| z[i]).0).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        (0..self.n)
            .map(|i| self.average(|z| (z[i] - mean[i]).powi(2)).0)
            .collect()
    }

    /// Time (fast clock) for the autocorrelation of `series` to fall below
    /// `1/e`, interpolated between retained samples.
    pub(crate) fn decorrelation_time(&self, series: &[f64]) -> Option<f64> {
        let lags = autocorrelation(series, series.len() / 4);
        if lags.is_empty() {
            return None;
        }
        let target = (-1.0_f64).exp();
        let mut prev = 1.0;
        for (l, &r) in lags.iter().enumerate() {
            if r < target {
                let frac = (prev - target) / (prev - r);
                return Some((l as f64 + frac) * self.params.thinning);
            }
            prev = r;
        }
        Some(lags.len() as f64 * self.params.thinning)
    }
}

/// Autocorrelations at lags `1..=max_lag`; empty for a constant series.
fn autocorrelation(series: &[f64], max_lag: usize) -> Vec<f64> {
    let n = series.len();
    if n < 2 {
        return Vec::new();
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0 = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return Vec::new();
    }
    (1..=max_lag.min(n - 1))
        .map(|l| {
            let c: f64 = (0..n - l)
                .map(|i| (series[i] - mean) * (series[i + l] - mean))
                .sum::<f64>()
                / n as f64;
            c / c0
        })
        .collect()
}

/// `n / (1 + 2 sum rho_k)`, summing lags until the correlation drops below 0.05.
fn effective_sample_size(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    let acf = autocorrelation(series, series.len() / 2);
    if acf.is_empty() {
        return n;
    }
    let mut tau = 1.0;
    for r in acf {
        if r < 0.05 {
            break;
        }
        tau += 2.0 * r;
    }
    n / tau
}

/// Samples the frozen-fast invariant law at `x` from one long trajectory.
pub fn estimate_stationary(
    model: &MultiscaleModel,
    x: &[f64],
    params: &SamplerParams,
    seed: RootSeed,
) -> Result<StationaryEstimate> {
    if x.len() != model.dims.m {
        return Err(Error::Dimension(format!("x has length {}, model m = {}", x.len(), model.dims.m)));
    }
    if params.n_samples == 0 || !(params.dt > 0.0) || !(params.thinning > 0.0) || params.burn_in < 0.0 {
        return Err(Error::InvalidArgument(
            "sampler needs n_samples >= 1, dt > 0, thinning > 0, burn_in >= 0".into(),
        ));
    }
    let n = model.dims.n;
    let mut rng = seed.stream("stationary-chain", 0);
    let mut z = vec![0.0; n];
    model.init.sample_z(&mut rng, &mut z);
    let mut stepper = FrozenStepper::new(model);
    let h = params.dt;
    let sq = h.sqrt();
    let burn = (params.burn_in / h).ceil() as usize;
    let thin = ((params.thinning / h).round() as usize).max(1);
    for _ in 0..burn {
        fill_normal(&mut rng, sq, &mut stepper.dv);
        stepper.step(model, x, &mut z, h, 1.0);
    }
    let mut samples = Vec::with_capacity(params.n_samples * n);
    for _ in 0..params.n_samples {
        for _ in 0..thin {
            fill_normal(&mut rng, sq, &mut stepper.dv);
            stepper.step(model, x, &mut z, h, 1.0);
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalBlowup { t: f64::NAN, norm: norm(&z) });
        }
        samples.extend_from_slice(&z);
    }
    let ess = (0..n)
        .map(|i| {
            let comp: Vec<f64> = (0..params.n_samples).map(|j| samples[j * n + i]).collect();
            effective_sample_size(&comp)
        })
        .fold(params.n_samples as f64, f64::min);
    let mut warnings = Vec::new();
    if ess < params.ess_floor {
        let w = Warning::Ergodicity { ess, floor: params.ess_floor };
        log::warn!("x = {x:?}: {w}");
        warnings.push(w);
    }
    Ok(StationaryEstimate {
        x: x.to_vec(),
        n,
        samples,
        params: *params,
        ess,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemigroupParams {
    pub dt: f64,
    /// Pair each path with its mirror driven by `-dV`.
    pub antithetic: bool,
}

impl Default for SemigroupParams {
    fn default() -> Self {
        SemigroupParams { dt: 0.002, antithetic: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemigroupEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

/// Monte Carlo estimate of `T_t(phi)(z) = E[phi(Z^x_t) | Z^x_0 = z]`.
pub fn semigroup_mc(
    model: &MultiscaleModel,
    x: &[f64],
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    t: f64,
    z: &[f64],
    n_paths: usize,
    params: &SemigroupParams,
    seed: RootSeed,
) -> Result<SemigroupEstimate> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("semigroup time must be >= 0, got {t}")));
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    if z.len() != model.dims.n || x.len() != model.dims.m {
        return Err(Error::Dimension("semigroup start point has wrong dimension".into()));
    }
    if t == 0.0 {
        return Ok(SemigroupEstimate { mean: phi(z), stderr: 0.0, n_paths });
    }
    let steps = (t / params.dt).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let sq = h.sqrt();
    let units = if params.antithetic { n_paths.div_ceil(2) } else { n_paths };
    let values: Vec<f64> = (0..units)
        .into_par_iter()
        .with_min_len(64)
        .map_init(
            || (FrozenStepper::new(model), vec![0.0; z.len()], vec![0.0; z.len()]),
            |(stepper, zp, zm), p| {
                let mut rng = seed.stream("semigroup", p as u64);
                zp.copy_from_slice(z);
                zm.copy_from_slice(z);
                for _ in 0..steps {
                    fill_normal(&mut rng, sq, &mut stepper.dv);
                    stepper.step(model, x, zp, h, 1.0);
                    if params.antithetic {
                        stepper.step(model, x, zm, h, -1.0);
                    }
                }
                if params.antithetic {
                    0.5 * (phi(zp) + phi(zm))
                } else {
                    phi(zp)
                }
            },
        )
        .collect();
    let (mean, stderr) = mean_and_se(&values, values.len() as f64);
    let n_paths = if params.antithetic { 2 * units } else { units };
    Ok(SemigroupEstimate { mean, stderr, n_paths })
}

/// Sample average of `b_I(x, .)` under the invariant law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringCheck {
    pub residual: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl CenteringCheck {
    /// Every component within `k` standard errors of zero (plus a round-off floor).
    pub fn is_centered(&self, k: f64) -> bool {
        self.residual
            .iter()
            .zip(&self.stderr)
            .all(|(r, s)| r.abs() <= k * s + 1e-12)
    }
}

pub fn check_centering(model: &MultiscaleModel, x: &[f64], stat: &StationaryEstimate) -> CenteringCheck {
    let m = model.dims.m;
    let mut buf = vec![0.0; m];
    let mut comps = vec![Vec::with_capacity(stat.len()); m];
    for j in 0..stat.len() {
        model.intermediate_drift(x, stat.sample(j), &mut buf);
        for i in 0..m {
            comps[i].push(buf[i]);
        }
    }
    let (residual, stderr) = comps.iter().map(|c| mean_and_se(c, stat.ess)).unzip();
    CenteringCheck { residual, stderr }
}

/// Probe points for the recurrence/ellipticity diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionProbes {
    pub points: Vec<(Vec<f64>, Vec<f64>)>,
    /// Only probes with `|z| > radius` enter the recurrence margin.
    pub radius: f64,
    /// Growth exponent in `<f, z> <= -C |z|^exponent`.
    pub exponent: f64,
}

impl AssumptionProbes {
    /// Half the probes at large `|z|` in random directions, half near the origin.
    pub fn random(model: &MultiscaleModel, count: usize, seed: RootSeed) -> Self {
        let (m, n) = (model.dims.m, model.dims.n);
        let radius = 3.0;
        let mut rng = seed.stream("assumption-probes", 0);
        let mut points = Vec::with_capacity(count);
        for k in 0..count {
            let mut x = vec![0.0; m];
            let mut z = vec![0.0; n];
            fill_normal(&mut rng, 2.0, &mut x);
            fill_normal(&mut rng, 1.0, &mut z);
            if k % 2 == 0 && n > 0 {
                let len = norm(&z).max(1e-12);
                let r = radius * (1.0 + 9.0 * rand::Rng::random::<f64>(&mut rng));
                z.iter_mut().for_each(|v| *v *= r / len);
            }
            points.push((x, z));
        }
        AssumptionProbes { points, radius, exponent: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `min -<f(x,z), z> / |z|^exponent` over probes beyond the radius.
    pub recurrence_margin: f64,
    pub recurrence_ok: bool,
    /// Smallest and largest eigenvalue of `g g^T` over all probes.
    pub ellipticity_lambda: f64,
    pub ellipticity_cap: f64,
    pub ellipticity_ok: bool,
    pub probes: usize,
}

impl std::fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "recurrence (H_f): margin = {:.6} [{}]",
            self.recurrence_margin,
            if self.recurrence_ok { "ok" } else { "VIOLATED" }
        )?;
        write!(
            f,
            "ellipticity (H_g): lambda = {:.6}, Lambda = {:.6} [{}]",
            self.ellipticity_lambda,
            self.ellipticity_cap,
            if self.ellipticity_ok { "ok" } else { "VIOLATED" }
        )
    }
}

/// Advisory checks of the recurrence and uniform-ellipticity conditions on
/// the fast coefficients. Never fails.
pub fn check_assumptions(model: &MultiscaleModel, probes: &AssumptionProbes) -> AssumptionReport {
    let (n, v) = (model.dims.n, model.dims.v);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n * v];
    let mut margin = f64::INFINITY;
    let mut lam = f64::INFINITY;
    let mut cap = f64::NEG_INFINITY;
    for (x, z) in &probes.points {
        let r = norm(z);
        if r > probes.radius {
            model.fast_drift(x, z, &mut f);
            margin = margin.min(-dot(&f, z) / r.powf(probes.exponent));
        }
        model.fast_dispersion(x, z, &mut g);
        let gm = linalg::from_row_major(n, v, &g);
        let (lo, hi) = linalg::eigen_range(&(&gm * gm.transpose()));
        lam = lam.min(lo);
        cap = cap.max(hi);
    }
    AssumptionReport {
        recurrence_margin: margin,
        recurrence_ok: margin > 0.0 && margin.is_finite(),
        ellipticity_lambda: lam,
        ellipticity_cap: cap,
        ellipticity_ok: lam > 0.0 && cap.is_finite(),
        probes: probes.points.len(),
    }
}
