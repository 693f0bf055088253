use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stationary::{check_centering, estimate_stationary, SamplerParams, StationaryEstimate};
use super::{mean_and_se, FrozenStepper};
use crate::error::{Error, Result, Warning};
use crate::linalg::norm;
use crate::rng::{fill_normal, RootSeed, StreamRng};
use crate::sde::MultiscaleModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonParams {
    pub sampler: SamplerParams,
    /// Euler step of the frozen-fast paths and the quadrature step.
    pub dt: f64,
    /// Semigroup truncation horizon; `None` picks a multiple of the mixing time.
    pub t_max: Option<f64>,
    pub mixing_multiple: f64,
    pub t_max_bounds: (f64, f64),
    /// Paths (in antithetic pairs) per pointwise evaluation of `u`.
    pub n_paths: usize,
    /// Relative finite-difference step in `x`: `dx = dx_rel (1 + |x|)`.
    pub dx_rel: f64,
    pub truncation_tol: f64,
    /// Reject `b_I` whose sample average exceeds this many standard errors.
    pub centering_sigmas: f64,
}

impl Default for PoissonParams {
    fn default() -> Self {
        PoissonParams {
            sampler: SamplerParams::default(),
            dt: 0.01,
            t_max: None,
            mixing_multiple: 20.0,
            t_max_bounds: (1.0, 200.0),
            n_paths: 64,
            dx_rel: 1e-3,
            truncation_tol: 0.02,
            centering_sigmas: 5.0,
        }
    }
}

/// Solution of `G_F u = -b_I` at a frozen slow state, normalized so that
/// `u` averages to zero under the invariant law.
///
/// Pointwise values come from `u(x, z) = int_0^t_max T_s(b_I(x, .))(z) ds`,
/// evaluated with a fixed set of antithetic path pairs shared across all `z`
/// and all shifted `x` (common random numbers), so `u` is smooth in both.
#[derive(Debug, Clone)]
pub struct CellProblemSolution {
    pub x: Vec<f64>,
    pub t_max: f64,
    pub mc_paths: usize,
    pub dt: f64,
    /// Finite-difference step used for the `x`-gradient.
    pub dx: f64,
    /// Invariant-law average of the raw integral at `x`, already subtracted.
    pub centering: Vec<f64>,
    pub stationary: StationaryEstimate,
    /// Centered `u(x, z_j)` at each stationary sample, `n_samples x m`.
    pub sample_u: Vec<f64>,
    /// `grad_x u(x, z_j)` at each stationary sample, `n_samples x (m x m)` row-major
    /// with entry `(i, k) = d u_i / d x_k`.
    pub sample_grad: Vec<f64>,
    pub warnings: Vec<Warning>,
    trivial: bool,
    /// `(c(x + dx e_k), c(x - dx e_k))` per direction.
    shifted_centering: Vec<(Vec<f64>, Vec<f64>)>,
    model: MultiscaleModel,
    seed: RootSeed,
}

struct PathScratch {
    stepper: FrozenStepper,
    zp: Vec<f64>,
    zm: Vec<f64>,
    buf: Vec<f64>,
}

impl PathScratch {
    fn new(model: &MultiscaleModel) -> Self {
        PathScratch {
            stepper: FrozenStepper::new(model),
            zp: vec![0.0; model.dims.n],
            zm: vec![0.0; model.dims.n],
            buf: vec![0.0; model.dims.m],
        }
    }
}

/// Trapezoidal `int_0^{steps h} b_I(x, Z_s) ds` averaged over one antithetic
/// pair started at `z0`. Writes the integral into `acc` and the pair-averaged
/// `b_I(x, Z_{t_max})` into `tail`.
fn pair_integral(
    model: &MultiscaleModel,
    x: &[f64],
    z0: &[f64],
    steps: usize,
    h: f64,
    rng: &mut StreamRng,
    s: &mut PathScratch,
    acc: &mut [f64],
    tail: &mut [f64],
) {
    let m = acc.len();
    let sq = h.sqrt();
    s.zp.copy_from_slice(z0);
    s.zm.copy_from_slice(z0);
    model.intermediate_drift(x, z0, &mut s.buf);
    for i in 0..m {
        acc[i] = 0.5 * s.buf[i];
    }
    for k in 1..=steps {
        fill_normal(rng, sq, &mut s.stepper.dv);
        s.stepper.step(model, x, &mut s.zp, h, 1.0);
        s.stepper.step(model, x, &mut s.zm, h, -1.0);
        let w = if k == steps { 0.25 } else { 0.5 };
        model.intermediate_drift(x, &s.zp, &mut s.buf);
        for i in 0..m {
            acc[i] += w * s.buf[i];
            if k == steps {
                tail[i] = 0.5 * s.buf[i];
            }
        }
        model.intermediate_drift(x, &s.zm, &mut s.buf);
        for i in 0..m {
            acc[i] += w * s.buf[i];
            if k == steps {
                tail[i] += 0.5 * s.buf[i];
            }
        }
    }
    for a in acc.iter_mut() {
        *a *= h;
    }
}

fn shifted_points(x: &[f64], dx: f64) -> Vec<Vec<f64>> {
    let m = x.len();
    let mut pts = vec![x.to_vec()];
    for k in 0..m {
        let mut p = x.to_vec();
        p[k] += dx;
        pts.push(p);
        let mut q = x.to_vec();
        q[k] -= dx;
        pts.push(q);
    }
    pts
}

fn choose_t_max(model: &MultiscaleModel, x: &[f64], stat: &StationaryEstimate, params: &PoissonParams) -> f64 {
    if let Some(t) = params.t_max {
        return t;
    }
    let m = model.dims.m;
    let mut buf = vec![0.0; m];
    let mut series = vec![Vec::with_capacity(stat.len()); m];
    for j in 0..stat.len() {
        model.intermediate_drift(x, stat.sample(j), &mut buf);
        for i in 0..m {
            series[i].push(buf[i]);
        }
    }
    let mut tau = series
        .iter()
        .filter_map(|s| stat.decorrelation_time(s))
        .fold(0.0_f64, f64::max);
    if tau == 0.0 {
        tau = (0..stat.n)
            .filter_map(|i| {
                let comp: Vec<f64> = (0..stat.len()).map(|j| stat.sample(j)[i]).collect();
                stat.decorrelation_time(&comp)
            })
            .fold(0.0_f64, f64::max);
    }
    let (lo, hi) = params.t_max_bounds;
    (params.mixing_multiple * tau).clamp(lo, hi)
}

/// Solves the cell problem at slow state `x`.
pub fn solve_poisson(
    model: &MultiscaleModel,
    x: &[f64],
    params: &PoissonParams,
    seed: RootSeed,
) -> Result<CellProblemSolution> {
    if !model.flags.centered_intermediate {
        return Err(Error::InvalidArgument(format!(
            "model {:?} does not declare a centered intermediate drift",
            model.name
        )));
    }
    let m = model.dims.m;
    let stat = estimate_stationary(model, x, &params.sampler, seed.derive("stationary", 0))?;
    let centering_check = check_centering(model, x, &stat);
    if !centering_check.is_centered(params.centering_sigmas) {
        return Err(Error::NotCentered {
            x: x.to_vec(),
            residual: centering_check.residual,
            stderr: centering_check.stderr,
        });
    }
    let mut warnings = stat.warnings.clone();
    let dx = params.dx_rel * (1.0 + norm(x));
    let ns = stat.len();

    let mut buf = vec![0.0; m];
    let trivial = (0..ns).all(|j| {
        model.intermediate_drift(x, stat.sample(j), &mut buf);
        buf.iter().all(|v| *v == 0.0)
    });
    if trivial {
        return Ok(CellProblemSolution {
            x: x.to_vec(),
            t_max: 0.0,
            mc_paths: 0,
            dt: params.dt,
            dx,
            centering: vec![0.0; m],
            sample_u: vec![0.0; ns * m],
            sample_grad: vec![0.0; ns * m * m],
            stationary: stat,
            warnings,
            trivial: true,
            shifted_centering: vec![(vec![0.0; m], vec![0.0; m]); m],
            model: model.clone(),
            seed,
        });
    }

    let t_max = choose_t_max(model, x, &stat, params);
    let steps = (t_max / params.dt).ceil().max(1.0) as usize;
    let h = t_max / steps as f64;
    let points = shifted_points(x, dx);
    let np = points.len();

    // One antithetic pair per stationary sample, the same noise for every shifted x.
    let raw: Vec<f64> = (0..ns)
        .into_par_iter()
        .with_min_len(16)
        .map_init(
            || (PathScratch::new(model), vec![0.0; m]),
            |(scratch, tail), j| {
                let mut out = vec![0.0; np * m];
                for (s, p) in points.iter().enumerate() {
                    let mut rng = seed.stream("poisson-sample", j as u64);
                    pair_integral(
                        model,
                        p,
                        stat.sample(j),
                        steps,
                        h,
                        &mut rng,
                        scratch,
                        &mut out[s * m..(s + 1) * m],
                        tail,
                    );
                }
                out
            },
        )
        .flatten_iter()
        .collect();

    let consts: Vec<Vec<f64>> = (0..np)
        .map(|s| {
            (0..m)
                .map(|i| (0..ns).map(|j| raw[(j * np + s) * m + i]).sum::<f64>() / ns as f64)
                .collect()
        })
        .collect();

    let mut sample_u = vec![0.0; ns * m];
    let mut sample_grad = vec![0.0; ns * m * m];
    for j in 0..ns {
        let base = j * np * m;
        for i in 0..m {
            sample_u[j * m + i] = raw[base + i] - consts[0][i];
            for k in 0..m {
                let plus = raw[base + (1 + 2 * k) * m + i] - consts[1 + 2 * k][i];
                let minus = raw[base + (2 + 2 * k) * m + i] - consts[2 + 2 * k][i];
                sample_grad[j * m * m + i * m + k] = (plus - minus) / (2.0 * dx);
            }
        }
    }
    let shifted_centering = (0..m)
        .map(|k| (consts[1 + 2 * k].clone(), consts[2 + 2 * k].clone()))
        .collect();

    let solution = CellProblemSolution {
        x: x.to_vec(),
        t_max,
        mc_paths: 2 * params.n_paths.div_ceil(2),
        dt: h,
        dx,
        centering: consts[0].clone(),
        sample_u,
        sample_grad,
        stationary: stat,
        warnings: Vec::new(),
        trivial: false,
        shifted_centering,
        model: model.clone(),
        seed,
    };

    // Tail of the semigroup at the truncation horizon, at a few typical z.
    for q in 0..4 {
        let z = solution.stationary.sample(q * ns / 4).to_vec();
        let (_, _, tail, tail_se) = solution.crn_integral(x, &z);
        let worst = tail
            .iter()
            .zip(&tail_se)
            .map(|(t, s)| (t.abs() - 3.0 * s).max(0.0))
            .fold(0.0, f64::max);
        if worst > params.truncation_tol {
            let w = Warning::Truncation { tail: worst, tol: params.truncation_tol };
            log::warn!("x = {x:?}: {w}");
            warnings.push(w);
            break;
        }
    }
    Ok(CellProblemSolution { warnings, ..solution })
}

impl CellProblemSolution {
    /// Uncentered integral at `(x', z)` over the shared path pairs: mean and
    /// stderr of the integral, then of the tail `b_I(x', Z_{t_max})`.
    fn crn_integral(&self, xp: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = self.model.dims.m;
        let pairs = (self.mc_paths / 2).max(1);
        let steps = (self.t_max / self.dt).round().max(1.0) as usize;
        let per_pair: Vec<(Vec<f64>, Vec<f64>)> = (0..pairs)
            .into_par_iter()
            .map_init(
                || PathScratch::new(&self.model),
                |scratch, p| {
                    let mut rng = self.seed.stream("poisson-eval", p as u64);
                    let mut acc = vec![0.0; m];
                    let mut tail = vec![0.0; m];
                    pair_integral(&self.model, xp, z, steps, self.dt, &mut rng, scratch, &mut acc, &mut tail);
                    (acc, tail)
                },
            )
            .collect();
        let mut mean = vec![0.0; m];
        let mut se = vec![0.0; m];
        let mut tmean = vec![0.0; m];
        let mut tse = vec![0.0; m];
        for i in 0..m {
            let vals: Vec<f64> = per_pair.iter().map(|(a, _)| a[i]).collect();
            (mean[i], se[i]) = mean_and_se(&vals, pairs as f64);
            let tails: Vec<f64> = per_pair.iter().map(|(_, t)| t[i]).collect();
            (tmean[i], tse[i]) = mean_and_se(&tails, pairs as f64);
        }
        (mean, se, tmean, tse)
    }

    /// `u(x, z)` and its Monte Carlo standard error (centering constant held fixed).
    pub fn evaluate_with_se(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.model.dims.m;
        if self.trivial {
            return (vec![0.0; m], vec![0.0; m]);
        }
        let (mean, se, _, _) = self.crn_integral(&self.x, z);
        let u = mean.iter().zip(&self.centering).map(|(a, c)| a - c).collect();
        (u, se)
    }

    pub fn evaluate(&self, z: &[f64]) -> Vec<f64> {
        self.evaluate_with_se(z).0
    }

    /// `grad_x u(x, z)` by central differences with common random numbers;
    /// entry `(i, k) = d u_i / d x_k`.
    pub fn evaluate_dx(&self, z: &[f64]) -> DMatrix<f64> {
        let m = self.model.dims.m;
        let mut out = DMatrix::zeros(m, m);
        if self.trivial {
            return out;
        }
        for k in 0..m {
            let mut xp = self.x.clone();
            xp[k] += self.dx;
            let mut xm = self.x.clone();
            xm[k] -= self.dx;
            let (up, _, _, _) = self.crn_integral(&xp, z);
            let (um, _, _, _) = self.crn_integral(&xm, z);
            let (cp, cm) = &self.shifted_centering[k];
            for i in 0..m {
                out[(i, k)] = ((up[i] - cp[i]) - (um[i] - cm[i])) / (2.0 * self.dx);
            }
        }
        out
    }

    /// `G_F u(x, z) + b_I(x, z)` with central differences of step `hz` in `z`.
    pub fn generator_residual(&self, z: &[f64], hz: f64) -> Vec<f64> {
        let (m, n, v) = (self.model.dims.m, self.model.dims.n, self.model.dims.v);
        let x = &self.x;
        let at = |dz: &[(usize, f64)]| {
            let mut p = z.to_vec();
            for &(a, s) in dz {
                p[a] += s;
            }
            self.evaluate(&p)
        };
        let mut f = vec![0.0; n];
        let mut g = vec![0.0; n * v];
        self.model.fast_drift(x, z, &mut f);
        self.model.fast_dispersion(x, z, &mut g);
        let gm = crate::linalg::from_row_major(n, v, &g);
        let diff = &gm * gm.transpose();
        let u0 = at(&[]);
        let mut out = vec![0.0; m];
        self.model.intermediate_drift(x, z, &mut out);
        for a in 0..n {
            let up = at(&[(a, hz)]);
            let um = at(&[(a, -hz)]);
            for i in 0..m {
                out[i] += f[a] * (up[i] - um[i]) / (2.0 * hz);
                out[i] += 0.5 * diff[(a, a)] * (up[i] - 2.0 * u0[i] + um[i]) / (hz * hz);
            }
            for b in 0..n {
                if b == a || diff[(a, b)] == 0.0 {
                    continue;
                }
                let pp = at(&[(a, hz), (b, hz)]);
                let pm = at(&[(a, hz), (b, -hz)]);
                let mp = at(&[(a, -hz), (b, hz)]);
                let mm = at(&[(a, -hz), (b, -hz)]);
                for i in 0..m {
                    out[i] += 0.5 * diff[(a, b)] * (pp[i] - pm[i] - mp[i] + mm[i]) / (4.0 * hz * hz);
                }
            }
        }
        out
    }
}
