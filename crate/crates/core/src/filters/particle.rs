use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ensemble::ParticleEnsemble;
use super::{FilterKind, MeasureEntry, MeasurePath};
use crate::cell::{AveragedCoefficients, AveragedModel};
use crate::error::{Error, Result};
use crate::io::fmt_g17;
use crate::linalg::{dot, gemv_acc};
use crate::rng::{fill_normal, RootSeed, StreamRng};
use crate::sde::{check_step, MultiscaleModel, ObservationPath, DEFAULT_BLOWUP_GUARD, DEFAULT_DT_FACTOR};

/// Version tag written at the start of ensemble dumps.
pub const PF_DUMP_TAG: &[u8; 8] = b"pf-v1\0\0\0";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ResamplePolicy {
    Never,
    /// Systematic resampling when ESS falls below `threshold * N`.
    Systematic { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOptions {
    pub particles: usize,
    pub resample: ResamplePolicy,
    /// Record every `record_stride`-th grid time (plus the first and last).
    pub record_stride: usize,
    /// Keep fast components in recorded full-filter ensembles.
    pub keep_fast: bool,
    pub dt_factor: f64,
    pub blowup_guard: f64,
    /// Weight collapse is reported after this many consecutive steps with
    /// max normalized weight above `1 - 1e-9`.
    pub collapse_patience: usize,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            particles: 1000,
            resample: ResamplePolicy::Systematic { threshold: 0.5 },
            record_stride: 1,
            keep_fast: false,
            dt_factor: DEFAULT_DT_FACTOR,
            blowup_guard: DEFAULT_BLOWUP_GUARD,
            collapse_patience: 5,
        }
    }
}

/// One line of the per-run filter CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub t: f64,
    pub mass: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub path: MeasurePath,
    /// Slow-state summary at every grid time.
    pub summary: Vec<SummaryRow>,
}

impl FilterOutput {
    /// CSV `t,mass,mean_1..mean_m,var_1..var_m,ess`.
    pub fn write_summary_csv<W: Write>(&self, mut out: W, provenance: Option<&str>) -> Result<()> {
        if let Some(p) = provenance {
            writeln!(out, "# {p}")?;
        }
        let m = self.summary.first().map_or(0, |r| r.mean.len());
        let mut header = vec!["t".to_string(), "mass".to_string()];
        header.extend((1..=m).map(|i| format!("mean_{i}")));
        header.extend((1..=m).map(|i| format!("var_{i}")));
        header.push("ess".into());
        writeln!(out, "{}", header.join(","))?;
        for r in &self.summary {
            let mut row = vec![fmt_g17(r.t), fmt_g17(r.mass)];
            row.extend(r.mean.iter().map(|v| fmt_g17(*v)));
            row.extend(r.var.iter().map(|v| fmt_g17(*v)));
            row.push(fmt_g17(r.ess));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn final_ensemble(&self) -> Option<&ParticleEnsemble> {
        self.path.last().and_then(MeasureEntry::as_particles)
    }
}

struct ParticleStreams {
    slow: StreamRng,
    other: StreamRng,
}

fn particle_streams(seed: RootSeed, n: usize, other: &str) -> Vec<ParticleStreams> {
    (0..n as u64)
        .map(|i| ParticleStreams {
            slow: seed.stream("pf-slow", i),
            other: seed.stream(other, i),
        })
        .collect()
}

fn summarize(ens: &ParticleEnsemble, m: usize) -> SummaryRow {
    let w = ens.weights();
    let mut mean = vec![0.0; m];
    for (i, wi) in w.iter().enumerate() {
        for k in 0..m {
            mean[k] += wi * ens.states[i * ens.dim + k];
        }
    }
    let mut var = vec![0.0; m];
    for (i, wi) in w.iter().enumerate() {
        for k in 0..m {
            var[k] += wi * (ens.states[i * ens.dim + k] - mean[k]).powi(2);
        }
    }
    SummaryRow {
        t: ens.t,
        mass: ens.total_mass(),
        mean,
        var,
        ess: 1.0 / w.iter().map(|v| v * v).sum::<f64>(),
    }
}

/// Shared time loop: `advance` propagates every particle over step `k` and
/// adds its log-likelihood increment.
fn run_filter<F>(
    kind: FilterKind,
    mut ens: ParticleEnsemble,
    m: usize,
    obs: &ObservationPath,
    opts: &FilterOptions,
    seed: RootSeed,
    mut advance: F,
) -> Result<FilterOutput>
where
    F: FnMut(usize, &[f64], f64, &mut ParticleEnsemble) -> Result<()>,
{
    let record = |ens: &ParticleEnsemble| {
        if opts.keep_fast || ens.dim == m {
            ens.clone()
        } else {
            ens.marginal(m)
        }
    };
    let stride = opts.record_stride.max(1);
    let steps = obs.steps();
    let mut path = MeasurePath::new(kind);
    let mut summary = vec![summarize(&ens, m)];
    path.entries.push(MeasureEntry::Particles(record(&ens)));
    let mut resample_rng = seed.stream("pf-resample", 0);
    let mut collapsed_for = 0;
    let mut dy = vec![0.0; obs.d];
    for k in 0..steps {
        obs.increment(k, &mut dy);
        advance(k, &dy, obs.dt(k), &mut ens)?;
        ens.t = obs.times[k + 1];
        ens.normalize_in_place()?;
        let row = summarize(&ens, m);
        let max_w = ens.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
        if max_w > 1.0 - 1e-9 && ens.len() > 1 {
            collapsed_for += 1;
            if collapsed_for >= opts.collapse_patience {
                return Err(Error::WeightCollapse { t: ens.t });
            }
        } else {
            collapsed_for = 0;
        }
        let ess = row.ess;
        summary.push(row);
        if (k + 1) % stride == 0 || k + 1 == steps {
            path.entries.push(MeasureEntry::Particles(record(&ens)));
        }
        if let ResamplePolicy::Systematic { threshold } = opts.resample {
            if ess < threshold * ens.len() as f64 {
                let u: f64 = resample_rng.random();
                ens.resample_systematic(u)?;
            }
        }
    }
    Ok(FilterOutput { path, summary })
}

struct FullScratch {
    h: Vec<f64>,
    innov: Vec<f64>,
    dn: Vec<f64>,
    dw: Vec<f64>,
    dv: Vec<f64>,
    drift: Vec<f64>,
    inter: Vec<f64>,
    sig: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    gdv: Vec<f64>,
}

/// Particle filter for the full slow/fast system on a whitened observation.
///
/// Particles evolve under the reference measure, where `Y` is a Brownian
/// motion: the signal noise splits as `dW = alpha_w^T (dY - h dt) + C dN`
/// with `N` independent, so
///
/// ```text
/// dX_i = [b + b_I/eps - sigma alpha_w^T h] dt + sigma alpha_w^T dY + sigma C dN_i
/// dZ_i = f/eps^2 dt + g/eps dV_i
/// d log w_i = <h, dY> - |h|^2 dt / 2
/// ```
///
/// with coefficients at the pre-step state. Recorded ensembles hold the slow
/// marginal unless `keep_fast` is set.
pub fn particle_filter_full(
    model: &MultiscaleModel,
    eps: f64,
    obs: &ObservationPath,
    opts: &FilterOptions,
    seed: RootSeed,
) -> Result<FilterOutput> {
    let dims = model.dims;
    let (m, n, w, v, d) = (dims.m, dims.n, dims.w, dims.v, dims.d);
    if obs.d != d {
        return Err(Error::Dimension(format!("observation has d = {}, model d = {d}", obs.d)));
    }
    if opts.particles == 0 {
        return Err(Error::InvalidArgument("particle count must be >= 1".into()));
    }
    check_step(eps, obs.max_dt(), opts.dt_factor)?;
    let np = opts.particles;
    let dim = m + n;
    let mut states = vec![0.0; np * dim];
    for (i, s) in states.chunks_mut(dim).enumerate() {
        model.init.sample_x(&mut seed.stream("pf-init-x", i as u64), &mut s[..m]);
        model.init.sample_z(&mut seed.stream("pf-init-z", i as u64), &mut s[m..]);
    }
    let ens = ParticleEnsemble::uniform(dim, states, obs.times[0]);
    let mut streams = particle_streams(seed, np, "pf-fast");
    let proj = model.proj_rm();
    let comp = model.complement_rm();
    let guard = opts.blowup_guard;
    let inv_eps = 1.0 / eps;
    let inv_eps2 = inv_eps * inv_eps;

    run_filter(FilterKind::Full, ens, m, obs, opts, seed, |k, dy, dt, ens| {
        let sq = dt.sqrt();
        let t_next = obs.times[k + 1];
        ens.states
            .par_chunks_mut(dim)
            .zip(ens.log_weights.par_iter_mut())
            .zip(streams.par_iter_mut())
            .with_min_len(64)
            .try_for_each_init(
                || FullScratch {
                    h: vec![0.0; d],
                    innov: vec![0.0; d],
                    dn: vec![0.0; w],
                    dw: vec![0.0; w],
                    dv: vec![0.0; v],
                    drift: vec![0.0; m],
                    inter: vec![0.0; m],
                    sig: vec![0.0; m * w],
                    f: vec![0.0; n],
                    g: vec![0.0; n * v],
                    gdv: vec![0.0; n],
                },
                |s, ((state, lw), rng)| {
                    let (x, z) = state.split_at_mut(m);
                    model.sensor(x, z, &mut s.h);
                    model.slow_drift(x, z, &mut s.drift);
                    model.intermediate_drift(x, z, &mut s.inter);
                    model.slow_dispersion(x, z, &mut s.sig);
                    model.fast_drift(x, z, &mut s.f);
                    model.fast_dispersion(x, z, &mut s.g);
                    fill_normal(&mut rng.slow, sq, &mut s.dn);
                    fill_normal(&mut rng.other, sq, &mut s.dv);

                    for i in 0..d {
                        s.innov[i] = dy[i] - s.h[i] * dt;
                    }
                    s.dw.fill(0.0);
                    gemv_acc(proj, w, d, &s.innov, &mut s.dw);
                    gemv_acc(comp, w, w, &s.dn, &mut s.dw);
                    *lw += dot(&s.h, dy) - 0.5 * dot(&s.h, &s.h) * dt;

                    for i in 0..m {
                        x[i] += (s.drift[i] + s.inter[i] * inv_eps) * dt;
                    }
                    gemv_acc(&s.sig, m, w, &s.dw, x);
                    s.gdv.fill(0.0);
                    gemv_acc(&s.g, n, v, &s.dv, &mut s.gdv);
                    for i in 0..n {
                        z[i] += s.f[i] * inv_eps2 * dt + s.gdv[i] * inv_eps;
                    }
                    let norm2 = dot(x, x) + dot(z, z);
                    if !(norm2 <= guard * guard) {
                        return Err(Error::NumericalBlowup { t: t_next, norm: norm2.sqrt() });
                    }
                    Ok(())
                },
            )
    })
}

struct AveragedScratch {
    coeffs: AveragedCoefficients,
    innov: Vec<f64>,
    dn: Vec<f64>,
    dw: Vec<f64>,
    extra: Vec<f64>,
}

/// Particle filter for the averaged system, driven by the same observation.
///
/// Particles follow
///
/// ```text
/// dX_i = (bbar + btilde) dt + atilde^{1/2} dWt_i + (abar - sigbar sigbar^T)^{1/2} dWh_i + sigbar dW_i
/// ```
///
/// where only the `sigbar` channel is correlated with the observation and is
/// conditioned exactly as in [`particle_filter_full`], with `hbar` in place of `h`.
pub fn particle_filter_averaged(
    avg: &AveragedModel,
    obs: &ObservationPath,
    opts: &FilterOptions,
    seed: RootSeed,
) -> Result<FilterOutput> {
    let dims = avg.dims;
    let (m, w, d) = (dims.m, dims.w, dims.d);
    if obs.d != d {
        return Err(Error::Dimension(format!("observation has d = {}, model d = {d}", obs.d)));
    }
    if opts.particles == 0 {
        return Err(Error::InvalidArgument("particle count must be >= 1".into()));
    }
    let np = opts.particles;
    let mut states = vec![0.0; np * m];
    for (i, s) in states.chunks_mut(m).enumerate() {
        avg.init.sample_x(&mut seed.stream("pf-init-x", i as u64), s);
    }
    let ens = ParticleEnsemble::uniform(m, states, obs.times[0]);
    let mut streams = particle_streams(seed, np, "pf-averaged-extra");
    let proj: Vec<f64> = {
        // alpha_w^T, w x d.
        let mut p = vec![0.0; w * d];
        for i in 0..d {
            for j in 0..w {
                p[j * d + i] = avg.alpha_w[i * w + j];
            }
        }
        p
    };
    let comp = &avg.complement;
    let guard = opts.blowup_guard;

    run_filter(FilterKind::Averaged, ens, m, obs, opts, seed, |k, dy, dt, ens| {
        let sq = dt.sqrt();
        let t_next = obs.times[k + 1];
        ens.states
            .par_chunks_mut(m)
            .zip(ens.log_weights.par_iter_mut())
            .zip(streams.par_iter_mut())
            .with_min_len(64)
            .try_for_each_init(
                || AveragedScratch {
                    coeffs: AveragedCoefficients::new(dims),
                    innov: vec![0.0; d],
                    dn: vec![0.0; w],
                    dw: vec![0.0; w],
                    extra: vec![0.0; 2 * m],
                },
                |s, ((x, lw), rng)| {
                    avg.eval(x, &mut s.coeffs)?;
                    let c = &s.coeffs;
                    fill_normal(&mut rng.slow, sq, &mut s.dn);
                    fill_normal(&mut rng.other, sq, &mut s.extra);
                    for i in 0..d {
                        s.innov[i] = dy[i] - c.hbar[i] * dt;
                    }
                    s.dw.fill(0.0);
                    gemv_acc(&proj, w, d, &s.innov, &mut s.dw);
                    gemv_acc(comp, w, w, &s.dn, &mut s.dw);
                    *lw += dot(&c.hbar, dy) - 0.5 * dot(&c.hbar, &c.hbar) * dt;

                    for i in 0..m {
                        x[i] += c.drift[i] * dt;
                    }
                    gemv_acc(&c.atilde_root, m, m, &s.extra[..m], x);
                    gemv_acc(&c.gap_root, m, m, &s.extra[m..], x);
                    gemv_acc(&c.sigbar, m, w, &s.dw, x);
                    let norm2 = dot(x, x);
                    if !(norm2 <= guard * guard) {
                        return Err(Error::NumericalBlowup { t: t_next, norm: norm2.sqrt() });
                    }
                    Ok(())
                },
            )
    })
}

/// Writes recorded ensembles as length-prefixed little-endian records after
/// the `pf-v1` tag. Record payload: `t`, `log_scale` (f64), `N`, `dim` (u64),
/// states (`N * dim` f64), log-weights (`N` f64).
pub fn write_ensemble_dump<W: Write>(path: &MeasurePath, mut out: W) -> Result<()> {
    out.write_all(PF_DUMP_TAG)?;
    for e in path.ensembles()? {
        let mut payload = Vec::with_capacity(32 + 8 * (e.states.len() + e.len()));
        payload.extend_from_slice(&e.t.to_le_bytes());
        payload.extend_from_slice(&e.log_scale.to_le_bytes());
        payload.extend_from_slice(&(e.len() as u64).to_le_bytes());
        payload.extend_from_slice(&(e.dim as u64).to_le_bytes());
        for v in e.states.iter().chain(&e.log_weights) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&(payload.len() as u64).to_le_bytes())?;
        out.write_all(&payload)?;
    }
    Ok(())
}

pub fn read_ensemble_dump<R: Read>(mut input: R) -> Result<Vec<ParticleEnsemble>> {
    let bad = |msg: &str| Error::InvalidArgument(format!("malformed pf-v1 dump: {msg}"));
    let mut tag = [0u8; 8];
    input.read_exact(&mut tag)?;
    if &tag != PF_DUMP_TAG {
        return Err(bad("missing version tag"));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 8];
        match input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u64::from_le_bytes(len) as usize;
        let mut payload = vec![0u8; len];
        input.read_exact(&mut payload)?;
        if len < 32 || len % 8 != 0 {
            return Err(bad("short record"));
        }
        let words: Vec<[u8; 8]> = payload.chunks_exact(8).map(|c| c.try_into().unwrap()).collect();
        let t = f64::from_le_bytes(words[0]);
        let log_scale = f64::from_le_bytes(words[1]);
        let n = u64::from_le_bytes(words[2]) as usize;
        let dim = u64::from_le_bytes(words[3]) as usize;
        if words.len() != 4 + n * dim + n || n == 0 || dim == 0 {
            return Err(bad("record length does not match its header"));
        }
        let vals: Vec<f64> = words[4..].iter().map(|w| f64::from_le_bytes(*w)).collect();
        out.push(ParticleEnsemble {
            dim,
            states: vals[..n * dim].to_vec(),
            log_weights: vals[n * dim..].to_vec(),
            log_scale,
            t,
        });
    }
    Ok(out)
}
