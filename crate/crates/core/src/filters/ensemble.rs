//! Weighted particles representing an unnormalized measure
//!
//! `rho(phi) = exp(log_scale) * sum_i exp(log_weights[i]) * phi(x_i)`.
//!
//! A fresh ensemble has `log_weights = -ln N` and `log_scale = 0`, so
//! `rho(1) = 1`. [`ParticleEnsemble::normalize`] moves the total mass into
//! `log_scale`, after which the weights are the normalized filter's.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub dim: usize,
    /// `N x dim`, row-major.
    pub states: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub log_scale: f64,
    pub t: f64,
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

impl ParticleEnsemble {
    pub fn uniform(dim: usize, states: Vec<f64>, t: f64) -> Self {
        assert!(dim > 0 && !states.is_empty() && states.len() % dim == 0);
        let n = states.len() / dim;
        ParticleEnsemble {
            dim,
            states,
            log_weights: vec![-(n as f64).ln(); n],
            log_scale: 0.0,
            t,
        }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn log_total_mass(&self) -> f64 {
        self.log_scale + log_sum_exp(&self.log_weights)
    }

    /// `rho_t(1)`.
    pub fn total_mass(&self) -> f64 {
        self.log_total_mass().exp()
    }

    /// Moves the weight sum into `log_scale`; the measure is unchanged.
    pub fn normalize_in_place(&mut self) -> Result<()> {
        let lse = log_sum_exp(&self.log_weights);
        if !lse.is_finite() {
            return Err(Error::ZeroMass);
        }
        for lw in self.log_weights.iter_mut() {
            *lw -= lse;
        }
        self.log_scale += lse;
        Ok(())
    }

    /// Normalized copy (`pi = rho / rho(1)` in the weights, mass kept in `log_scale`).
    pub fn normalize(&self) -> Result<Self> {
        let mut out = self.clone();
        out.normalize_in_place()?;
        Ok(out)
    }

    /// Normalized weights, summing to one.
    pub fn weights(&self) -> Vec<f64> {
        let max = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = self.log_weights.iter().map(|lw| (lw - max).exp()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / sum).collect()
    }

    pub fn ess(&self) -> f64 {
        1.0 / self.weights().iter().map(|w| w * w).sum::<f64>()
    }

    /// `pi(phi)`.
    pub fn expect(&self, phi: impl Fn(&[f64]) -> f64) -> f64 {
        self.weights()
            .iter()
            .enumerate()
            .map(|(i, w)| w * phi(self.state(i)))
            .sum()
    }

    /// `rho(phi)`.
    pub fn unnormalized_expect(&self, phi: impl Fn(&[f64]) -> f64) -> f64 {
        self.total_mass() * self.expect(phi)
    }

    pub fn mean(&self) -> Vec<f64> {
        let w = self.weights();
        let mut out = vec![0.0; self.dim];
        for (i, wi) in w.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.state(i)) {
                *o += wi * v;
            }
        }
        out
    }

    pub fn variance(&self) -> Vec<f64> {
        let w = self.weights();
        let mean = self.mean();
        let mut out = vec![0.0; self.dim];
        for (i, wi) in w.iter().enumerate() {
            for ((o, v), mu) in out.iter_mut().zip(self.state(i)).zip(&mean) {
                *o += wi * (v - mu).powi(2);
            }
        }
        out
    }

    /// First `k` coordinates of every particle, same weights and mass.
    pub fn marginal(&self, k: usize) -> Self {
        assert!(k >= 1 && k <= self.dim);
        let states = (0..self.len()).flat_map(|i| self.state(i)[..k].to_vec()).collect();
        ParticleEnsemble {
            dim: k,
            states,
            log_weights: self.log_weights.clone(),
            log_scale: self.log_scale,
            t: self.t,
        }
    }

    /// Systematic resampling with offset `u in [0, 1)`. The mass `rho(1)`
    /// survives as `log_scale`; weights become uniform.
    pub fn resample_systematic(&mut self, u: f64) -> Result<()> {
        self.normalize_in_place()?;
        let n = self.len();
        let w = self.weights();
        let mut states = Vec::with_capacity(self.states.len());
        let mut cum = w[0];
        let mut j = 0;
        for i in 0..n {
            let pos = (i as f64 + u) / n as f64;
            while pos > cum && j + 1 < n {
                j += 1;
                cum += w[j];
            }
            states.extend_from_slice(self.state(j));
        }
        self.states = states;
        self.log_weights.fill(-(n as f64).ln());
        Ok(())
    }
}
