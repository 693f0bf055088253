//! Frozen-fast ergodic averages, Feynman–Kac semigroup evaluation, the
//! Poisson (cell) problem `G_F u = -b_I`, and assembly of the homogenized
//! coefficients.
//!
//! Everything here runs on the frozen-fast process with `eps` scaled out:
//! `dZ = f(x, Z) dt + g(x, Z) dV` at fixed slow state `x`.

mod averaged;
mod grid;
mod poisson;
mod stationary;

pub use averaged::{
    averaged_coefficients, AveragedCoefficients, AveragedModel, AveragingParams,
    NodeCoefficients, NodeDiagnostics, AVGMODEL_VERSION,
};
pub use grid::TensorGrid;
pub use poisson::{solve_poisson, CellProblemSolution, PoissonParams};
pub use stationary::{
    check_assumptions, check_centering, estimate_stationary, semigroup_mc, AssumptionProbes,
    AssumptionReport, CenteringCheck, SamplerParams, SemigroupEstimate, SemigroupParams,
    StationaryEstimate,
};

use crate::linalg::gemv_acc;
use crate::sde::MultiscaleModel;

/// Scratch for stepping a pair of frozen-fast paths driven by `+dV` and `-dV`.
pub(crate) struct FrozenStepper {
    f: Vec<f64>,
    g: Vec<f64>,
    gdv: Vec<f64>,
    pub dv: Vec<f64>,
}

impl FrozenStepper {
    pub fn new(model: &MultiscaleModel) -> Self {
        let n = model.dims.n;
        let v = model.dims.v;
        FrozenStepper {
            f: vec![0.0; n],
            g: vec![0.0; n * v],
            gdv: vec![0.0; n],
            dv: vec![0.0; v],
        }
    }

    /// Euler–Maruyama step of `z` with increment `sign * self.dv`.
    #[inline]
    pub fn step(&mut self, model: &MultiscaleModel, x: &[f64], z: &mut [f64], h: f64, sign: f64) {
        let n = z.len();
        let v = self.dv.len();
        model.fast_drift(x, z, &mut self.f);
        model.fast_dispersion(x, z, &mut self.g);
        self.gdv.fill(0.0);
        gemv_acc(&self.g, n, v, &self.dv, &mut self.gdv);
        for i in 0..n {
            z[i] += self.f[i] * h + sign * self.gdv[i];
        }
    }
}

pub(crate) fn mean_and_se(values: &[f64], ess: f64) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let eff = ess.min(n as f64).max(1.0);
    (mean, (var / eff).sqrt())
}

#[cfg(test)]
mod tests;
