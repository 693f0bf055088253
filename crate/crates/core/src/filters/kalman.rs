//! Kalman–Bucy filter for linear-Gaussian signals with signal/observation
//! noise correlation:
//!
//! ```text
//! dX = A X dt + S dW
//! dY = H X dt + alpha_w dW + gamma_w dU,   alpha_w alpha_w^T + gamma_w gamma_w^T = I
//! ```

use nalgebra::{DMatrix, DVector};

use super::{FilterKind, MeasureEntry, MeasurePath};
use crate::error::{Error, Result};
use crate::linalg;
use crate::sde::ObservationPath;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianSpec {
    pub a: DMatrix<f64>,
    /// Dispersion `S`, `p x q`.
    pub noise: DMatrix<f64>,
    /// Whitened sensor matrix, `d x p`.
    pub h: DMatrix<f64>,
    /// Whitened correlation with the signal noise, `d x q`.
    pub alpha_w: DMatrix<f64>,
    pub gamma_w: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl LinearGaussianSpec {
    fn validate(&self, d: usize) -> Result<()> {
        let p = self.a.nrows();
        let q = self.noise.ncols();
        let ok = self.a.ncols() == p
            && self.noise.nrows() == p
            && self.h.shape() == (d, p)
            && self.alpha_w.shape() == (d, q)
            && self.gamma_w.nrows() == d
            && self.m0.len() == p
            && self.p0.shape() == (p, p);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("linear-Gaussian spec shapes are inconsistent".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KalmanScheme {
    /// Explicit Euler on the mean and Riccati equations.
    Euler,
    /// Exact Kalman recursion for the Euler–Maruyama discretization of the
    /// signal and observation on the same grid. This is the scheme a
    /// particle filter on that grid converges to.
    ExactDiscrete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn check_covariance(p: &DMatrix<f64>, t: f64) -> Result<()> {
    let scale = 1.0 + linalg::max_abs(p);
    let asym = linalg::max_abs(&(p - p.transpose()));
    if !p.iter().all(|v| v.is_finite()) || asym > 1e-8 * scale || linalg::min_eigenvalue(p) < -1e-8 * scale {
        return Err(Error::CovarianceBlowup { t });
    }
    Ok(())
}

/// Runs the filter along `obs`, recording the Gaussian law at every grid time.
pub fn kalman_bucy(spec: &LinearGaussianSpec, obs: &ObservationPath, scheme: KalmanScheme) -> Result<MeasurePath> {
    spec.validate(obs.d)?;
    let p_dim = spec.a.nrows();
    let d = obs.d;
    let id_p = DMatrix::<f64>::identity(p_dim, p_dim);
    let cross = &spec.noise * spec.alpha_w.transpose();
    let ss = &spec.noise * spec.noise.transpose();
    let obs_cov = &spec.alpha_w * spec.alpha_w.transpose() + &spec.gamma_w * spec.gamma_w.transpose();

    let mut m = spec.m0.clone();
    let mut p = linalg::symmetrize(&spec.p0);
    check_covariance(&p, obs.times[0])?;
    let mut path = MeasurePath::new(FilterKind::Kalman);
    path.entries.push(MeasureEntry::Gaussian(GaussianState {
        t: obs.times[0],
        mean: m.clone(),
        cov: p.clone(),
    }));
    let mut dy = vec![0.0; d];
    for k in 0..obs.steps() {
        let dt = obs.dt(k);
        obs.increment(k, &mut dy);
        let dy = DVector::from_column_slice(&dy);
        let innovation = &dy - &spec.h * &m * dt;
        match scheme {
            KalmanScheme::Euler => {
                let gain = &p * spec.h.transpose() + &cross;
                let m_next = &m + &spec.a * &m * dt + &gain * &innovation;
                let dp = &spec.a * &p + &p * spec.a.transpose() + &ss - &gain * gain.transpose();
                p = linalg::symmetrize(&(&p + dp * dt));
                m = m_next;
            }
            KalmanScheme::ExactDiscrete => {
                let f = &id_p + &spec.a * dt;
                let s_y = &spec.h * &p * spec.h.transpose() * (dt * dt) + &obs_cov * dt;
                let c_xy = &f * &p * spec.h.transpose() * dt + &cross * dt;
                let p_pred = &f * &p * f.transpose() + &ss * dt;
                let chol = s_y
                    .clone()
                    .cholesky()
                    .ok_or(Error::CovarianceBlowup { t: obs.times[k + 1] })?;
                let gain = chol.solve(&c_xy.transpose()).transpose();
                m = &f * &m + &gain * &innovation;
                p = linalg::symmetrize(&(p_pred - &gain * &s_y * gain.transpose()));
            }
        }
        check_covariance(&p, obs.times[k + 1])?;
        path.entries.push(MeasureEntry::Gaussian(GaussianState {
            t: obs.times[k + 1],
            mean: m.clone(),
            cov: p.clone(),
        }));
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RootSeed;

    fn scalar(a: f64, s: f64, h: f64, alpha: f64, p0: f64) -> LinearGaussianSpec {
        let gamma = (1.0 - alpha * alpha).sqrt();
        LinearGaussianSpec {
            a: DMatrix::from_element(1, 1, a),
            noise: DMatrix::from_element(1, 1, s),
            h: DMatrix::from_element(1, 1, h),
            alpha_w: DMatrix::from_element(1, 1, alpha),
            gamma_w: DMatrix::from_element(1, 1, gamma),
            m0: DVector::from_element(1, 1.0),
            p0: DMatrix::from_element(1, 1, p0),
        }
    }

    fn last_cov(path: &MeasurePath) -> f64 {
        path.last().unwrap().as_gaussian().unwrap().cov[(0, 0)]
    }

    #[test]
    fn lyapunov_fixed_point_without_observation() {
        // 2(-1)P + 1 = 0.
        let obs = ObservationPath::brownian(1, 20.0, 1e-3, RootSeed(3)).unwrap();
        for scheme in [KalmanScheme::Euler, KalmanScheme::ExactDiscrete] {
            let path = kalman_bucy(&scalar(-1.0, 1.0, 0.0, 0.0, 0.0), &obs, scheme).unwrap();
            assert!((last_cov(&path) - 0.5).abs() < 1e-3, "{scheme:?}");
        }
    }

    #[test]
    fn riccati_fixed_point() {
        // -2P + 1 - P^2 = 0  =>  P = sqrt(2) - 1.
        let obs = ObservationPath::brownian(1, 20.0, 1e-3, RootSeed(4)).unwrap();
        for scheme in [KalmanScheme::Euler, KalmanScheme::ExactDiscrete] {
            let path = kalman_bucy(&scalar(-1.0, 1.0, 1.0, 0.0, 1.0), &obs, scheme).unwrap();
            assert!((last_cov(&path) - (2f64.sqrt() - 1.0)).abs() < 1e-3, "{scheme:?}");
        }
    }

    #[test]
    fn deterministic_without_noise_or_observation() {
        let obs = ObservationPath::brownian(1, 1.0, 1e-3, RootSeed(5)).unwrap();
        let path = kalman_bucy(&scalar(-1.0, 0.0, 0.0, 0.0, 0.0), &obs, KalmanScheme::Euler).unwrap();
        for e in &path.entries {
            let g = e.as_gaussian().unwrap();
            assert_eq!(g.cov[(0, 0)], 0.0);
            // Euler on m' = -m.
            let k = (g.t / 1e-3).round() as i32;
            assert!((g.mean[0] - (1.0 - 1e-3f64).powi(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn correlated_stationary_riccati() {
        // Correlated case: -2P + 1 - (P + alpha)^2 = 0.
        let alpha: f64 = 0.6;
        let expect = -(1.0 + alpha) + ((1.0 + alpha).powi(2) + 1.0 - alpha * alpha).sqrt();
        let obs = ObservationPath::brownian(1, 20.0, 1e-3, RootSeed(6)).unwrap();
        let path = kalman_bucy(&scalar(-1.0, 1.0, 1.0, alpha, 1.0), &obs, KalmanScheme::Euler).unwrap();
        assert!((last_cov(&path) - expect).abs() < 1e-3);
    }

    #[test]
    fn blowup_is_detected() {
        let obs = ObservationPath::brownian(1, 5.0, 0.5, RootSeed(7)).unwrap();
        // Euler with A dt = -20 oscillates and loses positivity.
        let spec = scalar(-40.0, 1.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            kalman_bucy(&spec, &obs, KalmanScheme::Euler),
            Err(Error::CovarianceBlowup { .. })
        ));
    }
}
