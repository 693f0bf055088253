//! Multiscale filtering models and Euler–Maruyama simulation of the coupled
//! slow/fast signal with a correlated observation.
//!
//! The signal is
//!
//! ```text
//! dX = [b(X,Z) + b_I(X,Z)/eps] dt + sigma(X,Z) dW
//! dZ = f(X,Z)/eps^2 dt + g(X,Z)/eps dV
//! dY = h(X,Z) dt + alpha dW + gamma dU,   Y_0 = 0
//! ```
//!
//! Models are whitened once at build time: with `K = alpha alpha^T + gamma gamma^T = kappa kappa^T`
//! the observation is rescaled by `kappa^{-1}`, so every consumer sees
//! `dY = h_w dt + alpha_w dW + gamma_w dU` with `alpha_w alpha_w^T + gamma_w gamma_w^T = I`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::kalman::LinearGaussianSpec;
use crate::io::fmt_g17;
use crate::linalg::{self, gemv_acc};
use crate::rng::{fill_normal, RootSeed, StreamRng};

/// Coefficient function `(x, z) -> out`; matrix-valued fields write row-major.
pub type Field = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Default `c` in the step rule `dt <= c * eps^2`.
pub const DEFAULT_DT_FACTOR: f64 = 0.1;
/// Default state-norm guard for [`simulate_multiscale`].
pub const DEFAULT_BLOWUP_GUARD: f64 = 1e8;

const EIG_FLOOR: f64 = 1e-12;
const FACTOR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Slow state.
    pub m: usize,
    /// Fast state.
    pub n: usize,
    /// Signal noise `W`.
    pub w: usize,
    /// Fast noise `V`.
    pub v: usize,
    /// Observation-only noise `U`.
    pub u: usize,
    /// Observation.
    pub d: usize,
}

/// Declared structural properties of a model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    pub centered_intermediate: bool,
    pub bounded_sensor: bool,
    pub linear_gaussian: bool,
}

/// Law of `(X_0, Z_0)`; components are independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialLaw {
    Point { x: Vec<f64>, z: Vec<f64> },
    Gaussian {
        x_mean: Vec<f64>,
        x_std: Vec<f64>,
        z_mean: Vec<f64>,
        z_std: Vec<f64>,
    },
}

impl InitialLaw {
    pub fn sample_x(&self, rng: &mut StreamRng, out: &mut [f64]) {
        match self {
            InitialLaw::Point { x, .. } => out.copy_from_slice(x),
            InitialLaw::Gaussian { x_mean, x_std, .. } => {
                fill_normal(rng, 1.0, out);
                for i in 0..out.len() {
                    out[i] = x_mean[i] + x_std[i] * out[i];
                }
            }
        }
    }

    pub fn sample_z(&self, rng: &mut StreamRng, out: &mut [f64]) {
        match self {
            InitialLaw::Point { z, .. } => out.copy_from_slice(z),
            InitialLaw::Gaussian { z_mean, z_std, .. } => {
                fill_normal(rng, 1.0, out);
                for i in 0..out.len() {
                    out[i] = z_mean[i] + z_std[i] * out[i];
                }
            }
        }
    }

    /// Mean and covariance of `(X_0, Z_0)` stacked.
    pub fn moments(&self) -> (Vec<f64>, DMatrix<f64>) {
        match self {
            InitialLaw::Point { x, z } => {
                let mean: Vec<f64> = x.iter().chain(z).cloned().collect();
                let k = mean.len();
                (mean, DMatrix::zeros(k, k))
            }
            InitialLaw::Gaussian {
                x_mean,
                x_std,
                z_mean,
                z_std,
            } => {
                let mean: Vec<f64> = x_mean.iter().chain(z_mean).cloned().collect();
                let var: Vec<f64> = x_std.iter().chain(z_std).map(|s| s * s).collect();
                (mean, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(var)))
            }
        }
    }

    fn check(&self, dims: Dims) -> Result<()> {
        let (mx, mz) = match self {
            InitialLaw::Point { x, z } => (x.len(), z.len()),
            InitialLaw::Gaussian {
                x_mean,
                x_std,
                z_mean,
                z_std,
            } => {
                if x_std.len() != x_mean.len() || z_std.len() != z_mean.len() {
                    return Err(Error::Dimension("initial law mean/std lengths differ".into()));
                }
                (x_mean.len(), z_mean.len())
            }
        };
        if mx != dims.m || mz != dims.n {
            return Err(Error::Dimension(format!(
                "initial law is {mx}+{mz}, model is {}+{}",
                dims.m, dims.n
            )));
        }
        Ok(())
    }
}

/// Whitening of the observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub k: DMatrix<f64>,
    /// Lower-triangular Cholesky factor of `k`.
    pub kappa: DMatrix<f64>,
    pub kappa_inv: DMatrix<f64>,
    pub alpha_w: DMatrix<f64>,
    pub gamma_w: DMatrix<f64>,
}

/// Splits the signal noise as `W = proj B + C N` with `N` independent of the
/// whitened observation noise `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDecomposition {
    /// `alpha_w^T`, `w x d`.
    pub proj: DMatrix<f64>,
    /// `C C^T = I_w - alpha_w^T alpha_w`, `w x w`.
    pub c: DMatrix<f64>,
}

pub fn build_correlation(alpha: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<Correlation> {
    let d = alpha.nrows();
    if gamma.nrows() != d {
        return Err(Error::Dimension(format!(
            "alpha has {d} rows, gamma has {}",
            gamma.nrows()
        )));
    }
    let ggt = gamma * gamma.transpose();
    let k = alpha * alpha.transpose() + &ggt;
    let scale = linalg::max_abs(&k).max(1.0);
    let min_g = linalg::min_eigenvalue(&ggt);
    if !(min_g > EIG_FLOOR * scale) {
        return Err(Error::NonPositiveDefinite {
            what: "gamma gamma^T",
            min_eig: min_g,
        });
    }
    let min_k = linalg::min_eigenvalue(&k);
    if !(min_k > EIG_FLOOR * scale) {
        return Err(Error::NonPositiveDefinite {
            what: "K = alpha alpha^T + gamma gamma^T",
            min_eig: min_k,
        });
    }
    let kappa = linalg::cholesky_lower(&k).ok_or(Error::NonPositiveDefinite {
        what: "K = alpha alpha^T + gamma gamma^T",
        min_eig: min_k,
    })?;
    let kappa_inv = kappa
        .clone()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or(Error::NonPositiveDefinite {
            what: "kappa",
            min_eig: 0.0,
        })?;
    let alpha_w = &kappa_inv * alpha;
    let gamma_w = &kappa_inv * gamma;
    Ok(Correlation {
        k,
        kappa,
        kappa_inv,
        alpha_w,
        gamma_w,
    })
}

pub fn decompose_noise(corr: &Correlation) -> Result<NoiseDecomposition> {
    let w = corr.alpha_w.ncols();
    let proj = corr.alpha_w.transpose();
    let gap = DMatrix::identity(w, w) - &proj * &corr.alpha_w;
    let (c, min) = linalg::psd_sqrt(&gap);
    if min < -FACTOR_TOL {
        return Err(Error::FactorizationFailure { min_eig: min });
    }
    Ok(NoiseDecomposition { proj, c })
}

/// Affine coefficients `b = Bx x + Bz z`, etc., with constant dispersions.
/// The sensor matrices are the raw (unwhitened) ones.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoefficients {
    pub bx: DMatrix<f64>,
    pub bz: DMatrix<f64>,
    pub ix: DMatrix<f64>,
    pub iz: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub fx: DMatrix<f64>,
    pub fz: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub hx: DMatrix<f64>,
    pub hz: DMatrix<f64>,
}

impl LinearCoefficients {
    /// The joint `(x, z)` linear system at timescale `eps`, driven by `(W, V)`.
    pub fn joint_system(
        &self,
        corr: &Correlation,
        eps: f64,
        init: &InitialLaw,
    ) -> LinearGaussianSpec {
        let m = self.bx.nrows();
        let n = self.fz.nrows();
        let w = self.sigma.ncols();
        let v = self.g.ncols();
        let d = self.hx.nrows();
        let p = m + n;
        let mut a = DMatrix::zeros(p, p);
        a.view_mut((0, 0), (m, m))
            .copy_from(&(&self.bx + &self.ix / eps));
        a.view_mut((0, m), (m, n))
            .copy_from(&(&self.bz + &self.iz / eps));
        a.view_mut((m, 0), (n, m))
            .copy_from(&(&self.fx / (eps * eps)));
        a.view_mut((m, m), (n, n))
            .copy_from(&(&self.fz / (eps * eps)));
        let mut noise = DMatrix::zeros(p, w + v);
        noise.view_mut((0, 0), (m, w)).copy_from(&self.sigma);
        noise.view_mut((m, w), (n, v)).copy_from(&(&self.g / eps));
        let mut h = DMatrix::zeros(d, p);
        h.view_mut((0, 0), (d, m)).copy_from(&(&corr.kappa_inv * &self.hx));
        h.view_mut((0, m), (d, n)).copy_from(&(&corr.kappa_inv * &self.hz));
        let mut alpha = DMatrix::zeros(d, w + v);
        alpha.view_mut((0, 0), (d, w)).copy_from(&corr.alpha_w);
        let (m0, p0) = init.moments();
        LinearGaussianSpec {
            a,
            noise,
            h,
            alpha_w: alpha,
            gamma_w: corr.gamma_w.clone(),
            m0: nalgebra::DVector::from_vec(m0),
            p0,
        }
    }

    /// Closed-form homogenized system on the slow state.
    ///
    /// For affine coefficients the frozen-fast law is Gaussian with mean
    /// `-Fz^{-1} Fx x` and covariance `S` solving `Fz S + S Fz^T + g g^T = 0`;
    /// the cell problem is solved by `u = -Iz Fz^{-1} (z - zbar(x))`, giving
    /// `atilde = -(Iz S Fz^{-T} Iz^T + Iz Fz^{-1} S Iz^T)` and `btilde = 0`.
    /// Noise columns are ordered `(Wtilde, Whatt, W)`.
    pub fn averaged_system(
        &self,
        corr: &Correlation,
        init: &InitialLaw,
    ) -> Result<LinearGaussianSpec> {
        let m = self.bx.nrows();
        let w = self.sigma.ncols();
        let d = self.hx.nrows();
        let fz_inv = self
            .fz
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("Fz is singular".into()))?;
        let shift = -(&fz_inv * &self.fx);
        let s = lyapunov_stationary(&self.fz, &(&self.g * self.g.transpose()))?;
        let a = &self.bx + &self.bz * &shift;
        let atilde = -(&self.iz * &s * fz_inv.transpose() * self.iz.transpose()
            + &self.iz * &fz_inv * &s * self.iz.transpose());
        let (atilde_root, _) = linalg::psd_sqrt(&atilde);
        let hbar = &corr.kappa_inv * (&self.hx + &self.hz * &shift);
        let mut noise = DMatrix::zeros(m, 2 * m + w);
        noise.view_mut((0, 0), (m, m)).copy_from(&atilde_root);
        noise.view_mut((0, 2 * m), (m, w)).copy_from(&self.sigma);
        let mut alpha = DMatrix::zeros(d, 2 * m + w);
        alpha.view_mut((0, 2 * m), (d, w)).copy_from(&corr.alpha_w);
        let (m0, p0) = init.moments();
        Ok(LinearGaussianSpec {
            a,
            noise,
            h: hbar,
            alpha_w: alpha,
            gamma_w: corr.gamma_w.clone(),
            m0: nalgebra::DVector::from_column_slice(&m0[..m]),
            p0: p0.view((0, 0), (m, m)).into_owned(),
        })
    }
}

/// Solves `F S + S F^T + Q = 0` by vectorization.
fn lyapunov_stationary(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let big = id.kronecker(f) + f.kronecker(&id);
    let rhs = -nalgebra::DVector::from_column_slice(q.as_slice());
    let sol = big
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidArgument("fast drift is not Hurwitz".into()))?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// One filtering problem.
#[derive(Clone)]
pub struct MultiscaleModel {
    pub name: String,
    pub dims: Dims,
    b: Field,
    b_i: Field,
    sigma: Field,
    f: Field,
    g: Field,
    h: Field,
    pub alpha: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub init: InitialLaw,
    pub flags: ModelFlags,
    pub correlation: Correlation,
    pub noise: NoiseDecomposition,
    pub linear: Option<LinearCoefficients>,
    kappa_inv_rm: Vec<f64>,
    alpha_w_rm: Vec<f64>,
    gamma_w_rm: Vec<f64>,
    proj_rm: Vec<f64>,
    c_rm: Vec<f64>,
}

impl std::fmt::Debug for MultiscaleModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MultiscaleModel")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("flags", &self.flags)
            .finish_non_exhaustive()
    }
}

fn zero_field() -> Field {
    Arc::new(|_, _, out: &mut [f64]| out.fill(0.0))
}

pub struct ModelBuilder {
    name: String,
    dims: Dims,
    b: Field,
    b_i: Field,
    sigma: Field,
    f: Field,
    g: Field,
    h: Field,
    alpha: DMatrix<f64>,
    gamma: DMatrix<f64>,
    init: InitialLaw,
    flags: ModelFlags,
    linear: Option<LinearCoefficients>,
}

impl ModelBuilder {
    pub fn slow_drift(mut self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.b = Arc::new(f);
        self
    }
    pub fn intermediate_drift(mut self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.b_i = Arc::new(f);
        self
    }
    pub fn slow_dispersion(mut self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sigma = Arc::new(f);
        self
    }
    pub fn fast_drift(mut self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.f = Arc::new(f);
        self
    }
    pub fn fast_dispersion(mut self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.g = Arc::new(f);
        self
    }
    pub fn sensor(mut self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.h = Arc::new(f);
        self
    }
    pub fn correlation(mut self, alpha: DMatrix<f64>, gamma: DMatrix<f64>) -> Self {
        self.alpha = alpha;
        self.gamma = gamma;
        self
    }
    pub fn init(mut self, init: InitialLaw) -> Self {
        self.init = init;
        self
    }
    pub fn flags(mut self, flags: ModelFlags) -> Self {
        self.flags = flags;
        self
    }

    /// Installs every coefficient from affine matrices and marks the model
    /// linear-Gaussian.
    pub fn linear(mut self, lin: LinearCoefficients) -> Self {
        let dims = self.dims;
        let affine = |px: DMatrix<f64>, pz: DMatrix<f64>| -> Field {
            let rows = px.nrows();
            let px = linalg::to_row_major(&px);
            let pz = linalg::to_row_major(&pz);
            let (m, n) = (dims.m, dims.n);
            Arc::new(move |x: &[f64], z: &[f64], out: &mut [f64]| {
                out.fill(0.0);
                gemv_acc(&px, rows, m, x, out);
                gemv_acc(&pz, rows, n, z, out);
            })
        };
        let constant = |c: DMatrix<f64>| -> Field {
            let c = linalg::to_row_major(&c);
            Arc::new(move |_: &[f64], _: &[f64], out: &mut [f64]| out.copy_from_slice(&c))
        };
        self.b = affine(lin.bx.clone(), lin.bz.clone());
        self.b_i = affine(lin.ix.clone(), lin.iz.clone());
        self.f = affine(lin.fx.clone(), lin.fz.clone());
        self.h = affine(lin.hx.clone(), lin.hz.clone());
        self.sigma = constant(lin.sigma.clone());
        self.g = constant(lin.g.clone());
        self.flags.linear_gaussian = true;
        self.linear = Some(lin);
        self
    }

    pub fn build(self) -> Result<MultiscaleModel> {
        let dims = self.dims;
        if self.alpha.shape() != (dims.d, dims.w) || self.gamma.shape() != (dims.d, dims.u) {
            return Err(Error::Dimension(format!(
                "alpha must be {}x{} and gamma {}x{}",
                dims.d, dims.w, dims.d, dims.u
            )));
        }
        self.init.check(dims)?;
        let correlation = build_correlation(&self.alpha, &self.gamma)?;
        let noise = decompose_noise(&correlation)?;
        let model = MultiscaleModel {
            name: self.name,
            dims,
            b: self.b,
            b_i: self.b_i,
            sigma: self.sigma,
            f: self.f,
            g: self.g,
            h: self.h,
            alpha: self.alpha,
            gamma: self.gamma,
            init: self.init,
            flags: self.flags,
            kappa_inv_rm: linalg::to_row_major(&correlation.kappa_inv),
            alpha_w_rm: linalg::to_row_major(&correlation.alpha_w),
            gamma_w_rm: linalg::to_row_major(&correlation.gamma_w),
            proj_rm: linalg::to_row_major(&noise.proj),
            c_rm: linalg::to_row_major(&noise.c),
            correlation,
            noise,
            linear: self.linear,
        };
        if model.flags.linear_gaussian {
            let defect = linearity_defect(&model, RootSeed(0x11ea), 16);
            if defect > 1e-8 {
                return Err(Error::InvalidArgument(format!(
                    "model declared linear-Gaussian but coefficients are not affine (defect {defect:.3e})"
                )));
            }
        }
        Ok(model)
    }
}

impl MultiscaleModel {
    pub fn builder(name: impl Into<String>, dims: Dims) -> ModelBuilder {
        ModelBuilder {
            name: name.into(),
            dims,
            b: zero_field(),
            b_i: zero_field(),
            sigma: zero_field(),
            f: zero_field(),
            g: zero_field(),
            h: zero_field(),
            alpha: DMatrix::zeros(dims.d, dims.w),
            gamma: DMatrix::identity(dims.d, dims.u),
            init: InitialLaw::Point {
                x: vec![0.0; dims.m],
                z: vec![0.0; dims.n],
            },
            flags: ModelFlags::default(),
            linear: None,
        }
    }

    #[inline]
    pub fn slow_drift(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        (self.b)(x, z, out)
    }
    #[inline]
    pub fn intermediate_drift(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        (self.b_i)(x, z, out)
    }
    /// `m x w`, row-major.
    #[inline]
    pub fn slow_dispersion(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        (self.sigma)(x, z, out)
    }
    #[inline]
    pub fn fast_drift(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        (self.f)(x, z, out)
    }
    /// `n x v`, row-major.
    #[inline]
    pub fn fast_dispersion(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        (self.g)(x, z, out)
    }
    /// Sensor before whitening.
    #[inline]
    pub fn raw_sensor(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        (self.h)(x, z, out)
    }

    /// Whitened sensor `kappa^{-1} h(x, z)`.
    #[inline]
    pub fn sensor(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        (self.h)(x, z, out);
        let d = self.dims.d;
        // kappa^{-1} is lower triangular, so rows can be updated bottom-up in place.
        for i in (0..d).rev() {
            let row = &self.kappa_inv_rm[i * d..i * d + i + 1];
            let mut s = 0.0;
            for j in 0..=i {
                s += row[j] * out[j];
            }
            out[i] = s;
        }
    }

    /// `alpha_w`, `d x w` row-major.
    pub fn alpha_w_rm(&self) -> &[f64] {
        &self.alpha_w_rm
    }
    /// `gamma_w`, `d x u` row-major.
    pub fn gamma_w_rm(&self) -> &[f64] {
        &self.gamma_w_rm
    }
    /// `alpha_w^T`, `w x d` row-major.
    pub fn proj_rm(&self) -> &[f64] {
        &self.proj_rm
    }
    /// Complementary factor `C`, `w x w` row-major.
    pub fn complement_rm(&self) -> &[f64] {
        &self.c_rm
    }

    /// Replaces the sensor (used for reference-measure experiments with `h = 0`).
    pub fn with_sensor(&self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        let mut out = self.clone();
        out.h = Arc::new(f);
        out.linear = None;
        out.flags.linear_gaussian = false;
        out
    }
}

/// Largest deviation from affinity over random probe triples, across every
/// coefficient field.
pub fn linearity_defect(model: &MultiscaleModel, seed: RootSeed, probes: usize) -> f64 {
    let Dims { m, n, w, v, d, .. } = model.dims;
    let mut rng = seed.stream("linearity-probe", 0);
    let fields: [(&Field, usize); 6] = [
        (&model.b, m),
        (&model.b_i, m),
        (&model.sigma, m * w),
        (&model.f, n),
        (&model.g, n * v),
        (&model.h, d),
    ];
    let mut worst = 0.0_f64;
    let mut p = vec![0.0; m + n];
    let mut q = vec![0.0; m + n];
    let mut r = vec![0.0; m + n];
    for _ in 0..probes {
        fill_normal(&mut rng, 2.0, &mut p);
        fill_normal(&mut rng, 2.0, &mut q);
        let lam: f64 = rand::Rng::random(&mut rng);
        for i in 0..m + n {
            r[i] = lam * p[i] + (1.0 - lam) * q[i];
        }
        for (field, len) in fields {
            let mut fp = vec![0.0; len];
            let mut fq = vec![0.0; len];
            let mut fr = vec![0.0; len];
            field(&p[..m], &p[m..], &mut fp);
            field(&q[..m], &q[m..], &mut fq);
            field(&r[..m], &r[m..], &mut fr);
            for k in 0..len {
                let dev = (fr[k] - lam * fp[k] - (1.0 - lam) * fq[k]).abs();
                let scale = 1.0 + fp[k].abs().max(fq[k].abs());
                worst = worst.max(dev / scale);
            }
        }
    }
    worst
}

/// A whitened observation path on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub times: Vec<f64>,
    pub d: usize,
    /// Cumulative `Y`, `(len) x d` row-major, `Y_0 = 0`.
    pub y: Vec<f64>,
}

impl ObservationPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn max_dt(&self) -> f64 {
        (0..self.steps()).map(|k| self.dt(k)).fold(0.0, f64::max)
    }

    /// `Y_{k+1} - Y_k`.
    pub fn increment(&self, k: usize, out: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            out[i] = self.y[(k + 1) * d + i] - self.y[k * d + i];
        }
    }

    /// A standard `d`-dimensional Brownian path, i.e. an observation drawn
    /// under the reference measure.
    pub fn brownian(d: usize, horizon: f64, dt: f64, seed: RootSeed) -> Result<Self> {
        let times = uniform_grid(horizon, dt)?;
        let mut rng = seed.stream("reference-observation", 0);
        let mut y = vec![0.0; times.len() * d];
        let mut inc = vec![0.0; d];
        for k in 0..times.len() - 1 {
            let h = times[k + 1] - times[k];
            fill_normal(&mut rng, h.sqrt(), &mut inc);
            for i in 0..d {
                y[(k + 1) * d + i] = y[k * d + i] + inc[i];
            }
        }
        Ok(ObservationPath { times, d, y })
    }
}

/// `ceil(horizon / dt)` equal steps covering `[0, horizon]`.
pub fn uniform_grid(horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be > 0, got {horizon}")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    let steps = ((horizon / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let h = horizon / steps as f64;
    Ok((0..=steps)
        .map(|k| if k == steps { horizon } else { k as f64 * h })
        .collect())
}

/// Checks the fast-resolution rule `dt <= c eps^2`.
pub fn check_step(eps: f64, dt: f64, dt_factor: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1], got {eps}")));
    }
    let limit = dt_factor * eps * eps;
    if dt > limit * (1.0 + 1e-9) {
        return Err(Error::StepTooCoarse { dt, limit });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationOptions {
    pub dt_factor: f64,
    pub blowup_guard: f64,
    pub keep_increments: bool,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            dt_factor: DEFAULT_DT_FACTOR,
            blowup_guard: DEFAULT_BLOWUP_GUARD,
            keep_increments: false,
        }
    }
}

/// A simulated signal/observation realization.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub times: Vec<f64>,
    pub dims: Dims,
    /// `(len) x m` row-major.
    pub x: Vec<f64>,
    /// `(len) x n` row-major.
    pub z: Vec<f64>,
    /// Whitened cumulative observation, `(len) x d` row-major.
    pub y: Vec<f64>,
    /// Signal-noise increments `dW`, `(len - 1) x w`.
    pub dw: Option<Vec<f64>>,
    /// Whitened observation-noise increments `dB = alpha_w dW + gamma_w dU`.
    pub db: Option<Vec<f64>>,
    pub seed: RootSeed,
    pub eps: f64,
}

impl PathBundle {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.dims.m..(k + 1) * self.dims.m]
    }

    pub fn z_at(&self, k: usize) -> &[f64] {
        &self.z[k * self.dims.n..(k + 1) * self.dims.n]
    }

    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.dims.d..(k + 1) * self.dims.d]
    }

    pub fn observation(&self) -> ObservationPath {
        ObservationPath {
            times: self.times.clone(),
            d: self.dims.d,
            y: self.y.clone(),
        }
    }

    /// CSV `t,X1..Xm,Z1..Zn,Y1..Yd`, optionally preceded by a `# ...`
    /// provenance line.
    pub fn write_csv<W: Write>(&self, mut out: W, provenance: Option<&str>) -> Result<()> {
        if let Some(p) = provenance {
            writeln!(out, "# {p}")?;
        }
        let Dims { m, n, d, .. } = self.dims;
        let mut header = vec!["t".to_string()];
        header.extend((1..=m).map(|i| format!("X{i}")));
        header.extend((1..=n).map(|i| format!("Z{i}")));
        header.extend((1..=d).map(|i| format!("Y{i}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![fmt_g17(self.times[k])];
            row.extend(self.x_at(k).iter().map(|v| fmt_g17(*v)));
            row.extend(self.z_at(k).iter().map(|v| fmt_g17(*v)));
            row.extend(self.y_at(k).iter().map(|v| fmt_g17(*v)));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Euler–Maruyama simulation of the signal and whitened observation.
///
/// The observation increment reuses the slow state's `dW`, which is what
/// correlates the observation with the signal.
pub fn simulate_multiscale(
    model: &MultiscaleModel,
    eps: f64,
    dt: f64,
    horizon: f64,
    seed: RootSeed,
    opts: &SimulationOptions,
) -> Result<PathBundle> {
    check_step(eps, dt, opts.dt_factor)?;
    let times = uniform_grid(horizon, dt)?;
    let Dims { m, n, w, v, u, d } = model.dims;
    let len = times.len();

    let mut rng_init = seed.stream("init", 0);
    let mut rng_w = seed.stream("signal-W", 0);
    let mut rng_v = seed.stream("fast-V", 0);
    let mut rng_u = seed.stream("obs-U", 0);

    let mut xs = vec![0.0; len * m];
    let mut zs = vec![0.0; len * n];
    let mut ys = vec![0.0; len * d];
    let mut dws = opts.keep_increments.then(|| vec![0.0; (len - 1) * w]);
    let mut dbs = opts.keep_increments.then(|| vec![0.0; (len - 1) * d]);

    let mut x = vec![0.0; m];
    let mut z = vec![0.0; n];
    model.init.sample_x(&mut rng_init, &mut x);
    model.init.sample_z(&mut rng_init, &mut z);
    xs[..m].copy_from_slice(&x);
    zs[..n].copy_from_slice(&z);

    let mut drift = vec![0.0; m];
    let mut inter = vec![0.0; m];
    let mut sig = vec![0.0; m * w];
    let mut fdrift = vec![0.0; n];
    let mut gdisp = vec![0.0; n * v];
    let mut hval = vec![0.0; d];
    let mut dw = vec![0.0; w];
    let mut dv = vec![0.0; v];
    let mut du = vec![0.0; u];
    let mut db = vec![0.0; d];

    for k in 0..len - 1 {
        let h = times[k + 1] - times[k];
        let sq = h.sqrt();
        fill_normal(&mut rng_w, sq, &mut dw);
        fill_normal(&mut rng_v, sq, &mut dv);
        fill_normal(&mut rng_u, sq, &mut du);

        model.slow_drift(&x, &z, &mut drift);
        model.intermediate_drift(&x, &z, &mut inter);
        model.slow_dispersion(&x, &z, &mut sig);
        model.fast_drift(&x, &z, &mut fdrift);
        model.fast_dispersion(&x, &z, &mut gdisp);
        model.sensor(&x, &z, &mut hval);

        db.fill(0.0);
        gemv_acc(model.alpha_w_rm(), d, w, &dw, &mut db);
        gemv_acc(model.gamma_w_rm(), d, u, &du, &mut db);

        let mut xn = x.clone();
        for i in 0..m {
            xn[i] += (drift[i] + inter[i] / eps) * h;
        }
        gemv_acc(&sig, m, w, &dw, &mut xn);
        let mut zn = z.clone();
        for i in 0..n {
            zn[i] += fdrift[i] / (eps * eps) * h;
        }
        let mut gz = vec![0.0; n];
        gemv_acc(&gdisp, n, v, &dv, &mut gz);
        for i in 0..n {
            zn[i] += gz[i] / eps;
        }
        for i in 0..d {
            ys[(k + 1) * d + i] = ys[k * d + i] + hval[i] * h + db[i];
        }
        x = xn;
        z = zn;

        let state_norm = (linalg::dot(&x, &x) + linalg::dot(&z, &z)).sqrt();
        if !(state_norm <= opts.blowup_guard) {
            return Err(Error::NumericalBlowup {
                t: times[k + 1],
                norm: state_norm,
            });
        }
        xs[(k + 1) * m..(k + 2) * m].copy_from_slice(&x);
        zs[(k + 1) * n..(k + 2) * n].copy_from_slice(&z);
        if let Some(buf) = dws.as_mut() {
            buf[k * w..(k + 1) * w].copy_from_slice(&dw);
        }
        if let Some(buf) = dbs.as_mut() {
            buf[k * d..(k + 1) * d].copy_from_slice(&db);
        }
    }

    Ok(PathBundle {
        times,
        dims: model.dims,
        x: xs,
        z: zs,
        y: ys,
        dw: dws,
        db: dbs,
        seed,
        eps,
    })
}
