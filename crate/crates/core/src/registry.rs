//! Named models with documented analytic facts.
//!
//! Every entry uses the unit Ornstein–Uhlenbeck fast process `f = -z`,
//! `g = sqrt(2)`, whose frozen stationary law is `N(0, 1)` for every `x`.

use std::f64::consts::SQRT_2;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sde::{Dims, InitialLaw, LinearCoefficients, ModelFlags, MultiscaleModel};

/// Strength `c` of the intermediate forcing `b_I = c z` in `ou-linear`.
pub const OU_LINEAR_C: f64 = 1.0;
/// Observation correlation of `ou-linear`; `K = 1.25`, so whitening is non-trivial.
pub const OU_LINEAR_ALPHA: f64 = 0.5;
pub const OU_LINEAR_GAMMA: f64 = 1.0;

pub const OU_DECAY_ALPHA: f64 = 0.6;
pub const OU_DECAY_GAMMA: f64 = 0.8;

pub struct RegistryEntry {
    pub name: &'static str,
    pub summary: &'static str,
    /// Closed-form facts, each exercised by the test-suite.
    pub facts: &'static [&'static str],
    /// Which of the averaging hypotheses hold.
    pub hypotheses: &'static [&'static str],
    /// Initial law, in words.
    pub initial_law: &'static str,
    pub has_oracle: bool,
    build: fn() -> Result<MultiscaleModel>,
}

impl RegistryEntry {
    pub fn build(&self) -> Result<MultiscaleModel> {
        (self.build)()
    }
}

impl std::fmt::Debug for RegistryEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegistryEntry").field("name", &self.name).finish_non_exhaustive()
    }
}

static ENTRIES: [RegistryEntry; 3] = [
    RegistryEntry {
        name: "ou-linear",
        summary: "linear-Gaussian slow/fast OU pair with b_I = c z and h = x",
        facts: &[
            "mu_inf(x) = N(0, 1)",
            "Poisson solution u(x, z) = c z",
            "abar = 1, sigbar = 1, bbar = -x, hbar = x / sqrt(K)",
            "atilde = 2 c^2, btilde = 0",
            "joint and averaged systems are linear-Gaussian: Kalman-Bucy oracle available",
        ],
        hypotheses: &[
            "H_f holds with exponent 2, H_g holds with lambda = Lambda = 2",
            "b_I centered (odd in z, symmetric mu_inf)",
            "b_I grows linearly in z: OUTSIDE the decay hypothesis beta < -2; kept for the exact oracle",
            "h unbounded (linear)",
        ],
        initial_law: "X_0 ~ N(0, 1), Z_0 ~ N(0, 1) independent",
        has_oracle: true,
        build: ou_linear,
    },
    RegistryEntry {
        name: "ou-decay",
        summary: "b_I = c(x) z exp(-z^2) with c(x) = 3 + sin x, bounded nonlinear sensor",
        facts: &[
            "mu_inf(x) = N(0, 1)",
            "Poisson solution has u_z = c(x) exp(-z^2) / 3",
            "atilde(x) = 2 c(x)^2 / (9 sqrt 5), btilde(x) = c(x) c'(x) / (9 sqrt 5)",
            "hbar(x) = tanh(x) + 2 exp(-1/2), sigbar = 0.5 + 0.3 exp(-1/2)",
            "abar = 0.25 + 0.3 exp(-1/2) + 0.045 (1 + exp(-2))",
        ],
        hypotheses: &[
            "H_f holds with exponent 2, H_g holds with lambda = Lambda = 2",
            "b_I centered and decays faster than any power of |z| (beta < -2 holds)",
            "h bounded",
        ],
        initial_law: "X_0 ~ N(0, 1), Z_0 ~ N(0, 1) independent",
        has_oracle: false,
        build: ou_decay,
    },
    RegistryEntry {
        name: "z-free",
        summary: "no coefficient depends on z and b_I = 0",
        facts: &["averaging is the identity: bbar = b, abar = sigma^2, hbar = h, atilde = btilde = 0"],
        hypotheses: &["all hold trivially; h bounded"],
        initial_law: "X_0 ~ N(0, 1), Z_0 ~ N(0, 1) independent",
        has_oracle: false,
        build: z_free,
    },
];

pub fn entries() -> &'static [RegistryEntry] {
    &ENTRIES
}

pub fn lookup(name: &str) -> Result<&'static RegistryEntry> {
    ENTRIES
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::UnknownModel(name.to_string()))
}

pub fn build(name: &str) -> Result<MultiscaleModel> {
    lookup(name)?.build()
}

fn scalar_dims() -> Dims {
    Dims { m: 1, n: 1, w: 1, v: 1, u: 1, d: 1 }
}

fn standard_init() -> InitialLaw {
    InitialLaw::Gaussian {
        x_mean: vec![0.0],
        x_std: vec![1.0],
        z_mean: vec![0.0],
        z_std: vec![1.0],
    }
}

fn s(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

pub fn ou_linear_coefficients() -> LinearCoefficients {
    LinearCoefficients {
        bx: s(-1.0),
        bz: s(0.0),
        ix: s(0.0),
        iz: s(OU_LINEAR_C),
        sigma: s(1.0),
        fx: s(0.0),
        fz: s(-1.0),
        g: s(SQRT_2),
        hx: s(1.0),
        hz: s(0.0),
    }
}

fn ou_linear() -> Result<MultiscaleModel> {
    MultiscaleModel::builder("ou-linear", scalar_dims())
        .linear(ou_linear_coefficients())
        .correlation(s(OU_LINEAR_ALPHA), s(OU_LINEAR_GAMMA))
        .init(standard_init())
        .flags(ModelFlags {
            centered_intermediate: true,
            bounded_sensor: false,
            linear_gaussian: true,
        })
        .build()
}

/// `c(x)` of `ou-decay`.
pub fn ou_decay_strength(x: f64) -> f64 {
    3.0 + x.sin()
}

fn ou_decay() -> Result<MultiscaleModel> {
    MultiscaleModel::builder("ou-decay", scalar_dims())
        .slow_drift(|x, _, out| out[0] = -x[0])
        .intermediate_drift(|x, z, out| out[0] = ou_decay_strength(x[0]) * z[0] * (-z[0] * z[0]).exp())
        .slow_dispersion(|_, z, out| out[0] = 0.5 + 0.3 * z[0].cos())
        .fast_drift(|_, z, out| out[0] = -z[0])
        .fast_dispersion(|_, _, out| out[0] = SQRT_2)
        .sensor(|x, z, out| out[0] = x[0].tanh() + 2.0 * z[0].cos())
        .correlation(s(OU_DECAY_ALPHA), s(OU_DECAY_GAMMA))
        .init(standard_init())
        .flags(ModelFlags {
            centered_intermediate: true,
            bounded_sensor: true,
            linear_gaussian: false,
        })
        .build()
}

fn z_free() -> Result<MultiscaleModel> {
    MultiscaleModel::builder("z-free", scalar_dims())
        .slow_drift(|x, _, out| out[0] = -x[0])
        .slow_dispersion(|x, _, out| out[0] = 0.8 + 0.2 * x[0].cos())
        .fast_drift(|_, z, out| out[0] = -z[0])
        .fast_dispersion(|_, _, out| out[0] = SQRT_2)
        .sensor(|x, _, out| out[0] = 2.0 * x[0].tanh())
        .correlation(s(0.6), s(0.8))
        .init(standard_init())
        .flags(ModelFlags {
            centered_intermediate: true,
            bounded_sensor: true,
            linear_gaussian: false,
        })
        .build()
}
