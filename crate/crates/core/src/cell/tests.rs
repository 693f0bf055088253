use std::f64::consts::SQRT_2;

use super::*;
use crate::error::{Error, Warning};
use crate::registry;
use crate::rng::RootSeed;
use crate::sde::{Dims, ModelFlags, MultiscaleModel};

fn scalar() -> Dims {
    Dims { m: 1, n: 1, w: 1, v: 1, u: 1, d: 1 }
}

/// Unit OU fast process with a caller-supplied intermediate drift.
fn ou_with(b_i: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> MultiscaleModel {
    MultiscaleModel::builder("ou-test", scalar())
        .fast_drift(|_, z, out| out[0] = -z[0])
        .fast_dispersion(|_, _, out| out[0] = SQRT_2)
        .intermediate_drift(b_i)
        .flags(ModelFlags { centered_intermediate: true, ..Default::default() })
        .build()
        .unwrap()
}

fn within(est: f64, truth: f64, se: f64, k: f64) -> bool {
    (est - truth).abs() <= k * se
}

#[test]
fn ou_stationary_moments() {
    let model = ou_with(|_, z, out| out[0] = z[0]);
    let params = SamplerParams { n_samples: 20_000, thinning: 1.0, ..Default::default() };
    let stat = estimate_stationary(&model, &[0.0], &params, RootSeed(1)).unwrap();
    assert!(stat.warnings.is_empty());
    let (mean, mean_se) = stat.average(|z| z[0]);
    let (second, second_se) = stat.average(|z| z[0] * z[0]);
    // Euler-Maruyama shifts the stationary variance to 2 / (2 - dt).
    let var_em = 2.0 / (2.0 - params.dt);
    assert!(within(mean, 0.0, mean_se, 3.0), "{mean} +- {mean_se}");
    assert!(within(second, var_em, second_se, 3.0), "{second} +- {second_se}");
}

#[test]
fn ou_stationary_cosine_average() {
    let model = ou_with(|_, z, out| out[0] = z[0]);
    let params = SamplerParams { n_samples: 20_000, thinning: 1.0, dt: 0.002, ..Default::default() };
    let stat = estimate_stationary(&model, &[0.0], &params, RootSeed(2)).unwrap();
    let (c, se) = stat.average(|z| z[0].cos());
    assert!(within(c, (-0.5f64).exp(), se, 3.0), "{c} +- {se}");
}

#[test]
fn shifted_ou_centers_on_slow_state() {
    let model = MultiscaleModel::builder("shifted", scalar())
        .fast_drift(|x, z, out| out[0] = -(z[0] - x[0]))
        .fast_dispersion(|_, _, out| out[0] = SQRT_2)
        .build()
        .unwrap();
    let params = SamplerParams { n_samples: 10_000, thinning: 1.0, ..Default::default() };
    let stat = estimate_stationary(&model, &[1.7], &params, RootSeed(3)).unwrap();
    let (mean, se) = stat.average(|z| z[0]);
    assert!(within(mean, 1.7, se, 3.0), "{mean} +- {se}");
}

#[test]
fn slow_mixing_raises_ergodicity_warning() {
    let model = MultiscaleModel::builder("sluggish", scalar())
        .fast_drift(|_, z, out| out[0] = -0.01 * z[0])
        .fast_dispersion(|_, _, out| out[0] = 0.1)
        .build()
        .unwrap();
    let params = SamplerParams { n_samples: 200, thinning: 0.1, ..Default::default() };
    let stat = estimate_stationary(&model, &[0.0], &params, RootSeed(4)).unwrap();
    assert!(matches!(stat.warnings.as_slice(), [Warning::Ergodicity { .. }]));
}

#[test]
fn semigroup_at_time_zero_is_exact() {
    let model = ou_with(|_, z, out| out[0] = z[0]);
    let est = semigroup_mc(&model, &[0.0], &|z| z[0].cos(), 0.0, &[0.3], 10, &Default::default(), RootSeed(5))
        .unwrap();
    assert_eq!(est.mean, 0.3f64.cos());
    assert_eq!(est.stderr, 0.0);
}

#[test]
fn semigroup_matches_ou_cosine_formula() {
    let model = ou_with(|_, z, out| out[0] = z[0]);
    let exact = |t: f64, z: f64| (-(1.0 - (-2.0 * t).exp()) / 2.0).exp() * ((-t).exp() * z).cos();
    for (t, z) in [(0.5, 1.0), (10.0, -2.0)] {
        let est = semigroup_mc(&model, &[0.0], &|z| z[0].cos(), t, &[z], 20_000, &Default::default(), RootSeed(6))
            .unwrap();
        assert!(within(est.mean, exact(t, z), est.stderr, 3.0), "t={t} z={z}: {est:?}");
    }
    assert!((exact(10.0, -2.0) - (-0.5f64).exp()).abs() < 1e-8);
}

#[test]
fn semigroup_rejects_negative_time() {
    let model = ou_with(|_, z, out| out[0] = z[0]);
    let r = semigroup_mc(&model, &[0.0], &|z| z[0], -1.0, &[0.0], 10, &Default::default(), RootSeed(7));
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn centering_checks() {
    let params = SamplerParams { n_samples: 5_000, thinning: 1.0, ..Default::default() };
    let odd = ou_with(|_, z, out| out[0] = z[0] * (-z[0] * z[0]).exp());
    let stat = estimate_stationary(&odd, &[0.0], &params, RootSeed(8)).unwrap();
    assert!(check_centering(&odd, &[0.0], &stat).is_centered(3.0));

    let constant = ou_with(|_, _, out| out[0] = 1.0);
    let chk = check_centering(&constant, &[0.0], &stat);
    assert!((chk.residual[0] - 1.0).abs() < 1e-12);
    assert!(!chk.is_centered(3.0));
    let r = solve_poisson(&constant, &[0.0], &PoissonParams { sampler: params, ..Default::default() }, RootSeed(9));
    assert!(matches!(r, Err(Error::NotCentered { .. })));
}

#[test]
fn poisson_of_zero_forcing_is_zero() {
    let model = registry::build("z-free").unwrap();
    let sol = solve_poisson(&model, &[0.4], &PoissonParams::default(), RootSeed(10)).unwrap();
    assert_eq!(sol.evaluate(&[1.3]), vec![0.0]);
    assert_eq!(sol.evaluate_dx(&[1.3])[(0, 0)], 0.0);
    assert!(sol.sample_u.iter().all(|v| *v == 0.0));
}

#[test]
fn poisson_of_linear_forcing_is_identity() {
    let model = ou_with(|_, z, out| out[0] = z[0]);
    let params = PoissonParams {
        sampler: SamplerParams { n_samples: 4_000, thinning: 2.0, ..Default::default() },
        t_max: Some(10.0),
        ..Default::default()
    };
    let sol = solve_poisson(&model, &[0.0], &params, RootSeed(11)).unwrap();
    // Centering noise shifts u by a constant of order 1/sqrt(ESS).
    let shift_tol = 4.0 / sol.stationary.ess.sqrt();
    for z in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let u = sol.evaluate(&[z])[0];
        assert!((u - z).abs() < 0.01 * z.abs() + shift_tol, "u({z}) = {u}");
        assert!(sol.generator_residual(&[z], 0.05)[0].abs() < 0.05);
    }
    assert_eq!(sol.evaluate_dx(&[1.0])[(0, 0)], 0.0);
}

#[test]
fn automatic_horizon_tracks_mixing_time() {
    let model = ou_with(|_, z, out| out[0] = z[0]);
    let sol = solve_poisson(&model, &[0.0], &PoissonParams::default(), RootSeed(12)).unwrap();
    // OU autocorrelation e^{-t} crosses 1/e at t = 1.
    assert!(sol.t_max > 10.0 && sol.t_max < 40.0, "t_max = {}", sol.t_max);
    assert!(sol.warnings.iter().all(|w| !matches!(w, Warning::Truncation { .. })));
}

#[test]
fn short_horizon_raises_truncation_warning() {
    let model = ou_with(|_, z, out| out[0] = z[0]);
    let params = PoissonParams { t_max: Some(0.2), ..Default::default() };
    let sol = solve_poisson(&model, &[0.0], &params, RootSeed(13)).unwrap();
    assert!(sol.warnings.iter().any(|w| matches!(w, Warning::Truncation { .. })));
}

#[test]
fn assumption_diagnostics() {
    let ou = registry::build("ou-linear").unwrap();
    let probes = AssumptionProbes::random(&ou, 40, RootSeed(14));
    let rep = check_assumptions(&ou, &probes);
    assert!(rep.recurrence_ok && rep.recurrence_margin > 0.0);
    assert!((rep.ellipticity_lambda - 2.0).abs() < 1e-12);
    assert!((rep.ellipticity_cap - 2.0).abs() < 1e-12);

    let repelling = MultiscaleModel::builder("repelling", scalar())
        .fast_drift(|_, z, out| out[0] = z[0])
        .fast_dispersion(|_, _, out| out[0] = SQRT_2)
        .build()
        .unwrap();
    let rep = check_assumptions(&repelling, &probes);
    assert!(!rep.recurrence_ok);
    assert!(rep.to_string().contains("VIOLATED"));
}

fn small_averaging() -> AveragingParams {
    AveragingParams {
        poisson: PoissonParams {
            sampler: SamplerParams { n_samples: 4_000, thinning: 1.0, ..Default::default() },
            t_max: Some(8.0),
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn averaging_z_free_model_is_identity() {
    let model = registry::build("z-free").unwrap();
    let grid = TensorGrid::uniform(&[-2.0], &[2.0], &[5]).unwrap();
    let avg = averaged_coefficients(&model, &grid, &small_averaging(), RootSeed(15)).unwrap();
    let mut b = [0.0];
    let mut s = [0.0];
    let mut h = [0.0];
    for k in 0..grid.node_count() {
        let x = grid.node(k);
        model.slow_drift(&x, &[0.0], &mut b);
        model.slow_dispersion(&x, &[0.0], &mut s);
        model.sensor(&x, &[0.0], &mut h);
        let node = avg.node(k);
        assert!((node.bbar[0] - b[0]).abs() < 1e-12);
        assert!((node.hbar[0] - h[0]).abs() < 1e-12);
        assert!((node.sigbar[(0, 0)] - s[0]).abs() < 1e-12);
        assert!((node.abar[(0, 0)] - s[0] * s[0]).abs() < 1e-12);
        assert_eq!(node.atilde[(0, 0)], 0.0);
        assert_eq!(node.btilde[0], 0.0);
    }
}

#[test]
fn averaging_ou_linear_gives_twice_c_squared() {
    let model = registry::build("ou-linear").unwrap();
    let grid = TensorGrid::uniform(&[-1.0], &[1.0], &[3]).unwrap();
    let avg = averaged_coefficients(&model, &grid, &small_averaging(), RootSeed(16)).unwrap();
    let c = registry::OU_LINEAR_C;
    for k in 0..3 {
        let node = avg.node(k);
        let se = avg.diagnostics[k].atilde_se[0];
        // 1% allowance for the Euler and trapezoid biases.
        assert!(
            (node.atilde[(0, 0)] - 2.0 * c * c).abs() <= 3.0 * se + 0.02,
            "atilde = {} +- {se}",
            node.atilde[(0, 0)]
        );
        assert_eq!(node.btilde[0], 0.0);
        let kappa = (registry::OU_LINEAR_ALPHA.powi(2) + registry::OU_LINEAR_GAMMA.powi(2)).sqrt();
        assert!((node.hbar[0] - grid.node(k)[0] / kappa).abs() < 1e-12);
    }
}

/// `int (u_z)^2 dmu` for `b_I = z exp(-z^2)` by Simpson quadrature, where
/// `u_z = exp(-z^2) / 3` follows from integrating `u'' - z u' = -z exp(-z^2)`.
fn decay_dirichlet_energy() -> f64 {
    let (a, b, n) = (-10.0, 10.0, 4000);
    let h = (b - a) / n as f64;
    let f = |z: f64| {
        let uz = (-z * z).exp() / 3.0;
        uz * uz * (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn decay_energy_quadrature_matches_closed_form() {
    assert!((decay_dirichlet_energy() - 1.0 / (9.0 * 5f64.sqrt())).abs() < 1e-12);
}

#[test]
fn averaging_ou_decay_matches_quadrature() {
    let model = registry::build("ou-decay").unwrap();
    let grid = TensorGrid::uniform(&[-1.0], &[1.0], &[3]).unwrap();
    let mut params = small_averaging();
    params.poisson.sampler.n_samples = 8_000;
    let avg = averaged_coefficients(&model, &grid, &params, RootSeed(17)).unwrap();
    let kappa0 = decay_dirichlet_energy();
    for k in 0..3 {
        let x = grid.node(k)[0];
        let c = registry::ou_decay_strength(x);
        let node = avg.node(k);
        let diag = &avg.diagnostics[k];
        let at = 2.0 * c * c * kappa0;
        let bt = c * x.cos() * kappa0;
        assert!(
            (node.atilde[(0, 0)] - at).abs() <= 3.0 * diag.atilde_se[0] + 0.02 * at,
            "x={x}: atilde {} vs {at} (se {})",
            node.atilde[(0, 0)],
            diag.atilde_se[0]
        );
        assert!(
            (node.btilde[0] - bt).abs() <= 3.0 * diag.btilde_se[0] + 0.02 * bt.abs(),
            "x={x}: btilde {} vs {bt} (se {})",
            node.btilde[0],
            diag.btilde_se[0]
        );
        let hbar = x.tanh() + 2.0 * (-0.5f64).exp();
        assert!((node.hbar[0] - hbar).abs() <= 3.0 * diag.hbar_se[0] + 0.005);
    }
}

#[test]
fn averaged_factors_reproduce_targets() {
    let model = registry::build("ou-decay").unwrap();
    let grid = TensorGrid::uniform(&[-1.0], &[1.0], &[2]).unwrap();
    let avg = averaged_coefficients(&model, &grid, &small_averaging(), RootSeed(18)).unwrap();
    for k in 0..2 {
        let node = avg.node(k);
        let r = avg.atilde_root_at(k);
        assert!((&r * r.transpose() - &node.atilde).abs().max() < 1e-8);
        assert_eq!(node.atilde, node.atilde.transpose());
        let g = avg.gap_root_at(k);
        let gap = &node.abar - &node.sigbar * node.sigbar.transpose();
        assert!((&g * g.transpose() - gap).abs().max() < 1e-8);
        assert!(avg.diagnostics[k].gap_min_eig > -1e-12);
    }
}

#[test]
fn averaged_model_json_round_trip() {
    let model = registry::build("ou-linear").unwrap();
    let grid = TensorGrid::uniform(&[-1.0], &[1.0], &[2]).unwrap();
    let avg = averaged_coefficients(&model, &grid, &small_averaging(), RootSeed(19)).unwrap();
    let mut buf = Vec::new();
    avg.write_json(&mut buf).unwrap();
    let back = AveragedModel::read_json(buf.as_slice()).unwrap();
    assert_eq!(back, avg);

    let text = String::from_utf8(buf).unwrap().replace(AVGMODEL_VERSION, "avgmodel-v0");
    assert!(AveragedModel::read_json(text.as_bytes()).is_err());
}

#[test]
fn averaged_eval_interpolates_and_reports_escape() {
    let model = registry::build("z-free").unwrap();
    let grid = TensorGrid::uniform(&[-1.0], &[1.0], &[3]).unwrap();
    let avg = averaged_coefficients(&model, &grid, &small_averaging(), RootSeed(20)).unwrap();
    let mut out = AveragedCoefficients::new(model.dims);
    avg.eval(&[0.5], &mut out).unwrap();
    let mid = 0.5 * (avg.node(1).hbar[0] + avg.node(2).hbar[0]);
    assert!((out.hbar[0] - mid).abs() < 1e-14);
    avg.eval(&[2.5], &mut out).unwrap();
    assert_eq!(out.hbar[0], avg.node(2).hbar[0]);
    assert!(matches!(avg.eval(&[3.5], &mut out), Err(Error::GridEscape { .. })));
}

#[test]
fn tensor_grid_stencil_weights() {
    let grid = TensorGrid::uniform(&[0.0, 0.0], &[1.0, 2.0], &[2, 3]).unwrap();
    assert_eq!(grid.node_count(), 6);
    assert_eq!(grid.node(4), vec![1.0, 1.0]);
    let mut st = Vec::new();
    grid.stencil(&[0.25, 1.5], &mut st);
    let total: f64 = st.iter().map(|(_, w)| w).sum();
    assert!((total - 1.0).abs() < 1e-15);
    let interp: Vec<f64> = (0..2)
        .map(|a| st.iter().map(|(k, w)| w * grid.node(*k)[a]).sum())
        .collect();
    assert!((interp[0] - 0.25).abs() < 1e-15 && (interp[1] - 1.5).abs() < 1e-15);
    assert!(TensorGrid::new(vec![vec![0.0, 0.0]]).is_err());
    assert_eq!(grid.outside_by(&[1.5, 1.0]), 0.5);
}

#[test]
fn averaging_is_stable_under_longer_burn_in_and_horizon() {
    let model = registry::build("ou-decay").unwrap();
    let grid = TensorGrid::uniform(&[-1.0], &[1.0], &[2]).unwrap();
    let base = AveragingParams {
        poisson: PoissonParams {
            sampler: SamplerParams { n_samples: 3_000, thinning: 1.0, burn_in: 5.0, ..Default::default() },
            t_max: Some(6.0),
            ..Default::default()
        },
        ..Default::default()
    };
    let mut long = base;
    long.poisson.sampler.burn_in *= 2.0;
    long.poisson.t_max = Some(12.0);
    let a = averaged_coefficients(&model, &grid, &base, RootSeed(30)).unwrap();
    let b = averaged_coefficients(&model, &grid, &long, RootSeed(31)).unwrap();
    for k in 0..grid.node_count() {
        let (na, nb) = (a.node(k), b.node(k));
        let (da, db) = (&a.diagnostics[k], &b.diagnostics[k]);
        let pooled = |x: f64, y: f64| 3.0 * (x * x + y * y).sqrt() + 1e-12;
        assert!((na.bbar[0] - nb.bbar[0]).abs() <= pooled(da.bbar_se[0], db.bbar_se[0]));
        assert!((na.btilde[0] - nb.btilde[0]).abs() <= pooled(da.btilde_se[0], db.btilde_se[0]));
        assert!((na.abar[(0, 0)] - nb.abar[(0, 0)]).abs() <= pooled(da.abar_se[0], db.abar_se[0]));
        assert!((na.atilde[(0, 0)] - nb.atilde[(0, 0)]).abs() <= pooled(da.atilde_se[0], db.atilde_se[0]));
        assert!((na.hbar[0] - nb.hbar[0]).abs() <= pooled(da.hbar_se[0], db.hbar_se[0]));
    }
}
