use std::f64::consts::SQRT_2;

use msfilter::error::Error;
use msfilter::sde::{build_correlation, decompose_noise, simulate_multiscale, uniform_grid};
use msfilter::{registry, Dims, InitialLaw, ModelFlags, MultiscaleModel, RootSeed, SimulationOptions};
use nalgebra::{dmatrix, DMatrix};

fn scalar() -> Dims {
    Dims { m: 1, n: 1, w: 1, v: 1, u: 1, d: 1 }
}

#[test]
fn correlation_identity_case() {
    let c = build_correlation(&DMatrix::zeros(2, 3), &DMatrix::identity(2, 2)).unwrap();
    assert_eq!(c.k, DMatrix::identity(2, 2));
    assert_eq!(c.kappa, DMatrix::identity(2, 2));
    assert_eq!(c.alpha_w, DMatrix::zeros(2, 3));
}

#[test]
fn correlation_scalar_case() {
    let c = build_correlation(&dmatrix![0.6], &dmatrix![0.8]).unwrap();
    assert!((c.k[(0, 0)] - 1.0).abs() < 1e-15);
    assert!((c.kappa[(0, 0)] - 1.0).abs() < 1e-15);
    assert!((c.alpha_w[(0, 0)] - 0.6).abs() < 1e-15);
}

#[test]
fn correlation_two_dimensional_cholesky() {
    // alpha alpha^T = [[1, 1], [1, 1]], gamma gamma^T = I.
    let alpha = dmatrix![1.0; 1.0];
    let c = build_correlation(&alpha, &DMatrix::identity(2, 2)).unwrap();
    let expect = dmatrix![SQRT_2, 0.0; 1.0 / SQRT_2, 1.5f64.sqrt()];
    assert!((&c.kappa - &expect).abs().max() < 1e-14);
    assert!((&c.kappa * c.kappa.transpose() - dmatrix![2.0, 1.0; 1.0, 2.0]).abs().max() < 1e-14);
    let white = &c.alpha_w * c.alpha_w.transpose() + &c.gamma_w * c.gamma_w.transpose();
    assert!((white - DMatrix::identity(2, 2)).abs().max() < 1e-14);
}

#[test]
fn singular_observation_noise_is_rejected() {
    let r = build_correlation(&dmatrix![1.0], &dmatrix![0.0]);
    assert!(matches!(r, Err(Error::NonPositiveDefinite { .. })));
}

#[test]
fn noise_decomposition_examples() {
    let c = build_correlation(&DMatrix::zeros(1, 2), &dmatrix![1.0]).unwrap();
    let nd = decompose_noise(&c).unwrap();
    assert_eq!(nd.proj, DMatrix::zeros(2, 1));
    assert!((&nd.c - DMatrix::identity(2, 2)).abs().max() < 1e-15);

    let c = build_correlation(&dmatrix![0.6], &dmatrix![0.8]).unwrap();
    let nd = decompose_noise(&c).unwrap();
    assert!((nd.proj[(0, 0)] - 0.6).abs() < 1e-15);
    assert!((nd.c[(0, 0)] - 0.8).abs() < 1e-15);

    let c = build_correlation(&dmatrix![0.3, -1.2; 0.7, 0.4], &dmatrix![1.1, 0.2; -0.5, 0.9]).unwrap();
    let nd = decompose_noise(&c).unwrap();
    assert_eq!(nd.proj.shape(), (2, 2));
    let id = c.alpha_w.transpose() * &c.alpha_w + &nd.c * nd.c.transpose();
    assert!((id - DMatrix::identity(2, 2)).abs().max() < 1e-10);
}

#[test]
fn zero_coefficients_keep_the_state_fixed() {
    let model = MultiscaleModel::builder("still", scalar())
        .init(InitialLaw::Point { x: vec![0.7], z: vec![-1.2] })
        .build()
        .unwrap();
    let opts = SimulationOptions { keep_increments: true, ..Default::default() };
    let p = simulate_multiscale(&model, 0.5, 0.01, 1.0, RootSeed(1), &opts).unwrap();
    assert_eq!(p.y_at(0), &[0.0]);
    let db = p.db.as_ref().unwrap();
    let mut y = 0.0;
    for k in 0..p.len() {
        assert_eq!(p.x_at(k), &[0.7]);
        assert_eq!(p.z_at(k), &[-1.2]);
        assert_eq!(p.y_at(k), &[y]);
        if k + 1 < p.len() {
            y += db[k];
        }
    }
}

#[test]
fn fast_ou_reaches_unit_variance() {
    let model = MultiscaleModel::builder("ou", scalar())
        .fast_drift(|_, z, out| out[0] = -z[0])
        .fast_dispersion(|_, _, out| out[0] = SQRT_2)
        .build()
        .unwrap();
    let dt = 0.01;
    let finals: Vec<f64> = (0..4000)
        .map(|r| {
            let p = simulate_multiscale(&model, 1.0, dt, 6.0, RootSeed(r), &Default::default()).unwrap();
            p.z_at(p.len() - 1)[0]
        })
        .collect();
    let n = finals.len() as f64;
    let var = finals.iter().map(|z| z * z).sum::<f64>() / n;
    let se = (2.0 / n).sqrt() * var;
    // Euler-Maruyama stationary variance.
    let target = 2.0 / (2.0 - dt);
    assert!((var - target).abs() < 3.0 * se, "{var} vs {target} (se {se})");
}

#[test]
fn fast_moments_stay_bounded_across_eps() {
    let model = registry::build("ou-linear").unwrap();
    for eps in [0.5, 0.25, 0.125] {
        let dt = 0.1 * eps * eps;
        let reps = 200;
        let mut second = Vec::new();
        for r in 0..reps {
            let p = simulate_multiscale(&model, eps, dt, 1.0, RootSeed(r), &Default::default()).unwrap();
            if second.is_empty() {
                second = vec![0.0; p.len()];
            }
            for (k, s) in second.iter_mut().enumerate() {
                *s += p.z_at(k)[0].powi(2) / reps as f64;
            }
        }
        let worst = second.iter().cloned().fold(0.0, f64::max);
        // E|Z_0|^2 = 1, so C (1 + E|Z_0|^2) with C = 2.
        assert!(worst < 4.0, "eps = {eps}: max E|Z_t|^2 = {worst}");
    }
}

#[test]
fn simulation_is_deterministic() {
    let model = registry::build("ou-decay").unwrap();
    let run = || simulate_multiscale(&model, 0.3, 0.005, 1.0, RootSeed(77), &Default::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_csv(&mut ca, Some("seed=77")).unwrap();
    b.write_csv(&mut cb, Some("seed=77")).unwrap();
    assert_eq!(ca, cb);
    let text = String::from_utf8(ca).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# seed=77"));
    assert_eq!(lines.next(), Some("t,X1,Z1,Y1"));
    assert_eq!(lines.next(), Some(first_row(&a).as_str()));
}

fn first_row(p: &msfilter::PathBundle) -> String {
    use msfilter::io::fmt_g17;
    format!("0,{},{},0", fmt_g17(p.x[0]), fmt_g17(p.z[0]))
}

#[test]
fn observation_is_brownian_without_a_sensor() {
    let model = registry::build("ou-decay").unwrap().with_sensor(|_, _, out| out.fill(0.0));
    let (horizon, dt) = (4.0, 0.001);
    let p = simulate_multiscale(&model, 0.25, dt, horizon, RootSeed(5), &Default::default()).unwrap();
    let qv: f64 = (1..p.len()).map(|k| (p.y_at(k)[0] - p.y_at(k - 1)[0]).powi(2)).sum();
    assert!((qv - horizon).abs() < 5.0 * (2.0 * horizon * dt).sqrt(), "qv = {qv}");
}

#[test]
fn observation_shares_signal_noise() {
    let model = registry::build("ou-linear").unwrap();
    let dt = 0.1;
    let opts = SimulationOptions { keep_increments: true, ..Default::default() };
    let p = simulate_multiscale(&model, 1.0, dt, 2000.0, RootSeed(6), &opts).unwrap();
    let dw = p.dw.as_ref().unwrap();
    let prods: Vec<f64> = (0..p.len() - 1)
        .map(|k| dw[k] * (p.y_at(k + 1)[0] - p.y_at(k)[0]) / dt)
        .collect();
    let n = prods.len() as f64;
    let mean = prods.iter().sum::<f64>() / n;
    let sd = (prods.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    // sigma = 1, so the target is alpha_w itself.
    let target = model.correlation.alpha_w[(0, 0)];
    assert!((mean - target).abs() < 3.0 * sd / n.sqrt(), "{mean} vs {target}");
}

#[test]
fn registry_whitening_residuals() {
    for e in registry::entries() {
        let c = e.build().unwrap().correlation;
        assert!((&c.kappa * c.kappa.transpose() - &c.k).abs().max() < 1e-10);
    }
}

#[test]
fn coarse_steps_are_rejected() {
    let model = registry::build("ou-linear").unwrap();
    let r = simulate_multiscale(&model, 0.1, 0.01, 1.0, RootSeed(1), &Default::default());
    assert!(matches!(r, Err(Error::StepTooCoarse { .. })));
}

#[test]
fn runaway_state_is_reported() {
    let model = MultiscaleModel::builder("runaway", scalar())
        .slow_drift(|x, _, out| out[0] = 10.0 * x[0])
        .init(InitialLaw::Point { x: vec![1.0], z: vec![0.0] })
        .build()
        .unwrap();
    let r = simulate_multiscale(&model, 1.0, 0.01, 10.0, RootSeed(1), &Default::default());
    assert!(matches!(r, Err(Error::NumericalBlowup { .. })));
}

#[test]
fn false_linearity_claim_is_rejected() {
    let r = MultiscaleModel::builder("liar", scalar())
        .slow_drift(|x, _, out| out[0] = x[0].sin())
        .flags(ModelFlags { linear_gaussian: true, ..Default::default() })
        .build();
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn grid_covers_horizon() {
    let g = uniform_grid(1.0, 0.3).unwrap();
    assert_eq!(g.len(), 5);
    assert_eq!(*g.last().unwrap(), 1.0);
    assert!(uniform_grid(0.0, 0.1).is_err());
}
