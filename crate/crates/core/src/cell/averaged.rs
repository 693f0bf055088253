use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::TensorGrid;
use super::mean_and_se;
use super::poisson::{solve_poisson, PoissonParams};
use super::stationary::check_centering;
use crate::error::{Error, Result, Warning};
use crate::linalg::{self, from_row_major, to_row_major};
use crate::rng::RootSeed;
use crate::sde::{Dims, InitialLaw, MultiscaleModel};

pub const AVGMODEL_VERSION: &str = "avgmodel-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragingParams {
    pub poisson: PoissonParams,
    /// Absolute floor on the eigenvalue check of `abar - sigbar sigbar^T`.
    pub psd_tol: f64,
    /// Particles may drift this far outside the grid box (clamped) before
    /// the averaged filter reports an escape.
    pub grid_margin: f64,
}

impl Default for AveragingParams {
    fn default() -> Self {
        AveragingParams {
            poisson: PoissonParams::default(),
            psd_tol: 1e-9,
            grid_margin: 2.0,
        }
    }
}

/// Homogenized coefficients at one slow state.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCoefficients {
    pub bbar: Vec<f64>,
    pub btilde: Vec<f64>,
    pub abar: DMatrix<f64>,
    pub atilde: DMatrix<f64>,
    pub hbar: Vec<f64>,
    pub sigbar: DMatrix<f64>,
}

/// Monte Carlo diagnostics recorded per grid node.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeDiagnostics {
    pub ess: f64,
    pub t_max: f64,
    pub centering_residual: Vec<f64>,
    pub centering_stderr: Vec<f64>,
    pub bbar_se: Vec<f64>,
    pub btilde_se: Vec<f64>,
    /// Row-major, `m x m`.
    pub abar_se: Vec<f64>,
    pub atilde_se: Vec<f64>,
    pub hbar_se: Vec<f64>,
    /// Smallest eigenvalue of `abar - sigbar sigbar^T` before clipping.
    pub gap_min_eig: f64,
    pub warnings: Vec<Warning>,
}

/// Homogenized model tabulated on a slow-state grid. Interpolation is
/// multilinear between nodes and clamps outside the grid box.
///
/// Matrices are stored row-major per node. The sensor average is of the
/// whitened sensor, and `alpha_w` / `complement` carry the whitened
/// correlation, so this is everything the averaged filter needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedModel {
    pub version: String,
    pub source_model: String,
    pub dims: Dims,
    pub grid: TensorGrid,
    pub grid_margin: f64,
    pub bbar: Vec<f64>,
    pub btilde: Vec<f64>,
    pub abar: Vec<f64>,
    pub atilde: Vec<f64>,
    pub hbar: Vec<f64>,
    pub sigbar: Vec<f64>,
    /// `atilde^{1/2}` per node.
    pub atilde_root: Vec<f64>,
    /// `(abar - sigbar sigbar^T)^{1/2}` per node.
    pub gap_root: Vec<f64>,
    /// `d x w`.
    pub alpha_w: Vec<f64>,
    /// `w x w`, `C C^T = I - alpha_w^T alpha_w`.
    pub complement: Vec<f64>,
    pub init: InitialLaw,
    pub seed: Option<u64>,
    pub diagnostics: Vec<NodeDiagnostics>,
}

/// Interpolated coefficients at an arbitrary slow state.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedCoefficients {
    /// `bbar + btilde`.
    pub drift: Vec<f64>,
    pub atilde_root: Vec<f64>,
    pub gap_root: Vec<f64>,
    pub sigbar: Vec<f64>,
    pub hbar: Vec<f64>,
    stencil: Vec<(usize, f64)>,
}

impl AveragedCoefficients {
    pub fn new(dims: Dims) -> Self {
        AveragedCoefficients {
            drift: vec![0.0; dims.m],
            atilde_root: vec![0.0; dims.m * dims.m],
            gap_root: vec![0.0; dims.m * dims.m],
            sigbar: vec![0.0; dims.m * dims.w],
            hbar: vec![0.0; dims.d],
            stencil: Vec::with_capacity(1 << dims.m),
        }
    }
}

fn blend(stencil: &[(usize, f64)], table: &[f64], width: usize, out: &mut [f64]) {
    out.fill(0.0);
    for &(node, w) in stencil {
        let row = &table[node * width..(node + 1) * width];
        for (o, v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
}

impl AveragedModel {
    /// Assembles a model from per-node coefficients, computing the PSD
    /// square roots (negative eigenvalues clipped).
    pub fn from_nodes(
        source_model: impl Into<String>,
        dims: Dims,
        grid: TensorGrid,
        alpha_w: &DMatrix<f64>,
        complement: &DMatrix<f64>,
        init: InitialLaw,
        nodes: Vec<NodeCoefficients>,
    ) -> Result<Self> {
        let Dims { m, w, d, .. } = dims;
        if grid.dim() != m || grid.node_count() != nodes.len() {
            return Err(Error::Dimension(format!(
                "grid has {} axes and {} nodes, expected {m} axes and {} nodes",
                grid.dim(),
                grid.node_count(),
                nodes.len()
            )));
        }
        let mut out = AveragedModel {
            version: AVGMODEL_VERSION.to_string(),
            source_model: source_model.into(),
            dims,
            grid,
            grid_margin: AveragingParams::default().grid_margin,
            bbar: Vec::new(),
            btilde: Vec::new(),
            abar: Vec::new(),
            atilde: Vec::new(),
            hbar: Vec::new(),
            sigbar: Vec::new(),
            atilde_root: Vec::new(),
            gap_root: Vec::new(),
            alpha_w: to_row_major(alpha_w),
            complement: to_row_major(complement),
            init,
            seed: None,
            diagnostics: vec![NodeDiagnostics::default(); nodes.len()],
        };
        for (k, node) in nodes.into_iter().enumerate() {
            if node.bbar.len() != m
                || node.btilde.len() != m
                || node.hbar.len() != d
                || node.abar.shape() != (m, m)
                || node.atilde.shape() != (m, m)
                || node.sigbar.shape() != (m, w)
            {
                return Err(Error::Dimension(format!("node {k} coefficients have wrong shapes")));
            }
            let atilde = linalg::symmetrize(&node.atilde);
            let abar = linalg::symmetrize(&node.abar);
            let gap = &abar - &node.sigbar * node.sigbar.transpose();
            let (atilde_root, _) = linalg::psd_sqrt(&atilde);
            let (gap_root, gap_min) = linalg::psd_sqrt(&gap);
            out.diagnostics[k].gap_min_eig = gap_min;
            out.bbar.extend_from_slice(&node.bbar);
            out.btilde.extend_from_slice(&node.btilde);
            out.abar.extend(to_row_major(&abar));
            out.atilde.extend(to_row_major(&atilde));
            out.hbar.extend_from_slice(&node.hbar);
            out.sigbar.extend(to_row_major(&node.sigbar));
            out.atilde_root.extend(to_row_major(&atilde_root));
            out.gap_root.extend(to_row_major(&gap_root));
        }
        Ok(out)
    }

    /// Tabulates closed-form coefficients on a grid.
    pub fn tabulate(
        source_model: impl Into<String>,
        dims: Dims,
        grid: TensorGrid,
        alpha_w: &DMatrix<f64>,
        complement: &DMatrix<f64>,
        init: InitialLaw,
        coefficients: impl Fn(&[f64]) -> NodeCoefficients,
    ) -> Result<Self> {
        let nodes = (0..grid.node_count()).map(|k| coefficients(&grid.node(k))).collect();
        Self::from_nodes(source_model, dims, grid, alpha_w, complement, init, nodes)
    }

    /// Closed-form averaged model of a linear-Gaussian model, tabulated on
    /// `grid`. Multilinear interpolation reproduces the affine coefficients
    /// exactly inside the grid box.
    pub fn from_linear(model: &MultiscaleModel, grid: TensorGrid) -> Result<Self> {
        let lin = model.linear.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("model {:?} has no linear coefficients", model.name))
        })?;
        let spec = lin.averaged_system(&model.correlation, &model.init)?;
        let m = model.dims.m;
        let w = model.dims.w;
        let root = spec.noise.view((0, 0), (m, m)).into_owned();
        let atilde = &root * root.transpose();
        let sigma = lin.sigma.clone();
        let abar = &sigma * sigma.transpose();
        let init = x_only(&model.init);
        Self::tabulate(
            model.name.clone(),
            model.dims,
            grid,
            &model.correlation.alpha_w,
            &model.noise.c,
            init,
            |x| {
                let xv = nalgebra::DVector::from_column_slice(x);
                NodeCoefficients {
                    bbar: (&spec.a * &xv).as_slice().to_vec(),
                    btilde: vec![0.0; m],
                    abar: abar.clone(),
                    atilde: atilde.clone(),
                    hbar: (&spec.h * &xv).as_slice().to_vec(),
                    sigbar: sigma.columns(0, w).into_owned(),
                }
            },
        )
    }

    pub fn node_count(&self) -> usize {
        self.grid.node_count()
    }

    /// Coefficients stored at node `k`.
    pub fn node(&self, k: usize) -> NodeCoefficients {
        let Dims { m, w, d, .. } = self.dims;
        NodeCoefficients {
            bbar: self.bbar[k * m..(k + 1) * m].to_vec(),
            btilde: self.btilde[k * m..(k + 1) * m].to_vec(),
            abar: from_row_major(m, m, &self.abar[k * m * m..(k + 1) * m * m]),
            atilde: from_row_major(m, m, &self.atilde[k * m * m..(k + 1) * m * m]),
            hbar: self.hbar[k * d..(k + 1) * d].to_vec(),
            sigbar: from_row_major(m, w, &self.sigbar[k * m * w..(k + 1) * m * w]),
        }
    }

    pub fn atilde_root_at(&self, k: usize) -> DMatrix<f64> {
        let m = self.dims.m;
        from_row_major(m, m, &self.atilde_root[k * m * m..(k + 1) * m * m])
    }

    pub fn gap_root_at(&self, k: usize) -> DMatrix<f64> {
        let m = self.dims.m;
        from_row_major(m, m, &self.gap_root[k * m * m..(k + 1) * m * m])
    }

    /// Interpolates every coefficient at `x`.
    pub fn eval(&self, x: &[f64], out: &mut AveragedCoefficients) -> Result<()> {
        let Dims { m, w, d, .. } = self.dims;
        if self.grid.outside_by(x) > self.grid_margin {
            return Err(Error::GridEscape { x: x.to_vec() });
        }
        self.grid.stencil(x, &mut out.stencil);
        let st = &out.stencil;
        blend(st, &self.bbar, m, &mut out.drift);
        for &(node, wt) in st {
            for i in 0..m {
                out.drift[i] += wt * self.btilde[node * m + i];
            }
        }
        blend(st, &self.atilde_root, m * m, &mut out.atilde_root);
        blend(st, &self.gap_root, m * m, &mut out.gap_root);
        blend(st, &self.sigbar, m * w, &mut out.sigbar);
        blend(st, &self.hbar, d, &mut out.hbar);
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let model: AveragedModel = serde_json::from_reader(input)?;
        if model.version != AVGMODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported averaged-model version {:?} (expected {AVGMODEL_VERSION:?})",
                model.version
            )));
        }
        let Dims { m, w, d, .. } = model.dims;
        let k = model.grid.node_count();
        let ok = model.grid.dim() == m
            && model.bbar.len() == k * m
            && model.btilde.len() == k * m
            && model.abar.len() == k * m * m
            && model.atilde.len() == k * m * m
            && model.atilde_root.len() == k * m * m
            && model.gap_root.len() == k * m * m
            && model.hbar.len() == k * d
            && model.sigbar.len() == k * m * w
            && model.alpha_w.len() == d * w
            && model.complement.len() == w * w;
        if !ok {
            return Err(Error::Config("averaged-model arrays do not match its dimensions".into()));
        }
        Ok(model)
    }
}

fn x_only(init: &InitialLaw) -> InitialLaw {
    match init {
        InitialLaw::Point { x, .. } => InitialLaw::Point { x: x.clone(), z: Vec::new() },
        InitialLaw::Gaussian { x_mean, x_std, .. } => InitialLaw::Gaussian {
            x_mean: x_mean.clone(),
            x_std: x_std.clone(),
            z_mean: Vec::new(),
            z_std: Vec::new(),
        },
    }
}

fn node_average(
    model: &MultiscaleModel,
    x: &[f64],
    params: &AveragingParams,
    seed: RootSeed,
) -> Result<(NodeCoefficients, NodeDiagnostics)> {
    let Dims { m, w, d, .. } = model.dims;
    let sol = solve_poisson(model, x, &params.poisson, seed)?;
    let stat = &sol.stationary;
    let ns = stat.len();
    let ess = stat.ess;
    let centering = check_centering(model, x, stat);

    let mut b = vec![0.0; m];
    let mut bi = vec![0.0; m];
    let mut sig = vec![0.0; m * w];
    let mut hv = vec![0.0; d];
    let mut bbar_s = vec![Vec::with_capacity(ns); m];
    let mut btilde_s = vec![Vec::with_capacity(ns); m];
    let mut abar_s = vec![Vec::with_capacity(ns); m * m];
    let mut atilde_s = vec![Vec::with_capacity(ns); m * m];
    let mut hbar_s = vec![Vec::with_capacity(ns); d];
    let mut sigbar_s = vec![Vec::with_capacity(ns); m * w];
    for j in 0..ns {
        let z = stat.sample(j);
        model.slow_drift(x, z, &mut b);
        model.intermediate_drift(x, z, &mut bi);
        model.slow_dispersion(x, z, &mut sig);
        model.sensor(x, z, &mut hv);
        let u = &sol.sample_u[j * m..(j + 1) * m];
        let grad = &sol.sample_grad[j * m * m..(j + 1) * m * m];
        for i in 0..m {
            bbar_s[i].push(b[i]);
            let mut bt = 0.0;
            for k in 0..m {
                bt += grad[i * m + k] * bi[k];
            }
            btilde_s[i].push(bt);
            for k in 0..m {
                let a: f64 = (0..w).map(|l| sig[i * w + l] * sig[k * w + l]).sum();
                abar_s[i * m + k].push(a);
                atilde_s[i * m + k].push(bi[i] * u[k] + u[i] * bi[k]);
            }
        }
        for i in 0..d {
            hbar_s[i].push(hv[i]);
        }
        for i in 0..m * w {
            sigbar_s[i].push(sig[i]);
        }
    }
    let stats = |s: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) { s.iter().map(|c| mean_and_se(c, ess)).unzip() };
    let (bbar, bbar_se) = stats(&bbar_s);
    let (btilde, btilde_se) = stats(&btilde_s);
    let (abar, abar_se) = stats(&abar_s);
    let (atilde, atilde_se) = stats(&atilde_s);
    let (hbar, hbar_se) = stats(&hbar_s);
    let (sigbar, _) = stats(&sigbar_s);

    let coeffs = NodeCoefficients {
        bbar,
        btilde,
        abar: from_row_major(m, m, &abar),
        atilde: from_row_major(m, m, &atilde),
        hbar,
        sigbar: from_row_major(m, w, &sigbar),
    };
    let diag = NodeDiagnostics {
        ess,
        t_max: sol.t_max,
        centering_residual: centering.residual,
        centering_stderr: centering.stderr,
        bbar_se,
        btilde_se,
        abar_se,
        atilde_se,
        hbar_se,
        gap_min_eig: 0.0,
        warnings: sol.warnings.clone(),
    };
    Ok((coeffs, diag))
}

/// Averaged coefficients at every node of `grid`.
///
/// Per node: invariant-law averages of `b`, `sigma sigma^T`, the whitened
/// sensor and `sigma`; `btilde = avg(grad_x u . b_I)` and
/// `atilde = avg(b_I u^T + u b_I^T)` from the cell-problem solution at
/// each stationary sample. Nodes are independent and run in parallel, each
/// on its own derived seed.
pub fn averaged_coefficients(
    model: &MultiscaleModel,
    grid: &TensorGrid,
    params: &AveragingParams,
    seed: RootSeed,
) -> Result<AveragedModel> {
    if grid.dim() != model.dims.m {
        return Err(Error::Dimension(format!(
            "grid has {} axes but the slow state has dimension {}",
            grid.dim(),
            model.dims.m
        )));
    }
    let results: Vec<(NodeCoefficients, NodeDiagnostics)> = (0..grid.node_count())
        .into_par_iter()
        .map(|k| node_average(model, &grid.node(k), params, seed.derive("node", k as u64)))
        .collect::<Result<_>>()?;
    let (nodes, diags): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    for (k, node) in nodes.iter().enumerate() {
        let gap = linalg::symmetrize(&node.abar) - &node.sigbar * node.sigbar.transpose();
        let min = linalg::min_eigenvalue(&gap);
        let tol = params.psd_tol * (1.0 + linalg::max_abs(&node.abar));
        if min < -tol {
            return Err(Error::PsdViolation { node: k, min_eig: min });
        }
    }

    let init = x_only(&model.init);
    let mut avg = AveragedModel::from_nodes(
        model.name.clone(),
        model.dims,
        grid.clone(),
        &model.correlation.alpha_w,
        &model.noise.c,
        init,
        nodes,
    )?;
    for (slot, mut diag) in avg.diagnostics.iter_mut().zip(diags) {
        diag.gap_min_eig = slot.gap_min_eig;
        *slot = diag;
    }
    avg.grid_margin = params.grid_margin;
    avg.seed = Some(seed.0);
    Ok(avg)
}
