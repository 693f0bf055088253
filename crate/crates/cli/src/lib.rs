//! `msfilter` command-line driver.
//!
//! ```text
//! msfilter <simulate|average|filter|converge|check> --config <path> [--seed S] [--workers K] [--out DIR]
//! ```
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numerical failure.

pub mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use msfilter::cell::{check_assumptions, check_centering, estimate_stationary, AssumptionProbes};
use msfilter::filters::write_ensemble_dump;
use msfilter::metrics::convergence_experiment;
use msfilter::sde::SimulationOptions;
use msfilter::{
    averaged_coefficients, particle_filter_averaged, particle_filter_full, registry, simulate_multiscale, AveragedModel,
    MultiscaleModel, RootSeed,
};
use serde::Serialize;

use config::{ExperimentConfig, LoadedConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Simulate one signal/observation path.
    Simulate,
    /// Tabulate the averaged coefficients on the configured grid.
    Average,
    /// Run the full and averaged filters on one shared observation path.
    Filter,
    /// Run the eps sweep and write the convergence report.
    Converge,
    /// Print the assumption diagnostics and the centering check.
    Check,
}

#[derive(Debug, Parser)]
#[command(name = "msfilter", version, about = "Multiscale filtering experiments")]
pub struct Args {
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Size of the worker pool; defaults to the number of cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides `experiment.out_dir`; defaults to the current directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(std::io::Error),
    Model(msfilter::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Model(e) if e.is_config() => EXIT_CONFIG,
            CliError::Model(msfilter::Error::Io(_) | msfilter::Error::Json(_)) => EXIT_IO,
            CliError::Model(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(e) => write!(f, "I/O error: {e}"),
            CliError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<msfilter::Error> for CliError {
    fn from(e: msfilter::Error) -> Self {
        CliError::Model(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("MSFILTER_LOG", "warn")).try_init();
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("msfilter: {e}");
            e.exit_code()
        }
    }
}

/// Everything `run` does after argument parsing.
pub fn execute(args: &Args) -> CliResult<()> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let loaded = config::parse(&text).map_err(CliError::Config)?;
    let model = registry::build(&loaded.config.experiment.model)?;
    let ctx = Context::new(args, loaded, model);
    match args.workers {
        Some(0) => Err(CliError::Config("--workers must be >= 1".into())),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| CliError::Config(e.to_string()))?;
            pool.install(|| ctx.dispatch())
        }
        None => ctx.dispatch(),
    }
}

struct Context {
    command: Command,
    cfg: ExperimentConfig,
    sha256: String,
    seed: u64,
    out: PathBuf,
    model: MultiscaleModel,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    provenance: &'a str,
    config: &'a ExperimentConfig,
    report: &'a msfilter::metrics::ConvergenceReport,
}

impl Context {
    fn new(args: &Args, loaded: LoadedConfig, model: MultiscaleModel) -> Self {
        let seed = args.seed.unwrap_or(loaded.config.experiment.seed);
        let out = args
            .out
            .clone()
            .or_else(|| loaded.config.experiment.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        Context { command: args.command, cfg: loaded.config, sha256: loaded.sha256, seed, out, model }
    }

    fn root(&self) -> RootSeed {
        RootSeed(self.seed)
    }

    fn provenance(&self) -> String {
        format!(
            "config_sha256={} seed={} model={} command={} version={}",
            self.sha256,
            self.seed,
            self.model.name,
            self.command.to_possible_value().expect("command name").get_name(),
            env!("CARGO_PKG_VERSION")
        )
    }

    fn create(&self, name: &str) -> CliResult<BufWriter<File>> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        log::info!("writing {}", path.display());
        Ok(BufWriter::new(File::create(path)?))
    }

    fn written(&self, name: &str) {
        println!("{}", self.out.join(name).display());
    }

    fn dispatch(&self) -> CliResult<()> {
        match self.command {
            Command::Simulate => self.simulate(),
            Command::Average => self.average().map(|_| ()),
            Command::Filter => self.filter(),
            Command::Converge => self.converge(),
            Command::Check => self.check(),
        }
    }

    fn sim_options(&self) -> SimulationOptions {
        SimulationOptions { dt_factor: self.cfg.experiment.dt_factor, ..Default::default() }
    }

    fn truth(&self) -> CliResult<msfilter::PathBundle> {
        let eps = self.cfg.eps();
        let dt = self.cfg.experiment.dt_factor * eps * eps;
        Ok(simulate_multiscale(
            &self.model,
            eps,
            dt,
            self.cfg.experiment.horizon,
            self.root().derive("truth", 0),
            &self.sim_options(),
        )?)
    }

    fn write_path(&self, path: &msfilter::PathBundle) -> CliResult<()> {
        let mut out = self.create("path.csv")?;
        path.write_csv(&mut out, Some(&self.provenance()))?;
        out.flush()?;
        self.written("path.csv");
        Ok(())
    }

    fn simulate(&self) -> CliResult<()> {
        let path = self.truth()?;
        self.write_path(&path)
    }

    fn averaged_model(&self) -> CliResult<AveragedModel> {
        Ok(averaged_coefficients(
            &self.model,
            &self.cfg.grid()?,
            &self.cfg.averaging(),
            self.root().derive("average", 0),
        )?)
    }

    fn average(&self) -> CliResult<AveragedModel> {
        let avg = self.averaged_model()?;
        let mut out = self.create("avgmodel.json")?;
        avg.write_json(&mut out)?;
        out.flush()?;
        self.written("avgmodel.json");
        Ok(avg)
    }

    fn filter(&self) -> CliResult<()> {
        let avg = self.averaged_model()?;
        let truth = self.truth()?;
        let obs = truth.observation();
        let opts = self.cfg.filter_options();
        let fseed = self.root().derive("filter", 0);
        let full = particle_filter_full(&self.model, self.cfg.eps(), &obs, &opts, fseed)?;
        let reduced = particle_filter_averaged(&avg, &obs, &opts, fseed)?;
        self.write_path(&truth)?;
        let prov = self.provenance();
        for (name, run) in [("filter_full", &full), ("filter_averaged", &reduced)] {
            let csv = format!("{name}.csv");
            let mut out = self.create(&csv)?;
            run.write_summary_csv(&mut out, Some(&prov))?;
            out.flush()?;
            self.written(&csv);
            if self.cfg.filter.dump {
                let pf = format!("{name}.pf");
                let mut out = self.create(&pf)?;
                write_ensemble_dump(&run.path, &mut out)?;
                out.flush()?;
                self.written(&pf);
            }
        }
        Ok(())
    }

    fn converge(&self) -> CliResult<()> {
        let avg = self.averaged_model()?;
        let settings = self.cfg.convergence(self.root().derive("converge", 0).0);
        let report = convergence_experiment(&self.model, &avg, &settings)?;
        let prov = self.provenance();
        let mut out = self.create("report.csv")?;
        report.write_csv(&mut out, Some(&prov))?;
        out.flush()?;
        self.written("report.csv");
        let mut out = self.create("report.json")?;
        serde_json::to_writer_pretty(&mut out, &ReportJson { provenance: &prov, config: &self.cfg, report: &report })?;
        writeln!(out)?;
        out.flush()?;
        self.written("report.json");
        Ok(())
    }

    fn check(&self) -> CliResult<()> {
        let entry = registry::lookup(&self.model.name)?;
        let mut stdout = std::io::stdout().lock();
        writeln!(stdout, "model: {} ({})", entry.name, entry.summary)?;
        writeln!(stdout, "initial law: {}", entry.initial_law)?;
        for h in entry.hypotheses {
            writeln!(stdout, "hypothesis: {h}")?;
        }
        let probes = AssumptionProbes::random(&self.model, 200, self.root().derive("check", 0));
        writeln!(stdout, "{}", check_assumptions(&self.model, &probes))?;

        let sampler = self.cfg.averaging().poisson.sampler;
        for (k, x) in self.probe_points().into_iter().enumerate() {
            let stat = estimate_stationary(&self.model, &x, &sampler, self.root().derive("centering", k as u64))?;
            let c = check_centering(&self.model, &x, &stat);
            writeln!(
                stdout,
                "centering at x = {}: residual = {}, stderr = {} [{}]",
                fmt_vec(&x),
                fmt_vec(&c.residual),
                fmt_vec(&c.stderr),
                if c.is_centered(3.0) { "ok" } else { "NOT CENTERED" }
            )?;
        }
        Ok(())
    }

    /// Grid centre and both corners along the diagonal.
    fn probe_points(&self) -> Vec<Vec<f64>> {
        let g = &self.cfg.grid;
        let mid = g.lower.iter().zip(&g.upper).map(|(a, b)| 0.5 * (a + b)).collect();
        vec![g.lower.clone(), mid, g.upper.clone()]
    }
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Reads the `# ...` provenance line written at the top of every CSV.
pub fn read_provenance(path: &Path) -> std::io::Result<Option<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().next().and_then(|l| l.strip_prefix("# ")).map(str::to_string))
}
