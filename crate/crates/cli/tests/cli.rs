use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use msfilter::filters::read_ensemble_dump;
use msfilter::AveragedModel;
use msfilter_cli::{read_provenance, run, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK};

const SMALL: &str = "[experiment]\nmodel = \"z-free\"\neps_list = [0.5, 0.25]\nhorizon = 0.25\nseed = 3\n\n\
[grid]\nlower = [-4.0]\nupper = [4.0]\nnodes = [5]\nmargin = 2.0\n\n\
[solver]\nsamples = 800\n\n[filter]\nparticles = 64\nreplications = 3\n";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn msfilter(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["msfilter", cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(args)
}

#[test]
fn check_reports_assumptions_for_ou_linear() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[experiment]\nmodel = \"ou-linear\"\n");
    let out = Command::new(env!("CARGO_BIN_EXE_msfilter"))
        .args(["check", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let margin: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("recurrence (H_f): margin = "))
        .and_then(|rest| rest.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(margin > 0.0);
    assert!(text.contains("lambda = 2.000000, Lambda = 2.000000 [ok]"));
    assert_eq!(text.matches("centering at x").count(), 3);
    assert!(!text.contains("NOT CENTERED"));
}

#[test]
fn zero_horizon_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[experiment]\nmodel = \"ou-linear\"\nhorizon = 0.0\n");
    let status = Command::new(env!("CARGO_BIN_EXE_msfilter"))
        .args(["simulate", "--config", config.to_str().unwrap()])
        .current_dir(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_CONFIG));
    assert!(!dir.path().join("path.csv").exists());
}

#[test]
fn bad_inputs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.toml");
    assert_eq!(msfilter("simulate", &missing, &out, &[]), EXIT_CONFIG);
    let unknown = write_config(dir.path(), "[experiment]\nmodel = \"no-such-model\"\n");
    assert_eq!(msfilter("simulate", &unknown, &out, &[]), EXIT_CONFIG);
    let garbled = write_config(dir.path(), "[experiment\nmodel = ");
    assert_eq!(msfilter("simulate", &garbled, &out, &[]), EXIT_CONFIG);
    let ok = write_config(dir.path(), SMALL);
    assert_eq!(msfilter("simulate", &ok, &out, &["--workers", "0"]), EXIT_CONFIG);
    assert_eq!(run(["msfilter", "explode", "--config", "x"]), EXIT_CONFIG);
}

#[test]
fn grid_escape_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("lower = [-4.0]\nupper = [4.0]\nnodes = [5]\nmargin = 2.0", "lower = [-0.1]\nupper = [0.1]\nnodes = [2]\nmargin = 0.0");
    let config = write_config(dir.path(), &text);
    assert_eq!(msfilter("filter", &config, &dir.path().join("out"), &[]), EXIT_NUMERIC);
}

#[test]
fn simulate_writes_provenance_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(msfilter("simulate", &config, &a, &[]), EXIT_OK);
    assert_eq!(msfilter("simulate", &config, &b, &["--workers", "1"]), EXIT_OK);
    assert_eq!(msfilter("simulate", &config, &c, &["--seed", "4"]), EXIT_OK);
    let read = |d: &Path| fs::read(d.join("path.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));

    let prov = read_provenance(&a.join("path.csv")).unwrap().unwrap();
    assert!(prov.starts_with("config_sha256="));
    assert!(prov.contains(" seed=3 ") && prov.contains("model=z-free") && prov.contains("command=simulate"));
    let prov_c = read_provenance(&c.join("path.csv")).unwrap().unwrap();
    assert!(prov_c.contains(" seed=4 "));

    let text = String::from_utf8(read(&a)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[1], "t,X1,Z1,Y1");
    // T = 0.25 on dt = 0.1 * 0.5^2.
    assert_eq!(lines.len(), 2 + 11);
    assert!(lines[2].starts_with("0,"));
}

#[test]
fn average_writes_a_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert_eq!(msfilter("average", &config, &out, &[]), EXIT_OK);
    let avg = AveragedModel::read_json(fs::File::open(out.join("avgmodel.json")).unwrap()).unwrap();
    assert_eq!(avg.grid.node_count(), 5);
    // z-free: averaging is the identity.
    let node = avg.node(2);
    assert!((node.bbar[0] - 0.0).abs() < 1e-12);
    assert_eq!(node.atilde[(0, 0)], 0.0);
}

#[test]
fn filter_writes_both_runs_on_one_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &format!("{SMALL}dump = true\n"));
    let out = dir.path().join("out");
    assert_eq!(msfilter("filter", &config, &out, &[]), EXIT_OK);
    let rows = |name: &str| -> Vec<String> {
        fs::read_to_string(out.join(name))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(str::to_string)
            .collect()
    };
    let (full, reduced) = (rows("filter_full.csv"), rows("filter_averaged.csv"));
    assert_eq!(full[0], "t,mass,mean_1,var_1,ess");
    assert_eq!(full.len(), reduced.len());
    let t = |r: &[String]| r[1..].iter().map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(t(&full), t(&reduced));
    assert!(out.join("path.csv").exists());
    for name in ["filter_full.pf", "filter_averaged.pf"] {
        let ens = read_ensemble_dump(fs::File::open(out.join(name)).unwrap()).unwrap();
        assert_eq!(ens.len(), full.len() - 1);
        assert_eq!(ens[0].len(), 64);
    }
}

#[test]
fn converge_report_is_byte_identical_across_runs_and_pools() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(msfilter("converge", &config, &a, &["--workers", "1"]), EXIT_OK);
    assert_eq!(msfilter("converge", &config, &b, &["--workers", "3"]), EXIT_OK);
    let ra = fs::read(a.join("report.csv")).unwrap();
    assert_eq!(ra, fs::read(b.join("report.csv")).unwrap());
    let text = String::from_utf8(ra).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# config_sha256="));
    assert_eq!(lines[1], "eps,mean_dnorm,se_dnorm,mean_dunnorm,se_dunnorm,R,failures");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("0.5,") && lines[2].ends_with(",3,0"));

    let json: serde_json::Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["experiment"]["model"], "z-free");
    assert_eq!(json["report"]["rows"].as_array().unwrap().len(), 2);
    assert_eq!(json["provenance"].as_str().unwrap(), &lines[0][2..]);
}

#[test]
fn converge_default_config_on_ou_linear() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[experiment]\nmodel = \"ou-linear\"\n");
    let out = dir.path().join("out");
    assert_eq!(msfilter("converge", &config, &out, &[]), EXIT_OK);
    let text = fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 5);
    for r in rows {
        let fields: Vec<&str> = r.split(',').collect();
        assert_eq!(fields[5], "50");
    }
}
