use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geosde::cli::{ITERATIONS_HEADER, RECORDS_HEADER, SUMMARY_HEADER};
use geosde::config::CliConfigFile;
use geosde::experiments::ExperimentConfig;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn geosde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geosde"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"
[manifold]
kind = "sphere"
dim = 4

[sde]
kind = "sphere_bm"

[run]
schemes = ["exp_em", "eu_em", "gcg"]
deltas = [0.125, 0.0625]
horizon = 1.0
paths = 3
seed = 11
reference_delta = 0.015625
functional = "half-last-coord-squared"

[output]
emit_per_iteration = true
"#;

fn report_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("{key} missing from:\n{text}"))
        .to_string()
}

#[test]
fn validate_sphere_passes() {
    let out = geosde(&["validate", "--config", configs().join("sphere-validate.toml").to_str().unwrap()]);
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(0), "{text}");
    let c2: f64 = report_value(&text, "C2_ratio_max").parse().unwrap();
    assert!(c2 <= 1.0 + 1e-12);
    assert!(text.lines().last().unwrap() == "PASS");
    assert!(text.contains("coefficient_lipschitz_proxy"));
}

#[test]
fn validate_unit_ellipsoid_matches_sphere() {
    let dir = tempfile::tempdir().unwrap();
    let sphere = geosde(&["validate", "--config", configs().join("sphere-validate.toml").to_str().unwrap()]);
    let text = fs::read_to_string(configs().join("ellipsoid-validate.toml"))
        .unwrap()
        .replace("[1.0, 4.0, 9.0]", "[1.0, 1.0, 1.0]");
    let cfg = write_config(dir.path(), "unit.toml", &text);
    let ell = geosde(&["validate", "--config", &cfg]);
    assert_eq!(ell.status.code(), Some(0), "{}", stdout(&ell));
    for key in ["L1_min_grad", "C2_bound", "C3_bound"] {
        let a: f64 = report_value(&stdout(&sphere), key).parse().unwrap();
        let b: f64 = report_value(&stdout(&ell), key).parse().unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{key}: {a} vs {b}");
    }
}

#[test]
fn validate_elongated_ellipsoid_passes() {
    let out = geosde(&["validate", "--config", configs().join("ellipsoid-validate.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}

#[test]
fn bad_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let dim0 = write_config(dir.path(), "dim0.toml", &SMALL.replace("dim = 4", "dim = 0"));
    let out = geosde(&["validate", "--config", &dim0]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("manifold.dim"));

    let garbage = write_config(dir.path(), "bad.toml", "[manifold\nkind=");
    assert_eq!(geosde(&["convergence", "--config", &garbage]).status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(geosde(&["validate", "--config", missing.to_str().unwrap()]).status.code(), Some(2));

    let no_schemes = write_config(
        dir.path(),
        "empty.toml",
        &SMALL.replace(r#"schemes = ["exp_em", "eu_em", "gcg"]"#, "schemes = []"),
    );
    let out = geosde(&["convergence", "--config", &no_schemes, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("run.schemes"));
}

#[test]
fn convergence_writes_records_summary_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out_dir = dir.path().join("out");
    let out = geosde(&["convergence", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));

    let records = fs::read_to_string(out_dir.join("records.csv")).unwrap();
    let lines: Vec<&str> = records.lines().collect();
    assert_eq!(lines[0], RECORDS_HEADER);
    assert_eq!(lines.len(), 1 + 3 * 2 * 3);
    assert!(lines[1].starts_with("exp_em,1.2500000000000000e-1,0,"));
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 8);
    }

    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], SUMMARY_HEADER);
    assert_eq!(rows.len(), 1 + 3 * 2);

    let meta = fs::read_to_string(out_dir.join("meta.txt")).unwrap();
    assert!(meta.contains("seed: 99"));
    assert!(meta.contains(&format!("generator: {}", geosde::noise::GENERATOR_NAME)));
    assert!(meta.contains(env!("CARGO_PKG_VERSION")));
    assert!(meta.contains("reference_delta = 0.015625"));
}

#[test]
fn unwritable_output_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = geosde(&["convergence", "--config", &cfg, "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_writes_one_file_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out_dir = dir.path().join("sim");
    let out = geosde(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    for (scheme, delta, rows) in [("exp_em", "0.125", 8), ("gcg", "0.0625", 16)] {
        let text = fs::read_to_string(out_dir.join(format!("iterations_{scheme}_{delta}.csv"))).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], ITERATIONS_HEADER);
        assert_eq!(lines.len(), 1 + rows);
        assert!(lines[1].starts_with("1,"));
    }

    let quiet = write_config(dir.path(), "quiet.toml", &SMALL.replace("emit_per_iteration = true", ""));
    let out = geosde(&["simulate", "--config", &quiet, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn highdim_simulations() {
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small");
    let out = geosde(&[
        "simulate",
        "--config",
        configs().join("paper-highdim-small-step.toml").to_str().unwrap(),
        "--out",
        small.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = fs::read_to_string(small.join("iterations_exp_em_0.001.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 1000);
    for r in rows {
        let dev: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
        assert!(dev <= 1e-12, "{r}");
    }

    let large = dir.path().join("large");
    let out = geosde(&[
        "simulate",
        "--config",
        configs().join("paper-highdim-large-step.toml").to_str().unwrap(),
        "--out",
        large.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = fs::read_to_string(large.join("iterations_eu_em_0.01.csv")).unwrap();
    assert!(text.lines().count() - 1 < 1000);
    let meta = fs::read_to_string(large.join("meta.txt")).unwrap();
    assert!(meta.contains("overflow: scheme=eu_em delta=0.01 path=0 step="));
}

#[test]
fn shipped_preset_files_match_builtin_presets() {
    for name in geosde::experiments::PRESETS {
        let text = fs::read_to_string(configs().join(format!("{name}.toml"))).unwrap();
        let parsed = CliConfigFile::parse(&text).unwrap().to_experiment(None).unwrap();
        assert_eq!(parsed, ExperimentConfig::preset(name).unwrap(), "{name}");
    }
    let strong = fs::read_to_string(configs().join("strong-order-s5.toml")).unwrap();
    assert!(CliConfigFile::parse(&strong).unwrap().to_experiment(None).is_ok());
}
