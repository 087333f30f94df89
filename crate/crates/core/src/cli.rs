//! The `validate`, `convergence` and `simulate` commands and their output
//! files.
//!
//! Exit codes: 0 success, 1 a geometric check failed, 2 bad config,
//! 3 I/O failure. Numbers are written with 17 significant digits so every
//! `f64` round-trips.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{CliConfigFile, ConfigError};
use crate::experiments::{run_experiment, ConvergenceRecord, ExperimentConfig, ExperimentOutput, IterationSeries, SummaryRow};
use crate::geometry::{
    estimate_constants, geodesic_flow, second_fundamental_form, second_fundamental_form_generic, verify_expansion,
    CurvatureBoundEstimates, EmbeddedManifold, NormalFrame, PointSampler,
};
use crate::manifolds::{gaussian_vector, ManifoldSampler};
use crate::noise::GENERATOR_NAME;
use crate::parallel::Execution;
use crate::sde::coefficient_proxies;

pub const RECORDS_HEADER: &str = "scheme,delta,path_id,functional_error,strong_error,max_deviation,wall_time_ns,overflow";
pub const SUMMARY_HEADER: &str = "scheme,delta,paths,overflow_paths,mean_functional_error,strong_error,strong_error_unreliable,mean_max_deviation,mean_wall_time_ns,functional_slope,functional_r2,strong_slope,strong_r2";
pub const ITERATIONS_HEADER: &str = "step,functional_error,deviation,cum_wall_time_ns";

/// Process exit status of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    CheckFailure = 1,
    ConfigError = 2,
    IoError = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// `f64` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn records_csv(records: &[ConvergenceRecord]) -> String {
    let mut out = String::with_capacity(128 * (records.len() + 1));
    out.push_str(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scheme,
            fmt_f64(r.delta),
            r.path_id,
            fmt_opt(r.functional_error),
            fmt_opt(r.strong_error),
            fmt_f64(r.max_deviation),
            r.wall_time_ns,
            r.overflow
        );
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scheme,
            fmt_f64(r.delta),
            r.paths,
            r.overflow_paths,
            fmt_opt(r.mean_functional_error),
            fmt_opt(r.strong_error.map(|s| s.value)),
            r.strong_error.map(|s| s.unreliable.to_string()).unwrap_or_default(),
            fmt_f64(r.mean_max_deviation),
            fmt_f64(r.mean_wall_time_ns),
            fmt_opt(r.functional_fit.map(|f| f.slope)),
            fmt_opt(r.functional_fit.map(|f| f.r_squared)),
            fmt_opt(r.strong_fit.map(|f| f.slope)),
            fmt_opt(r.strong_fit.map(|f| f.r_squared)),
        );
    }
    out
}

pub fn iterations_csv(series: &IterationSeries) -> String {
    let mut out = String::with_capacity(96 * (series.rows.len() + 1));
    out.push_str(ITERATIONS_HEADER);
    out.push('\n');
    for r in &series.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.step,
            fmt_opt(r.functional_error),
            fmt_f64(r.deviation),
            r.cum_wall_time_ns
        );
    }
    out
}

/// `iterations_<scheme>_<delta>.csv`.
pub fn iterations_file_name(series: &IterationSeries) -> String {
    format!("iterations_{}_{}.csv", series.scheme.file_label(), series.delta)
}

fn meta_text(command: &str, config: &ExperimentConfig, config_text: &str, output: &ExperimentOutput) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "artifact: {} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "command: {command}");
    let _ = writeln!(out, "seed: {}", config.master_seed);
    let _ = writeln!(out, "generator: {GENERATOR_NAME}");
    let _ = writeln!(out, "manifold: {:?}", config.manifold);
    let _ = writeln!(out, "sde: {:?}", config.sde);
    let _ = writeln!(out, "initial_point: first basis vector scaled onto the manifold");
    let _ = writeln!(out, "functional: {}", config.functional.name());
    let overflowed: Vec<&ConvergenceRecord> = output.records.iter().filter(|r| r.overflow).collect();
    let _ = writeln!(out, "overflowed_paths: {}", overflowed.len());
    for s in &output.iterations {
        for (path, step) in &s.overflows {
            let _ = writeln!(out, "overflow: scheme={} delta={} path={path} step={step}", s.scheme, s.delta);
        }
    }
    if output.iterations.is_empty() {
        for r in overflowed {
            let _ = writeln!(out, "overflow: scheme={} delta={} path={}", r.scheme, r.delta, r.path_id);
        }
    }
    out.push_str("--- config ---\n");
    out.push_str(config_text);
    if !config_text.ends_with('\n') {
        out.push('\n');
    }
    out
}

/// Loaded config file: the raw text plus its parsed form.
struct Loaded {
    text: String,
    file: CliConfigFile,
}

fn load(config_path: &Path, report: &mut dyn Write) -> Result<Loaded, ExitStatus> {
    let text = match fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(report, "error: cannot read {}: {e}", config_path.display());
            return Err(ExitStatus::ConfigError);
        }
    };
    match CliConfigFile::parse(&text) {
        Ok(file) => Ok(Loaded { text, file }),
        Err(e) => {
            let _ = writeln!(report, "error: {e}");
            Err(ExitStatus::ConfigError)
        }
    }
}

fn config_failure(e: ConfigError, report: &mut dyn Write) -> ExitStatus {
    let _ = writeln!(report, "error: {e}");
    ExitStatus::ConfigError
}

/// Outcome of one geometric check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    fn at_most(name: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            name,
            value,
            threshold,
            passed: value <= threshold,
        }
    }

    fn at_least(name: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            name,
            value,
            threshold,
            passed: value >= threshold,
        }
    }
}

/// Number of sampled points in `validate`.
pub const VALIDATE_SAMPLES: usize = 1000;
/// Points at which the full expansion ladder and geodesic checks run.
const VALIDATE_DEEP_SAMPLES: usize = 10;
const VALIDATE_SEED: u64 = 0x5eed;

/// Geometric property checks for a manifold.
pub fn geometry_checks(manifold: &dyn EmbeddedManifold) -> crate::Result<(CurvatureBoundEstimates, Vec<CheckResult>)> {
    let mut sampler = ManifoldSampler::new(manifold, VALIDATE_SEED);
    let estimates = estimate_constants(manifold, &mut sampler, VALIDATE_SAMPLES)?;

    let mut sampler = ManifoldSampler::new(manifold, VALIDATE_SEED ^ 1);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(VALIDATE_SEED ^ 2);
    let mut completeness = 0.0_f64;
    let mut idempotence = 0.0_f64;
    let mut sff_tangential = 0.0_f64;
    let mut sff_asymmetry = 0.0_f64;
    let mut closed_sff_gap: Option<f64> = None;
    let mut ratio_worst = 0.0_f64;
    let mut ratio_spread = 0.0_f64;
    let mut closed_exp_gap: Option<f64> = None;
    let mut speed_drift = 0.0_f64;
    let mut speed_halving_violation = 0.0_f64;

    // curvature-scaled probe length for the geodesic checks
    let probe = (1.0 / estimates.c2_bound()).min(1.0);

    for i in 0..VALIDATE_SAMPLES.min(200) {
        let x = sampler.point();
        let frame = NormalFrame::at(manifold, &x)?;
        let w = gaussian_vector(manifold.ambient_dim(), &mut rng);
        let t = frame.tangent_component(&w);
        let n = frame.normal_component(&w);
        let scale = 1.0 + w.norm();
        completeness = completeness.max((&t + &n - &w).norm() / scale);
        idempotence = idempotence.max((frame.tangent_component(&t) - &t).norm() / scale);

        let u = sampler.tangent(&x);
        let v = sampler.tangent(&x);
        let puv = second_fundamental_form(manifold, &x, &u, &v)?;
        let pvu = second_fundamental_form(manifold, &x, &v, &u)?;
        sff_tangential = sff_tangential.max(frame.tangent_component(&puv).norm());
        sff_asymmetry = sff_asymmetry.max((&puv - &pvu).norm());
        if manifold.closed_form_sff(&x, &u, &v).is_some() {
            let generic = second_fundamental_form_generic(manifold, &x, &u, &v)?;
            let gap = (generic - &puv).norm();
            closed_sff_gap = Some(closed_sff_gap.unwrap_or(0.0).max(gap));
        }

        if i < VALIDATE_DEEP_SAMPLES {
            let ratios = verify_expansion(manifold, &x, &u, &[1e-1, 1e-2, 1e-3])?;
            for (_, r) in &ratios {
                ratio_worst = if r.is_finite() { ratio_worst.max(*r) } else { f64::INFINITY };
            }
            let (r1, r2, r3) = (ratios[0].1, ratios[1].1, ratios[2].1);
            ratio_spread = ratio_spread.max((r2 - r3).abs() - 0.5 * (r1 - r2).abs());

            let vel = &u * probe;
            let coarse = geodesic_flow(manifold, &x, &vel, 16)?;
            let fine = geodesic_flow(manifold, &x, &vel, 32)?;
            let d16 = (coarse.velocity.norm() - probe).abs();
            let d32 = (fine.velocity.norm() - probe).abs();
            speed_drift = speed_drift.max(d16).max(d32);
            speed_halving_violation = speed_halving_violation.max(d32 - (0.5 * d16).max(1e-13));

            if let Some(y) = manifold.closed_form_exp(&x, &vel) {
                let numeric = geodesic_flow(manifold, &x, &vel, 64)?.point;
                let gap = (numeric - y).norm();
                closed_exp_gap = Some(closed_exp_gap.unwrap_or(0.0).max(gap));
            }
        }
    }

    let mut checks = vec![
        CheckResult::at_least("normal frame full rank (L1_min_grad)", estimates.l1_min_grad, f64::MIN_POSITIVE),
        CheckResult::at_most("projection completeness", completeness, 1e-12),
        CheckResult::at_most("projection idempotence", idempotence, 1e-12),
        CheckResult::at_most("second fundamental form is normal", sff_tangential, 1e-10),
        CheckResult::at_most("second fundamental form symmetry", sff_asymmetry, 1e-13),
        CheckResult::at_most(
            "curvature bound C2_ratio_max <= sqrt(m) L2/L1",
            estimates.c2_ratio_max,
            estimates.c2_bound() * (1.0 + 1e-12),
        ),
        CheckResult::at_most("expansion ratio differences contract", ratio_spread, 1e-6),
        CheckResult::at_most("geodesic speed drift (16/32 substeps)", speed_drift, 1e-8),
        CheckResult::at_most("geodesic speed improves under doubling", speed_halving_violation, 0.0),
    ];
    if let Some(c3) = estimates.c3_bound() {
        checks.push(CheckResult::at_most("third-order expansion ratio <= C3", ratio_worst, c3));
        checks.push(CheckResult::at_most(
            "sampled exp residual ratio <= C3",
            estimates.exp_residual_ratio_max,
            c3,
        ));
    }
    if let Some(gap) = closed_sff_gap {
        checks.push(CheckResult::at_most("closed-form vs generic second fundamental form", gap, 1e-10));
    }
    if let Some(gap) = closed_exp_gap {
        checks.push(CheckResult::at_most("closed-form vs numeric exponential map", gap, 1e-8));
    }
    Ok((estimates, checks))
}

pub fn cmd_validate(config_path: &Path, report: &mut dyn Write) -> ExitStatus {
    let loaded = match load(config_path, report) {
        Ok(l) => l,
        Err(s) => return s,
    };
    let spec = match loaded.file.manifold_spec() {
        Ok(s) => s,
        Err(e) => return config_failure(e, report),
    };
    let manifold = match spec.build() {
        Ok(m) => m,
        Err(e) => return config_failure(ConfigError::Invalid(vec![format!("manifold: {e}")]), report),
    };
    let (estimates, checks) = match geometry_checks(&*manifold) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(report, "FAIL: geometry evaluation error: {e}");
            return ExitStatus::CheckFailure;
        }
    };

    let _ = writeln!(report, "manifold: {}", manifold.name());
    let _ = writeln!(report, "samples: {}", estimates.samples);
    let _ = writeln!(report, "L1_min_grad: {}", fmt_f64(estimates.l1_min_grad));
    let _ = writeln!(report, "L2_proxy: {}", fmt_f64(estimates.l2_proxy));
    let _ = writeln!(
        report,
        "L3_bound: {}",
        estimates.l3_bound.map(fmt_f64).unwrap_or_else(|| "unknown".into())
    );
    let _ = writeln!(report, "C2_ratio_max: {}", fmt_f64(estimates.c2_ratio_max));
    let _ = writeln!(report, "C2_bound: {}", fmt_f64(estimates.c2_bound()));
    let _ = writeln!(report, "exp_residual_ratio_max: {}", fmt_f64(estimates.exp_residual_ratio_max));
    if let Some(c3) = estimates.c3_bound() {
        let _ = writeln!(report, "C3_bound: {}", fmt_f64(c3));
    }

    if let Ok(config) = loaded.file.to_experiment(None) {
        if let Ok(sde) = config.sde.build(&config.manifold) {
            let mut sampler = ManifoldSampler::new(&*manifold, VALIDATE_SEED ^ 3);
            if let Ok(p) = coefficient_proxies(&*sde, &*manifold, &mut sampler, 100) {
                let _ = writeln!(report, "coefficient_lipschitz_proxy: {}", fmt_f64(p.lipschitz));
                let _ = writeln!(report, "coefficient_bound_proxy: {}", fmt_f64(p.bound));
            }
        }
    }

    let _ = writeln!(report, "{:<50} {:>24} {:>24}  status", "check", "value", "threshold");
    let mut all = true;
    for c in &checks {
        all &= c.passed;
        let _ = writeln!(
            report,
            "{:<50} {:>24} {:>24}  {}",
            c.name,
            fmt_f64(c.value),
            fmt_f64(c.threshold),
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    let _ = writeln!(report, "{}", if all { "PASS" } else { "FAIL" });
    if all {
        ExitStatus::Success
    } else {
        ExitStatus::CheckFailure
    }
}

fn resolve_out_dir(out: Option<&Path>, file: &CliConfigFile) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| file.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_files(dir: &Path, files: &[(String, String)], report: &mut dyn Write) -> ExitStatus {
    if let Err(e) = fs::create_dir_all(dir) {
        let _ = writeln!(report, "error: cannot create {}: {e}", dir.display());
        return ExitStatus::IoError;
    }
    for (name, body) in files {
        let path = dir.join(name);
        if let Err(e) = fs::write(&path, body) {
            let _ = writeln!(report, "error: cannot write {}: {e}", path.display());
            return ExitStatus::IoError;
        }
    }
    ExitStatus::Success
}

fn prepare(
    config_path: &Path,
    seed: Option<u64>,
    report: &mut dyn Write,
) -> Result<(Loaded, ExperimentConfig), ExitStatus> {
    let loaded = load(config_path, report)?;
    let config = loaded
        .file
        .to_experiment(seed)
        .map_err(|e| config_failure(e, report))?;
    Ok((loaded, config))
}

/// Writes `records.csv`, `summary.csv` and `meta.txt`.
pub fn cmd_convergence(
    config_path: &Path,
    out_dir: Option<&Path>,
    seed: Option<u64>,
    execution: Execution,
    report: &mut dyn Write,
) -> ExitStatus {
    let (loaded, config) = match prepare(config_path, seed, report) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let dir = resolve_out_dir(out_dir, &loaded.file);
    let output = match run_experiment(&config, execution) {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(report, "error: {e}");
            return ExitStatus::CheckFailure;
        }
    };
    let files = vec![
        ("records.csv".to_string(), records_csv(&output.records)),
        ("summary.csv".to_string(), summary_csv(&output.summary)),
        ("meta.txt".to_string(), meta_text("convergence", &config, &loaded.text, &output)),
    ];
    let status = write_files(&dir, &files, report);
    if status == ExitStatus::Success {
        let _ = writeln!(
            report,
            "wrote {} records and {} summary rows to {}",
            output.records.len(),
            output.summary.len(),
            dir.display()
        );
    }
    status
}

/// Writes one `iterations_<scheme>_<delta>.csv` per (scheme, δ) plus `meta.txt`.
pub fn cmd_simulate(
    config_path: &Path,
    out_dir: Option<&Path>,
    seed: Option<u64>,
    execution: Execution,
    report: &mut dyn Write,
) -> ExitStatus {
    let (loaded, mut config) = match prepare(config_path, seed, report) {
        Ok(p) => p,
        Err(s) => return s,
    };
    if !config.emit_per_iteration {
        let _ = writeln!(report, "error: simulate requires output.emit_per_iteration = true");
        return ExitStatus::ConfigError;
    }
    config.emit_per_iteration = true;
    let dir = resolve_out_dir(out_dir, &loaded.file);
    let output = match run_experiment(&config, execution) {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(report, "error: {e}");
            return ExitStatus::CheckFailure;
        }
    };
    let mut files: Vec<(String, String)> = output
        .iterations
        .iter()
        .map(|s| (iterations_file_name(s), iterations_csv(s)))
        .collect();
    files.push(("meta.txt".to_string(), meta_text("simulate", &config, &loaded.text, &output)));
    let status = write_files(&dir, &files, report);
    if status == ExitStatus::Success {
        for s in &output.iterations {
            let _ = writeln!(
                report,
                "{} delta={}: {} rows{}",
                s.scheme,
                s.delta,
                s.rows.len(),
                if s.overflows.is_empty() { String::new() } else { format!(", overflow on {} path(s)", s.overflows.len()) }
            );
        }
    }
    status
}
