//! Error metrics, coupled strong-error estimation, order fitting and the
//! experiment runner behind the CLI.
//!
//! The exact solution is not available, so the strong error of a scheme at
//! step `δ` is measured against Exp-EM at a much finer `δ_ref`, both driven
//! by the same fine Brownian grid (the coarse run sees block sums of it). The
//! supremum over `[0, T]` is taken over the coarse grid points.
//!
//! The functional error is the per-path residual `|f(x̂_T) - Ŝ_T|`, where
//! `Ŝ` is the Itô-formula functional accumulated along the numerical path
//! with the path's own increments; the reported figure is its mean over
//! paths. An independent Monte Carlo estimate of `S_T` would be the other
//! reading of the protocol; it is not implemented.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{EmbeddedManifold, Vector};
use crate::manifolds::{Ellipsoid, Sphere};
use crate::noise::generate_grid;
use crate::parallel::{map_paths, Execution};
use crate::schemes::{simulate_path, PathRecord, SchemeId};
use crate::sde::{HalfLastCoordSquared, ItoFunctionalSpec, SdeCoefficients, SphereBrownianMotion};

/// One (scheme, δ, path) outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRecord {
    pub scheme: SchemeId,
    pub delta: f64,
    pub path_id: u64,
    /// `|f(x̂_T) - Ŝ_T|`, absent when no functional is configured.
    pub functional_error: Option<f64>,
    /// `max_k ‖x̂(t_k) - x_ref(t_k)‖` for this path, absent without a reference.
    pub strong_error: Option<f64>,
    pub max_deviation: f64,
    pub wall_time_ns: u64,
    pub overflow: bool,
}

/// `|f(x̂_T) - Ŝ_T|`; infinite for an overflowed path.
pub fn functional_error(path: &PathRecord, functional: &dyn ItoFunctionalSpec) -> Result<f64> {
    let s_hat = path
        .s_hat
        .as_ref()
        .ok_or_else(|| Error::Argument("path was simulated without an Itô functional".into()))?;
    if path.overflowed() {
        return Ok(f64::INFINITY);
    }
    let s_t = *s_hat.last().expect("s_hat holds f(x0)");
    Ok((functional.value(path.final_point()) - s_t).abs())
}

/// `max_k ‖h(x̂_k)‖_∞`; infinite for an overflowed path.
pub fn geometric_deviation(path: &PathRecord) -> f64 {
    path.max_deviation()
}

/// Least-squares fit of `ln error = slope · ln δ + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_order(points: &[(f64, f64)]) -> Result<OrderFit> {
    if points.len() < 2 {
        return Err(Error::Argument(format!(
            "order fit needs at least two points, got {}",
            points.len()
        )));
    }
    if let Some((d, e)) = points
        .iter()
        .find(|(d, e)| !(*d > 0.0 && *e > 0.0) || !d.is_finite() || !e.is_finite())
    {
        return Err(Error::Argument(format!(
            "order fit needs positive finite values, got ({d}, {e})"
        )));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(d, _)| d.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e)| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Argument("order fit needs at least two distinct step sizes".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(OrderFit {
        slope,
        intercept,
        r_squared,
    })
}

/// `max_k ‖test_k - reference_{k·factor}‖` over the coarse grid points.
pub fn coupled_sup_error(reference: &PathRecord, test: &PathRecord, factor: usize) -> f64 {
    test.trajectory
        .iter()
        .enumerate()
        .map(|(k, x)| (x - &reference.trajectory[k * factor]).norm())
        .fold(0.0, f64::max)
}

/// Strong error `E[max_k ‖x̂(t_k) - x_ref(t_k)‖²]^{1/2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongErrorEstimate {
    pub value: f64,
    pub used_paths: usize,
    pub overflowed_paths: usize,
    /// More than 10% of paths overflowed.
    pub unreliable: bool,
}

impl StrongErrorEstimate {
    fn from_sups(sups: &[Option<f64>]) -> Self {
        let used: Vec<f64> = sups.iter().flatten().copied().collect();
        let overflowed = sups.len() - used.len();
        let value = if used.is_empty() {
            f64::INFINITY
        } else {
            (used.iter().map(|e| e * e).sum::<f64>() / used.len() as f64).sqrt()
        };
        Self {
            value,
            used_paths: used.len(),
            overflowed_paths: overflowed,
            unreliable: overflowed * 10 > sups.len(),
        }
    }
}

/// Integer ratio `coarse / fine` if it is a power of two.
fn dyadic_ratio(coarse: f64, fine: f64) -> Option<usize> {
    let ratio = coarse / fine;
    let r = ratio.round();
    if r < 1.0 || (ratio - r).abs() > 1e-9 * r {
        return None;
    }
    let r = r as usize;
    r.is_power_of_two().then_some(r)
}

/// Number of steps of size `delta` in `horizon`, if it is an integer.
fn steps_in(horizon: f64, delta: f64) -> Option<usize> {
    let m = horizon / delta;
    let r = m.round();
    (r >= 1.0 && (m - r).abs() <= 1e-9 * r).then_some(r as usize)
}

/// Coupled strong error of `scheme` at `delta` against Exp-EM at `delta_ref`.
#[allow(clippy::too_many_arguments)]
pub fn strong_error(
    manifold: &dyn EmbeddedManifold,
    sde: &dyn SdeCoefficients,
    scheme: SchemeId,
    delta: f64,
    delta_ref: f64,
    paths: u64,
    master_seed: u64,
    x0: &Vector,
    horizon: f64,
    execution: Execution,
) -> Result<StrongErrorEstimate> {
    let factor = dyadic_ratio(delta, delta_ref).ok_or_else(|| {
        Error::Argument(format!("delta {delta} is not a power-of-two multiple of delta_ref {delta_ref}"))
    })?;
    let fine_steps = steps_in(horizon, delta_ref)
        .ok_or_else(|| Error::Argument(format!("horizon {horizon} is not a multiple of delta_ref {delta_ref}")))?;
    if fine_steps % factor != 0 {
        return Err(Error::Argument(format!("horizon {horizon} is not a multiple of delta {delta}")));
    }
    if paths == 0 {
        return Err(Error::Argument("need at least one path".into()));
    }
    let d = sde.diffusion_count();
    let sups = map_paths(paths, execution, |path_id| -> Result<Option<f64>> {
        let grid = generate_grid(master_seed, path_id, d, delta_ref, fine_steps)?;
        let reference = simulate_path(manifold, sde, SchemeId::ExpEm, x0, &grid, None)?;
        let coarse = grid.coarsen(factor)?;
        let test = simulate_path(manifold, sde, scheme, x0, &coarse, None)?;
        if reference.overflowed() || test.overflowed() {
            return Ok(None);
        }
        Ok(Some(coupled_sup_error(&reference, &test, factor)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(StrongErrorEstimate::from_sups(&sups))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ManifoldSpec {
    Sphere { dim: usize },
    Ellipsoid { coeffs: Vec<f64> },
}

impl ManifoldSpec {
    pub fn build(&self) -> Result<Box<dyn EmbeddedManifold>> {
        Ok(match self {
            ManifoldSpec::Sphere { dim } => Box::new(Sphere::new(*dim)?),
            ManifoldSpec::Ellipsoid { coeffs } => Box::new(Ellipsoid::new(coeffs.clone())?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdeSpec {
    SphereBm,
}

impl SdeSpec {
    pub fn build(&self, manifold: &ManifoldSpec) -> Result<Box<dyn SdeCoefficients>> {
        match (self, manifold) {
            (SdeSpec::SphereBm, ManifoldSpec::Sphere { dim }) => Ok(Box::new(SphereBrownianMotion::new(*dim)?)),
            (SdeSpec::SphereBm, other) => Err(Error::Unsupported(format!(
                "sphere_bm requires a sphere manifold, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionalKind {
    None,
    HalfLastCoordSquared,
}

impl FunctionalKind {
    pub fn build(&self) -> Option<Box<dyn ItoFunctionalSpec>> {
        match self {
            FunctionalKind::None => None,
            FunctionalKind::HalfLastCoordSquared => Some(Box::new(HalfLastCoordSquared)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FunctionalKind::None => "none",
            FunctionalKind::HalfLastCoordSquared => "half-last-coord-squared",
        }
    }
}

/// Simulated time span: one horizon for every δ, or a fixed step count so
/// that the horizon grows with δ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    Time(f64),
    Steps(usize),
}

impl Horizon {
    pub fn time_for(&self, delta: f64) -> f64 {
        match self {
            Horizon::Time(t) => *t,
            Horizon::Steps(m) => *m as f64 * delta,
        }
    }

    pub fn steps_for(&self, delta: f64) -> Option<usize> {
        match self {
            Horizon::Time(t) => steps_in(*t, delta),
            Horizon::Steps(m) => Some(*m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub manifold: ManifoldSpec,
    pub sde: SdeSpec,
    pub schemes: Vec<SchemeId>,
    pub deltas: Vec<f64>,
    pub horizon: Horizon,
    pub paths: u64,
    pub master_seed: u64,
    pub reference_delta: Option<f64>,
    pub functional: FunctionalKind,
    pub emit_per_iteration: bool,
}

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: [&str; 3] = ["paper-moderate", "paper-highdim-small-step", "paper-highdim-large-step"];

impl ExperimentConfig {
    /// The three published protocols: `S^20` over `δ ∈ {2⁻¹⁰ … 2⁻³}` with
    /// 50 paths, and `S^2000` at `δ = 0.001` and `δ = 0.01`, all with 1000
    /// steps per run.
    pub fn preset(name: &str) -> Option<Self> {
        let all_schemes = vec![SchemeId::ExpEm, SchemeId::EuEm, SchemeId::GCG];
        let highdim = |delta: f64| ExperimentConfig {
            manifold: ManifoldSpec::Sphere { dim: 2000 },
            sde: SdeSpec::SphereBm,
            schemes: all_schemes.clone(),
            deltas: vec![delta],
            horizon: Horizon::Steps(1000),
            paths: 1,
            master_seed: 42,
            reference_delta: None,
            functional: FunctionalKind::HalfLastCoordSquared,
            emit_per_iteration: true,
        };
        match name {
            "paper-moderate" => Some(ExperimentConfig {
                manifold: ManifoldSpec::Sphere { dim: 20 },
                sde: SdeSpec::SphereBm,
                schemes: all_schemes.clone(),
                deltas: (3..=10).map(|k| 2f64.powi(-k)).collect(),
                horizon: Horizon::Steps(1000),
                paths: 50,
                master_seed: 42,
                reference_delta: None,
                functional: FunctionalKind::HalfLastCoordSquared,
                emit_per_iteration: false,
            }),
            "paper-highdim-small-step" => Some(highdim(0.001)),
            "paper-highdim-large-step" => Some(highdim(0.01)),
            _ => None,
        }
    }

    /// All problems found, one message per offending field.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        match &self.manifold {
            ManifoldSpec::Sphere { dim } if *dim < 1 => problems.push(format!("manifold.dim: must be at least 1, got {dim}")),
            ManifoldSpec::Ellipsoid { coeffs } => {
                if coeffs.len() < 2 {
                    problems.push("manifold.coeffs: need at least two coefficients".to_string());
                }
                if coeffs.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
                    problems.push("manifold.coeffs: every coefficient must be positive".to_string());
                }
            }
            _ => {}
        }
        if self.schemes.is_empty() {
            problems.push("run.schemes: must list at least one scheme".to_string());
        }
        if self.deltas.is_empty() {
            problems.push("run.deltas: must list at least one step size".to_string());
        }
        for d in &self.deltas {
            if !(*d > 0.0) || !d.is_finite() {
                problems.push(format!("run.deltas: {d} is not a positive step size"));
            } else if self.horizon.steps_for(*d).is_none() {
                problems.push(format!("run.horizon: {} is not an integer multiple of delta {d}", self.horizon.time_for(*d)));
            }
        }
        match self.horizon {
            Horizon::Time(t) if !(t > 0.0) || !t.is_finite() => problems.push(format!("run.horizon: must be positive, got {t}")),
            Horizon::Steps(0) => problems.push("run.steps: must be at least 1".to_string()),
            _ => {}
        }
        if self.paths == 0 {
            problems.push("run.paths: must be at least 1".to_string());
        }
        if let Some(r) = self.reference_delta {
            if !(r > 0.0) || !r.is_finite() {
                problems.push(format!("run.reference_delta: must be positive, got {r}"));
            } else {
                for d in &self.deltas {
                    if *d > 0.0 && dyadic_ratio(*d, r).is_none() {
                        problems.push(format!("run.reference_delta: delta {d} is not a power-of-two multiple of {r}"));
                    } else if *d > 0.0 && steps_in(self.horizon.time_for(*d), r).is_none() {
                        problems.push(format!("run.reference_delta: horizon for delta {d} is not a multiple of {r}"));
                    }
                }
            }
        }
        if self.functional != FunctionalKind::None {
            let on_sphere = matches!(self.manifold, ManifoldSpec::Sphere { .. });
            if !on_sphere {
                problems.push("run.functional: the Itô functional is only supported on the sphere".to_string());
            }
        }
        if let Err(e) = self.sde.build(&self.manifold) {
            if !matches!(e, Error::Argument(_)) {
                problems.push(format!("sde.kind: {e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// Per-step series averaged over paths for one (scheme, δ).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationSeries {
    pub scheme: SchemeId,
    pub delta: f64,
    /// Row `k - 1` describes step `k`.
    pub rows: Vec<IterationRow>,
    /// `(path_id, step)` of every overflow.
    pub overflows: Vec<(u64, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRow {
    pub step: usize,
    /// Mean of `|f(x̂_k) - Ŝ_k|` over paths still finite at step `k`.
    pub functional_error: Option<f64>,
    /// Max of `‖h(x̂_k)‖_∞` over paths still finite at step `k`.
    pub deviation: f64,
    /// Mean cumulative step time over those paths.
    pub cum_wall_time_ns: u64,
}

/// Aggregate over paths for one (scheme, δ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub scheme: SchemeId,
    pub delta: f64,
    pub paths: usize,
    pub overflow_paths: usize,
    pub mean_functional_error: Option<f64>,
    pub strong_error: Option<StrongErrorEstimate>,
    pub mean_max_deviation: f64,
    pub mean_wall_time_ns: f64,
    pub functional_fit: Option<OrderFit>,
    pub strong_fit: Option<OrderFit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    /// Sorted by scheme (config order), then δ (config order), then path id.
    pub records: Vec<ConvergenceRecord>,
    pub summary: Vec<SummaryRow>,
    /// Present when `emit_per_iteration` is set.
    pub iterations: Vec<IterationSeries>,
}

struct PathSeries {
    functional_error: Option<Vec<f64>>,
    deviation: Vec<f64>,
    cum_time: Vec<u64>,
    overflow_step: Option<usize>,
}

struct PathOutcome {
    records: Vec<(usize, usize, ConvergenceRecord)>,
    series: Vec<(usize, usize, PathSeries)>,
}

/// Runs every (path, δ, scheme) combination of `config`.
///
/// Deterministic in `(config, master_seed)` apart from wall times, whatever
/// the execution mode.
pub fn run_experiment(config: &ExperimentConfig, execution: Execution) -> Result<ExperimentOutput> {
    config
        .validate()
        .map_err(|p| Error::Argument(p.join("; ")))?;
    let manifold = config.manifold.build()?;
    let sde = config.sde.build(&config.manifold)?;
    let functional = config.functional.build();
    let x0 = manifold.base_point();
    let d = sde.diffusion_count();

    let outcomes = map_paths(config.paths, execution, |path_id| -> Result<PathOutcome> {
        let mut out = PathOutcome {
            records: Vec::new(),
            series: Vec::new(),
        };
        let mut reference_cache: HashMap<usize, (crate::noise::IncrementGrid, PathRecord)> = HashMap::new();
        for (di, &delta) in config.deltas.iter().enumerate() {
            let steps = config.horizon.steps_for(delta).expect("validated");
            let horizon = config.horizon.time_for(delta);

            let (grid, reference_factor) = match config.reference_delta {
                Some(r) => {
                    let fine_steps = steps_in(horizon, r).expect("validated");
                    let factor = dyadic_ratio(delta, r).expect("validated");
                    if !reference_cache.contains_key(&fine_steps) {
                        let fine = generate_grid(config.master_seed, path_id, d, r, fine_steps)?;
                        let reference = simulate_path(&*manifold, &*sde, SchemeId::ExpEm, &x0, &fine, None)?;
                        reference_cache.insert(fine_steps, (fine, reference));
                    }
                    let (fine, _) = &reference_cache[&fine_steps];
                    (fine.coarsen(factor)?, Some((fine_steps, factor)))
                }
                None => (generate_grid(config.master_seed, path_id, d, delta, steps)?, None),
            };

            for (si, &scheme) in config.schemes.iter().enumerate() {
                let path = simulate_path(&*manifold, &*sde, scheme, &x0, &grid, functional.as_deref())?;
                let functional_error = match functional.as_deref() {
                    Some(f) => Some(functional_error(&path, f)?),
                    None => None,
                };
                let strong_error = reference_factor.map(|(key, factor)| {
                    let reference = &reference_cache[&key].1;
                    if path.overflowed() || reference.overflowed() {
                        f64::INFINITY
                    } else {
                        coupled_sup_error(reference, &path, factor)
                    }
                });
                out.records.push((
                    si,
                    di,
                    ConvergenceRecord {
                        scheme,
                        delta,
                        path_id,
                        functional_error,
                        strong_error,
                        max_deviation: geometric_deviation(&path),
                        wall_time_ns: path.wall_time_ns,
                        overflow: path.overflowed(),
                    },
                ));
                if config.emit_per_iteration {
                    let fe = match (functional.as_deref(), path.s_hat.as_ref()) {
                        (Some(f), Some(s)) => Some(
                            path.trajectory
                                .iter()
                                .zip(s)
                                .skip(1)
                                .map(|(x, s)| (f.value(x) - s).abs())
                                .collect(),
                        ),
                        _ => None,
                    };
                    out.series.push((
                        si,
                        di,
                        PathSeries {
                            functional_error: fe,
                            deviation: path.deviations[1..].to_vec(),
                            cum_time: path.cum_step_time_ns[1..].to_vec(),
                            overflow_step: path.overflow_step,
                        },
                    ));
                }
            }
        }
        Ok(out)
    });

    let mut records = Vec::new();
    let mut series_by_cell: HashMap<(usize, usize), Vec<(u64, PathSeries)>> = HashMap::new();
    for (path_id, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome?;
        records.extend(outcome.records);
        for (si, di, s) in outcome.series {
            series_by_cell.entry((si, di)).or_default().push((path_id as u64, s));
        }
    }
    records.sort_by_key(|(si, di, r)| (*si, *di, r.path_id));

    let summary = summarize(config, &records);
    let records: Vec<ConvergenceRecord> = records.into_iter().map(|(_, _, r)| r).collect();

    let mut iterations = Vec::new();
    if config.emit_per_iteration {
        for (si, &scheme) in config.schemes.iter().enumerate() {
            for (di, &delta) in config.deltas.iter().enumerate() {
                let cell = series_by_cell.remove(&(si, di)).unwrap_or_default();
                iterations.push(aggregate_series(scheme, delta, config.horizon.steps_for(delta).expect("validated"), cell));
            }
        }
    }

    Ok(ExperimentOutput {
        records,
        summary,
        iterations,
    })
}

fn aggregate_series(scheme: SchemeId, delta: f64, steps: usize, mut cell: Vec<(u64, PathSeries)>) -> IterationSeries {
    cell.sort_by_key(|(id, _)| *id);
    let overflows = cell
        .iter()
        .filter_map(|(id, s)| s.overflow_step.map(|k| (*id, k)))
        .collect();
    let mut rows = Vec::new();
    for k in 0..steps {
        let alive: Vec<&PathSeries> = cell.iter().map(|(_, s)| s).filter(|s| s.deviation.len() > k).collect();
        if alive.is_empty() {
            break;
        }
        let count = alive.len() as f64;
        let functional_error = alive
            .iter()
            .map(|s| s.functional_error.as_ref().map(|v| v[k]))
            .sum::<Option<f64>>()
            .map(|total| total / count);
        let deviation = alive.iter().map(|s| s.deviation[k]).fold(0.0, f64::max);
        let cum_wall_time_ns = (alive.iter().map(|s| s.cum_time[k] as f64).sum::<f64>() / count).round() as u64;
        rows.push(IterationRow {
            step: k + 1,
            functional_error,
            deviation,
            cum_wall_time_ns,
        });
    }
    IterationSeries {
        scheme,
        delta,
        rows,
        overflows,
    }
}

fn summarize(config: &ExperimentConfig, records: &[(usize, usize, ConvergenceRecord)]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for (si, &scheme) in config.schemes.iter().enumerate() {
        let mut scheme_rows = Vec::new();
        for (di, &delta) in config.deltas.iter().enumerate() {
            let cell: Vec<&ConvergenceRecord> = records
                .iter()
                .filter(|(s, d, _)| *s == si && *d == di)
                .map(|(_, _, r)| r)
                .collect();
            let finite: Vec<&&ConvergenceRecord> = cell.iter().filter(|r| !r.overflow).collect();
            let mean = |vals: Vec<f64>| -> f64 {
                if vals.is_empty() {
                    f64::INFINITY
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            };
            let mean_functional_error = (config.functional != FunctionalKind::None)
                .then(|| mean(finite.iter().filter_map(|r| r.functional_error).collect()));
            let strong_error = config.reference_delta.map(|_| {
                let sups: Vec<Option<f64>> = cell
                    .iter()
                    .map(|r| r.strong_error.filter(|e| e.is_finite()))
                    .collect();
                StrongErrorEstimate::from_sups(&sups)
            });
            scheme_rows.push(SummaryRow {
                scheme,
                delta,
                paths: cell.len(),
                overflow_paths: cell.len() - finite.len(),
                mean_functional_error,
                strong_error,
                mean_max_deviation: mean(finite.iter().map(|r| r.max_deviation).collect()),
                mean_wall_time_ns: mean(cell.iter().map(|r| r.wall_time_ns as f64).collect()),
                functional_fit: None,
                strong_fit: None,
            });
        }
        let fit = |pick: &dyn Fn(&SummaryRow) -> Option<f64>| -> Option<OrderFit> {
            let pts: Vec<(f64, f64)> = scheme_rows
                .iter()
                .filter_map(|r| pick(r).map(|e| (r.delta, e)))
                .filter(|(_, e)| e.is_finite() && *e > 0.0)
                .collect();
            fit_order(&pts).ok()
        };
        let functional_fit = fit(&|r| r.mean_functional_error);
        let strong_fit = fit(&|r| r.strong_error.map(|s| s.value));
        for r in &mut scheme_rows {
            r.functional_fit = functional_fit;
            r.strong_fit = strong_fit;
        }
        rows.extend(scheme_rows);
    }
    rows
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::ConstantFunctional;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            manifold: ManifoldSpec::Sphere { dim: 3 },
            sde: SdeSpec::SphereBm,
            schemes: vec![SchemeId::ExpEm, SchemeId::EuEm],
            deltas: vec![0.25, 0.125],
            horizon: Horizon::Time(1.0),
            paths: 3,
            master_seed: 1,
            reference_delta: Some(0.03125),
            functional: FunctionalKind::HalfLastCoordSquared,
            emit_per_iteration: true,
        }
    }

    #[test]
    fn fit_order_on_power_laws() {
        let c = 3.7;
        let fit = fit_order(&[(2f64.powi(-4), c * 2f64.powi(-2)), (2f64.powi(-6), c * 2f64.powi(-3))]).unwrap();
        assert_eq!(fit.slope, 0.5);
        let pts: Vec<(f64, f64)> = (1..=4).map(|k| (0.5f64.powi(k), 2.0 * 0.5f64.powi(k))).collect();
        let fit = fit_order(&pts).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-14);
        assert!((fit.intercept - 2f64.ln()).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(fit_order(&[(0.1, 0.2)]).is_err());
        assert!(fit_order(&[(0.1, 0.2), (0.2, 0.0)]).is_err());
        assert!(fit_order(&[(0.1, 0.2), (0.1, 0.3)]).is_err());
    }

    #[test]
    fn functional_error_edge_cases() {
        let s = Sphere::new(3).unwrap();
        let bm = SphereBrownianMotion::new(3).unwrap();
        let grid = generate_grid(2, 0, 4, 0.1, 10).unwrap();
        let x0 = s.base_point();
        let c = ConstantFunctional(2.5);
        let p = simulate_path(&s, &bm, SchemeId::ExpEm, &x0, &grid, Some(&c)).unwrap();
        assert_eq!(functional_error(&p, &c).unwrap(), 0.0);

        let still = crate::noise::IncrementGrid::zeros(4, 0.0, 10);
        let f = HalfLastCoordSquared;
        let p = simulate_path(&s, &bm, SchemeId::ExpEm, &x0, &still, Some(&f)).unwrap();
        assert_eq!(functional_error(&p, &f).unwrap(), 0.0);
        assert!(geometric_deviation(&p) <= crate::geometry::TOL_ON);

        let bare = simulate_path(&s, &bm, SchemeId::ExpEm, &x0, &grid, None).unwrap();
        assert!(matches!(functional_error(&bare, &f), Err(Error::Argument(_))));
    }

    #[test]
    fn telescoping_functional_sum() {
        let s = Sphere::new(5).unwrap();
        let bm = SphereBrownianMotion::new(5).unwrap();
        let grid = generate_grid(8, 2, 6, 0.05, 40).unwrap();
        let f = HalfLastCoordSquared;
        let p = simulate_path(&s, &bm, SchemeId::ExpEm, &s.base_point(), &grid, Some(&f)).unwrap();
        let mut acc = f.value(&p.trajectory[0]);
        for k in 0..grid.steps() {
            acc += crate::sde::ito_functional_increment(&f, &s, &p.trajectory[k], grid.row(k), 0.05).unwrap();
        }
        assert_eq!(acc, *p.s_hat.unwrap().last().unwrap());
    }

    #[test]
    fn self_coupled_strong_error_is_zero() {
        let s = Sphere::new(5).unwrap();
        let bm = SphereBrownianMotion::new(5).unwrap();
        let x0 = s.base_point();
        for exec in [Execution::Sequential, Execution::Parallel] {
            let est = strong_error(&s, &bm, SchemeId::ExpEm, 2f64.powi(-8), 2f64.powi(-8), 4, 3, &x0, 1.0, exec).unwrap();
            assert_eq!(est.value, 0.0);
            assert_eq!(est.used_paths, 4);
        }
    }

    #[test]
    fn strong_error_trend_and_baseline() {
        let s = Sphere::new(5).unwrap();
        let bm = SphereBrownianMotion::new(5).unwrap();
        let x0 = s.base_point();
        let delta_ref = 2f64.powi(-11);
        let mut prev = f64::INFINITY;
        for k in 4..=7 {
            let delta = 2f64.powi(-k);
            let est = strong_error(&s, &bm, SchemeId::ExpEm, delta, delta_ref, 32, 11, &x0, 1.0, Execution::Parallel).unwrap();
            assert!(est.value <= 1.1 * prev, "delta {delta}: {} after {prev}", est.value);
            prev = est.value;
        }
        let delta = 2f64.powi(-5);
        let exp = strong_error(&s, &bm, SchemeId::ExpEm, delta, delta_ref, 32, 11, &x0, 1.0, Execution::Parallel).unwrap();
        let eu = strong_error(&s, &bm, SchemeId::EuEm, delta, delta_ref, 32, 11, &x0, 1.0, Execution::Parallel).unwrap();
        assert!(eu.value.is_finite() && eu.value > exp.value, "eu {} exp {}", eu.value, exp.value);
    }

    #[test]
    fn strong_error_argument_checks() {
        let s = Sphere::new(2).unwrap();
        let bm = SphereBrownianMotion::new(2).unwrap();
        let x0 = s.base_point();
        let run = |delta, delta_ref, paths, horizon| {
            strong_error(&s, &bm, SchemeId::ExpEm, delta, delta_ref, paths, 0, &x0, horizon, Execution::Sequential)
        };
        assert!(run(0.3, 0.1, 2, 1.2).is_err());
        assert!(run(0.25, 0.125, 2, 1.1).is_err());
        assert!(run(0.5, 0.125, 2, 0.75).is_err());
        assert!(run(0.25, 0.125, 0, 1.0).is_err());
    }

    #[test]
    fn unreliable_flag_threshold() {
        let ok = StrongErrorEstimate::from_sups(&[Some(1.0); 10]);
        assert!(!ok.unreliable);
        let mut sups = vec![Some(3.0); 9];
        sups.push(None);
        let edge = StrongErrorEstimate::from_sups(&sups);
        assert!(!edge.unreliable);
        assert_eq!(edge.value, 3.0);
        sups.push(None);
        assert!(StrongErrorEstimate::from_sups(&sups).unreliable);
        assert_eq!(StrongErrorEstimate::from_sups(&[None]).value, f64::INFINITY);
    }

    #[test]
    fn preset_shapes() {
        let mut moderate = ExperimentConfig::preset("paper-moderate").unwrap();
        assert_eq!(moderate.deltas.len(), 8);
        assert_eq!(moderate.schemes.len(), 3);
        assert_eq!(moderate.paths, 50);
        moderate.paths = 1;
        let out = run_experiment(&moderate, Execution::Parallel).unwrap();
        assert_eq!(out.records.len(), 24);
        assert_eq!(out.summary.len(), 24);
        for name in PRESETS {
            assert!(ExperimentConfig::preset(name).unwrap().validate().is_ok());
        }
        assert!(ExperimentConfig::preset("nope").is_none());
    }

    #[test]
    fn full_moderate_preset_record_count() {
        let cfg = ExperimentConfig::preset("paper-moderate").unwrap();
        let out = run_experiment(&cfg, Execution::Parallel).unwrap();
        assert_eq!(out.records.len(), 1200);
        assert_eq!(out.summary.len(), 24);
        let exp_fit = out.summary[0].functional_fit.unwrap();
        assert!(exp_fit.slope > 0.5, "{exp_fit:?}");
    }

    #[test]
    fn validation_lists_problems() {
        let mut cfg = small_config();
        cfg.schemes.clear();
        cfg.paths = 0;
        cfg.deltas.push(0.3);
        let problems = cfg.validate().unwrap_err();
        assert!(problems.iter().any(|p| p.starts_with("run.schemes")));
        assert!(problems.iter().any(|p| p.starts_with("run.paths")));
        assert!(problems.iter().any(|p| p.contains("0.3")));
        assert!(run_experiment(&cfg, Execution::Sequential).is_err());

        let mut cfg = small_config();
        cfg.manifold = ManifoldSpec::Ellipsoid { coeffs: vec![1.0, 2.0, 3.0, 4.0] };
        let problems = cfg.validate().unwrap_err();
        assert!(problems.iter().any(|p| p.starts_with("run.functional")));
        assert!(problems.iter().any(|p| p.starts_with("sde.kind")));
    }

    #[test]
    fn run_is_deterministic_and_ordered() {
        let cfg = small_config();
        let a = run_experiment(&cfg, Execution::Parallel).unwrap();
        let b = run_experiment(&cfg, Execution::Sequential).unwrap();
        let strip = |o: &ExperimentOutput| -> Vec<ConvergenceRecord> {
            o.records.iter().map(|r| ConvergenceRecord { wall_time_ns: 0, ..r.clone() }).collect()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.records.len(), 2 * 2 * 3);
        let keys: Vec<(SchemeId, u64)> = a.records.iter().map(|r| (r.scheme, r.path_id)).collect();
        assert_eq!(keys[0], (SchemeId::ExpEm, 0));
        assert_eq!(keys[2], (SchemeId::ExpEm, 2));
        assert_eq!(keys[6], (SchemeId::EuEm, 0));
        for r in &a.records {
            assert!(r.strong_error.unwrap() >= 0.0);
            assert!(r.functional_error.unwrap() >= 0.0);
        }
        assert_eq!(a.iterations.len(), 4);
        assert_eq!(a.iterations[0].rows.len(), 4);
        assert_eq!(a.iterations[1].rows.len(), 8);
        assert!(a.iterations[0].rows.iter().all(|r| r.deviation <= 1e-12));
        assert!(a.summary.iter().all(|r| r.strong_error.is_some()));
    }

    #[test]
    fn horizon_conversions() {
        assert_eq!(Horizon::Steps(1000).time_for(0.01), 10.0);
        assert_eq!(Horizon::Time(1.0).steps_for(0.125), Some(8));
        assert_eq!(Horizon::Time(1.0).steps_for(0.3), None);
        assert_eq!(Horizon::Steps(7).steps_for(0.3), Some(7));
    }
}
