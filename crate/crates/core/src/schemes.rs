//! One-step maps and the path driver.
//!
//! * Exp-EM: Euler predictor, projected onto the tangent space, pushed
//!   through the exponential map. Stays on the manifold by construction.
//! * Eu-EM: the plain Euclidean Euler–Maruyama step on the Itô form.
//! * G-CG: geometric Castell–Gaines. The noise increment is frozen and the
//!   ODE `ẏ = α_s(y) δ + Σ_j α_j(y) z_j` is flowed for unit time with RK4.
//!   By default the drift is the Stratonovich `α_s`, as in the standard
//!   Castell–Gaines construction; [`GcgDrift::Ito`] swaps in `α_s + α_d`.
//!   For Brownian motion on the sphere `α_s = 0`, so the Stratonovich
//!   variant is a pure noise flow. No constraint restoration is applied.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::geometry::{check_on_manifold, constraint_residual, exp_map_unchecked, EmbeddedManifold, NormalFrame, Vector};
use crate::noise::IncrementGrid;
use crate::sde::{check_compatible, ito_correction_at, sphere_functional_increment, ItoFunctionalSpec, SdeCoefficients};

/// Drift used inside the G-CG flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GcgDrift {
    Stratonovich,
    Ito,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeId {
    ExpEm,
    EuEm,
    Gcg { rk4_substeps: usize, drift: GcgDrift },
}

impl SchemeId {
    /// G-CG with one RK4 step per iteration and Stratonovich drift.
    pub const GCG: SchemeId = SchemeId::Gcg {
        rk4_substeps: 1,
        drift: GcgDrift::Stratonovich,
    };

    /// Name usable in file names (no `:`).
    pub fn file_label(&self) -> String {
        self.to_string().replace(':', "-")
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeId::ExpEm => f.write_str("exp_em"),
            SchemeId::EuEm => f.write_str("eu_em"),
            SchemeId::Gcg { rk4_substeps, drift } => {
                let base = match drift {
                    GcgDrift::Stratonovich => "gcg",
                    GcgDrift::Ito => "gcg_ito",
                };
                if *rk4_substeps == 1 {
                    f.write_str(base)
                } else {
                    write!(f, "{base}:{rk4_substeps}")
                }
            }
        }
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    /// `exp_em`, `eu_em`, `gcg`, `gcg:<substeps>`, `gcg_ito`, `gcg_ito:<substeps>`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, substeps) = match s.split_once(':') {
            Some((h, n)) => {
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad substep count in scheme {s:?}")))?;
                (h, Some(n))
            }
            None => (s, None),
        };
        let gcg = |drift| match substeps.unwrap_or(1) {
            0 => Err(Error::Argument("rk4_substeps must be at least 1".into())),
            rk4_substeps => Ok(SchemeId::Gcg { rk4_substeps, drift }),
        };
        match (head, substeps) {
            ("exp_em", None) => Ok(SchemeId::ExpEm),
            ("eu_em", None) => Ok(SchemeId::EuEm),
            ("gcg", _) => gcg(GcgDrift::Stratonovich),
            ("gcg_ito", _) => gcg(GcgDrift::Ito),
            _ => Err(Error::Argument(format!(
                "unknown scheme {s:?} (expected exp_em, eu_em, gcg[:N], gcg_ito[:N])"
            ))),
        }
    }
}

/// Tangential part of `α_d` at `x`, through the normal frame.
fn tangential_ito_correction<S: SdeCoefficients + ?Sized>(frame: &NormalFrame, sde: &S, x: &Vector) -> Vector {
    frame.tangent_component(&ito_correction_at(sde, x))
}

/// One Exp-EM step. `z` is the Brownian increment of the step (already
/// scaled by `√δ`).
///
/// `v = (α_s + α_dᵀ) δ + Σ_j α_j z_j`, then `exp_x(v)`.
pub fn exp_em_step<M, S>(manifold: &M, sde: &S, x: &Vector, delta: f64, z: &[f64]) -> Result<Vector>
where
    M: EmbeddedManifold + ?Sized,
    S: SdeCoefficients + ?Sized,
{
    check_on_manifold(manifold, x)?;
    let frame = NormalFrame::at(manifold, x)?;
    let mut v = sde.diffusion_apply(x, z);
    if delta != 0.0 {
        let drift = sde.drift_strat(x) + tangential_ito_correction(&frame, sde, x);
        v.axpy(delta, &drift, 1.0);
    }
    exp_map_unchecked(manifold, x, &v)
}

/// Exp-EM with the full Euler predictor `w` projected in one go:
/// `v = P_x((α_s + α_d) δ + Σ_j α_j z_j)`. Agrees with [`exp_em_step`] when
/// the fields are tangent.
pub fn exp_em_step_projected<M, S>(manifold: &M, sde: &S, x: &Vector, delta: f64, z: &[f64]) -> Result<Vector>
where
    M: EmbeddedManifold + ?Sized,
    S: SdeCoefficients + ?Sized,
{
    check_on_manifold(manifold, x)?;
    let frame = NormalFrame::at(manifold, x)?;
    let w = euler_increment(sde, x, delta, z);
    exp_map_unchecked(manifold, x, &frame.tangent_component(&w))
}

fn euler_increment<S: SdeCoefficients + ?Sized>(sde: &S, x: &Vector, delta: f64, z: &[f64]) -> Vector {
    let mut w = sde.diffusion_apply(x, z);
    if delta != 0.0 {
        let drift = sde.drift_strat(x) + ito_correction_at(sde, x);
        w.axpy(delta, &drift, 1.0);
    }
    w
}

/// One Euclidean Euler–Maruyama step: `x + (α_s + α_d) δ + Σ_j α_j z_j`.
pub fn eu_em_step<S: SdeCoefficients + ?Sized>(sde: &S, x: &Vector, delta: f64, z: &[f64]) -> Vector {
    x + euler_increment(sde, x, delta, z)
}

/// One G-CG step: RK4 on the frozen-noise ODE over unit time.
pub fn gcg_step<S: SdeCoefficients + ?Sized>(
    sde: &S,
    x: &Vector,
    delta: f64,
    z: &[f64],
    rk4_substeps: usize,
    drift: GcgDrift,
) -> Vector {
    let field = |y: &Vector| -> Vector {
        let mut f = sde.diffusion_apply(y, z);
        if delta != 0.0 {
            let a = match drift {
                GcgDrift::Stratonovich => sde.drift_strat(y),
                GcgDrift::Ito => sde.drift_strat(y) + ito_correction_at(sde, y),
            };
            f.axpy(delta, &a, 1.0);
        }
        f
    };
    let substeps = rk4_substeps.max(1);
    let h = 1.0 / substeps as f64;
    let mut y = x.clone();
    for _ in 0..substeps {
        let k1 = field(&y);
        let k2 = field(&(&y + &k1 * (0.5 * h)));
        let k3 = field(&(&y + &k2 * (0.5 * h)));
        let k4 = field(&(&y + &k3 * h));
        y += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
    }
    y
}

/// Discrete trajectory and per-step diagnostics.
#[derive(Debug, Clone)]
pub struct PathRecord {
    /// `x̂_0 … x̂_K`; `K` is the step count, or the last finite step on overflow.
    pub trajectory: Vec<Vector>,
    /// `‖h(x̂_k)‖_∞` for each recorded point.
    pub deviations: Vec<f64>,
    /// Discretised Itô functional `Ŝ_k`, when a functional was supplied.
    pub s_hat: Option<Vec<f64>>,
    /// Time spent inside the step maps, in nanoseconds.
    pub wall_time_ns: u64,
    /// Cumulative step time after each recorded point (`[0]` is zero).
    pub cum_step_time_ns: Vec<u64>,
    /// Index of the step whose result was non-finite.
    pub overflow_step: Option<usize>,
}

impl PathRecord {
    pub fn overflowed(&self) -> bool {
        self.overflow_step.is_some()
    }

    pub fn final_point(&self) -> &Vector {
        self.trajectory.last().expect("trajectory holds the initial point")
    }

    pub fn max_deviation(&self) -> f64 {
        if self.overflowed() {
            return f64::INFINITY;
        }
        self.deviations.iter().copied().fold(0.0, f64::max)
    }
}

/// Runs `scheme` over every row of `increments`, starting from `x0`.
///
/// A non-finite iterate stops the path and sets `overflow_step`; that is a
/// result, not an error.
pub fn simulate_path<M, S>(
    manifold: &M,
    sde: &S,
    scheme: SchemeId,
    x0: &Vector,
    increments: &IncrementGrid,
    functional: Option<&dyn ItoFunctionalSpec>,
) -> Result<PathRecord>
where
    M: EmbeddedManifold + ?Sized,
    S: SdeCoefficients + ?Sized,
{
    check_compatible(sde, manifold)?;
    check_on_manifold(manifold, x0)?;
    if increments.d() != sde.diffusion_count() {
        return Err(Error::Argument(format!(
            "increments have width {}, SDE has {} driving noises",
            increments.d(),
            sde.diffusion_count()
        )));
    }
    let sphere_n = match functional {
        Some(_) => Some(manifold.unit_sphere_dim().ok_or_else(|| {
            Error::Unsupported(format!("Itô functional on non-sphere manifold {}", manifold.name()))
        })?),
        None => None,
    };

    let delta = increments.delta();
    let steps = increments.steps();
    let mut trajectory = Vec::with_capacity(steps + 1);
    let mut deviations = Vec::with_capacity(steps + 1);
    let mut cum_step_time_ns = Vec::with_capacity(steps + 1);
    let mut s_hat = functional.map(|f| {
        let mut v = Vec::with_capacity(steps + 1);
        v.push(f.value(x0));
        v
    });

    trajectory.push(x0.clone());
    deviations.push(constraint_residual(manifold, x0));
    cum_step_time_ns.push(0);
    let mut elapsed: u64 = 0;
    let mut overflow_step = None;

    for k in 0..steps {
        let z = increments.row(k);
        let x = &trajectory[k];
        let start = Instant::now();
        let next = match scheme {
            SchemeId::ExpEm => exp_em_step(manifold, sde, x, delta, z)?,
            SchemeId::EuEm => eu_em_step(sde, x, delta, z),
            SchemeId::Gcg { rk4_substeps, drift } => gcg_step(sde, x, delta, z, rk4_substeps, drift),
        };
        elapsed += start.elapsed().as_nanos() as u64;

        if !next.iter().all(|c| c.is_finite()) {
            overflow_step = Some(k + 1);
            break;
        }
        if let (Some(f), Some(n), Some(s)) = (functional, sphere_n, s_hat.as_mut()) {
            let prev = *s.last().expect("seeded with f(x0)");
            s.push(prev + sphere_functional_increment(f, n, x, z, delta));
        }
        deviations.push(constraint_residual(manifold, &next));
        cum_step_time_ns.push(elapsed);
        trajectory.push(next);
    }

    Ok(PathRecord {
        trajectory,
        deviations,
        s_hat,
        wall_time_ns: elapsed,
        cum_step_time_ns,
        overflow_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifolds::{random_point, Ellipsoid, Sphere};
    use crate::noise::generate_grid;
    use crate::sde::{ProjectedDiffusion, SphereBrownianMotion};

    fn e(n: usize, i: usize) -> Vector {
        let mut out = Vector::zeros(n);
        out[i] = 1.0;
        out
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in ["exp_em", "eu_em", "gcg", "gcg:4", "gcg_ito", "gcg_ito:2"] {
            assert_eq!(s.parse::<SchemeId>().unwrap().to_string(), s);
        }
        assert_eq!("gcg".parse::<SchemeId>().unwrap(), SchemeId::GCG);
        assert_eq!("gcg:1".parse::<SchemeId>().unwrap(), SchemeId::GCG);
        assert_eq!("gcg:3".parse::<SchemeId>().unwrap().file_label(), "gcg-3");
        for bad in ["gcg:0", "gcg:x", "exp_em:2", "milstein", ""] {
            assert!(bad.parse::<SchemeId>().is_err(), "{bad}");
        }
    }

    #[test]
    fn exp_em_fixes_point_without_noise() {
        let s = Sphere::new(6).unwrap();
        let bm = SphereBrownianMotion::new(6).unwrap();
        let x = random_point(&s, 2);
        assert_eq!(exp_em_step(&s, &bm, &x, 0.3, &[0.0; 7]).unwrap(), x);
        assert_eq!(exp_em_step(&s, &bm, &x, 0.0, &[0.0; 7]).unwrap(), x);
    }

    #[test]
    fn exp_em_rotates_in_noise_plane() {
        let s2 = Sphere::new(2).unwrap();
        let bm = SphereBrownianMotion::new(2).unwrap();
        let a = 0.7;
        let y = exp_em_step(&s2, &bm, &e(3, 0), 0.0, &[0.0, a, 0.0]).unwrap();
        assert!((y - Vector::from_column_slice(&[a.cos(), a.sin(), 0.0])).norm() <= 1e-15);
    }

    #[test]
    fn projected_form_is_equivalent() {
        let s = Sphere::new(5).unwrap();
        let bm = SphereBrownianMotion::new(5).unwrap();
        let grid = generate_grid(1, 0, 6, 0.05, 20).unwrap();
        let x = random_point(&s, 4);
        for k in 0..grid.steps() {
            let a = exp_em_step(&s, &bm, &x, 0.05, grid.row(k)).unwrap();
            let b = exp_em_step_projected(&s, &bm, &x, 0.05, grid.row(k)).unwrap();
            assert!((a - b).norm() <= 1e-14);
        }
    }

    #[test]
    fn eu_em_examples() {
        let bm = SphereBrownianMotion::new(2).unwrap();
        let x = e(3, 0);
        assert_eq!(eu_em_step(&bm, &x, 0.0, &[0.0; 3]), x);
        let y = eu_em_step(&bm, &x, 0.1, &[0.0; 3]);
        assert!((y - Vector::from_column_slice(&[0.9, 0.0, 0.0])).norm() <= 1e-15);
    }

    #[test]
    fn gcg_without_noise_is_still() {
        let s = Sphere::new(3).unwrap();
        let bm = SphereBrownianMotion::new(3).unwrap();
        let x = random_point(&s, 9);
        assert_eq!(gcg_step(&bm, &x, 0.125, &[0.0; 4], 1, GcgDrift::Stratonovich), x);
    }

    #[test]
    fn gcg_drifts_less_than_eu_em() {
        let n = 20;
        let s = Sphere::new(n).unwrap();
        let bm = SphereBrownianMotion::new(n).unwrap();
        let delta = 0.125;
        let grid = generate_grid(3, 0, n + 1, delta, 50).unwrap();
        let x = s.base_point();
        for k in 0..grid.steps() {
            let raw = grid.row(k);
            let norm: f64 = raw.iter().map(|z| z * z).sum::<f64>().sqrt();
            let z: Vec<f64> = raw.iter().map(|zi| zi * delta.sqrt() / norm).collect();
            let g = gcg_step(&bm, &x, delta, &z, 1, GcgDrift::Stratonovich);
            let u = eu_em_step(&bm, &x, delta, &z);
            let dg = (1.0 - g.norm_squared()).abs();
            let du = (1.0 - u.norm_squared()).abs();
            assert!(dg > 0.0 && dg < du, "step {k}: gcg {dg:e}, eu {du:e}");
        }
    }

    #[test]
    fn gcg_ito_variant_adds_correction() {
        let bm = SphereBrownianMotion::new(2).unwrap();
        let x = e(3, 0);
        let y = gcg_step(&bm, &x, 0.1, &[0.0; 3], 1, GcgDrift::Ito);
        // ẏ = -0.1 y flowed for unit time
        assert!((y[0] - (-0.1f64).exp()).abs() <= 1e-6);
    }

    #[test]
    fn schemes_agree_for_small_inputs() {
        let n = 4;
        let s = Sphere::new(n).unwrap();
        let bm = SphereBrownianMotion::new(n).unwrap();
        let mut worst = 0.0_f64;
        for seed in 0..1000u64 {
            let x = random_point(&s, seed);
            let delta = 10f64.powf(-1.0 - (seed % 4) as f64);
            let grid = generate_grid(seed, 0, n + 1, delta, 1).unwrap();
            let z = grid.row(0);
            let zz: f64 = z.iter().map(|v| v * v).sum();
            let a = exp_em_step(&s, &bm, &x, delta, z).unwrap();
            let b = eu_em_step(&bm, &x, delta, z);
            worst = worst.max((a - b).norm() / (delta + zz));
        }
        assert!(worst.is_finite() && worst < 10.0, "{worst}");
    }

    #[test]
    fn path_driver_records_everything() {
        let s = Sphere::new(20).unwrap();
        let bm = SphereBrownianMotion::new(20).unwrap();
        let grid = generate_grid(42, 0, 21, 0.125, 1000).unwrap();
        let x0 = s.base_point();
        let exp = simulate_path(&s, &bm, SchemeId::ExpEm, &x0, &grid, Some(&crate::sde::HalfLastCoordSquared)).unwrap();
        assert_eq!(exp.trajectory.len(), 1001);
        assert_eq!(exp.deviations.len(), 1001);
        assert_eq!(exp.cum_step_time_ns.len(), 1001);
        assert_eq!(exp.s_hat.as_ref().unwrap().len(), 1001);
        assert!(exp.deviations[0] <= 1e-12);
        assert!(exp.max_deviation() <= 1e-12);
        assert!(!exp.overflowed());
        let again = simulate_path(&s, &bm, SchemeId::ExpEm, &x0, &grid, Some(&crate::sde::HalfLastCoordSquared)).unwrap();
        assert_eq!(exp.trajectory, again.trajectory);
        assert_eq!(exp.s_hat, again.s_hat);

        let eu = simulate_path(&s, &bm, SchemeId::EuEm, &x0, &grid, None).unwrap();
        assert!(eu.max_deviation() >= 1e-2);
    }

    #[test]
    fn still_sde_keeps_initial_point() {
        let ell = Ellipsoid::new(vec![1.0, 2.0, 3.0]).unwrap();
        let sde = ProjectedDiffusion::new(ell.clone(), nalgebra::DMatrix::zeros(3, 2)).unwrap();
        let grid = generate_grid(5, 1, 2, 0.1, 10).unwrap();
        let x0 = random_point(&ell, 5);
        for scheme in [SchemeId::ExpEm, SchemeId::EuEm, SchemeId::GCG] {
            let p = simulate_path(&ell, &sde, scheme, &x0, &grid, None).unwrap();
            assert!(p.trajectory.iter().all(|x| *x == x0), "{scheme}");
        }
    }

    #[test]
    fn overflow_truncates_path() {
        let n = 2000;
        let s = Sphere::new(n).unwrap();
        let bm = SphereBrownianMotion::new(n).unwrap();
        let grid = generate_grid(42, 0, n + 1, 0.01, 1000).unwrap();
        let p = simulate_path(&s, &bm, SchemeId::EuEm, &s.base_point(), &grid, None).unwrap();
        let k = p.overflow_step.expect("Eu-EM overflows at n=2000, delta=0.01");
        assert!(k < 1000);
        assert_eq!(p.trajectory.len(), k);
        assert_eq!(p.max_deviation(), f64::INFINITY);
    }

    #[test]
    fn driver_rejects_bad_inputs() {
        let s = Sphere::new(2).unwrap();
        let bm = SphereBrownianMotion::new(2).unwrap();
        let grid = generate_grid(1, 0, 3, 0.1, 4).unwrap();
        let narrow = generate_grid(1, 0, 2, 0.1, 4).unwrap();
        let off = Vector::from_column_slice(&[2.0, 0.0, 0.0]);
        assert!(matches!(
            simulate_path(&s, &bm, SchemeId::ExpEm, &off, &grid, None),
            Err(Error::OffManifold { .. })
        ));
        assert!(simulate_path(&s, &bm, SchemeId::ExpEm, &s.base_point(), &narrow, None).is_err());
        let ell = Ellipsoid::new(vec![1.0, 2.0, 3.0]).unwrap();
        let pd = ProjectedDiffusion::brownian(ell.clone());
        assert!(matches!(
            simulate_path(&ell, &pd, SchemeId::ExpEm, &ell.base_point(), &grid, Some(&crate::sde::HalfLastCoordSquared)),
            Err(Error::Unsupported(_))
        ));
    }
}
