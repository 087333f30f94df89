//! Geometry of manifolds embedded in Euclidean space as the zero set of a
//! smooth constraint `h: R^(n+m) -> R^m` with full-rank Jacobian.
//!
//! Everything here works from the constraint data alone:
//!
//! * tangent / normal projections built from the Jacobian `N_x` and the
//!   small Gram matrix `N_xᵀ N_x`,
//! * the second fundamental form, recovered by differentiating
//!   `⟨u, ∇h^l⟩ = 0` along `v`, which gives the `m × m` linear system
//!   `N_xᵀ Π(u, v) = -[∇²h^l(u, v)]_l`,
//! * the exponential map, either in closed form when the manifold supplies
//!   one or by integrating the ambient geodesic ODE `γ̈ = Π(γ̇, γ̇)`.
//!
//! The numeric geodesic finishes with a Newton solve for `λ ∈ R^m` in
//! `h(y + N_y λ) = 0`. That is a local root-find along the normal fibre
//! through a point already within integrator error of the manifold; it is
//! not a nearest-point projection onto the manifold, which is a global
//! optimisation problem and is never attempted anywhere in this crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Column vector in the ambient space.
pub type Vector = DVector<f64>;

/// Largest `‖h(x)‖_∞` for which `x` counts as on the manifold.
pub const TOL_ON: f64 = 1e-9;
/// Relative tolerance of the tangency test `‖N_xᵀ v‖_∞ ≤ TOL_TAN (1 + ‖v‖)`.
pub const TOL_TAN: f64 = 1e-10;
/// Constraint residual the numeric exponential map must reach.
pub const TOL_GEO: f64 = 1e-10;
/// Newton stopping tolerance for constraint restoration.
pub const RESTORE_TOL: f64 = 1e-12;
/// Newton iteration cap for constraint restoration.
pub const RESTORE_MAX_ITERS: usize = 8;
/// RK4 substeps used by [`exp_map`] when no closed form is available.
pub const DEFAULT_GEODESIC_SUBSTEPS: usize = 64;

/// A manifold `{x : h(x) = 0}` with `h: R^(n+m) -> R^m`.
///
/// Implementations must be pure and may be shared between threads.
pub trait EmbeddedManifold: Send + Sync {
    /// Short human-readable name, e.g. `sphere(20)`.
    fn name(&self) -> String;

    /// `n + m`.
    fn ambient_dim(&self) -> usize;

    /// `m`, the number of scalar constraints.
    fn codim(&self) -> usize;

    fn intrinsic_dim(&self) -> usize {
        self.ambient_dim() - self.codim()
    }

    /// `h(x)`, length `m`.
    fn constraint(&self, x: &Vector) -> Vector;

    /// `N_x = [∇h^1(x), …, ∇h^m(x)]`, an `(n+m) × m` matrix.
    fn constraint_jacobian(&self, x: &Vector) -> DMatrix<f64>;

    /// `[∇²h^l(x)(u, v)]_l`, length `m`. Must be symmetric in `(u, v)`.
    fn constraint_hessian_quad(&self, x: &Vector, u: &Vector, v: &Vector) -> Vector;

    fn closed_form_exp(&self, _x: &Vector, _v: &Vector) -> Option<Vector> {
        None
    }

    fn closed_form_sff(&self, _x: &Vector, _u: &Vector, _v: &Vector) -> Option<Vector> {
        None
    }

    /// Draw a point on the manifold.
    fn sample_point(&self, rng: &mut dyn rand::RngCore) -> Vector;

    /// Deterministic starting point used by experiments.
    fn base_point(&self) -> Vector;

    /// `Some(n)` if this manifold is the unit sphere `S^n` in `R^(n+1)`.
    fn unit_sphere_dim(&self) -> Option<usize> {
        None
    }

    /// Known bound on the third derivative of the constraint, if any.
    fn third_order_bound(&self) -> Option<f64> {
        None
    }
}

/// `‖h(x)‖_∞`.
pub fn constraint_residual<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector) -> f64 {
    inf_norm(&manifold.constraint(x))
}

pub(crate) fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |acc, c| {
        if c.is_nan() || acc.is_nan() {
            f64::NAN
        } else {
            acc.max(c.abs())
        }
    })
}

pub fn check_on_manifold<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector) -> Result<()> {
    check_dim(manifold, x)?;
    let residual = constraint_residual(manifold, x);
    if residual <= TOL_ON {
        Ok(())
    } else {
        Err(Error::OffManifold {
            residual,
            tolerance: TOL_ON,
        })
    }
}

fn check_dim<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector) -> Result<()> {
    if x.len() != manifold.ambient_dim() {
        return Err(Error::Argument(format!(
            "vector has length {}, ambient dimension is {}",
            x.len(),
            manifold.ambient_dim()
        )));
    }
    Ok(())
}

/// Constraint Jacobian at a point together with the factorised Gram matrix
/// `N_xᵀ N_x`. Valid at any ambient point where `N_x` has full column rank,
/// on or off the manifold.
#[derive(Debug, Clone)]
pub struct NormalFrame {
    jacobian: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
}

impl NormalFrame {
    pub fn at<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector) -> Result<Self> {
        Self::from_jacobian(manifold.constraint_jacobian(x))
    }

    pub fn from_jacobian(jacobian: DMatrix<f64>) -> Result<Self> {
        let gram = jacobian.transpose() * &jacobian;
        let m = gram.nrows();
        let (smallest, largest) = if m == 1 {
            let s = gram[(0, 0)].max(0.0).sqrt();
            (s, s)
        } else {
            let eig = gram.clone().symmetric_eigen();
            let lo = eig.eigenvalues.min().max(0.0).sqrt();
            let hi = eig.eigenvalues.max().max(0.0).sqrt();
            (lo, hi)
        };
        if !(smallest > 1e-12 * largest.max(f64::MIN_POSITIVE)) || !smallest.is_finite() {
            return Err(Error::RankDeficient {
                smallest_singular_value: smallest,
            });
        }
        let gram_inv = if m == 1 {
            DMatrix::from_element(1, 1, 1.0 / gram[(0, 0)])
        } else {
            gram.cholesky()
                .ok_or(Error::RankDeficient {
                    smallest_singular_value: smallest,
                })?
                .inverse()
        };
        Ok(Self { jacobian, gram_inv })
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    /// `(N_xᵀN_x)^{-1} N_xᵀ w`.
    pub fn normal_coefficients(&self, w: &Vector) -> Vector {
        &self.gram_inv * (self.jacobian.tr_mul(w))
    }

    /// `N_x (N_xᵀN_x)^{-1} N_xᵀ w`.
    pub fn normal_component(&self, w: &Vector) -> Vector {
        &self.jacobian * self.normal_coefficients(w)
    }

    /// `w - N_x (N_xᵀN_x)^{-1} N_xᵀ w`.
    pub fn tangent_component(&self, w: &Vector) -> Vector {
        w - self.normal_component(w)
    }

    /// The unique normal vector `p` with `N_xᵀ p = rhs`.
    pub fn normal_with_gradient_products(&self, rhs: &Vector) -> Vector {
        &self.jacobian * (&self.gram_inv * rhs)
    }

    /// `‖N_xᵀ v‖_∞`.
    pub fn tangency_defect(&self, v: &Vector) -> f64 {
        inf_norm(&self.jacobian.tr_mul(v))
    }
}

fn check_tangent(frame: &NormalFrame, v: &Vector) -> Result<()> {
    let defect = frame.tangency_defect(v);
    if defect <= TOL_TAN * (1.0 + v.norm()) {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "vector is not tangent: ‖N_xᵀv‖_∞ = {defect:e}"
        )))
    }
}

/// A vector together with the on-manifold point it is tangent at.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub base: Vector,
    pub vec: Vector,
}

impl TangentVector {
    /// Validates the base point and the tangency of `vec`.
    pub fn new<M: EmbeddedManifold + ?Sized>(manifold: &M, base: Vector, vec: Vector) -> Result<Self> {
        check_on_manifold(manifold, &base)?;
        check_dim(manifold, &vec)?;
        let frame = NormalFrame::at(manifold, &base)?;
        check_tangent(&frame, &vec)?;
        Ok(Self { base, vec })
    }
}

pub fn tangent_project<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector, w: &Vector) -> Result<Vector> {
    check_on_manifold(manifold, x)?;
    check_dim(manifold, w)?;
    Ok(NormalFrame::at(manifold, x)?.tangent_component(w))
}

pub fn normal_project<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector, w: &Vector) -> Result<Vector> {
    check_on_manifold(manifold, x)?;
    check_dim(manifold, w)?;
    Ok(NormalFrame::at(manifold, x)?.normal_component(w))
}

/// `Π(u, v)` from the constraint Hessians: `-N (NᵀN)^{-1} q`, `q_l = ∇²h^l(u, v)`.
///
/// No on-manifold check; also used along numeric geodesics, which sit a
/// hair off the manifold between restorations.
pub fn sff_from_frame<M: EmbeddedManifold + ?Sized>(
    manifold: &M,
    frame: &NormalFrame,
    x: &Vector,
    u: &Vector,
    v: &Vector,
) -> Vector {
    let q = manifold.constraint_hessian_quad(x, u, v);
    -frame.normal_with_gradient_products(&q)
}

/// Second fundamental form through the generic constraint-Hessian route,
/// ignoring any closed form the manifold provides.
pub fn second_fundamental_form_generic<M: EmbeddedManifold + ?Sized>(
    manifold: &M,
    x: &Vector,
    u: &Vector,
    v: &Vector,
) -> Result<Vector> {
    check_on_manifold(manifold, x)?;
    check_dim(manifold, u)?;
    check_dim(manifold, v)?;
    let frame = NormalFrame::at(manifold, x)?;
    check_tangent(&frame, u)?;
    check_tangent(&frame, v)?;
    Ok(sff_from_frame(manifold, &frame, x, u, v))
}

/// Second fundamental form `Π(u, v)` for tangent `u`, `v` at `x`.
pub fn second_fundamental_form<M: EmbeddedManifold + ?Sized>(
    manifold: &M,
    x: &Vector,
    u: &Vector,
    v: &Vector,
) -> Result<Vector> {
    check_on_manifold(manifold, x)?;
    check_dim(manifold, u)?;
    check_dim(manifold, v)?;
    let frame = NormalFrame::at(manifold, x)?;
    check_tangent(&frame, u)?;
    check_tangent(&frame, v)?;
    Ok(manifold
        .closed_form_sff(x, u, v)
        .unwrap_or_else(|| sff_from_frame(manifold, &frame, x, u, v)))
}

/// Exponential map `exp_x(v)`.
///
/// Uses the manifold's closed form when it has one, otherwise
/// [`geodesic_integrate`] with [`DEFAULT_GEODESIC_SUBSTEPS`].
pub fn exp_map<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector, v: &Vector) -> Result<Vector> {
    check_on_manifold(manifold, x)?;
    check_dim(manifold, v)?;
    let frame = NormalFrame::at(manifold, x)?;
    check_tangent(&frame, v)?;
    exp_map_unchecked(manifold, x, v)
}

/// [`exp_map`] without the precondition checks; the hot path of Exp-EM.
pub(crate) fn exp_map_unchecked<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector, v: &Vector) -> Result<Vector> {
    if v.iter().all(|c| *c == 0.0) {
        return Ok(x.clone());
    }
    if let Some(y) = manifold.closed_form_exp(x, v) {
        return Ok(y);
    }
    let end = geodesic_flow(manifold, x, v, DEFAULT_GEODESIC_SUBSTEPS)?;
    let residual = constraint_residual(manifold, &end.point);
    if residual > TOL_GEO {
        return Err(Error::ToleranceNotMet {
            residual,
            target: TOL_GEO,
        });
    }
    Ok(end.point)
}

/// End state of a numerically integrated geodesic.
#[derive(Debug, Clone)]
pub struct GeodesicEndpoint {
    pub point: Vector,
    /// Final velocity, projected onto the tangent space at `point`.
    pub velocity: Vector,
}

/// Endpoint of the unit-time geodesic from `x` with velocity `v`.
pub fn geodesic_integrate<M: EmbeddedManifold + ?Sized>(
    manifold: &M,
    x: &Vector,
    v: &Vector,
    substeps: usize,
) -> Result<Vector> {
    Ok(geodesic_flow(manifold, x, v, substeps)?.point)
}

/// Integrates `γ̈ = Π(γ̇, γ̇)` over unit time with classical RK4, then
/// restores the constraint along the normal fibre and re-projects the
/// velocity.
pub fn geodesic_flow<M: EmbeddedManifold + ?Sized>(
    manifold: &M,
    x: &Vector,
    v: &Vector,
    substeps: usize,
) -> Result<GeodesicEndpoint> {
    if substeps == 0 {
        return Err(Error::Argument("substeps must be at least 1".into()));
    }
    check_dim(manifold, x)?;
    check_dim(manifold, v)?;
    if v.iter().all(|c| *c == 0.0) {
        return Ok(GeodesicEndpoint {
            point: x.clone(),
            velocity: v.clone(),
        });
    }

    let accel = |p: &Vector, q: &Vector| -> Result<Vector> {
        let frame = NormalFrame::at(manifold, p)?;
        Ok(sff_from_frame(manifold, &frame, p, q, q))
    };

    let h = 1.0 / substeps as f64;
    let mut p = x.clone();
    let mut q = v.clone();
    for _ in 0..substeps {
        let k1p = q.clone();
        let k1q = accel(&p, &q)?;

        let p2 = &p + &k1p * (0.5 * h);
        let q2 = &q + &k1q * (0.5 * h);
        let k2q = accel(&p2, &q2)?;
        let k2p = q2;

        let p3 = &p + &k2p * (0.5 * h);
        let q3 = &q + &k2q * (0.5 * h);
        let k3q = accel(&p3, &q3)?;
        let k3p = q3;

        let p4 = &p + &k3p * h;
        let q4 = &q + &k3q * h;
        let k4q = accel(&p4, &q4)?;
        let k4p = q4;

        p += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
        q += (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (h / 6.0);
    }

    let point = restore_constraint(manifold, &p)?;
    let velocity = NormalFrame::at(manifold, &point)?.tangent_component(&q);
    Ok(GeodesicEndpoint { point, velocity })
}

/// Newton solve for `λ` in `h(y + N_y λ) = 0`, starting from `λ = 0`.
pub fn restore_constraint<M: EmbeddedManifold + ?Sized>(manifold: &M, y: &Vector) -> Result<Vector> {
    let base_jac = manifold.constraint_jacobian(y);
    let mut lambda = Vector::zeros(manifold.codim());
    let mut point = y.clone();
    let mut residual = manifold.constraint(&point);
    let mut iterations = 0;
    while inf_norm(&residual) > RESTORE_TOL && iterations < RESTORE_MAX_ITERS {
        let jac = manifold.constraint_jacobian(&point).tr_mul(&base_jac);
        let step = jac.lu().solve(&(-&residual)).ok_or(Error::RestorationFailed {
            residual: inf_norm(&residual),
            iterations,
        })?;
        lambda += step;
        point = y + &base_jac * &lambda;
        residual = manifold.constraint(&point);
        iterations += 1;
    }
    let r = inf_norm(&residual);
    if !(r <= TOL_GEO) {
        return Err(Error::RestorationFailed {
            residual: r,
            iterations,
        });
    }
    Ok(point)
}

/// `‖exp_x(s·v) - x - s·v - ½s²Π(v, v)‖ / s³` for each scale `s`.
pub fn verify_expansion<M: EmbeddedManifold + ?Sized>(
    manifold: &M,
    x: &Vector,
    direction: &Vector,
    scales: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Argument("scales must be positive".into()));
    }
    let curvature = second_fundamental_form(manifold, x, direction, direction)?;
    scales
        .iter()
        .map(|&s| {
            let v = direction * s;
            let y = exp_map(manifold, x, &v)?;
            let residual = y - x - &v - &curvature * (0.5 * s * s);
            Ok((s, residual.norm() / (s * s * s)))
        })
        .collect()
}

/// Source of on-manifold points and tangent vectors for sampled checks.
pub trait PointSampler {
    fn point(&mut self) -> Vector;
    fn tangent(&mut self, x: &Vector) -> Vector;
}

/// Empirical stand-ins for the constants bounding the geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureBoundEstimates {
    /// Smallest sampled `‖∇h^l‖`.
    pub l1_min_grad: f64,
    /// Largest sampled `|∇²h^l(u, v)| / (‖u‖‖v‖)` over ambient and tangent pairs.
    pub l2_proxy: f64,
    /// Third-order constant when the manifold knows it; not estimated.
    pub l3_bound: Option<f64>,
    /// Largest sampled `‖Π(u, v)‖ / (‖u‖‖v‖)`.
    pub c2_ratio_max: f64,
    /// Largest sampled `‖exp_x(v) - x - v - ½Π(v, v)‖ / ‖v‖³` at `‖v‖ = EXP_PROBE_SCALE`.
    pub exp_residual_ratio_max: f64,
    pub samples: usize,
    pub codim: usize,
}

/// Step length at which [`estimate_constants`] probes the exponential map.
pub const EXP_PROBE_SCALE: f64 = 0.1;

impl CurvatureBoundEstimates {
    /// `√m · L₂ / L₁` from the sampled proxies.
    pub fn c2_bound(&self) -> f64 {
        (self.codim as f64).sqrt() * self.l2_proxy / self.l1_min_grad
    }

    /// `√(C₂⁴ + m((L₃ + C₂L₂)/L₁)²)`, available when `L₃` is known.
    pub fn c3_bound(&self) -> Option<f64> {
        let l3 = self.l3_bound?;
        let c2 = self.c2_bound();
        let m = self.codim as f64;
        let t = (l3 + c2 * self.l2_proxy) / self.l1_min_grad;
        Some((c2.powi(4) + m * t * t).sqrt())
    }
}

pub fn estimate_constants<M: EmbeddedManifold + ?Sized>(
    manifold: &M,
    sampler: &mut dyn PointSampler,
    num_samples: usize,
) -> Result<CurvatureBoundEstimates> {
    if num_samples == 0 {
        return Err(Error::Argument("num_samples must be at least 1".into()));
    }
    let mut l1 = f64::INFINITY;
    let mut l2 = 0.0_f64;
    let mut c2 = 0.0_f64;
    let mut c3 = 0.0_f64;
    for _ in 0..num_samples {
        let x = sampler.point();
        check_on_manifold(manifold, &x)?;
        let frame = NormalFrame::at(manifold, &x)?;
        for col in frame.jacobian().column_iter() {
            l1 = l1.min(col.norm());
        }

        let u = sampler.tangent(&x);
        let v = sampler.tangent(&x);
        let (nu, nv) = (u.norm(), v.norm());
        if nu == 0.0 || nv == 0.0 {
            continue;
        }

        // ambient pair built from the tangent draws and the first normal
        let a = &u + frame.jacobian().column(0) / frame.jacobian().column(0).norm() * nu;
        let b = &v - frame.jacobian().column(0) / frame.jacobian().column(0).norm() * nv;
        for (p, q) in [(&u, &v), (&u, &u), (&v, &v), (&a, &b), (&a, &a)] {
            let q_vals = manifold.constraint_hessian_quad(&x, p, q);
            l2 = l2.max(inf_norm(&q_vals) / (p.norm() * q.norm()));
        }

        for (p, q, np, nq) in [(&u, &v, nu, nv), (&u, &u, nu, nu)] {
            let pi = second_fundamental_form(manifold, &x, p, q)?;
            c2 = c2.max(pi.norm() / (np * nq));
        }

        let dir = &u / nu;
        let ratio = verify_expansion(manifold, &x, &dir, &[EXP_PROBE_SCALE])?[0].1;
        c3 = c3.max(ratio);
    }
    Ok(CurvatureBoundEstimates {
        l1_min_grad: l1,
        l2_proxy: l2,
        l3_bound: manifold.third_order_bound(),
        c2_ratio_max: c2,
        exp_residual_ratio_max: c3,
        samples: num_samples,
        codim: manifold.codim(),
    })
}

/// Central finite-difference approximation of `∇²h^l(x)(u, v)`, used only to
/// cross-check analytic Hessian forms. Step `ε = ε_mach^{1/3} (1 + ‖x‖)`.
pub fn hessian_quad_fd<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector, u: &Vector, v: &Vector) -> Vector {
    let eps = f64::EPSILON.cbrt() * (1.0 + x.norm());
    let plus = manifold.constraint_jacobian(&(x + v * eps));
    let minus = manifold.constraint_jacobian(&(x - v * eps));
    (plus - minus).tr_mul(u) / (2.0 * eps)
}

/// Central finite-difference Jacobian, columns `∇h^l`.
pub fn jacobian_fd<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector) -> DMatrix<f64> {
    let n = manifold.ambient_dim();
    let m = manifold.codim();
    let mut out = DMatrix::zeros(n, m);
    for i in 0..n {
        let eps = f64::EPSILON.cbrt() * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += eps;
        xm[i] -= eps;
        let d = (manifold.constraint(&xp) - manifold.constraint(&xm)) / (2.0 * eps);
        for l in 0..m {
            out[(i, l)] = d[l];
        }
    }
    out
}
