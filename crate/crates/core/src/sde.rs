//! SDE problems on embedded manifolds.
//!
//! A problem is given in Stratonovich form `dx = α_s dt + Σ_j α_j ∘ dW_j`
//! with tangent fields. The schemes consume the Itô form, which adds the
//! correction drift `α_d = ½ Σ_j ∇_{α_j} α_j` (ambient directional
//! derivative). Its normal part `½ Σ_j Π(α_j, α_j)` is what pushes naive
//! Euclidean integrators off the manifold.
//!
//! Coefficient fields must be defined on an ambient neighbourhood of the
//! manifold: the finite-difference Itô correction evaluates them at
//! `x ± ε α_j`, and the baseline schemes evaluate them at off-manifold
//! iterates.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{check_on_manifold, exp_map, EmbeddedManifold, NormalFrame, PointSampler, Vector};

/// Coefficients of a Stratonovich SDE on a manifold.
pub trait SdeCoefficients: Send + Sync {
    fn name(&self) -> String;

    fn ambient_dim(&self) -> usize;

    /// Number of driving Brownian motions `d`.
    fn diffusion_count(&self) -> usize;

    /// Stratonovich drift `α_s(x)`.
    fn drift_strat(&self, x: &Vector) -> Vector;

    /// Diffusion field `α_j(x)`, `0 ≤ j < d`.
    fn diffusion_field(&self, x: &Vector, j: usize) -> Vector;

    /// `Σ_j α_j(x) z_j`. Override when a matrix-free form is cheaper.
    fn diffusion_apply(&self, x: &Vector, z: &[f64]) -> Vector {
        let mut out = Vector::zeros(self.ambient_dim());
        for (j, zj) in z.iter().enumerate() {
            if *zj != 0.0 {
                out.axpy(*zj, &self.diffusion_field(x, j), 1.0);
            }
        }
        out
    }

    /// Closed-form Itô correction `α_d(x)`, when known.
    fn ito_correction_analytic(&self, _x: &Vector) -> Option<Vector> {
        None
    }
}

/// `½ Σ_j [α_j(x + εα_j) - α_j(x - εα_j)] / (2ε)` with `ε = √ε_mach (1 + ‖x‖)`.
pub fn ito_correction_numeric<S: SdeCoefficients + ?Sized>(sde: &S, x: &Vector) -> Vector {
    let eps = f64::EPSILON.sqrt() * (1.0 + x.norm());
    let mut out = Vector::zeros(sde.ambient_dim());
    for j in 0..sde.diffusion_count() {
        let a = sde.diffusion_field(x, j);
        let plus = sde.diffusion_field(&(x + &a * eps), j);
        let minus = sde.diffusion_field(&(x - &a * eps), j);
        out += (plus - minus) / (2.0 * eps);
    }
    out * 0.5
}

/// `α_d(x)` without the on-manifold check. Analytic when available.
pub(crate) fn ito_correction_at<S: SdeCoefficients + ?Sized>(sde: &S, x: &Vector) -> Vector {
    sde.ito_correction_analytic(x)
        .unwrap_or_else(|| ito_correction_numeric(sde, x))
}

/// Itô correction drift `α_d(x)` at an on-manifold point.
pub fn ito_correction<S, M>(sde: &S, manifold: &M, x: &Vector) -> Result<Vector>
where
    S: SdeCoefficients + ?Sized,
    M: EmbeddedManifold + ?Sized,
{
    check_compatible(sde, manifold)?;
    check_on_manifold(manifold, x)?;
    Ok(ito_correction_at(sde, x))
}

/// `(tangential, normal)` parts of `α_d(x)`.
pub fn ito_correction_split<S, M>(sde: &S, manifold: &M, x: &Vector) -> Result<(Vector, Vector)>
where
    S: SdeCoefficients + ?Sized,
    M: EmbeddedManifold + ?Sized,
{
    let alpha_d = ito_correction(sde, manifold, x)?;
    let frame = NormalFrame::at(manifold, x)?;
    let normal = frame.normal_component(&alpha_d);
    let tangential = &alpha_d - &normal;
    Ok((tangential, normal))
}

pub(crate) fn check_compatible<S, M>(sde: &S, manifold: &M) -> Result<()>
where
    S: SdeCoefficients + ?Sized,
    M: EmbeddedManifold + ?Sized,
{
    if sde.ambient_dim() != manifold.ambient_dim() {
        return Err(Error::Argument(format!(
            "SDE {} lives in R^{} but manifold {} lives in R^{}",
            sde.name(),
            sde.ambient_dim(),
            manifold.name(),
            manifold.ambient_dim()
        )));
    }
    Ok(())
}

/// Brownian motion on `S^n`: `dx = Σ_j P(x) e_j ∘ dW_j`, `P(x) = I - xxᵀ`,
/// with Itô form `dx = -(n/2) x dt + Σ_j P(x) e_j dW_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SphereBrownianMotion {
    n: usize,
}

impl SphereBrownianMotion {
    pub fn new(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::Argument(format!("sphere dimension must be at least 1, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

impl SdeCoefficients for SphereBrownianMotion {
    fn name(&self) -> String {
        format!("sphere_bm({})", self.n)
    }

    fn ambient_dim(&self) -> usize {
        self.n + 1
    }

    fn diffusion_count(&self) -> usize {
        self.n + 1
    }

    fn drift_strat(&self, x: &Vector) -> Vector {
        Vector::zeros(x.len())
    }

    fn diffusion_field(&self, x: &Vector, j: usize) -> Vector {
        let mut out = x * -x[j];
        out[j] += 1.0;
        out
    }

    fn diffusion_apply(&self, x: &Vector, z: &[f64]) -> Vector {
        let z = Vector::from_column_slice(z);
        let xz = x.dot(&z);
        let mut out = z;
        out.axpy(-xz, x, 1.0);
        out
    }

    fn ito_correction_analytic(&self, x: &Vector) -> Option<Vector> {
        Some(x * (-0.5 * self.n as f64))
    }
}

/// Constant ambient noise columns `b_j` projected onto the tangent space of a
/// manifold: `α_j(x) = P_M(x) b_j`, zero Stratonovich drift. With the
/// identity as columns this is Brownian motion on the manifold.
///
/// Off the manifold the projection uses the constraint Jacobian at the
/// evaluation point; where that Jacobian loses rank the fields are NaN.
#[derive(Debug, Clone)]
pub struct ProjectedDiffusion<M> {
    manifold: M,
    columns: DMatrix<f64>,
}

impl<M: EmbeddedManifold> ProjectedDiffusion<M> {
    pub fn new(manifold: M, columns: DMatrix<f64>) -> Result<Self> {
        if columns.nrows() != manifold.ambient_dim() {
            return Err(Error::Argument(format!(
                "noise columns have {} rows, ambient dimension is {}",
                columns.nrows(),
                manifold.ambient_dim()
            )));
        }
        Ok(Self { manifold, columns })
    }

    pub fn brownian(manifold: M) -> Self {
        let dim = manifold.ambient_dim();
        Self {
            manifold,
            columns: DMatrix::identity(dim, dim),
        }
    }

    fn project(&self, x: &Vector, w: &Vector) -> Vector {
        match NormalFrame::at(&self.manifold, x) {
            Ok(frame) => frame.tangent_component(w),
            Err(_) => Vector::from_element(w.len(), f64::NAN),
        }
    }
}

impl<M: EmbeddedManifold> SdeCoefficients for ProjectedDiffusion<M> {
    fn name(&self) -> String {
        format!("projected_diffusion({})", self.manifold.name())
    }

    fn ambient_dim(&self) -> usize {
        self.manifold.ambient_dim()
    }

    fn diffusion_count(&self) -> usize {
        self.columns.ncols()
    }

    fn drift_strat(&self, x: &Vector) -> Vector {
        Vector::zeros(x.len())
    }

    fn diffusion_field(&self, x: &Vector, j: usize) -> Vector {
        self.project(x, &self.columns.column(j).into_owned())
    }

    fn diffusion_apply(&self, x: &Vector, z: &[f64]) -> Vector {
        let w = &self.columns * Vector::from_column_slice(z);
        self.project(x, &w)
    }
}

/// Smooth test function `f` for the Itô-formula functional
/// `S_t = f(x_0) + ∫⟨∇f, P dW⟩ + ∫[-(n/2)⟨∇f, x⟩ + ½ tr(∇²f P)] ds` on `S^n`.
pub trait ItoFunctionalSpec: Send + Sync {
    fn name(&self) -> &str;

    fn value(&self, x: &Vector) -> f64;

    fn gradient(&self, x: &Vector) -> Vector;

    /// `∇²f(x) · w`.
    fn hessian_apply(&self, x: &Vector, w: &Vector) -> Vector;

    /// `tr ∇²f(x)`, by default from `hessian_apply` on the standard basis.
    fn hessian_trace(&self, x: &Vector) -> f64 {
        let mut e = Vector::zeros(x.len());
        let mut trace = 0.0;
        for i in 0..x.len() {
            e[i] = 1.0;
            trace += self.hessian_apply(x, &e)[i];
            e[i] = 0.0;
        }
        trace
    }
}

/// `f(x) = ½ x_last²`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HalfLastCoordSquared;

impl ItoFunctionalSpec for HalfLastCoordSquared {
    fn name(&self) -> &str {
        "half-last-coord-squared"
    }

    fn value(&self, x: &Vector) -> f64 {
        let last = x[x.len() - 1];
        0.5 * last * last
    }

    fn gradient(&self, x: &Vector) -> Vector {
        let mut g = Vector::zeros(x.len());
        g[x.len() - 1] = x[x.len() - 1];
        g
    }

    fn hessian_apply(&self, x: &Vector, w: &Vector) -> Vector {
        let mut out = Vector::zeros(x.len());
        out[x.len() - 1] = w[x.len() - 1];
        out
    }

    fn hessian_trace(&self, _x: &Vector) -> f64 {
        1.0
    }
}

/// `f(x) = c`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConstantFunctional(pub f64);

impl ItoFunctionalSpec for ConstantFunctional {
    fn name(&self) -> &str {
        "constant"
    }

    fn value(&self, _x: &Vector) -> f64 {
        self.0
    }

    fn gradient(&self, x: &Vector) -> Vector {
        Vector::zeros(x.len())
    }

    fn hessian_apply(&self, x: &Vector, _w: &Vector) -> Vector {
        Vector::zeros(x.len())
    }
}

/// One step of the discretised functional:
/// `[-(n/2)⟨∇f, x⟩ + ½ tr(∇²f P(x))] δ + ⟨∇f, P(x) z⟩`.
///
/// `tr(∇²f P(x)) = tr ∇²f - xᵀ∇²f x`. The formula is evaluated as written at
/// whatever point it is given, so baseline iterates that have left the
/// sphere are accepted.
pub fn ito_functional_increment<F, M>(functional: &F, manifold: &M, x: &Vector, z: &[f64], delta: f64) -> Result<f64>
where
    F: ItoFunctionalSpec + ?Sized,
    M: EmbeddedManifold + ?Sized,
{
    let n = manifold.unit_sphere_dim().ok_or_else(|| {
        Error::Unsupported(format!(
            "the Itô functional is only defined on the unit sphere, not on {}",
            manifold.name()
        ))
    })?;
    if x.len() != n + 1 || z.len() != n + 1 {
        return Err(Error::Argument(format!(
            "point and increment must have length {}, got {} and {}",
            n + 1,
            x.len(),
            z.len()
        )));
    }
    Ok(sphere_functional_increment(functional, n, x, z, delta))
}

pub(crate) fn sphere_functional_increment<F: ItoFunctionalSpec + ?Sized>(
    functional: &F,
    n: usize,
    x: &Vector,
    z: &[f64],
    delta: f64,
) -> f64 {
    let grad = functional.gradient(x);
    let hx = functional.hessian_apply(x, x);
    let trace_p = functional.hessian_trace(x) - x.dot(&hx);
    let drift = -0.5 * n as f64 * grad.dot(x) + 0.5 * trace_p;
    let gz: f64 = grad.iter().zip(z).map(|(g, zi)| g * zi).sum();
    let noise = gz - grad.dot(x) * x.iter().zip(z).map(|(xi, zi)| xi * zi).sum::<f64>();
    drift * delta + noise
}

/// Sampled stand-ins for the Lipschitz constant and uniform bound of the
/// coefficient fields `α_s`, `α_d`, `α_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientProxies {
    pub lipschitz: f64,
    pub bound: f64,
    pub samples: usize,
}

/// At most this many diffusion fields are probed per sample.
const MAX_PROBED_FIELDS: usize = 32;

/// Probes coefficient pairs `(x, x')` with `x' = exp_x(0.05 t)` for a unit
/// tangent `t`. Large `d` is subsampled with a fixed stride.
pub fn coefficient_proxies<S, M>(
    sde: &S,
    manifold: &M,
    sampler: &mut dyn PointSampler,
    num_samples: usize,
) -> Result<CoefficientProxies>
where
    S: SdeCoefficients + ?Sized,
    M: EmbeddedManifold + ?Sized,
{
    check_compatible(sde, manifold)?;
    if num_samples == 0 {
        return Err(Error::Argument("num_samples must be at least 1".into()));
    }
    let d = sde.diffusion_count();
    let stride = d.div_ceil(MAX_PROBED_FIELDS).max(1);
    let mut lipschitz = 0.0_f64;
    let mut bound = 0.0_f64;
    for _ in 0..num_samples {
        let x = sampler.point();
        check_on_manifold(manifold, &x)?;
        let t = sampler.tangent(&x);
        let y = exp_map(manifold, &x, &(t * 0.05))?;
        let dist = (&y - &x).norm();

        let mut pairs = vec![
            (sde.drift_strat(&x), sde.drift_strat(&y)),
            (ito_correction_at(sde, &x), ito_correction_at(sde, &y)),
        ];
        pairs.extend((0..d).step_by(stride).map(|j| (sde.diffusion_field(&x, j), sde.diffusion_field(&y, j))));
        for (a, b) in pairs {
            bound = bound.max(a.norm()).max(b.norm());
            if dist > 0.0 {
                lipschitz = lipschitz.max((a - b).norm() / dist);
            }
        }
    }
    Ok(CoefficientProxies {
        lipschitz,
        bound,
        samples: num_samples,
    })
}
