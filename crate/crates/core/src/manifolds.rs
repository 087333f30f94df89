//! Concrete constraint manifolds: the unit sphere and axis-aligned ellipsoids.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{EmbeddedManifold, NormalFrame, PointSampler, Vector};

/// Below this argument the trigonometric quotients switch to their series.
pub const SERIES_SWITCH: f64 = 1e-4;

/// `sin(s) / s`.
pub fn sinc(s: f64) -> f64 {
    if s.abs() < SERIES_SWITCH {
        let s2 = s * s;
        1.0 - s2 / 6.0 + s2 * s2 / 120.0
    } else {
        s.sin() / s
    }
}

/// `(1 - cos(s)) / s²`.
pub fn versinc(s: f64) -> f64 {
    if s.abs() < SERIES_SWITCH {
        let s2 = s * s;
        0.5 - s2 / 24.0 + s2 * s2 / 720.0
    } else {
        let half = 0.5 * s;
        // 1 - cos s = 2 sin²(s/2), no cancellation
        2.0 * (half.sin() / s).powi(2)
    }
}

/// Unit sphere `S^n = {x ∈ R^(n+1) : xᵀx = 1}`, with `h(x) = xᵀx - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sphere {
    n: usize,
}

impl Sphere {
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

impl EmbeddedManifold for Sphere {
    fn name(&self) -> String {
        format!("sphere({})", self.n)
    }

    fn ambient_dim(&self) -> usize {
        self.n + 1
    }

    fn codim(&self) -> usize {
        1
    }

    fn constraint(&self, x: &Vector) -> Vector {
        Vector::from_element(1, x.norm_squared() - 1.0)
    }

    fn constraint_jacobian(&self, x: &Vector) -> DMatrix<f64> {
        DMatrix::from_column_slice(x.len(), 1, (x * 2.0).as_slice())
    }

    fn constraint_hessian_quad(&self, _x: &Vector, u: &Vector, v: &Vector) -> Vector {
        Vector::from_element(1, 2.0 * u.dot(v))
    }

    /// `cos(‖v‖) x + sin(‖v‖) v / ‖v‖`.
    fn closed_form_exp(&self, x: &Vector, v: &Vector) -> Option<Vector> {
        let t = v.norm();
        Some(x * t.cos() + v * sinc(t))
    }

    /// `-(uᵀv) x`.
    fn closed_form_sff(&self, x: &Vector, u: &Vector, v: &Vector) -> Option<Vector> {
        Some(x * -u.dot(v))
    }

    fn sample_point(&self, rng: &mut dyn RngCore) -> Vector {
        loop {
            let g = gaussian_vector(self.n + 1, rng);
            let r = g.norm();
            if r > 0.0 {
                return g / r;
            }
        }
    }

    fn base_point(&self) -> Vector {
        let mut x = Vector::zeros(self.n + 1);
        x[0] = 1.0;
        x
    }

    fn unit_sphere_dim(&self) -> Option<usize> {
        Some(self.n)
    }

    fn third_order_bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Axis-aligned ellipsoid `Σ aᵢ xᵢ² = 1`. No closed-form exponential map, so
/// it runs through the numeric geodesic path.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    coeffs: Vec<f64>,
}

impl Ellipsoid {
    pub fn new(diag_coeffs: Vec<f64>) -> Result<Self> {
        if diag_coeffs.len() < 2 {
            return Err(Error::Argument(
                "ellipsoid needs at least two coefficients".into(),
            ));
        }
        if let Some((i, a)) = diag_coeffs
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0) || !a.is_finite())
        {
            return Err(Error::Argument(format!(
                "ellipsoid coefficient {i} must be positive and finite, got {a}"
            )));
        }
        Ok(Self { coeffs: diag_coeffs })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
}

impl EmbeddedManifold for Ellipsoid {
    fn name(&self) -> String {
        format!("ellipsoid({:?})", self.coeffs)
    }

    fn ambient_dim(&self) -> usize {
        self.coeffs.len()
    }

    fn codim(&self) -> usize {
        1
    }

    fn constraint(&self, x: &Vector) -> Vector {
        let s: f64 = self.coeffs.iter().zip(x.iter()).map(|(a, xi)| a * xi * xi).sum();
        Vector::from_element(1, s - 1.0)
    }

    fn constraint_jacobian(&self, x: &Vector) -> DMatrix<f64> {
        DMatrix::from_iterator(
            x.len(),
            1,
            self.coeffs.iter().zip(x.iter()).map(|(a, xi)| 2.0 * a * xi),
        )
    }

    fn constraint_hessian_quad(&self, _x: &Vector, u: &Vector, v: &Vector) -> Vector {
        let s: f64 = self
            .coeffs
            .iter()
            .zip(u.iter().zip(v.iter()))
            .map(|(a, (ui, vi))| a * ui * vi)
            .sum();
        Vector::from_element(1, 2.0 * s)
    }

    fn sample_point(&self, rng: &mut dyn RngCore) -> Vector {
        loop {
            let g = gaussian_vector(self.coeffs.len(), rng);
            let q: f64 = self.coeffs.iter().zip(g.iter()).map(|(a, gi)| a * gi * gi).sum();
            if q > 0.0 {
                return g / q.sqrt();
            }
        }
    }

    fn base_point(&self) -> Vector {
        let mut x = Vector::zeros(self.coeffs.len());
        x[0] = 1.0 / self.coeffs[0].sqrt();
        x
    }

    fn unit_sphere_dim(&self) -> Option<usize> {
        self.coeffs
            .iter()
            .all(|a| *a == 1.0)
            .then(|| self.coeffs.len() - 1)
    }

    fn third_order_bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

pub(crate) fn gaussian_vector(len: usize, rng: &mut dyn RngCore) -> Vector {
    Vector::from_iterator(len, (0..len).map(|_| StandardNormal.sample(&mut *rng)))
}

/// A point on `manifold` drawn deterministically from `seed`.
pub fn random_point<M: EmbeddedManifold + ?Sized>(manifold: &M, seed: u64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    manifold.sample_point(&mut rng)
}

/// A unit tangent vector at `x`: a projected standard normal, normalised.
pub fn random_tangent<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector, seed: u64) -> Result<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unit_tangent(manifold, x, &mut rng)
}

fn unit_tangent<M: EmbeddedManifold + ?Sized>(manifold: &M, x: &Vector, rng: &mut dyn RngCore) -> Result<Vector> {
    let frame = NormalFrame::at(manifold, x)?;
    loop {
        let t = frame.tangent_component(&gaussian_vector(manifold.ambient_dim(), rng));
        let r = t.norm();
        if r > 0.0 {
            return Ok(t / r);
        }
    }
}

/// Seeded [`PointSampler`] drawing uniform-direction points and unit tangents.
pub struct ManifoldSampler<'a, M: EmbeddedManifold + ?Sized> {
    manifold: &'a M,
    rng: ChaCha8Rng,
}

impl<'a, M: EmbeddedManifold + ?Sized> ManifoldSampler<'a, M> {
    pub fn new(manifold: &'a M, seed: u64) -> Self {
        Self {
            manifold,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<M: EmbeddedManifold + ?Sized> PointSampler for ManifoldSampler<'_, M> {
    fn point(&mut self) -> Vector {
        self.manifold.sample_point(&mut self.rng)
    }

    fn tangent(&mut self, x: &Vector) -> Vector {
        unit_tangent(self.manifold, x, &mut self.rng)
            .expect("sampled point has a full-rank constraint Jacobian")
    }
}
