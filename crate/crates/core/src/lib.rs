//! Geometry-preserving simulation of SDEs on manifolds embedded in
//! Euclidean space as constraint zero sets.
//!
//! The Exponential Euler–Maruyama scheme takes an Euler step in the ambient
//! space, projects it onto the tangent space, and moves along the geodesic
//! with the exponential map, so every iterate stays on the manifold. The
//! crate also provides the Euclidean Euler–Maruyama and geometric
//! Castell–Gaines baselines, coupled Brownian grids for strong-error
//! estimation, and the experiment harness behind the `geosde` binary.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod manifolds;
pub mod noise;
pub mod parallel;
pub mod schemes;
pub mod sde;

pub use error::{Error, Result};
pub use geometry::{EmbeddedManifold, Vector};
pub use manifolds::{Ellipsoid, Sphere};
pub use parallel::Execution;
pub use schemes::{PathRecord, SchemeId};
pub use sde::{SdeCoefficients, SphereBrownianMotion};
