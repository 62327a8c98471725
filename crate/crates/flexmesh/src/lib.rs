//! flexmesh: 2D triangle-mesh deformation animation.
//!
//! The crate animates a static piece of clipart by deforming a triangle
//! mesh over it. Per-face target Jacobians plus a handful of keypoint
//! targets drive a gradient-domain Poisson solve for vertex positions;
//! keypoints travel along cubic Bezier trajectories; a small ODE-integrated
//! network adds temporal Jacobian corrections; and everything trains against
//! a pluggable score oracle with score-distillation and flow-matching
//! objectives. Rendering, probability-flow integration utilities, and
//! smoothness metrics round out the pipeline.
//!
//! All numerics are generic over the scalar type through [`scalar::Real`]
//! (`f32` or `f64`); the `*F64`/`*F32` aliases below pick a concrete one.

pub mod error;
pub mod guidance;
pub mod linalg;
pub mod mesh;
pub mod metrics;
pub mod nnkit;
pub mod pipeline;
pub mod render;
pub mod scalar;
pub mod solver;
pub mod synthetic;
pub mod temporal;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Real;

/// Concrete double-precision aliases; the default throughout the CLI.
pub type TriMeshF64 = mesh::TriMesh<f64>;
pub type JacobianFieldF64 = mesh::JacobianField<f64>;
pub type DifferentialOperatorsF64 = mesh::DifferentialOperators<f64>;
pub type FactorizedSystemF64 = solver::FactorizedSystem<f64>;

/// Single-precision variants.
pub type TriMeshF32 = mesh::TriMesh<f32>;
pub type JacobianFieldF32 = mesh::JacobianField<f32>;
pub type DifferentialOperatorsF32 = mesh::DifferentialOperators<f32>;
pub type FactorizedSystemF32 = solver::FactorizedSystem<f32>;
