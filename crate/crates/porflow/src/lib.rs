//! Two-phase porous-media flow in the chemical-potential/pressure formulation.
//!
//! The wetting-phase saturation is driven by a logarithmic free energy; the
//! chemical potential `mu_w = F'(S_w)` is strictly increasing, so saturation
//! is recovered by inverting it. Each time step solves the fully implicit
//! coupled Galerkin system for `(mu_w, p)` with Newton's method, and the
//! per-step diagnostics certify the discrete energy-stability inequality,
//! saturation bounds, and mass conservation at runtime.

pub mod assembly;
pub mod config;
pub mod constitutive;
pub mod diagnostics;
pub mod mesh;
pub mod mms;
pub mod output;
pub mod simulation;
pub mod solver;
pub mod sparse;

pub use constitutive::{ConstitutiveModel, MaterialParams, Phase, RelPermKind};
pub use mesh::{BoundaryTag, FieldCoefficients, Mesh, MeshSpec};
pub use simulation::{State, Trajectory};
