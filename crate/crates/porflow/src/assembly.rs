//! Assembly of the fully implicit coupled residual and its analytic Jacobian
//! for one backward-Euler step of the chemical-potential/pressure system.
//!
//! All saturation-dependent coefficients (mobilities, sources, boundary
//! fluxes) are evaluated at the new time level through `S = S(mu_new)` at
//! quadrature points; the previous level enters only through the storage term
//! and is reconstructed the same way from `mu_old`, so the mass and energy
//! ledgers telescope exactly across steps.

use std::sync::Arc;

use thiserror::Error;

use crate::constitutive::{ConstitutiveError, ConstitutiveModel, Phase};
use crate::mesh::{BoundaryTag, FieldCoefficients, Mesh, MeshError};
use crate::sparse::{Csr, Triplets};

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error(transparent)]
    Constitutive(#[from] ConstitutiveError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("invalid problem data: {0}")]
    InvalidData(String),
}

/// Saturation-dependent data function `f(x, t, S)`. The saturation argument
/// is clamped to `[s_eps, 1-s_eps]` before the call, so implementations never
/// see out-of-range values; `d_ds` is the partial derivative in `S` used by
/// the analytic Jacobian.
pub trait SatFunction: Send + Sync {
    fn eval(&self, x: &[f64; 2], t: f64, s: f64) -> f64;
    fn d_ds(&self, _x: &[f64; 2], _t: f64, _s: f64) -> f64 {
        0.0
    }
    /// True only for the identically-zero function (closed-system detection).
    fn is_zero(&self) -> bool {
        false
    }
}

/// The zero source/flux.
pub struct ZeroFn;

impl SatFunction for ZeroFn {
    fn eval(&self, _x: &[f64; 2], _t: f64, _s: f64) -> f64 {
        0.0
    }
    fn is_zero(&self) -> bool {
        true
    }
}

/// Constant in space, time, and saturation.
pub struct ConstantFn(pub f64);

impl SatFunction for ConstantFn {
    fn eval(&self, _x: &[f64; 2], _t: f64, _s: f64) -> f64 {
        self.0
    }
}

/// Affine in saturation: `a + b*S`.
pub struct SaturationAffineFn {
    pub a: f64,
    pub b: f64,
}

impl SatFunction for SaturationAffineFn {
    fn eval(&self, _x: &[f64; 2], _t: f64, s: f64) -> f64 {
        self.a + self.b * s
    }
    fn d_ds(&self, _x: &[f64; 2], _t: f64, _s: f64) -> f64 {
        self.b
    }
}

/// Space-time function with no saturation dependence (manufactured sources).
pub struct SpaceTimeFn<F: Fn(&[f64; 2], f64) -> f64 + Send + Sync>(pub F);

impl<F: Fn(&[f64; 2], f64) -> f64 + Send + Sync> SatFunction for SpaceTimeFn<F> {
    fn eval(&self, x: &[f64; 2], t: f64, _s: f64) -> f64 {
        (self.0)(x, t)
    }
}

/// Dirichlet boundary value `phi(x, t)`.
pub type BoundaryValue = Arc<dyn Fn(&[f64; 2], f64) -> f64 + Send + Sync>;

/// Symmetric positive definite permeability tensor (per cell).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermTensor {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl PermTensor {
    pub fn isotropic(k: f64) -> Self {
        Self {
            xx: k,
            xy: 0.0,
            yy: k,
        }
    }

    pub fn apply(&self, g: [f64; 2]) -> [f64; 2] {
        [
            self.xx * g[0] + self.xy * g[1],
            self.xy * g[0] + self.yy * g[1],
        ]
    }

    pub fn is_spd(&self, dim: usize) -> bool {
        if dim == 1 {
            self.xx > 0.0
        } else {
            self.xx > 0.0 && self.xx * self.yy - self.xy * self.xy > 0.0
        }
    }
}

/// Everything that defines one initial-boundary-value problem: constitutive
/// model, per-cell porosity and permeability, sources, and boundary data.
pub struct ProblemData {
    pub model: ConstitutiveModel,
    /// Piecewise-constant porosity per cell, bounded below by `phi_m`.
    pub porosity: Vec<f64>,
    /// Piecewise-constant permeability per cell.
    pub permeability: Vec<PermTensor>,
    pub q_w: Arc<dyn SatFunction>,
    pub q_n: Arc<dyn SatFunction>,
    /// Non-wetting flux on the flux boundary.
    pub phi2: Arc<dyn SatFunction>,
    /// Wetting flux on the flux boundary.
    pub phi4: Arc<dyn SatFunction>,
    /// Dirichlet potential on the inlet boundary.
    pub phi1: BoundaryValue,
    /// Dirichlet pressure on the inlet boundary.
    pub phi3: BoundaryValue,
    pub initial_mu: Arc<dyn Fn(&[f64; 2]) -> f64 + Send + Sync>,
}

impl ProblemData {
    pub fn validate(&self, mesh: &Mesh) -> Result<(), AssemblyError> {
        if self.porosity.len() != mesh.n_cells() {
            return Err(AssemblyError::InvalidData(format!(
                "porosity has {} cells, mesh has {}",
                self.porosity.len(),
                mesh.n_cells()
            )));
        }
        if self.permeability.len() != mesh.n_cells() {
            return Err(AssemblyError::InvalidData(format!(
                "permeability has {} cells, mesh has {}",
                self.permeability.len(),
                mesh.n_cells()
            )));
        }
        let phi_m = self.model.params().phi_m;
        for (c, &phi) in self.porosity.iter().enumerate() {
            if !(phi.is_finite() && phi >= phi_m - 1e-14) {
                return Err(AssemblyError::InvalidData(format!(
                    "porosity {phi} in cell {c} is below the bound {phi_m}"
                )));
            }
        }
        for (c, k) in self.permeability.iter().enumerate() {
            if !k.is_spd(mesh.dim()) {
                return Err(AssemblyError::InvalidData(format!(
                    "permeability in cell {c} is not symmetric positive definite"
                )));
            }
        }
        Ok(())
    }

    /// A run is closed when there is no Dirichlet boundary and all sources
    /// and boundary fluxes are identically zero.
    pub fn is_closed(&self, mesh: &Mesh) -> bool {
        !mesh.has_dirichlet()
            && self.q_w.is_zero()
            && self.q_n.is_zero()
            && self.phi2.is_zero()
            && self.phi4.is_zero()
    }
}

/// Map from mesh nodes to free unknown indices. The potential and pressure
/// share the free-node set (both are prescribed on the Dirichlet boundary);
/// with no Dirichlet boundary a zero-mean constraint on the pressure is
/// appended as one extra unknown. Unknowns interleave per node
/// (`mu_0, p_0, mu_1, p_1, ...`) to keep the coupled system banded.
#[derive(Debug, Clone)]
pub struct DofMap {
    free_nodes: Vec<usize>,
    node_to_free: Vec<Option<usize>>,
    pub constrained: bool,
}

impl DofMap {
    pub fn new(mesh: &Mesh) -> Self {
        let mut free_nodes = Vec::new();
        let mut node_to_free = vec![None; mesh.n_nodes()];
        for node in 0..mesh.n_nodes() {
            if !mesh.is_gamma1_node(node) {
                node_to_free[node] = Some(free_nodes.len());
                free_nodes.push(node);
            }
        }
        Self {
            free_nodes,
            node_to_free,
            constrained: !mesh.has_dirichlet(),
        }
    }

    pub fn n_free(&self) -> usize {
        self.free_nodes.len()
    }

    /// Total unknowns: potential + pressure free nodes, plus the multiplier.
    pub fn system_size(&self) -> usize {
        2 * self.n_free() + usize::from(self.constrained)
    }

    pub fn free_index(&self, node: usize) -> Option<usize> {
        self.node_to_free[node]
    }

    /// Unknown index of the potential at a free node.
    pub fn mu_index(&self, node: usize) -> Option<usize> {
        self.node_to_free[node].map(|i| 2 * i)
    }

    /// Unknown index of the pressure at a free node.
    pub fn p_index(&self, node: usize) -> Option<usize> {
        self.node_to_free[node].map(|i| 2 * i + 1)
    }

    pub fn multiplier_index(&self) -> Option<usize> {
        self.constrained.then(|| 2 * self.n_free())
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free_nodes
    }
}

/// Raw Galerkin residual of one implicit step, restricted to free nodes.
/// `mean_p` is the zero-mean constraint residual when active.
#[derive(Debug, Clone)]
pub struct StepResidual {
    pub r_mu: Vec<f64>,
    pub r_p: Vec<f64>,
    pub mean_p: Option<f64>,
}

impl StepResidual {
    pub fn norm2(&self) -> f64 {
        let mut acc: f64 = self.r_mu.iter().map(|v| v * v).sum();
        acc += self.r_p.iter().map(|v| v * v).sum::<f64>();
        if let Some(m) = self.mean_p {
            acc += m * m;
        }
        acc.sqrt()
    }
}

/// Overwrites Dirichlet nodes of `(mu, p)` with the boundary data evaluated
/// at the step midpoint `t_new - tau/2` (midpoint rule for the interval
/// average of the data).
pub fn apply_dirichlet(
    mesh: &Mesh,
    data: &ProblemData,
    t_new: f64,
    tau: f64,
    mu: &mut FieldCoefficients,
    p: &mut FieldCoefficients,
) {
    if !mesh.has_dirichlet() {
        return;
    }
    let t_mid = t_new - 0.5 * tau;
    for node in 0..mesh.n_nodes() {
        if mesh.is_gamma1_node(node) {
            let x = mesh.node_coord(node);
            mu[node] = (data.phi1)(&x, t_mid);
            p[node] = (data.phi3)(&x, t_mid);
        }
    }
}

/// Derivative of the saturation clamp: 1 inside `[s_eps, 1-s_eps]`, else 0.
fn clamp_deriv(model: &ConstitutiveModel, s: f64) -> f64 {
    let se = model.params().s_eps;
    if s >= se && s <= 1.0 - se {
        1.0
    } else {
        0.0
    }
}

/// Assembles the residual of the fully implicit step at the candidate state
/// `(mu_new, p_new)`, with the previous level given by `mu_old`. Dirichlet
/// nodes of `mu_new`/`p_new` must already hold the lifted boundary values.
pub fn assemble_residual(
    mesh: &Mesh,
    dofs: &DofMap,
    data: &ProblemData,
    mu_new: &FieldCoefficients,
    p_new: &FieldCoefficients,
    mu_old: &FieldCoefficients,
    tau: f64,
    t_new: f64,
) -> Result<StepResidual, AssemblyError> {
    mesh.check_len(mu_new)?;
    mesh.check_len(p_new)?;
    mesh.check_len(mu_old)?;
    let model = &data.model;
    let nl = mesh.nodes_per_cell();
    let mut r_mu = vec![0.0; dofs.n_free()];
    let mut r_p = vec![0.0; dofs.n_free()];

    for cell in 0..mesh.n_cells() {
        let nodes = mesh.cell_nodes(cell);
        let phi = data.porosity[cell];
        let k = data.permeability[cell];
        for q in mesh.cell_quads(cell) {
            let mu_q = mu_new.eval(&q, &nodes, nl);
            let s = model.invert_mu(mu_q)?;
            let s_old = model.invert_mu(mu_old.eval(&q, &nodes, nl))?;
            let s_cl = model.clamp_s(s);
            let lam_w = model.mobility(s, Phase::Wetting);
            let lam_t = lam_w + model.mobility(s, Phase::NonWetting);
            let qw = data.q_w.eval(&q.x, t_new, s_cl);
            let qt = qw + data.q_n.eval(&q.x, t_new, s_cl);
            let kg_mu = k.apply(mu_new.grad(&q, &nodes, nl));
            let kg_p = k.apply(p_new.grad(&q, &nodes, nl));
            let storage = phi * (s - s_old) / tau;
            for i in 0..nl {
                let Some(fi) = dofs.free_index(nodes[i]) else {
                    continue;
                };
                let gi = q.grad[i];
                let flux_mu = kg_mu[0] * gi[0] + kg_mu[1] * gi[1];
                let flux_p = kg_p[0] * gi[0] + kg_p[1] * gi[1];
                r_mu[fi] +=
                    q.weight * ((storage - qw) * q.basis[i] + lam_w * flux_mu + lam_w * flux_p);
                r_p[fi] += q.weight * (lam_t * flux_p + lam_w * flux_mu - qt * q.basis[i]);
            }
        }
    }

    for face in mesh.boundary_faces() {
        if face.tag != BoundaryTag::Gamma2 {
            continue;
        }
        for q in mesh.face_quads(face) {
            let s_tr = model.invert_mu(mu_new.eval_face(&q, face))?;
            let s_cl = model.clamp_s(s_tr);
            let f4 = data.phi4.eval(&q.x, t_new, s_cl);
            let f24 = f4 + data.phi2.eval(&q.x, t_new, s_cl);
            for i in 0..face.n_nodes {
                if let Some(fi) = dofs.free_index(face.nodes[i]) {
                    r_mu[fi] -= q.weight * f4 * q.basis[i];
                    r_p[fi] -= q.weight * f24 * q.basis[i];
                }
            }
        }
    }

    let mean_p = if dofs.constrained {
        Some(mesh.integrate(p_new, None)? / mesh.domain_measure())
    } else {
        None
    };

    Ok(StepResidual { r_mu, r_p, mean_p })
}

/// Weights of the zero-mean constraint: `c_i = (integral of N_i) / |Omega|`
/// over the free pressure nodes.
pub fn mean_vector(mesh: &Mesh, dofs: &DofMap) -> Vec<f64> {
    let mut c = vec![0.0; dofs.n_free()];
    let nl = mesh.nodes_per_cell();
    for cell in 0..mesh.n_cells() {
        let nodes = mesh.cell_nodes(cell);
        for q in mesh.cell_quads(cell) {
            for i in 0..nl {
                if let Some(fi) = dofs.free_index(nodes[i]) {
                    c[fi] += q.weight * q.basis[i];
                }
            }
        }
    }
    let measure = mesh.domain_measure();
    for v in &mut c {
        *v /= measure;
    }
    c
}

/// Assembles the exact analytic Jacobian of the step residual with respect to
/// the free `(mu, p)` coefficients, including the chain-rule terms through
/// `S'(mu) = 1/mu'(S)` and the mobility/source derivatives. Unknown ordering
/// is `[mu_free, p_free, multiplier]`; the zero-mean constraint contributes a
/// symmetric border when active.
pub fn assemble_jacobian(
    mesh: &Mesh,
    dofs: &DofMap,
    data: &ProblemData,
    mu_new: &FieldCoefficients,
    p_new: &FieldCoefficients,
    tau: f64,
    t_new: f64,
) -> Result<Csr, AssemblyError> {
    mesh.check_len(mu_new)?;
    mesh.check_len(p_new)?;
    let model = &data.model;
    let nl = mesh.nodes_per_cell();
    let mut trip = Triplets::new(dofs.system_size());

    for cell in 0..mesh.n_cells() {
        let nodes = mesh.cell_nodes(cell);
        let phi = data.porosity[cell];
        let k = data.permeability[cell];
        for q in mesh.cell_quads(cell) {
            let mu_q = mu_new.eval(&q, &nodes, nl);
            let s = model.invert_mu(mu_q)?;
            let s_cl = model.clamp_s(s);
            let sp = 1.0 / model.dmu_ds(s)?;
            let lam_w = model.mobility(s, Phase::Wetting);
            let lam_t = lam_w + model.mobility(s, Phase::NonWetting);
            let dlam_w = model.dmobility_ds(s, Phase::Wetting);
            let dlam_t = model.dtotal_mobility_ds(s);
            let chain = clamp_deriv(model, s) * sp;
            let dqw = data.q_w.d_ds(&q.x, t_new, s_cl) * chain;
            let dqt = dqw + data.q_n.d_ds(&q.x, t_new, s_cl) * chain;
            let kg_mu = k.apply(mu_new.grad(&q, &nodes, nl));
            let kg_p = k.apply(p_new.grad(&q, &nodes, nl));
            for i in 0..nl {
                let (Some(mu_i), Some(p_i)) = (dofs.mu_index(nodes[i]), dofs.p_index(nodes[i]))
                else {
                    continue;
                };
                let gi = q.grad[i];
                let flux_mu_i = kg_mu[0] * gi[0] + kg_mu[1] * gi[1];
                let flux_p_i = kg_p[0] * gi[0] + kg_p[1] * gi[1];
                for j in 0..nl {
                    let (Some(mu_j), Some(p_j)) = (dofs.mu_index(nodes[j]), dofs.p_index(nodes[j]))
                    else {
                        continue;
                    };
                    let kgj = k.apply(q.grad[j]);
                    let stiff_ij = kgj[0] * gi[0] + kgj[1] * gi[1];
                    let nj = q.basis[j];
                    // d r_mu[i] / d mu[j]
                    trip.push(
                        mu_i,
                        mu_j,
                        q.weight
                            * ((phi / tau * sp - dqw) * nj * q.basis[i]
                                + dlam_w * sp * nj * (flux_mu_i + flux_p_i)
                                + lam_w * stiff_ij),
                    );
                    // d r_mu[i] / d p[j]
                    trip.push(mu_i, p_j, q.weight * lam_w * stiff_ij);
                    // d r_p[i] / d mu[j]
                    trip.push(
                        p_i,
                        mu_j,
                        q.weight
                            * (dlam_t * sp * nj * flux_p_i
                                + dlam_w * sp * nj * flux_mu_i
                                + lam_w * stiff_ij
                                - dqt * nj * q.basis[i]),
                    );
                    // d r_p[i] / d p[j]
                    trip.push(p_i, p_j, q.weight * lam_t * stiff_ij);
                }
            }
        }
    }

    for face in mesh.boundary_faces() {
        if face.tag != BoundaryTag::Gamma2 {
            continue;
        }
        for q in mesh.face_quads(face) {
            let s_tr = model.invert_mu(mu_new.eval_face(&q, face))?;
            let s_cl = model.clamp_s(s_tr);
            let chain = clamp_deriv(model, s_tr) / model.dmu_ds(s_tr)?;
            let df4 = data.phi4.d_ds(&q.x, t_new, s_cl) * chain;
            let df24 = df4 + data.phi2.d_ds(&q.x, t_new, s_cl) * chain;
            if df4 == 0.0 && df24 == 0.0 {
                continue;
            }
            for i in 0..face.n_nodes {
                let (Some(mu_i), Some(p_i)) =
                    (dofs.mu_index(face.nodes[i]), dofs.p_index(face.nodes[i]))
                else {
                    continue;
                };
                for j in 0..face.n_nodes {
                    let Some(mu_j) = dofs.mu_index(face.nodes[j]) else {
                        continue;
                    };
                    let w = q.weight * q.basis[i] * q.basis[j];
                    trip.push(mu_i, mu_j, -w * df4);
                    trip.push(p_i, mu_j, -w * df24);
                }
            }
        }
    }

    if let Some(last) = dofs.multiplier_index() {
        let c = mean_vector(mesh, dofs);
        for (fi, &ci) in c.iter().enumerate() {
            trip.push(2 * fi + 1, last, ci);
            trip.push(last, 2 * fi + 1, ci);
        }
    }

    Ok(trip.to_csr())
}

/// Assembles the linear elliptic pressure system at a frozen potential field
/// (used to initialize the pressure): the total-mobility stiffness matrix
/// with the constraint border, and the residual at `p = p_lift`.
pub fn assemble_pressure_presolve(
    mesh: &Mesh,
    dofs: &DofMap,
    data: &ProblemData,
    mu0: &FieldCoefficients,
    p_lift: &FieldCoefficients,
    t0: f64,
) -> Result<(Csr, Vec<f64>), AssemblyError> {
    mesh.check_len(mu0)?;
    mesh.check_len(p_lift)?;
    let model = &data.model;
    let nl = mesh.nodes_per_cell();
    let m = dofs.n_free();
    let size = m + usize::from(dofs.constrained);
    let mut trip = Triplets::new(size);
    let mut rhs = vec![0.0; size];

    for cell in 0..mesh.n_cells() {
        let nodes = mesh.cell_nodes(cell);
        let k = data.permeability[cell];
        for q in mesh.cell_quads(cell) {
            let s = model.invert_mu(mu0.eval(&q, &nodes, nl))?;
            let s_cl = model.clamp_s(s);
            let lam_w = model.mobility(s, Phase::Wetting);
            let lam_t = lam_w + model.mobility(s, Phase::NonWetting);
            let qw = data.q_w.eval(&q.x, t0, s_cl);
            let qt = qw + data.q_n.eval(&q.x, t0, s_cl);
            let kg_mu = k.apply(mu0.grad(&q, &nodes, nl));
            let kg_pl = k.apply(p_lift.grad(&q, &nodes, nl));
            for i in 0..nl {
                let Some(fi) = dofs.free_index(nodes[i]) else {
                    continue;
                };
                let gi = q.grad[i];
                rhs[fi] -= q.weight
                    * (lam_w * (kg_mu[0] * gi[0] + kg_mu[1] * gi[1])
                        + lam_t * (kg_pl[0] * gi[0] + kg_pl[1] * gi[1])
                        - qt * q.basis[i]);
                for j in 0..nl {
                    let Some(fj) = dofs.free_index(nodes[j]) else {
                        continue;
                    };
                    let kgj = k.apply(q.grad[j]);
                    trip.push(fi, fj, q.weight * lam_t * (kgj[0] * gi[0] + kgj[1] * gi[1]));
                }
            }
        }
    }

    for face in mesh.boundary_faces() {
        if face.tag != BoundaryTag::Gamma2 {
            continue;
        }
        for q in mesh.face_quads(face) {
            let s_tr = model.invert_mu(mu0.eval_face(&q, face))?;
            let s_cl = model.clamp_s(s_tr);
            let f24 = data.phi4.eval(&q.x, t0, s_cl) + data.phi2.eval(&q.x, t0, s_cl);
            for i in 0..face.n_nodes {
                if let Some(fi) = dofs.free_index(face.nodes[i]) {
                    rhs[fi] += q.weight * f24 * q.basis[i];
                }
            }
        }
    }

    if dofs.constrained {
        let c = mean_vector(mesh, dofs);
        for (fi, &ci) in c.iter().enumerate() {
            trip.push(fi, m, ci);
            trip.push(m, fi, ci);
        }
        rhs[m] = -mesh.integrate(p_lift, None)? / mesh.domain_measure();
    }

    Ok((trip.to_csr(), rhs))
}

/// Result of checking the source/flux sign conditions and the inlet potential
/// range that together guarantee the saturation bounds. At most
/// `MAX_REPORTED` violations are kept verbatim; the rest are counted.
#[derive(Debug, Clone, Default)]
pub struct SignConditionReport {
    pub violations: Vec<String>,
    pub suppressed: usize,
}

const MAX_REPORTED: usize = 20;

impl SignConditionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, msg: String) {
        if self.violations.len() < MAX_REPORTED {
            self.violations.push(msg);
        } else {
            self.suppressed += 1;
        }
    }
}

impl std::fmt::Display for SignConditionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.passed() {
            write!(f, "source/flux sign conditions: pass")
        } else {
            writeln!(f, "source/flux sign conditions: FAIL")?;
            for v in &self.violations {
                writeln!(f, "  {v}")?;
            }
            if self.suppressed > 0 {
                writeln!(f, "  ... and {} more", self.suppressed)?;
            }
            Ok(())
        }
    }
}

/// Evaluates the four sign conditions on sources and boundary fluxes at the
/// residual saturations, plus the inlet potential range
/// `mu_w(s_eps) <= phi1 <= mu_w(1-s_eps)`, sampled over cell centers, flux
/// faces, Dirichlet nodes, and the given times.
pub fn check_sign_conditions(
    mesh: &Mesh,
    data: &ProblemData,
    times: &[f64],
) -> SignConditionReport {
    const TOL: f64 = 1e-12;
    let model = &data.model;
    let se = model.params().s_eps;
    let s_hi = 1.0 - se;
    let lam = |s: f64, ph: Phase| model.mobility(s, ph);
    let mut report = SignConditionReport::default();

    let mut centers = Vec::with_capacity(mesh.n_cells());
    for cell in 0..mesh.n_cells() {
        let nodes = mesh.cell_nodes(cell);
        let nl = mesh.nodes_per_cell();
        let mut x = [0.0; 2];
        for &n in &nodes[..nl] {
            let c = mesh.node_coord(n);
            x[0] += c[0] / nl as f64;
            x[1] += c[1] / nl as f64;
        }
        centers.push(x);
    }

    for &t in times {
        for (c, x) in centers.iter().enumerate() {
            let lo = lam(se, Phase::NonWetting) * data.q_w.eval(x, t, se)
                - lam(se, Phase::Wetting) * data.q_n.eval(x, t, se);
            if lo < -TOL {
                report.push(format!(
                    "source sign at the lower residual saturation: cell {c}, t={t}: {lo:e} < 0"
                ));
            }
            let hi = lam(s_hi, Phase::NonWetting) * data.q_w.eval(x, t, s_hi)
                - lam(s_hi, Phase::Wetting) * data.q_n.eval(x, t, s_hi);
            if hi > TOL {
                report.push(format!(
                    "source sign at the upper residual saturation: cell {c}, t={t}: {hi:e} > 0"
                ));
            }
        }
        for (fidx, face) in mesh.boundary_faces().iter().enumerate() {
            match face.tag {
                BoundaryTag::Gamma2 => {
                    for q in mesh.face_quads(face) {
                        let lo = lam(se, Phase::NonWetting) * data.phi4.eval(&q.x, t, se)
                            - lam(se, Phase::Wetting) * data.phi2.eval(&q.x, t, se);
                        if lo < -TOL {
                            report.push(format!(
                                "flux sign at the lower residual saturation: face {fidx}, t={t}: {lo:e} < 0"
                            ));
                        }
                        let hi = lam(s_hi, Phase::NonWetting) * data.phi4.eval(&q.x, t, s_hi)
                            - lam(s_hi, Phase::Wetting) * data.phi2.eval(&q.x, t, s_hi);
                        if hi > TOL {
                            report.push(format!(
                                "flux sign at the upper residual saturation: face {fidx}, t={t}: {hi:e} > 0"
                            ));
                        }
                    }
                }
                BoundaryTag::Gamma1 => {
                    let mu_lo = model.chemical_potential(se).expect("s_eps in (0,1)");
                    let mu_hi = model.chemical_potential(s_hi).expect("1-s_eps in (0,1)");
                    for &n in &face.nodes[..face.n_nodes] {
                        let x = mesh.node_coord(n);
                        let v = (data.phi1)(&x, t);
                        if v < mu_lo - TOL || v > mu_hi + TOL {
                            report.push(format!(
                                "inlet potential range: node {n}, t={t}: {v} outside [{mu_lo}, {mu_hi}]"
                            ));
                        }
                    }
                }
            }
        }
    }
    report
}

/// Sample times for the sign-condition gate: step endpoints and midpoints,
/// thinned to a bounded count.
pub fn sample_times(tau: f64, t_final: f64) -> Vec<f64> {
    let n_steps = (t_final / tau).ceil().max(1.0) as usize;
    let stride = (n_steps / 100).max(1);
    let mut times = Vec::new();
    for k in (0..n_steps).step_by(stride) {
        let t1 = ((k + 1) as f64 * tau).min(t_final);
        times.push(t1 - 0.5 * tau);
        times.push(t1);
    }
    times
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{MaterialParams, RelPermKind};
    use crate::mesh::MeshSpec;
    use crate::sparse::norm2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn model() -> ConstitutiveModel {
        let params = MaterialParams::new(1.0, 1.0, 0.5, 1.0, 1.0, 0.1, 1.0).unwrap();
        ConstitutiveModel::new(params, RelPermKind::Quadratic)
    }

    fn interval(cells: usize, dirichlet_left: bool) -> Mesh {
        let left = if dirichlet_left {
            BoundaryTag::Gamma1
        } else {
            BoundaryTag::Gamma2
        };
        Mesh::build(&MeshSpec {
            dim: 1,
            extents: vec![1.0],
            cells: vec![cells],
            side_tags: vec![left, BoundaryTag::Gamma2],
        })
        .unwrap()
    }

    fn closed_data(mesh: &Mesh) -> ProblemData {
        ProblemData {
            model: model(),
            porosity: vec![1.0; mesh.n_cells()],
            permeability: vec![PermTensor::isotropic(1.0); mesh.n_cells()],
            q_w: Arc::new(ZeroFn),
            q_n: Arc::new(ZeroFn),
            phi2: Arc::new(ZeroFn),
            phi4: Arc::new(ZeroFn),
            phi1: Arc::new(|_: &[f64; 2], _| 0.0),
            phi3: Arc::new(|_: &[f64; 2], _| 0.0),
            initial_mu: Arc::new(|_: &[f64; 2]| 0.0),
        }
    }

    #[test]
    fn equilibrium_residual_vanishes() {
        for mesh in [interval(3, false), square(3)] {
            let data = closed_data(&mesh);
            let dofs = DofMap::new(&mesh);
            let mu = FieldCoefficients::constant(mesh.n_nodes(), 0.3);
            let p = FieldCoefficients::constant(mesh.n_nodes(), 0.0);
            let r = assemble_residual(&mesh, &dofs, &data, &mu, &p, &mu, 0.1, 0.1).unwrap();
            assert!(r.norm2() < 1e-14, "norm {}", r.norm2());
        }
    }

    fn square(cells: usize) -> Mesh {
        Mesh::build(&MeshSpec {
            dim: 2,
            extents: vec![1.0, 1.0],
            cells: vec![cells, cells],
            side_tags: vec![BoundaryTag::Gamma2; 4],
        })
        .unwrap()
    }

    #[test]
    fn single_cell_mass_row() {
        let mesh = interval(1, false);
        let data = closed_data(&mesh);
        let dofs = DofMap::new(&mesh);
        let m = model();
        let mu_old = FieldCoefficients::constant(2, m.chemical_potential(0.4).unwrap());
        let mu_new = FieldCoefficients::constant(2, m.chemical_potential(0.55).unwrap());
        let p = FieldCoefficients::zeros(2);
        let tau = 0.2;
        let r = assemble_residual(&mesh, &dofs, &data, &mu_new, &p, &mu_old, tau, tau).unwrap();
        // uniform fields: gradients vanish, the mu-rows sum to the scalar
        // storage equation phi * (S_new - S_old)/tau * |cell|
        let total: f64 = r.r_mu.iter().sum();
        let expect = 1.0 * (0.55 - 0.4) / tau * 1.0;
        assert!((total - expect).abs() < 1e-12, "{total} vs {expect}");
    }

    fn random_state(
        mesh: &Mesh,
        rng: &mut impl Rng,
    ) -> (FieldCoefficients, FieldCoefficients, FieldCoefficients) {
        let m = model();
        let mu = mesh
            .interpolate(|_| 0.0)
            .try_map(|_| m.chemical_potential(rng.gen_range(0.25..0.75)));
        let mu = mu.unwrap();
        let p = mesh
            .interpolate(|_| 0.0)
            .try_map::<ConstitutiveError>(|_| Ok(rng.gen_range(-0.5..0.5)))
            .unwrap();
        let mu_old = mesh
            .interpolate(|_| 0.0)
            .try_map(|_| m.chemical_potential(rng.gen_range(0.25..0.75)))
            .unwrap();
        (mu, p, mu_old)
    }

    #[test]
    fn all_ones_test_function_gives_mass_balance() {
        let mesh = interval(5, false);
        let mut data = closed_data(&mesh);
        data.q_w = Arc::new(ConstantFn(0.7));
        data.q_n = Arc::new(ConstantFn(-0.7));
        data.phi4 = Arc::new(ConstantFn(0.3));
        let dofs = DofMap::new(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mu, p, mu_old) = random_state(&mesh, &mut rng);
        let tau = 0.05;
        let r = assemble_residual(&mesh, &dofs, &data, &mu, &p, &mu_old, tau, tau).unwrap();
        let sum: f64 = r.r_mu.iter().sum();
        // independent quadrature of phi*(S_new - S_old)/tau - q_w, and the
        // flux integral over the boundary
        let m = model();
        let mut expect = 0.0;
        for cell in 0..mesh.n_cells() {
            let nodes = mesh.cell_nodes(cell);
            for q in mesh.cell_quads(cell) {
                let s = m.invert_mu(mu.eval(&q, &nodes, 2)).unwrap();
                let s_old = m.invert_mu(mu_old.eval(&q, &nodes, 2)).unwrap();
                expect += q.weight * ((s - s_old) / tau - 0.7);
            }
        }
        expect -= 2.0 * 0.3; // two boundary points, phi4 = 0.3 each
        assert!((sum - expect).abs() < 1e-12, "{sum} vs {expect}");
    }

    fn pack(dofs: &DofMap, mu: &FieldCoefficients, p: &FieldCoefficients) -> Vec<f64> {
        let mut z = Vec::with_capacity(dofs.system_size());
        for &n in dofs.free_nodes() {
            z.push(mu[n]);
            z.push(p[n]);
        }
        if dofs.constrained {
            z.push(0.0);
        }
        z
    }

    fn unpack(dofs: &DofMap, z: &[f64], mu: &mut FieldCoefficients, p: &mut FieldCoefficients) {
        for (i, &n) in dofs.free_nodes().iter().enumerate() {
            mu[n] = z[2 * i];
            p[n] = z[2 * i + 1];
        }
    }

    fn flat_residual(
        mesh: &Mesh,
        dofs: &DofMap,
        data: &ProblemData,
        z: &[f64],
        template_mu: &FieldCoefficients,
        template_p: &FieldCoefficients,
        mu_old: &FieldCoefficients,
        tau: f64,
    ) -> Vec<f64> {
        let mut mu = template_mu.clone();
        let mut p = template_p.clone();
        unpack(dofs, z, &mut mu, &mut p);
        let r = assemble_residual(mesh, dofs, data, &mu, &p, mu_old, tau, tau).unwrap();
        let mut f = Vec::with_capacity(dofs.system_size());
        for i in 0..dofs.n_free() {
            f.push(r.r_mu[i]);
            f.push(r.r_p[i]);
        }
        if let Some(mp) = r.mean_p {
            f.push(mp);
        }
        f
    }

    #[test]
    fn jacobian_matches_directional_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dirichlet in [false, true] {
            let mesh = interval(4, dirichlet);
            let mut data = closed_data(&mesh);
            // saturation-dependent source and flux exercise the chain rule
            data.q_w = Arc::new(SaturationAffineFn { a: 0.2, b: -0.4 });
            data.phi4 = Arc::new(SaturationAffineFn { a: 0.1, b: 0.2 });
            let dofs = DofMap::new(&mesh);
            let tau = 0.05;
            for _ in 0..5 {
                let (mu, p, mu_old) = random_state(&mesh, &mut rng);
                let jac = assemble_jacobian(&mesh, &dofs, &data, &mu, &p, tau, tau).unwrap();
                let z0 = pack(&dofs, &mu, &p);
                let dirs: Vec<f64> = (0..z0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let nrm = norm2(&dirs);
                let v: Vec<f64> = dirs.iter().map(|d| d / nrm).collect();
                let h = 1e-7;
                let zp: Vec<f64> = z0.iter().zip(&v).map(|(a, b)| a + h * b).collect();
                let zm: Vec<f64> = z0.iter().zip(&v).map(|(a, b)| a - h * b).collect();
                let fp = flat_residual(&mesh, &dofs, &data, &zp, &mu, &p, &mu_old, tau);
                let fm = flat_residual(&mesh, &dofs, &data, &zm, &mu, &p, &mu_old, tau);
                let fd: Vec<f64> = fp
                    .iter()
                    .zip(&fm)
                    .map(|(a, b)| (a - b) / (2.0 * h))
                    .collect();
                let mut jv = vec![0.0; jac.n()];
                jac.matvec(&v, &mut jv);
                // multiplier column: z has lambda = 0 and the raw residual
                // omits the lambda*c term, so compare up to that column's
                // contribution (v's multiplier entry times c)
                let scale = norm2(&fd).max(1.0);
                for i in 0..fd.len() {
                    let mut expect = jv[i];
                    if let Some(last) = dofs.multiplier_index() {
                        if i < last && i % 2 == 1 {
                            expect -= jac.get(i, last) * v[last];
                        }
                    }
                    assert!(
                        (fd[i] - expect).abs() <= 1e-5 * scale,
                        "row {i}: fd {} vs J*v {}",
                        fd[i],
                        expect
                    );
                }
            }
        }
    }

    #[test]
    fn equilibrium_all_ones_storage_derivative() {
        let mesh = interval(1, false);
        let data = closed_data(&mesh);
        let dofs = DofMap::new(&mesh);
        let m = model();
        let mu0 = m.chemical_potential(0.45).unwrap();
        let mu = FieldCoefficients::constant(2, mu0);
        let p = FieldCoefficients::zeros(2);
        let tau = 0.3;
        let jac = assemble_jacobian(&mesh, &dofs, &data, &mu, &p, tau, tau).unwrap();
        // collapsed scalar system: d/dmu of phi*(S(mu) - S_old)/tau * |cell|
        let sp = 1.0 / m.dmu_ds(0.45).unwrap();
        let expect = sp / tau;
        let mut total = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                total += jac.get(dofs.mu_index(i).unwrap(), dofs.mu_index(j).unwrap());
            }
        }
        assert!((total - expect).abs() < 1e-12, "{total} vs {expect}");
    }

    #[test]
    fn jacobian_independent_of_previous_level() {
        let mesh = interval(4, false);
        let data = closed_data(&mesh);
        let dofs = DofMap::new(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mu, p, mu_old_a) = random_state(&mesh, &mut rng);
        let (_, _, mu_old_b) = random_state(&mesh, &mut rng);
        let tau = 0.1;
        let ja = assemble_jacobian(&mesh, &dofs, &data, &mu, &p, tau, tau).unwrap();
        let jb = assemble_jacobian(&mesh, &dofs, &data, &mu, &p, tau, tau).unwrap();
        assert_eq!(ja.to_dense(), jb.to_dense());
        let ra = assemble_residual(&mesh, &dofs, &data, &mu, &p, &mu_old_a, tau, tau).unwrap();
        let rb = assemble_residual(&mesh, &dofs, &data, &mu, &p, &mu_old_b, tau, tau).unwrap();
        // stiffness parts identical: pressure rows see no storage term
        for (a, b) in ra.r_p.iter().zip(&rb.r_p) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pressure_block_symmetric_positive_semidefinite() {
        let mesh = square(3);
        let data = closed_data(&mesh);
        let dofs = DofMap::new(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (mu, p, _) = random_state(&mesh, &mut rng);
        let jac = assemble_jacobian(&mesh, &dofs, &data, &mu, &p, 0.1, 0.1).unwrap();
        let m = dofs.n_free();
        let pp = |i: usize, j: usize| jac.get(2 * i + 1, 2 * j + 1);
        for i in 0..m {
            for j in 0..m {
                assert!((pp(i, j) - pp(j, i)).abs() < 1e-12);
            }
        }
        for _ in 0..50 {
            let z: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut quad = 0.0;
            for i in 0..m {
                for j in 0..m {
                    quad += z[i] * pp(i, j) * z[j];
                }
            }
            assert!(quad >= -1e-12, "quadratic form {quad}");
        }
    }

    #[test]
    fn sign_condition_gate() {
        let mesh = interval(4, false);
        let data = closed_data(&mesh);
        let report = check_sign_conditions(&mesh, &data, &[0.0, 0.5, 1.0]);
        assert!(report.passed());

        let mut bad = closed_data(&mesh);
        bad.q_w = Arc::new(ConstantFn(-1.0));
        let report = check_sign_conditions(&mesh, &bad, &[0.5]);
        assert!(!report.passed());
        assert!(report.violations[0].contains("lower residual saturation"));
    }

    #[test]
    fn inlet_potential_range_gate() {
        let mesh = interval(4, true);
        let m = model();
        let mu_mid = m.chemical_potential(0.5).unwrap();
        let mut data = closed_data(&mesh);
        data.phi1 = Arc::new(move |_: &[f64; 2], _| mu_mid);
        let report = check_sign_conditions(&mesh, &data, &[0.1, 0.9]);
        assert!(report.passed(), "{report}");

        let mu_out = m.chemical_potential(0.95).unwrap();
        data.phi1 = Arc::new(move |_: &[f64; 2], _| mu_out);
        let report = check_sign_conditions(&mesh, &data, &[0.1]);
        assert!(!report.passed());
        assert!(report.violations[0].contains("inlet potential range"));
    }

    #[test]
    fn validate_rejects_bad_fields() {
        let mesh = interval(4, false);
        let mut data = closed_data(&mesh);
        data.porosity = vec![1.0; 3];
        assert!(data.validate(&mesh).is_err());
        let mut data = closed_data(&mesh);
        data.porosity[2] = 0.5; // below phi_m = 1.0
        assert!(data.validate(&mesh).is_err());
        let mut data = closed_data(&mesh);
        data.permeability[0] = PermTensor {
            xx: -1.0,
            xy: 0.0,
            yy: 1.0,
        };
        assert!(data.validate(&mesh).is_err());
        assert!(closed_data(&mesh).validate(&mesh).is_ok());
    }
}
