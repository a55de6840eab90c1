//! Per-step certified quantities: discrete free energy, dissipation terms,
//! mass, saturation bounds, and the energy-stability inequality for closed
//! systems.
//!
//! Every integral here uses the same Gauss rule as assembly, with the
//! saturation reconstructed at quadrature points as `S(mu(x_q))`; that makes
//! the energy and mass ledgers telescope exactly across accepted steps.

use thiserror::Error;

use crate::assembly::{AssemblyError, ProblemData};
use crate::constitutive::ConstitutiveError;
use crate::mesh::{FieldCoefficients, Mesh, MeshError};
use crate::simulation::State;
use crate::solver::SolveStats;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Constitutive(#[from] ConstitutiveError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("state inconsistency: {0}")]
    Inconsistent(String),
}

/// Ledger entry for one accepted implicit step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub t_new: f64,
    pub energy_new: f64,
    pub energy_old: f64,
    /// `(phi_m c_min / 2) ||S_new - S_old||^2` (the convexity lower bound).
    pub convexity_sum: f64,
    /// `tau (lambda_n K grad p, grad p)`.
    pub diss_n: f64,
    /// `tau (lambda_w K grad(p + mu), grad(p + mu))`.
    pub diss_w: f64,
    /// `(phi, S_new)`.
    pub mass: f64,
    pub s_min: f64,
    pub s_max: f64,
    /// Largest quadrature-point `|grad mu|` (spatial Lipschitz proxy,
    /// reported only, never enforced).
    pub mu_grad_max: f64,
    /// `E_new - E_old + convexity_sum + diss_n + diss_w`; nonpositive up to
    /// `tol_e` for closed systems.
    pub energy_slack: f64,
    /// Set for closed runs only: slack within `1e-9 max(1, |E_old|)`.
    pub energy_inequality_ok: Option<bool>,
    pub stats: SolveStats,
}

/// Discrete free energy `(phi, F(S(mu)))` by assembly quadrature.
pub fn energy(
    mesh: &Mesh,
    data: &ProblemData,
    mu: &FieldCoefficients,
) -> Result<f64, DiagnosticsError> {
    mesh.check_len(mu)?;
    let model = &data.model;
    let nl = mesh.nodes_per_cell();
    let mut acc = 0.0;
    for cell in 0..mesh.n_cells() {
        let nodes = mesh.cell_nodes(cell);
        let phi = data.porosity[cell];
        for q in mesh.cell_quads(cell) {
            let s = model.invert_mu(mu.eval(&q, &nodes, nl))?;
            acc += q.weight * phi * model.free_energy(s)?;
        }
    }
    Ok(acc)
}

/// Computes the full per-step ledger from two consecutive states.
pub fn step_report(
    mesh: &Mesh,
    data: &ProblemData,
    state_old: &State,
    state_new: &State,
    tau: f64,
    stats: SolveStats,
) -> Result<StepReport, DiagnosticsError> {
    let model = &data.model;
    let nl = mesh.nodes_per_cell();
    let mut energy_new = 0.0;
    let mut energy_old = 0.0;
    let mut ds_sq = 0.0;
    let mut diss_n = 0.0;
    let mut diss_w = 0.0;
    let mut mass = 0.0;
    let mut mu_grad_max: f64 = 0.0;

    for cell in 0..mesh.n_cells() {
        let nodes = mesh.cell_nodes(cell);
        let phi = data.porosity[cell];
        let k = data.permeability[cell];
        for q in mesh.cell_quads(cell) {
            let s_new = model.invert_mu(state_new.mu.eval(&q, &nodes, nl))?;
            let s_old = model.invert_mu(state_old.mu.eval(&q, &nodes, nl))?;
            energy_new += q.weight * phi * model.free_energy(s_new)?;
            energy_old += q.weight * phi * model.free_energy(s_old)?;
            ds_sq += q.weight * (s_new - s_old) * (s_new - s_old);
            mass += q.weight * phi * s_new;

            let g_mu = state_new.mu.grad(&q, &nodes, nl);
            let g_p = state_new.p.grad(&q, &nodes, nl);
            let g_sum = [g_mu[0] + g_p[0], g_mu[1] + g_p[1]];
            let kg_p = k.apply(g_p);
            let kg_sum = k.apply(g_sum);
            let lam_w = model.mobility(s_new, crate::constitutive::Phase::Wetting);
            let lam_n = model.mobility(s_new, crate::constitutive::Phase::NonWetting);
            diss_n += tau * q.weight * lam_n * (kg_p[0] * g_p[0] + kg_p[1] * g_p[1]);
            diss_w += tau * q.weight * lam_w * (kg_sum[0] * g_sum[0] + kg_sum[1] * g_sum[1]);
            mu_grad_max = mu_grad_max.max((g_mu[0] * g_mu[0] + g_mu[1] * g_mu[1]).sqrt());
        }
    }

    let params = model.params();
    let convexity_sum = 0.5 * params.phi_m * params.c_min * ds_sq;
    let energy_slack = energy_new - energy_old + convexity_sum + diss_n + diss_w;
    let energy_inequality_ok = if data.is_closed(mesh) {
        let tol_e = 1e-9 * energy_old.abs().max(1.0);
        Some(energy_slack <= tol_e)
    } else {
        None
    };
    let (s_min, s_max) = state_new.s.min_max();

    Ok(StepReport {
        t_new: state_new.t,
        energy_new,
        energy_old,
        convexity_sum,
        diss_n,
        diss_w,
        mass,
        s_min,
        s_max,
        mu_grad_max,
        energy_slack,
        energy_inequality_ok,
        stats,
    })
}

/// Nodal artificial pressure `psi = p + shift(S)` and complementary pressure
/// `theta(S)`, both pointwise transforms of the nodal saturation. Guards the
/// potential/saturation round-trip before evaluating.
pub fn pressure_transforms(
    data: &ProblemData,
    state: &State,
) -> Result<(FieldCoefficients, FieldCoefficients), DiagnosticsError> {
    let model = &data.model;
    state
        .check_consistency(model)
        .map_err(DiagnosticsError::Inconsistent)?;
    let mut psi = state.p.clone();
    let theta = state.s.try_map(|s| model.complementary_pressure(s))?;
    for i in 0..psi.len() {
        psi[i] += model.artificial_pressure_shift(state.s[i])?;
    }
    Ok((psi, theta))
}
