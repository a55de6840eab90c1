//! Time loop: initialization (including the elliptic pressure pre-solve),
//! uniform backward-Euler stepping with the solver fallback, and the runtime
//! invariant monitors (saturation bounds, nodal consistency, zero pressure
//! mean, closed-system energy inequality).

use thiserror::Error;

use crate::assembly::{assemble_pressure_presolve, AssemblyError, DofMap, ProblemData};
use crate::constitutive::{ConstitutiveError, ConstitutiveModel};
use crate::diagnostics::{step_report, DiagnosticsError, StepReport};
use crate::mesh::{FieldCoefficients, Mesh, MeshError};
use crate::solver::{linear_solve, solve_step_with_fallback, NewtonConfig, SolverError};

/// Tolerance on the nodal identity `mu_w(S_i) = mu_i`.
const CONSISTENCY_TOL: f64 = 1e-10;
/// Slack on the saturation bounds monitor.
const BOUNDS_TOL: f64 = 1e-10;
/// Slack on the zero-mean pressure monitor.
const MEAN_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("solver failed at step {step} (t = {t}): {source}")]
    Solver {
        step: usize,
        t: f64,
        source: SolverError,
        partial: Box<Trajectory>,
    },
    #[error("invariant violated at step {step} (t = {t}): {what}")]
    InvariantViolation {
        step: usize,
        t: f64,
        what: String,
        partial: Box<Trajectory>,
    },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Constitutive(#[from] ConstitutiveError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

impl SimulationError {
    /// Partial trajectory computed before the failure, when one exists.
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            SimulationError::Solver { partial, .. }
            | SimulationError::InvariantViolation { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

/// One time level: chemical potential, pressure, and the nodal saturation
/// `S_i = S(mu_i)`.
#[derive(Debug, Clone)]
pub struct State {
    pub t: f64,
    pub mu: FieldCoefficients,
    pub p: FieldCoefficients,
    pub s: FieldCoefficients,
}

impl State {
    pub fn from_mu_p(
        mesh: &Mesh,
        model: &ConstitutiveModel,
        t: f64,
        mu: FieldCoefficients,
        p: FieldCoefficients,
    ) -> Result<Self, SimulationError> {
        mesh.check_len(&mu)?;
        mesh.check_len(&p)?;
        let s = mu.try_map(|v| model.invert_mu(v))?;
        Ok(Self { t, mu, p, s })
    }

    /// Checks `|mu_w(S_i) - mu_i| <= 1e-10` at every node.
    pub fn check_consistency(&self, model: &ConstitutiveModel) -> Result<(), String> {
        for i in 0..self.mu.len() {
            let back = model
                .chemical_potential(self.s[i])
                .map_err(|e| e.to_string())?;
            if (back - self.mu[i]).abs() > CONSISTENCY_TOL {
                return Err(format!(
                    "nodal potential/saturation inconsistency at node {i}: {:e}",
                    (back - self.mu[i]).abs()
                ));
            }
        }
        Ok(())
    }
}

/// The computed time history plus its per-step ledgers.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub reports: Vec<StepReport>,
}

impl Trajectory {
    pub fn final_state(&self) -> &State {
        self.states
            .last()
            .expect("trajectory holds the initial state")
    }
}

/// Builds the initial state: nodal interpolation of the initial potential,
/// the saturation-bounds gate, and one linear elliptic pre-solve for the
/// pressure with the potential frozen.
pub fn initialize(
    mesh: &Mesh,
    data: &ProblemData,
    newton: &NewtonConfig,
) -> Result<State, SimulationError> {
    data.validate(mesh)?;
    let model = &data.model;
    let mu0 = mesh.interpolate(|x| (data.initial_mu)(x));
    for (i, &v) in mu0.as_slice().iter().enumerate() {
        if !v.is_finite() {
            return Err(SimulationError::Validation(format!(
                "initial potential is not finite at node {i}"
            )));
        }
    }
    let s0 = mu0.try_map(|v| model.invert_mu(v))?;
    let se = model.params().s_eps;
    let (lo, hi) = s0.min_max();
    if lo < se - 1e-12 || hi > 1.0 - se + 1e-12 {
        return Err(SimulationError::Validation(format!(
            "initial saturation bounds: range [{lo}, {hi}] leaves [{se}, {}]",
            1.0 - se
        )));
    }

    let dofs = DofMap::new(mesh);
    let mut p_lift = FieldCoefficients::zeros(mesh.n_nodes());
    if mesh.has_dirichlet() {
        for node in 0..mesh.n_nodes() {
            if mesh.is_gamma1_node(node) {
                p_lift[node] = (data.phi3)(&mesh.node_coord(node), 0.0);
            }
        }
    }
    let (a, rhs) = assemble_pressure_presolve(mesh, &dofs, data, &mu0, &p_lift, 0.0)?;
    let (delta, _) = linear_solve(&a, &rhs, &newton.linear).map_err(|e| {
        SimulationError::Validation(format!("initial pressure pre-solve failed: {e}"))
    })?;
    let mut p0 = p_lift;
    for (i, &node) in dofs.free_nodes().iter().enumerate() {
        p0[node] += delta[i];
    }
    State::from_mu_p(mesh, model, 0.0, mu0, p0)
}

fn check_monitors(
    mesh: &Mesh,
    data: &ProblemData,
    state: &State,
    report: &StepReport,
) -> Result<(), String> {
    let se = data.model.params().s_eps;
    if report.s_min < se - BOUNDS_TOL || report.s_max > 1.0 - se + BOUNDS_TOL {
        return Err(format!(
            "saturation bounds: nodal range [{}, {}] leaves [{se}, {}] \
             (dump: t={}, energy={}, mass={})",
            report.s_min,
            report.s_max,
            1.0 - se,
            report.t_new,
            report.energy_new,
            report.mass
        ));
    }
    state.check_consistency(&data.model)?;
    if !mesh.has_dirichlet() {
        let mean =
            mesh.integrate(&state.p, None).map_err(|e| e.to_string())? / mesh.domain_measure();
        if mean.abs() > MEAN_TOL {
            return Err(format!("pressure mean {mean:e} exceeds tolerance"));
        }
    }
    if report.energy_inequality_ok == Some(false) {
        return Err(format!(
            "energy inequality: slack {:e} above tolerance at t={}",
            report.energy_slack, report.t_new
        ));
    }
    Ok(())
}

/// Runs the uniform-step time loop to `t_final` (with one final short step
/// when `tau` does not divide it). Aborts on the first invariant violation,
/// returning the partial trajectory inside the error.
pub fn run(
    mesh: &Mesh,
    data: &ProblemData,
    tau: f64,
    t_final: f64,
    newton: &NewtonConfig,
) -> Result<Trajectory, SimulationError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SimulationError::Validation(format!(
            "time step must be positive, got {tau}"
        )));
    }
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(SimulationError::Validation(format!(
            "final time must be nonnegative, got {t_final}"
        )));
    }

    let dofs = DofMap::new(mesh);
    let mut trajectory = Trajectory::default();
    trajectory.states.push(initialize(mesh, data, newton)?);

    let slack = 1e-12 * t_final.max(1.0);
    let mut step = 0usize;
    loop {
        let t_old = trajectory.states[step].t;
        if t_old >= t_final - slack {
            break;
        }
        let dt = tau.min(t_final - t_old);
        let t_new = if t_final - (t_old + dt) < slack {
            t_final
        } else {
            t_old + dt
        };
        let old = &trajectory.states[step];
        let solved =
            solve_step_with_fallback(mesh, &dofs, data, &old.mu, &old.p, dt, t_new, newton);
        let (mu, p, stats) = match solved {
            Ok(v) => v,
            Err(source) => {
                return Err(SimulationError::Solver {
                    step: step + 1,
                    t: t_new,
                    source,
                    partial: Box::new(trajectory),
                })
            }
        };
        let new_state = State::from_mu_p(mesh, &data.model, t_new, mu, p)?;
        let report = step_report(mesh, data, &trajectory.states[step], &new_state, dt, stats)?;
        if let Err(what) = check_monitors(mesh, data, &new_state, &report) {
            trajectory.states.push(new_state);
            trajectory.reports.push(report);
            return Err(SimulationError::InvariantViolation {
                step: step + 1,
                t: t_new,
                what,
                partial: Box::new(trajectory),
            });
        }
        trajectory.states.push(new_state);
        trajectory.reports.push(report);
        step += 1;
    }
    Ok(trajectory)
}
