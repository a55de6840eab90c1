//! Manufactured-solution verification harness (1D): substitutes smooth
//! in-bounds fields into the strong form to define sources, runs the solver,
//! and fits observed convergence orders.
//!
//! Manufactured fields on the unit interval with homogeneous Neumann data:
//!
//! ```text
//! S*(x,t) = s_mid + s_amp cos(pi x) e^(-decay t)
//! p*(x,t) = p_amp cos(pi x) e^(-decay t)
//! ```
//!
//! Both have zero-flux traces and `p*` has zero mean, so the closed-boundary
//! path (including the pressure mean constraint) is exercised directly.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::assembly::{PermTensor, ProblemData, SpaceTimeFn, ZeroFn};
use crate::constitutive::ConstitutiveModel;
use crate::mesh::{BoundaryTag, Mesh, MeshSpec};
use crate::simulation::{self, SimulationError};
use crate::solver::NewtonConfig;

#[derive(Debug, Clone, Copy)]
pub struct MmsCase {
    pub s_mid: f64,
    pub s_amp: f64,
    pub p_amp: f64,
    pub decay: f64,
}

impl Default for MmsCase {
    fn default() -> Self {
        Self {
            s_mid: 0.5,
            s_amp: 0.25,
            p_amp: 0.2,
            decay: 1.0,
        }
    }
}

impl MmsCase {
    pub fn s_exact(&self, x: f64, t: f64) -> f64 {
        self.s_mid + self.s_amp * (PI * x).cos() * (-self.decay * t).exp()
    }

    pub fn p_exact(&self, x: f64, t: f64) -> f64 {
        self.p_amp * (PI * x).cos() * (-self.decay * t).exp()
    }

    fn s_t(&self, x: f64, t: f64) -> f64 {
        -self.decay * self.s_amp * (PI * x).cos() * (-self.decay * t).exp()
    }

    fn s_x(&self, x: f64, t: f64) -> f64 {
        -PI * self.s_amp * (PI * x).sin() * (-self.decay * t).exp()
    }

    fn s_xx(&self, x: f64, t: f64) -> f64 {
        -PI * PI * self.s_amp * (PI * x).cos() * (-self.decay * t).exp()
    }

    fn p_x(&self, x: f64, t: f64) -> f64 {
        -PI * self.p_amp * (PI * x).sin() * (-self.decay * t).exp()
    }

    fn p_xx(&self, x: f64, t: f64) -> f64 {
        -PI * PI * self.p_amp * (PI * x).cos() * (-self.decay * t).exp()
    }

    /// Sources from the strong form with the manufactured fields substituted
    /// (exact chain-rule differentiation, unit permeability and porosity).
    fn sources(&self, model: ConstitutiveModel, x: f64, t: f64) -> (f64, f64) {
        use crate::constitutive::Phase::*;
        let s = self.s_exact(x, t);
        let s_x = self.s_x(x, t);
        let s_xx = self.s_xx(x, t);
        let p_x = self.p_x(x, t);
        let p_xx = self.p_xx(x, t);
        let dmu = model.dmu_ds(s).expect("manufactured S stays in bounds");
        let d2mu = model.d2mu_ds2(s).expect("manufactured S stays in bounds");
        let mu_x = dmu * s_x;
        let mu_xx = d2mu * s_x * s_x + dmu * s_xx;
        let lam_w = model.mobility(s, Wetting);
        let lam_t = model.total_mobility(s);
        let dlam_w = model.dmobility_ds(s, Wetting);
        let dlam_t = model.dtotal_mobility_ds(s);
        let div_w_mu = dlam_w * s_x * mu_x + lam_w * mu_xx;
        let div_w_p = dlam_w * s_x * p_x + lam_w * p_xx;
        let div_t_p = dlam_t * s_x * p_x + lam_t * p_xx;
        let q_w = self.s_t(x, t) - div_w_mu - div_w_p;
        let q_t = -div_t_p - div_w_mu;
        (q_w, q_t - q_w)
    }

    pub fn build_problem(&self, model: ConstitutiveModel, mesh: &Mesh) -> ProblemData {
        let case = *self;
        let m_q = model;
        let m_init = model;
        ProblemData {
            model,
            porosity: vec![1.0; mesh.n_cells()],
            permeability: vec![PermTensor::isotropic(1.0); mesh.n_cells()],
            q_w: Arc::new(SpaceTimeFn(move |x: &[f64; 2], t: f64| {
                case.sources(m_q, x[0], t).0
            })),
            q_n: Arc::new(SpaceTimeFn(move |x: &[f64; 2], t: f64| {
                case.sources(m_q, x[0], t).1
            })),
            phi2: Arc::new(ZeroFn),
            phi4: Arc::new(ZeroFn),
            phi1: Arc::new(|_: &[f64; 2], _| 0.0),
            phi3: Arc::new(|_: &[f64; 2], _| 0.0),
            initial_mu: Arc::new(move |x: &[f64; 2]| {
                m_init
                    .chemical_potential(case.s_exact(x[0], 0.0))
                    .expect("manufactured S stays in bounds")
            }),
        }
    }
}

/// L2 errors of the final-time fields against the manufactured solution,
/// by assembly quadrature.
#[derive(Debug, Clone, Copy)]
pub struct MmsErrors {
    pub s_l2: f64,
    pub p_l2: f64,
}

pub fn run_case(
    case: &MmsCase,
    model: ConstitutiveModel,
    cells: usize,
    tau: f64,
    t_final: f64,
    newton: &NewtonConfig,
) -> Result<MmsErrors, SimulationError> {
    let mesh = Mesh::build(&MeshSpec {
        dim: 1,
        extents: vec![1.0],
        cells: vec![cells],
        side_tags: vec![BoundaryTag::Gamma2; 2],
    })?;
    let data = case.build_problem(model, &mesh);
    let traj = simulation::run(&mesh, &data, tau, t_final, newton)?;
    let state = traj.final_state();
    let nl = mesh.nodes_per_cell();
    let mut s_err = 0.0;
    let mut p_err = 0.0;
    for cell in 0..mesh.n_cells() {
        let nodes = mesh.cell_nodes(cell);
        for q in mesh.cell_quads(cell) {
            let s_h = model.invert_mu(state.mu.eval(&q, &nodes, nl))?;
            let p_h = state.p.eval(&q, &nodes, nl);
            let ds = s_h - case.s_exact(q.x[0], t_final);
            let dp = p_h - case.p_exact(q.x[0], t_final);
            s_err += q.weight * ds * ds;
            p_err += q.weight * dp * dp;
        }
    }
    Ok(MmsErrors {
        s_l2: s_err.sqrt(),
        p_l2: p_err.sqrt(),
    })
}

/// Least-squares slope of `ln(err)` against `ln(param)`.
pub fn observed_order(samples: &[(f64, f64)]) -> f64 {
    let n = samples.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(param, err) in samples {
        let x = param.ln();
        let y = err.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[derive(Debug, Clone)]
pub struct MmsReport {
    /// `(h, error)` pairs for the spatial study.
    pub spatial: Vec<(f64, MmsErrors)>,
    pub spatial_order_s: f64,
    /// `(tau, error)` pairs for the temporal study.
    pub temporal: Vec<(f64, MmsErrors)>,
    pub temporal_order_s: f64,
}

/// Spatial study at `tau` proportional to `h^2`, plus a temporal study on a
/// fixed fine mesh.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    case: &MmsCase,
    model: ConstitutiveModel,
    spatial_cells: &[usize],
    tau_at_coarsest: f64,
    temporal_taus: &[f64],
    temporal_cells: usize,
    t_final: f64,
    newton: &NewtonConfig,
) -> Result<MmsReport, SimulationError> {
    let mut spatial = Vec::new();
    let coarsest = *spatial_cells.first().expect("at least one mesh") as f64;
    for &cells in spatial_cells {
        let refine = cells as f64 / coarsest;
        let tau = tau_at_coarsest / (refine * refine);
        let err = run_case(case, model, cells, tau, t_final, newton)?;
        spatial.push((1.0 / cells as f64, err));
    }
    let spatial_order_s = observed_order(
        &spatial
            .iter()
            .map(|(h, e)| (*h, e.s_l2))
            .collect::<Vec<_>>(),
    );

    let mut temporal = Vec::new();
    for &tau in temporal_taus {
        let err = run_case(case, model, temporal_cells, tau, t_final, newton)?;
        temporal.push((tau, err));
    }
    let temporal_order_s = observed_order(
        &temporal
            .iter()
            .map(|(t, e)| (*t, e.s_l2))
            .collect::<Vec<_>>(),
    );

    Ok(MmsReport {
        spatial,
        spatial_order_s,
        temporal,
        temporal_order_s,
    })
}
