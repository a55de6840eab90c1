//! Per-step nonlinear solve: damped Newton on the coupled `(mu, p)` system
//! with a time-step halving fallback, plus the linear-solver front end
//! (sparse direct LU for small systems, BiCGSTAB above).

use thiserror::Error;

use crate::assembly::{
    self, apply_dirichlet, assemble_jacobian, assemble_residual, DofMap, ProblemData,
};
use crate::mesh::{FieldCoefficients, Mesh};
use crate::sparse::{bicgstab, norm2, Csr, LinearError, SparseLu};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolverKind {
    /// Direct up to `direct_max_unknowns`, iterative above.
    Auto,
    Direct,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearConfig {
    pub kind: LinearSolverKind,
    /// Relative tolerance on the linear residual.
    pub tol: f64,
    pub max_iters: usize,
    pub direct_max_unknowns: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            kind: LinearSolverKind::Auto,
            tol: 1e-10,
            max_iters: 20_000,
            direct_max_unknowns: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    /// Absolute tolerance on the residual 2-norm.
    pub abs_tol: f64,
    /// Relative tolerance against the initial residual norm.
    pub rel_tol: f64,
    pub max_iters: usize,
    /// Backtracking factor in (0, 1).
    pub damping: f64,
    /// Smallest admissible line-search step.
    pub min_step: f64,
    /// Maximum recursion depth of the time-step halving fallback.
    pub fallback_depth: usize,
    /// Steps longer than this are subdivided before attempting Newton.
    pub max_step_tau: Option<f64>,
    pub linear: LinearConfig,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-11,
            rel_tol: 1e-12,
            max_iters: 30,
            damping: 0.5,
            min_step: (2.0f64).powi(-20),
            fallback_depth: 6,
            max_step_tau: None,
            linear: LinearConfig::default(),
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |what: &str| Err(SolverError::BadConfig(what.to_string()));
        if !(self.abs_tol > 0.0) || !(self.rel_tol >= 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return bad("damping factor must lie in (0, 1)");
        }
        if !(self.min_step > 0.0) || !(self.linear.tol > 0.0) {
            return bad("min_step and linear tolerance must be positive");
        }
        Ok(())
    }
}

/// Per-solve statistics (aggregated over fallback substeps).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual_norm: f64,
    pub line_search_rejections: usize,
    pub linear_iterations: usize,
    /// Number of accepted implicit (sub)steps composing the solve.
    pub substeps: usize,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("Newton did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        stats: SolveStats,
    },
    #[error("linear solve failed: {0}")]
    Linear(#[from] LinearError),
    #[error(transparent)]
    Assembly(#[from] assembly::AssemblyError),
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),
}

/// Solves `A x = b` per the configuration: sparse LU for systems up to
/// `direct_max_unknowns`, BiCGSTAB with Jacobi preconditioning above. The
/// returned solution satisfies the residual tolerance in the backward-error
/// sense `||Ax-b|| <= tol (||A|| ||x|| + ||b||)`.
pub fn linear_solve(
    a: &Csr,
    b: &[f64],
    cfg: &LinearConfig,
) -> Result<(Vec<f64>, usize), SolverError> {
    if norm2(b) == 0.0 {
        return Ok((vec![0.0; a.n()], 0));
    }
    let direct = match cfg.kind {
        LinearSolverKind::Direct => true,
        LinearSolverKind::Iterative => false,
        LinearSolverKind::Auto => a.n() <= cfg.direct_max_unknowns,
    };
    if direct {
        let lu = SparseLu::factor(a)?;
        let x = lu.solve(b)?;
        let mut ax = vec![0.0; a.n()];
        a.matvec(&x, &mut ax);
        let res = norm2(&ax.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>());
        let scale = a.infinity_norm() * x.iter().fold(0.0f64, |m, v| m.max(v.abs())) + norm2(b);
        if res > cfg.tol * scale {
            return Err(SolverError::Linear(LinearError::ResidualCheckFailed {
                residual: res,
                backward: res / scale,
            }));
        }
        Ok((x, 0))
    } else {
        let (x, iters) = bicgstab(a, b, cfg.tol, cfg.max_iters)?;
        Ok((x, iters))
    }
}

struct StepSystem<'a> {
    mesh: &'a Mesh,
    dofs: &'a DofMap,
    data: &'a ProblemData,
    mu_old: &'a FieldCoefficients,
    tau: f64,
    t_new: f64,
    /// Zero-mean constraint weights (empty without the constraint).
    c: Vec<f64>,
}

impl<'a> StepSystem<'a> {
    fn unpack(&self, z: &[f64], mu: &mut FieldCoefficients, p: &mut FieldCoefficients) {
        for (i, &n) in self.dofs.free_nodes().iter().enumerate() {
            mu[n] = z[2 * i];
            p[n] = z[2 * i + 1];
        }
    }

    /// Full nonlinear system including the multiplier coupling; unknowns and
    /// residual entries interleave per node as `(mu_i, p_i)`.
    fn eval(
        &self,
        z: &[f64],
        mu: &mut FieldCoefficients,
        p: &mut FieldCoefficients,
    ) -> Result<Vec<f64>, SolverError> {
        self.unpack(z, mu, p);
        let r = assemble_residual(
            self.mesh,
            self.dofs,
            self.data,
            mu,
            p,
            self.mu_old,
            self.tau,
            self.t_new,
        )?;
        let m = self.dofs.n_free();
        let lambda = if self.dofs.constrained { z[2 * m] } else { 0.0 };
        let mut f = Vec::with_capacity(self.dofs.system_size());
        for i in 0..m {
            f.push(r.r_mu[i]);
            if self.dofs.constrained {
                f.push(r.r_p[i] + lambda * self.c[i]);
            } else {
                f.push(r.r_p[i]);
            }
        }
        if self.dofs.constrained {
            f.push(r.mean_p.expect("constrained residual carries the mean"));
        }
        Ok(f)
    }
}

/// One implicit step by damped Newton. `init` must already hold the lifted
/// Dirichlet values; `mu_old` is the previous time level. Returns the new
/// `(mu, p)` and the solve statistics.
#[allow(clippy::too_many_arguments)]
pub fn newton_step_solve(
    mesh: &Mesh,
    dofs: &DofMap,
    data: &ProblemData,
    mu_old: &FieldCoefficients,
    tau: f64,
    t_new: f64,
    init: (&FieldCoefficients, &FieldCoefficients),
    cfg: &NewtonConfig,
) -> Result<(FieldCoefficients, FieldCoefficients, SolveStats), SolverError> {
    cfg.validate()?;
    let system = StepSystem {
        mesh,
        dofs,
        data,
        mu_old,
        tau,
        t_new,
        c: if dofs.constrained {
            assembly::mean_vector(mesh, dofs)
        } else {
            Vec::new()
        },
    };
    let mut mu = init.0.clone();
    let mut p = init.1.clone();
    let mut z = Vec::with_capacity(dofs.system_size());
    for &n in dofs.free_nodes() {
        z.push(mu[n]);
        z.push(p[n]);
    }
    if dofs.constrained {
        z.push(0.0);
    }

    let mut stats = SolveStats {
        substeps: 1,
        ..Default::default()
    };
    let mut f = system.eval(&z, &mut mu, &mut p)?;
    let mut rnorm = norm2(&f);
    let r0 = rnorm;
    let tol = cfg.abs_tol + cfg.rel_tol * r0;

    while rnorm > tol {
        if stats.iterations >= cfg.max_iters {
            stats.residual_norm = rnorm;
            return Err(SolverError::NonConvergence {
                iterations: stats.iterations,
                residual: rnorm,
                stats,
            });
        }
        system.unpack(&z, &mut mu, &mut p);
        let jac = assemble_jacobian(mesh, dofs, data, &mu, &p, tau, t_new)?;
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let (delta, lin_iters) = linear_solve(&jac, &rhs, &cfg.linear)?;
        stats.linear_iterations += lin_iters;
        stats.iterations += 1;

        // backtracking on simple residual decrease
        let mut alpha = 1.0;
        loop {
            let z_trial: Vec<f64> = z.iter().zip(&delta).map(|(a, d)| a + alpha * d).collect();
            let f_trial = system.eval(&z_trial, &mut mu, &mut p)?;
            let n_trial = norm2(&f_trial);
            if n_trial < rnorm || n_trial <= tol {
                z = z_trial;
                f = f_trial;
                rnorm = n_trial;
                break;
            }
            stats.line_search_rejections += 1;
            alpha *= cfg.damping;
            if alpha < cfg.min_step {
                stats.residual_norm = rnorm;
                return Err(SolverError::NonConvergence {
                    iterations: stats.iterations,
                    residual: rnorm,
                    stats,
                });
            }
        }
    }
    stats.residual_norm = rnorm;
    system.unpack(&z, &mut mu, &mut p);
    Ok((mu, p, stats))
}

/// Solves the step `t_new - tau -> t_new`, recursively halving the step on
/// Newton failure (or when `max_step_tau` demands subdivision) up to
/// `fallback_depth` levels, and chaining the substeps.
#[allow(clippy::too_many_arguments)]
pub fn solve_step_with_fallback(
    mesh: &Mesh,
    dofs: &DofMap,
    data: &ProblemData,
    mu_old: &FieldCoefficients,
    p_old: &FieldCoefficients,
    tau: f64,
    t_new: f64,
    cfg: &NewtonConfig,
) -> Result<(FieldCoefficients, FieldCoefficients, SolveStats), SolverError> {
    solve_recursive(mesh, dofs, data, mu_old, p_old, tau, t_new, cfg, 0)
}

#[allow(clippy::too_many_arguments)]
fn solve_recursive(
    mesh: &Mesh,
    dofs: &DofMap,
    data: &ProblemData,
    mu_old: &FieldCoefficients,
    p_old: &FieldCoefficients,
    tau: f64,
    t_new: f64,
    cfg: &NewtonConfig,
    depth: usize,
) -> Result<(FieldCoefficients, FieldCoefficients, SolveStats), SolverError> {
    let must_split = cfg.max_step_tau.is_some_and(|cap| tau > cap);
    if !must_split {
        let mut mu_init = mu_old.clone();
        let mut p_init = p_old.clone();
        apply_dirichlet(mesh, data, t_new, tau, &mut mu_init, &mut p_init);
        match newton_step_solve(
            mesh,
            dofs,
            data,
            mu_old,
            tau,
            t_new,
            (&mu_init, &p_init),
            cfg,
        ) {
            Ok(result) => return Ok(result),
            Err(e @ SolverError::NonConvergence { .. }) if depth >= cfg.fallback_depth => {
                return Err(e)
            }
            Err(e @ SolverError::NonConvergence { .. }) => {
                let _ = e; // fall through to subdivision
            }
            Err(e) => return Err(e),
        }
    } else if depth >= cfg.fallback_depth {
        return Err(SolverError::BadConfig(format!(
            "max_step_tau {:?} cannot be honored within fallback depth {}",
            cfg.max_step_tau, cfg.fallback_depth
        )));
    }
    let half = 0.5 * tau;
    let t_mid = t_new - half;
    let (mu_mid, p_mid, s1) =
        solve_recursive(mesh, dofs, data, mu_old, p_old, half, t_mid, cfg, depth + 1)?;
    let (mu, p, s2) = solve_recursive(
        mesh,
        dofs,
        data,
        &mu_mid,
        &p_mid,
        half,
        t_new,
        cfg,
        depth + 1,
    )?;
    Ok((
        mu,
        p,
        SolveStats {
            iterations: s1.iterations + s2.iterations,
            residual_norm: s1.residual_norm.max(s2.residual_norm),
            line_search_rejections: s1.line_search_rejections + s2.line_search_rejections,
            linear_iterations: s1.linear_iterations + s2.linear_iterations,
            substeps: s1.substeps + s2.substeps,
        },
    ))
}
