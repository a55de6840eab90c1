//! CSV and VTK emission: the per-step run ledger, per-state field dumps
//! (including the pressure transforms), and the constitutive table.

use std::io::{self, Write};

use thiserror::Error;

use crate::assembly::ProblemData;
use crate::constitutive::{ConstitutiveError, ConstitutiveModel, Phase};
use crate::diagnostics::{pressure_transforms, DiagnosticsError};
use crate::mesh::Mesh;
use crate::simulation::{State, Trajectory};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Constitutive(#[from] ConstitutiveError),
}

/// Writes the per-step ledger (`ledger.csv`).
pub fn write_ledger(out: &mut impl Write, trajectory: &Trajectory) -> io::Result<()> {
    writeln!(
        out,
        "step,t,energy,mass,s_min,s_max,diss_n,diss_w,convexity_sum,energy_slack,\
         mu_grad_max,newton_iterations,line_search_rejections,linear_iterations,substeps"
    )?;
    for (k, r) in trajectory.reports.iter().enumerate() {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{},{}",
            k + 1,
            r.t_new,
            r.energy_new,
            r.mass,
            r.s_min,
            r.s_max,
            r.diss_n,
            r.diss_w,
            r.convexity_sum,
            r.energy_slack,
            r.mu_grad_max,
            r.stats.iterations,
            r.stats.line_search_rejections,
            r.stats.linear_iterations,
            r.stats.substeps,
        )?;
    }
    Ok(())
}

/// Writes one state's nodal fields (`fields_<step>.csv`).
pub fn write_fields(
    out: &mut impl Write,
    mesh: &Mesh,
    data: &ProblemData,
    state: &State,
) -> Result<(), OutputError> {
    let (psi, theta) = pressure_transforms(data, state)?;
    if mesh.dim() == 1 {
        writeln!(out, "node,x,s,mu,p,psi,theta")?;
    } else {
        writeln!(out, "node,x,y,s,mu,p,psi,theta")?;
    }
    for n in 0..mesh.n_nodes() {
        let c = mesh.node_coord(n);
        let coords = if mesh.dim() == 1 {
            format!("{:.16e}", c[0])
        } else {
            format!("{:.16e},{:.16e}", c[0], c[1])
        };
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            n, coords, state.s[n], state.mu[n], state.p[n], psi[n], theta[n]
        )?;
    }
    Ok(())
}

/// Legacy VTK structured-points output for 2D fields.
pub fn write_vtk(out: &mut impl Write, mesh: &Mesh, state: &State) -> io::Result<()> {
    assert_eq!(mesh.dim(), 2, "VTK output is for 2D meshes");
    let nx = mesh.cells_per_axis()[0] + 1;
    let ny = mesh.cells_per_axis()[1] + 1;
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "porflow fields t={:.12e}", state.t)?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET STRUCTURED_POINTS")?;
    writeln!(out, "DIMENSIONS {} {} 1", nx, ny)?;
    writeln!(out, "ORIGIN 0 0 0")?;
    writeln!(
        out,
        "SPACING {:.12e} {:.12e} 1",
        mesh.spacing()[0],
        mesh.spacing()[1]
    )?;
    writeln!(out, "POINT_DATA {}", mesh.n_nodes())?;
    for (name, field) in [
        ("saturation", &state.s),
        ("potential", &state.mu),
        ("pressure", &state.p),
    ] {
        writeln!(out, "SCALARS {name} double 1")?;
        writeln!(out, "LOOKUP_TABLE default")?;
        for n in 0..mesh.n_nodes() {
            writeln!(out, "{:.12e}", field[n])?;
        }
    }
    Ok(())
}

/// Dumps the constitutive relations over a uniform saturation grid in
/// `[s_eps, 1-s_eps]` as CSV with 17 significant digits.
pub fn write_constitutive_table(
    out: &mut impl Write,
    model: &ConstitutiveModel,
    points: usize,
) -> Result<(), OutputError> {
    writeln!(
        out,
        "s,free_energy,chemical_potential,dmu_ds,capillary_pressure,lambda_w,lambda_n,psi_shift,theta"
    )?;
    let se = model.params().s_eps;
    let n = points.max(2);
    for i in 0..n {
        let s = se + (1.0 - 2.0 * se) * i as f64 / (n - 1) as f64;
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            s,
            model.free_energy(s)?,
            model.chemical_potential(s)?,
            model.dmu_ds(s)?,
            model.capillary_pressure(s)?,
            model.mobility(s, Phase::Wetting),
            model.mobility(s, Phase::NonWetting),
            model.artificial_pressure_shift(s)?,
            model.complementary_pressure(s)?,
        )?;
    }
    Ok(())
}
