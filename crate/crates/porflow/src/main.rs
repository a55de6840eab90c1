use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use porflow::assembly::{check_sign_conditions, sample_times};
use porflow::config::{ConfigError, Mode, RunConfig};
use porflow::mms;
use porflow::output;
use porflow::simulation::{self, SimulationError, Trajectory};

#[derive(Parser)]
#[command(
    name = "porflow",
    about = "Fully implicit two-phase porous-media flow in the chemical-potential/pressure formulation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write the run ledger and field dumps
    Simulate(RunArgs),
    /// Run and assert every runtime invariant; nonzero exit on any failure
    Verify(RunArgs),
    /// Manufactured-solution convergence study
    Convergence(RunArgs),
    /// Dump the constitutive relations over a saturation grid as CSV
    ConstitutiveTable(TableArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to a TOML config, or `preset:<name>` for a bundled preset
    #[arg(long)]
    config: String,
    /// Output directory (overrides the config key)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bit-reproducible serial execution. Execution is always serial and
    /// deterministic; the flag is accepted for script compatibility.
    #[arg(long)]
    deterministic: bool,
    /// Override the time step
    #[arg(long)]
    tau: Option<f64>,
    /// Override the final time
    #[arg(long)]
    t_final: Option<f64>,
    /// Override the field-dump stride (0 disables field dumps)
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct TableArgs {
    /// Path to a TOML config, or `preset:<name>`
    #[arg(long)]
    config: String,
    /// Number of saturation grid points
    #[arg(long)]
    points: Option<usize>,
}

struct CliError {
    code: u8,
    kind: &'static str,
    detail: String,
}

impl CliError {
    fn new(code: u8, kind: &'static str, detail: impl ToString) -> Self {
        Self {
            code,
            kind,
            detail: detail.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(1, "validation", e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(2, "io", e)
    }
}

impl From<output::OutputError> for CliError {
    fn from(e: output::OutputError) -> Self {
        CliError::new(2, "output", e)
    }
}

fn from_simulation(e: SimulationError) -> CliError {
    match &e {
        SimulationError::Validation(_) => CliError::new(1, "validation", &e),
        SimulationError::InvariantViolation { .. } => CliError::new(3, "invariant", &e),
        _ => CliError::new(2, "solver", &e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(&args, false),
        Command::Verify(args) => simulate(&args, true),
        Command::Convergence(args) => convergence(&args),
        Command::ConstitutiveTable(args) => table(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.detail);
            // machine-readable last line for CI gates
            eprintln!("last-error: code={} kind={}", e.code, e.kind);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(args_config: &str) -> Result<RunConfig, CliError> {
    Ok(RunConfig::load(args_config)?)
}

fn apply_overrides(cfg: &mut RunConfig, args: &RunArgs) {
    if let Some(tau) = args.tau {
        if let Some(t) = cfg.time.as_mut() {
            t.tau = tau;
        }
    }
    if let Some(tf) = args.t_final {
        if let Some(t) = cfg.time.as_mut() {
            t.t_final = tf;
        }
    }
    if let Some(stride) = args.stride {
        cfg.output.stride = stride;
    }
    if let Some(dir) = &args.out {
        cfg.output.dir = Some(dir.display().to_string());
    }
}

fn persist(
    dir: Option<&Path>,
    mesh: &porflow::Mesh,
    data: &porflow::assembly::ProblemData,
    trajectory: &Trajectory,
    stride: usize,
    vtk: bool,
) -> Result<(), CliError> {
    let Some(dir) = dir else { return Ok(()) };
    fs::create_dir_all(dir)?;
    let mut ledger = fs::File::create(dir.join("ledger.csv"))?;
    output::write_ledger(&mut ledger, trajectory)?;
    if stride > 0 {
        for (k, state) in trajectory.states.iter().enumerate() {
            if k % stride != 0 && k + 1 != trajectory.states.len() {
                continue;
            }
            let mut f = fs::File::create(dir.join(format!("fields_{k:05}.csv")))?;
            output::write_fields(&mut f, mesh, data, state)?;
            if vtk && mesh.dim() == 2 {
                let mut v = fs::File::create(dir.join(format!("fields_{k:05}.vtk")))?;
                output::write_vtk(&mut v, mesh, state)?;
            }
        }
    }
    Ok(())
}

fn simulate(args: &RunArgs, verify: bool) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args);
    let built = cfg.build_problem()?;
    let out_dir = cfg.output.dir.as_ref().map(PathBuf::from);

    let gate = check_sign_conditions(
        &built.mesh,
        &built.data,
        &sample_times(built.tau, built.t_final),
    );
    if gate.passed() {
        println!("source/flux sign conditions: pass (saturation bounds guaranteed)");
    } else {
        println!("{gate}");
        println!("note: saturation bounds are monitored but no longer guaranteed");
    }

    let trajectory = match simulation::run(
        &built.mesh,
        &built.data,
        built.tau,
        built.t_final,
        &cfg.solver,
    ) {
        Ok(t) => t,
        Err(e) => {
            if let Some(partial) = e.partial() {
                persist(
                    out_dir.as_deref(),
                    &built.mesh,
                    &built.data,
                    partial,
                    cfg.output.stride,
                    cfg.output.vtk,
                )?;
                eprintln!(
                    "partial trajectory ({} states) persisted",
                    partial.states.len()
                );
            }
            return Err(from_simulation(e));
        }
    };

    persist(
        out_dir.as_deref(),
        &built.mesh,
        &built.data,
        &trajectory,
        cfg.output.stride,
        cfg.output.vtk,
    )?;

    let last = trajectory.final_state();
    println!(
        "completed {} steps to t = {} ({} nodes)",
        trajectory.reports.len(),
        last.t,
        built.mesh.n_nodes()
    );
    if let Some(rep) = trajectory.reports.last() {
        println!(
            "final energy {:.6e}, mass {:.6e}, saturation range [{:.6}, {:.6}]",
            rep.energy_new, rep.mass, rep.s_min, rep.s_max
        );
    }

    if verify {
        verify_trajectory(&built, &trajectory)?;
    }
    Ok(())
}

fn verify_trajectory(
    built: &porflow::config::BuiltProblem,
    trajectory: &Trajectory,
) -> Result<(), CliError> {
    let closed = built.data.is_closed(&built.mesh);
    let mut failed = Vec::new();
    let se = built.data.model.params().s_eps;

    let mut worst_bounds: f64 = 0.0;
    for rep in &trajectory.reports {
        worst_bounds = worst_bounds.max(se - rep.s_min).max(rep.s_max - (1.0 - se));
    }
    report_invariant(
        "saturation-bounds",
        worst_bounds <= 1e-10,
        &mut failed,
        || format!("worst excess {worst_bounds:e}"),
    );

    if closed {
        let mass0 = trajectory.reports.first().map_or(0.0, |r| r.mass);
        let drift = trajectory
            .reports
            .iter()
            .map(|r| (r.mass - mass0).abs())
            .fold(0.0f64, f64::max);
        report_invariant(
            "mass-conservation",
            drift <= 1e-10 * mass0.abs().max(1e-30),
            &mut failed,
            || format!("relative drift {:e}", drift / mass0.abs().max(1e-30)),
        );
        let energy_ok = trajectory
            .reports
            .iter()
            .all(|r| r.energy_inequality_ok != Some(false));
        report_invariant("energy-inequality", energy_ok, &mut failed, || {
            "per-step slack within tolerance".to_string()
        });
        let mut monotone = true;
        for w in trajectory.reports.windows(2) {
            if w[1].energy_new > w[0].energy_new + 1e-10 * w[0].energy_new.abs().max(1.0) {
                monotone = false;
            }
        }
        report_invariant("energy-monotonicity", monotone, &mut failed, || {
            "nonincreasing energy sequence".to_string()
        });
    } else {
        println!("invariant mass-conservation: n/a (driven system)");
        println!("invariant energy-inequality: n/a (driven system)");
    }

    let mut consistent = true;
    for st in &trajectory.states {
        if st.check_consistency(&built.data.model).is_err() {
            consistent = false;
        }
    }
    report_invariant("nodal-consistency", consistent, &mut failed, || {
        "mu_w(S_i) matches mu_i".to_string()
    });

    if failed.is_empty() {
        println!("verify: all asserted invariants hold");
        Ok(())
    } else {
        Err(CliError::new(
            3,
            "invariant",
            format!("invariants failed: {}", failed.join(", ")),
        ))
    }
}

fn report_invariant(name: &str, ok: bool, failed: &mut Vec<String>, detail: impl Fn() -> String) {
    if ok {
        println!("invariant {name}: pass ({})", detail());
    } else {
        println!("invariant {name}: FAIL ({})", detail());
        failed.push(name.to_string());
    }
}

fn convergence(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args);
    if cfg.mode != Mode::Convergence && cfg.mms.is_none() {
        return Err(CliError::new(
            1,
            "validation",
            "convergence runs need an [mms] section",
        ));
    }
    let (case, section, model) = cfg.build_mms()?;
    let report = mms::convergence_study(
        &case,
        model,
        &section.spatial_cells,
        section.tau_at_coarsest,
        &section.temporal_taus,
        section.temporal_cells,
        section.t_final,
        &cfg.solver,
    )
    .map_err(from_simulation)?;

    println!("spatial study (tau ~ h^2):");
    println!("{:>12} {:>14} {:>14}", "h", "err_S(L2)", "err_p(L2)");
    for (h, e) in &report.spatial {
        println!("{:>12.6e} {:>14.6e} {:>14.6e}", h, e.s_l2, e.p_l2);
    }
    println!("observed spatial order (S): {:.3}", report.spatial_order_s);
    println!("temporal study (fixed {} cells):", section.temporal_cells);
    println!("{:>12} {:>14} {:>14}", "tau", "err_S(L2)", "err_p(L2)");
    for (tau, e) in &report.temporal {
        println!("{:>12.6e} {:>14.6e} {:>14.6e}", tau, e.s_l2, e.p_l2);
    }
    println!(
        "observed temporal order (S): {:.3}",
        report.temporal_order_s
    );

    if let Some(dir) = cfg
        .output
        .dir
        .as_ref()
        .map(PathBuf::from)
        .or(args.out.clone())
    {
        fs::create_dir_all(&dir)?;
        let mut f = fs::File::create(dir.join("convergence.csv"))?;
        writeln!(f, "study,param,err_s_l2,err_p_l2")?;
        for (h, e) in &report.spatial {
            writeln!(f, "spatial,{:.16e},{:.16e},{:.16e}", h, e.s_l2, e.p_l2)?;
        }
        for (tau, e) in &report.temporal {
            writeln!(f, "temporal,{:.16e},{:.16e},{:.16e}", tau, e.s_l2, e.p_l2)?;
        }
    }
    Ok(())
}

fn table(args: &TableArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let model = cfg.build_model()?;
    let points = args.points.unwrap_or(cfg.table.points);
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    output::write_constitutive_table(&mut lock, &model, points)?;
    Ok(())
}
