//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! with its runtime. Tolerances are pinned in the assertions.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use porflow::assembly::{assemble_jacobian, assemble_residual, DofMap};
use porflow::config::RunConfig;
use porflow::constitutive::{check_admissibility, ConstitutiveModel, MaterialParams, RelPermKind};
use porflow::mesh::FieldCoefficients;
use porflow::mms;
use porflow::simulation::{self, Trajectory};
use porflow::solver::{newton_step_solve, NewtonConfig};
use porflow::sparse::norm2;

fn report(n: usize, name: &str, elapsed: f64, detail: &str) {
    println!("criterion {n} ({name}): PASS [{elapsed:.2}s] {detail}");
}

fn test_model() -> ConstitutiveModel {
    let params = MaterialParams::new(1.3, 0.8, 0.4, 1.0, 2.0, 0.1, 1.0).unwrap();
    ConstitutiveModel::new(params, RelPermKind::Quadratic)
}

#[test]
fn criterion_01_constitutive_exactness() {
    let start = Instant::now();
    let m = test_model();
    let se = m.params().s_eps;
    let h = 1e-6;
    let mut worst_fd: f64 = 0.0;
    let mut worst_rt: f64 = 0.0;
    for i in 0..1000 {
        let s = se + (1.0 - 2.0 * se) * (i as f64 + 0.5) / 1000.0;
        let mu = m.chemical_potential(s).unwrap();
        let fd_mu = (m.free_energy(s + h).unwrap() - m.free_energy(s - h).unwrap()) / (2.0 * h);
        worst_fd = worst_fd.max((fd_mu - mu).abs() / mu.abs().max(1.0));
        let d = m.dmu_ds(s).unwrap();
        let fd_d = (m.chemical_potential(s + h).unwrap() - m.chemical_potential(s - h).unwrap())
            / (2.0 * h);
        worst_fd = worst_fd.max((fd_d - d).abs() / d.abs().max(1.0));
        worst_rt = worst_rt.max((m.invert_mu(mu).unwrap() - s).abs());
    }
    assert!(worst_fd <= 1e-6, "finite-difference mismatch {worst_fd:e}");
    assert!(worst_rt <= 1e-12, "round-trip error {worst_rt:e}");
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "runtime {elapsed}s over budget");
    report(
        1,
        "constitutive exactness",
        elapsed,
        &format!("fd err {worst_fd:.2e}, roundtrip {worst_rt:.2e}"),
    );
}

#[test]
fn criterion_02_convexity_inequality() {
    let start = Instant::now();
    let m = test_model();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let s_old = rng.gen_range(0.1..=0.9);
        let s_new = rng.gen_range(0.1..=0.9);
        let mu = m.chemical_potential(s_new).unwrap();
        let gap = m.convexity_gap(s_old, s_new, mu).unwrap();
        worst = worst.max(gap);
        assert!(gap <= 1e-14, "gap {gap:e} at ({s_old}, {s_new})");
    }
    for _ in 0..100 {
        let s = rng.gen_range(0.1..=0.9);
        let mu = m.chemical_potential(s).unwrap();
        let gap = m.convexity_gap(s, s, mu).unwrap();
        assert!(gap.abs() <= 1e-14, "equality case gap {gap:e}");
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "runtime {elapsed}s over budget");
    report(
        2,
        "convexity inequality",
        elapsed,
        &format!("worst gap {worst:.2e} over 1e4 pairs"),
    );
}

#[test]
fn criterion_03_admissibility_gate() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let gw: f64 = rng.gen_range(0.1..5.0);
        let gn: f64 = rng.gen_range(0.1..5.0);
        let sum_sq = (gw.sqrt() + gn.sqrt()).powi(2);
        assert!(
            check_admissibility(gw, gn, sum_sq).is_err(),
            "gamma_wn = (sqrt+sqrt)^2 must be rejected"
        );
        let below = rng.gen_range(0.0..0.49) * sum_sq;
        let margin = check_admissibility(gw, gn, below).unwrap();
        assert!(margin > 0.0);
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "runtime {elapsed}s over budget");
    report(3, "admissibility gate", elapsed, "100 random pairs");
}

#[test]
fn criterion_04_two_cell_oracle_equivalence() {
    use common::two_cell;
    let start = Instant::now();

    let tau = 0.05;
    let s_old = [0.3, 0.5, 0.7];
    let mu_old_nodal = [
        two_cell::mu_w(s_old[0]),
        two_cell::mu_w(s_old[1]),
        two_cell::mu_w(s_old[2]),
    ];

    // library side: the closed preset's material on a two-cell mesh
    let mut built_cfg = RunConfig::load("preset:closed_1d").unwrap();
    built_cfg.mesh.as_mut().unwrap().cells = vec![2];
    let built = built_cfg.build_problem().unwrap();
    let mesh = built.mesh;
    let data = built.data;
    let dofs = DofMap::new(&mesh);
    let mu_old = FieldCoefficients::from_values(mu_old_nodal.to_vec(), &mesh).unwrap();
    let p0 = FieldCoefficients::zeros(3);
    let mut newton_cfg = NewtonConfig::default();
    newton_cfg.abs_tol = 1e-13;
    newton_cfg.rel_tol = 0.0;
    let (mu_lib, p_lib, stats) = newton_step_solve(
        &mesh,
        &dofs,
        &data,
        &mu_old,
        tau,
        tau,
        (&mu_old, &p0),
        &newton_cfg,
    )
    .unwrap();
    assert!(stats.residual_norm <= 1e-12);

    // independent dense oracle
    let (mu_ora, p_ora) = two_cell::solve(mu_old_nodal, tau, 1e-14);
    let res_ora = two_cell::mu_residual(&mu_ora, &p_ora, &mu_old_nodal, tau);
    let ora_norm = norm2(&res_ora);
    assert!(ora_norm <= 1e-12, "oracle residual {ora_norm:e}");

    let mut worst: f64 = 0.0;
    for i in 0..3 {
        worst = worst.max((mu_lib[i] - mu_ora[i]).abs());
        worst = worst.max((p_lib[i] - p_ora[i]).abs());
        assert!(
            (mu_lib[i] - mu_ora[i]).abs() <= 1e-8,
            "mu[{i}]: {} vs {}",
            mu_lib[i],
            mu_ora[i]
        );
        assert!(
            (p_lib[i] - p_ora[i]).abs() <= 1e-8,
            "p[{i}]: {} vs {}",
            p_lib[i],
            p_ora[i]
        );
    }
    // the oracle state satisfies the library's discrete system too
    let r_cross = assemble_residual(
        &mesh,
        &dofs,
        &data,
        &FieldCoefficients::from_values(mu_ora.to_vec(), &mesh).unwrap(),
        &FieldCoefficients::from_values(p_ora.to_vec(), &mesh).unwrap(),
        &mu_old,
        tau,
        tau,
    )
    .unwrap();
    assert!(
        r_cross.norm2() <= 1e-12,
        "cross residual {:e}",
        r_cross.norm2()
    );

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "runtime {elapsed}s over budget");
    report(
        4,
        "oracle equivalence",
        elapsed,
        &format!("max |delta| {worst:.2e}, residuals <= 1e-12"),
    );
}

fn run_preset(name: &str) -> (porflow::config::BuiltProblem, Trajectory) {
    let cfg = RunConfig::load(&format!("preset:{name}")).unwrap();
    let built = cfg.build_problem().unwrap();
    let traj = simulation::run(
        &built.mesh,
        &built.data,
        built.tau,
        built.t_final,
        &cfg.solver,
    )
    .unwrap_or_else(|e| panic!("preset {name} failed: {e}"));
    (built, traj)
}

#[test]
fn criterion_05_06_07_energy_bounds_mass() {
    let start = Instant::now();
    let mut detail = String::new();
    let mut driven_checked = false;
    for name in ["closed_1d", "closed_2d", "driven_dirichlet_1d"] {
        let (built, traj) = run_preset(name);
        let closed = built.data.is_closed(&built.mesh);
        let se = built.data.model.params().s_eps;

        // criterion 6: saturation bounds on every state, every preset
        for st in &traj.states {
            let (lo, hi) = st.s.min_max();
            assert!(
                lo >= se - 1e-10 && hi <= 1.0 - se + 1e-10,
                "{name}: bounds [{lo}, {hi}] at t={}",
                st.t
            );
        }
        driven_checked |= !closed;
        if !closed {
            continue;
        }
        assert_eq!(traj.reports.len(), 100, "{name}: expected 100 steps");

        // criterion 5: per-step energy inequality and monotone energy
        let mut worst_slack = f64::NEG_INFINITY;
        for rep in &traj.reports {
            let tol_e = 1e-9 * rep.energy_old.abs().max(1.0);
            assert!(
                rep.energy_slack <= tol_e,
                "{name}: slack {:e} at t={}",
                rep.energy_slack,
                rep.t_new
            );
            worst_slack = worst_slack.max(rep.energy_slack);
            assert_eq!(rep.energy_inequality_ok, Some(true));
            // nonincreasing up to solver-residual roundoff
            assert!(
                rep.energy_new <= rep.energy_old + 1e-10 * rep.energy_old.abs().max(1.0),
                "{name}: energy rose at t={}",
                rep.t_new
            );
        }

        // criterion 7: closed-system mass ledger
        let mass0 = initial_mass(&built);
        for rep in &traj.reports {
            assert!(
                (rep.mass - mass0).abs() <= 1e-10 * mass0.abs(),
                "{name}: mass drift {:e} at t={}",
                (rep.mass - mass0).abs() / mass0.abs(),
                rep.t_new
            );
        }
        detail.push_str(&format!("{name}: slack<= {worst_slack:.1e}; "));
    }
    assert!(driven_checked);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 40.0, "runtime {elapsed}s over budget");
    report(5, "energy stability", elapsed, &detail);
    report(
        6,
        "maximum principle",
        elapsed,
        "bounds held on all presets",
    );
    report(7, "mass conservation", elapsed, "relative drift <= 1e-10");
}

fn initial_mass(built: &porflow::config::BuiltProblem) -> f64 {
    let state0 =
        simulation::initialize(&built.mesh, &built.data, &NewtonConfig::default()).unwrap();
    let mesh = &built.mesh;
    let model = &built.data.model;
    let nl = mesh.nodes_per_cell();
    let mut acc = 0.0;
    for cell in 0..mesh.n_cells() {
        let nodes = mesh.cell_nodes(cell);
        let phi = built.data.porosity[cell];
        for q in mesh.cell_quads(cell) {
            acc += q.weight * phi * model.invert_mu(state0.mu.eval(&q, &nodes, nl)).unwrap();
        }
    }
    acc
}

#[test]
fn criterion_08_jacobian_correctness() {
    let start = Instant::now();
    let cfg = RunConfig::load("preset:closed_1d").unwrap();
    let mut cfg8 = cfg;
    cfg8.mesh.as_mut().unwrap().cells = vec![8];
    let built = cfg8.build_problem().unwrap();
    let mesh = &built.mesh;
    let data = &built.data;
    let model = &data.model;
    let dofs = DofMap::new(mesh);
    let n = mesh.n_nodes();
    let tau = 0.02;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;

    for trial in 0..20 {
        let mu = FieldCoefficients::from_values(
            (0..n)
                .map(|_| model.chemical_potential(rng.gen_range(0.25..0.75)).unwrap())
                .collect(),
            mesh,
        )
        .unwrap();
        let p = FieldCoefficients::from_values(
            (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            mesh,
        )
        .unwrap();
        let mu_old = FieldCoefficients::from_values(
            (0..n)
                .map(|_| model.chemical_potential(rng.gen_range(0.25..0.75)).unwrap())
                .collect(),
            mesh,
        )
        .unwrap();
        let jac = assemble_jacobian(mesh, &dofs, data, &mu, &p, tau, tau).unwrap();

        let size = dofs.system_size();
        let dir: Vec<f64> = (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nrm = norm2(&dir);
        let v: Vec<f64> = dir.iter().map(|d| d / nrm).collect();

        let eval = |z: &[f64]| -> Vec<f64> {
            let mut mu_t = mu.clone();
            let mut p_t = p.clone();
            for (i, &node) in dofs.free_nodes().iter().enumerate() {
                mu_t[node] = z[2 * i];
                p_t[node] = z[2 * i + 1];
            }
            let r = assemble_residual(mesh, &dofs, data, &mu_t, &p_t, &mu_old, tau, tau).unwrap();
            let mut f = Vec::with_capacity(size);
            for i in 0..dofs.n_free() {
                f.push(r.r_mu[i]);
                f.push(r.r_p[i]);
            }
            if let Some(mp) = r.mean_p {
                f.push(mp);
            }
            f
        };
        let mut z0 = Vec::with_capacity(size);
        for &nd in dofs.free_nodes() {
            z0.push(mu[nd]);
            z0.push(p[nd]);
        }
        if dofs.constrained {
            z0.push(0.0);
        }
        let h = 1e-7;
        let zp: Vec<f64> = z0.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let zm: Vec<f64> = z0.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (fp, fm) = (eval(&zp), eval(&zm));
        let fd: Vec<f64> = fp
            .iter()
            .zip(&fm)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        let mut jv = vec![0.0; size];
        jac.matvec(&v, &mut jv);
        // raw residual omits the multiplier column: subtract its contribution
        if let Some(last) = dofs.multiplier_index() {
            for i in (1..last).step_by(2) {
                jv[i] -= jac.get(i, last) * v[last];
            }
        }
        let diff: Vec<f64> = jv.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let rel = norm2(&diff) / norm2(&fd).max(1e-30);
        worst = worst.max(rel);
        assert!(
            rel <= 1e-5,
            "trial {trial}: directional FD mismatch {rel:e}"
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "runtime {elapsed}s over budget");
    report(
        8,
        "jacobian correctness",
        elapsed,
        &format!("worst directional rel err {worst:.2e} over 20 states"),
    );
}

#[test]
fn criterion_09_mms_convergence() {
    let start = Instant::now();
    let cfg = RunConfig::load("preset:mms_1d").unwrap();
    let (case, section, model) = cfg.build_mms().unwrap();
    let rep = mms::convergence_study(
        &case,
        model,
        &section.spatial_cells,
        section.tau_at_coarsest,
        &section.temporal_taus,
        section.temporal_cells,
        section.t_final,
        &cfg.solver,
    )
    .unwrap();
    assert!(
        rep.spatial_order_s >= 1.8,
        "spatial order {} below 1.8 ({:?})",
        rep.spatial_order_s,
        rep.spatial
            .iter()
            .map(|(h, e)| (*h, e.s_l2))
            .collect::<Vec<_>>()
    );
    assert!(
        rep.temporal_order_s >= 0.8,
        "temporal order {} below 0.8 ({:?})",
        rep.temporal_order_s,
        rep.temporal
            .iter()
            .map(|(t, e)| (*t, e.s_l2))
            .collect::<Vec<_>>()
    );
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "runtime {elapsed}s over budget");
    report(
        9,
        "mms convergence",
        elapsed,
        &format!(
            "spatial order {:.2}, temporal order {:.2}",
            rep.spatial_order_s, rep.temporal_order_s
        ),
    );
}

#[test]
fn criterion_10_pressure_transforms() {
    let start = Instant::now();
    let m = test_model();
    let se = m.params().s_eps;
    assert_eq!(m.complementary_pressure(se).unwrap(), 0.0);
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let s = se + (1.0 - 2.0 * se) * (i as f64 + 1.0) / 10.0;
        let psi = m.artificial_pressure_shift(s).unwrap();
        let theta = m.complementary_pressure(s).unwrap();
        let psi_oracle = common::trapezoid(
            |x| m.mobility(x, porflow::Phase::Wetting) / m.total_mobility(x) * m.dmu_ds(x).unwrap(),
            se,
            s,
            1_000_000,
        );
        let theta_oracle = common::trapezoid(
            |x| {
                m.mobility(x, porflow::Phase::Wetting) * m.mobility(x, porflow::Phase::NonWetting)
                    / m.total_mobility(x)
                    * m.dmu_ds(x).unwrap()
            },
            se,
            s,
            1_000_000,
        );
        worst = worst
            .max((psi - psi_oracle).abs())
            .max((theta - theta_oracle).abs());
        assert!(
            (psi - psi_oracle).abs() <= 1e-8,
            "psi at {s}: {psi} vs {psi_oracle}"
        );
        assert!(
            (theta - theta_oracle).abs() <= 1e-8,
            "theta at {s}: {theta} vs {theta_oracle}"
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "runtime {elapsed}s over budget");
    report(
        10,
        "pressure transforms",
        elapsed,
        &format!("max |delta| {worst:.2e} vs 1e6-point trapezoid"),
    );
}
