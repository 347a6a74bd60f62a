//! Subcommand drivers: each takes a loaded scenario plus an output
//! directory, produces its artifacts, and records everything in the run
//! manifest.

use std::path::Path;
use std::sync::Mutex;

use crate::adjoint::{AdjointSources, solve_adjoint};
use crate::base;
use crate::config::Scenario;
use crate::control::ControlField;
use crate::error::{Error, Result};
use crate::field::{norm_l2_scalar, norm_l2_vector, VectorField};
use crate::forward::{energy_monitor, solve_linearized};
use crate::io::{
    Manifest, write_csv, write_labeled_csv, write_scalar_snapshot, write_vector_snapshot,
};
use crate::opt::{OptimizeResult, optimize};
use crate::verify::{
    CertificateReport, DependenceCase, GradientCase, check_continuous_dependence,
    check_ekeland_metric, check_energy, check_epsilon_optimality, check_gradient, check_lame,
    check_normal_cone, check_pontryagin, check_spike_convergence, default_tol, hamiltonian,
};

fn ensure_out(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    Ok(())
}

fn manifest_for(name: &str, sc: &Scenario, seed: u64, out_dir: &Path) -> Manifest {
    Manifest::new(name, &sc.raw, seed, out_dir)
}

pub fn run_manufacture(sc: &Scenario, out_dir: &Path, seed: u64) -> Result<()> {
    ensure_out(out_dir)?;
    let mut m = manifest_for("manufacture", sc, seed, out_dir);
    let b = &sc.native.base;
    write_scalar_snapshot(&out_dir.join("base_rho.bin"), &b.rho_tilde)?;
    write_vector_snapshot(&out_dir.join("base_u.bin"), &b.u_tilde)?;
    write_vector_snapshot(&out_dir.join("base_f.bin"), &b.f)?;
    m.add_artifact("base_rho.bin")?;
    m.add_artifact("base_u.bin")?;
    m.add_artifact("base_f.bin")?;
    let report = base::validate(b);
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::SnapshotFormat(e.to_string()))?;
    std::fs::write(out_dir.join("base_report.json"), json)?;
    m.add_artifact("base_report.json")?;
    m.write()?;
    Ok(())
}

/// Snapshot a trajectory every `stride` steps plus the final step.
fn snapshot_levels(n_steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut levels: Vec<usize> = (0..=n_steps).step_by(stride).collect();
    if *levels.last().unwrap() != n_steps {
        levels.push(n_steps);
    }
    levels
}

pub fn run_forward(sc: &Scenario, out_dir: &Path, seed: u64) -> Result<()> {
    ensure_out(out_dir)?;
    let mut m = manifest_for("forward", sc, seed, out_dir);
    let r = &sc.native;
    let traj = solve_linearized(&r.base, &[], &r.rho0, &r.u0, &r.params, r.time)?;
    for n in snapshot_levels(r.time.n_steps, sc.config.verify.snapshot_stride) {
        let rho_name = format!("state_rho_{n:06}.bin");
        let u_name = format!("state_u_{n:06}.bin");
        write_scalar_snapshot(&out_dir.join(&rho_name), &traj.rho[n])?;
        write_vector_snapshot(&out_dir.join(&u_name), &traj.u[n])?;
        m.add_artifact(&rho_name)?;
        m.add_artifact(&u_name)?;
    }
    let report = energy_monitor(&traj, &r.base, &r.params, &[]);
    let rows: Vec<Vec<f64>> = (0..report.t.len())
        .map(|n| {
            vec![
                report.t[n],
                report.e[n],
                report.dissipation[n],
                report.identity_residual[n],
                report.groenwall_bound[n],
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("energy.csv"),
        &["t", "energy", "dissipation", "identity_residual", "groenwall_bound"],
        &rows,
    )?;
    m.add_artifact("energy.csv")?;
    m.write()?;
    Ok(())
}

pub fn run_adjoint(sc: &Scenario, out_dir: &Path, seed: u64) -> Result<()> {
    ensure_out(out_dir)?;
    let mut m = manifest_for("adjoint", sc, seed, out_dir);
    let r = &sc.native;
    let traj = solve_linearized(&r.base, &[], &r.rho0, &r.u0, &r.params, r.time)?;
    let mode = sc.config.optimizer.mode.unwrap_or(crate::adjoint::AdjointMode::DiscreteExact);
    let srcs = AdjointSources::tracking(1.0, &r.targets);
    let adj = solve_adjoint(&r.base, &traj, &srcs, &r.params, mode)?;
    for n in snapshot_levels(r.time.n_steps, sc.config.verify.snapshot_stride) {
        let s_name = format!("adjoint_sigma_{n:06}.bin");
        let x_name = format!("adjoint_xi_{n:06}.bin");
        write_scalar_snapshot(&out_dir.join(&s_name), &adj.sigma[n])?;
        write_vector_snapshot(&out_dir.join(&x_name), &adj.xi[n])?;
        m.add_artifact(&s_name)?;
        m.add_artifact(&x_name)?;
    }
    let times = r.time.times();
    let rows: Vec<Vec<f64>> = (0..=r.time.n_steps)
        .map(|n| vec![times[n], norm_l2_scalar(&adj.sigma[n]), norm_l2_vector(&adj.xi[n])])
        .collect();
    write_csv(&out_dir.join("adjoint_norms.csv"), &["t", "sigma_l2", "xi_l2"], &rows)?;
    m.add_artifact("adjoint_norms.csv")?;
    m.write()?;
    Ok(())
}

fn solve_scenario(sc: &Scenario) -> Result<OptimizeResult> {
    let r = &sc.native;
    let opts = sc.config.optimize_options(r.time);
    optimize(&r.base, &r.params, &r.rho0, &r.u0, &r.targets, &r.constraint, &opts)
}

pub fn run_optimize(sc: &Scenario, out_dir: &Path, seed: u64) -> Result<()> {
    ensure_out(out_dir)?;
    let mut m = manifest_for("optimize", sc, seed, out_dir);
    let r = &sc.native;
    let result = solve_scenario(sc)?;
    for n in snapshot_levels(r.time.n_steps - 1, sc.config.verify.snapshot_stride) {
        let name = format!("control_{n:06}.bin");
        write_vector_snapshot(&out_dir.join(&name), &result.control.values[n])?;
        m.add_artifact(&name)?;
    }
    let rows: Vec<(String, Vec<f64>)> = result
        .log
        .iter()
        .map(|rec| {
            (
                rec.phase.to_string(),
                vec![
                    rec.level,
                    rec.iter as f64,
                    rec.objective,
                    rec.j,
                    rec.d_w,
                    rec.lambda_eps,
                    rec.a_norm,
                    rec.residual,
                    rec.step,
                ],
            )
        })
        .collect();
    write_labeled_csv(
        &out_dir.join("iterates.csv"),
        &[
            "phase", "level", "iter", "objective", "j", "d_w", "lambda_eps", "a_norm",
            "residual", "step",
        ],
        &rows,
    )?;
    m.add_artifact("iterates.csv")?;
    let c = &result.cost;
    let summary = vec![
        vec![
            c.tracking_rho,
            c.tracking_u,
            c.control_energy,
            c.total,
            result.residual,
            result.multiplier.lambda,
            result.multiplier.a.as_ref().map_or(0.0, |a| a.norm()),
            result.control.max_sample_norm(),
        ],
    ];
    write_csv(
        &out_dir.join("summary.csv"),
        &[
            "tracking_rho", "tracking_u", "control_energy", "total", "residual", "lambda",
            "a_norm", "max_sample_norm",
        ],
        &summary,
    )?;
    m.add_artifact("summary.csv")?;
    m.write()?;
    Ok(())
}

fn expr_vector(grid: crate::field::Grid, srcs: &[String]) -> Result<VectorField> {
    if srcs.len() != grid.dim {
        return Err(Error::Config {
            key: "verify".into(),
            message: format!("need {} vector component(s), got {}", grid.dim, srcs.len()),
        });
    }
    let exprs: Result<Vec<_>> = srcs.iter().map(|s| crate::expr::Expr::parse(s)).collect();
    let exprs = exprs?;
    Ok(VectorField::from_fns(grid, |c, p| exprs[c].eval(p, 0.0)))
}

/// Clamp a candidate spike/perturbation value inside the admissible ball.
fn clamp_to_ball(mut w: VectorField, radius: f64) -> VectorField {
    let n = norm_l2_vector(&w);
    if n > 0.5 * radius {
        w.scale(0.5 * radius / n);
    }
    w
}

fn verify_pontryagin(sc: &Scenario, seed: u64) -> Result<Vec<CertificateReport>> {
    let r = &sc.native;
    let vc = &sc.config.verify;
    let result = solve_scenario(sc)?;
    let base_tol = default_tol(&r.grid, &r.time);

    let (control, lambda, adj);
    if let Some(u_eps) = &result.eps_control {
        // certify the epsilon-continuation iterate with its own multiplier
        // pair and the matching constrained adjoint sources
        let traj = solve_linearized(&r.base, &u_eps.values, &r.rho0, &r.u0, &r.params, r.time)?;
        let pair = &result.multiplier;
        let (crho, cu) = match &pair.a {
            Some(a) => {
                let (s, v) = r.constraint.observable.apply_adjoint(a);
                (Some(s), Some(v))
            }
            None => (None, None),
        };
        let srcs = AdjointSources {
            lambda_mult: pair.lambda,
            targets: &r.targets,
            constraint_rho: crho.as_deref(),
            constraint_u: cu.as_deref(),
        };
        adj = solve_adjoint(&r.base, &traj, &srcs, &r.params, crate::adjoint::AdjointMode::DiscreteExact)?;
        control = u_eps.clone();
        lambda = pair.lambda;
    } else {
        adj = result.adjoint;
        control = result.control;
        lambda = 1.0;
    }

    let phi = hamiltonian(&control, &adj, &r.base, lambda);
    let interior = control.max_sample_norm() < control.radius * (1.0 - 1e-9);
    // strictly interior optima satisfy the minimum principle to solver
    // accuracy; active ball constraints only to the stationarity tolerance
    let tol = if interior && result.eps_control.is_none() {
        1e-8 * phi.abs().max(1.0)
    } else {
        base_tol * phi.abs().max(1.0)
    };
    let rep = check_pontryagin(&control, &adj, &r.base, lambda, vc.n_samples, seed, tol)?;
    Ok(vec![rep])
}

fn verify_cone(sc: &Scenario, seed: u64) -> Result<Vec<CertificateReport>> {
    let r = &sc.native;
    let vc = &sc.config.verify;
    let tol = default_tol(&r.grid, &r.time);
    if !r.constraint.is_active() {
        let fx = crate::control::ObsElement::zeros(r.grid, r.time);
        return Ok(vec![check_normal_cone(&r.constraint.set, &fx, None, vc.n_samples, seed, tol)]);
    }
    let result = solve_scenario(sc)?;
    let fx = r.constraint.observable.apply(&result.state);
    let mut rep = check_normal_cone(
        &r.constraint.set,
        &fx,
        result.multiplier.a.as_ref(),
        vc.n_samples,
        seed,
        tol,
    );
    let lambda = result.multiplier.lambda;
    let a_norm = result.multiplier.a.as_ref().map_or(0.0, |a| a.norm());
    rep.ge("multiplier lambda (lower)", lambda, 0.0);
    rep.le("multiplier lambda (upper)", lambda, 1.0);
    rep.le(
        "normalization defect |lambda^2 + |a|^2 - 1|",
        (lambda * lambda + a_norm * a_norm - 1.0).abs(),
        1e-8,
    );
    let mut out = vec![rep];

    if let Some(u_eps) = &result.eps_control {
        let opts = sc.config.optimize_options(r.time);
        let eps_final = opts.eps0 * 0.5f64.powi(opts.n_eps.saturating_sub(1) as i32);
        // J* is the tracking cost of the feasible solution the continuation
        // started from, which the optimizer returns as its final cost
        let eps_rep = check_epsilon_optimality(
            &r.base,
            &r.params,
            &r.rho0,
            &r.u0,
            &r.targets,
            &r.constraint,
            eps_final,
            result.cost.total,
            u_eps,
            vc.n_samples.min(12),
            seed,
            tol,
        )?;
        out.push(eps_rep);
    }
    Ok(out)
}

fn verify_spike(sc: &Scenario, seed: u64) -> Result<Vec<CertificateReport>> {
    let r = &sc.native;
    let vc = &sc.config.verify;
    let u = sc.zero_control();
    let dt = r.time.dt();
    let tau_index = ((vc.tau_fraction * r.time.n_steps as f64).round() as usize)
        .clamp(vc.spike_widths.iter().copied().max().unwrap_or(1), r.time.n_steps);
    let tau = tau_index as f64 * dt;
    let w = clamp_to_ball(expr_vector(r.grid, &vc.spike_w_u)?, u.radius);
    let spike = check_spike_convergence(
        &r.base, &r.params, &r.rho0, &r.u0, &u, tau, &w, &vc.spike_widths, 0.9,
    )?;
    let metric = check_ekeland_metric(&u, vc.n_samples.min(50), seed)?;
    Ok(vec![spike, metric])
}

fn verify_dependence(sc: &Scenario, seed: u64) -> Result<Vec<CertificateReport>> {
    let _ = seed;
    let r = &sc.native;
    let vc = &sc.config.verify;
    let u_ref = sc.zero_control();
    let delta_shape = clamp_to_ball(expr_vector(r.grid, &vc.dependence_delta_u)?, u_ref.radius);
    let mut deltas = Vec::new();
    for k in 0..4u32 {
        let mut d = ControlField::zeros(r.grid, r.time, u_ref.radius);
        let mut w = delta_shape.clone();
        w.scale(0.5f64.powi(k as i32));
        for v in d.values.iter_mut() {
            *v = w.clone();
        }
        deltas.push(d);
    }
    let fine = sc.refined(2, 2)?;
    let u_ref_f = ControlField::zeros(fine.grid, fine.time, u_ref.radius);
    let mut delta_f = ControlField::zeros(fine.grid, fine.time, u_ref.radius);
    let shape_f = clamp_to_ball(expr_vector(fine.grid, &vc.dependence_delta_u)?, u_ref.radius);
    for v in delta_f.values.iter_mut() {
        *v = shape_f.clone();
    }
    let mut cases = Vec::new();
    for (k, d) in deltas.iter().enumerate() {
        cases.push(DependenceCase {
            label: format!("scale 2^-{k}"),
            base: &r.base,
            params: &r.params,
            rho0: &r.rho0,
            u0: &r.u0,
            u_ref: &u_ref,
            delta: d,
        });
    }
    cases.push(DependenceCase {
        label: "refined grid".into(),
        base: &fine.base,
        params: &fine.params,
        rho0: &fine.rho0,
        u0: &fine.u0,
        u_ref: &u_ref_f,
        delta: &delta_f,
    });
    Ok(vec![check_continuous_dependence(&cases, 0.25)?])
}

fn verify_gradient(sc: &Scenario, seed: u64) -> Result<Vec<CertificateReport>> {
    let r = &sc.native;
    let vc = &sc.config.verify;
    let fine = sc.refined(2, 2)?;
    // expand about a nonzero control: the zero control can sit at a point
    // where seeded directions are discretely orthogonal to the gradient
    let mut u_c = sc.zero_control();
    let shape_c = clamp_to_ball(expr_vector(r.grid, &vc.spike_w_u)?, u_c.radius);
    for v in u_c.values.iter_mut() {
        *v = shape_c.clone();
    }
    let mut u_f = ControlField::zeros(fine.grid, fine.time, u_c.radius);
    let shape_f = clamp_to_ball(expr_vector(fine.grid, &vc.spike_w_u)?, u_c.radius);
    for v in u_f.values.iter_mut() {
        *v = shape_f.clone();
    }
    let coarse_case = GradientCase {
        base: &r.base,
        params: &r.params,
        rho0: &r.rho0,
        u0: &r.u0,
        targets: &r.targets,
        u: &u_c,
    };
    let fine_case = GradientCase {
        base: &fine.base,
        params: &fine.params,
        rho0: &fine.rho0,
        u0: &fine.u0,
        targets: &fine.targets,
        u: &u_f,
    };
    Ok(vec![check_gradient(&coarse_case, &fine_case, 5, seed, 1.3)?])
}

fn verify_lame(sc: &Scenario) -> Result<Vec<CertificateReport>> {
    let p = &sc.native.params;
    Ok(vec![check_lame(p.mu, p.lam, &sc.config.verify.lame_extents)?])
}

fn verify_energy(sc: &Scenario) -> Result<Vec<CertificateReport>> {
    let r = &sc.native;
    let fine = sc.config.realize(sc.config.grid.extent, sc.config.time.n_steps * 2)?;
    let tc = solve_linearized(&r.base, &[], &r.rho0, &r.u0, &r.params, r.time)?;
    let tf = solve_linearized(&fine.base, &[], &fine.rho0, &fine.u0, &fine.params, fine.time)?;
    let rc = energy_monitor(&tc, &r.base, &r.params, &[]);
    let rf = energy_monitor(&tf, &fine.base, &fine.params, &[]);
    Ok(vec![check_energy(&rc, &rf)])
}

pub const VERIFY_CHECKS: &[&str] =
    &["pontryagin", "cone", "spike", "dependence", "gradient", "lame", "energy"];

fn run_check(sc: &Scenario, name: &str, seed: u64) -> Result<Vec<CertificateReport>> {
    match name {
        "pontryagin" => verify_pontryagin(sc, seed),
        "cone" => verify_cone(sc, seed),
        "spike" => verify_spike(sc, seed),
        "dependence" => verify_dependence(sc, seed),
        "gradient" => verify_gradient(sc, seed),
        "lame" => verify_lame(sc),
        "energy" => verify_energy(sc),
        other => Err(Error::Config {
            key: "verify".into(),
            message: format!("unknown check '{other}' (expected one of {VERIFY_CHECKS:?} or all)"),
        }),
    }
}

/// Run the requested certificates (possibly in parallel), write the report
/// pair, and return overall pass/fail.
pub fn run_verify(
    sc: &Scenario,
    which: &str,
    out_dir: &Path,
    seed: u64,
    threads: usize,
) -> Result<bool> {
    ensure_out(out_dir)?;
    let names: Vec<&str> = if which == "all" {
        VERIFY_CHECKS.to_vec()
    } else {
        vec![which]
    };
    // validate names up front so a typo fails before any heavy solve
    for n in &names {
        if !VERIFY_CHECKS.contains(n) {
            return run_check(sc, n, seed).map(|_| unreachable!());
        }
    }
    let workers = if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    }
    .min(names.len())
    .max(1);

    let next = Mutex::new(0usize);
    let results: Mutex<Vec<(String, Result<Vec<CertificateReport>>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut g = next.lock().unwrap();
                    let i = *g;
                    *g += 1;
                    i
                };
                let Some(name) = names.get(i) else { break };
                let r = run_check(sc, name, seed);
                results.lock().unwrap().push((name.to_string(), r));
            });
        }
    });

    let mut collected = results.into_inner().unwrap();
    collected.sort_by(|a, b| a.0.cmp(&b.0));
    let mut reports = Vec::new();
    for (_, r) in collected {
        reports.extend(r?);
    }
    reports.sort_by(|a, b| a.name.cmp(&b.name));

    let mut m = manifest_for("verify", sc, seed, out_dir);
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| Error::SnapshotFormat(e.to_string()))?;
    std::fs::write(out_dir.join("report.json"), json)?;
    m.add_artifact("report.json")?;
    let mut text = String::new();
    let mut all_pass = true;
    for rep in &reports {
        let line = rep.summary_line();
        text.push_str(&line);
        text.push('\n');
        m.add_certificate_line(line);
        all_pass &= rep.pass;
    }
    std::fs::write(out_dir.join("report.txt"), &text)?;
    m.add_artifact("report.txt")?;
    m.write()?;
    Ok(all_pass)
}

/// Print the manifest and, when present, the certificate summary from a
/// previous run.
pub fn run_report(out_dir: &Path) -> Result<String> {
    let manifest = out_dir.join("manifest.txt");
    let mut out = std::fs::read_to_string(&manifest)
        .map_err(|_| Error::MissingFile(manifest.display().to_string()))?;
    let report = out_dir.join("report.txt");
    if let Ok(text) = std::fs::read_to_string(&report) {
        out.push_str("\n[summary]\n");
        out.push_str(&text);
    }
    Ok(out)
}
