//! Certificate checks: each one measures a defect of a claimed optimality or
//! stability property on computed solutions and compares it against an
//! explicit tolerance. Every report lists the measured values next to their
//! bounds so scheme error stays distinguishable from a genuine violation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adjoint::{AdjointMode, AdjointSources, AdjointTrajectory, reduced_gradient, solve_adjoint};
use crate::base::BaseState;
use crate::control::{
    ControlField, ObsElement, SetW, TrackingTargets, ekeland_distance, evaluate_cost,
    penalized_cost, project_to_ball, spike_variation,
};
use crate::error::{Error, Result};
use crate::field::{
    self, FluidParams, Grid, ScalarField, VectorField, deriv_axis, inner_vector,
    norm_l2_scalar, norm_l2_vector, second_deriv_axis,
};
use crate::forward::{EnergyReport, TimeGrid, energy, solve_linearized, step};

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckItem {
    pub label: String,
    pub value: f64,
    pub bound: f64,
    /// true: require value <= bound; false: require value >= bound
    pub upper: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CertificateReport {
    pub name: String,
    pub pass: bool,
    pub items: Vec<CheckItem>,
    pub notes: Vec<String>,
}

impl CertificateReport {
    pub fn new(name: &str) -> Self {
        CertificateReport { name: name.into(), pass: true, items: Vec::new(), notes: Vec::new() }
    }

    pub fn le(&mut self, label: impl Into<String>, value: f64, bound: f64) {
        let pass = value.is_finite() && value <= bound;
        self.pass &= pass;
        self.items.push(CheckItem { label: label.into(), value, bound, upper: true, pass });
    }

    pub fn ge(&mut self, label: impl Into<String>, value: f64, bound: f64) {
        let pass = value.is_finite() && value >= bound;
        self.pass &= pass;
        self.items.push(CheckItem { label: label.into(), value, bound, upper: false, pass });
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn summary_line(&self) -> String {
        let status = if self.pass { "PASS" } else { "FAIL" };
        let worst = self
            .items
            .iter()
            .filter(|i| !i.pass)
            .map(|i| format!(" [{}: {} vs {}]", i.label, i.value, i.bound))
            .collect::<String>();
        format!("{status} {}{worst}", self.name)
    }
}

/// Default certificate tolerance for scheme-limited checks.
pub fn default_tol(grid: &Grid, time: &TimeGrid) -> f64 {
    let dx = grid.min_spacing();
    (10.0 * (dx * dx + time.dt())).max(1e-8)
}

// ---------------------------------------------------------------------------
// Seeded sampling helpers
// ---------------------------------------------------------------------------

fn random_scalar(rng: &mut ChaCha8Rng, grid: Grid) -> ScalarField {
    let mut s = ScalarField::zeros(grid);
    for v in s.data.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    s
}

fn random_vector(rng: &mut ChaCha8Rng, grid: Grid) -> VectorField {
    let mut v = VectorField::zeros(grid);
    for c in v.comps.iter_mut() {
        for x in c.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
    }
    v
}

/// Random control with every time sample inside the radius-`R` ball.
pub fn random_ball_control(
    rng: &mut ChaCha8Rng,
    grid: Grid,
    time: TimeGrid,
    radius: f64,
) -> ControlField {
    let mut c = ControlField::zeros(grid, time, radius);
    for v in c.values.iter_mut() {
        let mut f = random_vector(rng, grid);
        let n = norm_l2_vector(&f);
        if n > 0.0 {
            let target = radius * rng.r#gen::<f64>();
            f.scale(target / n);
        }
        *v = f;
    }
    c
}

fn random_obs_element(rng: &mut ChaCha8Rng, grid: Grid, time: TimeGrid) -> ObsElement {
    let mut e = ObsElement::zeros(grid, time);
    for s in e.rho.iter_mut() {
        *s = random_scalar(rng, grid);
    }
    for v in e.u.iter_mut() {
        *v = random_vector(rng, grid);
    }
    e
}

// ---------------------------------------------------------------------------
// Pontryagin inequality
// ---------------------------------------------------------------------------

/// Hamiltonian-type functional
/// `Phi(W) = sum_n dt (lambda/2 ||W_n||^2 - <inv_rho xi_n, W_n>)`.
pub fn hamiltonian(
    w: &ControlField,
    adj: &AdjointTrajectory,
    base: &BaseState,
    lambda_mult: f64,
) -> f64 {
    let dt = w.time.dt();
    let mut phi = 0.0;
    for (n, sample) in w.values.iter().enumerate() {
        let scaled = adj.xi[n].mul_scalar_field(&base.inv_rho);
        let sq = inner_vector(sample, sample).expect("same grid");
        let cross = inner_vector(&scaled, sample).expect("same grid");
        phi += dt * (0.5 * lambda_mult * sq - cross);
    }
    phi
}

/// Closed-form minimizer of `Phi` over the admissible ball (per sample).
pub fn hamiltonian_minimizer(
    adj: &AdjointTrajectory,
    base: &BaseState,
    lambda_mult: f64,
    time: TimeGrid,
    radius: f64,
) -> ControlField {
    let mut w = ControlField::zeros(base.grid, time, radius);
    for (n, v) in w.values.iter_mut().enumerate() {
        let mut cand = adj.xi[n].mul_scalar_field(&base.inv_rho);
        cand.scale(1.0 / lambda_mult);
        *v = project_to_ball(&cand, radius);
    }
    w
}

pub fn check_pontryagin(
    control_star: &ControlField,
    adj: &AdjointTrajectory,
    base: &BaseState,
    lambda_mult: f64,
    n_samples: usize,
    seed: u64,
    tol: f64,
) -> Result<CertificateReport> {
    if lambda_mult <= 0.0 {
        return Err(Error::DegenerateMultiplier(lambda_mult));
    }
    let mut rep = CertificateReport::new("pontryagin");
    let phi_star = hamiltonian(control_star, adj, base, lambda_mult);
    let w_dag =
        hamiltonian_minimizer(adj, base, lambda_mult, control_star.time, control_star.radius);
    let phi_dag = hamiltonian(&w_dag, adj, base, lambda_mult);
    rep.le("gap to analytic minimizer", phi_star - phi_dag, tol);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_idx = 0usize;
    let mut sanity = f64::NEG_INFINITY;
    for i in 0..n_samples {
        let w = random_ball_control(&mut rng, base.grid, control_star.time, control_star.radius);
        let phi_w = hamiltonian(&w, adj, base, lambda_mult);
        let gap = phi_star - phi_w;
        if gap > worst_gap {
            worst_gap = gap;
            worst_idx = i;
        }
        sanity = sanity.max(phi_dag - phi_w);
    }
    rep.le(format!("worst sampled gap (sample {worst_idx} of {n_samples})"), worst_gap, tol);
    rep.le(
        "analytic minimizer beats all samples",
        sanity,
        1e-12 * (1.0 + phi_star.abs()),
    );
    rep.note(format!("Phi at candidate optimum: {phi_star:.6e}"));
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Normal cone
// ---------------------------------------------------------------------------

pub fn check_normal_cone(
    set: &SetW,
    fx_opt: &ObsElement,
    a: Option<&ObsElement>,
    n_samples: usize,
    seed: u64,
    tol: f64,
) -> CertificateReport {
    let mut rep = CertificateReport::new("cone");
    let a = match a {
        Some(a) if a.norm() > 0.0 => a,
        _ => {
            rep.le("inactive multiplier, all pairings", 0.0, tol);
            return rep;
        }
    };
    let grid = fx_opt.rho[0].grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_idx = 0usize;
    for i in 0..n_samples {
        let dir = random_obs_element(&mut rng, grid, fx_opt.time);
        // mix interior and boundary points of W
        let t = if i % 4 == 0 { 1.0 } else { rng.r#gen::<f64>() };
        let w = set.sample(fx_opt, &dir, t);
        let mut d = w;
        d.axpy(-1.0, fx_opt);
        let pairing = a.inner(&d);
        if pairing > worst {
            worst = pairing;
            worst_idx = i;
        }
    }
    rep.le(
        format!("worst pairing <a, w - F(x*)> (sample {worst_idx} of {n_samples})"),
        worst,
        tol,
    );
    rep
}

/// Numeric analog of the epsilon-optimality property of the penalized
/// functional: spike candidates may undercut the incumbent value by at most
/// `sqrt(eps) * d_E`.
#[allow(clippy::too_many_arguments)]
pub fn check_epsilon_optimality(
    base: &BaseState,
    params: &FluidParams,
    rho0: &ScalarField,
    u0: &VectorField,
    targets: &TrackingTargets,
    constraint: &crate::control::ConstraintSpec,
    eps: f64,
    j_star: f64,
    incumbent: &ControlField,
    n_spikes: usize,
    seed: u64,
    tol: f64,
) -> Result<CertificateReport> {
    let mut rep = CertificateReport::new("epsilon-optimality");
    let j_eps_of = |u: &ControlField| -> Result<f64> {
        let traj = solve_linearized(base, &u.values, rho0, u0, params, u.time)?;
        let j = evaluate_cost(&traj, u, targets)?.total;
        let fx = constraint.observable.apply(&traj);
        Ok(penalized_cost(j, &fx, &constraint.set, eps, j_star).j_eps)
    };
    let j_inc = j_eps_of(incumbent)?;
    let dt = incumbent.time.dt();
    let n_steps = incumbent.time.n_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..n_spikes {
        let tau_idx = rng.gen_range(1..=n_steps);
        let k = rng.gen_range(1..=tau_idx.min(8));
        let mut w = random_vector(&mut rng, base.grid);
        let n = norm_l2_vector(&w);
        if n > 0.0 {
            w.scale(incumbent.radius * rng.r#gen::<f64>() / n);
        }
        let cand = spike_variation(incumbent, tau_idx as f64 * dt, k as f64 * dt, &w)?;
        let d_e = ekeland_distance(&cand, incumbent);
        let j_cand = j_eps_of(&cand)?;
        worst = worst.max(j_inc - eps.sqrt() * d_e - j_cand);
    }
    rep.le(format!("worst undercut over {n_spikes} spike candidates"), worst, tol);
    rep.note(format!("J_eps at incumbent: {j_inc:.6e}, eps: {eps:.3e}"));
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Spike variations and the sensitivity limit system
// ---------------------------------------------------------------------------

/// Limit system solution for a spike at sample `tau_index`: zero before the
/// spike time, then the homogeneous linearized evolution of the impulsive
/// data `(0, inv_rho (W - U(tau^-)))`.
#[derive(Debug, Clone)]
pub struct SensitivityPair {
    pub tau_index: usize,
    pub z: Vec<ScalarField>,
    pub v: Vec<VectorField>,
}

pub fn solve_sensitivity(
    base: &BaseState,
    params: &FluidParams,
    time: TimeGrid,
    tau_index: usize,
    w_value: &VectorField,
    u: &ControlField,
) -> Result<SensitivityPair> {
    if tau_index == 0 || tau_index > time.n_steps {
        return Err(Error::MisalignedSpike(format!(
            "sensitivity spike index {tau_index} outside (0, {}]",
            time.n_steps
        )));
    }
    let g = base.grid;
    let mut z = vec![ScalarField::zeros(g); time.n_steps + 1];
    let mut v = vec![VectorField::zeros(g); time.n_steps + 1];
    // impulsive data uses the control sample left of tau
    let mut v0 = w_value.clone();
    v0.axpy(-1.0, &u.values[tau_index - 1]);
    v0 = v0.mul_scalar_field(&base.inv_rho);
    v0.zero_boundary();
    v[tau_index] = v0;
    let dt = time.dt();
    for n in tau_index..time.n_steps {
        let (zn, vn) = step(base, params, dt, &z[n], &v[n], None)?;
        z[n + 1] = zn;
        v[n + 1] = vn;
    }
    Ok(SensitivityPair { tau_index, z, v })
}

#[allow(clippy::too_many_arguments)]
pub fn check_spike_convergence(
    base: &BaseState,
    params: &FluidParams,
    rho0: &ScalarField,
    u0: &VectorField,
    u: &ControlField,
    tau: f64,
    w_value: &VectorField,
    h_steps: &[usize],
    slope_min: f64,
) -> Result<CertificateReport> {
    let mut rep = CertificateReport::new("spike");
    let time = u.time;
    let dt = time.dt();
    let tau_index = (tau / dt).round() as usize;
    let baseline = solve_linearized(base, &u.values, rho0, u0, params, time)?;
    let sens = solve_sensitivity(base, params, time, tau_index, w_value, u)?;

    let mut e_of_h = Vec::with_capacity(h_steps.len());
    let mut pre_spike = 0.0f64;
    for &k in h_steps {
        let h = k as f64 * dt;
        let spiked = spike_variation(u, tau, h, w_value)?;
        let traj = solve_linearized(base, &spiked.values, rho0, u0, params, time)?;
        let mut e = 0.0f64;
        for n in 0..=time.n_steps {
            let mut dr = traj.rho[n].clone();
            dr.axpy(-1.0, &baseline.rho[n]);
            let mut du = traj.u[n].clone();
            du.axpy(-1.0, &baseline.u[n]);
            if n + k <= tau_index {
                // controls coincide up to here, so the trajectories must too
                pre_spike = pre_spike
                    .max(field::linf_norm(&dr.data))
                    .max(field::linf_norm_vector(&du));
            }
            if n >= tau_index {
                dr.scale(1.0 / h);
                dr.axpy(-1.0, &sens.z[n]);
                du.scale(1.0 / h);
                du.axpy(-1.0, &sens.v[n]);
                let nr = norm_l2_scalar(&dr);
                let nu = norm_l2_vector(&du);
                e = e.max((nr * nr + nu * nu).sqrt());
            }
        }
        e_of_h.push((h, e));
        rep.note(format!("e({h:.6e}) = {e:.6e}"));
    }
    rep.le("state difference before the spike", pre_spike, 0.0);

    // monotone decrease as h decreases (tiny relative slack for roundoff)
    let mut max_increase = f64::NEG_INFINITY;
    for w in e_of_h.windows(2) {
        max_increase = max_increase.max(w[1].1 - w[0].1 * (1.0 + 1e-12));
    }
    rep.le("monotonicity defect", max_increase.max(0.0), 0.0);

    // least-squares log-log slope over the nonzero entries; a vanishing
    // e(h) is the exact limit and carries no rate information
    let pts: Vec<(f64, f64)> =
        e_of_h.iter().filter(|(_, e)| *e > 0.0).map(|&(h, e)| (h.ln(), e.ln())).collect();
    if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        rep.ge("log-log convergence slope", slope, slope_min);
    } else {
        rep.note("fewer than two nonzero e(h) values: quotient hit the limit exactly");
        rep.ge("log-log convergence slope", f64::INFINITY, slope_min);
    }
    Ok(rep)
}

pub fn check_ekeland_metric(
    u: &ControlField,
    n_spikes: usize,
    seed: u64,
) -> Result<CertificateReport> {
    let mut rep = CertificateReport::new("ekeland-metric");
    let grid = u.values[0].grid;
    let dt = u.time.dt();
    let n_steps = u.time.n_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut metric_defect = 0.0f64;
    let mut norm_margin = f64::NEG_INFINITY;
    for _ in 0..n_spikes {
        let tau_idx = rng.gen_range(1..=n_steps);
        let k = rng.gen_range(1..=tau_idx);
        let mut w = random_vector(&mut rng, grid);
        let n = norm_l2_vector(&w);
        if n > 0.0 {
            w.scale(u.radius * rng.r#gen::<f64>() / n);
        }
        let spiked = spike_variation(u, tau_idx as f64 * dt, k as f64 * dt, &w)?;
        let d_e = ekeland_distance(&spiked, u);
        metric_defect = metric_defect.max((d_e - k as f64 * dt).abs());
        let mut diff = spiked.clone();
        diff.axpy(-1.0, u);
        norm_margin = norm_margin.max(diff.norm_l2l2() - 2.0 * u.radius * d_e.sqrt());
    }
    rep.le("d_E versus exact spike width", metric_defect, 0.0);
    rep.le("L2L2 distance minus 2 R sqrt(d_E)", norm_margin, 0.0);
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Continuous dependence
// ---------------------------------------------------------------------------

pub struct DependenceCase<'a> {
    pub label: String,
    pub base: &'a BaseState,
    pub params: &'a FluidParams,
    pub rho0: &'a ScalarField,
    pub u0: &'a VectorField,
    pub u_ref: &'a ControlField,
    pub delta: &'a ControlField,
}

/// `sup_t E(state difference) / ||delta U||^2_{L2L2}` for one perturbation.
pub fn dependence_ratio(case: &DependenceCase) -> Result<f64> {
    let t1 = solve_linearized(
        case.base,
        &case.u_ref.values,
        case.rho0,
        case.u0,
        case.params,
        case.u_ref.time,
    )?;
    let mut pert = case.u_ref.clone();
    pert.axpy(1.0, case.delta);
    let t2 = solve_linearized(
        case.base,
        &pert.values,
        case.rho0,
        case.u0,
        case.params,
        pert.time,
    )?;
    let denom = {
        let n = case.delta.norm_l2l2();
        n * n
    };
    if denom == 0.0 {
        return Err(Error::GridMismatch("zero perturbation has no ratio".into()));
    }
    let mut sup = 0.0f64;
    for n in 0..=case.u_ref.time.n_steps {
        let mut dr = t2.rho[n].clone();
        dr.axpy(-1.0, &t1.rho[n]);
        let mut du = t2.u[n].clone();
        du.axpy(-1.0, &t1.u[n]);
        sup = sup.max(energy(&dr, &du, case.params));
    }
    Ok(sup / denom)
}

pub fn check_continuous_dependence(
    cases: &[DependenceCase],
    variation_tol: f64,
) -> Result<CertificateReport> {
    let mut rep = CertificateReport::new("dependence");
    let mut ratios = Vec::with_capacity(cases.len());
    for case in cases {
        let r = dependence_ratio(case)?;
        rep.note(format!("ratio ({}): {r:.6e}", case.label));
        ratios.push(r);
    }
    let max = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    rep.ge("smallest ratio (positivity)", min, 0.0);
    rep.le("relative variation across cases", (max - min) / max.max(1e-300), variation_tol);
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Gradient consistency
// ---------------------------------------------------------------------------

pub struct GradientCase<'a> {
    pub base: &'a BaseState,
    pub params: &'a FluidParams,
    pub rho0: &'a ScalarField,
    pub u0: &'a VectorField,
    pub targets: &'a TrackingTargets,
    pub u: &'a ControlField,
}

/// Seeded low-mode directions defined by analytic expressions, so the same
/// seed produces the same underlying function at every resolution.
pub fn seeded_directions(
    grid: Grid,
    time: TimeGrid,
    radius: f64,
    n_dirs: usize,
    seed: u64,
) -> Vec<ControlField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_dirs);
    let pi = std::f64::consts::PI;
    for _ in 0..n_dirs {
        // draw all parameters before touching the grid: resolution-independent
        let mut modes = Vec::new();
        for _ in 0..grid.dim {
            let mut ks = Vec::new();
            for _ in 0..grid.dim {
                ks.push(rng.gen_range(1..=4) as f64);
            }
            let amp: f64 = rng.gen_range(0.2..1.0);
            modes.push((ks, amp));
        }
        let a: f64 = rng.gen_range(-1.0..1.0);
        let b: f64 = rng.gen_range(-1.0..1.0);
        let mut d = ControlField::zeros(grid, time, radius);
        let dt = time.dt();
        for (n, v) in d.values.iter_mut().enumerate() {
            let t = n as f64 * dt;
            *v = VectorField::from_fns(grid, |c, p| {
                let (ks, amp) = &modes[c];
                let mut s = *amp * (a + b * t);
                for (axis, k) in ks.iter().enumerate() {
                    s *= (k * pi * p[axis]).sin();
                }
                s
            });
        }
        out.push(d);
    }
    out
}

/// Max relative error between central finite differences of the discrete
/// cost and the adjoint-based directional derivative.
pub fn gradient_rel_errors(
    case: &GradientCase,
    mode: AdjointMode,
    dirs: &[ControlField],
    fd_step: f64,
) -> Result<Vec<f64>> {
    let cost = |u: &ControlField| -> Result<f64> {
        let traj =
            solve_linearized(case.base, &u.values, case.rho0, case.u0, case.params, u.time)?;
        Ok(evaluate_cost(&traj, u, case.targets)?.total)
    };
    let traj = solve_linearized(
        case.base,
        &case.u.values,
        case.rho0,
        case.u0,
        case.params,
        case.u.time,
    )?;
    let srcs = AdjointSources::tracking(1.0, case.targets);
    let adj = solve_adjoint(case.base, &traj, &srcs, case.params, mode)?;
    let grad = reduced_gradient(case.u, &adj, case.base, 1.0)?;
    let mut errs = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let mut up = case.u.clone();
        up.axpy(fd_step, dir);
        let mut dn = case.u.clone();
        dn.axpy(-fd_step, dir);
        let fd = (cost(&up)? - cost(&dn)?) / (2.0 * fd_step);
        let pred = grad.inner(dir);
        // scale by Cauchy-Schwarz: directions (nearly) orthogonal to the
        // gradient would otherwise divide roundoff by roundoff
        let scale = (grad.norm_l2l2() * dir.norm_l2l2()).max(1e-300);
        errs.push((fd - pred).abs() / fd.abs().max(scale));
    }
    Ok(errs)
}

pub fn check_gradient(
    coarse: &GradientCase,
    fine: &GradientCase,
    n_dirs: usize,
    seed: u64,
    factor_min: f64,
) -> Result<CertificateReport> {
    let mut rep = CertificateReport::new("gradient");
    let fd_step = 1e-3;
    let dirs_c =
        seeded_directions(coarse.base.grid, coarse.u.time, coarse.u.radius, n_dirs, seed);
    let dirs_f = seeded_directions(fine.base.grid, fine.u.time, fine.u.radius, n_dirs, seed);
    let e_coarse = gradient_rel_errors(coarse, AdjointMode::Continuous, &dirs_c, fd_step)?
        .into_iter()
        .fold(0.0f64, f64::max);
    let e_fine = gradient_rel_errors(fine, AdjointMode::Continuous, &dirs_f, fd_step)?
        .into_iter()
        .fold(0.0f64, f64::max);
    let e_exact = gradient_rel_errors(coarse, AdjointMode::DiscreteExact, &dirs_c, fd_step)?
        .into_iter()
        .fold(0.0f64, f64::max);
    // the continuous-mode gradient is first-order accurate, so the bound
    // must track the resolution of the coarse case
    let g = coarse.base.grid;
    let dx = (0..g.dim).fold(0.0f64, |m, a| m.max(g.spacing[a]));
    let tol_cont = 1e-2f64.max(2.0 * (dx + coarse.u.time.dt()));
    rep.le("continuous-mode max relative error", e_coarse, tol_cont);
    if e_coarse == 0.0 && e_fine == 0.0 {
        // identically zero gradient (e.g. zero targets at zero control):
        // both modes hit the limit exactly and there is nothing to refine
        rep.le("refinement on an exactly zero gradient", 0.0, 0.0);
    } else {
        rep.ge("refinement improvement factor", e_coarse / e_fine.max(1e-300), factor_min);
    }
    rep.le("exact-transpose max relative error", e_exact, 1e-8);
    rep.note(format!("errors: coarse {e_coarse:.3e}, fine {e_fine:.3e}, exact {e_exact:.3e}"));
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Lame regularity
// ---------------------------------------------------------------------------

/// Solve `-mu lap u - (mu+lam) grad div u = f` with zero boundary data by
/// conjugate gradients (the compact interior stencil is symmetric).
pub fn lame_solve(grid: Grid, params: &FluidParams, f: &VectorField) -> Result<VectorField> {
    let apply = |v: &VectorField| -> VectorField {
        let mut out = field::stress_div_noslip(v, params);
        out.scale(-1.0);
        out
    };
    let dot = |a: &VectorField, b: &VectorField| -> f64 {
        let mut s = 0.0;
        for c in 0..grid.dim {
            for i in 0..grid.n_points() {
                s += a.comps[c][i] * b.comps[c][i];
            }
        }
        s
    };
    let mut rhs = f.clone();
    rhs.zero_boundary();
    let rhs_norm = dot(&rhs, &rhs).sqrt();
    let mut x = VectorField::zeros(grid);
    if rhs_norm == 0.0 {
        return Ok(x);
    }
    let mut r = rhs;
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let tol2 = (1e-11 * rhs_norm) * (1e-11 * rhs_norm);
    let max_iter = 40 * grid.n_points();
    for _ in 0..max_iter {
        if rr <= tol2 {
            return Ok(x);
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolveDiverged { residual: rr.sqrt(), iterations: 0 });
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        let mut p_new = r.clone();
        p_new.axpy(beta, &p);
        p = p_new;
    }
    if rr <= tol2 {
        Ok(x)
    } else {
        Err(Error::LinearSolveDiverged { residual: rr.sqrt(), iterations: max_iter })
    }
}

/// Discrete H2 norm: L2 of the field, its gradient, and all second
/// derivatives (pure via compact stencils, mixed via repeated first
/// differences).
pub fn h2_norm(u: &VectorField) -> f64 {
    let g = u.grid;
    let w = g.node_weights();
    let mut total = 0.0;
    for c in 0..g.dim {
        for i in 0..g.n_points() {
            total += w[i] * u.comps[c][i] * u.comps[c][i];
        }
        let mut firsts = Vec::new();
        for a in 0..g.dim {
            let da = deriv_axis(&g, &u.comps[c], a);
            for (i, &wi) in w.iter().enumerate() {
                total += wi * da[i] * da[i];
            }
            firsts.push(da);
        }
        for a in 0..g.dim {
            for b in 0..g.dim {
                let dd = if a == b {
                    second_deriv_axis(&g, &u.comps[c], a)
                } else {
                    deriv_axis(&g, &firsts[a], b)
                };
                for (i, &wi) in w.iter().enumerate() {
                    total += wi * dd[i] * dd[i];
                }
            }
        }
    }
    total.sqrt()
}

pub fn check_lame(mu: f64, lam: f64, extents: &[usize]) -> Result<CertificateReport> {
    let params = FluidParams::from_lame(mu, lam)?;
    let mut rep = CertificateReport::new("lame");
    let pi = std::f64::consts::PI;
    let exact = |c: usize, p: [f64; 3]| {
        let _ = c;
        (pi * p[0]).sin() * (pi * p[1]).sin()
    };
    // forcing back-computed from the manufactured displacement
    let forcing = |c: usize, p: [f64; 3]| {
        let (x, y) = (p[0], p[1]);
        let lap = -2.0 * pi * pi * (pi * x).sin() * (pi * y).sin();
        let grad_div = if c == 0 {
            -pi * pi * (pi * x).sin() * (pi * y).sin() + pi * pi * (pi * x).cos() * (pi * y).cos()
        } else {
            pi * pi * (pi * x).cos() * (pi * y).cos() - pi * pi * (pi * x).sin() * (pi * y).sin()
        };
        -mu * lap - (mu + lam) * grad_div
    };

    let mut ratios = Vec::new();
    let mut errors = Vec::new();
    for &n in extents {
        let grid = Grid::unit_box(2, n)?;
        let f = VectorField::from_fns(grid, forcing);
        let u = lame_solve(grid, &params, &f)?;
        let ratio = h2_norm(&u) / norm_l2_vector(&f);
        ratios.push(ratio);
        let mut err = u.clone();
        err.axpy(-1.0, &VectorField::from_fns(grid, exact));
        let e = norm_l2_vector(&err);
        errors.push(e);
        rep.note(format!("n = {n}: H2/L2 ratio {ratio:.6e}, manufactured error {e:.6e}"));
    }
    let rmax = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rmin = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    rep.le("H2/L2 ratio variation across refinements", (rmax - rmin) / rmax, 0.2);
    if errors.len() >= 2 {
        let k = errors.len();
        let order = (errors[k - 2] / errors[k - 1]).log2();
        rep.ge("manufactured-solution convergence order", order, 1.9);
    }
    // zero forcing must give the zero displacement
    let grid = Grid::unit_box(2, extents[0])?;
    let zero = lame_solve(grid, &params, &VectorField::zeros(grid))?;
    rep.le("response to zero forcing", field::linf_norm_vector(&zero), 0.0);
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Energy certificates
// ---------------------------------------------------------------------------

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `coarse` and `fine` must describe the same scenario with the time step
/// halved in `fine`.
pub fn check_energy(coarse: &EnergyReport, fine: &EnergyReport) -> CertificateReport {
    let mut rep = CertificateReport::new("energy");
    let rc = max_abs(&coarse.identity_residual);
    let rf = max_abs(&fine.identity_residual);
    let ratio = rc / rf.max(1e-300);
    if rc == 0.0 && rf == 0.0 {
        rep.le("identity residual (identically zero)", 0.0, 0.0);
    } else {
        rep.ge("residual halving ratio (lower)", ratio, 1.6);
        rep.le("residual halving ratio (upper)", ratio, 2.4);
    }
    for (label, report) in [("coarse", coarse), ("fine", fine)] {
        let mut margin = f64::NEG_INFINITY;
        for (e, b) in report.e.iter().zip(&report.groenwall_bound) {
            margin = margin.max(e - b);
        }
        rep.le(format!("energy minus ceiling ({label})"), margin, 0.0);
    }
    rep.note(format!("max identity residuals: coarse {rc:.6e}, fine {rf:.6e}"));
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{BaseFamily, PressureLaw};
    use crate::control::ConstraintSpec;
    use crate::forward::{energy_monitor, zero_state};
    use crate::opt::{OptimizeOptions, optimize};
    use std::f64::consts::PI;

    fn rest_base(n: usize) -> (BaseState, FluidParams) {
        let params = FluidParams::new(0.3, 0.2).unwrap();
        let g = Grid::unit_box(1, n).unwrap();
        let base = BaseFamily::Rest { density: 1.0 }
            .manufacture(g, PressureLaw::linear(), &params)
            .unwrap();
        (base, params)
    }

    #[test]
    fn pontryagin_trivial_zero_case_is_equality() {
        let (base, params) = rest_base(17);
        let time = TimeGrid::new(0.1, 16).unwrap();
        let (r0, u0) = zero_state(base.grid);
        let traj = solve_linearized(&base, &[], &r0, &u0, &params, time).unwrap();
        let targets = TrackingTargets::zero(base.grid);
        let adj = solve_adjoint(
            &base,
            &traj,
            &AdjointSources::tracking(1.0, &targets),
            &params,
            AdjointMode::DiscreteExact,
        )
        .unwrap();
        let u = ControlField::zeros(base.grid, time, 1.0);
        let rep = check_pontryagin(&u, &adj, &base, 1.0, 20, 7, 1e-8).unwrap();
        assert!(rep.pass, "{}", rep.summary_line());
        assert_eq!(hamiltonian(&u, &adj, &base, 1.0), 0.0);
    }

    #[test]
    fn pontryagin_holds_at_converged_optimum() {
        let (base, params) = rest_base(17);
        let time = TimeGrid::new(0.25, 32).unwrap();
        let (r0, u0) = zero_state(base.grid);
        let targets = TrackingTargets::steady(
            ScalarField::zeros(base.grid),
            VectorField::from_fns(base.grid, |_, p| 0.3 * (PI * p[0]).sin()),
        );
        let opts = OptimizeOptions::new(time, 50.0);
        let res = optimize(
            &base,
            &params,
            &r0,
            &u0,
            &targets,
            &ConstraintSpec::inactive(),
            &opts,
        )
        .unwrap();
        let phi = hamiltonian(&res.control, &res.adjoint, &base, 1.0);
        let tol = 1e-8 * phi.abs().max(1.0);
        let rep =
            check_pontryagin(&res.control, &res.adjoint, &base, 1.0, 100, 11, tol).unwrap();
        assert!(rep.pass, "{}", rep.summary_line());
    }

    #[test]
    fn degenerate_multiplier_is_an_error() {
        let (base, params) = rest_base(9);
        let time = TimeGrid::new(0.1, 8).unwrap();
        let (r0, u0) = zero_state(base.grid);
        let traj = solve_linearized(&base, &[], &r0, &u0, &params, time).unwrap();
        let targets = TrackingTargets::zero(base.grid);
        let adj = solve_adjoint(
            &base,
            &traj,
            &AdjointSources::tracking(1.0, &targets),
            &params,
            AdjointMode::DiscreteExact,
        )
        .unwrap();
        let u = ControlField::zeros(base.grid, time, 1.0);
        let err = check_pontryagin(&u, &adj, &base, 0.0, 5, 1, 1e-8).unwrap_err();
        assert!(matches!(err, Error::DegenerateMultiplier(_)));
    }

    #[test]
    fn normal_cone_detects_good_and_bad_multipliers() {
        let g = Grid::unit_box(1, 9).unwrap();
        let time = TimeGrid::new(0.1, 8).unwrap();
        let center = ObsElement::zeros(g, time);
        let set = SetW::Ball { center: center.clone(), radius: 1.0 };
        // point on the boundary along a single mode
        let mut fx = ObsElement::zeros(g, time);
        for s in fx.rho.iter_mut() {
            *s = ScalarField::from_fn(g, |p| (PI * p[0]).sin());
        }
        let n = fx.norm();
        fx.scale(1.0 / n);
        // outward normal at fx is fx - center = fx
        let rep = check_normal_cone(&set, &fx, Some(&fx), 100, 3, 1e-6);
        assert!(rep.pass, "{}", rep.summary_line());
        let mut inward = fx.clone();
        inward.scale(-1.0);
        let rep_bad = check_normal_cone(&set, &fx, Some(&inward), 100, 3, 1e-6);
        assert!(!rep_bad.pass, "inward multiplier must fail");
    }

    #[test]
    fn sensitivity_is_zero_for_matching_spike_and_linear_in_w() {
        let (base, params) = rest_base(17);
        let time = TimeGrid::new(0.2, 32).unwrap();
        let mut u = ControlField::zeros(base.grid, time, 10.0);
        for v in u.values.iter_mut() {
            *v = VectorField::from_fns(base.grid, |_, p| 0.2 * (PI * p[0]).sin());
        }
        let tau_index = 16;
        let w_same = u.values[tau_index - 1].clone();
        let s0 = solve_sensitivity(&base, &params, time, tau_index, &w_same, &u).unwrap();
        for n in 0..=time.n_steps {
            assert_eq!(field::linf_norm(&s0.z[n].data), 0.0);
            assert_eq!(field::linf_norm_vector(&s0.v[n]), 0.0);
        }
        let w1 = VectorField::from_fns(base.grid, |_, p| (2.0 * PI * p[0]).sin());
        let mut w2 = w1.clone();
        w2.scale(3.0);
        w2.axpy(2.0, &u.values[tau_index - 1]);
        // w2 - u = 3 (w1 - u) + ... check linearity of the map w - u -> v
        let sa = solve_sensitivity(&base, &params, time, tau_index, &w1, &u).unwrap();
        let mut w3 = u.values[tau_index - 1].clone();
        w3.axpy(3.0, &w1);
        w3.axpy(-3.0, &u.values[tau_index - 1]);
        let sb = solve_sensitivity(&base, &params, time, tau_index, &w3, &u).unwrap();
        for n in tau_index..=time.n_steps {
            let mut d = sb.v[n].clone();
            let mut scaled = sa.v[n].clone();
            scaled.scale(3.0);
            d.axpy(-1.0, &scaled);
            assert!(field::linf_norm_vector(&d) < 1e-12, "nonlinear at {n}");
        }
    }

    #[test]
    fn spike_convergence_smoke() {
        let (base, params) = rest_base(17);
        let time = TimeGrid::new(0.25, 128).unwrap();
        let (r0, u0) = zero_state(base.grid);
        let u = ControlField::zeros(base.grid, time, 1.0);
        let w = VectorField::from_fns(base.grid, |_, p| 0.3 * (PI * p[0]).sin());
        let tau = 0.125;
        let rep = check_spike_convergence(
            &base,
            &params,
            &r0,
            &u0,
            &u,
            tau,
            &w,
            &[8, 4, 2, 1],
            0.8,
        )
        .unwrap();
        assert!(rep.pass, "{}", rep.summary_line());
    }

    #[test]
    fn ekeland_metric_identities() {
        let g = Grid::unit_box(1, 17).unwrap();
        let time = TimeGrid::new(0.5, 64).unwrap();
        let u = ControlField::zeros(g, time, 2.0);
        let rep = check_ekeland_metric(&u, 20, 42).unwrap();
        assert!(rep.pass, "{}", rep.summary_line());
    }

    #[test]
    fn dependence_ratio_invariant_under_scaling() {
        let (base, params) = rest_base(17);
        let time = TimeGrid::new(0.2, 32).unwrap();
        let (r0, u0) = zero_state(base.grid);
        let u_ref = ControlField::zeros(base.grid, time, 10.0);
        let mut delta = ControlField::zeros(base.grid, time, 10.0);
        for (n, v) in delta.values.iter_mut().enumerate() {
            *v = VectorField::from_fns(base.grid, |_, p| {
                (PI * p[0]).sin() * (1.0 + 0.3 * (n as f64 * 0.1).cos())
            });
        }
        let mut half = delta.clone();
        half.scale(0.5);
        let cases = [
            DependenceCase {
                label: "scale 1".into(),
                base: &base,
                params: &params,
                rho0: &r0,
                u0: &u0,
                u_ref: &u_ref,
                delta: &delta,
            },
            DependenceCase {
                label: "scale 1/2".into(),
                base: &base,
                params: &params,
                rho0: &r0,
                u0: &u0,
                u_ref: &u_ref,
                delta: &half,
            },
        ];
        let rep = check_continuous_dependence(&cases, 1e-10).unwrap();
        assert!(rep.pass, "{}", rep.summary_line());
    }

    #[test]
    fn gradient_certificate_smoke() {
        let params = FluidParams::new(0.3, 0.2).unwrap();
        let gc = Grid::unit_box(1, 33).unwrap();
        let gf = Grid::unit_box(1, 65).unwrap();
        let base_c = BaseFamily::Rest { density: 1.0 }
            .manufacture(gc, PressureLaw::linear(), &params)
            .unwrap();
        let base_f = BaseFamily::Rest { density: 1.0 }
            .manufacture(gf, PressureLaw::linear(), &params)
            .unwrap();
        let tc = TimeGrid::new(0.2, 64).unwrap();
        let tf = TimeGrid::new(0.2, 128).unwrap();
        let (r0c, u0c) = zero_state(gc);
        let (r0f, u0f) = zero_state(gf);
        let tgt_c = TrackingTargets::steady(
            ScalarField::from_fn(gc, |p| 0.2 * (PI * p[0]).cos()),
            VectorField::from_fns(gc, |_, p| 0.3 * (PI * p[0]).sin()),
        );
        let tgt_f = TrackingTargets::steady(
            ScalarField::from_fn(gf, |p| 0.2 * (PI * p[0]).cos()),
            VectorField::from_fns(gf, |_, p| 0.3 * (PI * p[0]).sin()),
        );
        let mut uc = ControlField::zeros(gc, tc, 10.0);
        for v in uc.values.iter_mut() {
            *v = VectorField::from_fns(gc, |_, p| (PI * p[0]).sin());
        }
        let mut uf = ControlField::zeros(gf, tf, 10.0);
        for v in uf.values.iter_mut() {
            *v = VectorField::from_fns(gf, |_, p| (PI * p[0]).sin());
        }
        let coarse = GradientCase {
            base: &base_c,
            params: &params,
            rho0: &r0c,
            u0: &u0c,
            targets: &tgt_c,
            u: &uc,
        };
        let fine = GradientCase {
            base: &base_f,
            params: &params,
            rho0: &r0f,
            u0: &u0f,
            targets: &tgt_f,
            u: &uf,
        };
        let rep = check_gradient(&coarse, &fine, 3, 5, 1.3).unwrap();
        assert!(rep.pass, "{}", rep.summary_line());
    }

    #[test]
    fn lame_certificate_and_parameter_guard() {
        let rep = check_lame(1.0, -0.5, &[17, 33, 65]).unwrap();
        assert!(rep.pass, "{}", rep.summary_line());
        let err = check_lame(1.0, -2.0, &[9]).unwrap_err();
        assert!(matches!(err, Error::ParameterViolation(_)));
    }

    #[test]
    fn energy_certificate_on_well_prepared_data() {
        let (base, params) = rest_base(65);
        let g = base.grid;
        let r0 = ScalarField::from_fn(g, |p| 0.3 * (PI * p[0]).cos());
        let u0 = VectorField::from_fns(g, |_, p| 0.2 * (PI * p[0]).sin());
        let run = |steps: usize| {
            let time = TimeGrid::new(0.05, steps).unwrap();
            let traj = solve_linearized(&base, &[], &r0, &u0, &params, time).unwrap();
            energy_monitor(&traj, &base, &params, &[])
        };
        let rep = check_energy(&run(64), &run(128));
        assert!(rep.pass, "{}", rep.summary_line());
    }
}
