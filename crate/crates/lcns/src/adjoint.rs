//! Backward-in-time adjoint solves.
//!
//! Two modes are provided:
//!
//! * `Continuous` discretizes the adjoint PDE system directly (time-mirrored
//!   upwinding, implicit viscous operator). Its reduced gradient differs from
//!   the true discrete cost gradient by the scheme truncation error.
//! * `DiscreteExact` propagates the exact weighted transpose of the forward
//!   step Jacobian, so the reduced gradient matches central finite
//!   differences of the discrete cost to machine precision.
//!
//! Both store `(sigma_n, xi_n)` with the convention that `xi_n` pairs with
//! the control sample acting on `[t_n, t_{n+1})`; terminal data are zero.

use crate::base::BaseState;
use crate::control::TrackingTargets;
use crate::error::{Error, Result};
use crate::field::{
    self, FluidParams, ScalarField, VectorField, deriv_axis_transpose, grad,
};
use crate::forward::{StateTrajectory, TimeGrid, solve_viscous};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjointMode {
    Continuous,
    DiscreteExact,
}

#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    pub time: TimeGrid,
    pub sigma: Vec<ScalarField>,
    pub xi: Vec<VectorField>,
}

/// Source data for the adjoint system: the cost multiplier, tracking
/// targets, and (when the state constraint is active) the per-sample
/// constraint source `[F]* a`.
pub struct AdjointSources<'a> {
    pub lambda_mult: f64,
    pub targets: &'a TrackingTargets,
    pub constraint_rho: Option<&'a [ScalarField]>,
    pub constraint_u: Option<&'a [VectorField]>,
}

impl<'a> AdjointSources<'a> {
    pub fn tracking(lambda_mult: f64, targets: &'a TrackingTargets) -> Self {
        AdjointSources { lambda_mult, targets, constraint_rho: None, constraint_u: None }
    }
}

/// `W^{-1} D^T (W data)` for one axis: the derivative transpose in the
/// quadrature-weighted inner product.
fn deriv_weighted_transpose(
    grid: &crate::field::Grid,
    weights: &[f64],
    data: &[f64],
    axis: usize,
) -> Vec<f64> {
    let weighted: Vec<f64> = data.iter().zip(weights).map(|(v, w)| v * w).collect();
    let mut out = deriv_axis_transpose(grid, &weighted, axis);
    for (o, w) in out.iter_mut().zip(weights) {
        *o /= w;
    }
    out
}

fn upwind_weighted_transpose(
    grid: &crate::field::Grid,
    weights: &[f64],
    advector: &VectorField,
    data: &[f64],
) -> Vec<f64> {
    let weighted: Vec<f64> = data.iter().zip(weights).map(|(v, w)| v * w).collect();
    let mut out = field::advect_upwind_transpose(grid, advector, &weighted);
    for (o, w) in out.iter_mut().zip(weights) {
        *o /= w;
    }
    out
}

pub fn solve_adjoint(
    base: &BaseState,
    state: &StateTrajectory,
    sources: &AdjointSources,
    params: &FluidParams,
    mode: AdjointMode,
) -> Result<AdjointTrajectory> {
    match mode {
        AdjointMode::DiscreteExact => solve_discrete_exact(base, state, sources, params),
        AdjointMode::Continuous => solve_continuous(base, state, sources, params),
    }
}

/// Cost gradient fields at sample `n` (weighted-gradient convention):
/// `omega_n dt [lambda (x_n - x_d) + (F* a)_n]`.
fn cost_gradients(
    base: &BaseState,
    state: &StateTrajectory,
    sources: &AdjointSources,
    n: usize,
) -> (ScalarField, VectorField) {
    let g = base.grid;
    let n_steps = state.time.n_steps;
    let w = field::time_weight(n, n_steps) * state.time.dt();
    let lam = sources.lambda_mult;

    let mut gr = state.rho[n].clone();
    gr.axpy(-1.0, sources.targets.rho_at(n));
    gr.scale(lam);
    if let Some(cs) = sources.constraint_rho {
        gr.axpy(1.0, &cs[n]);
    }
    gr.scale(w);

    let mut gu = state.u[n].clone();
    gu.axpy(-1.0, sources.targets.u_at(n));
    gu.scale(lam);
    if let Some(cs) = sources.constraint_u {
        gu.axpy(1.0, &cs[n]);
    }
    gu.scale(w);
    let _ = g;
    (gr, gu)
}

fn solve_discrete_exact(
    base: &BaseState,
    state: &StateTrajectory,
    sources: &AdjointSources,
    params: &FluidParams,
) -> Result<AdjointTrajectory> {
    let g = base.grid;
    let n_pts = g.n_points();
    let dim = g.dim;
    let n_steps = state.time.n_steps;
    let dt = state.time.dt();
    let weights = g.node_weights();

    let mut sigma = vec![ScalarField::zeros(g); n_steps + 1];
    let mut xi = vec![VectorField::zeros(g); n_steps + 1];

    // costate at the terminal sample
    let (mut p_rho, mut p_u) = cost_gradients(base, state, sources, n_steps);

    for n in (0..n_steps).rev() {
        // entering this iteration, (p_rho, p_u) is the costate at sample n+1
        let mut xi_n = p_u.clone();
        xi_n.zero_boundary();
        xi_n.scale(-1.0);
        xi[n] = xi_n;
        sigma[n] = p_rho.map(|v| -v);

        // q = M rho_tilde K^{-1} (rho_tilde^{-1} M p_u): the weighted adjoint
        // of the implicit viscous solve
        let mut rhs = p_u.clone();
        rhs.zero_boundary();
        for c in 0..dim {
            for i in 0..n_pts {
                rhs.comps[c][i] *= base.inv_rho.data[i];
            }
        }
        let mut q = solve_viscous(base, params, dt, &rhs)?;
        for c in 0..dim {
            for i in 0..n_pts {
                q.comps[c][i] *= base.rho_tilde.data[i];
            }
        }

        let (gr, gu) = cost_gradients(base, state, sources, n);

        // density channel: gr + p_rho - dt T* p_rho - dt P* q
        let t_adv = upwind_weighted_transpose(&g, &weights, &base.u_tilde, &p_rho.data);
        // P* q = p' * sum_c Dwt_c(inv_rho q_c) + sum_c inv_rho (accel - f)_c q_c
        let mut p_star = vec![0.0; n_pts];
        for c in 0..dim {
            let scaled: Vec<f64> =
                (0..n_pts).map(|i| base.inv_rho.data[i] * q.comps[c][i]).collect();
            let d = deriv_weighted_transpose(&g, &weights, &scaled, c);
            for i in 0..n_pts {
                p_star[i] += base.p_prime.data[i] * d[i]
                    + base.inv_rho.data[i]
                        * (base.accel.comps[c][i] - base.f.comps[c][i])
                        * q.comps[c][i];
            }
        }
        let mut new_p_rho = gr;
        for i in 0..n_pts {
            new_p_rho.data[i] += p_rho.data[i]
                - dt * (t_adv[i] + base.div_u.data[i] * p_rho.data[i])
                - dt * p_star[i];
        }

        // velocity channel: gu + q - dt C* q - dt B* p_rho
        let mut new_p_u = gu;
        for j in 0..dim {
            let adv = upwind_weighted_transpose(&g, &weights, &base.u_tilde, &q.comps[j]);
            let b_star = {
                let d = deriv_weighted_transpose(&g, &weights, &p_rho.data, j);
                d
            };
            for i in 0..n_pts {
                // (C* q)_j = sum_c q_c d_j u_tilde_c + upwind* per component
                let mut jac = 0.0;
                for c in 0..dim {
                    jac += q.comps[c][i] * base.grad_u[j * dim + c][i];
                }
                new_p_u.comps[j][i] += q.comps[j][i]
                    - dt * (jac + adv[i])
                    - dt * base.rho_tilde.data[i] * b_star[i];
            }
        }

        p_rho = new_p_rho;
        p_u = new_p_u;
        if !p_rho.is_finite() || !p_u.is_finite() {
            return Err(Error::NonFiniteState { step: n, what: "adjoint blow-up".into() });
        }
    }

    Ok(AdjointTrajectory { time: state.time, sigma, xi })
}

/// Implicit viscous solve for the continuous adjoint:
/// `(rho_tilde I - dt div S grad) psi = rhs` with `psi = 0` on the boundary.
/// The operator is symmetric in the plain dot product, so plain CG applies.
fn solve_adjoint_viscous(
    base: &BaseState,
    params: &FluidParams,
    dt: f64,
    rhs: &VectorField,
) -> Result<VectorField> {
    let g = base.grid;
    let apply = |v: &VectorField| -> VectorField {
        let sd = field::stress_div_noslip(v, params);
        let mut out = v.clone();
        for c in 0..g.dim {
            for i in 0..g.n_points() {
                out.comps[c][i] =
                    base.rho_tilde.data[i] * v.comps[c][i] - dt * sd.comps[c][i];
            }
        }
        out
    };
    let dot = |a: &VectorField, b: &VectorField| -> f64 {
        let mut s = 0.0;
        for c in 0..g.dim {
            for i in 0..g.n_points() {
                s += a.comps[c][i] * b.comps[c][i];
            }
        }
        s
    };
    let mut x = rhs.clone();
    x.zero_boundary();
    for c in 0..g.dim {
        for i in 0..g.n_points() {
            x.comps[c][i] *= base.inv_rho.data[i];
        }
    }
    let mut r = rhs.clone();
    r.zero_boundary();
    let ax = apply(&x);
    r.axpy(-1.0, &ax);
    let rhs_norm = dot(rhs, rhs).sqrt().max(dot(&r, &r).sqrt());
    if rhs_norm == 0.0 {
        return Ok(x);
    }
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let tol2 = (1e-13 * rhs_norm) * (1e-13 * rhs_norm);
    let max_iter = 20 * g.n_points();
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

fn solve_continuous(
    base: &BaseState,
    state: &StateTrajectory,
    sources: &AdjointSources,
    params: &FluidParams,
) -> Result<AdjointTrajectory> {
    let g = base.grid;
    let n_pts = g.n_points();
    let dim = g.dim;
    let n_steps = state.time.n_steps;
    let dt = state.time.dt();
    let lam = sources.lambda_mult;

    // advection velocity in reversed time is -u_tilde
    let mut neg_u = base.u_tilde.clone();
    neg_u.scale(-1.0);

    let mut sigma = vec![ScalarField::zeros(g); n_steps + 1];
    let mut xi = vec![VectorField::zeros(g); n_steps + 1];

    for n in (0..n_steps).rev() {
        let s_old = &sigma[n + 1];
        let x_old = &xi[n + 1];

        // sources at sample n+1: lambda (x_d - x) - (F* a)
        let src_rho = |i: usize| -> f64 {
            let mut v = lam * (sources.targets.rho_at(n + 1).data[i]
                - state.rho[n + 1].data[i]);
            if let Some(cs) = sources.constraint_rho {
                v -= cs[n + 1].data[i];
            }
            v
        };
        let src_u = |c: usize, i: usize| -> f64 {
            let mut v = lam
                * (sources.targets.u_at(n + 1).comps[c][i] - state.u[n + 1].comps[c][i]);
            if let Some(cs) = sources.constraint_u {
                v -= cs[n + 1].comps[c][i];
            }
            v
        };

        // sigma update (explicit)
        let adv_s = field::advect_upwind(&g, &neg_u, &s_old.data);
        let psi_old = {
            let mut p = x_old.clone();
            for c in 0..dim {
                for i in 0..n_pts {
                    p.comps[c][i] *= base.inv_rho.data[i];
                }
            }
            p
        };
        let div_psi = field::div(&psi_old);
        let mut s_new = s_old.clone();
        for i in 0..n_pts {
            let mut coupling = base.p_prime.data[i] * div_psi.data[i];
            for c in 0..dim {
                coupling += base.inv_rho.data[i]
                    * x_old.comps[c][i]
                    * (base.f.comps[c][i] - base.accel.comps[c][i]);
            }
            s_new.data[i] += dt * (-adv_s[i] + coupling + src_rho(i));
        }

        // xi update: explicit transport/coupling, implicit viscous part
        let grad_s = grad(s_old);
        let mut x_star = x_old.clone();
        for c in 0..dim {
            let adv = field::advect_upwind(&g, &neg_u, &x_old.comps[c]);
            for i in 0..n_pts {
                let mut jac = 0.0;
                for j in 0..dim {
                    // (xi . (grad u_tilde)^T)_c = sum_j xi_j d_c u_tilde_j
                    jac += x_old.comps[j][i] * base.grad_u[c * dim + j][i];
                }
                x_star.comps[c][i] += dt
                    * (-adv[i] + base.div_u.data[i] * x_old.comps[c][i] - jac
                        + base.rho_tilde.data[i] * grad_s.comps[c][i]
                        + src_u(c, i));
            }
        }
        x_star.zero_boundary();
        let psi = solve_adjoint_viscous(base, params, dt, &x_star)?;
        let mut x_new = psi;
        for c in 0..dim {
            for i in 0..n_pts {
                x_new.comps[c][i] *= base.rho_tilde.data[i];
            }
        }

        if !s_new.is_finite() || !x_new.is_finite() {
            return Err(Error::NonFiniteState { step: n, what: "adjoint blow-up".into() });
        }
        sigma[n] = s_new;
        xi[n] = x_new;
    }

    Ok(AdjointTrajectory { time: state.time, sigma, xi })
}

/// Reduced cost gradient `g_n = lambda U_n - rho_tilde^{-1} xi_n` per control
/// sample. With the discrete-exact adjoint this is the exact gradient of the
/// discrete cost with respect to the control samples (in the
/// `L^2(0,T;L^2)` inner product).
pub fn reduced_gradient(
    control: &crate::control::ControlField,
    adj: &AdjointTrajectory,
    base: &BaseState,
    lambda_mult: f64,
) -> Result<crate::control::ControlField> {
    if control.time != adj.time {
        return Err(Error::GridMismatch("control and adjoint time grids differ".into()));
    }
    let g = base.grid;
    let mut out = control.clone();
    for (n, v) in out.values.iter_mut().enumerate() {
        v.scale(lambda_mult);
        for c in 0..g.dim {
            for i in 0..g.n_points() {
                v.comps[c][i] -= base.inv_rho.data[i] * adj.xi[n].comps[c][i];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{BaseFamily, BaseState, PressureLaw};
    use crate::control::{ControlField, TrackingTargets, evaluate_cost};
    use crate::field::{Grid, linf_norm, linf_norm_vector, norm_l2_vector};
    use crate::forward::{solve_linearized, zero_state};
    use std::f64::consts::PI;

    fn tracking_cost(
        base: &BaseState,
        ctrl: &ControlField,
        targets: &TrackingTargets,
        params: &FluidParams,
    ) -> f64 {
        let (r0, u0) = zero_state(base.grid);
        let traj =
            solve_linearized(base, &ctrl.values, &r0, &u0, params, ctrl.time).unwrap();
        evaluate_cost(&traj, ctrl, targets).unwrap().total
    }

    #[test]
    fn zero_sources_give_zero_adjoint() {
        let params = FluidParams::new(0.3, 0.2).unwrap();
        let g = Grid::unit_box(1, 17).unwrap();
        let base = BaseFamily::Rest { density: 1.0 }
            .manufacture(g, PressureLaw::linear(), &params)
            .unwrap();
        let time = TimeGrid::new(0.1, 20).unwrap();
        let (r0, u0) = zero_state(g);
        let traj = solve_linearized(&base, &[], &r0, &u0, &params, time).unwrap();
        let targets = TrackingTargets::zero(g);
        for mode in [AdjointMode::Continuous, AdjointMode::DiscreteExact] {
            let adj = solve_adjoint(
                &base,
                &traj,
                &AdjointSources::tracking(1.0, &targets),
                &params,
                mode,
            )
            .unwrap();
            for n in 0..=time.n_steps {
                assert_eq!(linf_norm(&adj.sigma[n].data), 0.0);
                assert_eq!(linf_norm_vector(&adj.xi[n]), 0.0);
            }
        }
    }

    #[test]
    fn terminal_and_boundary_conditions() {
        let params = FluidParams::new(0.3, 0.2).unwrap();
        let g = Grid::unit_box(1, 17).unwrap();
        let base = BaseFamily::DensityGradient { offset: 2.0, amplitude: 0.5 }
            .manufacture(g, PressureLaw::quadratic(), &params)
            .unwrap();
        let time = TimeGrid::new(0.05, 20).unwrap();
        let r0 = ScalarField::from_fn(g, |p| (PI * p[0]).cos());
        let u0 = VectorField::from_fns(g, |_, p| (PI * p[0]).sin());
        let traj = solve_linearized(&base, &[], &r0, &u0, &params, time).unwrap();
        let targets = TrackingTargets::zero(g);
        for mode in [AdjointMode::Continuous, AdjointMode::DiscreteExact] {
            let adj = solve_adjoint(
                &base,
                &traj,
                &AdjointSources::tracking(1.0, &targets),
                &params,
                mode,
            )
            .unwrap();
            assert_eq!(linf_norm(&adj.sigma[time.n_steps].data), 0.0);
            assert_eq!(linf_norm_vector(&adj.xi[time.n_steps]), 0.0);
            for n in 0..time.n_steps {
                assert_eq!(adj.xi[n].boundary_trace_max(), 0.0, "step {n}");
            }
        }
    }

    #[test]
    fn discrete_exact_gradient_matches_finite_differences() {
        // nonconstant coefficients exercise every transpose path
        let params = FluidParams::new(0.3, 0.2).unwrap();
        let g = Grid::unit_box(1, 13).unwrap();
        let base = BaseFamily::DensityGradient { offset: 2.0, amplitude: 0.5 }
            .manufacture(g, PressureLaw::quadratic(), &params)
            .unwrap();
        let time = TimeGrid::new(0.05, 16).unwrap();
        let radius = 10.0;
        let mut ctrl = ControlField::zeros(g, time, radius);
        for (n, v) in ctrl.values.iter_mut().enumerate() {
            *v = VectorField::from_fns(g, |_, p| {
                (PI * p[0]).sin() * (0.5 + 0.1 * n as f64)
            });
        }
        let targets = TrackingTargets::steady(
            ScalarField::from_fn(g, |p| 0.3 * (PI * p[0]).cos()),
            VectorField::from_fns(g, |_, p| 0.2 * (PI * p[0]).sin()),
        );

        let (r0, u0) = zero_state(g);
        let traj =
            solve_linearized(&base, &ctrl.values, &r0, &u0, &params, time).unwrap();
        let adj = solve_adjoint(
            &base,
            &traj,
            &AdjointSources::tracking(1.0, &targets),
            &params,
            AdjointMode::DiscreteExact,
        )
        .unwrap();
        let grad = reduced_gradient(&ctrl, &adj, &base, 1.0).unwrap();

        for (k, dir_fn) in [
            |_c: usize, p: [f64; 3]| (2.0 * PI * p[0]).sin(),
            |_c: usize, p: [f64; 3]| p[0] * (1.0 - p[0]),
            |_c: usize, p: [f64; 3]| (3.0 * PI * p[0]).cos(),
        ]
        .into_iter()
        .enumerate()
        {
            let mut dir = ControlField::zeros(g, time, radius);
            for (n, v) in dir.values.iter_mut().enumerate() {
                *v = VectorField::from_fns(g, dir_fn);
                v.scale(1.0 + 0.05 * n as f64);
            }
            let h = 1e-4;
            let mut up = ctrl.clone();
            up.axpy(h, &dir);
            let mut dn = ctrl.clone();
            dn.axpy(-h, &dir);
            let fd = (tracking_cost(&base, &up, &targets, &params)
                - tracking_cost(&base, &dn, &targets, &params))
                / (2.0 * h);
            let pred = grad.inner(&dir);
            assert!(
                (fd - pred).abs() < 1e-9 * (1.0 + fd.abs()),
                "direction {k}: fd {fd} vs adjoint {pred}"
            );
        }
    }

    #[test]
    fn continuous_mode_single_mode_decay_oracle() {
        // rest base, constant pressure law: sigma stays zero and xi solves a
        // backward heat equation; single sine mode has the closed form
        // a(t) = (1 - exp(-kappa (T - t))) / kappa, kappa = (2 mu + lam) pi^2
        let params = FluidParams::new(0.05, 0.05).unwrap();
        let g = Grid::unit_box(1, 65).unwrap();
        let base = BaseFamily::Rest { density: 1.0 }
            .manufacture(g, PressureLaw::constant(1.0), &params)
            .unwrap();
        let t_final = 0.2;
        let time = TimeGrid::new(t_final, 512).unwrap();
        let (r0, u0) = zero_state(g);
        let traj = solve_linearized(&base, &[], &r0, &u0, &params, time).unwrap();
        let targets = TrackingTargets::steady(
            ScalarField::zeros(g),
            VectorField::from_fns(g, |_, p| (PI * p[0]).sin()),
        );
        let adj = solve_adjoint(
            &base,
            &traj,
            &AdjointSources::tracking(1.0, &targets),
            &params,
            AdjointMode::Continuous,
        )
        .unwrap();

        let kappa = (2.0 * params.mu + params.lam) * PI * PI;
        let dt = time.dt();
        let mut max_err: f64 = 0.0;
        let mut max_ref: f64 = 0.0;
        for n in 0..=time.n_steps {
            assert!(linf_norm(&adj.sigma[n].data) < 1e-14, "sigma nonzero at {n}");
            let t = n as f64 * dt;
            let a = (1.0 - (-kappa * (t_final - t)).exp()) / kappa;
            let exact = VectorField::from_fns(g, |_, p| a * (PI * p[0]).sin());
            let mut d = adj.xi[n].clone();
            d.axpy(-1.0, &exact);
            max_err = max_err.max(norm_l2_vector(&d));
            max_ref = max_ref.max(norm_l2_vector(&exact));
        }
        let rel = max_err / max_ref;
        assert!(rel <= 1e-3, "relative error {rel}");
    }

    #[test]
    fn continuous_gradient_consistent_with_discrete() {
        let params = FluidParams::new(0.3, 0.2).unwrap();
        let g = Grid::unit_box(1, 33).unwrap();
        let base = BaseFamily::Rest { density: 1.0 }
            .manufacture(g, PressureLaw::linear(), &params)
            .unwrap();
        let time = TimeGrid::new(0.1, 64).unwrap();
        let mut ctrl = ControlField::zeros(g, time, 10.0);
        for v in ctrl.values.iter_mut() {
            *v = VectorField::from_fns(g, |_, p| (PI * p[0]).sin());
        }
        let targets = TrackingTargets::steady(
            ScalarField::from_fn(g, |p| 0.2 * (PI * p[0]).cos()),
            VectorField::from_fns(g, |_, p| 0.3 * (PI * p[0]).sin()),
        );
        let (r0, u0) = zero_state(g);
        let traj =
            solve_linearized(&base, &ctrl.values, &r0, &u0, &params, time).unwrap();
        let srcs = AdjointSources::tracking(1.0, &targets);
        let ge = reduced_gradient(
            &ctrl,
            &solve_adjoint(&base, &traj, &srcs, &params, AdjointMode::DiscreteExact)
                .unwrap(),
            &base,
            1.0,
        )
        .unwrap();
        let gc = reduced_gradient(
            &ctrl,
            &solve_adjoint(&base, &traj, &srcs, &params, AdjointMode::Continuous).unwrap(),
            &base,
            1.0,
        )
        .unwrap();
        let mut d = ge.clone();
        d.axpy(-1.0, &gc);
        let rel = d.norm_l2l2() / ge.norm_l2l2();
        let tol = 20.0 * (g.min_spacing().powi(2) + time.dt()).max(1e-3);
        assert!(rel < tol, "modes differ by {rel}, tol {tol}");
    }
}
