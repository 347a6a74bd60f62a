//! Projected-gradient optimizer with Armijo backtracking, plus the penalty
//! continuation used for convex state constraints.
//!
//! Unconstrained runs minimize the tracking cost `J` directly. Constrained
//! runs first drive the observable into the admissible set with a quadratic
//! distance penalty (increasing weight `c`), then run an epsilon
//! continuation on the penalized functional
//! `J_eps = sqrt((J - J* + eps)^2 + d_W^2)` to extract the limit multiplier
//! pair `(lambda, a)` with `lambda^2 + ||a||^2 = 1`.

use crate::adjoint::{AdjointMode, AdjointSources, AdjointTrajectory, reduced_gradient, solve_adjoint};
use crate::base::BaseState;
use crate::control::{
    ConstraintSpec, ControlField, CostReport, ObsElement, PenaltyEval, TrackingTargets,
    evaluate_cost, penalized_cost,
};
use crate::error::{Error, Result};
use crate::field::{FluidParams, ScalarField, VectorField};
use crate::forward::{StateTrajectory, TimeGrid, solve_linearized};

#[derive(Debug, Clone)]
pub struct OptimizeOptions {
    pub time: TimeGrid,
    pub radius: f64,
    pub mode: AdjointMode,
    /// projected-gradient residual tolerance (unit reference step)
    pub tol: f64,
    pub max_iters: usize,
    pub initial_step: f64,
    pub max_step: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub step_growth: f64,
    /// augmented-Lagrangian penalty weight: starts at `penalty_c0`, is
    /// multiplied by `penalty_growth` when feasibility stalls, and the
    /// outer loop runs until `d_W <= feas_tol`
    pub penalty_c0: f64,
    pub penalty_growth: f64,
    pub n_penalty: usize,
    pub feas_tol: f64,
    /// epsilon continuation: `eps_k = eps0 * 2^-k`, `k < n_eps`
    pub eps0: f64,
    pub n_eps: usize,
}

impl OptimizeOptions {
    pub fn new(time: TimeGrid, radius: f64) -> Self {
        OptimizeOptions {
            time,
            radius,
            mode: AdjointMode::DiscreteExact,
            tol: 1e-6,
            max_iters: 2000,
            initial_step: 1.0,
            max_step: 64.0,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            step_growth: 1.5,
            penalty_c0: 100.0,
            penalty_growth: 4.0,
            n_penalty: 30,
            feas_tol: 1e-7,
            eps0: 1e-3,
            n_eps: 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterateRecord {
    pub phase: &'static str,
    /// penalty weight or epsilon for the continuation phases, 0 otherwise
    pub level: f64,
    pub iter: usize,
    pub objective: f64,
    pub j: f64,
    pub d_w: f64,
    pub lambda_eps: f64,
    pub a_norm: f64,
    pub residual: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct MultiplierPair {
    pub lambda: f64,
    pub a: Option<ObsElement>,
}

pub struct OptimizeResult {
    pub control: ControlField,
    pub state: StateTrajectory,
    pub adjoint: AdjointTrajectory,
    pub cost: CostReport,
    pub log: Vec<IterateRecord>,
    pub multiplier: MultiplierPair,
    /// final iterate of the epsilon continuation (constrained runs only);
    /// the multiplier pair is evaluated there
    pub eps_control: Option<ControlField>,
    pub residual: f64,
}

struct Problem<'a> {
    base: &'a BaseState,
    params: &'a FluidParams,
    rho0: &'a ScalarField,
    u0: &'a VectorField,
    targets: &'a TrackingTargets,
    constraint: &'a ConstraintSpec,
    opts: &'a OptimizeOptions,
}

impl<'a> Problem<'a> {
    fn forward(&self, u: &ControlField) -> Result<StateTrajectory> {
        solve_linearized(self.base, &u.values, self.rho0, self.u0, self.params, u.time)
    }

    fn cost(&self, traj: &StateTrajectory, u: &ControlField) -> Result<CostReport> {
        evaluate_cost(traj, u, self.targets)
    }
}

/// What the inner loop is minimizing.
enum Objective {
    Tracking,
    /// `J + (c/2) d_W(F(x) + y/c)^2` with multiplier estimate `y`; `shift`
    /// holds `y/c`
    Augmented { c: f64, shift: ObsElement },
    Epsilon { eps: f64, j_star: f64 },
}

struct EvalOut {
    value: f64,
    grad: ControlField,
    j: f64,
    d_w: f64,
    lambda_eps: f64,
    a_norm: f64,
}

fn evaluate(p: &Problem, obj: &Objective, u: &ControlField) -> Result<EvalOut> {
    let traj = p.forward(u)?;
    let j = p.cost(&traj, u)?.total;

    let (value, lambda_mult, a_field, d_w, lambda_eps, a_norm): (
        f64,
        f64,
        Option<ObsElement>,
        f64,
        f64,
        f64,
    ) = match obj {
        Objective::Tracking => (j, 1.0, None, 0.0, 1.0, 0.0),
        Objective::Augmented { c, shift } => {
            let mut z = p.constraint.observable.apply(&traj);
            z.axpy(1.0, shift);
            let (d, eta) = p.constraint.set.distance(&z);
            let a = eta.map(|mut e| {
                e.scale(c * d);
                e
            });
            (j + 0.5 * c * d * d, 1.0, a, d, 1.0, 0.0)
        }
        Objective::Epsilon { eps, j_star } => {
            let fx = p.constraint.observable.apply(&traj);
            let pe: PenaltyEval =
                penalized_cost(j, &fx, &p.constraint.set, *eps, *j_star);
            (pe.j_eps, pe.lambda_eps, pe.a_eps, pe.d_w, pe.lambda_eps, pe.a_eps_norm)
        }
    };

    let adjoint_fields = a_field.map(|a| p.constraint.observable.apply_adjoint(&a));
    let srcs = AdjointSources {
        lambda_mult,
        targets: p.targets,
        constraint_rho: adjoint_fields.as_ref().map(|(r, _)| r.as_slice()),
        constraint_u: adjoint_fields.as_ref().map(|(_, v)| v.as_slice()),
    };
    let adj = solve_adjoint(p.base, &traj, &srcs, p.params, p.opts.mode)?;
    let grad = reduced_gradient(u, &adj, p.base, lambda_mult)?;
    Ok(EvalOut { value, grad, j, d_w, lambda_eps, a_norm })
}

fn objective_value(p: &Problem, obj: &Objective, u: &ControlField) -> Result<f64> {
    let traj = p.forward(u)?;
    let j = p.cost(&traj, u)?.total;
    Ok(match obj {
        Objective::Tracking => j,
        Objective::Augmented { c, shift } => {
            let mut z = p.constraint.observable.apply(&traj);
            z.axpy(1.0, shift);
            let (d, _) = p.constraint.set.distance(&z);
            j + 0.5 * c * d * d
        }
        Objective::Epsilon { eps, j_star } => {
            let fx = p.constraint.observable.apply(&traj);
            penalized_cost(j, &fx, &p.constraint.set, *eps, *j_star).j_eps
        }
    })
}

/// Residual of the fixed-point map at unit reference step:
/// `||U - P(U - g)||_{L2L2}`.
fn pg_residual(u: &ControlField, grad: &ControlField) -> f64 {
    let mut cand = u.clone();
    cand.axpy(-1.0, grad);
    cand.project();
    cand.axpy(-1.0, u);
    cand.norm_l2l2()
}

/// Projected-gradient descent with Armijo backtracking on the given
/// objective. Mutates `u` in place; returns the final residual.
fn inner_loop(
    p: &Problem,
    obj: &Objective,
    phase: &'static str,
    level: f64,
    u: &mut ControlField,
    log: &mut Vec<IterateRecord>,
) -> Result<f64> {
    let opts = p.opts;
    let mut gamma = opts.initial_step;
    let mut out = evaluate(p, obj, u)?;
    for iter in 0..opts.max_iters {
        let residual = pg_residual(u, &out.grad);
        log.push(IterateRecord {
            phase,
            level,
            iter,
            objective: out.value,
            j: out.j,
            d_w: out.d_w,
            lambda_eps: out.lambda_eps,
            a_norm: out.a_norm,
            residual,
            step: gamma,
        });
        if residual <= opts.tol {
            return Ok(residual);
        }

        let mut local = gamma;
        let mut accepted = false;
        for trial in 0..60 {
            let mut cand = u.clone();
            cand.axpy(-local, &out.grad);
            cand.project();
            let mut step = cand.clone();
            step.axpy(-1.0, u);
            let step2 = step.inner(&step);
            if step2 == 0.0 {
                break;
            }
            let fv = objective_value(p, obj, &cand)?;
            if fv <= out.value - opts.armijo_c / local * step2 {
                *u = cand;
                gamma = if trial == 0 {
                    (local * opts.step_growth).min(opts.max_step)
                } else {
                    local
                };
                accepted = true;
                break;
            }
            local *= opts.backtrack_factor;
        }
        if !accepted {
            return Err(Error::StagnationWithoutConvergence { residual, iterations: iter });
        }
        out = evaluate(p, obj, u)?;
    }
    let residual = pg_residual(u, &out.grad);
    if residual <= opts.tol {
        Ok(residual)
    } else {
        Err(Error::StagnationWithoutConvergence { residual, iterations: opts.max_iters })
    }
}

pub fn optimize(
    base: &BaseState,
    params: &FluidParams,
    rho0: &ScalarField,
    u0: &VectorField,
    targets: &TrackingTargets,
    constraint: &ConstraintSpec,
    opts: &OptimizeOptions,
) -> Result<OptimizeResult> {
    constraint.set.validate()?;
    let p = Problem { base, params, rho0, u0, targets, constraint, opts };
    let mut u = ControlField::zeros(base.grid, opts.time, opts.radius);
    let mut log = Vec::new();

    let (residual, multiplier, eps_control) = if !constraint.is_active() {
        let r = inner_loop(&p, &Objective::Tracking, "tracking", 0.0, &mut u, &mut log)?;
        (r, MultiplierPair { lambda: 1.0, a: None }, None)
    } else {
        // feasibility phase: augmented-Lagrangian outer loop on the
        // multiplier estimate y (stored scaled as y/c)
        let mut c = opts.penalty_c0;
        let mut y = ObsElement::zeros(base.grid, opts.time);
        let mut prev_d = f64::INFINITY;
        let mut residual = f64::INFINITY;
        let mut feasible = false;
        for _ in 0..opts.n_penalty {
            let mut shift = y.clone();
            shift.scale(1.0 / c);
            residual = inner_loop(
                &p,
                &Objective::Augmented { c, shift: shift.clone() },
                "penalty",
                c,
                &mut u,
                &mut log,
            )?;
            let traj = p.forward(&u)?;
            let fx = constraint.observable.apply(&traj);
            let (d, _) = constraint.set.distance(&fx);
            if d <= opts.feas_tol {
                feasible = true;
                break;
            }
            // y <- c (z - P_W z) at the shifted point
            let mut z = fx;
            z.axpy(1.0, &shift);
            let (dz, eta) = constraint.set.distance(&z);
            y = match eta {
                Some(mut e) => {
                    e.scale(c * dz);
                    e
                }
                None => ObsElement::zeros(base.grid, opts.time),
            };
            if d > 0.5 * prev_d {
                c *= opts.penalty_growth;
            }
            prev_d = d;
        }
        if !feasible {
            let traj = p.forward(&u)?;
            let (d, _) = constraint.set.distance(&constraint.observable.apply(&traj));
            return Err(Error::InfeasiblePenalty { before: prev_d, after: d });
        }

        // epsilon continuation from the feasible solution; J* is fixed there
        let traj = p.forward(&u)?;
        let j_star = p.cost(&traj, &u)?.total;
        let mut u_eps = u.clone();
        let mut eps = opts.eps0;
        for k in 0..opts.n_eps {
            inner_loop(
                &p,
                &Objective::Epsilon { eps, j_star },
                "continuation",
                eps,
                &mut u_eps,
                &mut log,
            )?;
            if k + 1 < opts.n_eps {
                eps *= 0.5;
            }
        }
        let traj_eps = p.forward(&u_eps)?;
        let j_eps = p.cost(&traj_eps, &u_eps)?.total;
        let fx = constraint.observable.apply(&traj_eps);
        let pe = penalized_cost(j_eps, &fx, &constraint.set, eps, j_star);
        (
            residual,
            MultiplierPair { lambda: pe.lambda_eps, a: pe.a_eps },
            Some(u_eps),
        )
    };

    let state = p.forward(&u)?;
    let cost = p.cost(&state, &u)?;
    let srcs = AdjointSources::tracking(1.0, targets);
    let adjoint = solve_adjoint(base, &state, &srcs, params, opts.mode)?;
    Ok(OptimizeResult {
        control: u,
        state,
        adjoint,
        cost,
        log,
        multiplier,
        eps_control,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{BaseFamily, PressureLaw};
    use crate::control::{Observable, SetW};
    use crate::field::Grid;
    use crate::forward::zero_state;
    use std::f64::consts::PI;

    fn rest_problem(
        n: usize,
        steps: usize,
    ) -> (BaseState, FluidParams, Grid, TimeGrid) {
        let params = FluidParams::new(0.3, 0.2).unwrap();
        let g = Grid::unit_box(1, n).unwrap();
        let base = BaseFamily::Rest { density: 1.0 }
            .manufacture(g, PressureLaw::linear(), &params)
            .unwrap();
        let time = TimeGrid::new(0.25, steps).unwrap();
        (base, params, g, time)
    }

    #[test]
    fn matching_targets_need_no_control() {
        let (base, params, g, time) = rest_problem(17, 16);
        let (r0, u0) = zero_state(g);
        let targets = TrackingTargets::zero(g);
        let opts = OptimizeOptions::new(time, 1.0);
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
        assert_eq!(res.cost.total, 0.0);
        assert_eq!(res.control.norm_l2l2(), 0.0);
        assert_eq!(res.log.len(), 1);
    }

    #[test]
    fn unconstrained_tracking_reaches_stationarity() {
        let (base, params, g, time) = rest_problem(17, 32);
        let (r0, u0) = zero_state(g);
        let targets = TrackingTargets::steady(
            ScalarField::zeros(g),
            VectorField::from_fns(g, |_, p| 0.3 * (PI * p[0]).sin()),
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
        assert!(res.residual <= 1e-6, "residual {}", res.residual);
        // interior optimum: residual equals the gradient norm
        let grad =
            reduced_gradient(&res.control, &res.adjoint, &base, 1.0).unwrap();
        assert!(grad.norm_l2l2() <= 1.01e-6, "grad norm {}", grad.norm_l2l2());
        assert!(res.cost.total > 0.0);
        // accepted steps never increase the objective
        for w in res.log.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-14);
        }
    }

    #[test]
    fn small_radius_makes_ball_constraint_bind() {
        let (base, params, g, time) = rest_problem(17, 32);
        let (r0, u0) = zero_state(g);
        let targets = TrackingTargets::steady(
            ScalarField::zeros(g),
            VectorField::from_fns(g, |_, p| 2.0 * (PI * p[0]).sin()),
        );
        let radius = 0.05;
        let opts = OptimizeOptions::new(time, radius);
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
        assert!(res.residual <= 1e-6);
        let max = res.control.max_sample_norm();
        assert!(max <= radius * (1.0 + 1e-12));
        assert!(max >= radius * (1.0 - 1e-6), "ball does not bind: {max}");
    }

    #[test]
    fn constrained_run_tracks_multipliers_within_bounds() {
        let (base, params, g, time) = rest_problem(17, 32);
        let (r0, u0) = zero_state(g);
        let targets = TrackingTargets::steady(
            ScalarField::zeros(g),
            VectorField::from_fns(g, |_, p| 0.5 * (PI * p[0]).sin()),
        );
        // ball in the observable space small enough to exclude the
        // unconstrained optimum's observable
        let constraint = ConstraintSpec {
            observable: Observable::IdentityScaling { c_rho: 1.0, c_u: 1.0 },
            set: SetW::Ball { center: ObsElement::zeros(g, time), radius: 1e-3 },
        };
        let mut opts = OptimizeOptions::new(time, 50.0);
        opts.tol = 1e-7;
        let res = optimize(&base, &params, &r0, &u0, &targets, &constraint, &opts)
            .unwrap();
        let mp = &res.multiplier;
        assert!(mp.lambda >= 0.0 && mp.lambda <= 1.0, "lambda {}", mp.lambda);
        let a_norm = mp.a.as_ref().map(|a| a.norm()).unwrap_or(0.0);
        assert!(a_norm > 0.0, "expected an active constraint multiplier");
        assert!(
            (mp.lambda * mp.lambda + a_norm * a_norm - 1.0).abs() < 1e-10,
            "multiplier pair not normalized"
        );
        for rec in res.log.iter().filter(|r| r.phase == "continuation") {
            assert!(rec.lambda_eps >= 0.0 && rec.lambda_eps <= 1.0);
            assert!(rec.a_norm >= 0.0 && rec.a_norm <= 1.0);
            let sum = rec.lambda_eps + rec.a_norm;
            assert!((1.0 - 1e-12..=2.0 + 1e-12).contains(&sum), "sum {sum}");
        }
        // the feasibility phase actually enforced the constraint
        let traj = solve_linearized(
            &base,
            &res.control.values,
            &r0,
            &u0,
            &params,
            time,
        )
        .unwrap();
        let (d, _) = constraint.set.distance(&constraint.observable.apply(&traj));
        assert!(d <= opts.feas_tol, "final d_W {d}");
    }
}
