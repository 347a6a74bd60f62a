//! Randomized structural invariants: projection optimality, linearity of
//! the scheme, spike bookkeeping, and Lipschitz continuity of the set
//! distance.

use std::f64::consts::PI;

use proptest::prelude::*;

use lcns::base::{BaseFamily, BaseState, PressureLaw};
use lcns::control::{
    ControlField, ObsElement, SetW, ekeland_distance, project_to_ball, spike_variation,
};
use lcns::field::{FluidParams, Grid, ScalarField, VectorField, norm_l2_vector};
use lcns::forward::{TimeGrid, solve_linearized, zero_state};

const EXTENT: usize = 9;
const N_STEPS: usize = 16;

fn grid() -> Grid {
    Grid::unit_box(1, EXTENT).unwrap()
}

fn time() -> TimeGrid {
    TimeGrid::new(0.05, N_STEPS).unwrap()
}

fn rest_base() -> (BaseState, FluidParams) {
    let params = FluidParams::new(0.3, 0.2).unwrap();
    let base = BaseFamily::Rest { density: 1.0 }
        .manufacture(grid(), PressureLaw::linear(), &params)
        .unwrap();
    (base, params)
}

/// One interior vector field per sample, built from bounded raw coefficients.
fn control_from(coeffs: &[f64], radius: f64) -> ControlField {
    let g = grid();
    let mut u = ControlField::zeros(g, time(), radius);
    for (n, v) in u.values.iter_mut().enumerate() {
        let a = coeffs[n % coeffs.len()];
        let b = coeffs[(n + 1) % coeffs.len()];
        *v = VectorField::from_fns(g, |_, p| {
            a * (PI * p[0]).sin() + b * (2.0 * PI * p[0]).sin()
        });
    }
    u
}

fn obs_from(coeffs: &[f64]) -> ObsElement {
    let g = grid();
    let mut e = ObsElement::zeros(g, time());
    for (n, s) in e.rho.iter_mut().enumerate() {
        let a = coeffs[n % coeffs.len()];
        *s = ScalarField::from_fn(g, |p| a * (PI * p[0]).cos());
    }
    for (n, v) in e.u.iter_mut().enumerate() {
        let b = coeffs[(n + 2) % coeffs.len()];
        *v = VectorField::from_fns(g, |_, p| b * (PI * p[0]).sin());
    }
    e
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // P(v) is the closest ball point: <v - P(v), w - P(v)> <= 0 for all
    // admissible w
    #[test]
    fn projection_variational_inequality(
        cv in prop::collection::vec(-3.0f64..3.0, 4),
        cw in prop::collection::vec(-0.4f64..0.4, 4),
        radius in 0.1f64..1.0,
    ) {
        let g = grid();
        let v = VectorField::from_fns(g, |_, p| {
            cv[0] * (PI * p[0]).sin() + cv[1] * (2.0 * PI * p[0]).sin()
        });
        let mut w = VectorField::from_fns(g, |_, p| {
            cw[0] * (PI * p[0]).sin() + cw[1] * (2.0 * PI * p[0]).sin()
        });
        let nw = norm_l2_vector(&w);
        if nw > radius {
            w.scale(radius / nw);
        }
        let pv = project_to_ball(&v, radius);
        prop_assert!(norm_l2_vector(&pv) <= radius * (1.0 + 1e-12));
        let mut dv = v.clone();
        dv.axpy(-1.0, &pv);
        let mut dw = w.clone();
        dw.axpy(-1.0, &pv);
        let mut pairing = 0.0;
        for c in 0..g.dim {
            for i in 0..g.n_points() {
                pairing += dv.comps[c][i] * dw.comps[c][i];
            }
        }
        prop_assert!(pairing <= 1e-10);
    }

    // with zero initial data the control-to-state map is linear
    #[test]
    fn scheme_is_linear_in_the_control(
        c1 in prop::collection::vec(-1.0f64..1.0, 3),
        c2 in prop::collection::vec(-1.0f64..1.0, 3),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let (base, params) = rest_base();
        let (r0, u0) = zero_state(grid());
        let u1 = control_from(&c1, 100.0);
        let u2 = control_from(&c2, 100.0);
        let mut comb = u1.clone();
        comb.scale(a);
        comb.axpy(b, &u2);
        let t1 = solve_linearized(&base, &u1.values, &r0, &u0, &params, time()).unwrap();
        let t2 = solve_linearized(&base, &u2.values, &r0, &u0, &params, time()).unwrap();
        let tc = solve_linearized(&base, &comb.values, &r0, &u0, &params, time()).unwrap();
        let n = N_STEPS;
        let scale = t1.u[n].comps[0].iter().chain(&t2.u[n].comps[0]).fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..grid().n_points() {
            let lin_rho = a * t1.rho[n].data[i] + b * t2.rho[n].data[i];
            let lin_u = a * t1.u[n].comps[0][i] + b * t2.u[n].comps[0][i];
            prop_assert!((tc.rho[n].data[i] - lin_rho).abs() <= 1e-11 * scale.max(1.0));
            prop_assert!((tc.u[n].comps[0][i] - lin_u).abs() <= 1e-11 * scale.max(1.0));
        }
    }

    // spike candidates stay admissible, differ only on [tau - h, tau), and
    // d_E counts exactly the changed samples
    #[test]
    fn spike_variation_bookkeeping(
        c in prop::collection::vec(-0.3f64..0.3, 3),
        tau_idx in 4usize..=N_STEPS,
        k in 1usize..4,
        amp in -0.5f64..0.5,
    ) {
        let radius = 2.0;
        let u = control_from(&c, radius);
        let dt = time().dt();
        let k = k.min(tau_idx);
        let w = VectorField::from_fns(grid(), |_, p| amp * (PI * p[0]).sin());
        let spiked = spike_variation(&u, tau_idx as f64 * dt, k as f64 * dt, &w).unwrap();
        prop_assert!(spiked.max_sample_norm() <= radius * (1.0 + 1e-12));
        for n in 0..N_STEPS {
            let inside = n >= tau_idx - k && n < tau_idx;
            for cidx in 0..grid().dim {
                for i in 0..grid().n_points() {
                    let expect = if inside { w.comps[cidx][i] } else { u.values[n].comps[cidx][i] };
                    prop_assert_eq!(spiked.values[n].comps[cidx][i], expect);
                }
            }
        }
        let d = ekeland_distance(&spiked, &u);
        prop_assert!(d <= k as f64 * dt + 1e-15);
    }

    // |d_W(x) - d_W(y)| <= ||x - y||
    #[test]
    fn set_distance_is_nonexpansive(
        cx in prop::collection::vec(-1.0f64..1.0, 4),
        cy in prop::collection::vec(-1.0f64..1.0, 4),
        radius in 0.05f64..0.5,
    ) {
        let set = SetW::Ball { center: ObsElement::zeros(grid(), time()), radius };
        let x = obs_from(&cx);
        let y = obs_from(&cy);
        let (dx, _) = set.distance(&x);
        let (dy, _) = set.distance(&y);
        let mut diff = x.clone();
        diff.axpy(-1.0, &y);
        prop_assert!((dx - dy).abs() <= diff.norm() + 1e-12);
    }
}
