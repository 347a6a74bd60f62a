//! Controls, tracking cost, the Ekeland metric, spike variations, ball
//! projection, and the convex state-constraint machinery (observable map,
//! distance to the admissible set, penalized functional).

use crate::error::{Error, Result};
use crate::field::{
    Grid, ScalarField, VectorField, inner_scalar, inner_vector, norm_l2_vector,
    time_weight,
};
use crate::forward::{StateTrajectory, TimeGrid};

/// Tracking targets `(rho_d, u_d)`. A single entry means a steady target
/// used at every time sample.
#[derive(Debug, Clone)]
pub struct TrackingTargets {
    pub rho_d: Vec<ScalarField>,
    pub u_d: Vec<VectorField>,
}

impl TrackingTargets {
    pub fn zero(grid: Grid) -> Self {
        TrackingTargets {
            rho_d: vec![ScalarField::zeros(grid)],
            u_d: vec![VectorField::zeros(grid)],
        }
    }

    pub fn steady(rho_d: ScalarField, u_d: VectorField) -> Self {
        TrackingTargets { rho_d: vec![rho_d], u_d: vec![u_d] }
    }

    #[inline]
    pub fn rho_at(&self, n: usize) -> &ScalarField {
        &self.rho_d[n.min(self.rho_d.len() - 1)]
    }

    #[inline]
    pub fn u_at(&self, n: usize) -> &VectorField {
        &self.u_d[n.min(self.u_d.len() - 1)]
    }
}

/// Piecewise-constant-in-time distributed control: sample `n` acts on
/// `[t_n, t_{n+1})`, so there are `n_steps` samples. Each sample must stay in
/// the closed spatial-`L^2` ball of radius `radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    pub time: TimeGrid,
    pub radius: f64,
    pub values: Vec<VectorField>,
}

impl ControlField {
    pub fn zeros(grid: Grid, time: TimeGrid, radius: f64) -> Self {
        ControlField {
            time,
            radius,
            values: vec![VectorField::zeros(grid); time.n_steps],
        }
    }

    pub fn n_samples(&self) -> usize {
        self.values.len()
    }

    /// `L^2(0,T; L^2)` norm; exact for piecewise-constant controls.
    pub fn norm_l2l2(&self) -> f64 {
        let dt = self.time.dt();
        self.values
            .iter()
            .map(|v| {
                let s = norm_l2_vector(v);
                dt * s * s
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Largest per-sample spatial norm.
    pub fn max_sample_norm(&self) -> f64 {
        self.values.iter().map(norm_l2_vector).fold(0.0, f64::max)
    }

    /// Project every time sample onto the admissible ball.
    pub fn project(&mut self) {
        for v in self.values.iter_mut() {
            project_sample_in_place(v, self.radius);
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &ControlField) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.values.iter_mut() {
            v.scale(alpha);
        }
    }

    /// `L^2(0,T; L^2)` inner product with another control.
    pub fn inner(&self, other: &ControlField) -> f64 {
        let dt = self.time.dt();
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| dt * inner_vector(a, b).expect("same grid"))
            .sum()
    }
}

/// Ball projection of one spatial sample.
pub fn project_to_ball(g: &VectorField, radius: f64) -> VectorField {
    let mut out = g.clone();
    project_sample_in_place(&mut out, radius);
    out
}

fn project_sample_in_place(v: &mut VectorField, radius: f64) {
    let n = norm_l2_vector(v);
    if n > radius {
        v.scale(radius / n);
    }
}

/// Ekeland metric: measure of the set of time samples where the controls
/// differ (exact field inequality), as `count * dt`.
pub fn ekeland_distance(a: &ControlField, b: &ControlField) -> f64 {
    let dt = a.time.dt();
    let mut count = 0usize;
    for (x, y) in a.values.iter().zip(&b.values) {
        if x != y {
            count += 1;
        }
    }
    count as f64 * dt
}

/// Spike variation: the control equal to `w` on `(tau - h, tau)` and to `u`
/// elsewhere. `tau` and `h` must align with the time grid.
pub fn spike_variation(
    u: &ControlField,
    tau: f64,
    h: f64,
    w: &VectorField,
) -> Result<ControlField> {
    let dt = u.time.dt();
    let align = |x: f64| -> Result<usize> {
        let k = (x / dt).round();
        if (x - k * dt).abs() > 1e-9 * dt.max(x) {
            return Err(Error::MisalignedSpike(format!(
                "{x} is not a multiple of dt = {dt}"
            )));
        }
        Ok(k as usize)
    };
    let n_tau = align(tau)?;
    let k = align(h)?;
    if k == 0 || k > n_tau || n_tau > u.time.n_steps {
        return Err(Error::MisalignedSpike(format!(
            "need 0 < h <= tau <= T, got h = {h}, tau = {tau}"
        )));
    }
    let w_norm = norm_l2_vector(w);
    if w_norm > u.radius * (1.0 + 1e-12) {
        return Err(Error::ControlOutsideBall { norm: w_norm, radius: u.radius });
    }
    let mut out = u.clone();
    for n in (n_tau - k)..n_tau {
        out.values[n] = w.clone();
    }
    Ok(out)
}

/// Cost breakdown per the tracking functional; each `tracking_*` /
/// `control_energy` entry is a squared Bochner norm.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct CostReport {
    pub tracking_rho: f64,
    pub tracking_u: f64,
    pub control_energy: f64,
    pub total: f64,
}

/// `J = 1/2 ∫ (|rho - rho_d|^2 + |u - u_d|^2 + |U|^2) dt`, with trapezoid
/// time quadrature on the state terms and exact (rectangle) quadrature on
/// the piecewise-constant control term.
pub fn evaluate_cost(
    traj: &StateTrajectory,
    control: &ControlField,
    targets: &TrackingTargets,
) -> Result<CostReport> {
    let n = traj.time.n_steps;
    let dt = traj.time.dt();
    let mut tr_rho = 0.0;
    let mut tr_u = 0.0;
    for i in 0..=n {
        let mut dr = traj.rho[i].clone();
        dr.axpy(-1.0, targets.rho_at(i));
        let mut du = traj.u[i].clone();
        du.axpy(-1.0, targets.u_at(i));
        let w = time_weight(i, n) * dt;
        tr_rho += w * inner_scalar(&dr, &dr)?;
        tr_u += w * inner_vector(&du, &du)?;
    }
    let ce = {
        let s = control.norm_l2l2();
        s * s
    };
    Ok(CostReport {
        tracking_rho: tr_rho,
        tracking_u: tr_u,
        control_energy: ce,
        total: 0.5 * (tr_rho + tr_u + ce),
    })
}

// ---------------------------------------------------------------------------
// Observable space and convex state constraints
// ---------------------------------------------------------------------------

/// An element of the observable space: a pair of time-sampled fields with
/// the same shape as a state trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsElement {
    pub time: TimeGrid,
    pub rho: Vec<ScalarField>,
    pub u: Vec<VectorField>,
}

impl ObsElement {
    pub fn zeros(grid: Grid, time: TimeGrid) -> Self {
        ObsElement {
            time,
            rho: vec![ScalarField::zeros(grid); time.n_steps + 1],
            u: vec![VectorField::zeros(grid); time.n_steps + 1],
        }
    }

    pub fn inner(&self, other: &ObsElement) -> f64 {
        let n = self.time.n_steps;
        let dt = self.time.dt();
        let mut s = 0.0;
        for i in 0..=n {
            let w = time_weight(i, n) * dt;
            s += w * inner_scalar(&self.rho[i], &other.rho[i]).expect("same grid");
            s += w * inner_vector(&self.u[i], &other.u[i]).expect("same grid");
        }
        s
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn axpy(&mut self, alpha: f64, other: &ObsElement) {
        for (a, b) in self.rho.iter_mut().zip(&other.rho) {
            a.axpy(alpha, b);
        }
        for (a, b) in self.u.iter_mut().zip(&other.u) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.rho.iter_mut() {
            a.scale(alpha);
        }
        for a in self.u.iter_mut() {
            a.scale(alpha);
        }
    }
}

/// Linear observable map applied to the state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Observable {
    /// `F(rho, u) = (c_rho * rho, c_u * u)` pointwise.
    IdentityScaling { c_rho: f64, c_u: f64 },
    /// Separable box-kernel spatial average of half-width `half_width`
    /// applied to both fields (zero-padded, constant normalization, so the
    /// kernel matrix is symmetric).
    KernelAverage { half_width: usize, c_rho: f64, c_u: f64 },
}

fn kernel_1d(grid: &Grid, data: &[f64], half_width: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let norm = 1.0 / (2 * half_width + 1) as f64;
    for axis in 0..grid.dim {
        let mut next = vec![0.0; cur.len()];
        grid.for_each_line(axis, |base, stride, len| {
            for i in 0..len {
                let mut s = 0.0;
                let lo = i.saturating_sub(half_width);
                let hi = (i + half_width).min(len - 1);
                for j in lo..=hi {
                    s += cur[base + j * stride];
                }
                next[base + i * stride] = s * norm;
            }
        });
        cur = next;
    }
    cur
}

/// Weighted transpose of `kernel_1d`: `K* = W^{-1} K W` (the kernel matrix is
/// symmetric in the plain dot product; conjugation makes it exactly
/// self-adjoint in the quadrature-weighted inner product).
fn kernel_1d_weighted_transpose(grid: &Grid, data: &[f64], half_width: usize) -> Vec<f64> {
    let weighted: Vec<f64> =
        (0..data.len()).map(|i| data[i] * grid.node_weight(i)).collect();
    let smoothed = kernel_1d(grid, &weighted, half_width);
    (0..data.len())
        .map(|i| smoothed[i] / grid.node_weight(i))
        .collect()
}

impl Observable {
    /// `F(rho, u)` over a full trajectory.
    pub fn apply(&self, traj: &StateTrajectory) -> ObsElement {
        let grid = traj.rho[0].grid;
        match self {
            Observable::IdentityScaling { c_rho, c_u } => ObsElement {
                time: traj.time,
                rho: traj.rho.iter().map(|r| r.map(|v| c_rho * v)).collect(),
                u: traj
                    .u
                    .iter()
                    .map(|u| {
                        let mut s = u.clone();
                        s.scale(*c_u);
                        s
                    })
                    .collect(),
            },
            Observable::KernelAverage { half_width, c_rho, c_u } => ObsElement {
                time: traj.time,
                rho: traj
                    .rho
                    .iter()
                    .map(|r| {
                        let mut d = kernel_1d(&grid, &r.data, *half_width);
                        for v in d.iter_mut() {
                            *v *= c_rho;
                        }
                        ScalarField { grid, data: d }
                    })
                    .collect(),
                u: traj
                    .u
                    .iter()
                    .map(|u| {
                        let comps = u
                            .comps
                            .iter()
                            .map(|c| {
                                let mut d = kernel_1d(&grid, c, *half_width);
                                for v in d.iter_mut() {
                                    *v *= c_u;
                                }
                                d
                            })
                            .collect();
                        VectorField { grid, comps }
                    })
                    .collect(),
            },
        }
    }

    /// Adjoint `[F]* a` in the quadrature-weighted inner products, returned
    /// as per-sample source fields `([F_rho]* a, [F_u]* a)`.
    pub fn apply_adjoint(&self, a: &ObsElement) -> (Vec<ScalarField>, Vec<VectorField>) {
        let grid = a.rho[0].grid;
        match self {
            Observable::IdentityScaling { c_rho, c_u } => (
                a.rho.iter().map(|r| r.map(|v| c_rho * v)).collect(),
                a.u.iter()
                    .map(|u| {
                        let mut s = u.clone();
                        s.scale(*c_u);
                        s
                    })
                    .collect(),
            ),
            Observable::KernelAverage { half_width, c_rho, c_u } => (
                a.rho
                    .iter()
                    .map(|r| {
                        let mut d = kernel_1d_weighted_transpose(&grid, &r.data, *half_width);
                        for v in d.iter_mut() {
                            *v *= c_rho;
                        }
                        ScalarField { grid, data: d }
                    })
                    .collect(),
                a.u.iter()
                    .map(|u| {
                        let comps = u
                            .comps
                            .iter()
                            .map(|c| {
                                let mut d =
                                    kernel_1d_weighted_transpose(&grid, c, *half_width);
                                for v in d.iter_mut() {
                                    *v *= c_u;
                                }
                                d
                            })
                            .collect();
                        VectorField { grid, comps }
                    })
                    .collect(),
            ),
        }
    }
}

/// The convex admissible set `W` in the observable space.
#[derive(Debug, Clone)]
pub enum SetW {
    /// No state constraint (`d_W == 0`).
    WholeSpace,
    /// Closed ball of radius `radius` around `center`.
    Ball { center: ObsElement, radius: f64 },
    /// Box constraints `lo_i <= <phi_i, x> <= hi_i` on finitely many
    /// pairwise-orthogonal averaged functionals `phi_i`.
    Box { functionals: Vec<ObsElement>, lo: Vec<f64>, hi: Vec<f64> },
}

impl SetW {
    /// Validate internal consistency (box functionals must be pairwise
    /// orthogonal and nonzero for the projection formula to be exact).
    pub fn validate(&self) -> Result<()> {
        if let SetW::Box { functionals, lo, hi } = self {
            if functionals.len() != lo.len() || functionals.len() != hi.len() {
                return Err(Error::Config {
                    key: "constraint.box".into(),
                    message: "functionals, lo, hi must have equal length".into(),
                });
            }
            for (i, f) in functionals.iter().enumerate() {
                let ni = f.norm();
                if ni == 0.0 {
                    return Err(Error::Config {
                        key: "constraint.box".into(),
                        message: format!("functional {i} is zero"),
                    });
                }
                if lo[i] > hi[i] {
                    return Err(Error::Config {
                        key: "constraint.box".into(),
                        message: format!("lo[{i}] > hi[{i}]"),
                    });
                }
                for (j, g) in functionals.iter().enumerate().skip(i + 1) {
                    let ip = f.inner(g).abs();
                    if ip > 1e-10 * ni * g.norm() {
                        return Err(Error::Config {
                            key: "constraint.box".into(),
                            message: format!("functionals {i} and {j} are not orthogonal"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Distance `d_W(x)` and (when positive) the unit subgradient
    /// `eta = (x - P_W x) / d_W(x)`.
    pub fn distance(&self, x: &ObsElement) -> (f64, Option<ObsElement>) {
        match self {
            SetW::WholeSpace => (0.0, None),
            SetW::Ball { center, radius } => {
                let mut diff = x.clone();
                diff.axpy(-1.0, center);
                let n = diff.norm();
                let d = (n - radius).max(0.0);
                if d > 0.0 {
                    diff.scale(1.0 / n);
                    (d, Some(diff))
                } else {
                    (0.0, None)
                }
            }
            SetW::Box { functionals, lo, hi } => {
                let mut d2 = 0.0;
                let mut dir: Option<ObsElement> = None;
                for (i, phi) in functionals.iter().enumerate() {
                    let y = phi.inner(x);
                    let excess = if y > hi[i] {
                        y - hi[i]
                    } else if y < lo[i] {
                        y - lo[i]
                    } else {
                        0.0
                    };
                    if excess != 0.0 {
                        let n2 = phi.inner(phi);
                        d2 += excess * excess / n2;
                        let dir = dir.get_or_insert_with(|| {
                            let mut z = x.clone();
                            z.scale(0.0);
                            z
                        });
                        dir.axpy(excess / n2, phi);
                    }
                }
                if d2 > 0.0 {
                    let d = d2.sqrt();
                    let mut eta = dir.unwrap();
                    eta.scale(1.0 / d);
                    (d, Some(eta))
                } else {
                    (0.0, None)
                }
            }
        }
    }

    /// Sample a point of `W` (interior or boundary mix) for normal-cone
    /// sweeps. `t` in `[0,1]` scales from the "center" toward the boundary.
    pub fn sample(&self, reference: &ObsElement, direction: &ObsElement, t: f64) -> ObsElement {
        match self {
            SetW::WholeSpace => {
                let mut x = reference.clone();
                x.axpy(t, direction);
                x
            }
            SetW::Ball { center, radius } => {
                let n = direction.norm();
                let mut x = center.clone();
                if n > 0.0 {
                    x.axpy(t * radius / n, direction);
                }
                x
            }
            SetW::Box { functionals, lo, hi } => {
                // project the perturbed reference back into the box
                let mut x = reference.clone();
                x.axpy(t, direction);
                for (i, phi) in functionals.iter().enumerate() {
                    let y = phi.inner(&x);
                    let clipped = y.clamp(lo[i], hi[i]);
                    if clipped != y {
                        x.axpy((clipped - y) / phi.inner(phi), phi);
                    }
                }
                x
            }
        }
    }
}

/// Observable map plus admissible set.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub observable: Observable,
    pub set: SetW,
}

impl ConstraintSpec {
    pub fn inactive() -> Self {
        ConstraintSpec {
            observable: Observable::IdentityScaling { c_rho: 1.0, c_u: 1.0 },
            set: SetW::WholeSpace,
        }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self.set, SetW::WholeSpace)
    }
}

/// One evaluation of the penalized functional
/// `J_eps = sqrt((J - J* + eps)^2 + d_W(F)^2)` with its multiplier pair.
#[derive(Debug, Clone)]
pub struct PenaltyEval {
    pub j_eps: f64,
    pub d_w: f64,
    pub lambda_eps: f64,
    pub a_eps_norm: f64,
    /// `a_eps = (d_W / J_eps) * eta`; `None` when the constraint is inactive.
    pub a_eps: Option<ObsElement>,
}

pub fn penalized_cost(
    j: f64,
    observable_value: &ObsElement,
    set: &SetW,
    eps: f64,
    j_star: f64,
) -> PenaltyEval {
    let (d_w, eta) = set.distance(observable_value);
    let shift = j - j_star + eps;
    let j_eps = (shift * shift + d_w * d_w).sqrt();
    let lambda_eps = shift / j_eps;
    let a_eps = eta.map(|mut e| {
        e.scale(d_w / j_eps);
        e
    });
    let a_eps_norm = d_w / j_eps;
    PenaltyEval {
        j_eps,
        d_w,
        lambda_eps,
        a_eps_norm: if d_w > 0.0 { a_eps_norm } else { 0.0 },
        a_eps,
    }
}
