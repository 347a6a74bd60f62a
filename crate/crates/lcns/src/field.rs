//! Structured-grid field containers and discrete differential operators.
//!
//! All solvers in this crate work on node-centered uniform grids over an
//! axis-aligned box. Derivatives are second-order central in the interior
//! with second-order one-sided stencils on the boundary. Exact (weighted)
//! transposes of every linear operator are provided so a discrete adjoint
//! can be built that pairs with the forward scheme to machine precision.

use crate::error::{Error, Result};

/// Uniform node-centered grid on an axis-aligned box.
///
/// Along an active axis `a` the nodes sit at `origin[a] + i * spacing[a]`
/// for `i = 0..extents[a]`, so the boundary lies on nodes. Inactive axes
/// (beyond `dim`) carry extent 1 and spacing 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dim: usize,
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    /// Grid over `[0, 1]^dim` with `n` nodes per axis.
    pub fn unit_box(dim: usize, n: usize) -> Result<Self> {
        let mut extents = [1usize; 3];
        let mut spacing = [1.0f64; 3];
        for a in 0..dim {
            extents[a] = n;
            spacing[a] = 1.0 / (n as f64 - 1.0);
        }
        let g = Grid { dim, extents, spacing, origin: [0.0; 3] };
        g.validate()?;
        Ok(g)
    }

    pub fn new(dim: usize, extents_in: &[usize], lengths: &[f64]) -> Result<Self> {
        let mut extents = [1usize; 3];
        let mut spacing = [1.0f64; 3];
        for a in 0..dim {
            extents[a] = extents_in[a];
            spacing[a] = lengths[a] / (extents_in[a] as f64 - 1.0);
        }
        let g = Grid { dim, extents, spacing, origin: [0.0; 3] };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::GridMismatch(format!("dim {} not in 1..=3", self.dim)));
        }
        for a in 0..self.dim {
            if self.extents[a] < 4 {
                return Err(Error::GridMismatch(format!(
                    "axis {a} has {} nodes, need at least 4",
                    self.extents[a]
                )));
            }
            if !(self.spacing[a] > 0.0) {
                return Err(Error::GridMismatch(format!("axis {a} spacing must be positive")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn n_points(&self) -> usize {
        self.extents[0] * self.extents[1] * self.extents[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.extents[0] * (j + self.extents[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.extents[0];
        let j = (idx / self.extents[0]) % self.extents[1];
        let k = idx / (self.extents[0] * self.extents[1]);
        [i, j, k]
    }

    #[inline]
    pub fn position(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        [
            self.origin[0] + c[0] as f64 * self.spacing[0],
            self.origin[1] + c[1] as f64 * self.spacing[1],
            self.origin[2] + c[2] as f64 * self.spacing[2],
        ]
    }

    #[inline]
    pub fn is_boundary(&self, idx: usize) -> bool {
        let c = self.coords(idx);
        (0..self.dim).any(|a| c[a] == 0 || c[a] + 1 == self.extents[a])
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.extents[0],
            _ => self.extents[0] * self.extents[1],
        }
    }

    /// Trapezoid quadrature weight of a node (volume units).
    pub fn node_weight(&self, idx: usize) -> f64 {
        let c = self.coords(idx);
        let mut w = 1.0;
        for a in 0..self.dim {
            w *= self.spacing[a]
                * if c[a] == 0 || c[a] + 1 == self.extents[a] { 0.5 } else { 1.0 };
        }
        w
    }

    pub fn node_weights(&self) -> Vec<f64> {
        (0..self.n_points()).map(|i| self.node_weight(i)).collect()
    }

    /// Volume of the box.
    pub fn volume(&self) -> f64 {
        (0..self.dim)
            .map(|a| self.spacing[a] * (self.extents[a] as f64 - 1.0))
            .product()
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing[a]).fold(f64::INFINITY, f64::min)
    }

    /// Visit every 1D line of nodes along `axis`: calls `f(base, stride, len)`.
    pub fn for_each_line<F: FnMut(usize, usize, usize)>(&self, axis: usize, mut f: F) {
        let stride = self.stride(axis);
        let len = self.extents[axis];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for kb in 0..self.extents[ob] {
            for ka in 0..self.extents[oa] {
                let mut c = [0usize; 3];
                c[oa] = ka;
                c[ob] = kb;
                f(self.index(c[0], c[1], c[2]), stride, len);
            }
        }
    }
}

fn check_same_grid(a: &Grid, b: &Grid) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch("fields live on different grids".into()));
    }
    Ok(())
}

/// One real value per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        ScalarField { grid, data: vec![0.0; grid.n_points()] }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        ScalarField { grid, data: vec![c; grid.n_points()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> f64) -> Self {
        let data = (0..grid.n_points()).map(|i| f(grid.position(i))).collect();
        ScalarField { grid, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField { grid: self.grid, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn axpy(&mut self, alpha: f64, other: &ScalarField) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.data.iter_mut() {
            *a *= alpha;
        }
    }

    /// Pointwise product.
    pub fn mul(&self, other: &ScalarField) -> Self {
        ScalarField {
            grid: self.grid,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    }
}

/// `dim` real values per node, stored component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    pub comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        VectorField { grid, comps: vec![vec![0.0; grid.n_points()]; grid.dim] }
    }

    pub fn from_fns(grid: Grid, f: impl Fn(usize, [f64; 3]) -> f64) -> Self {
        let comps = (0..grid.dim)
            .map(|c| (0..grid.n_points()).map(|i| f(c, grid.position(i))).collect())
            .collect();
        VectorField { grid, comps }
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn axpy(&mut self, alpha: f64, other: &VectorField) {
        for (c, oc) in self.comps.iter_mut().zip(&other.comps) {
            for (a, b) in c.iter_mut().zip(oc) {
                *a += alpha * b;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for c in self.comps.iter_mut() {
            for a in c.iter_mut() {
                *a *= alpha;
            }
        }
    }

    /// Multiply every component pointwise by a scalar field.
    pub fn mul_scalar_field(&self, s: &ScalarField) -> Self {
        VectorField {
            grid: self.grid,
            comps: self
                .comps
                .iter()
                .map(|c| c.iter().zip(&s.data).map(|(a, b)| a * b).collect())
                .collect(),
        }
    }

    /// Zero out all boundary nodes (strong no-slip enforcement).
    pub fn zero_boundary(&mut self) {
        for idx in 0..self.grid.n_points() {
            if self.grid.is_boundary(idx) {
                for c in self.comps.iter_mut() {
                    c[idx] = 0.0;
                }
            }
        }
    }

    pub fn boundary_trace_max(&self) -> f64 {
        let mut m: f64 = 0.0;
        for idx in 0..self.grid.n_points() {
            if self.grid.is_boundary(idx) {
                for c in &self.comps {
                    m = m.max(c[idx].abs());
                }
            }
        }
        m
    }
}

/// Shear/bulk viscosities with the derived Lame-type coefficient
/// `lam = eta - (2/3) mu`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FluidParams {
    pub mu: f64,
    pub eta: f64,
    pub lam: f64,
}

impl FluidParams {
    pub fn new(mu: f64, eta: f64) -> Result<Self> {
        let lam = eta - (2.0 / 3.0) * mu;
        if !(mu > 0.0) {
            return Err(Error::ParameterViolation(format!("mu = {mu} must be positive")));
        }
        if !(eta >= 0.0) {
            return Err(Error::ParameterViolation(format!("eta = {eta} must be nonnegative")));
        }
        if !(4.0 * mu + 3.0 * lam > 0.0) {
            return Err(Error::ParameterViolation(format!(
                "4*mu + 3*lam = {} must be positive",
                4.0 * mu + 3.0 * lam
            )));
        }
        Ok(FluidParams { mu, eta, lam })
    }

    /// Construct from the Lame pair directly. `lam` may be negative, but
    /// `4 mu + 3 lam` must stay positive.
    pub fn from_lame(mu: f64, lam: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::ParameterViolation(format!("mu = {mu} must be positive")));
        }
        if !(4.0 * mu + 3.0 * lam > 0.0) {
            return Err(Error::ParameterViolation(format!(
                "4*mu + 3*lam = {} must be positive",
                4.0 * mu + 3.0 * lam
            )));
        }
        Ok(FluidParams { mu, eta: lam + (2.0 / 3.0) * mu, lam })
    }
}

// ---------------------------------------------------------------------------
// First derivatives
// ---------------------------------------------------------------------------

/// First derivative along `axis`: central interior, one-sided second order at
/// the two boundary nodes of each line.
pub fn deriv_axis(grid: &Grid, data: &[f64], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    if axis >= grid.dim {
        return out;
    }
    let h = grid.spacing[axis];
    grid.for_each_line(axis, |base, stride, len| {
        let at = |i: usize| data[base + i * stride];
        out[base] = (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h);
        for i in 1..len - 1 {
            out[base + i * stride] = (at(i + 1) - at(i - 1)) / (2.0 * h);
        }
        out[base + (len - 1) * stride] =
            (3.0 * at(len - 1) - 4.0 * at(len - 2) + at(len - 3)) / (2.0 * h);
    });
    out
}

/// Plain (unweighted) transpose of `deriv_axis`.
pub fn deriv_axis_transpose(grid: &Grid, data: &[f64], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    if axis >= grid.dim {
        return out;
    }
    let h = grid.spacing[axis];
    grid.for_each_line(axis, |base, stride, len| {
        let at = |i: usize| data[base + i * stride];
        // scatter of the gather in deriv_axis
        let mut add = |i: usize, v: f64| out[base + i * stride] += v;
        add(0, -3.0 * at(0) / (2.0 * h));
        add(1, 4.0 * at(0) / (2.0 * h));
        add(2, -at(0) / (2.0 * h));
        for i in 1..len - 1 {
            let v = at(i) / (2.0 * h);
            add(i + 1, v);
            add(i - 1, -v);
        }
        let v = at(len - 1) / (2.0 * h);
        add(len - 1, 3.0 * v);
        add(len - 2, -4.0 * v);
        add(len - 3, v);
    });
    out
}

/// Second derivative along `axis`: compact 3-point interior, one-sided
/// second order at boundary nodes.
pub fn second_deriv_axis(grid: &Grid, data: &[f64], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    if axis >= grid.dim {
        return out;
    }
    let h2 = grid.spacing[axis] * grid.spacing[axis];
    grid.for_each_line(axis, |base, stride, len| {
        let at = |i: usize| data[base + i * stride];
        out[base] = (2.0 * at(0) - 5.0 * at(1) + 4.0 * at(2) - at(3)) / h2;
        for i in 1..len - 1 {
            out[base + i * stride] = (at(i + 1) - 2.0 * at(i) + at(i - 1)) / h2;
        }
        out[base + (len - 1) * stride] =
            (2.0 * at(len - 1) - 5.0 * at(len - 2) + 4.0 * at(len - 3) - at(len - 4)) / h2;
    });
    out
}

// ---------------------------------------------------------------------------
// Composite operators
// ---------------------------------------------------------------------------

pub fn grad(s: &ScalarField) -> VectorField {
    let comps = (0..s.grid.dim).map(|a| deriv_axis(&s.grid, &s.data, a)).collect();
    VectorField { grid: s.grid, comps }
}

pub fn div(v: &VectorField) -> ScalarField {
    let mut data = vec![0.0; v.grid.n_points()];
    for a in 0..v.grid.dim {
        let d = deriv_axis(&v.grid, &v.comps[a], a);
        for (o, x) in data.iter_mut().zip(d) {
            *o += x;
        }
    }
    ScalarField { grid: v.grid, data }
}

pub fn laplacian_scalar(s: &ScalarField) -> ScalarField {
    let mut data = vec![0.0; s.grid.n_points()];
    for a in 0..s.grid.dim {
        let d = second_deriv_axis(&s.grid, &s.data, a);
        for (o, x) in data.iter_mut().zip(d) {
            *o += x;
        }
    }
    ScalarField { grid: s.grid, data }
}

/// `div S(grad u) = mu * Lap u + (mu + lam) * grad div u` on general fields,
/// valid at every node (one-sided stencils on the boundary).
pub fn stress_div(u: &VectorField, p: &FluidParams) -> VectorField {
    let g = u.grid;
    let d = div(u);
    let grad_div = grad(&d);
    let mut out = VectorField::zeros(g);
    for c in 0..g.dim {
        let mut lap = vec![0.0; g.n_points()];
        for a in 0..g.dim {
            let dd = second_deriv_axis(&g, &u.comps[c], a);
            for (o, x) in lap.iter_mut().zip(dd) {
                *o += x;
            }
        }
        for i in 0..g.n_points() {
            out.comps[c][i] = p.mu * lap[i] + (p.mu + p.lam) * grad_div.comps[c][i];
        }
    }
    out
}

/// `div S(grad u)` specialized to no-slip fields: evaluated at interior nodes
/// only (boundary output zero) with compact symmetric stencils, using the
/// boundary values of `u` (zero for a no-slip field) directly.
///
/// Restricted to interior nodes this operator is a symmetric matrix, which is
/// what makes the implicit viscous solve SPD in the density-weighted inner
/// product and the discrete adjoint exactly transposable.
pub fn stress_div_noslip(u: &VectorField, p: &FluidParams) -> VectorField {
    let g = u.grid;
    let n = g.n_points();
    let mut out = VectorField::zeros(g);
    for c in 0..g.dim {
        // mu * Lap u_c with compact 3-point stencils
        for a in 0..g.dim {
            let h2 = g.spacing[a] * g.spacing[a];
            let stride = g.stride(a);
            for idx in 0..n {
                if g.is_boundary(idx) {
                    continue;
                }
                let v = (u.comps[c][idx + stride] - 2.0 * u.comps[c][idx]
                    + u.comps[c][idx - stride])
                    / h2;
                out.comps[c][idx] += p.mu * v;
            }
        }
        // (mu + lam) * d_c d_j u_j
        for j in 0..g.dim {
            if j == c {
                let h2 = g.spacing[c] * g.spacing[c];
                let stride = g.stride(c);
                for idx in 0..n {
                    if g.is_boundary(idx) {
                        continue;
                    }
                    let v = (u.comps[j][idx + stride] - 2.0 * u.comps[j][idx]
                        + u.comps[j][idx - stride])
                        / h2;
                    out.comps[c][idx] += (p.mu + p.lam) * v;
                }
            } else {
                let sc = g.stride(c);
                let sj = g.stride(j);
                let denom = 4.0 * g.spacing[c] * g.spacing[j];
                for idx in 0..n {
                    if g.is_boundary(idx) {
                        continue;
                    }
                    let v = (u.comps[j][idx + sc + sj] - u.comps[j][idx + sc - sj]
                        - u.comps[j][idx - sc + sj]
                        + u.comps[j][idx - sc - sj])
                        / denom;
                    out.comps[c][idx] += (p.mu + p.lam) * v;
                }
            }
        }
    }
    out
}

/// Upwind advection `w . grad s` of scalar data, first order, with the
/// difference direction chosen against the local flow. Boundary nodes fall
/// back to the available one-sided difference.
pub fn advect_upwind(grid: &Grid, w: &VectorField, data: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for a in 0..grid.dim {
        let h = grid.spacing[a];
        grid.for_each_line(a, |base, stride, len| {
            let at = |i: usize| data[base + i * stride];
            for i in 0..len {
                let idx = base + i * stride;
                let vel = w.comps[a][idx];
                let d = if i == 0 {
                    vel * (at(1) - at(0)) / h
                } else if i == len - 1 {
                    vel * (at(len - 1) - at(len - 2)) / h
                } else if vel >= 0.0 {
                    vel * (at(i) - at(i - 1)) / h
                } else {
                    vel * (at(i + 1) - at(i)) / h
                };
                out[idx] += d;
            }
        });
    }
    out
}

/// Plain transpose of `advect_upwind` in its scalar argument (the advecting
/// field `w` is a coefficient).
pub fn advect_upwind_transpose(grid: &Grid, w: &VectorField, data: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for a in 0..grid.dim {
        let h = grid.spacing[a];
        grid.for_each_line(a, |base, stride, len| {
            for i in 0..len {
                let idx = base + i * stride;
                let vel = w.comps[a][idx];
                let q = data[idx];
                if i == 0 {
                    out[base + stride] += vel * q / h;
                    out[base] -= vel * q / h;
                } else if i == len - 1 {
                    out[base + (len - 1) * stride] += vel * q / h;
                    out[base + (len - 2) * stride] -= vel * q / h;
                } else if vel >= 0.0 {
                    out[idx] += vel * q / h;
                    out[idx - stride] -= vel * q / h;
                } else {
                    out[idx + stride] += vel * q / h;
                    out[idx] -= vel * q / h;
                }
            }
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Inner products and norms
// ---------------------------------------------------------------------------

pub fn inner_scalar(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    check_same_grid(&a.grid, &b.grid)?;
    let mut s = 0.0;
    for i in 0..a.data.len() {
        s += a.grid.node_weight(i) * a.data[i] * b.data[i];
    }
    Ok(s)
}

pub fn inner_vector(a: &VectorField, b: &VectorField) -> Result<f64> {
    check_same_grid(&a.grid, &b.grid)?;
    let mut s = 0.0;
    for c in 0..a.grid.dim {
        for i in 0..a.comps[c].len() {
            s += a.grid.node_weight(i) * a.comps[c][i] * b.comps[c][i];
        }
    }
    Ok(s)
}

pub fn norm_l2_scalar(a: &ScalarField) -> f64 {
    inner_scalar(a, a).expect("same grid").sqrt()
}

pub fn norm_l2_vector(a: &VectorField) -> f64 {
    inner_vector(a, a).expect("same grid").sqrt()
}

pub fn norm_h1_scalar(a: &ScalarField) -> f64 {
    let g = grad(a);
    (inner_scalar(a, a).unwrap() + inner_vector(&g, &g).unwrap()).sqrt()
}

pub fn norm_h1_vector(a: &VectorField) -> f64 {
    let mut s = inner_vector(a, a).unwrap();
    for c in 0..a.grid.dim {
        let sc = ScalarField { grid: a.grid, data: a.comps[c].clone() };
        let g = grad(&sc);
        s += inner_vector(&g, &g).unwrap();
    }
    s.sqrt()
}

/// `L^p(Omega)` norm by trapezoid quadrature (scalar data).
pub fn lp_norm(grid: &Grid, data: &[f64], p: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..data.len() {
        s += grid.node_weight(i) * data[i].abs().powf(p);
    }
    s.powf(1.0 / p)
}

pub fn linf_norm(data: &[f64]) -> f64 {
    data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn linf_norm_vector(v: &VectorField) -> f64 {
    v.comps.iter().map(|c| linf_norm(c)).fold(0.0, f64::max)
}

/// Pointwise Euclidean magnitude of a vector field, as scalar data.
pub fn vector_magnitude(v: &VectorField) -> Vec<f64> {
    let n = v.grid.n_points();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for c in 0..v.grid.dim {
            s += v.comps[c][i] * v.comps[c][i];
        }
        out[i] = s.sqrt();
    }
    out
}

/// `L^2(0,T; L^2)` norm of a time series of spatial norms: trapezoid in time.
pub fn bochner_norm(spatial_norms: &[f64], dt: f64) -> f64 {
    if spatial_norms.len() < 2 {
        return 0.0;
    }
    let n = spatial_norms.len() - 1;
    let mut s = 0.0;
    for (i, v) in spatial_norms.iter().enumerate() {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        s += w * dt * v * v;
    }
    s.sqrt()
}

/// Trapezoid time weight for sample `i` of `0..=n`.
#[inline]
pub fn time_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n {
        0.5
    } else {
        1.0
    }
}
