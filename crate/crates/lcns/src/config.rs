//! Scenario configuration: plain TOML with a closed expression grammar for
//! manufactured fields. Parsing validates eagerly (unknown keys, CFL
//! preflight, referenced files) so runs fail before producing artifacts.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::adjoint::AdjointMode;
use crate::base::{BaseFamily, BaseState, PressureLaw};
use crate::control::{ConstraintSpec, ControlField, Observable, SetW, TrackingTargets};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::field::{FluidParams, Grid, ScalarField, VectorField};
use crate::forward::{TimeGrid, cfl_bound};
use crate::io::read_snapshot;
use crate::opt::OptimizeOptions;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub extent: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidConfig {
    pub mu: f64,
    #[serde(default)]
    pub eta: f64,
    /// overrides `eta` when present (allows negative second viscosity)
    pub lam: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PressureConfig {
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FieldInit {
    pub rho: Option<String>,
    pub u: Option<Vec<String>>,
    pub rho_file: Option<PathBuf>,
    pub u_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub rho: String,
    pub u: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub radius: f64,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub mode: Option<AdjointMode>,
    pub eps0: Option<f64>,
    pub n_eps: Option<usize>,
    pub feas_tol: Option<f64>,
    pub penalty_c0: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub observable: Observable,
    /// radius of the admissible ball around the zero observable
    pub ball_radius: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub n_samples: usize,
    /// spike time as a fraction of the horizon
    pub tau_fraction: f64,
    pub spike_widths: Vec<usize>,
    pub spike_w_u: Vec<String>,
    pub dependence_delta_u: Vec<String>,
    pub lame_extents: Vec<usize>,
    pub snapshot_stride: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 1,
            n_samples: 100,
            tau_fraction: 0.5,
            spike_widths: vec![8, 4, 2, 1],
            spike_w_u: vec!["0.3*sin(pi*x)".into()],
            dependence_delta_u: vec!["sin(pi*x)".into()],
            lame_extents: vec![17, 33, 65],
            snapshot_stride: 16,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub fluid: FluidConfig,
    pub base: BaseFamily,
    pub pressure: PressureConfig,
    #[serde(default)]
    pub initial: FieldInit,
    pub targets: TargetConfig,
    pub control: ControlConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub constraint: Option<ConstraintConfig>,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn cfg_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

fn parse_exprs(key: &str, src: &[String], expected: usize) -> Result<Vec<Expr>> {
    if src.len() != expected {
        return Err(cfg_err(key, format!("need {expected} component(s), got {}", src.len())));
    }
    src.iter().map(|s| Expr::parse(s)).collect()
}

/// Everything needed to run one scenario at a concrete resolution.
pub struct Realized {
    pub grid: Grid,
    pub time: TimeGrid,
    pub params: FluidParams,
    pub base: BaseState,
    pub rho0: ScalarField,
    pub u0: VectorField,
    pub targets: TrackingTargets,
    pub constraint: ConstraintSpec,
}

pub struct Scenario {
    pub config: ScenarioConfig,
    /// raw config file bytes (hashed into the manifest)
    pub raw: Vec<u8>,
    pub native: Realized,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig = toml::from_str(text)
            .map_err(|e| cfg_err("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.grid.dim == 0 || self.grid.dim > 3 {
            return Err(cfg_err("grid.dim", "must be 1, 2, or 3"));
        }
        if self.grid.extent < 4 {
            return Err(cfg_err("grid.extent", "need at least 4 nodes per axis"));
        }
        if !(self.time.t_final > 0.0) {
            return Err(cfg_err("time.t_final", "must be positive"));
        }
        if self.time.n_steps == 0 {
            return Err(cfg_err("time.n_steps", "must be positive"));
        }
        if !(self.control.radius > 0.0) {
            return Err(cfg_err("control.radius", "must be positive"));
        }
        for file in [&self.initial.rho_file, &self.initial.u_file].into_iter().flatten() {
            if !file.exists() {
                return Err(Error::MissingFile(file.display().to_string()));
            }
        }
        if let Some(c) = &self.constraint {
            if !(c.ball_radius > 0.0) {
                return Err(cfg_err("constraint.ball_radius", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn fluid_params(&self) -> Result<FluidParams> {
        match self.fluid.lam {
            Some(lam) => FluidParams::from_lame(self.fluid.mu, lam),
            None => FluidParams::new(self.fluid.mu, self.fluid.eta),
        }
    }

    pub fn optimize_options(&self, time: TimeGrid) -> OptimizeOptions {
        let mut o = OptimizeOptions::new(time, self.control.radius);
        let c = &self.optimizer;
        if let Some(v) = c.tol {
            o.tol = v;
        }
        if let Some(v) = c.max_iters {
            o.max_iters = v;
        }
        if let Some(v) = c.mode {
            o.mode = v;
        }
        if let Some(v) = c.eps0 {
            o.eps0 = v;
        }
        if let Some(v) = c.n_eps {
            o.n_eps = v;
        }
        if let Some(v) = c.feas_tol {
            o.feas_tol = v;
        }
        if let Some(v) = c.penalty_c0 {
            o.penalty_c0 = v;
        }
        o
    }

    /// Instantiate all scenario data at the given resolution. Refined
    /// certificate runs pass scaled `extent` / `n_steps`.
    pub fn realize(&self, extent: usize, n_steps: usize) -> Result<Realized> {
        let grid = Grid::unit_box(self.grid.dim, extent)?;
        let time = TimeGrid::new(self.time.t_final, n_steps)?;
        let params = self.fluid_params()?;
        let base = self
            .base
            .manufacture(grid, PressureLaw::new(self.pressure.coeffs.clone()), &params)?;
        let dt = time.dt();
        let bound = cfl_bound(&base);
        if dt > bound {
            return Err(Error::CflViolation {
                dt,
                bound,
                detail: "config preflight".into(),
            });
        }

        let native = extent == self.grid.extent;
        let rho0 = match (&self.initial.rho_file, &self.initial.rho) {
            (Some(path), _) => {
                if !native {
                    return Err(cfg_err(
                        "initial.rho_file",
                        "snapshot initial data cannot be re-gridded for refined checks",
                    ));
                }
                load_scalar(path, grid)?
            }
            (None, Some(src)) => {
                let e = Expr::parse(src)?;
                ScalarField::from_fn(grid, |p| e.eval(p, 0.0))
            }
            (None, None) => ScalarField::zeros(grid),
        };
        let u0 = match (&self.initial.u_file, &self.initial.u) {
            (Some(path), _) => {
                if !native {
                    return Err(cfg_err(
                        "initial.u_file",
                        "snapshot initial data cannot be re-gridded for refined checks",
                    ));
                }
                load_vector(path, grid)?
            }
            (None, Some(src)) => {
                let es = parse_exprs("initial.u", src, grid.dim)?;
                VectorField::from_fns(grid, |c, p| es[c].eval(p, 0.0))
            }
            (None, None) => VectorField::zeros(grid),
        };

        let rho_d_expr = Expr::parse(&self.targets.rho)?;
        let u_d_exprs = parse_exprs("targets.u", &self.targets.u, grid.dim)?;
        let steady =
            rho_d_expr.is_steady() && u_d_exprs.iter().all(|e| e.is_steady());
        let targets = if steady {
            TrackingTargets::steady(
                ScalarField::from_fn(grid, |p| rho_d_expr.eval(p, 0.0)),
                VectorField::from_fns(grid, |c, p| u_d_exprs[c].eval(p, 0.0)),
            )
        } else {
            let mut rho_d = Vec::with_capacity(n_steps + 1);
            let mut u_d = Vec::with_capacity(n_steps + 1);
            for t in time.times() {
                rho_d.push(ScalarField::from_fn(grid, |p| rho_d_expr.eval(p, t)));
                u_d.push(VectorField::from_fns(grid, |c, p| u_d_exprs[c].eval(p, t)));
            }
            TrackingTargets { rho_d, u_d }
        };

        let constraint = match &self.constraint {
            None => ConstraintSpec::inactive(),
            Some(c) => ConstraintSpec {
                observable: c.observable.clone(),
                set: SetW::Ball {
                    center: crate::control::ObsElement::zeros(grid, time),
                    radius: c.ball_radius,
                },
            },
        };

        Ok(Realized { grid, time, params, base, rho0, u0, targets, constraint })
    }
}

fn load_scalar(path: &Path, grid: Grid) -> Result<ScalarField> {
    let (g, comps) = read_snapshot(path)?;
    if g != grid || comps.len() != 1 {
        return Err(Error::GridMismatch(format!(
            "snapshot {} does not match the configured grid",
            path.display()
        )));
    }
    Ok(ScalarField { grid, data: comps.into_iter().next().unwrap() })
}

fn load_vector(path: &Path, grid: Grid) -> Result<VectorField> {
    let (g, comps) = read_snapshot(path)?;
    if g != grid || comps.len() != grid.dim {
        return Err(Error::GridMismatch(format!(
            "snapshot {} does not match the configured grid",
            path.display()
        )));
    }
    Ok(VectorField { grid, comps })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let raw = std::fs::read(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let text = String::from_utf8(raw.clone())
            .map_err(|e| cfg_err("config", format!("not UTF-8: {e}")))?;
        let config = ScenarioConfig::parse(&text)?;
        let native = config.realize(config.grid.extent, config.time.n_steps)?;
        Ok(Scenario { config, raw, native })
    }

    /// Same scenario with the grid spacing divided by `k` (node count scaled
    /// accordingly) and the step count multiplied by `m`.
    pub fn refined(&self, k: usize, m: usize) -> Result<Realized> {
        let extent = (self.config.grid.extent - 1) * k + 1;
        self.config.realize(extent, self.config.time.n_steps * m)
    }

    pub fn zero_control(&self) -> ControlField {
        ControlField::zeros(self.native.grid, self.native.time, self.config.control.radius)
    }
}
