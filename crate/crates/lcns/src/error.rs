use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure modes of the
/// individual subsystems so callers can match on what actually went wrong.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("time step {dt} violates the CFL bound {bound} ({detail})")]
    CflViolation { dt: f64, bound: f64, detail: String },

    #[error("iterative linear solve diverged: residual {residual} after {iterations} iterations")]
    LinearSolveDiverged { residual: f64, iterations: usize },

    #[error("non-finite state detected at step {step} ({what})")]
    NonFiniteState { step: usize, what: String },

    #[error("base-state density positivity violated: min rho_tilde = {min_rho} < {floor}")]
    PositivityViolation { min_rho: f64, floor: f64 },

    #[error("base-state mass-equation residual {residual} exceeds tolerance {tol}")]
    MassResidual { residual: f64, tol: f64 },

    #[error("viscosity parameters invalid: {0}")]
    ParameterViolation(String),

    #[error("degenerate cost multiplier lambda = {0} (abnormal case)")]
    DegenerateMultiplier(f64),

    #[error("optimizer stagnated without convergence: residual {residual} after {iterations} iterations")]
    StagnationWithoutConvergence { residual: f64, iterations: usize },

    #[error("penalty continuation failed to reduce constraint distance (d_W {before} -> {after})")]
    InfeasiblePenalty { before: f64, after: f64 },

    #[error("spike variation misaligned: {0}")]
    MisalignedSpike(String),

    #[error("control sample outside the admissible ball: norm {norm} > R = {radius}")]
    ControlOutsideBall { norm: f64, radius: f64 },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("referenced file missing: {0}")]
    MissingFile(String),

    #[error("snapshot format error: {0}")]
    SnapshotFormat(String),

    #[error("expression parse error: {0}")]
    ExprParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
