//! Chance-constrained, stability-constrained optimal dispatch for
//! droop-controlled islanded microgrids.
//!
//! Pipeline: case ingestion → droop power-flow equilibrium → small-signal
//! linearization → Lyapunov SDP stability index → analytic sensitivities →
//! GMM uncertainty projection → Benders-decomposed master QP → Monte-Carlo
//! validation.

pub mod case;
pub mod ccopf;
pub mod fixtures;
pub mod gmm;
pub mod pf;
pub mod sdp;
pub mod sensitivity;
pub mod smallsignal;
pub mod stability;
pub mod validation;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("newton did not converge after {iters} iterations (residual {residual:.3e})")]
    NonConvergence { iters: usize, residual: f64 },
    #[error("singular newton jacobian (last residual {residual:.3e})")]
    SingularNewtonJacobian { residual: f64 },
    #[error("algebraic block D is numerically singular (cond estimate {cond:.3e})")]
    SingularAlgebraicBlock { cond: f64 },
    #[error("sdp reported infeasible ({status})")]
    SdpInfeasible { status: String },
    #[error("solver failure: {status}")]
    SolverFailure { status: String },
    #[error("stability result not optimal (complementarity residual {residual:.3e})")]
    NotOptimal { residual: f64 },
    #[error("ill-conditioned equilibrium (cond estimate {cond:.3e})")]
    IllConditionedEquilibrium { cond: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sensitivity inputs anchored at different equilibria")]
    AnchorMismatch,
    #[error("master problem infeasible: {0}")]
    InfeasibleMaster(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("countermeasure round cap exceeded")]
    RoundCapExceeded,
}

pub type Result<T> = std::result::Result<T, Error>;
