//! Shared optimization primitives: exact simplex-constrained least squares
//! (governor), L-BFGS with a strong-Wolfe line search (training), and a
//! primal active-set QP over box plus two-sided linear constraints (SQP
//! subproblems).

mod lbfgs;
mod qp;
mod simplex_lsq;

pub use lbfgs::{minimize_lbfgs, LbfgsConfig, LbfgsOutcome};
pub use qp::solve_qp;
pub use simplex_lsq::solve_simplex_lsq;
