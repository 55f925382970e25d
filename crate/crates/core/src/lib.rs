//! Multi-environment ensemble Q-learning over tabular MDPs, with
//! coverage-coefficient analysis.
//!
//! The crate builds up in layers:
//!
//! - [`mdp`] — finite discounted-cost MDPs, exact value iteration (the
//!   ground-truth oracle), trajectory stepping, policy-error metrics.
//! - [`wireless`] — parameterizable MISO/MIMO network model generators that
//!   produce [`mdp::TabularMdp`] instances of tunable size.
//! - [`synthesis`] — model estimation from trajectories and construction of
//!   the n-hop environment family (per-action transition matrix powers,
//!   discounted accumulated costs, discount `gamma^n`).
//! - [`env`] — a sampling view of any n-hop member that steps the base chain
//!   n times instead of materializing the matrix power.
//! - [`qlearning`] — epsilon-greedy tabular Q-learning with minimum-visit
//!   termination, trace recording, and a Double-Q baseline.
//! - [`ensemble`] — K coupled agents on K environments, periodic fusion into
//!   an ensemble estimate, feedback controlled by the update ratio `u`.
//! - [`coverage`] — exploration distributions, coverage coefficients, the
//!   error-scale estimator `lambda`, the Q-ratio bound `theta`, and the
//!   per-environment / ensemble upper bounds on log-coverage.
//! - [`ordering`] — the closed-form pairwise environment comparison rule,
//!   Copeland aggregation into a full ranking, the empirical (brute-force)
//!   lambda ordering, and the end-to-end coverage-based pipeline.

pub mod coverage;
pub mod ensemble;
pub mod env;
pub mod error;
pub mod mdp;
pub mod ordering;
pub mod qlearning;
pub mod seeds;
pub mod synthesis;
pub mod wireless;

pub use error::{Error, Result};
pub use mdp::{Policy, QTable, TabularMdp};
