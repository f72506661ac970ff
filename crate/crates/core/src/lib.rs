//! Multi-policy evaluation for tabular, finite-horizon MDPs.
//!
//! The crate estimates the values of `K` target policies from a single
//! behaviour mixture:
//!
//! 1. [`coarse`] estimates every target's visitation distribution to constant
//!    multiplicative accuracy from `O(1/ε)` rollouts and drops low-mass pairs.
//! 2. [`optdist`] picks mixture weights over the targets that minimise the
//!    worst-case importance-weighting variance.
//! 3. [`ides`] fits step-wise importance densities by projected SGD on a
//!    quadratic loss, with median-of-means selection for high probability.
//! 4. [`caesar`] glues the phases together and builds the final estimator.
//!
//! [`march`] estimates visitations of *all* deterministic policies from one
//! covering distribution, [`policy_id`] uses the evaluator for
//! successive-elimination policy identification and [`harness`] drives
//! seeded experiments. Everything is checked against the exact dynamic
//! programming oracle in [`oracle`].

pub mod caesar;
pub mod coarse;
pub mod harness;
pub mod ides;
pub mod march;
pub mod mdp;
pub mod optdist;
pub mod oracle;
pub mod policy_id;
pub mod sampler;

mod error;
mod par;

pub use error::{Error, Result};
pub use mdp::{PolicyTable, TabularMdp, ValidationReport, Violation, VisitationTable};
pub use sampler::{MixtureWeights, RngStream, Simulator, Trajectory};

/// Absolute tolerance for probability simplex checks on model inputs.
pub const PROB_TOL: f64 = 1e-9;
