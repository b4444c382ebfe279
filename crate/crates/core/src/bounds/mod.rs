//! The security bound: tail estimates, discrimination suprema, the
//! hypothesis-test chain, Rényi-entropy lower bounds and the resulting key
//! length with its leakage guarantee.

mod discrimination;
mod entropy;
mod key;

pub use discrimination::{constrained_success, SuccessBound, WeightedPair, CERTIFICATE_GAP_TOL};
pub use entropy::{
    bernoulli_divergence, bernoulli_divergence_nats, binary_entropy, binomial_cdf, binomial_sandwich,
    binomial_upper_tail, ln_binomial, BinomialSandwich,
};
pub use key::{
    eps_p, eps_p_log2, error_rate_bounds, error_tail, hypothesis_test, key_bound, pi_chain, q_factor, renyi_m, s_m_sup,
    tail_eps_m, BasisCounts, BoundParams, ErrorRateBounds, HypothesisTest, PartitionScenario, PartitionSearch, PiChain,
    PiInputs, ProtocolCounts, RateReport, SmTable, TailM, ZeroKeyReason,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error(transparent)]
    Linalg(#[from] crate::qmath::QmathError),
    #[error("{name} = {value} is not a probability")]
    ProbabilityOutOfRange { name: &'static str, value: f64 },
    #[error("slack {name} = {delta} is infeasible at observed rate {rate}")]
    InfeasibleSlack { name: &'static str, delta: f64, rate: f64 },
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, BoundsError>;
