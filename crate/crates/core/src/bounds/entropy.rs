//! Binary entropy, Bernoulli divergence and binomial sums.
//!
//! Units: entropies and `bernoulli_divergence` are in bits;
//! `bernoulli_divergence_nats` feeds the `exp(-n D)` tail bounds.

use super::{BoundsError, Result};
use crate::source::ln_factorial;

/// h(p) = -p log2 p - (1-p) log2 (1-p)
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(BoundsError::ProbabilityOutOfRange { name: "p", value: p });
    }
    Ok(h(p))
}

pub(crate) fn h(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}

/// `h` with arguments beyond one half capped at one bit. Used where the
/// quantity counts strings within a Hamming radius, whose count never
/// exceeds `2^n`.
pub(crate) fn h_capped(p: f64) -> f64 {
    if p >= 0.5 {
        1.0
    } else {
        h(p.max(0.0))
    }
}

fn divergence_with(p: f64, q: f64, log: impl Fn(f64) -> f64) -> f64 {
    let term = |a: f64, b: f64| -> f64 {
        if a <= 0.0 {
            0.0
        } else if b <= 0.0 {
            f64::INFINITY
        } else {
            a * (log(a) - log(b))
        }
    };
    (term(p, q) + term(1.0 - p, 1.0 - q)).max(0.0)
}

/// D(B1(p) || B1(q)) in bits; `+inf` when the support of p is not inside q's.
pub fn bernoulli_divergence(p: f64, q: f64) -> f64 {
    divergence_with(p, q, f64::log2)
}

/// D(B1(p) || B1(q)) in nats.
pub fn bernoulli_divergence_nats(p: f64, q: f64) -> f64 {
    divergence_with(p, q, f64::ln)
}

/// ln C(n, k)
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    ln_factorial(n as usize) - ln_factorial(k as usize) - ln_factorial((n - k) as usize)
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = terms.filter(|t| t.is_finite()).collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// The entropy sandwich `2^{n h(k/n)} / (2 sqrt n)` and `2^{n h(k/n)}`
/// together with the exact cumulative binomial probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinomialSandwich {
    pub lower: f64,
    pub upper: f64,
    /// sum_{i <= k} C(n,i) q^i (1-q)^(n-i)
    pub exact: f64,
    /// sum_{i <= k} C(n,i)
    pub coefficient_mass: f64,
}

pub fn binomial_sandwich(n: u64, k: u64, q: f64) -> Result<BinomialSandwich> {
    if k > n {
        return Err(BoundsError::Infeasible(format!("k = {k} exceeds n = {n}")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(BoundsError::ProbabilityOutOfRange { name: "q", value: q });
    }
    let nf = n as f64;
    let exponent = if n == 0 { 0.0 } else { nf * h(k as f64 / nf) };
    let upper = exponent.exp2();
    let lower = if n == 0 { upper / 2.0 } else { upper / (2.0 * nf.sqrt()) };
    Ok(BinomialSandwich {
        lower,
        upper,
        exact: binomial_cdf(n, k, q),
        coefficient_mass: log_sum_exp((0..=k).map(|i| ln_binomial(n, i))).exp(),
    })
}

/// P[Bin(n, q) <= k], summed in log space.
pub fn binomial_cdf(n: u64, k: u64, q: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    let (lq, lp) = (q.ln(), (1.0 - q).ln());
    let term = |i: u64| {
        let a = if i == 0 { 0.0 } else { i as f64 * lq };
        let b = if i == n { 0.0 } else { (n - i) as f64 * lp };
        ln_binomial(n, i) + a + b
    };
    log_sum_exp((0..=k).map(term)).exp().min(1.0)
}

/// P[Bin(n, q) > k]
pub fn binomial_upper_tail(n: u64, k: u64, q: f64) -> f64 {
    if k >= n {
        return 0.0;
    }
    let (lq, lp) = (q.ln(), (1.0 - q).ln());
    let term = |i: u64| {
        let a = if i == 0 { 0.0 } else { i as f64 * lq };
        let b = if i == n { 0.0 } else { (n - i) as f64 * lp };
        ln_binomial(n, i) + a + b
    };
    log_sum_exp((k + 1..=n).map(term)).exp().min(1.0)
}
