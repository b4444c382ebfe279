//! Key-length assembly: tail bounds, the error-rate estimate on `L`, the
//! hypothesis-test bound, the chain leading to `Pi_L`, and the minimisation
//! over partitions of `K` into `L` and `M`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::discrimination::{constrained_success, SuccessBound, WeightedPair};
use super::entropy::{bernoulli_divergence_nats, h, h_capped};
use super::{BoundsError, Result};
use crate::qmath::{positive_part_projection, trace_distance, Projection};
use crate::source::{asymmetry_bounds, CharacterizedSource, QubitModel};
use crate::Basis;

/// Per-basis counts `n^a_B = |{i in B : a_i = a}|`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisCounts {
    pub a: [u64; 2],
    pub d: [u64; 2],
    pub c: [u64; 2],
    pub t: [u64; 2],
    pub k: [u64; 2],
}

/// The integers observed in one protocol run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolCounts {
    pub n: u64,
    pub n_d: u64,
    pub n_c: u64,
    pub n_t: u64,
    pub n_k: u64,
    /// Errors found on the test set.
    pub n_t_e: u64,
    pub basis: BasisCounts,
    /// Eve may also collapse Bob's detections; `n^a_C` then replaces `n^a_M`
    /// in the tail bound.
    #[serde(default)]
    pub collapse_bob_mode: bool,
}

fn split(total: u64) -> [u64; 2] {
    [total - total / 2, total / 2]
}

impl ProtocolCounts {
    /// Counts with every set split evenly between the two bases.
    pub fn balanced(n: u64, n_d: u64, n_c: u64, n_t: u64, n_t_e: u64) -> Self {
        let n_k = n_c.saturating_sub(n_t);
        ProtocolCounts {
            n,
            n_d,
            n_c,
            n_t,
            n_k,
            n_t_e,
            basis: BasisCounts { a: split(n), d: split(n_d), c: split(n_c), t: split(n_t), k: split(n_k) },
            collapse_bob_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(BoundsError::InvalidCounts(what.to_string()));
        if self.n_c < self.n_t || self.n_k != self.n_c - self.n_t {
            return bad("n_K must equal n_C - n_T");
        }
        if self.n_c > self.n_d || self.n_d > self.n {
            return bad("need n_C <= n_D <= N");
        }
        if self.n_t_e > self.n_t {
            return bad("more test errors than test positions");
        }
        let b = &self.basis;
        for (name, per, total) in
            [("A", b.a, self.n), ("D", b.d, self.n_d), ("C", b.c, self.n_c), ("T", b.t, self.n_t), ("K", b.k, self.n_k)]
        {
            if per[0] + per[1] != total {
                return bad(&format!("basis counts of {name} do not sum to its size"));
            }
        }
        Ok(())
    }

    /// `p^e_T = n^e_T / n_T`, zero for an empty test set.
    pub fn qber(&self) -> f64 {
        if self.n_t == 0 {
            0.0
        } else {
            self.n_t_e as f64 / self.n_t as f64
        }
    }
}

/// Slack constants and post-processing choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub delta_m: [f64; 2],
    pub delta_p: f64,
    /// Fraction of errors `k / n_L` tolerated by the hypothesis test.
    pub delta_k: f64,
    /// Markov constant.
    pub c: f64,
    /// Reconciliation leakage multiplier on `n_K h(QBER)`.
    pub ec_efficiency: f64,
    pub account_reconciliation: bool,
    /// Total leakage `n_L eps_L + 2^-l / ln 2` the key length is tuned to.
    /// When absent only the hashing term is targeted, at `hash_term_target`.
    pub target_leakage: Option<f64>,
    pub hash_term_target: f64,
    /// Replaces every discrimination bound by a fixed value. Only used to
    /// check that the verification oracles notice a wrong bound.
    #[serde(default)]
    pub s_m_override: Option<f64>,
}

impl BoundParams {
    /// `delta = 0.3 sqrt(ln(1/eps) / n)` for every slack, `c = 1e6`.
    pub fn for_counts(counts: &ProtocolCounts, eps: f64) -> Self {
        let slack = |n: u64| 0.3 * ((1.0 / eps).ln() / n.max(1) as f64).sqrt();
        BoundParams {
            delta_m: [slack(counts.basis.a[0]), slack(counts.basis.a[1])],
            delta_p: slack(counts.n_t),
            delta_k: 0.0,
            c: 1e6,
            ec_efficiency: 1.0,
            account_reconciliation: true,
            target_leakage: None,
            hash_term_target: 1e-10,
            s_m_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(BoundsError::InvalidParams(what.to_string()));
        if !(self.delta_m.iter().all(|d| *d > 0.0) && self.delta_p > 0.0) {
            return bad("slacks delta_M and delta_p must be positive");
        }
        if !(0.0..1.0).contains(&self.delta_k) {
            return bad("delta_k must lie in [0, 1)");
        }
        if !(self.c > 1.0) {
            return bad("c must exceed 1");
        }
        if !(self.ec_efficiency >= 1.0) {
            return bad("ec_efficiency must be at least 1");
        }
        if !(self.hash_term_target > 0.0) || self.target_leakage.is_some_and(|t| !(t > 0.0)) {
            return bad("leakage targets must be positive");
        }
        if self.s_m_override.is_some_and(|s| !(0.0..=1.0).contains(&s) || s == 0.0) {
            return bad("s_m_override must lie in (0, 1]");
        }
        Ok(())
    }
}

/// One split of `K` into `L` and the conclusively discriminated `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionScenario {
    pub n_l: u64,
    pub n_m: [u64; 2],
    pub p_bar1: [f64; 2],
}

/// Tail bound for condition C in one basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailM {
    pub eps: f64,
    pub p_minus: f64,
    pub n_max: u64,
}

/// `eps^a_M`, `p^a_-` and `n^a_max` for `n_m` positions in `M` with basis `a`.
pub fn tail_eps_m(counts: &ProtocolCounts, a: Basis, delta: f64, pbar1: f64, n_m: u64) -> Result<TailM> {
    let n_a = counts.basis.a[a];
    let used = if counts.collapse_bob_mode { counts.basis.c[a] } else { n_m };
    let p_m = if n_a == 0 { 0.0 } else { used as f64 / n_a as f64 };
    if !(delta > 0.0 && delta < p_m) {
        return Err(BoundsError::InfeasibleSlack { name: "delta_M", delta, rate: p_m });
    }
    Ok(tail_unchecked(counts, a, delta, pbar1, n_m))
}

/// As `tail_eps_m`, treating `p_M <= delta` as a condition that holds
/// trivially (`eps = 0`, `p_- <= 0`).
pub(crate) fn tail_unchecked(counts: &ProtocolCounts, a: Basis, delta: f64, pbar1: f64, n_m: u64) -> TailM {
    let b = &counts.basis;
    let n_a = b.a[a];
    let used = if counts.collapse_bob_mode { b.c[a] } else { n_m };
    let p_m = if n_a == 0 { 0.0 } else { used as f64 / n_a as f64 };
    let scale = if b.k[a] == 0 || pbar1 <= 0.0 { 0.0 } else { b.d[a] as f64 / (b.k[a] as f64 * pbar1) };
    let p_minus = if scale == 0.0 { 0.0 } else { (p_m - delta) * scale };
    let eps = if p_m > delta { (-(n_a as f64) * bernoulli_divergence_nats(p_m, p_m - delta)).exp() } else { 0.0 };
    let n_max = if pbar1 <= 0.0 || b.d[a] == 0 {
        0
    } else if counts.collapse_bob_mode {
        b.k[a]
    } else {
        // p_- <= 1  <=>  n_M <= n_A (delta + n_K pbar1 / n_D)
        let cap = n_a as f64 * (delta + b.k[a] as f64 * pbar1 / b.d[a] as f64);
        (cap.floor().max(0.0) as u64).min(b.k[a])
    };
    TailM { eps: eps.min(1.0), p_minus, n_max }
}

/// `R^M_- = -sum_a n^a_M log2 s^a_M`.
pub fn renyi_m(n_m: [u64; 2], s_m: [f64; 2]) -> f64 {
    (0..2).map(|a| if n_m[a] == 0 { 0.0 } else { -(n_m[a] as f64) * s_m[a].log2() }).sum::<f64>().max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorRateBounds {
    pub p_l_max: f64,
    pub eps_t_e: f64,
    pub mu_l: f64,
}

/// `eps^e_T = exp(-n_T D(p^e_T || p^e_T + delta_p))`.
pub fn error_tail(counts: &ProtocolCounts, delta_p: f64) -> Result<f64> {
    let p = counts.qber();
    if p + delta_p > 1.0 {
        return Err(BoundsError::InfeasibleSlack { name: "delta_p", delta: delta_p, rate: p });
    }
    Ok((-(counts.n_t as f64) * bernoulli_divergence_nats(p, p + delta_p)).exp().min(1.0))
}

fn p_l_max(counts: &ProtocolCounts, delta_p: f64, n_m: [u64; 2], s_m: [f64; 2], n_l: u64) -> f64 {
    let removed: f64 = (0..2).map(|a| n_m[a] as f64 * (1.0 - s_m[a])).sum();
    let num = counts.n_k as f64 * counts.qber() + counts.n_c as f64 * delta_p - removed;
    (num / n_l as f64).clamp(0.0, 1.0)
}

pub fn error_rate_bounds(
    counts: &ProtocolCounts,
    params: &BoundParams,
    scenario: &PartitionScenario,
    s_m: [f64; 2],
    eps_m: [f64; 2],
) -> Result<ErrorRateBounds> {
    if scenario.n_l == 0 {
        return Err(BoundsError::Infeasible("the partition leaves L empty".into()));
    }
    let eps_t_e = error_tail(counts, params.delta_p)?;
    Ok(ErrorRateBounds {
        p_l_max: p_l_max(counts, params.delta_p, scenario.n_m, s_m, scenario.n_l),
        eps_t_e,
        mu_l: eps_m[0] + eps_m[1] + eps_t_e,
    })
}

/// Helstrom test between `sigma[a,0]` and `sigma[a,1]`.
#[derive(Debug, Clone)]
pub struct HypothesisTest {
    /// `P[0] = {sigma[a,0] - sigma[a,1] > 0}`, `P[1] = I - P[0]`.
    pub projections: [Projection; 2],
    pub s_l: f64,
}

pub fn hypothesis_test(model: &QubitModel, a: Basis) -> Result<HypothesisTest> {
    let (s0, s1) = (model.sigma(a, 0), model.sigma(a, 1));
    let p0 = positive_part_projection(&s0.mat().sub(s1.mat()))?;
    let p1 = p0.complement();
    let s_l = 0.5 * (1.0 + trace_distance(s0, s1)?);
    Ok(HypothesisTest { projections: [p0, p1], s_l: s_l.clamp(0.5, 1.0) })
}

/// `q_a = max_{x,x'} Tr sigma[a,x] P[abar,x']`.
pub fn q_factor(model: &QubitModel, a: Basis, p_other: &[Projection; 2]) -> f64 {
    let mut q: f64 = 0.0;
    for x in 0..2 {
        for p in p_other {
            q = q.max(model.sigma(a, x).expectation(p.mat()));
        }
    }
    q.clamp(0.0, 1.0)
}

/// log2 of the bound on `eps^P` (probability that the hypothesis test makes
/// more than `k` errors on `L`); `-inf` for a perfect test.
pub fn eps_p_log2(n_l: u64, n_l_basis: [u64; 2], k: u64, s_l: [f64; 2]) -> f64 {
    let s_min = s_l[0].min(s_l[1]);
    if s_min >= 1.0 {
        return f64::NEG_INFINITY;
    }
    if s_min <= 0.5 || n_l == 0 {
        return 0.0;
    }
    let n = n_l as f64;
    let kk = k.min(n_l) as f64;
    // log2(2^n - 2^{n h(k/n)} / (2 sqrt n))
    let rel = (n * (h(kk / n) - 1.0)).exp2() / (2.0 * n.sqrt());
    let head = n + (-rel.min(1.0)).ln_1p() / std::f64::consts::LN_2;
    let bar = [n_l - n_l_basis[0], n_l - n_l_basis[1]];
    let v = head + bar[0] as f64 * s_l[0].log2() + bar[1] as f64 * s_l[1].log2() + kk * ((1.0 - s_min) / s_min).log2();
    v.min(0.0)
}

pub fn eps_p(n_l: u64, n_l_basis: [u64; 2], k: u64, s_l: [f64; 2]) -> f64 {
    eps_p_log2(n_l, n_l_basis, k, s_l).exp2()
}

/// Inputs of the chain from the error estimate to `Pi_L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiInputs {
    pub n_l: u64,
    pub n_l_basis: [u64; 2],
    pub p_l_max: f64,
    pub delta_k: f64,
    pub mu_l: f64,
    pub nu_l: f64,
    pub dt_bar: f64,
    pub eps_p_log2: f64,
    pub q: [f64; 2],
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PiChain {
    pub p_as: f64,
    pub omega_l: f64,
    /// log2 of `pi_L / pibar_L`.
    pub log2_ratio: f64,
    /// log2 `Pi_L`; `None` when `c omega_L >= 1`.
    pub log2_pi_l: Option<f64>,
    pub r_l_minus: f64,
    pub eps_l: f64,
    pub markov_failure: bool,
}

pub fn pi_chain(inp: &PiInputs) -> PiChain {
    let n = inp.n_l as f64;
    let p_as = (inp.p_l_max + inp.delta_k).min(1.0);
    let counting = if inp.eps_p_log2 == f64::NEG_INFINITY {
        0.0
    } else {
        (n * h_capped(inp.p_l_max) + inp.eps_p_log2).min(1024.0).exp2()
    };
    let omega_l = inp.mu_l + inp.nu_l + inp.dt_bar + counting;
    let bar = [inp.n_l - inp.n_l_basis[0], inp.n_l - inp.n_l_basis[1]];
    let log2_ratio = n * h_capped(p_as) + bar[0] as f64 * inp.q[0].log2() + bar[1] as f64 * inp.q[1].log2();
    let eps_l = 1.0 / inp.c + inp.nu_l;
    let root = (inp.c * omega_l).sqrt();
    if !(root < 1.0) {
        return PiChain { p_as, omega_l, log2_ratio, log2_pi_l: None, r_l_minus: 0.0, eps_l, markov_failure: true };
    }
    let log2_pi_l = log2_ratio - 2.0 * (1.0 - root).log2();
    PiChain {
        p_as,
        omega_l,
        log2_ratio,
        log2_pi_l: Some(log2_pi_l),
        r_l_minus: (-log2_pi_l).max(0.0),
        eps_l,
        markov_failure: false,
    }
}

/// Certified discrimination bounds on a grid of conclusive rates.
#[derive(Debug, Clone)]
pub struct SmTable {
    grid: Vec<f64>,
    values: Vec<SuccessBound>,
}

impl SmTable {
    /// `0` followed by a geometric grid from `1e-6` to `1` (ratio `2^(1/4)`).
    pub fn build(pair: &WeightedPair) -> Result<Self> {
        let mut grid = vec![0.0];
        let mut g: f64 = 1.0;
        let mut tail = vec![];
        while g > 1e-6 {
            tail.push(g);
            g /= 2f64.powf(0.25);
        }
        tail.reverse();
        grid.extend(tail);
        let values = grid.par_iter().map(|&t| constrained_success(pair, t)).collect::<Result<Vec<_>>>()?;
        Ok(SmTable { grid, values })
    }

    fn constant(v: f64) -> Self {
        SmTable { grid: vec![0.0], values: vec![SuccessBound { value: v, upper: v, primal: v, certified: true }] }
    }

    /// Bound valid at conclusive rate `t`: the entry at the largest grid
    /// point not above `t`, since the supremum is nonincreasing in `t`.
    pub fn lookup(&self, t: f64) -> SuccessBound {
        let idx = self.grid.partition_point(|&g| g <= t).saturating_sub(1);
        self.values[idx]
    }
}

/// Discrimination bound `s^a_M` for the tagged states of basis `a`.
pub fn s_m_sup(src: &CharacterizedSource, a: Basis, p_minus: f64) -> Result<SuccessBound> {
    let pair = tagged_pair(src, a)?;
    constrained_success(&pair, p_minus)
}

fn tagged_pair(src: &CharacterizedSource, a: Basis) -> Result<WeightedPair> {
    let dec = &src.decomposition;
    WeightedPair::new([&dec.tag1(a, 0).state, &dec.tag1(a, 1).state], src.tagged_priors(a))
}

/// Reason a report carries `m = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroKeyReason {
    EmptyKeySet,
    InfeasibleErrorSlack,
    MarkovFailure,
    EntropyExhausted,
    LeakageBudgetExhausted,
    ReconciliationExceedsEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionSearch {
    Exhaustive,
    Refined,
}

/// Every intermediate quantity of the key-length bound at the worst partition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub s_m: [f64; 2],
    pub s_m_certified: [bool; 2],
    pub eps_m: [f64; 2],
    pub p_minus: [f64; 2],
    pub n_m_max: [u64; 2],
    pub s_l: [f64; 2],
    pub q: [f64; 2],
    pub qber: f64,
    pub p_l_max: f64,
    pub eps_t_e: f64,
    pub mu_l: f64,
    pub nu_l: f64,
    pub dt_bar: f64,
    pub k_errors: u64,
    pub eps_p: f64,
    pub p_as: f64,
    pub omega_l: f64,
    pub log2_pi_l: Option<f64>,
    pub r_l_minus: f64,
    pub r_m_minus: f64,
    pub r_e_k: f64,
    pub eps_l: f64,
    pub ec_leakage: f64,
    pub m: u64,
    pub l: f64,
    pub leakage_bound: f64,
    pub worst_partition: PartitionScenario,
    pub partition_search: PartitionSearch,
    pub zero_key_reason: Option<ZeroKeyReason>,
    /// `h(p^e_T)`, quoted in the literature as the perfect-source limit of
    /// `R/n_K`; the chain itself tends to `one_minus_h_p_as`.
    pub h_qber: f64,
    pub one_minus_h_p_as: f64,
}

impl RateReport {
    /// Names of floating-point fields that are NaN or infinite.
    pub fn non_finite_fields(&self) -> Vec<&'static str> {
        let scalars = [
            ("qber", self.qber),
            ("p_l_max", self.p_l_max),
            ("eps_t_e", self.eps_t_e),
            ("mu_l", self.mu_l),
            ("nu_l", self.nu_l),
            ("dt_bar", self.dt_bar),
            ("eps_p", self.eps_p),
            ("p_as", self.p_as),
            ("omega_l", self.omega_l),
            ("log2_pi_l", self.log2_pi_l.unwrap_or(0.0)),
            ("r_l_minus", self.r_l_minus),
            ("r_m_minus", self.r_m_minus),
            ("r_e_k", self.r_e_k),
            ("eps_l", self.eps_l),
            ("ec_leakage", self.ec_leakage),
            ("l", self.l),
            ("leakage_bound", self.leakage_bound),
            ("h_qber", self.h_qber),
            ("one_minus_h_p_as", self.one_minus_h_p_as),
        ];
        let pairs = [
            ("s_m", self.s_m),
            ("eps_m", self.eps_m),
            ("p_minus", self.p_minus),
            ("s_l", self.s_l),
            ("q", self.q),
            ("worst_partition.p_bar1", self.worst_partition.p_bar1),
        ];
        scalars
            .iter()
            .filter(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
            .chain(pairs.iter().filter(|(_, v)| v.iter().any(|x| !x.is_finite())).map(|(n, _)| *n))
            .collect()
    }

    fn empty(counts: &ProtocolCounts, reason: ZeroKeyReason) -> Self {
        let qber = counts.qber();
        RateReport {
            s_m: [1.0; 2],
            s_m_certified: [true; 2],
            eps_m: [0.0; 2],
            p_minus: [0.0; 2],
            n_m_max: [0; 2],
            s_l: [0.5; 2],
            q: [1.0; 2],
            qber,
            p_l_max: 1.0,
            eps_t_e: 1.0,
            mu_l: 1.0,
            nu_l: 0.0,
            dt_bar: 0.0,
            k_errors: 0,
            eps_p: 1.0,
            p_as: 1.0,
            omega_l: 1.0,
            log2_pi_l: None,
            r_l_minus: 0.0,
            r_m_minus: 0.0,
            r_e_k: 0.0,
            eps_l: 1.0,
            ec_leakage: 0.0,
            m: 0,
            l: 0.0,
            leakage_bound: 0.0,
            worst_partition: PartitionScenario { n_l: counts.n_k, n_m: [0; 2], p_bar1: [0.0; 2] },
            partition_search: PartitionSearch::Exhaustive,
            zero_key_reason: Some(reason),
            h_qber: h(qber.min(1.0)),
            one_minus_h_p_as: 0.0,
        }
    }
}

/// Grids up to this many partitions are searched exhaustively.
const EXHAUSTIVE_LIMIT: u64 = 1 << 20;
/// Points per axis in each coarse-to-fine round.
const REFINE_POINTS: u64 = 257;

struct Evaluator<'a> {
    counts: &'a ProtocolCounts,
    params: &'a BoundParams,
    model: &'a QubitModel,
    pbar1: [f64; 2],
    tables: [SmTable; 2],
    s_l: [f64; 2],
    q: [f64; 2],
    eps_t_e: f64,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    total: f64,
    n_m: [u64; 2],
    tails: [TailM; 2],
    s_m: [SuccessBound; 2],
    p_l_max: f64,
    nu_l: f64,
    dt_bar: f64,
    k: u64,
    eps_p_log2: f64,
    chain: PiChain,
    r_m: f64,
}

impl Evaluator<'_> {
    fn eval(&self, n_m: [u64; 2]) -> Candidate {
        let c = self.counts;
        let tails = [0, 1].map(|a| tail_unchecked(c, a, self.params.delta_m[a], self.pbar1[a], n_m[a]));
        let s_m = [0, 1].map(|a| match self.params.s_m_override {
            Some(v) => SuccessBound { value: v, upper: v, primal: v, certified: true },
            None => self.tables[a].lookup(tails[a].p_minus),
        });
        let s_val = [s_m[0].value, s_m[1].value];
        let r_m = renyi_m(n_m, s_val);
        let n_l = c.n_k - n_m[0] - n_m[1];
        let n_l_basis = [c.basis.k[0] - n_m[0], c.basis.k[1] - n_m[1]];
        let mu_l = tails[0].eps + tails[1].eps + self.eps_t_e;
        let asym = asymmetry_bounds(self.model, n_l);
        let k = (self.params.delta_k * n_l as f64).floor() as u64;
        let (p_l_max, eps_p_log2, chain) = if n_l == 0 {
            let chain = PiChain {
                p_as: 0.0,
                omega_l: mu_l,
                log2_ratio: 0.0,
                log2_pi_l: Some(0.0),
                r_l_minus: 0.0,
                eps_l: 1.0 / self.params.c,
                markov_failure: false,
            };
            (0.0, f64::NEG_INFINITY, chain)
        } else {
            let p_l_max = p_l_max(c, self.params.delta_p, n_m, s_val, n_l);
            let e = eps_p_log2(n_l, n_l_basis, k, self.s_l);
            let chain = pi_chain(&PiInputs {
                n_l,
                n_l_basis,
                p_l_max,
                delta_k: self.params.delta_k,
                mu_l,
                nu_l: asym.nu_l,
                dt_bar: asym.dt_bar,
                eps_p_log2: e,
                q: self.q,
                c: self.params.c,
            });
            (p_l_max, e, chain)
        };
        Candidate {
            total: chain.r_l_minus + r_m,
            n_m,
            tails,
            s_m,
            p_l_max,
            nu_l: asym.nu_l,
            dt_bar: asym.dt_bar,
            k,
            eps_p_log2,
            chain,
            r_m,
        }
    }

    /// Minimum over `n0 in xs`, `n1 in ys`; ties go to the lexicographically
    /// smallest partition.
    fn minimise(&self, xs: &[u64], ys: &[u64]) -> Candidate {
        xs.par_iter()
            .map(|&n0| ys.iter().map(|&n1| self.eval([n0, n1])).reduce(better).expect("nonempty grid"))
            .reduce_with(better)
            .expect("nonempty grid")
    }
}

fn better(x: Candidate, y: Candidate) -> Candidate {
    match x.total.total_cmp(&y.total) {
        std::cmp::Ordering::Less => x,
        std::cmp::Ordering::Greater => y,
        std::cmp::Ordering::Equal => {
            if x.n_m <= y.n_m {
                x
            } else {
                y
            }
        }
    }
}

fn axis(lo: u64, hi: u64, points: u64) -> Vec<u64> {
    if hi - lo < points {
        return (lo..=hi).collect();
    }
    let mut v: Vec<u64> =
        (0..points).map(|i| lo + ((hi - lo) as u128 * i as u128 / (points - 1) as u128) as u64).collect();
    v.dedup();
    v
}

/// Certified key length and leakage for the observed counts.
pub fn key_bound(counts: &ProtocolCounts, params: &BoundParams, src: &CharacterizedSource) -> Result<RateReport> {
    counts.validate()?;
    params.validate()?;
    if counts.n_k == 0 {
        return Ok(RateReport::empty(counts, ZeroKeyReason::EmptyKeySet));
    }
    let eps_t_e = match error_tail(counts, params.delta_p) {
        Ok(e) => e,
        Err(BoundsError::InfeasibleSlack { .. }) => {
            return Ok(RateReport::empty(counts, ZeroKeyReason::InfeasibleErrorSlack));
        }
        Err(e) => return Err(e),
    };
    let model = &src.model;
    let tests = [hypothesis_test(model, 0)?, hypothesis_test(model, 1)?];
    let q = [q_factor(model, 0, &tests[1].projections), q_factor(model, 1, &tests[0].projections)];
    let pbar1 = [src.pbar1(0), src.pbar1(1)];
    let n_max = [0, 1].map(|a| tail_unchecked(counts, a, params.delta_m[a], pbar1[a], 0).n_max);
    let table = |a: Basis| -> Result<SmTable> {
        if n_max[a] == 0 || params.s_m_override.is_some() {
            Ok(SmTable::constant(1.0))
        } else {
            SmTable::build(&tagged_pair(src, a)?)
        }
    };
    let ev = Evaluator {
        counts,
        params,
        model,
        pbar1,
        tables: [table(0)?, table(1)?],
        s_l: [tests[0].s_l, tests[1].s_l],
        q,
        eps_t_e,
    };

    let grid_size = (n_max[0] + 1) * (n_max[1] + 1);
    let (best, search) = if grid_size <= EXHAUSTIVE_LIMIT {
        (ev.minimise(&axis(0, n_max[0], u64::MAX), &axis(0, n_max[1], u64::MAX)), PartitionSearch::Exhaustive)
    } else {
        let mut lo = [0u64; 2];
        let mut hi = n_max;
        let mut best;
        loop {
            let xs = axis(lo[0], hi[0], REFINE_POINTS);
            let ys = axis(lo[1], hi[1], REFINE_POINTS);
            best = ev.minimise(&xs, &ys);
            let step = |v: &[u64]| v.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
            let steps = [step(&xs), step(&ys)];
            if steps.iter().all(|&s| s <= 1) {
                break;
            }
            for a in 0..2 {
                lo[a] = best.n_m[a].saturating_sub(2 * steps[a]);
                hi[a] = (best.n_m[a] + 2 * steps[a]).min(n_max[a]);
            }
        }
        (best, PartitionSearch::Refined)
    };

    let n_l = counts.n_k - best.n_m[0] - best.n_m[1];
    let r_e_k = best.total;
    let qber = counts.qber();
    let ec_leakage =
        if params.account_reconciliation { params.ec_efficiency * counts.n_k as f64 * h(qber.min(1.0)) } else { 0.0 };
    let fixed_leakage = n_l as f64 * best.chain.eps_l;
    let mut reason = None;
    let hash_budget = match params.target_leakage {
        Some(target) => target - fixed_leakage,
        None => params.hash_term_target,
    };
    let mut m: u64 = 0;
    if best.chain.markov_failure {
        reason = Some(ZeroKeyReason::MarkovFailure);
    } else if hash_budget <= 0.0 {
        reason = Some(ZeroKeyReason::LeakageBudgetExhausted);
    } else {
        // Smallest margin l >= 1 with 2^-l / ln 2 <= budget.
        let l_min = (-(hash_budget * std::f64::consts::LN_2).log2()).ceil().max(1.0);
        let room = r_e_k - ec_leakage - l_min;
        if r_e_k - l_min < 1.0 {
            reason = Some(ZeroKeyReason::EntropyExhausted);
        } else if room < 1.0 {
            reason = Some(ZeroKeyReason::ReconciliationExceedsEntropy);
        } else {
            m = room.floor() as u64;
        }
    }
    let l = (r_e_k - ec_leakage - m as f64).max(0.0);
    let leakage_bound = fixed_leakage + (-l).exp2() / std::f64::consts::LN_2;

    Ok(RateReport {
        s_m: best.s_m.map(|s| s.value),
        s_m_certified: best.s_m.map(|s| s.certified),
        eps_m: best.tails.map(|t| t.eps),
        p_minus: best.tails.map(|t| t.p_minus),
        n_m_max: n_max,
        s_l: ev.s_l,
        q,
        qber,
        p_l_max: best.p_l_max,
        eps_t_e,
        mu_l: best.tails[0].eps + best.tails[1].eps + eps_t_e,
        nu_l: best.nu_l,
        dt_bar: best.dt_bar,
        k_errors: best.k,
        eps_p: best.eps_p_log2.exp2(),
        p_as: best.chain.p_as,
        omega_l: best.chain.omega_l,
        log2_pi_l: best.chain.log2_pi_l,
        r_l_minus: best.chain.r_l_minus,
        r_m_minus: best.r_m,
        r_e_k,
        eps_l: best.chain.eps_l,
        ec_leakage,
        m,
        l,
        leakage_bound,
        worst_partition: PartitionScenario { n_l, n_m: best.n_m, p_bar1: pbar1 },
        partition_search: search,
        zero_key_reason: reason,
        h_qber: h(qber.min(1.0)),
        one_minus_h_p_as: 1.0 - h_capped(best.chain.p_as),
    })
}
