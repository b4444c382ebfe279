//! Seeded BB84 simulator: Alice's tagged source, an adversarial channel,
//! Bob's threshold detectors with a no-click outcome, sifting and sampling.
//!
//! Every Born-rule distribution the run can need is computed once per
//! session configuration, so the per-position loop only samples categorical
//! distributions.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{BasisCounts, ProtocolCounts};
use crate::qmath::{positive_part_projection, CMat, DensityOp, QmathError, C64};
use crate::seed;
use crate::source::{CharacterizedSource, FockLayout, SourceSpec};
use crate::{ax_index, Basis};

/// Outcome symbol for "no detection".
pub const PHI: u8 = 2;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Linalg(#[from] QmathError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("negative outcome probability {0}")]
    NegativeProbability(f64),
    #[error("no-detection symbol found at test position {0}")]
    NullOnTestSet(usize),
    #[error("strings have different lengths")]
    LengthMismatch,
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// Threshold detector pair: a mode holding `n` photons stays dark with
/// probability `(1 - efficiency)^n (1 - dark_count)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub efficiency: f64,
    pub dark_count: f64,
}

impl Detector {
    pub const IDEAL: Detector = Detector { efficiency: 1.0, dark_count: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) || !(0.0..=1.0).contains(&self.dark_count) {
            return Err(ProtocolError::InvalidConfig("detector efficiency and dark count must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Weights of outcomes 0, 1 and no-click for `n` photons in the two
    /// modes of the measured basis. Double clicks give a uniform bit.
    fn outcome_weights(&self, n: [usize; 2]) -> [f64; 3] {
        let dark = |k: usize| (1.0 - self.efficiency).powi(k as i32) * (1.0 - self.dark_count);
        let (z0, z1) = (dark(n[0]), dark(n[1]));
        let both = (1.0 - z0) * (1.0 - z1);
        [(1.0 - z0) * z1 + 0.5 * both, z0 * (1.0 - z1) + 0.5 * both, z0 * z1]
    }

    /// Outcome distribution for an empty pulse.
    pub fn vacuum_distribution(&self) -> [f64; 3] {
        self.outcome_weights([0, 0])
    }

    /// POVM `[E_0, E_1, E_phi]` for basis `b` (0: H/V, 1: D/A) on the
    /// emission space described by `layout`.
    pub fn povm(&self, layout: &FockLayout, b: Basis) -> [CMat; 3] {
        let dim = layout.dim();
        let mut elems = [CMat::zeros(dim, dim), CMat::zeros(dim, dim), CMat::zeros(dim, dim)];
        for sector in &layout.sectors {
            let k = sector.photons;
            for n0 in 0..=k {
                let w = self.outcome_weights([n0, k - n0]);
                let fock = basis_fock_state(b, n0, k - n0);
                let local = sector.isometry.0.adjoint() * fock;
                let mut full = DVector::zeros(dim);
                full.rows_mut(sector.offset, sector.dim).copy_from(&local);
                let proj = CMat::outer(&full);
                for y in 0..3 {
                    elems[y] = elems[y].add(&proj.scale(w[y]));
                }
            }
        }
        elems
    }
}

/// `|n0, n1>` in the modes of basis `b`, expanded in the H/V Fock basis
/// `|k - i, i>` (index `i` counts V photons).
fn basis_fock_state(b: Basis, n0: usize, n1: usize) -> DVector<C64> {
    let k = n0 + n1;
    let mut v = DVector::zeros(k + 1);
    if b == 0 {
        v[n1] = C64::new(1.0, 0.0);
        return v;
    }
    // d^dag = (h^dag + v^dag)/sqrt2, a^dag = (h^dag - v^dag)/sqrt2
    let lf = crate::source::ln_factorial;
    let binom = |n: usize, r: usize| (lf(n) - lf(r) - lf(n - r)).exp();
    let norm = (-(k as f64) * 0.5 * std::f64::consts::LN_2 - 0.5 * (lf(n0) + lf(n1))).exp();
    for j in 0..=n0 {
        for l in 0..=n1 {
            let m = j + l;
            let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
            let amp = sign * binom(n0, j) * binom(n1, l) * (0.5 * (lf(k - m) + lf(m))).exp() * norm;
            v[m] += C64::new(amp, 0.0);
        }
    }
    v
}

/// Adversary acting between Alice and Bob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EveStrategy {
    /// Whole-pulse erasure with probability `loss`, then depolarization of
    /// each photon-number sector with probability `depolarizing`.
    Passive { loss: f64, depolarizing: f64 },
    /// Measure every pulse with ideal detectors and resend Alice's untagged
    /// state for the result. `basis: None` picks a uniformly random basis.
    InterceptResend { basis: Option<Basis> },
    /// Measure tagged emissions with the minimum-error test given the basis
    /// and resend the untagged state for the guess; pulses where the tagged
    /// states coincide are blocked. Untagged emissions pass unchanged.
    TagExploit,
}

impl EveStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EveStrategy::Passive { loss, depolarizing } => {
                if !(0.0..=1.0).contains(&loss) || !(0.0..=1.0).contains(&depolarizing) {
                    return Err(ProtocolError::InvalidConfig("loss and depolarizing must lie in [0, 1]".into()));
                }
            }
            EveStrategy::InterceptResend { basis: Some(b) } if b > 1 => {
                return Err(ProtocolError::InvalidConfig("basis must be 0 or 1".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

impl Default for EveStrategy {
    fn default() -> Self {
        EveStrategy::Passive { loss: 0.0, depolarizing: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Number of emitted pulses `N`.
    pub n: u64,
    pub bob_basis_probs: [f64; 2],
    pub detector: Detector,
    pub eve: EveStrategy,
    pub test_fraction: f64,
    pub seed: u64,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let pb = self.bob_basis_probs;
        if pb.iter().any(|p| !(0.0..=1.0).contains(p)) || (pb[0] + pb[1] - 1.0).abs() > 1e-9 {
            return Err(ProtocolError::InvalidConfig("Bob's basis probabilities must sum to 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(ProtocolError::InvalidConfig("test_fraction must lie in (0, 1)".into()));
        }
        self.detector.validate()?;
        self.eve.validate()
    }
}

/// Sets of positions produced by sifting, as sorted index lists.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SiftedSets {
    pub d: Vec<usize>,
    pub c: Vec<usize>,
    pub t: Vec<usize>,
    pub k: Vec<usize>,
}

/// Everything one run produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionRecord {
    pub index: u64,
    pub seed: u64,
    pub a: Vec<u8>,
    pub x: Vec<u8>,
    pub b: Vec<u8>,
    /// Bob's outcomes, `PHI` for no detection.
    pub y: Vec<u8>,
    /// Emission drawn from the tagged component.
    pub tagged: Vec<bool>,
    /// Eve's guess of `x` where she made one.
    pub eve_guess: Vec<Option<u8>>,
    pub sets: SiftedSets,
    /// Positions of `K` where Eve holds a guess of a tagged emission.
    pub m: Vec<usize>,
    /// `K - M`.
    pub l: Vec<usize>,
    pub n_t_e: u64,
    pub counts: ProtocolCounts,
}

impl SessionRecord {
    pub fn qber(&self) -> f64 {
        self.counts.qber()
    }

    /// Error rate on `L`.
    pub fn error_rate_l(&self) -> f64 {
        error_rate(&self.x, &self.y, &self.l)
    }

    /// Error rate on the whole sifted key `K`.
    pub fn error_rate_k(&self) -> f64 {
        error_rate(&self.x, &self.y, &self.sets.k)
    }

    /// Fraction of `M` where Eve's guess equals `x`, with `|M|`.
    pub fn eve_accuracy_on_m(&self) -> (f64, usize) {
        let hits = self.m.iter().filter(|&&i| self.eve_guess[i] == Some(self.x[i])).count();
        (if self.m.is_empty() { 0.0 } else { hits as f64 / self.m.len() as f64 }, self.m.len())
    }

    /// Alice's and Bob's sifted key strings on `K`.
    pub fn sifted_keys(&self) -> (Vec<u8>, Vec<u8>) {
        (self.sets.k.iter().map(|&i| self.x[i]).collect(), self.sets.k.iter().map(|&i| self.y[i]).collect())
    }
}

fn error_rate(x: &[u8], y: &[u8], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().filter(|&&i| x[i] != y[i]).count() as f64 / idx.len() as f64
}

/// Born-rule probabilities `Tr(rho E)` for a three-outcome POVM.
pub fn outcome_probabilities(rho: &DensityOp, povm: &[CMat; 3]) -> Result<[f64; 3]> {
    let mut p = [0.0; 3];
    for (y, e) in povm.iter().enumerate() {
        let v = rho.expectation(e);
        if v < -1e-9 {
            return Err(ProtocolError::NegativeProbability(v));
        }
        p[y] = v.max(0.0);
    }
    let total: f64 = p.iter().sum();
    Ok(p.map(|v| v / total))
}

fn sample3<R: Rng + ?Sized>(rng: &mut R, p: &[f64; 3]) -> u8 {
    let u: f64 = rng.gen();
    if u < p[0] {
        0
    } else if u < p[0] + p[1] {
        1
    } else {
        PHI
    }
}

/// One measurement by Bob in basis `b`.
pub fn measure_bob<R: Rng + ?Sized>(
    rng: &mut R,
    state: &DensityOp,
    b: Basis,
    detector: &Detector,
    layout: &FockLayout,
) -> Result<u8> {
    let p = outcome_probabilities(state, &detector.povm(layout, b))?;
    Ok(sample3(rng, &p))
}

/// Sift: `D = {y != PHI}`, `C = {i in D : a = b}`, `T` a uniformly random
/// subset of `C` of size `round(test_fraction |C|)` and `K = C - T`.
pub fn sift<R: Rng + ?Sized>(a: &[u8], b: &[u8], y: &[u8], test_fraction: f64, rng: &mut R) -> Result<SiftedSets> {
    if a.len() != b.len() || a.len() != y.len() {
        return Err(ProtocolError::LengthMismatch);
    }
    let d: Vec<usize> = (0..y.len()).filter(|&i| y[i] != PHI).collect();
    let c: Vec<usize> = d.iter().copied().filter(|&i| a[i] == b[i]).collect();
    let size = (test_fraction * c.len() as f64).round() as usize;
    let mut shuffled = c.clone();
    let (head, _) = shuffled.partial_shuffle(rng, size);
    let mut t = head.to_vec();
    t.sort_unstable();
    let mut in_t = vec![false; y.len()];
    for &i in &t {
        in_t[i] = true;
    }
    let k = c.iter().copied().filter(|&i| !in_t[i]).collect();
    Ok(SiftedSets { d, c, t, k })
}

/// `n^e_T = |{i in T : x_i != y_i}|`.
pub fn count_errors(x: &[u8], y: &[u8], t: &[usize]) -> Result<u64> {
    let mut errors = 0;
    for &i in t {
        if y[i] == PHI {
            return Err(ProtocolError::NullOnTestSet(i));
        }
        if x[i] != y[i] {
            errors += 1;
        }
    }
    Ok(errors)
}

/// Signal reaching Bob: one of the emitted or resent states, or nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Signal {
    /// Untagged component of `(a, x)`.
    Clean(usize),
    /// Tagged component of `(a, x)`.
    Tagged(usize),
    Vacuum,
}

/// Precomputed outcome distributions for one (source, config) pair.
struct Tables {
    probs: [f64; 4],
    tag_weight: [f64; 4],
    /// `bob[signal][b]` after the passive channel (if any).
    bob_clean: [[[f64; 3]; 2]; 4],
    bob_tagged: [[[f64; 3]; 2]; 4],
    bob_vacuum: [f64; 3],
    /// Eve's ideal-detector distributions, `eve[signal][basis]`.
    eve_clean: [[[f64; 3]; 2]; 4],
    eve_tagged: [[[f64; 3]; 2]; 4],
    /// Minimum-error test on tagged states, `[guess 0, guess 1, blocked]`.
    tag_guess: [[f64; 3]; 4],
}

fn sector_depolarize(rho: &CMat, layout: &FockLayout, q: f64) -> CMat {
    let dim = layout.dim();
    let mut mixed = CMat::zeros(dim, dim);
    for s in &layout.sectors {
        let pop: f64 = (0..s.dim).map(|i| rho.0[(s.offset + i, s.offset + i)].re).sum();
        for i in 0..s.dim {
            mixed.0[(s.offset + i, s.offset + i)] = C64::new(pop / s.dim as f64, 0.0);
        }
    }
    rho.scale(1.0 - q).add(&mixed.scale(q))
}

impl Tables {
    fn new(src: &CharacterizedSource, cfg: &ProtocolConfig) -> Result<Self> {
        let spec: &SourceSpec = &src.spec;
        let layout = spec.layout().cloned().unwrap_or_else(FockLayout::qubit);
        let dec = &src.decomposition;
        let depol = match cfg.eve {
            EveStrategy::Passive { depolarizing, .. } => depolarizing,
            _ => 0.0,
        };
        let bob_povm = [cfg.detector.povm(&layout, 0), cfg.detector.povm(&layout, 1)];
        let eve_povm = [Detector::IDEAL.povm(&layout, 0), Detector::IDEAL.povm(&layout, 1)];
        let through = |state: &DensityOp, povm: &[[CMat; 3]; 2], q: f64| -> Result<[[f64; 3]; 2]> {
            let rho = DensityOp::from_clipped(sector_depolarize(state.mat(), &layout, q), 1e-9)?;
            Ok([outcome_probabilities(&rho, &povm[0])?, outcome_probabilities(&rho, &povm[1])?])
        };
        let mut t = Tables {
            probs: spec.probs(),
            tag_weight: [0.0; 4],
            bob_clean: [[[0.0; 3]; 2]; 4],
            bob_tagged: [[[0.0; 3]; 2]; 4],
            bob_vacuum: cfg.detector.vacuum_distribution(),
            eve_clean: [[[0.0; 3]; 2]; 4],
            eve_tagged: [[[0.0; 3]; 2]; 4],
            tag_guess: [[0.0, 0.0, 1.0]; 4],
        };
        for a in 0..2 {
            let t0 = &dec.tag1(a, 0).state;
            let t1 = &dec.tag1(a, 1).state;
            let pri = src.tagged_priors(a);
            let diff = t0.mat().scale(pri[0]).sub(&t1.mat().scale(pri[1]));
            let p0 = positive_part_projection(&diff)?;
            let p1 = positive_part_projection(&diff.scale(-1.0))?;
            let dim = diff.rows();
            let blocked = CMat::identity(dim).sub(p0.mat()).sub(p1.mat());
            let test = [p0.mat().clone(), p1.mat().clone(), blocked];
            for x in 0..2 {
                let i = ax_index(a, x);
                t.tag_weight[i] = dec.tag1(a, x).weight;
                t.bob_clean[i] = through(&dec.tag0(a, x).state, &bob_povm, depol)?;
                t.bob_tagged[i] = through(&dec.tag1(a, x).state, &bob_povm, depol)?;
                t.eve_clean[i] = through(&dec.tag0(a, x).state, &eve_povm, 0.0)?;
                t.eve_tagged[i] = through(&dec.tag1(a, x).state, &eve_povm, 0.0)?;
                if t.tag_weight[i] > 0.0 {
                    t.tag_guess[i] = outcome_probabilities(&dec.tag1(a, x).state, &test)?;
                }
            }
        }
        Ok(t)
    }

    fn bob(&self, s: Signal, b: Basis) -> &[f64; 3] {
        match s {
            Signal::Clean(i) => &self.bob_clean[i][b],
            Signal::Tagged(i) => &self.bob_tagged[i][b],
            Signal::Vacuum => &self.bob_vacuum,
        }
    }
}

fn sample_index<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Outcome distribution `[ax][b]` of one position averaged over the tag and
/// the adversary's randomness.
fn expected_outcomes(t: &Tables, eve: &EveStrategy) -> [[[f64; 3]; 2]; 4] {
    let mix = |acc: &mut [f64; 3], w: f64, p: &[f64; 3]| acc.iter_mut().zip(p).for_each(|(a, v)| *a += w * v);
    let mut out = [[[0.0; 3]; 2]; 4];
    for ax in 0..4 {
        let (w1, a) = (t.tag_weight[ax], ax / 2);
        for b in 0..2 {
            let acc = &mut out[ax][b];
            match *eve {
                EveStrategy::Passive { loss, .. } => {
                    mix(acc, (1.0 - loss) * (1.0 - w1), &t.bob_clean[ax][b]);
                    mix(acc, (1.0 - loss) * w1, &t.bob_tagged[ax][b]);
                    mix(acc, loss, &t.bob_vacuum);
                }
                EveStrategy::InterceptResend { basis } => {
                    for e in 0..2 {
                        let pe = match basis {
                            None => 0.5,
                            Some(f) => f64::from(u8::from(f == e)),
                        };
                        for r in 0..3 {
                            let pr = pe * ((1.0 - w1) * t.eve_clean[ax][e][r] + w1 * t.eve_tagged[ax][e][r]);
                            let next = if r == 2 { &t.bob_vacuum } else { &t.bob_clean[ax_index(e, r)][b] };
                            mix(acc, pr, next);
                        }
                    }
                }
                EveStrategy::TagExploit => {
                    mix(acc, 1.0 - w1, &t.bob_clean[ax][b]);
                    for g in 0..3 {
                        let next = if g == 2 { &t.bob_vacuum } else { &t.bob_clean[ax_index(a, g)][b] };
                        mix(acc, w1 * t.tag_guess[ax][g], next);
                    }
                }
            }
        }
    }
    out
}

/// Counts of a session with every set at its expected size (rounded per
/// basis), for deterministic rate calculations without sampling noise.
pub fn expected_counts(cfg: &ProtocolConfig, src: &CharacterizedSource) -> Result<ProtocolCounts> {
    cfg.validate()?;
    let t = Tables::new(src, cfg)?;
    let dist = expected_outcomes(&t, &cfg.eve);
    let n = cfg.n as f64;
    let (mut d, mut c, mut err) = ([0.0; 2], [0.0; 2], 0.0);
    let mut pa = [0.0; 2];
    for ax in 0..4 {
        let (a, x) = (ax / 2, ax % 2);
        pa[a] += t.probs[ax];
        for b in 0..2 {
            let w = n * t.probs[ax] * cfg.bob_basis_probs[b];
            let p = &dist[ax][b];
            d[a] += w * (p[0] + p[1]);
            if a == b {
                c[a] += w * (p[0] + p[1]);
                err += w * p[1 - x];
            }
        }
    }
    let round = |v: f64| v.round() as u64;
    let a0 = round(n * pa[0]).min(cfg.n);
    let a = [a0, cfg.n - a0];
    let d = [0, 1].map(|i| round(d[i]).min(a[i]));
    let c = [0, 1].map(|i| round(c[i]).min(d[i]));
    let tt = [0, 1].map(|i| round(cfg.test_fraction * c[i as usize] as f64));
    let k = [c[0] - tt[0], c[1] - tt[1]];
    let n_c = c[0] + c[1];
    let n_t = tt[0] + tt[1];
    let rate = if c[0] + c[1] == 0 { 0.0 } else { err / (c[0] + c[1]) as f64 };
    Ok(ProtocolCounts {
        n: cfg.n,
        n_d: d[0] + d[1],
        n_c,
        n_t,
        n_k: n_c - n_t,
        n_t_e: round(rate * n_t as f64).min(n_t),
        basis: BasisCounts { a, d, c, t: tt, k },
        collapse_bob_mode: false,
    })
}

/// Runs one session. Independent streams drive Alice, the source tag, Eve,
/// Bob and sampling, so changing the adversary leaves Alice's strings fixed.
pub fn run_session(cfg: &ProtocolConfig, src: &CharacterizedSource, index: u64) -> Result<SessionRecord> {
    cfg.validate()?;
    let tables = Tables::new(src, cfg)?;
    Ok(run_with_tables(cfg, &tables, index))
}

/// Runs sessions `0..count` in parallel; results are in index order.
pub fn run_sessions(cfg: &ProtocolConfig, src: &CharacterizedSource, count: u64) -> Result<Vec<SessionRecord>> {
    cfg.validate()?;
    let tables = Tables::new(src, cfg)?;
    Ok((0..count).into_par_iter().map(|i| run_with_tables(cfg, &tables, i)).collect())
}

fn run_with_tables(cfg: &ProtocolConfig, t: &Tables, index: u64) -> SessionRecord {
    let session_seed = seed::derive(cfg.seed, "session", index);
    let mut alice = seed::rng(session_seed, "alice", 0);
    let mut tag_rng = seed::rng(session_seed, "tag", 0);
    let mut eve_rng = seed::rng(session_seed, "eve", 0);
    let mut bob_rng = seed::rng(session_seed, "bob", 0);
    let mut sift_rng = seed::rng(session_seed, "sift", 0);

    let n = cfg.n as usize;
    let (mut a, mut x, mut b, mut y) = (vec![0u8; n], vec![0u8; n], vec![0u8; n], vec![0u8; n]);
    let mut tagged = vec![false; n];
    let mut guess = vec![None; n];
    for i in 0..n {
        let ax = sample_index(&mut alice, &t.probs);
        a[i] = (ax / 2) as u8;
        x[i] = (ax % 2) as u8;
        b[i] = u8::from(alice.gen::<f64>() >= cfg.bob_basis_probs[0]);
        tagged[i] = tag_rng.gen::<f64>() < t.tag_weight[ax];
        let emitted = if tagged[i] { Signal::Tagged(ax) } else { Signal::Clean(ax) };
        let arriving = match cfg.eve {
            EveStrategy::Passive { loss, .. } => {
                if eve_rng.gen::<f64>() < loss {
                    Signal::Vacuum
                } else {
                    emitted
                }
            }
            EveStrategy::InterceptResend { basis } => {
                let e = basis.unwrap_or_else(|| usize::from(eve_rng.gen::<bool>()));
                let dist = match emitted {
                    Signal::Clean(j) => &t.eve_clean[j][e],
                    Signal::Tagged(j) => &t.eve_tagged[j][e],
                    Signal::Vacuum => unreachable!("emissions are never vacuum signals"),
                };
                match sample3(&mut eve_rng, dist) {
                    PHI => Signal::Vacuum,
                    r => {
                        if e == a[i] as usize {
                            guess[i] = Some(r);
                        }
                        Signal::Clean(ax_index(e, r as usize))
                    }
                }
            }
            EveStrategy::TagExploit => {
                if tagged[i] {
                    match sample3(&mut eve_rng, &t.tag_guess[ax]) {
                        PHI => Signal::Vacuum,
                        g => {
                            guess[i] = Some(g);
                            Signal::Clean(ax_index(a[i] as usize, g as usize))
                        }
                    }
                } else {
                    emitted
                }
            }
        };
        y[i] = sample3(&mut bob_rng, t.bob(arriving, b[i] as usize));
    }

    let sets = sift(&a, &b, &y, cfg.test_fraction, &mut sift_rng).expect("equal lengths");
    let n_t_e = count_errors(&x, &y, &sets.t).expect("T is inside D");
    let tag_exploit = matches!(cfg.eve, EveStrategy::TagExploit);
    let (m, l): (Vec<usize>, Vec<usize>) =
        sets.k.iter().copied().partition(|&i| tag_exploit && tagged[i] && guess[i].is_some());
    let per_basis = |idx: &[usize]| {
        let zero = idx.iter().filter(|&&i| a[i] == 0).count() as u64;
        [zero, idx.len() as u64 - zero]
    };
    let a0 = a.iter().filter(|&&v| v == 0).count() as u64;
    let counts = ProtocolCounts {
        n: cfg.n,
        n_d: sets.d.len() as u64,
        n_c: sets.c.len() as u64,
        n_t: sets.t.len() as u64,
        n_k: sets.k.len() as u64,
        n_t_e,
        basis: BasisCounts {
            a: [a0, cfg.n - a0],
            d: per_basis(&sets.d),
            c: per_basis(&sets.c),
            t: per_basis(&sets.t),
            k: per_basis(&sets.k),
        },
        collapse_bob_mode: false,
    };
    SessionRecord { index, seed: session_seed, a, x, b, y, tagged, eve_guess: guess, sets, m, l, n_t_e, counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmath::kets;
    use rand::SeedableRng;

    fn cfg(eve: EveStrategy, eff: f64, n: u64) -> ProtocolConfig {
        ProtocolConfig {
            n,
            bob_basis_probs: [0.5, 0.5],
            detector: Detector { efficiency: eff, dark_count: 0.0 },
            eve,
            test_fraction: 0.1,
            seed: 7,
        }
    }

    #[test]
    fn qubit_povm_is_projective_for_ideal_detector() {
        let layout = FockLayout::qubit();
        let z = Detector::IDEAL.povm(&layout, 0);
        assert!(z[0].max_abs_diff(&CMat::diag(&[1.0, 0.0])) < 1e-12);
        assert!(z[2].max_abs() < 1e-12);
        let x = Detector::IDEAL.povm(&layout, 1);
        assert!(x[0].max_abs_diff(DensityOp::pure(&kets::plus()).mat()) < 1e-12);
    }

    #[test]
    fn povm_complete_on_fock_layouts() {
        let src = CharacterizedSource::coherent(0.5, crate::source::Polarization::bb84()).unwrap();
        let layout = src.spec.layout().unwrap();
        let det = Detector { efficiency: 0.3, dark_count: 1e-3 };
        for b in 0..2 {
            let e = det.povm(layout, b);
            let sum = e[0].add(&e[1]).add(&e[2]);
            assert!(sum.max_abs_diff(&CMat::identity(layout.dim())) < 1e-9);
        }
        assert!(det.povm(layout, 0)[2].max_abs_diff(&det.povm(layout, 1)[2]) < 1e-9);
    }

    #[test]
    fn multiphoton_diagonal_state_in_x_basis() {
        // |D D> = (h + v)^2 / 2 |vac> has H/V amplitudes (1/2, 1/sqrt2, 1/2)
        let v = basis_fock_state(1, 2, 0);
        let expected = [0.5, 0.5f64.sqrt(), 0.5];
        for i in 0..3 {
            assert!((v[i].re - expected[i]).abs() < 1e-12);
        }
        let w = basis_fock_state(1, 1, 1);
        assert!((w.norm() - 1.0).abs() < 1e-12);
        assert!((v.dotc(&w)).norm() < 1e-12);
    }

    #[test]
    fn measure_bob_examples() {
        let layout = FockLayout::qubit();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let zero = DensityOp::pure(&kets::basis(2, 0));
        for _ in 0..100 {
            assert_eq!(measure_bob(&mut rng, &zero, 0, &Detector::IDEAL, &layout).unwrap(), 0);
        }
        let dead = Detector { efficiency: 0.0, dark_count: 0.0 };
        assert_eq!(measure_bob(&mut rng, &zero, 0, &dead, &layout).unwrap(), PHI);
        let plus = DensityOp::pure(&kets::plus());
        let ones =
            (0..10_000).filter(|_| measure_bob(&mut rng, &plus, 0, &Detector::IDEAL, &layout).unwrap() == 1).count();
        assert!((ones as f64 / 1e4 - 0.5).abs() < 0.015);
    }

    #[test]
    fn sift_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = sift(&[0, 1, 0], &[0, 1, 0], &[PHI; 3], 0.5, &mut rng).unwrap();
        assert!(s.d.is_empty() && s.c.is_empty() && s.t.is_empty() && s.k.is_empty());
        let s = sift(&[0, 1, 0, 1], &[0, 1, 0, 1], &[0, 1, 1, 0], 0.5, &mut rng).unwrap();
        assert_eq!(s.c, vec![0, 1, 2, 3]);
        assert_eq!(s.t.len(), 2);
        assert!(sift(&[0], &[0, 1], &[0, 1], 0.5, &mut rng).is_err());
    }

    #[test]
    fn count_errors_examples() {
        assert_eq!(count_errors(&[0, 1, 1], &[0, 1, 1], &[0, 1, 2]).unwrap(), 0);
        assert_eq!(count_errors(&[0, 1, 1], &[1, 0, 0], &[0, 1, 2]).unwrap(), 3);
        assert!(count_errors(&[0, 1], &[0, PHI], &[0, 1]).is_err());
    }

    #[test]
    fn ideal_session_has_no_errors() {
        let src = CharacterizedSource::ideal_bb84();
        let r = run_session(&cfg(EveStrategy::default(), 1.0, 5000), &src, 0).unwrap();
        assert_eq!(r.sets.d.len(), 5000);
        assert_eq!(r.n_t_e, 0);
        assert_eq!(r.error_rate_k(), 0.0);
        r.counts.validate().unwrap();
        assert_eq!(r.l, r.sets.k);
    }

    #[test]
    fn efficiency_thins_detections() {
        let src = CharacterizedSource::ideal_bb84();
        let r = run_session(&cfg(EveStrategy::default(), 0.5, 20_000), &src, 0).unwrap();
        assert!((r.sets.d.len() as f64 / 2e4 - 0.5).abs() < 0.01);
    }

    /// Sifted error rate of random-basis intercept-resend, enumerated over
    /// Eve's basis and outcome with Bloch-vector Born probabilities.
    fn intercept_resend_enumeration() -> f64 {
        let axis = |basis: usize| if basis == 0 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let bloch = |a: usize, x: usize| axis(a).map(|v| if x == 0 { v } else { -v });
        let born = |r: [f64; 3], basis: usize, y: usize| {
            let n = axis(basis);
            let dot: f64 = (0..3).map(|i| r[i] * n[i]).sum();
            0.5 * (1.0 + if y == 0 { dot } else { -dot })
        };
        let mut err = 0.0;
        for a in 0..2 {
            for x in 0..2 {
                for e in 0..2 {
                    for r in 0..2 {
                        let p_r = born(bloch(a, x), e, r);
                        err += 0.25 * 0.5 * p_r * born(bloch(e, r), a, 1 - x);
                    }
                }
            }
        }
        err
    }

    #[test]
    fn intercept_resend_quarter_error() {
        let oracle = intercept_resend_enumeration();
        assert!((oracle - 0.25).abs() < 1e-12);
        let src = CharacterizedSource::ideal_bb84();
        let r = run_session(&cfg(EveStrategy::InterceptResend { basis: None }, 1.0, 100_000), &src, 0).unwrap();
        assert!((r.error_rate_k() - oracle).abs() < 0.01, "{}", r.error_rate_k());
        assert!((r.qber() - oracle).abs() < 0.03);
    }

    #[test]
    fn fixed_basis_intercept_is_silent_in_that_basis() {
        let src = CharacterizedSource::ideal_bb84();
        let r = run_session(&cfg(EveStrategy::InterceptResend { basis: Some(0) }, 1.0, 20_000), &src, 0).unwrap();
        let z_errors = r.sets.k.iter().filter(|&&i| r.a[i] == 0 && r.x[i] != r.y[i]).count();
        assert_eq!(z_errors, 0);
        assert!((r.error_rate_k() - 0.25).abs() < 0.02);
    }

    #[test]
    fn coherent_tag_exploit_guesses_multiphoton_bits() {
        let src = CharacterizedSource::coherent(0.5, crate::source::Polarization::bb84()).unwrap();
        let mut c = cfg(EveStrategy::TagExploit, 1.0, 20_000);
        c.test_fraction = 0.2;
        let r = run_session(&c, &src, 0).unwrap();
        let (acc, size) = r.eve_accuracy_on_m();
        assert!(size > 100);
        assert!(acc > 0.999, "{acc}");
        assert!(r.m.iter().all(|i| r.sets.k.contains(i)));
    }

    #[test]
    fn expected_counts_track_simulation() {
        let src = CharacterizedSource::coherent(0.5, crate::source::Polarization::bb84()).unwrap();
        for eve in [
            EveStrategy::Passive { loss: 0.3, depolarizing: 0.1 },
            EveStrategy::InterceptResend { basis: None },
            EveStrategy::TagExploit,
        ] {
            let c = cfg(eve, 0.8, 100_000);
            let e = expected_counts(&c, &src).unwrap();
            e.validate().unwrap();
            let r = run_session(&c, &src, 0).unwrap().counts;
            assert!((e.n_d as f64 - r.n_d as f64).abs() < 5.0 * (e.n_d as f64).sqrt() + 1.0, "{eve:?}");
            assert!((e.qber() - r.qber()).abs() < 0.02, "{eve:?}: {} vs {}", e.qber(), r.qber());
        }
        let ideal = CharacterizedSource::ideal_bb84();
        let ir = expected_counts(&cfg(EveStrategy::InterceptResend { basis: None }, 1.0, 1_000_000), &ideal).unwrap();
        assert!((ir.qber() - 0.25).abs() < 1e-4);
    }

    #[test]
    fn sessions_are_deterministic() {
        let src = CharacterizedSource::ideal_bb84();
        let c = cfg(EveStrategy::InterceptResend { basis: None }, 0.9, 2000);
        let r1 = run_sessions(&c, &src, 3).unwrap();
        let r2 = run_sessions(&c, &src, 3).unwrap();
        assert_eq!(r1, r2);
        assert_ne!(r1[0].x, r1[1].x);
    }
}
