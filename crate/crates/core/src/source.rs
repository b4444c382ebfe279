//! Characterized sources and the objects the security bound is built from.
//!
//! A source emits one of four states `rho[a,x]` with probabilities `p[a,x]`.
//! [`decompose`] splits each state into a basis-independent-weight component
//! `rho0` (the part the key rate relies on) and a tagged remainder `rho1`.
//! [`build_gram`] realizes the `rho0` family by four pure states on a
//! four-dimensional space, and [`fit_qubit_model`] approximates those pure
//! states by qubit states `sigma` that satisfy `sigma[a,0] + sigma[a,1] = I`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qmath::{
    self, eig_hermitian, fidelity, psd_factor, qubit_from_bloch, trace_distance, CMat, DensityOp, HermitianEigen,
    QmathError, C64, COMPOSITION_TOL,
};
use crate::{ax_index, Basis};

/// Residual-PSD tolerance for user-supplied tag states.
pub const TAG_RESIDUAL_TOL: f64 = 1e-8;
/// Fock truncation targets a Poisson tail below this mass.
pub const FOCK_TAIL_TOL: f64 = 1e-12;
/// Eigenvalues at or below this are outside a state's support.
const SUPPORT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error(transparent)]
    Linalg(#[from] QmathError),
    #[error("probabilities sum to {sum}, expected 1")]
    BadProbabilities { sum: f64 },
    #[error("probability p[{a},{x}] = {p} outside (0, 1)")]
    ProbabilityOutOfRange { a: usize, x: usize, p: f64 },
    #[error("states have inconsistent dimensions")]
    DimMismatch,
    #[error("tag weight p0 = {p0} must satisfy 0 < p0 <= min p[a,x] = {min_p}")]
    BadTagWeight { p0: f64, min_p: f64 },
    #[error("decomposition residual for ({a},{x}) is not PSD (min eigenvalue {min_eigenvalue:e})")]
    InvalidDecomposition { a: usize, x: usize, min_eigenvalue: f64 },
    #[error("Fock cutoff {cutoff} leaves tail mass {tail:e} (need < {FOCK_TAIL_TOL:e})")]
    CutoffTooSmall { cutoff: usize, tail: f64 },
    #[error("mean photon number must be positive, got {0}")]
    BadMeanPhotonNumber(f64),
    #[error("Gram diagonal entry {index} is {value}, expected 1")]
    MalformedPairing { index: usize, value: f64 },
    #[error("Gram matrix is not Hermitian/PSD (defect {defect:e})")]
    InfeasibleOverlap { defect: f64 },
    #[error("qubit model violates sigma[{a},0] + sigma[{a},1] = I (defect {defect:e})")]
    Incomplete { a: usize, defect: f64 },
    #[error("canonical qubit model needs the pure states to span at most 2 dimensions (third eigenvalue {third:e})")]
    NotQubitSpan { third: f64 },
    #[error("pairing table malformed: {0}")]
    BadPairing(String),
}

pub type Result<T> = std::result::Result<T, SourceError>;

/// One photon-number sector of a Fock-truncated polarization source.
///
/// `isometry` maps sector coordinates to the two-mode Fock basis
/// `|k - i, i>` (index `i` counts photons in the second mode).
#[derive(Debug, Clone, PartialEq)]
pub struct Sector {
    pub photons: usize,
    pub offset: usize,
    pub dim: usize,
    pub isometry: CMat,
}

/// Block structure of the emission space by photon number.
#[derive(Debug, Clone, PartialEq)]
pub struct FockLayout {
    pub sectors: Vec<Sector>,
}

impl FockLayout {
    /// A single-photon polarization qubit (`|0> = first mode`).
    pub fn qubit() -> Self {
        FockLayout { sectors: vec![Sector { photons: 1, offset: 0, dim: 2, isometry: CMat::identity(2) }] }
    }

    pub fn dim(&self) -> usize {
        self.sectors.iter().map(|s| s.dim).sum()
    }
}

/// The characterized source: four emitted states and their probabilities.
#[derive(Debug, Clone)]
pub struct SourceSpec {
    dim: usize,
    states: [DensityOp; 4],
    probs: [f64; 4],
    layout: Option<FockLayout>,
}

impl SourceSpec {
    pub fn new(states: [DensityOp; 4], probs: [f64; 4]) -> Result<Self> {
        let dim = states[0].dim();
        if states.iter().any(|s| s.dim() != dim) {
            return Err(SourceError::DimMismatch);
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > COMPOSITION_TOL {
            return Err(SourceError::BadProbabilities { sum });
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(SourceError::ProbabilityOutOfRange { a: i / 2, x: i % 2, p });
            }
        }
        let layout = (dim == 2).then(FockLayout::qubit);
        Ok(SourceSpec { dim, states, probs, layout })
    }

    pub fn with_layout(mut self, layout: FockLayout) -> Result<Self> {
        if layout.dim() != self.dim {
            return Err(SourceError::DimMismatch);
        }
        self.layout = Some(layout);
        Ok(self)
    }

    /// |0>, |1>, |+>, |-> with uniform probabilities.
    pub fn ideal_bb84() -> Self {
        Self::bb84_with_noise(0.0)
    }

    /// Ideal BB84 states each mixed with `noise` of the maximally mixed state.
    pub fn bb84_with_noise(noise: f64) -> Self {
        let kets = [qmath::kets::basis(2, 0), qmath::kets::basis(2, 1), qmath::kets::plus(), qmath::kets::minus()];
        let mixed = DensityOp::maximally_mixed(2);
        let states = kets.map(|k| DensityOp::pure(&k).mix(&mixed, 1.0 - noise).expect("qubit dims"));
        SourceSpec::new(states, [0.25; 4]).expect("valid ideal source")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, a: Basis, x: usize) -> &DensityOp {
        &self.states[ax_index(a, x)]
    }

    pub fn states(&self) -> &[DensityOp; 4] {
        &self.states
    }

    pub fn prob(&self, a: Basis, x: usize) -> f64 {
        self.probs[ax_index(a, x)]
    }

    pub fn probs(&self) -> [f64; 4] {
        self.probs
    }

    pub fn layout(&self) -> Option<&FockLayout> {
        self.layout.as_ref()
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// A weighted component of one emitted state.
#[derive(Debug, Clone)]
pub struct Component {
    pub weight: f64,
    pub state: DensityOp,
}

/// `rho[a,x] = w0[a,x] rho0[a,x] + w1[a,x] rho1[a,x]` with `p[a,x] w0[a,x] = p0`.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub p0: f64,
    pub comp0: [Component; 4],
    pub comp1: [Component; 4],
    /// Schatten decomposition of each `rho0`.
    pub schatten: [HermitianEigen; 4],
}

impl Decomposition {
    pub fn tag0(&self, a: Basis, x: usize) -> &Component {
        &self.comp0[ax_index(a, x)]
    }

    pub fn tag1(&self, a: Basis, x: usize) -> &Component {
        &self.comp1[ax_index(a, x)]
    }

    /// Recombined `w0 rho0 + w1 rho1`.
    pub fn recombine(&self, a: Basis, x: usize) -> CMat {
        let (c0, c1) = (self.tag0(a, x), self.tag1(a, x));
        c0.state.mat().scale(c0.weight).add(&c1.state.mat().scale(c1.weight))
    }
}

/// Split each source state with common tag weight `p0`.
///
/// Without `tag_states` the degenerate split `rho0 = rho1 = rho` is used.
pub fn decompose(spec: &SourceSpec, p0: f64, tag_states: Option<&[DensityOp; 4]>) -> Result<Decomposition> {
    let min_p = spec.min_prob();
    if !(p0 > 0.0 && p0 <= min_p * (1.0 + 1e-12)) {
        return Err(SourceError::BadTagWeight { p0, min_p });
    }
    let mut comp0 = Vec::with_capacity(4);
    let mut comp1 = Vec::with_capacity(4);
    for i in 0..4 {
        let (a, x) = (i / 2, i % 2);
        let rho = &spec.states[i];
        let w0 = (p0 / spec.probs[i]).min(1.0);
        let w1 = 1.0 - w0;
        let (rho0, rho1) = match tag_states {
            None => (rho.clone(), rho.clone()),
            Some(tags) => {
                let tag = &tags[i];
                if tag.dim() != rho.dim() {
                    return Err(SourceError::DimMismatch);
                }
                if w1 <= 1e-12 {
                    let defect = rho.mat().max_abs_diff(tag.mat());
                    if defect > TAG_RESIDUAL_TOL {
                        return Err(SourceError::InvalidDecomposition { a, x, min_eigenvalue: -defect });
                    }
                    (tag.clone(), tag.clone())
                } else {
                    let residual = rho.mat().sub(&tag.mat().scale(w0)).scale(1.0 / w1);
                    let min = eig_hermitian(&residual.hermitian_part())?.values.last().copied().unwrap_or(0.0);
                    if min < -TAG_RESIDUAL_TOL {
                        return Err(SourceError::InvalidDecomposition { a, x, min_eigenvalue: min });
                    }
                    (tag.clone(), DensityOp::from_clipped(residual, TAG_RESIDUAL_TOL)?)
                }
            }
        };
        comp0.push(Component { weight: w0, state: rho0 });
        comp1.push(Component { weight: w1, state: rho1 });
    }
    let comp0: [Component; 4] = comp0.try_into().expect("four components");
    let comp1: [Component; 4] = comp1.try_into().expect("four components");
    let schatten = [0, 1, 2, 3].map(|i| eig_hermitian(comp0[i].state.mat()));
    let [s0, s1, s2, s3] = schatten;
    Ok(Decomposition { p0, comp0, comp1, schatten: [s0?, s1?, s2?, s3?] })
}

/// Polarization setting on the Bloch sphere: `cos(t/2)|H> + e^{i phi} sin(t/2)|V>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Polarization {
    pub theta: f64,
    pub phi: f64,
}

impl Polarization {
    pub const fn new(theta: f64, phi: f64) -> Self {
        Polarization { theta, phi }
    }

    /// H, V, D, A in the order (0,0), (0,1), (1,0), (1,1).
    pub fn bb84() -> [Polarization; 4] {
        use std::f64::consts::{FRAC_PI_2, PI};
        [Self::new(0.0, 0.0), Self::new(PI, 0.0), Self::new(FRAC_PI_2, 0.0), Self::new(FRAC_PI_2, PI)]
    }

    pub fn amplitudes(&self) -> [C64; 2] {
        [C64::new((self.theta / 2.0).cos(), 0.0), C64::from_polar((self.theta / 2.0).sin(), self.phi)]
    }
}

fn poisson(mu: f64, k: usize) -> f64 {
    let ln = k as f64 * mu.ln() - mu - ln_factorial(k);
    ln.exp()
}

pub fn ln_factorial(k: usize) -> f64 {
    if k <= 256 {
        return (2..=k).map(|i| (i as f64).ln()).sum();
    }
    // Stirling series; the first omitted term is below 1e-19 here.
    let x = k as f64;
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    x * x.ln() - x + 0.5 * (std::f64::consts::TAU * x).ln() + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}

fn binomial(n: usize, k: usize) -> f64 {
    (ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)).exp()
}

/// Poisson mass strictly above `cutoff`.
pub fn poisson_tail(mu: f64, cutoff: usize) -> f64 {
    let mut tail = 0.0;
    let mut k = cutoff + 1;
    loop {
        let term = poisson(mu, k);
        tail += term;
        if (term < 1e-30 && k as f64 > mu) || k > cutoff + 10_000 {
            break;
        }
        k += 1;
    }
    tail
}

/// Smallest cutoff whose Poisson tail is below [`FOCK_TAIL_TOL`].
pub fn default_cutoff(mu: f64) -> usize {
    (0..).find(|&k| poisson_tail(mu, k) < FOCK_TAIL_TOL).expect("tail eventually vanishes")
}

/// Two-mode Fock amplitudes of `k` photons in polarization `u`.
pub fn photon_amplitudes(k: usize, u: [C64; 2]) -> DVector<C64> {
    DVector::from_fn(k + 1, |i, _| u[0].powu((k - i) as u32) * u[1].powu(i as u32) * binomial(k, i).sqrt())
}

/// Phase-randomized coherent states: `rho_alpha = sum_k Poisson(mu, k) |k;alpha><k;alpha|`.
///
/// Each photon-number sector is compressed to the span of the four
/// `|k;alpha>` kets. The tag component is the single-photon state, giving
/// `w0 = mu e^{-mu}` (renormalized over the truncated support) for uniform
/// probabilities.
pub fn coherent_source(
    mu: f64,
    cutoff: Option<usize>,
    angles: [Polarization; 4],
    probs: [f64; 4],
) -> Result<(SourceSpec, Decomposition)> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(SourceError::BadMeanPhotonNumber(mu));
    }
    let cutoff = match cutoff {
        Some(c) => {
            let tail = poisson_tail(mu, c);
            if tail >= FOCK_TAIL_TOL {
                return Err(SourceError::CutoffTooSmall { cutoff: c, tail });
            }
            c
        }
        None => default_cutoff(mu),
    };
    let amps = angles.map(|p| p.amplitudes());
    let mut sectors = Vec::new();
    // kets[alpha][sector] in sector coordinates
    let mut kets: Vec<Vec<DVector<C64>>> = vec![Vec::new(); 4];
    let mut offset = 0;
    for k in 0..=cutoff {
        let fock: Vec<DVector<C64>> = amps.iter().map(|u| photon_amplitudes(k, *u)).collect();
        let isometry = if k <= 1 {
            CMat::identity(k + 1)
        } else {
            let mut spread = CMat::zeros(k + 1, k + 1);
            for v in &fock {
                spread = spread.add(&CMat::outer(v));
            }
            let eig = eig_hermitian(&spread)?;
            let rank = eig.values.iter().filter(|&&l| l > 1e-12).count();
            if rank == k + 1 {
                CMat::identity(k + 1)
            } else {
                CMat(eig.vectors.0.columns(0, rank).into_owned())
            }
        };
        let dim = isometry.cols();
        for (alpha, v) in fock.iter().enumerate() {
            kets[alpha].push(isometry.0.adjoint() * v);
        }
        sectors.push(Sector { photons: k, offset, dim, isometry });
        offset += dim;
    }
    let layout = FockLayout { sectors };
    let total_dim = layout.dim();
    let weights: Vec<f64> = (0..=cutoff).map(|k| poisson(mu, k)).collect();
    let norm: f64 = weights.iter().sum();

    let embed = |alpha: usize, k: usize| -> CMat {
        let s = &layout.sectors[k];
        let mut full = DVector::zeros(total_dim);
        full.rows_mut(s.offset, s.dim).copy_from(&kets[alpha][k]);
        CMat::outer(&full)
    };
    let mut states = Vec::with_capacity(4);
    let mut tags = Vec::with_capacity(4);
    for alpha in 0..4 {
        let mut m = CMat::zeros(total_dim, total_dim);
        for (k, w) in weights.iter().enumerate() {
            m = m.add(&embed(alpha, k).scale(w / norm));
        }
        states.push(DensityOp::from_clipped(m, 1e-9)?);
        tags.push(DensityOp::from_clipped(embed(alpha, 1.min(cutoff)), 1e-9)?);
    }
    let states: [DensityOp; 4] = states.try_into().expect("four states");
    let tags: [DensityOp; 4] = tags.try_into().expect("four tags");
    let spec = SourceSpec::new(states, probs)?.with_layout(layout)?;
    let single_photon = weights.get(1).copied().unwrap_or(0.0) / norm;
    let p0 = probs.iter().copied().fold(f64::INFINITY, f64::min) * single_photon;
    let dec = decompose(&spec, p0, Some(&tags))?;
    Ok((spec, dec))
}

/// Maps eigenvector indices between the Schatten decompositions of `rho0`.
#[derive(Debug, Clone, PartialEq)]
pub enum Pairing {
    /// k-th largest eigenvector of alpha pairs with k-th largest of beta;
    /// indices beyond the smaller support contribute nothing.
    RankOrder,
    /// `table[alpha][beta][k]` is the beta-index paired with alpha's k-th.
    Table(Vec<Vec<Vec<usize>>>),
}

/// Overlaps of the ancilla kets attached to each eigenvector.
#[derive(Debug, Clone, PartialEq)]
pub enum Ancilla {
    /// One shared ancilla ket: every overlap is 1.
    Identical,
    /// `table[alpha][beta][k]` = <phi_{k_alpha} | phi_{k_alpha beta}>.
    Overlaps(Vec<Vec<Vec<C64>>>),
}

/// Four pure states on a 4-dim space whose overlaps realize the Gram matrix.
#[derive(Debug, Clone)]
pub struct Purification {
    pub gram: CMat,
    pub factor: CMat,
    pub pure_states: [DensityOp; 4],
}

impl Purification {
    pub fn column(&self, alpha: usize) -> DVector<C64> {
        self.factor.column(alpha)
    }

    /// Largest |<C_alpha|C_beta> - G_alpha_beta|.
    pub fn realization_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                let overlap = (self.column(a).adjoint() * self.column(b))[(0, 0)];
                worst = worst.max((overlap - self.gram.0[(a, b)]).norm());
            }
        }
        worst
    }
}

fn support(eig: &HermitianEigen) -> usize {
    eig.values.iter().take_while(|&&l| l > SUPPORT_TOL).count()
}

/// Gram matrix `G[a][b] = sum_k sqrt(l_a(k) l_b(k_ab)) <k_a|k_ab> <phi_k_a|phi_k_ab>`
/// and its factorization into pure states.
pub fn build_gram(dec: &Decomposition, pairing: &Pairing, ancilla: &Ancilla) -> Result<Purification> {
    let supports: Vec<usize> = dec.schatten.iter().map(support).collect();
    if let Pairing::Table(t) = pairing {
        if t.len() != 4 || t.iter().any(|row| row.len() != 4) {
            return Err(SourceError::BadPairing("expected a 4x4 table".into()));
        }
        for alpha in 0..4 {
            if t[alpha][alpha].iter().enumerate().any(|(k, &j)| k != j) {
                return Err(SourceError::BadPairing(format!("pairing {alpha}->{alpha} is not the identity")));
            }
            for beta in 0..4 {
                let row = &t[alpha][beta];
                if row.len() < supports[alpha] || row.iter().take(supports[alpha]).any(|&j| j >= supports[beta]) {
                    return Err(SourceError::BadPairing(format!("pairing {alpha}->{beta} out of range")));
                }
            }
        }
    }
    let mut g = CMat::zeros(4, 4);
    for alpha in 0..4 {
        let ea = &dec.schatten[alpha];
        for beta in 0..4 {
            let eb = &dec.schatten[beta];
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..supports[alpha] {
                let j = match pairing {
                    Pairing::RankOrder => {
                        if k >= supports[beta] {
                            continue;
                        }
                        k
                    }
                    Pairing::Table(t) => t[alpha][beta][k],
                };
                let amp = (ea.values[k] * eb.values[j]).max(0.0).sqrt();
                let ket_overlap = (ea.vectors.column(k).adjoint() * eb.vectors.column(j))[(0, 0)];
                let anc = match ancilla {
                    Ancilla::Identical => C64::new(1.0, 0.0),
                    Ancilla::Overlaps(t) => t[alpha][beta][k],
                };
                acc += ket_overlap * anc * amp;
            }
            g.0[(alpha, beta)] = acc;
        }
    }
    for i in 0..4 {
        let value = g.0[(i, i)].re;
        if (value - 1.0).abs() > 1e-6 {
            return Err(SourceError::MalformedPairing { index: i, value });
        }
    }
    let defect = g.hermitian_defect();
    if defect > 1e-6 {
        return Err(SourceError::InfeasibleOverlap { defect });
    }
    let g = g.hermitian_part();
    let min = eig_hermitian(&g)?.values[3];
    if min < -1e-6 {
        return Err(SourceError::InfeasibleOverlap { defect: -min });
    }
    let factor = psd_factor(&g).map_err(|_| SourceError::InfeasibleOverlap { defect: -min })?;
    let pure_states = [0, 1, 2, 3].map(|i| DensityOp::pure(&factor.column(i)));
    Ok(Purification { gram: g, factor, pure_states })
}

/// How the qubit approximants `sigma` are chosen.
#[derive(Debug, Clone)]
pub enum QubitStrategy {
    /// `sigma = rho_hat`, valid when the pure states already live on a qubit
    /// and satisfy the completeness relation.
    Canonical,
    /// Project onto the two dominant principal directions and fit antipodal
    /// Bloch vectors per basis, minimizing the worst trace distance.
    DominantSubspace,
    /// Caller-provided qubit states, embedded via the dominant subspace.
    UserSupplied([DensityOp; 4]),
}

/// Qubit approximation of the purified source.
#[derive(Debug, Clone)]
pub struct QubitModel {
    pub sigma: [DensityOp; 4],
    /// 4x2 isometry from the qubit into the purification space.
    pub embedding: CMat,
    pub rho_hat: [DensityOp; 4],
    pub per_state_dist: [f64; 4],
    pub per_state_fidelity: [f64; 4],
    /// F(rho_bar_0, rho_bar_1) with `rho_bar_a = (rho_hat[a,0] + rho_hat[a,1]) / 2`.
    pub avg_fidelity: f64,
    pub avg_dist_single: f64,
}

impl QubitModel {
    pub fn sigma(&self, a: Basis, x: usize) -> &DensityOp {
        &self.sigma[ax_index(a, x)]
    }

    pub fn max_dist(&self) -> f64 {
        self.per_state_dist.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_fidelity(&self) -> f64 {
        self.per_state_fidelity.iter().copied().fold(1.0, f64::min)
    }
}

fn embed(w: &CMat, sigma: &DensityOp) -> Result<DensityOp> {
    Ok(DensityOp::from_clipped(w.mul(sigma.mat()).mul(&w.adjoint()), 1e-9)?)
}

fn compress(w: &CMat, rho: &DensityOp) -> CMat {
    w.adjoint().mul(rho.mat()).mul(w)
}

/// Top-2 eigenvectors of `sum_alpha rho_hat_alpha` and the third eigenvalue.
pub fn dominant_subspace(pur: &Purification) -> Result<(CMat, f64)> {
    let mut spread = CMat::zeros(4, 4);
    for s in &pur.pure_states {
        spread = spread.add(s.mat());
    }
    let eig = eig_hermitian(&spread)?;
    Ok((CMat(eig.vectors.0.columns(0, 2).into_owned()), eig.values[2]))
}

/// Largest deviation from `sigma[a,0] + sigma[a,1] = I` and the basis it occurs in.
pub fn completeness_defect(sigma: &[DensityOp; 4]) -> (usize, f64) {
    let id = CMat::identity(2);
    (0..2)
        .map(|a| (a, sigma[ax_index(a, 0)].mat().add(sigma[ax_index(a, 1)].mat()).max_abs_diff(&id)))
        .fold((0, 0.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc })
}

fn check_completeness(sigma: &[DensityOp; 4]) -> Result<()> {
    let (a, defect) = completeness_defect(sigma);
    if defect > COMPOSITION_TOL {
        return Err(SourceError::Incomplete { a, defect });
    }
    Ok(())
}

/// Worst trace distance within basis `a` for antipodal Bloch vector `r`.
fn basis_objective(w: &CMat, rho_hat: &[DensityOp; 4], a: Basis, r: [f64; 3]) -> f64 {
    let neg = [-r[0], -r[1], -r[2]];
    [r, neg]
        .iter()
        .enumerate()
        .map(|(x, v)| {
            let s = embed(w, &qubit_from_bloch(*v)).expect("embedded qubit state");
            trace_distance(&s, &rho_hat[ax_index(a, x)]).expect("equal dims")
        })
        .fold(0.0, f64::max)
}

fn clamp_ball(r: [f64; 3]) -> [f64; 3] {
    let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if n > 1.0 {
        r.map(|c| c / n)
    } else {
        r
    }
}

/// Compass search over the Bloch ball.
fn fit_bloch(w: &CMat, rho_hat: &[DensityOp; 4], a: Basis) -> [f64; 3] {
    let b0 = qmath::bloch_vector(&compress(w, &rho_hat[ax_index(a, 0)]));
    let b1 = qmath::bloch_vector(&compress(w, &rho_hat[ax_index(a, 1)]));
    let mut best = clamp_ball([0, 1, 2].map(|i| 0.5 * (b0[i] - b1[i])));
    let mut best_val = basis_objective(w, rho_hat, a, best);
    let mut step = 0.25;
    while step > 1e-7 {
        let mut improved = false;
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                let mut cand = best;
                cand[axis] += sign * step;
                let cand = clamp_ball(cand);
                let val = basis_objective(w, rho_hat, a, cand);
                if val < best_val - 1e-15 {
                    best = cand;
                    best_val = val;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best
}

/// Build the qubit approximation of `pur` with the given strategy.
pub fn fit_qubit_model(pur: &Purification, strategy: &QubitStrategy) -> Result<QubitModel> {
    let (w, third) = dominant_subspace(pur)?;
    let sigma: [DensityOp; 4] = match strategy {
        QubitStrategy::Canonical => {
            if third > 1e-9 {
                return Err(SourceError::NotQubitSpan { third });
            }
            let s = [0, 1, 2, 3].map(|i| DensityOp::from_clipped(compress(&w, &pur.pure_states[i]), 1e-9));
            let [s0, s1, s2, s3] = s;
            let s = [s0?, s1?, s2?, s3?];
            check_completeness(&s)?;
            s
        }
        QubitStrategy::DominantSubspace => {
            let r0 = fit_bloch(&w, &pur.pure_states, 0);
            let r1 = fit_bloch(&w, &pur.pure_states, 1);
            let neg = |r: [f64; 3]| r.map(|c| -c);
            [qubit_from_bloch(r0), qubit_from_bloch(neg(r0)), qubit_from_bloch(r1), qubit_from_bloch(neg(r1))]
        }
        QubitStrategy::UserSupplied(s) => {
            if s.iter().any(|d| d.dim() != 2) {
                return Err(SourceError::DimMismatch);
            }
            check_completeness(s)?;
            s.clone()
        }
    };
    model_from_sigma(pur, w, sigma)
}

fn model_from_sigma(pur: &Purification, w: CMat, sigma: [DensityOp; 4]) -> Result<QubitModel> {
    let mut per_state_dist = [0.0; 4];
    let mut per_state_fidelity = [0.0; 4];
    for i in 0..4 {
        let emb = embed(&w, &sigma[i])?;
        per_state_dist[i] = trace_distance(&emb, &pur.pure_states[i])?;
        per_state_fidelity[i] = fidelity(&emb, &pur.pure_states[i])?;
    }
    let bar = |a: Basis| -> Result<DensityOp> {
        Ok(pur.pure_states[ax_index(a, 0)].mix(&pur.pure_states[ax_index(a, 1)], 0.5)?)
    };
    let (bar0, bar1) = (bar(0)?, bar(1)?);
    Ok(QubitModel {
        sigma,
        embedding: w,
        rho_hat: pur.pure_states.clone(),
        per_state_dist,
        per_state_fidelity,
        avg_fidelity: fidelity(&bar0, &bar1)?,
        avg_dist_single: trace_distance(&bar0, &bar1)?,
    })
}

/// Upper bounds on the asymmetry terms for `n_l` positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymmetryBounds {
    /// Bound on the average distance between `rho_hat` and `sigma` products.
    pub nu_l: f64,
    /// `sqrt(1 - F(rho_bar_0, rho_bar_1)^(2 n_l))`.
    pub dt_bar: f64,
}

pub fn asymmetry_bounds(model: &QubitModel, n_l: u64) -> AsymmetryBounds {
    let n = n_l as f64;
    let fid_route = |f: f64| -> f64 {
        if f >= 1.0 {
            0.0
        } else {
            (1.0 - (2.0 * n * f.ln()).exp()).max(0.0).sqrt()
        }
    };
    let subadditive = n * model.max_dist();
    let nu_l = subadditive.min(fid_route(model.min_fidelity())).clamp(0.0, 1.0);
    let dt_bar = fid_route(model.avg_fidelity).clamp(0.0, 1.0);
    AsymmetryBounds { nu_l, dt_bar }
}

/// Everything the key-length bound needs to know about the source.
#[derive(Debug, Clone)]
pub struct CharacterizedSource {
    pub spec: SourceSpec,
    pub decomposition: Decomposition,
    pub purification: Purification,
    pub model: QubitModel,
}

impl CharacterizedSource {
    pub fn new(spec: SourceSpec, decomposition: Decomposition, strategy: &QubitStrategy) -> Result<Self> {
        let purification = build_gram(&decomposition, &Pairing::RankOrder, &Ancilla::Identical)?;
        let model = fit_qubit_model(&purification, strategy)?;
        Ok(CharacterizedSource { spec, decomposition, purification, model })
    }

    /// Perfect source: degenerate decomposition with `p0 = min p`.
    pub fn ideal_bb84() -> Self {
        let spec = SourceSpec::ideal_bb84();
        let dec = decompose(&spec, spec.min_prob(), None).expect("ideal decomposition");
        Self::new(spec, dec, &QubitStrategy::Canonical).expect("ideal source is a qubit")
    }

    /// Coherent source with the single-photon tag and canonical qubit model.
    pub fn coherent(mu: f64, angles: [Polarization; 4]) -> Result<Self> {
        let (spec, dec) = coherent_source(mu, None, angles, [0.25; 4])?;
        Self::new(spec, dec, &QubitStrategy::Canonical)
    }

    /// `pbar1[a] = (p[a,0] w1[a,0] + p[a,1] w1[a,1]) / (p[a,0] + p[a,1])`.
    pub fn pbar1(&self, a: Basis) -> f64 {
        let num: f64 = (0..2).map(|x| self.spec.prob(a, x) * self.decomposition.tag1(a, x).weight).sum();
        let den: f64 = (0..2).map(|x| self.spec.prob(a, x)).sum();
        if num <= 0.0 {
            0.0
        } else {
            num / den
        }
    }

    /// Priors of the tagged states within basis `a`, `p[a,x] w1[a,x] / sum_x'(...)`.
    pub fn tagged_priors(&self, a: Basis) -> [f64; 2] {
        let w = [0, 1].map(|x| self.spec.prob(a, x) * self.decomposition.tag1(a, x).weight);
        let total = w[0] + w[1];
        if total <= 0.0 {
            [0.5, 0.5]
        } else {
            w.map(|v| v / total)
        }
    }
}

/// Re-export of the qubit Bloch builder for callers assembling user sigma.
pub fn qubit_state(r: [f64; 3]) -> DensityOp {
    qubit_from_bloch(r)
}

/// Build a 2x2 matrix from real entries (test and config helper).
pub fn real_matrix(rows: &[&[f64]]) -> CMat {
    CMat(DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| C64::new(rows[i][j], 0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn ideal_degenerate_decomposition() {
        let spec = SourceSpec::ideal_bb84();
        let dec = decompose(&spec, 0.25, Some(spec.states())).unwrap();
        for i in 0..4 {
            assert!((dec.comp0[i].weight - 1.0).abs() < 1e-12);
            assert!(dec.comp0[i].state.mat().max_abs_diff(spec.states()[i].mat()) < 1e-12);
            assert!(dec.recombine(i / 2, i % 2).max_abs_diff(spec.states()[i].mat()) < 1e-9);
        }
        let dec = decompose(&spec, 0.1, None).unwrap();
        assert!((dec.comp0[0].weight - 0.4).abs() < 1e-12);
        assert!((dec.comp1[0].weight - 0.6).abs() < 1e-12);
    }

    #[test]
    fn tag_weight_precondition() {
        let spec = SourceSpec::ideal_bb84();
        assert!(matches!(decompose(&spec, 0.3, None), Err(SourceError::BadTagWeight { .. })));
        assert!(matches!(decompose(&spec, 0.0, None), Err(SourceError::BadTagWeight { .. })));
    }

    #[test]
    fn invalid_tag_residual_names_the_state() {
        // Tag |1> inside rho = |0><0| with weight 0.4 leaves a negative residual.
        let spec = SourceSpec::ideal_bb84();
        let mut tags = spec.states().clone();
        tags[0] = DensityOp::pure(&qmath::kets::basis(2, 1));
        match decompose(&spec, 0.1, Some(&tags)) {
            Err(SourceError::InvalidDecomposition { a: 0, x: 0, min_eigenvalue }) => assert!(min_eigenvalue < -0.1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coherent_weights_are_poisson() {
        let mu: f64 = 0.1;
        let (spec, dec) = coherent_source(mu, None, Polarization::bb84(), [0.25; 4]).unwrap();
        let expected = mu * (-mu).exp();
        assert!((expected - 0.090484).abs() < 1e-6);
        for i in 0..4 {
            assert!((dec.comp0[i].weight - expected).abs() < 1e-12);
            let rec = dec.recombine(i / 2, i % 2);
            assert!(rec.max_abs_diff(spec.states()[i].mat()) < 1e-9);
        }
        assert!((dec.p0 - 0.25 * expected).abs() < 1e-12);
        // vacuum weight sits in the first coordinate
        assert!((spec.state(0, 0).mat().0[(0, 0)].re - (-mu).exp()).abs() < 1e-12);
    }

    #[test]
    fn coherent_cutoff_checks() {
        let k = default_cutoff(0.1);
        assert!(poisson_tail(0.1, k) < FOCK_TAIL_TOL);
        assert!(poisson_tail(0.1, k - 1) >= FOCK_TAIL_TOL);
        assert!(matches!(
            coherent_source(0.1, Some(2), Polarization::bb84(), [0.25; 4]),
            Err(SourceError::CutoffTooSmall { .. })
        ));
        assert!(coherent_source(0.0, None, Polarization::bb84(), [0.25; 4]).is_err());
    }

    #[test]
    fn gram_of_identical_states_is_all_ones() {
        let psi = DensityOp::pure(&qmath::kets::plus());
        let spec = SourceSpec::new([psi.clone(), psi.clone(), psi.clone(), psi], [0.25; 4]).unwrap();
        let dec = decompose(&spec, 0.25, None).unwrap();
        let pur = build_gram(&dec, &Pairing::RankOrder, &Ancilla::Identical).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                assert!((pur.gram.0[(a, b)] - C64::new(1.0, 0.0)).norm() < 1e-9);
            }
        }
        for s in &pur.pure_states[1..] {
            assert!(trace_distance(s, &pur.pure_states[0]).unwrap() < 1e-9);
        }
    }

    #[test]
    fn gram_of_ideal_bb84_has_overlap_pattern() {
        let src = CharacterizedSource::ideal_bb84();
        let g = &src.purification.gram;
        let expected = [[1.0, 0.0, FRAC_1_SQRT_2, FRAC_1_SQRT_2], [0.0, 1.0, FRAC_1_SQRT_2, FRAC_1_SQRT_2]];
        for a in 0..2 {
            for b in 0..4 {
                assert!((g.0[(a, b)].norm() - expected[a][b]).abs() < 1e-9, "G[{a}][{b}]");
            }
        }
        assert!(src.purification.realization_error() < 1e-9);
        assert!(src.model.max_dist() < 1e-9);
        assert!((src.model.avg_fidelity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn malformed_pairing_is_rejected() {
        let spec = SourceSpec::bb84_with_noise(0.2);
        let dec = decompose(&spec, 0.25, None).unwrap();
        let mut table = vec![vec![vec![0usize, 1]; 4]; 4];
        for (a, row) in table.iter_mut().enumerate() {
            row[a] = vec![1, 0];
        }
        assert!(matches!(
            build_gram(&dec, &Pairing::Table(table), &Ancilla::Identical),
            Err(SourceError::BadPairing(_))
        ));
        // Ancilla overlaps with modulus > 1 break the diagonal or PSD-ness.
        let bad = vec![vec![vec![C64::new(2.0, 0.0); 2]; 4]; 4];
        assert!(build_gram(&dec, &Pairing::RankOrder, &Ancilla::Overlaps(bad)).is_err());
    }

    #[test]
    fn asymmetry_examples() {
        let src = CharacterizedSource::ideal_bb84();
        let b = asymmetry_bounds(&src.model, 1000);
        assert!(b.nu_l < 1e-9);
        assert!(b.dt_bar < 1e-6);

        let mut model = src.model.clone();
        model.avg_fidelity = 0.999;
        let b = asymmetry_bounds(&model, 1000);
        let oracle = (1.0 - 0.999f64.powi(2000)).sqrt();
        assert!((oracle - 0.9295).abs() < 1e-3);
        assert!((b.dt_bar - oracle).abs() < 1e-12);
    }

    #[test]
    fn user_sigma_must_be_complete() {
        let src = CharacterizedSource::ideal_bb84();
        let bad = [
            qubit_state([0.0, 0.0, 1.0]),
            qubit_state([0.0, 0.0, 1.0]),
            qubit_state([1.0, 0.0, 0.0]),
            qubit_state([-1.0, 0.0, 0.0]),
        ];
        assert!(matches!(
            fit_qubit_model(&src.purification, &QubitStrategy::UserSupplied(bad)),
            Err(SourceError::Incomplete { a: 0, .. })
        ));
    }
}
