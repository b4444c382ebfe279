//! Upper bound on the success probability of guessing `x` from a tagged
//! state, for measurements whose conclusive outcome has probability at
//! least `t`.
//!
//! With priors absorbed into `A_x = p_x rho_x` and `rho = A_0 + A_1`, the
//! quantity is `sup { Tr(A_0 E_0 + A_1 E_1) / Tr(rho (E_0 + E_1)) }` over
//! three-outcome POVMs with `Tr(rho (E_0 + E_1)) >= t`. Weak duality gives
//!
//! ```text
//! s(t) <= min_lambda  lambda + h(lambda) / t,
//! h(lambda) = max_E  sum_x Tr((A_x - lambda rho) E_x),
//! ```
//!
//! and every `h(lambda)` is bounded above by an explicit dual-feasible `Y`,
//! so the returned value is an upper bound regardless of how well the inner
//! iteration converged. Commuting inputs reduce to a linear program solved
//! exactly by a greedy fill.

use crate::qmath::{eig_hermitian, CMat, DensityOp};

use super::Result;

/// Relative eigenvalue floor deciding the support of `rho`.
const SUPPORT_TOL: f64 = 1e-12;
/// Largest accepted gap between the certified upper bound and the best
/// feasible measurement found.
pub const CERTIFICATE_GAP_TOL: f64 = 1e-4;
const INNER_MAX_ITERS: usize = 3000;
const INNER_GAP_TOL: f64 = 1e-9;
const GOLDEN_STEPS: usize = 48;

/// Result of one constrained-discrimination bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessBound {
    /// Value to use downstream: the certified upper bound, or 1 when the
    /// certificate is too loose.
    pub value: f64,
    /// Certified upper bound.
    pub upper: f64,
    /// Success ratio of the best explicit feasible measurement.
    pub primal: f64,
    pub certified: bool,
}

impl SuccessBound {
    fn exact(v: f64) -> Self {
        let v = v.clamp(0.0, 1.0);
        SuccessBound { value: v, upper: v, primal: v, certified: true }
    }

    pub fn gap(&self) -> f64 {
        self.upper - self.primal
    }
}

/// Weighted pair `A_x = p_x rho_x` restricted to the support of `A_0 + A_1`.
#[derive(Debug, Clone)]
pub struct WeightedPair {
    a: [CMat; 2],
    rho: CMat,
}

impl WeightedPair {
    pub fn new(states: [&DensityOp; 2], priors: [f64; 2]) -> Result<Self> {
        let a = [states[0].mat().scale(priors[0]), states[1].mat().scale(priors[1])];
        let rho = a[0].add(&a[1]);
        let eig = eig_hermitian(&rho)?;
        let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
        let keep: Vec<usize> =
            (0..eig.values.len()).filter(|&i| eig.values[i] > SUPPORT_TOL * top.max(1e-300)).collect();
        let d = rho.rows();
        let v = CMat(nalgebra::DMatrix::from_fn(d, keep.len(), |r, c| eig.vectors.0[(r, keep[c])]));
        let restrict = |m: &CMat| v.adjoint().mul(m).mul(&v).hermitian_part();
        let a = [restrict(&a[0]), restrict(&a[1])];
        let rho = a[0].add(&a[1]);
        Ok(WeightedPair { a, rho })
    }

    pub fn dim(&self) -> usize {
        self.rho.rows()
    }

    fn is_commuting(&self) -> bool {
        let (x, y) = (&self.a[0], &self.a[1]);
        let scale = x.max_abs().max(y.max_abs()).max(1e-300);
        x.mul(y).sub(&y.mul(x)).max_abs() <= 1e-12 * scale * scale
    }

    /// Largest ratio `<v|A_x|v> / <v|rho|v>`, the value of the bound as `t -> 0`.
    fn zero_rate_limit(&self) -> Result<f64> {
        let inv_sqrt = eig_hermitian(&self.rho)?.map_spectrum(|l| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 });
        let mut best: f64 = 0.0;
        for a in &self.a {
            let m = inv_sqrt.mul(a).mul(&inv_sqrt).hermitian_part();
            best = best.max(eig_hermitian(&m)?.values[0]);
        }
        Ok(best.min(1.0))
    }

    /// Exact solution when `A_0` and `A_1` commute, or `None` when a joint
    /// eigenbasis cannot be confirmed numerically.
    fn commuting_solution(&self, t: f64) -> Result<Option<f64>> {
        // A generic real combination separates joint eigenspaces.
        let probe = self.a[0].add(&self.a[1].scale(0.618_033_988_749_894_8));
        let v = eig_hermitian(&probe)?.vectors;
        let d = [0, 1].map(|x| v.adjoint().mul(&self.a[x]).mul(&v));
        let n = self.dim();
        let scale = self.rho.max_abs().max(1e-300);
        for m in &d {
            for i in 0..n {
                for j in 0..n {
                    if i != j && m.0[(i, j)].norm() > 1e-9 * scale {
                        return Ok(None);
                    }
                }
            }
        }
        let mut items: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let (p, q) = (d[0].0[(i, i)].re.max(0.0), d[1].0[(i, i)].re.max(0.0));
                (p.max(q), p + q)
            })
            .filter(|&(_, mass)| mass > 0.0)
            .collect();
        items.sort_by(|l, r| (r.0 / r.1).total_cmp(&(l.0 / l.1)));
        if t <= 0.0 {
            return Ok(Some(items.first().map_or(1.0, |&(g, m)| g / m)));
        }
        let (mut left, mut gain) = (t, 0.0);
        for (g, m) in items {
            let take = m.min(left);
            gain += g * take / m;
            left -= take;
            if left <= 0.0 {
                break;
            }
        }
        Ok(Some(gain / (t - left.max(0.0)).max(1e-300)))
    }
}

/// Certified sup of the conclusive success ratio given conclusive
/// probability at least `t`.
pub fn constrained_success(pair: &WeightedPair, t: f64) -> Result<SuccessBound> {
    if pair.dim() == 0 {
        return Ok(SuccessBound::exact(1.0));
    }
    if pair.is_commuting() {
        if let Some(v) = pair.commuting_solution(t)? {
            return Ok(SuccessBound::exact(v));
        }
    }
    if t <= 0.0 {
        return Ok(SuccessBound::exact(pair.zero_rate_limit()?));
    }
    let t = t.min(1.0);
    let mut solver = Lagrangian::new(pair);
    let mut upper = f64::INFINITY;
    let eval = |lambda: f64, upper: &mut f64, solver: &mut Lagrangian| -> Result<f64> {
        let phi = lambda + solver.bound(lambda)? / t;
        *upper = upper.min(phi);
        Ok(phi)
    };
    eval(0.0, &mut upper, &mut solver)?;
    eval(1.0, &mut upper, &mut solver)?;
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = eval(x1, &mut upper, &mut solver)?;
    let mut f2 = eval(x2, &mut upper, &mut solver)?;
    for _ in 0..GOLDEN_STEPS {
        if upper - solver.best_feasible_ratio(t) <= INNER_GAP_TOL {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = eval(x1, &mut upper, &mut solver)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = eval(x2, &mut upper, &mut solver)?;
        }
    }
    let upper = upper.min(1.0);
    let primal = solver.best_feasible_ratio(t).min(upper);
    let certified = upper - primal <= CERTIFICATE_GAP_TOL;
    Ok(SuccessBound { value: if certified { upper } else { 1.0 }, upper, primal, certified })
}

/// Inner maximisation `h(lambda)` with dual certificates, remembering every
/// measurement visited as a feasible point `(conclusive, success)`.
struct Lagrangian<'a> {
    pair: &'a WeightedPair,
    points: Vec<(f64, f64)>,
    /// Last iterate, reused as the next starting point.
    warm: Option<[CMat; 3]>,
}

impl<'a> Lagrangian<'a> {
    fn new(pair: &'a WeightedPair) -> Self {
        let mut points = vec![(0.0, 0.0)];
        // Always-conclusive Helstrom measurement.
        let diff = pair.a[0].sub(&pair.a[1]);
        if let Ok(eig) = eig_hermitian(&diff) {
            let p0 = eig.map_spectrum(|l| if l > 0.0 { 1.0 } else { 0.0 });
            let p1 = CMat::identity(pair.dim()).sub(&p0);
            points.push((pair.rho.trace().re, pair.a[0].trace_product(&p0) + pair.a[1].trace_product(&p1)));
        }
        Lagrangian { pair, points, warm: None }
    }

    /// Certified upper bound on `h(lambda)`.
    fn bound(&mut self, lambda: f64) -> Result<f64> {
        let n = self.pair.dim();
        let id = CMat::identity(n);
        let b = [self.pair.a[0].sub(&self.pair.rho.scale(lambda)), self.pair.a[1].sub(&self.pair.rho.scale(lambda))];
        let min_eig = b
            .iter()
            .map(|m| eig_hermitian(m).map(|e| *e.values.last().unwrap()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let kappa = (-min_eig[0]).max(-min_eig[1]).max(0.0) + 1e-3;
        let shifted = [b[0].add(&id.scale(kappa)), b[1].add(&id.scale(kappa)), id.scale(kappa)];
        // Mix the warm start with the uniform POVM so no element is singular.
        let uniform = id.scale(1.0 / 3.0);
        let mut e = match &self.warm {
            Some(w) => [0, 1, 2].map(|x| w[x].scale(0.9).add(&uniform.scale(0.1))),
            None => [uniform.clone(), uniform.clone(), uniform.clone()],
        };
        let mut best_upper = f64::INFINITY;
        for iter in 0..INNER_MAX_ITERS {
            let terms: Vec<CMat> = (0..3).map(|x| shifted[x].mul(&e[x]).mul(&shifted[x])).collect();
            let g = terms[0].add(&terms[1]).add(&terms[2]).hermitian_part();
            let g_inv_sqrt = eig_hermitian(&g)?.map_spectrum(|l| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 });
            for x in 0..3 {
                e[x] = g_inv_sqrt.mul(&terms[x]).mul(&g_inv_sqrt).hermitian_part();
            }
            if iter % 10 == 9 || iter + 1 == INNER_MAX_ITERS {
                let (upper, primal) = certificate(&shifted, &e)?;
                best_upper = best_upper.min(upper);
                if best_upper - primal <= INNER_GAP_TOL * (1.0 + best_upper.abs()) {
                    break;
                }
            }
        }
        let conclusive = self.pair.rho.trace_product(&e[0].add(&e[1]));
        self.warm = Some(e.clone());
        let success = self.pair.a[0].trace_product(&e[0]) + self.pair.a[1].trace_product(&e[1]);
        self.points.push((conclusive, success));
        Ok(best_upper - kappa * n as f64)
    }

    /// Best success ratio reachable with conclusive probability at least `t`,
    /// mixing pairs of visited measurements (and the trivial one).
    fn best_feasible_ratio(&self, t: f64) -> f64 {
        let mut best: f64 = 0.0;
        for &(ti, fi) in &self.points {
            if ti >= t && ti > 0.0 {
                best = best.max(fi / ti);
            }
            for &(tj, fj) in &self.points {
                if ti < t && tj > t {
                    let theta = (tj - t) / (tj - ti);
                    best = best.max((theta * fi + (1.0 - theta) * fj) / t);
                }
            }
        }
        best
    }
}

/// For POVM `e` and PSD weights `b`: an upper bound `Tr Y` with `Y >= b_x`
/// for all `x`, and the primal value `sum_x Tr(b_x e_x)`.
fn certificate(b: &[CMat; 3], e: &[CMat; 3]) -> Result<(f64, f64)> {
    let n = b[0].rows();
    let mut y = CMat::zeros(n, n);
    for x in 0..3 {
        y = y.add(&b[x].mul(&e[x]));
    }
    let y = y.hermitian_part();
    let mut violation: f64 = 0.0;
    for bx in b {
        violation = violation.max(eig_hermitian(&bx.sub(&y))?.values[0]);
    }
    let upper = y.trace().re + violation.max(0.0) * n as f64;
    let primal = (0..3).map(|x| b[x].trace_product(&e[x])).sum();
    Ok((upper, primal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmath::{kets, qubit_from_bloch};

    fn pair(r0: [f64; 3], r1: [f64; 3], p: [f64; 2]) -> WeightedPair {
        WeightedPair::new([&qubit_from_bloch(r0), &qubit_from_bloch(r1)], p).unwrap()
    }

    #[test]
    fn orthogonal_states_are_perfectly_distinguishable() {
        let p = pair([0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [0.5, 0.5]);
        for t in [0.0, 0.3, 1.0] {
            assert!((constrained_success(&p, t).unwrap().value - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_states_give_prior() {
        let p = pair([0.3, 0.0, 0.4], [0.3, 0.0, 0.4], [0.7, 0.3]);
        for t in [0.0, 0.5, 1.0] {
            assert!((constrained_success(&p, t).unwrap().value - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn full_conclusive_rate_matches_helstrom() {
        // |0> and |+>: overlap 1/sqrt 2, Helstrom 1/2 (1 + 1/sqrt 2).
        let p = WeightedPair::new([&DensityOp::pure(&kets::basis(2, 0)), &DensityOp::pure(&kets::plus())], [0.5, 0.5])
            .unwrap();
        let s = constrained_success(&p, 1.0).unwrap();
        let helstrom = 0.5 * (1.0 + 0.5f64.sqrt());
        assert!(s.certified, "{s:?}");
        assert!((s.value - helstrom).abs() < 1e-6, "{s:?}");
    }

    #[test]
    fn unambiguous_limit_for_pure_states() {
        // Non-orthogonal pure states can be discriminated without error at
        // conclusive rate 1 - |<0|+>| (equal priors).
        let p = WeightedPair::new([&DensityOp::pure(&kets::basis(2, 0)), &DensityOp::pure(&kets::plus())], [0.5, 0.5])
            .unwrap();
        let s0 = constrained_success(&p, 0.0).unwrap();
        assert!((s0.value - 1.0).abs() < 1e-9);
        let usd_rate = 1.0 - 0.5f64.sqrt();
        let s = constrained_success(&p, usd_rate * 0.999).unwrap();
        assert!(s.value > 1.0 - 1e-3, "{s:?}");
        let s = constrained_success(&p, 0.6).unwrap();
        assert!(s.certified && s.value < 1.0 - 1e-3, "{s:?}");
    }
}
