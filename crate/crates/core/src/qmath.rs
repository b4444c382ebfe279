//! Dense complex linear algebra and the handful of quantum-information
//! primitives the rest of the crate is built on.
//!
//! Dimensions here are tiny (at most a few dozen), so everything is dense and
//! eigendecomposition-based. Matrix absolute values and square roots always go
//! through [`eig_hermitian`] rather than a general SVD.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

/// Validation tolerance for constructed states, POVMs and projections.
pub const VALIDATION_TOL: f64 = 1e-10;
/// Tolerance for results of compositions (products, factorizations).
pub const COMPOSITION_TOL: f64 = 1e-9;
/// Eigenvalues must exceed this to count as strictly positive in `{X > 0}`.
pub const POSITIVE_THRESHOLD: f64 = 1e-12;
/// Eigenvalues below `-PSD_FACTOR_TOL` make [`psd_factor`] fail.
pub const PSD_FACTOR_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QmathError {
    #[error("matrix is not Hermitian (max |M - M^dag| = {asymmetry:e})")]
    NotHermitian { asymmetry: f64 },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("trace is {trace}, expected 1")]
    NotUnitTrace { trace: f64 },
    #[error("POVM elements sum to identity only within {defect:e}")]
    IncompletePovm { defect: f64 },
    #[error("projection is not idempotent (max |P^2 - P| = {defect:e})")]
    NotIdempotent { defect: f64 },
    #[error("empty operand list")]
    Empty,
    #[error("distribution is not normalized (sum {sum})")]
    NotNormalized { sum: f64 },
    #[error("entry count {entries} does not match shape {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, entries: usize },
}

pub type Result<T> = std::result::Result<T, QmathError>;

/// Dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat(pub DMatrix<C64>);

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        CMat(DMatrix::identity(n, n))
    }

    /// Build from row-major entries.
    pub fn from_row_major(rows: usize, cols: usize, entries: &[C64]) -> Result<Self> {
        if rows * cols != entries.len() {
            return Err(QmathError::BadShape { rows, cols, entries: entries.len() });
        }
        Ok(CMat(DMatrix::from_row_slice(rows, cols, entries)))
    }

    pub fn from_real_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        CMat(DMatrix::from_fn(r, c, |i, j| C64::new(rows[i][j], 0.0)))
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        CMat(DMatrix::from_fn(n, n, |i, j| if i == j { C64::new(values[i], 0.0) } else { C64::new(0.0, 0.0) }))
    }

    /// |v><v|
    pub fn outer(v: &DVector<C64>) -> Self {
        CMat(v * v.adjoint())
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    pub fn entries_row_major(&self) -> Vec<C64> {
        let mut out = Vec::with_capacity(self.rows() * self.cols());
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn adjoint(&self) -> Self {
        CMat(self.0.adjoint())
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn scale(&self, s: f64) -> Self {
        CMat(self.0.map(|z| z * s))
    }

    pub fn add(&self, other: &CMat) -> Self {
        CMat(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &CMat) -> Self {
        CMat(&self.0 - &other.0)
    }

    pub fn mul(&self, other: &CMat) -> Self {
        CMat(&self.0 * &other.0)
    }

    /// Max-norm of the entries.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, z| m.max(z.norm()))
    }

    pub fn max_abs_diff(&self, other: &CMat) -> f64 {
        self.sub(other).max_abs()
    }

    /// max |M - M^dag|; infinite for non-square input.
    pub fn hermitian_defect(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        self.max_abs_diff(&self.adjoint())
    }

    /// Re Tr(self * other), the Hilbert-Schmidt pairing for Hermitian operands.
    pub fn trace_product(&self, other: &CMat) -> f64 {
        let n = self.rows();
        let mut acc = 0.0;
        for i in 0..n {
            for k in 0..self.cols() {
                acc += (self.0[(i, k)] * other.0[(k, i)]).re;
            }
        }
        acc
    }

    pub fn kron(&self, other: &CMat) -> Self {
        CMat(self.0.kronecker(&other.0))
    }

    /// (M + M^dag)/2
    pub fn hermitian_part(&self) -> Self {
        CMat((&self.0 + self.0.adjoint()).map(|z| z * 0.5))
    }

    /// Column `j` as a ket.
    pub fn column(&self, j: usize) -> DVector<C64> {
        self.0.column(j).into_owned()
    }
}

fn ensure_square(m: &CMat) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(QmathError::NotSquare { rows: m.rows(), cols: m.cols() })
    }
}

fn ensure_hermitian(m: &CMat, tol: f64) -> Result<()> {
    ensure_square(m)?;
    let asymmetry = m.hermitian_defect();
    if asymmetry > tol {
        return Err(QmathError::NotHermitian { asymmetry });
    }
    Ok(())
}

/// Eigendecomposition of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, ordered like `values`.
    pub vectors: CMat,
}

impl HermitianEigen {
    /// sum_i f(lambda_i) |v_i><v_i|
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> CMat {
        let n = self.values.len();
        let v = &self.vectors.0;
        let scaled = DMatrix::from_fn(n, n, |i, j| v[(i, j)] * f(self.values[j]));
        CMat(scaled * v.adjoint())
    }

    pub fn reconstruct(&self) -> CMat {
        self.map_spectrum(|x| x)
    }
}

/// Eigenvalues (descending) and orthonormal eigenvectors of a Hermitian matrix.
pub fn eig_hermitian(m: &CMat) -> Result<HermitianEigen> {
    ensure_hermitian(m, COMPOSITION_TOL)?;
    let n = m.rows();
    if n == 0 {
        return Ok(HermitianEigen { values: vec![], vectors: CMat::zeros(0, 0) });
    }
    let sym = m.hermitian_part();
    let eig = nalgebra::SymmetricEigen::new(sym.0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(HermitianEigen { values, vectors: CMat(vectors) })
}

/// Orthogonal projection, validated idempotent and Hermitian.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    mat: CMat,
}

impl Projection {
    pub fn new(mat: CMat) -> Result<Self> {
        ensure_hermitian(&mat, COMPOSITION_TOL)?;
        let defect = mat.mul(&mat).max_abs_diff(&mat);
        if defect > COMPOSITION_TOL {
            return Err(QmathError::NotIdempotent { defect });
        }
        Ok(Projection { mat })
    }

    pub fn mat(&self) -> &CMat {
        &self.mat
    }

    pub fn rank(&self) -> usize {
        self.mat.trace().re.round() as usize
    }

    /// I - P
    pub fn complement(&self) -> Projection {
        Projection { mat: CMat::identity(self.mat.rows()).sub(&self.mat) }
    }
}

/// Spectral projection `{X > 0}` onto eigenvectors with eigenvalue above
/// [`POSITIVE_THRESHOLD`].
pub fn positive_part_projection(x: &CMat) -> Result<Projection> {
    let eig = eig_hermitian(x)?;
    let mat = eig.map_spectrum(|l| if l > POSITIVE_THRESHOLD { 1.0 } else { 0.0 });
    Ok(Projection { mat: mat.hermitian_part() })
}

/// Trace norm Tr|X| of a Hermitian matrix.
pub fn trace_norm(x: &CMat) -> Result<f64> {
    Ok(eig_hermitian(x)?.values.iter().map(|l| l.abs()).sum())
}

/// Principal square root of a PSD matrix (negative eigenvalues clipped).
pub fn psd_sqrt(x: &CMat) -> Result<CMat> {
    let eig = eig_hermitian(x)?;
    let floor = rounding_floor(&eig.values);
    Ok(eig.map_spectrum(|l| if l > floor { l.sqrt() } else { 0.0 }))
}

/// Eigenvalues at or below this are rounding noise; their square roots
/// (~1e-8) would otherwise dominate fidelities of rank-deficient states.
fn rounding_floor(values: &[f64]) -> f64 {
    1e-13 * values.first().copied().unwrap_or(0.0).abs().max(1.0)
}

/// Positive semidefinite, unit-trace density operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOp {
    mat: CMat,
}

impl DensityOp {
    /// Validates Hermiticity, positivity and unit trace at [`VALIDATION_TOL`].
    pub fn new(mat: CMat) -> Result<Self> {
        ensure_hermitian(&mat, VALIDATION_TOL)?;
        let trace = mat.trace().re;
        if (trace - 1.0).abs() > VALIDATION_TOL {
            return Err(QmathError::NotUnitTrace { trace });
        }
        let min = eig_hermitian(&mat)?.values.last().copied().unwrap_or(0.0);
        if min < -VALIDATION_TOL {
            return Err(QmathError::NotPsd { min_eigenvalue: min });
        }
        Ok(DensityOp { mat: mat.hermitian_part() })
    }

    /// Clip negative eigenvalues to zero and renormalize. Fails when the
    /// clipped mass exceeds `tol` or the remaining trace vanishes.
    pub fn from_clipped(mat: CMat, tol: f64) -> Result<Self> {
        ensure_hermitian(&mat, tol.max(COMPOSITION_TOL))?;
        let eig = eig_hermitian(&mat.hermitian_part())?;
        let min = eig.values.last().copied().unwrap_or(0.0);
        if min < -tol {
            return Err(QmathError::NotPsd { min_eigenvalue: min });
        }
        let clipped = eig.map_spectrum(|l| l.max(0.0));
        let trace = clipped.trace().re;
        if trace <= tol || (trace - 1.0).abs() > tol.max(VALIDATION_TOL) * 10.0 + 1e-8 {
            return Err(QmathError::NotUnitTrace { trace });
        }
        Ok(DensityOp { mat: clipped.scale(1.0 / trace).hermitian_part() })
    }

    /// |psi><psi| for a ket normalized on the fly.
    pub fn pure(psi: &DVector<C64>) -> Self {
        let norm = psi.norm();
        let v = psi.map(|z| z / norm);
        DensityOp { mat: CMat::outer(&v).hermitian_part() }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        DensityOp { mat: CMat::identity(dim).scale(1.0 / dim as f64) }
    }

    pub fn mat(&self) -> &CMat {
        &self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    /// Tr(rho E) for an operator E, real part.
    pub fn expectation(&self, e: &CMat) -> f64 {
        self.mat.trace_product(e)
    }

    /// Convex combination `w * self + (1 - w) * other`.
    pub fn mix(&self, other: &DensityOp, w: f64) -> Result<DensityOp> {
        check_dims(self.dim(), other.dim())?;
        Ok(DensityOp { mat: self.mat.scale(w).add(&other.mat.scale(1.0 - w)) })
    }

    /// Tr(rho^2)
    pub fn purity(&self) -> f64 {
        self.mat.trace_product(&self.mat)
    }
}

fn check_dims(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(QmathError::DimMismatch { left, right });
    }
    Ok(())
}

/// d_T(rho, sigma) = Tr|rho - sigma| / 2
pub fn trace_distance(rho: &DensityOp, sigma: &DensityOp) -> Result<f64> {
    check_dims(rho.dim(), sigma.dim())?;
    let d = 0.5 * trace_norm(&rho.mat.sub(&sigma.mat))?;
    Ok(d.clamp(0.0, 1.0))
}

/// F(rho, sigma) = Tr|sqrt(rho) sqrt(sigma)| = Tr sqrt(sqrt(rho) sigma sqrt(rho)).
pub fn fidelity(rho: &DensityOp, sigma: &DensityOp) -> Result<f64> {
    check_dims(rho.dim(), sigma.dim())?;
    let s = psd_sqrt(&rho.mat)?;
    let inner = s.mul(&sigma.mat).mul(&s).hermitian_part();
    let values = eig_hermitian(&inner)?.values;
    let floor = rounding_floor(&values);
    let f: f64 = values.iter().filter(|&&l| l > floor).map(|l| l.sqrt()).sum();
    Ok(f.clamp(0.0, 1.0))
}

/// d_V(p, q) = sum |p - q| / 2 over a common finite outcome set.
pub fn variation_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dims(p.len(), q.len())?;
    for dist in [p, q] {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > COMPOSITION_TOL {
            return Err(QmathError::NotNormalized { sum });
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Kronecker product of a nonempty operator list, left to right.
pub fn tensor_product(ops: &[CMat]) -> Result<CMat> {
    let (first, rest) = ops.split_first().ok_or(QmathError::Empty)?;
    Ok(rest.iter().fold(first.clone(), |acc, op| acc.kron(op)))
}

/// Tr_B of an operator on A (x) B with the given subsystem dimensions.
pub fn partial_trace_second(m: &CMat, dim_a: usize, dim_b: usize) -> Result<CMat> {
    check_dims(m.rows(), dim_a * dim_b)?;
    let mut out = CMat::zeros(dim_a, dim_a);
    for i in 0..dim_a {
        for j in 0..dim_a {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..dim_b {
                acc += m.0[(i * dim_b + k, j * dim_b + k)];
            }
            out.0[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// Square factor C with C^dag C = G for a PSD matrix G.
///
/// Eigenvalues down to `-PSD_FACTOR_TOL` (and positive ones at rounding
/// level) are clipped to zero. The factor is
/// `diag(sqrt(lambda)) V^dag`, so its rows are ordered by descending
/// eigenvalue and trailing rows vanish for rank-deficient input.
pub fn psd_factor(g: &CMat) -> Result<CMat> {
    let eig = eig_hermitian(g)?;
    let min = eig.values.last().copied().unwrap_or(0.0);
    if min < -PSD_FACTOR_TOL {
        return Err(QmathError::NotPsd { min_eigenvalue: min });
    }
    let n = g.rows();
    let vh = eig.vectors.0.adjoint();
    // Rounding-level eigenvalues would otherwise leave ~1e-8 rows after sqrt.
    let floor = 1e-13 * eig.values.first().copied().unwrap_or(0.0).abs().max(1.0);
    let root = |l: f64| if l > floor { l.sqrt() } else { 0.0 };
    Ok(CMat(DMatrix::from_fn(n, n, |i, j| vh[(i, j)] * root(eig.values[i]))))
}

/// Positive operator-valued measure with labelled outcomes.
#[derive(Debug, Clone)]
pub struct Povm<L> {
    elements: Vec<CMat>,
    labels: Vec<L>,
}

impl<L: Clone> Povm<L> {
    pub fn new(elements: Vec<CMat>, labels: Vec<L>) -> Result<Self> {
        let first = elements.first().ok_or(QmathError::Empty)?;
        let dim = first.rows();
        check_dims(elements.len(), labels.len())?;
        let mut sum = CMat::zeros(dim, dim);
        for e in &elements {
            ensure_hermitian(e, VALIDATION_TOL)?;
            check_dims(e.rows(), dim)?;
            let min = eig_hermitian(e)?.values.last().copied().unwrap_or(0.0);
            if min < -VALIDATION_TOL {
                return Err(QmathError::NotPsd { min_eigenvalue: min });
            }
            sum = sum.add(e);
        }
        let defect = sum.max_abs_diff(&CMat::identity(dim));
        if defect > VALIDATION_TOL {
            return Err(QmathError::IncompletePovm { defect });
        }
        Ok(Povm { elements, labels })
    }

    pub fn dim(&self) -> usize {
        self.elements[0].rows()
    }

    pub fn elements(&self) -> &[CMat] {
        &self.elements
    }

    pub fn labels(&self) -> &[L] {
        &self.labels
    }

    /// Born probabilities Tr(rho E_i).
    pub fn probabilities(&self, rho: &DensityOp) -> Vec<f64> {
        self.elements.iter().map(|e| rho.expectation(e)).collect()
    }
}

/// Random states for oracles and property tests.
pub mod random {
    use super::{CMat, DensityOp, C64};
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        // Box-Muller
        let u: f64 = 1.0 - rng.gen::<f64>();
        let v: f64 = rng.gen();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }

    fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
        C64::new(gaussian(rng), gaussian(rng))
    }

    /// Haar-random unit vector.
    pub fn ket<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<C64> {
        let v = DVector::from_fn(dim, |_, _| complex_gaussian(rng));
        let norm = v.norm();
        v / C64::new(norm, 0.0)
    }

    /// `G G^dag / Tr(G G^dag)` for a `dim x rank` complex Ginibre matrix `G`.
    pub fn density<R: Rng + ?Sized>(rng: &mut R, dim: usize, rank: usize) -> DensityOp {
        let g = DMatrix::from_fn(dim, rank.max(1), |_, _| complex_gaussian(rng));
        let m = &g * g.adjoint();
        let tr = m.trace().re;
        DensityOp::from_clipped(CMat(m / C64::new(tr, 0.0)), 1e-9).expect("Ginibre state is valid")
    }

    /// Pure or full-rank mixed state with equal odds.
    pub fn mixed_or_pure<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DensityOp {
        if rng.gen_bool(0.5) {
            DensityOp::pure(&ket(rng, dim))
        } else {
            density(rng, dim, dim)
        }
    }
}

/// Standard qubit kets.
pub mod kets {
    use super::C64;
    use nalgebra::DVector;

    pub fn basis(dim: usize, k: usize) -> DVector<C64> {
        let mut v = DVector::zeros(dim);
        v[k] = C64::new(1.0, 0.0);
        v
    }

    /// cos(theta/2)|0> + e^{i phi} sin(theta/2)|1>
    pub fn bloch(theta: f64, phi: f64) -> DVector<C64> {
        DVector::from_vec(vec![C64::new((theta / 2.0).cos(), 0.0), C64::from_polar((theta / 2.0).sin(), phi)])
    }

    pub fn plus() -> DVector<C64> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        DVector::from_vec(vec![C64::new(s, 0.0), C64::new(s, 0.0)])
    }

    pub fn minus() -> DVector<C64> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        DVector::from_vec(vec![C64::new(s, 0.0), C64::new(-s, 0.0)])
    }
}

/// Qubit density operator from a Bloch vector with |r| <= 1.
pub fn qubit_from_bloch(r: [f64; 3]) -> DensityOp {
    let m = CMat::from_row_major(
        2,
        2,
        &[
            C64::new(0.5 * (1.0 + r[2]), 0.0),
            C64::new(0.5 * r[0], -0.5 * r[1]),
            C64::new(0.5 * r[0], 0.5 * r[1]),
            C64::new(0.5 * (1.0 - r[2]), 0.0),
        ],
    )
    .expect("2x2 shape");
    DensityOp { mat: m }
}

/// Bloch vector of a qubit operator (not necessarily normalized).
pub fn bloch_vector(m: &CMat) -> [f64; 3] {
    let off = m.0[(1, 0)];
    [2.0 * off.re, 2.0 * off.im, (m.0[(0, 0)] - m.0[(1, 1)]).re]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = eig_hermitian(&CMat::identity(2)).unwrap();
        assert_eq!(e.values.len(), 2);
        assert!(e.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let e = eig_hermitian(&CMat::diag(&[-1.0, 3.0])).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        assert!((e.values[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_pauli_x_matches_characteristic_polynomial() {
        // det(X - l I) = l^2 - 1 -> l = +-1, eigenvectors |+>, |->
        let x = CMat::from_real_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let e = eig_hermitian(&x).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-12);
        assert!((e.values[1] + 1.0).abs() < 1e-12);
        let v0 = e.vectors.column(0);
        let overlap = (v0.adjoint() * kets::plus())[(0, 0)].norm();
        assert!((overlap - 1.0).abs() < 1e-12);
        assert!(e.reconstruct().max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn eig_rejects_non_hermitian() {
        let m = CMat::from_real_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        match eig_hermitian(&m) {
            Err(QmathError::NotHermitian { asymmetry }) => assert!((asymmetry - 1.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn positive_part_examples() {
        let p = positive_part_projection(&CMat::diag(&[1.0, -1.0])).unwrap();
        assert!(p.mat().max_abs_diff(&CMat::diag(&[1.0, 0.0])) < 1e-12);
        let p = positive_part_projection(&CMat::zeros(3, 3)).unwrap();
        assert!(p.mat().max_abs() < 1e-12);

        let x = CMat::outer(&kets::plus()).sub(&CMat::outer(&kets::basis(2, 0)));
        let p = positive_part_projection(&x).unwrap();
        assert_eq!(p.rank(), 1);
        let e = eig_hermitian(&x).unwrap();
        let expected = CMat::outer(&e.vectors.column(0));
        assert!(p.mat().max_abs_diff(&expected) < 1e-9);
        let positive_sum: f64 = e.values.iter().filter(|&&v| v > 0.0).sum();
        assert!((x.trace_product(p.mat()) - positive_sum).abs() < 1e-9);
    }

    #[test]
    fn distances_on_qubit_examples() {
        let zero = DensityOp::pure(&kets::basis(2, 0));
        let one = DensityOp::pure(&kets::basis(2, 1));
        let plus = DensityOp::pure(&kets::plus());
        assert!(trace_distance(&zero, &zero).unwrap() < 1e-12);
        assert!((trace_distance(&zero, &one).unwrap() - 1.0).abs() < 1e-12);
        assert!((trace_distance(&zero, &plus).unwrap() - FRAC_1_SQRT_2).abs() < 1e-9);
        assert!((fidelity(&zero, &zero).unwrap() - 1.0).abs() < 1e-9);
        assert!(fidelity(&zero, &one).unwrap() < 1e-9);
        assert!((fidelity(&zero, &plus).unwrap() - FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn distance_dim_mismatch() {
        let a = DensityOp::maximally_mixed(2);
        let b = DensityOp::maximally_mixed(3);
        assert!(matches!(trace_distance(&a, &b), Err(QmathError::DimMismatch { .. })));
        assert!(matches!(fidelity(&a, &b), Err(QmathError::DimMismatch { .. })));
    }

    #[test]
    fn variation_distance_examples() {
        assert_eq!(variation_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert!((variation_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((variation_distance(&[0.5, 0.5], &[0.75, 0.25]).unwrap() - 0.25).abs() < 1e-15);
        assert!(variation_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn tensor_product_examples() {
        let i2 = CMat::identity(2);
        assert_eq!(tensor_product(std::slice::from_ref(&i2)).unwrap(), i2);
        assert!(tensor_product(&[i2.clone(), i2.clone()]).unwrap().max_abs_diff(&CMat::identity(4)) < 1e-15);
        let t = tensor_product(&[CMat::diag(&[1.0, 0.0]), CMat::diag(&[0.0, 1.0])]).unwrap();
        assert!(t.max_abs_diff(&CMat::diag(&[0.0, 1.0, 0.0, 0.0])) < 1e-15);
        assert!(matches!(tensor_product(&[]), Err(QmathError::Empty)));
    }

    #[test]
    fn psd_factor_examples() {
        for g in [CMat::identity(3), CMat::diag(&[4.0, 1.0])] {
            let f = psd_factor(&g).unwrap();
            assert!(f.adjoint().mul(&f).max_abs_diff(&g) < 1e-9);
        }
        // Ideal BB84 Gram matrix: |0>,|1>,|+>,|->.
        let s = FRAC_1_SQRT_2;
        let g = CMat::from_real_rows(&[&[1.0, 0.0, s, s], &[0.0, 1.0, s, -s], &[s, s, 1.0, 0.0], &[s, -s, 0.0, 1.0]]);
        let f = psd_factor(&g).unwrap();
        assert!(f.adjoint().mul(&f).max_abs_diff(&g) < 1e-9);
        assert!(matches!(psd_factor(&CMat::diag(&[1.0, -0.1])), Err(QmathError::NotPsd { .. })));
    }

    #[test]
    fn density_validation() {
        assert!(DensityOp::new(CMat::diag(&[0.5, 0.5])).is_ok());
        assert!(matches!(DensityOp::new(CMat::diag(&[0.5, 0.6])), Err(QmathError::NotUnitTrace { .. })));
        assert!(matches!(DensityOp::new(CMat::diag(&[1.5, -0.5])), Err(QmathError::NotPsd { .. })));
        let clipped = DensityOp::from_clipped(CMat::diag(&[1.0 + 1e-11, -1e-11]), 1e-10).unwrap();
        assert!((clipped.mat().trace().re - 1.0).abs() < 1e-14);
    }

    #[test]
    fn povm_validation() {
        let z0 = CMat::outer(&kets::basis(2, 0));
        let z1 = CMat::outer(&kets::basis(2, 1));
        let povm = Povm::new(vec![z0.clone(), z1], vec![0u8, 1]).unwrap();
        let probs = povm.probabilities(&DensityOp::pure(&kets::plus()));
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!(matches!(Povm::new(vec![z0], vec![0u8]), Err(QmathError::IncompletePovm { .. })));
    }

    #[test]
    fn row_major_roundtrip() {
        let entries = vec![c(1.0), c(2.0), c(3.0), c(4.0), c(5.0), c(6.0)];
        let m = CMat::from_row_major(2, 3, &entries).unwrap();
        assert_eq!(m.entries_row_major(), entries);
        assert_eq!(m.adjoint().adjoint(), m);
        assert!(CMat::from_row_major(2, 2, &entries).is_err());
    }
}
