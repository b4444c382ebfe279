//! Certified secret-key length for BB84 with an imperfect but characterized
//! source, plus a desk-scale protocol simulator used to sanity-check the bound.
//!
//! Module map:
//!
//! * [`qmath`]: dense complex matrices, Hermitian eigensolver, distances.
//! * [`source`]: source decomposition, Gram-matrix purification, qubit model.
//! * [`bounds`]: tail bounds, discrimination certificates, key length.
//! * [`protocol`]: seeded BB84 simulator with configurable eavesdroppers.
//! * [`extract`]: reconciliation, Toeplitz hashing, leftover-hash oracle.

pub mod bounds;
pub mod extract;
pub mod protocol;
pub mod qmath;
pub mod seed;
pub mod source;

/// Basis index. `0` and `1` name the two conjugate bases.
pub type Basis = usize;

/// Index of the pair (a, x) in the fixed order (0,0), (0,1), (1,0), (1,1).
#[inline]
pub fn ax_index(a: Basis, x: usize) -> usize {
    2 * a + x
}
