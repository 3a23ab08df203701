//! Seeded random instance generation.
//!
//! Every stream is a `Xoshiro256PlusPlus` seeded through `seed_from_u64`
//! (SplitMix64 expansion of the 64-bit seed), so identical seeds reproduce
//! identical matrices on every platform.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::adafactor::DiagWeights;
use crate::generator::{FactorDirection, FactorPair};
use crate::scalar::Scalar;

pub type SeededRng = Xoshiro256PlusPlus;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// Standard-normal entries.
pub fn random_matrix<T: Scalar>(rng: &mut SeededRng, rows: usize, cols: usize) -> DMatrix<T> {
    DMatrix::from_fn(rows, cols, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// `rows x k` matrix with orthonormal columns (thin QR of a Gaussian matrix).
pub fn random_orthonormal<T: Scalar>(rng: &mut SeededRng, rows: usize, k: usize) -> DMatrix<T> {
    let g: DMatrix<T> = random_matrix(rng, rows, k);
    g.qr().q().columns(0, k).into_owned()
}

/// Matrix `U diag(s) V^T` with the given singular values.
pub fn with_singular_values<T: Scalar>(rng: &mut SeededRng, rows: usize, cols: usize, s: &[T]) -> DMatrix<T> {
    let k = s.len();
    let u: DMatrix<T> = random_orthonormal(rng, rows, k);
    let v: DMatrix<T> = random_orthonormal(rng, cols, k);
    let sd = DMatrix::from_diagonal(&DVector::from_column_slice(s));
    u * sd * v.transpose()
}

/// Factors whose singular values are drawn uniformly from `[0.1, 2]`, so the
/// smallest singular value of each factor is at least 0.1.
pub fn random_full_rank_pair<T: Scalar>(rng: &mut SeededRng, m: usize, n: usize, r: usize) -> FactorPair<T> {
    let sb: Vec<T> = (0..r).map(|_| T::lit(rng.random_range(0.1..2.0))).collect();
    let sa: Vec<T> = (0..r).map(|_| T::lit(rng.random_range(0.1..2.0))).collect();
    let b = with_singular_values(rng, m, r, &sb);
    let a = with_singular_values(rng, r, n, &sa);
    FactorPair::new(b, a).expect("consistent shapes")
}

pub fn random_direction<T: Scalar>(rng: &mut SeededRng, fp: &FactorPair<T>) -> FactorDirection<T> {
    FactorDirection::new(
        random_matrix(rng, fp.rows(), fp.rank()),
        random_matrix(rng, fp.rank(), fp.cols()),
    )
}

/// Diagonal weights with `l_half`, `r_half` log-uniform on `[lo, hi]`.
pub fn random_weights<T: Scalar>(rng: &mut SeededRng, m: usize, n: usize, lo: f64, hi: f64, eps: T) -> DiagWeights<T> {
    let (llo, lhi) = (lo.ln(), hi.ln());
    let mut draw = |len: usize| DVector::from_fn(len, |_, _| T::lit(rng.random_range(llo..=lhi).exp()));
    let l = draw(m);
    let r = draw(n);
    DiagWeights::from_half(l, r, eps).expect("positive weights")
}
