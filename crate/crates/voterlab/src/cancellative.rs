//! Exact certification that a nonlinear voter model is cancellative.
//!
//! A nonlinear voter model is determined by its rate vector `a_1..a_n`,
//! where `a_j` is the flip rate when `j` of the `n` neighbours disagree.
//! It admits a cancellative dual representation exactly when the linear
//! system `a = αᵀM` has a componentwise nonnegative solution α, where `M`
//! is the integer parity-count matrix
//!
//! `M(k,j) = Σ_{odd i ≤ min(j,k)} C(j,i)·C(n−j, k−i)`.
//!
//! Everything structural here is exact: `M` is built over big integers,
//! inverted fraction-free, and the certificate (k₀, β₀) reproduces the rate
//! vector on every local window by integer counting.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, ToPrimitive, Zero};
use thiserror::Error;

pub mod golden;

#[derive(Debug, Error, PartialEq)]
pub enum CancellativeError {
    #[error("matrix is singular")]
    Singular,
    #[error("alpha has a negative component at index {0} (value {1})")]
    NegativeAlpha(usize, f64),
    #[error("window evaluation disagrees with αᵀM at j = {0}")]
    RoundTripMismatch(usize),
    #[error("no q near 1 makes all α nonnegative")]
    NoValidQ,
    #[error("window group for j = {0} is not constant")]
    InconsistentWindows(usize),
}

/// Binomial coefficient as an exact integer.
fn binom(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let mut r = BigInt::one();
    for i in 0..k.min(n - k) {
        r = r * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    r
}

/// The duality parity-count matrix `M` for ring size `n`, 1-indexed through
/// `entry(k, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualMatrix {
    n: usize,
    entries: Vec<Vec<BigInt>>,
}

impl DualMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry(&self, k: usize, j: usize) -> &BigInt {
        &self.entries[k - 1][j - 1]
    }

    pub fn entry_i64(&self, k: usize, j: usize) -> i64 {
        self.entry(k, j).to_i64().expect("M entries fit in i64 for n ≤ 16")
    }
}

/// Builds `M(k,j)` from its defining odd-index sum.
pub fn build_m(n: usize) -> DualMatrix {
    assert!((2..=16).contains(&n));
    let mut entries = vec![vec![BigInt::zero(); n]; n];
    for k in 1..=n {
        for j in 1..=n {
            let mut s = BigInt::zero();
            let mut i = 1;
            while i <= j.min(k) {
                s += binom(j, i) * binom(n - j, k - i);
                i += 2;
            }
            entries[k - 1][j - 1] = s;
        }
    }
    DualMatrix { n, entries }
}

/// An exact rational matrix (used for `M⁻¹`).
#[derive(Debug, Clone, PartialEq)]
pub struct RationalMatrix {
    n: usize,
    entries: Vec<Vec<BigRational>>,
}

impl RationalMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    /// 1-indexed entry.
    pub fn entry(&self, i: usize, j: usize) -> &BigRational {
        &self.entries[i - 1][j - 1]
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|row| row.iter().map(|e| e.to_f64().unwrap()).collect())
            .collect()
    }
}

/// Inverts `M` by one-step fraction-free (Bareiss) Gauss-Jordan elimination
/// over the integers; the result is exact. The product `M·M⁻¹` is verified
/// before returning.
pub fn invert_m(m: &DualMatrix) -> Result<RationalMatrix, CancellativeError> {
    let n = m.n;
    let w = 2 * n;
    let mut a = vec![vec![BigInt::zero(); w]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = m.entries[i][j].clone();
        }
        a[i][n + i] = BigInt::one();
    }
    let mut prev = BigInt::one();
    for k in 0..n {
        if a[k][k].is_zero() {
            let swap = (k + 1..n).find(|&r| !a[r][k].is_zero());
            match swap {
                Some(r) => a.swap(k, r),
                None => return Err(CancellativeError::Singular),
            }
        }
        for i in 0..n {
            if i == k {
                continue;
            }
            for j in 0..w {
                if j == k {
                    continue;
                }
                let t = &a[k][k] * &a[i][j] - &a[i][k] * &a[k][j];
                a[i][j] = t / &prev;
            }
            a[i][k] = BigInt::zero();
        }
        prev = a[k][k].clone();
    }
    let mut entries = vec![vec![BigRational::zero(); n]; n];
    for i in 0..n {
        let d = a[i][i].clone();
        if d.is_zero() {
            return Err(CancellativeError::Singular);
        }
        for j in 0..n {
            entries[i][j] = BigRational::new(a[i][n + j].clone(), d.clone());
        }
    }
    let inv = RationalMatrix { n, entries };
    // Fraction-free elimination with pivoting is subtle enough to deserve an
    // unconditional exact self-check.
    for i in 1..=n {
        for j in 1..=n {
            let mut s = BigRational::zero();
            for k in 1..=n {
                s += BigRational::from(m.entry(i, k).clone()) * inv.entry(k, j);
            }
            let want = if i == j { BigRational::one() } else { BigRational::zero() };
            if s != want {
                return Err(CancellativeError::Singular);
            }
        }
    }
    Ok(inv)
}

/// The linear forms `α_k(a) = Σ_j a_j · M⁻¹(j,k)` for ring size `n`, with an
/// exact rational coefficient matrix and a cached float evaluator.
pub struct AlphaForms {
    n: usize,
    minv: RationalMatrix,
    coeffs: Vec<Vec<f64>>,
}

impl AlphaForms {
    pub fn new(n: usize) -> AlphaForms {
        let minv = invert_m(&build_m(n)).expect("M is invertible for 2 ≤ n ≤ 16");
        let coeffs = minv.to_f64();
        AlphaForms { n, minv, coeffs }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn minv(&self) -> &RationalMatrix {
        &self.minv
    }

    /// Evaluates α at a concrete rate vector `a` (length n, `a[j-1] = a_j`).
    pub fn eval(&self, a: &[f64]) -> Vec<f64> {
        assert_eq!(a.len(), self.n);
        (0..self.n)
            .map(|k| (0..self.n).map(|j| a[j] * self.coeffs[j][k]).sum())
            .collect()
    }

    /// α for the q-voter rate vector `a_j = (j/n)^q`.
    pub fn eval_qvoter(&self, q: f64) -> Vec<f64> {
        self.eval(&qvoter_rates(self.n, q))
    }
}

/// q-voter rates by disagreement count, `a_j = (j/n)^q` for `j = 1..n`.
pub fn qvoter_rates(n: usize, q: f64) -> Vec<f64> {
    (1..=n).map(|j| (j as f64 / n as f64).powf(q)).collect()
}

/// α at an explicit rate vector.
pub fn alpha_at(n: usize, a: &[f64]) -> Vec<f64> {
    AlphaForms::new(n).eval(a)
}

/// Derivatives `α_ℓ'(q)` at `q = 1` by central differencing of the exact
/// linear forms (step 1e-6). For n = 8 the golden closed forms live in
/// [`golden`].
pub fn alpha_prime_at_1(n: usize) -> Vec<f64> {
    let forms = AlphaForms::new(n);
    let h = 1e-6;
    let up = forms.eval_qvoter(1.0 + h);
    let dn = forms.eval_qvoter(1.0 - h);
    up.iter().zip(&dn).map(|(u, d)| (u - d) / (2.0 * h)).collect()
}

/// Smallest `q*` (to 1e-9) such that every `α_ℓ(q)` is nonnegative on
/// `[q*, 1]`; 0 when all of `[0,1]` passes.
pub fn find_qc(n: usize) -> Result<f64, CancellativeError> {
    let forms = AlphaForms::new(n);
    let min_alpha = |q: f64| -> f64 {
        forms
            .eval_qvoter(q)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    };
    let grid = 10_000usize;
    let mut last_negative: Option<f64> = None;
    for i in 0..=grid {
        let q = i as f64 / grid as f64;
        if min_alpha(q) < 0.0 {
            last_negative = Some(q);
        }
    }
    let Some(qn) = last_negative else { return Ok(0.0) };
    if qn >= 1.0 - 1.0 / grid as f64 {
        return Err(CancellativeError::NoValidQ);
    }
    let (mut lo, mut hi) = (qn, qn + 1.0 / grid as f64);
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if min_alpha(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// A cancellative dual representation `(k₀, β₀)` over subsets of
/// `N̄ = N ∪ {0}`.
///
/// Subsets are bitmasks: bits `0..n` are the ring sites in canonical order,
/// bit `n` is the origin. `β₀` is supported on odd-size sets other than
/// `{0}`; its unnormalized weight is `α_|A|` for sets avoiding the origin
/// and `α_{|A|−1}` for sets containing it, and `k₀` is the total weight
/// (equivalently `Σ_ℓ α_ℓ·C(n,ℓ)`), which makes `β₀` a probability vector.
#[derive(Debug, Clone)]
pub struct CancellativeRep {
    n: usize,
    k0: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
}

impl CancellativeRep {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// `β₀(A)` for a subset mask over N̄.
    pub fn beta(&self, mask: u32) -> f64 {
        self.beta[mask as usize]
    }

    pub fn beta_table(&self) -> &[f64] {
        &self.beta
    }

    /// The parity product `H(ξ, A) = Π_{y∈A} (2ξ(y)−1)` for an occupancy
    /// mask over N̄.
    pub fn h(occupancy: u32, set: u32) -> f64 {
        let zeros_in_set = (set & !occupancy).count_ones();
        if zeros_in_set % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Flip rate of the represented model at a window, straight from the
    /// dual form `c = (k₀/2)·[1 − (2ξ(0)−1)·Σ_A β₀(A)·H(ξ, A)]`.
    pub fn rate(&self, center: bool, ring: u32) -> f64 {
        let occ = ring | ((center as u32) << self.n);
        let mut s = 0.0;
        for (mask, &b) in self.beta.iter().enumerate() {
            if b != 0.0 {
                s += b * Self::h(occ, mask as u32);
            }
        }
        let sign = if center { 1.0 } else { -1.0 };
        self.k0 / 2.0 * (1.0 - sign * s)
    }
}

/// Builds the representation from a nonnegative α vector.
pub fn rep_from_alpha(alpha: &[f64]) -> Result<CancellativeRep, CancellativeError> {
    let n = alpha.len();
    for (k, &a) in alpha.iter().enumerate() {
        if a < 0.0 {
            return Err(CancellativeError::NegativeAlpha(k + 1, a));
        }
    }
    let size = 1usize << (n + 1);
    let origin_bit = 1u32 << n;
    let mut weights = vec![0.0; size];
    let mut k0 = 0.0;
    // Canonical accumulation order: by α index, then by mask, so that the
    // total weight k₀ is Σ_ℓ α_ℓ·C(n,ℓ) evaluated in index order.
    for ell in 1..=n {
        let mut count = 0u64;
        for mask in 1..size as u32 {
            let m = mask.count_ones() as usize;
            if m % 2 == 0 || mask == origin_bit {
                continue;
            }
            let weight_index = if mask & origin_bit == 0 { m } else { m - 1 };
            if weight_index == ell {
                weights[mask as usize] = alpha[ell - 1];
                count += 1;
            }
        }
        k0 += alpha[ell - 1] * count as f64;
    }
    if k0 <= 0.0 {
        return Err(CancellativeError::NegativeAlpha(0, k0));
    }
    let beta = weights.iter().map(|w| w / k0).collect();
    Ok(CancellativeRep { n, k0, beta, alpha: alpha.to_vec() })
}

/// Evaluates the represented rates on every window with a 0 at the centre,
/// grouped by the number of occupied ring sites, and checks the grouping is
/// consistent and equal to `αᵀM`. Returns `a_0..a_n` (with `a_0 = 0`).
///
/// The per-window value is the unnormalized odd-intersection count form:
/// `c(0,ξ) = Σ_A weight(A)·1{|A ∩ ξ| odd}`, accumulated per α index so the
/// comparison against `αᵀM` is exact in floating point.
pub fn reconstruct_rates(rep: &CancellativeRep) -> Result<Vec<f64>, CancellativeError> {
    let n = rep.n;
    let origin_bit = 1u32 << n;
    let m = build_m(n);
    let mut out = vec![0.0; n + 1];
    for ring in 0..(1u32 << n) {
        let j = ring.count_ones() as usize;
        // Count, for each α index, the odd-intersection support sets.
        let mut counts = vec![0u64; n + 1];
        for mask in 1..(1u32 << (n + 1)) {
            let sz = mask.count_ones() as usize;
            if sz % 2 == 0 || mask == origin_bit {
                continue;
            }
            // The centre is 0, so only ring bits contribute to the parity.
            if (mask & ring).count_ones() % 2 == 1 {
                let ell = if mask & origin_bit == 0 { sz } else { sz - 1 };
                counts[ell] += 1;
            }
        }
        let value: f64 = (1..=n).map(|ell| rep.alpha[ell - 1] * counts[ell] as f64).sum();
        let expected: f64 = (1..=n)
            .map(|ell| rep.alpha[ell - 1] * m.entry_i64(ell, j.max(1)) as f64)
            .sum();
        if j == 0 {
            if value != 0.0 {
                return Err(CancellativeError::InconsistentWindows(0));
            }
            continue;
        }
        if value != expected {
            return Err(CancellativeError::RoundTripMismatch(j));
        }
        if out[j] != 0.0 && out[j] != value {
            return Err(CancellativeError::InconsistentWindows(j));
        }
        out[j] = value;
    }
    Ok(out)
}
