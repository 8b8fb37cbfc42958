//! Frozen reference data for the ring sizes n = 4 and n = 8: the parity
//! matrix M, its exact inverse, the q-voter α_ℓ(q) closed forms, and the
//! derivative values α_ℓ'(1) in two algebraically equivalent forms.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::ToPrimitive;

/// M for n = 4.
pub const M4: [[i64; 4]; 4] = [
    [1, 2, 3, 4],
    [3, 4, 3, 0],
    [3, 2, 1, 4],
    [1, 0, 1, 0],
];

/// M⁻¹ for n = 4, as (numerator, denominator) pairs: row j, column k, so
/// that α_k = Σ_j a_j·MINV4[j][k].
pub const MINV4: [[(i64, i64); 4]; 4] = [
    [(-2, 8), (0, 8), (2, 8), (4, 8)],
    [(0, 8), (2, 8), (0, 8), (-6, 8)],
    [(2, 8), (0, 8), (-2, 8), (4, 8)],
    [(1, 8), (-1, 8), (1, 8), (-1, 8)],
];

/// M for n = 8.
pub const M8: [[i64; 8]; 8] = [
    [1, 2, 3, 4, 5, 6, 7, 8],
    [7, 12, 15, 16, 15, 12, 7, 0],
    [21, 30, 31, 28, 25, 26, 35, 56],
    [35, 40, 35, 32, 35, 40, 35, 0],
    [35, 30, 25, 28, 31, 26, 21, 56],
    [21, 12, 13, 16, 13, 12, 21, 0],
    [7, 2, 5, 4, 3, 6, 1, 8],
    [1, 0, 1, 0, 1, 0, 1, 0],
];

/// M⁻¹ for n = 8, rows indexed by the rate index j, columns by the α index.
pub const MINV8: [[(i64, i64); 8]; 8] = [
    [(-3, 64), (-1, 32), (-1, 64), (0, 1), (1, 64), (1, 32), (3, 64), (1, 16)],
    [(-7, 64), (-1, 32), (1, 64), (1, 32), (1, 64), (-1, 32), (-7, 64), (-7, 32)],
    [(-7, 64), (1, 32), (3, 64), (0, 1), (-3, 64), (-1, 32), (7, 64), (7, 16)],
    [(0, 1), (5, 64), (0, 1), (-3, 64), (0, 1), (5, 64), (0, 1), (-35, 64)],
    [(7, 64), (1, 32), (-3, 64), (0, 1), (3, 64), (-1, 32), (-7, 64), (7, 16)],
    [(7, 64), (-1, 32), (-1, 64), (1, 32), (-1, 64), (-1, 32), (7, 64), (-7, 32)],
    [(3, 64), (-1, 32), (1, 64), (0, 1), (-1, 64), (1, 32), (-3, 64), (1, 16)],
    [(1, 128), (-1, 128), (1, 128), (-1, 128), (1, 128), (-1, 128), (1, 128), (-1, 128)],
];

/// The q-voter α closed forms for n = 4, frozen as a regression reference.
pub fn alpha_n4(q: f64) -> [f64; 4] {
    let p = |x: f64| x.powf(q);
    [
        -0.25 * p(0.25) + 0.25 * p(0.75) + 0.125,
        0.25 * p(0.5) - 0.125,
        0.25 * p(0.25) - 0.25 * p(0.75) + 0.125,
        0.5 * p(0.25) - 0.75 * p(0.5) + 0.5 * p(0.75) - 0.125,
    ]
}

/// The q-voter α closed forms for n = 8 (the exact `a·M⁻¹` columns).
pub fn alpha_n8(q: f64) -> [f64; 8] {
    let a: Vec<f64> = (1..=8).map(|j| (j as f64 / 8.0).powf(q)).collect();
    let mut out = [0.0; 8];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = (0..8)
            .map(|j| {
                let (num, den) = MINV8[j][k];
                a[j] * num as f64 / den as f64
            })
            .sum();
    }
    out
}

/// Coefficients of `α_ℓ'(1)` for n = 8 in the log-sum representation:
/// entry ℓ−2 lists `(c₂, c₃, c₅, c₇)` as rationals so that
/// `α_ℓ'(1) = c₂·log 2 + c₃·log 3 + c₅·log 5 + c₇·log 7`.
pub const ALPHA_PRIME8_LOG_SUM: [[(i64, i64); 4]; 7] = [
    // ℓ = 2
    [(3, 128), (-3, 256), (5, 256), (-7, 256)],
    // ℓ = 3
    [(1, 64), (3, 512), (-15, 512), (7, 512)],
    // ℓ = 4
    [(-5, 128), (3, 128), (0, 1), (0, 1)],
    // ℓ = 5
    [(1, 64), (-15, 512), (15, 512), (-7, 512)],
    // ℓ = 6
    [(3, 128), (-9, 256), (-5, 256), (7, 256)],
    // ℓ = 7
    [(5, 64), (63, 512), (-35, 512), (-21, 512)],
    // ℓ = 8
    [(-101, 128), (0, 1), (35, 128), (7, 128)],
];

/// `α_ℓ'(1)` for n = 8 in the single-logarithm representation
/// `−(1/k)·log(num/den)`; entry ℓ−2 is `(k, num, den)` with the big ratios
/// kept as decimal strings.
pub const ALPHA_PRIME8_SINGLE_LOG: [(u32, &str, &str); 7] = [
    (256, "22235661", "200000"),
    (512, "30517578125", "5692329216"),
    (128, "32", "27"),
    (512, "11816941917501", "7812500000000"),
    (256, "61509375", "52706752"),
    (
        512,
        "1625582413058972472208552062511444091796875",
        "1258458428839311554156984626190103821156352",
    ),
    (
        128,
        "2535301200456458802993406410752",
        "2396825584582984447479248046875",
    ),
];

/// Evaluates the log-sum representation of `α_ℓ'(1)`, ℓ = 2..8.
pub fn alpha_prime8_log_sum() -> [f64; 7] {
    let logs = [2.0f64.ln(), 3.0f64.ln(), 5.0f64.ln(), 7.0f64.ln()];
    let mut out = [0.0; 7];
    for (i, row) in ALPHA_PRIME8_LOG_SUM.iter().enumerate() {
        out[i] = row
            .iter()
            .zip(&logs)
            .map(|(&(num, den), &lg)| num as f64 / den as f64 * lg)
            .sum();
    }
    out
}

/// Evaluates the single-log representation of `α_ℓ'(1)`, ℓ = 2..8.
pub fn alpha_prime8_single_log() -> [f64; 7] {
    let mut out = [0.0; 7];
    for (i, &(k, num, den)) in ALPHA_PRIME8_SINGLE_LOG.iter().enumerate() {
        let n: BigInt = num.parse().unwrap();
        let d: BigInt = den.parse().unwrap();
        let ratio = BigRational::new(n, d).to_f64().unwrap();
        out[i] = -(ratio.ln()) / k as f64;
    }
    out
}
