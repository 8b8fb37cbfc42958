//! Flip-rate functions for every model family and their decomposition as a
//! voter model plus a small perturbation.
//!
//! A rate model assigns each local window (the spin at a site together with
//! the spins on its neighbourhood ring) a nonnegative flip rate. Windows are
//! indexed by bitmasks over the neighbourhood's canonical site ordering, so
//! every rate function in scope is just a pair of lookup tables of length
//! `2^|N|`: one for a 0 at the centre, one for a 1.
//!
//! A perturbation family is a curve `ε ↦ c_ε` of such models with
//! `c_ε = c^vm + ε·c*_ε`, where `c*_ε` is carried by two tables `g₀^ε, g₁^ε`
//! on ring configurations. Their `ε → 0` limits define the asymptotic rate
//! tables `r^s(A) = g₁(1_A)` (symmetric part) and `r^a(A)` (asymmetric part,
//! extracted at the `(log 1/ε)²` scale) that drive every drift constant
//! downstream.

use crate::kernels::WalkKernel;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RateError {
    #[error("window ring mask {0:#x} out of range for |N| = {1}")]
    KeyMismatch(u32, usize),
    #[error("reconstructed rate is negative at ring mask {mask:#x} (center {center}): {value}")]
    NegativeTotalRate { center: u8, mask: u32, value: f64 },
    #[error("numeric extrapolation of the asymptotic rates did not stabilize (drift {0:.3e})")]
    NoLimit(f64),
}

/// The spin at a site together with the spins on its neighbourhood ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalWindow {
    pub center: bool,
    /// Bitmask over the neighbourhood's canonical site ordering.
    pub ring: u32,
}

/// Model family tags with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Voter,
    /// Flip rate = (fraction of disagreeing neighbours)^q, with 0^0 := 0.
    QVoter { q: f64 },
    /// Voter rates plus competition terms `(α_i − 1)·f_i²`.
    LotkaVolterra { alpha0: f64, alpha1: f64 },
    /// Mixture `α·voter + (1−α)·threshold`.
    Affine { alpha: f64 },
    /// Flip rate `(1−θ^j)/(1−θ^|N|)` in the number j of disagreeing
    /// neighbours.
    Geometric { theta: f64 },
    /// Flip at rate 1 whenever any neighbour disagrees.
    Threshold,
    /// Explicit rate tables.
    Tabulated,
}

/// A translation-invariant spin-flip rate function of finite range.
#[derive(Debug, Clone)]
pub struct RateModel {
    family: Family,
    kernel: WalkKernel,
    /// Rate with a 0 at the centre, indexed by the ring mask.
    rate0: Vec<f64>,
    /// Rate with a 1 at the centre.
    rate1: Vec<f64>,
}

impl RateModel {
    /// Builds the lookup tables for a parametric family on the given kernel.
    pub fn new(family: Family, kernel: WalkKernel) -> RateModel {
        let n = kernel.neighbourhood().len();
        let size = 1usize << n;
        let mut rate0 = vec![0.0; size];
        let mut rate1 = vec![0.0; size];
        let full = (size - 1) as u32;
        for m in 0..size as u32 {
            let f1 = kernel.mass_of_mask(m);
            let f0 = kernel.mass_of_mask(full & !m);
            let ones = m.count_ones() as usize;
            let zeros = n - ones;
            let (r0, r1) = match family {
                Family::Voter => (f1, f0),
                Family::QVoter { q } => (pow_frac(f1, q), pow_frac(f0, q)),
                Family::LotkaVolterra { alpha0, alpha1 } => {
                    (f1 + (alpha0 - 1.0) * f1 * f1, f0 + (alpha1 - 1.0) * f0 * f0)
                }
                Family::Affine { alpha } => (
                    alpha * f1 + (1.0 - alpha) * (ones > 0) as u8 as f64,
                    alpha * f0 + (1.0 - alpha) * (zeros > 0) as u8 as f64,
                ),
                Family::Geometric { theta } => {
                    (geometric_rate(theta, ones, n), geometric_rate(theta, zeros, n))
                }
                Family::Threshold => ((ones > 0) as u8 as f64, (zeros > 0) as u8 as f64),
                Family::Tabulated => panic!("use RateModel::tabulated for explicit tables"),
            };
            rate0[m as usize] = r0;
            rate1[m as usize] = r1;
        }
        RateModel { family, kernel, rate0, rate1 }
    }

    /// Wraps explicit rate tables (length `2^|N|` each).
    pub fn tabulated(kernel: WalkKernel, rate0: Vec<f64>, rate1: Vec<f64>) -> RateModel {
        let size = 1usize << kernel.neighbourhood().len();
        assert_eq!(rate0.len(), size);
        assert_eq!(rate1.len(), size);
        RateModel { family: Family::Tabulated, kernel, rate0, rate1 }
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn kernel(&self) -> &WalkKernel {
        &self.kernel
    }

    pub fn ring_size(&self) -> usize {
        self.kernel.neighbourhood().len()
    }

    /// Flip rate at a window.
    pub fn rate(&self, window: LocalWindow) -> Result<f64, RateError> {
        let n = self.ring_size();
        if window.ring >= (1u32 << n) {
            return Err(RateError::KeyMismatch(window.ring, n));
        }
        Ok(self.rate_unchecked(window.center, window.ring))
    }

    #[inline]
    pub fn rate_unchecked(&self, center: bool, ring: u32) -> f64 {
        if center {
            self.rate1[ring as usize]
        } else {
            self.rate0[ring as usize]
        }
    }

    pub fn rate_tables(&self) -> (&[f64], &[f64]) {
        (&self.rate0, &self.rate1)
    }

    /// Largest rate over all windows; the thinning bound of the simulator.
    pub fn max_rate(&self) -> f64 {
        self.rate0
            .iter()
            .chain(&self.rate1)
            .copied()
            .fold(0.0, f64::max)
    }

    /// Multiplies all rates by a constant (used for the accelerated lattice
    /// clocks of the rescaled models).
    pub fn scaled(&self, factor: f64) -> RateModel {
        let mut out = self.clone();
        out.rate0.iter_mut().for_each(|r| *r *= factor);
        out.rate1.iter_mut().for_each(|r| *r *= factor);
        out
    }

    /// Adds another model's rates pointwise (same kernel).
    pub fn plus(&self, other: &RateModel) -> RateModel {
        assert_eq!(self.ring_size(), other.ring_size());
        let mut out = self.clone();
        out.family = Family::Tabulated;
        for i in 0..out.rate0.len() {
            out.rate0[i] += other.rate0[i];
            out.rate1[i] += other.rate1[i];
        }
        out
    }

    /// Both constant windows are traps (rate 0).
    pub fn has_both_traps(&self) -> bool {
        let full = (1usize << self.ring_size()) - 1;
        self.rate0[0] == 0.0 && self.rate1[full] == 0.0
    }

    /// Whether the rates are invariant under exchanging the roles of 0s and
    /// 1s on every window.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let full = (self.rate0.len() - 1) as u32;
        (0..self.rate0.len() as u32)
            .all(|m| (self.rate0[m as usize] - self.rate1[(full & !m) as usize]).abs() <= tol)
    }

    /// Exhaustive monotonicity (attractiveness) check: along `ξ ≤ ξ'`, the
    /// 0→1 rate must not decrease and the 1→0 rate must not increase.
    /// Returns a violating window pair if there is one.
    pub fn monotonicity_check(&self) -> Option<MonotonicityWitness> {
        let size = self.rate0.len();
        for m in 0..size as u32 {
            // Enumerate all supersets of m.
            let full = (size - 1) as u32;
            let mut extra = (!m) & full;
            loop {
                let sup = m | extra;
                if self.rate0[sup as usize] < self.rate0[m as usize] - 1e-12 {
                    return Some(MonotonicityWitness { center: false, lower: m, upper: sup });
                }
                if self.rate1[sup as usize] > self.rate1[m as usize] + 1e-12 {
                    return Some(MonotonicityWitness { center: true, lower: m, upper: sup });
                }
                if extra == 0 {
                    break;
                }
                extra = (extra - 1) & !m & full;
            }
        }
        None
    }
}

/// Witness of a monotonicity failure: a pair of ordered rings and the centre
/// spin whose inequality fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonotonicityWitness {
    pub center: bool,
    pub lower: u32,
    pub upper: u32,
}

/// `x^q` with the `0^0 := 0` convention used by the q-voter model.
#[inline]
fn pow_frac(x: f64, q: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.powf(q)
    }
}

fn geometric_rate(theta: f64, j: usize, n: usize) -> f64 {
    if j == 0 {
        return 0.0;
    }
    if theta == 0.0 {
        return 1.0;
    }
    (1.0 - theta.powi(j as i32)) / (1.0 - theta.powi(n as i32))
}

/// `r_ℓ = (ℓ/n)·log(n/ℓ)`, the q-voter asymptotic rate by disagreement
/// count; `r_0 = 0`.
pub fn r_ell(n: usize, ell: usize) -> f64 {
    if ell == 0 {
        return 0.0;
    }
    let x = ell as f64 / n as f64;
    x * (1.0 / x).ln()
}

/// `r^ε_ℓ = ((ℓ/n)^{1−ε} − ℓ/n)/ε`, the finite-ε q-voter perturbation rate.
pub fn r_eps_ell(n: usize, ell: usize, eps: f64) -> f64 {
    if ell == 0 {
        return 0.0;
    }
    let x = ell as f64 / n as f64;
    (x.powf(1.0 - eps) - x) / eps
}

/// A violation found by [`check_r_eps_bound`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundViolation {
    pub ell: usize,
    pub eps: f64,
    pub value: f64,
    pub bound: f64,
}

/// Checks `|r^ε_ℓ − r_ℓ| ≤ ε` for all ℓ, and `0 < r^ε_ℓ ≤ 1` for
/// `1 ≤ ℓ ≤ n−1` whenever `ε < 1 − 1/e`.
pub fn check_r_eps_bound(n: usize, eps_grid: &[f64]) -> Result<(), BoundViolation> {
    for &eps in eps_grid {
        for ell in 0..=n {
            let v = r_eps_ell(n, ell, eps);
            let gap = (v - r_ell(n, ell)).abs();
            if gap > eps + 1e-12 {
                return Err(BoundViolation { ell, eps, value: gap, bound: eps });
            }
            if eps < 1.0 - (-1.0f64).exp() && (1..n).contains(&ell) && !(v > 0.0 && v <= 1.0) {
                return Err(BoundViolation { ell, eps, value: v, bound: 1.0 });
            }
        }
    }
    Ok(())
}

/// Strict subadditivity of a subset function over disjoint nonempty unions:
/// `r(A ∪ B) < r(A) + r(B)`. `r` is indexed by ring mask (entry 0 unused).
/// Returns a violating pair on failure.
pub fn subadditivity_check(r: &[f64], n: usize) -> Result<(), (u32, u32)> {
    let full = ((1usize << n) - 1) as u32;
    for a in 1..=full {
        // Disjoint nonempty b: nonempty submasks of the complement.
        let comp = full & !a;
        let mut b = comp;
        while b != 0 {
            if !(r[(a | b) as usize] < r[a as usize] + r[b as usize] - 1e-15) {
                return Err((a, b));
            }
            b = (b - 1) & comp;
        }
    }
    Ok(())
}

/// The tables `g₀^ε, g₁^ε` of a perturbation at one ε, indexed by ring mask.
#[derive(Debug, Clone)]
pub struct GTables {
    pub eps: f64,
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
}

/// Limit rate tables `r^s, r^a` over nonempty `A ⊆ N` (mask-indexed, entry 0
/// fixed at 0) together with the uniform bound `‖r‖` over the scaling
/// window.
#[derive(Debug, Clone)]
pub struct AsymptoticRates {
    pub r_s: Vec<f64>,
    pub r_a: Vec<f64>,
    pub norm_r: f64,
}

/// A one-parameter model curve `ε ↦ c_ε` around the voter model.
#[derive(Clone)]
pub struct Perturbation {
    kernel: WalkKernel,
    kind: PerturbationKind,
}

#[derive(Clone)]
pub enum PerturbationKind {
    /// `q = 1 − ε`.
    QVoter,
    /// `α_i = 1 − ε + β_i·ε/(log 1/ε)²` with user-supplied limit constants
    /// `β_i`.
    LotkaVolterra { beta0: f64, beta1: f64 },
    /// `α = 1 − ε`.
    Affine,
    /// `θ = 1 − ε`.
    Geometric,
    /// Arbitrary user curve; asymptotic rates come from numeric
    /// extrapolation.
    Tabulated(std::sync::Arc<dyn Fn(f64, &WalkKernel) -> RateModel + Send + Sync>),
}

impl Perturbation {
    pub fn new(kind: PerturbationKind, kernel: WalkKernel) -> Perturbation {
        Perturbation { kernel, kind }
    }

    pub fn kernel(&self) -> &WalkKernel {
        &self.kernel
    }

    pub fn kind(&self) -> &PerturbationKind {
        &self.kind
    }

    /// The model at perturbation strength ε.
    pub fn model_at(&self, eps: f64) -> RateModel {
        assert!(eps > 0.0 && eps < 1.0);
        let k = self.kernel.clone();
        match &self.kind {
            PerturbationKind::QVoter => RateModel::new(Family::QVoter { q: 1.0 - eps }, k),
            PerturbationKind::LotkaVolterra { beta0, beta1 } => {
                let l2 = (1.0 / eps).ln().powi(2);
                RateModel::new(
                    Family::LotkaVolterra {
                        alpha0: 1.0 - eps + beta0 * eps / l2,
                        alpha1: 1.0 - eps + beta1 * eps / l2,
                    },
                    k,
                )
            }
            PerturbationKind::Affine => RateModel::new(Family::Affine { alpha: 1.0 - eps }, k),
            PerturbationKind::Geometric => {
                RateModel::new(Family::Geometric { theta: 1.0 - eps }, k)
            }
            PerturbationKind::Tabulated(build) => build(eps, &self.kernel),
        }
    }

    /// Splits `c_ε = c^vm + ε·c*_ε` by solving at each centre value; returns
    /// the `g` tables. Fails if `c_ε` itself is negative somewhere.
    pub fn decompose(&self, eps: f64) -> Result<GTables, RateError> {
        let model = self.model_at(eps);
        let voter = RateModel::new(Family::Voter, self.kernel.clone());
        let (c0, c1) = model.rate_tables();
        let (v0, v1) = voter.rate_tables();
        for (mask, (&c, _)) in c0.iter().zip(c1).enumerate() {
            if c < 0.0 {
                return Err(RateError::NegativeTotalRate { center: 0, mask: mask as u32, value: c });
            }
        }
        for (mask, &c) in c1.iter().enumerate() {
            if c < 0.0 {
                return Err(RateError::NegativeTotalRate { center: 1, mask: mask as u32, value: c });
            }
        }
        let g1 = c0.iter().zip(v0).map(|(c, v)| (c - v) / eps).collect();
        let g0 = c1.iter().zip(v1).map(|(c, v)| (c - v) / eps).collect();
        Ok(GTables { eps, g0, g1 })
    }

    /// Largest ε in (0,1) for which all rates stay nonnegative, located by a
    /// grid scan plus bisection. The families in scope are all nonnegative
    /// for every ε below this value.
    pub fn epsilon0(&self) -> f64 {
        let feasible = |eps: f64| {
            let m = self.model_at(eps);
            let (r0, r1) = m.rate_tables();
            r0.iter().chain(r1).all(|&r| r >= 0.0)
        };
        let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
        let mut last_ok = None;
        for &e in &grid {
            if feasible(e) {
                last_ok = Some(e);
            } else {
                break;
            }
        }
        let Some(mut lo) = last_ok else { return 0.0 };
        let mut hi = (lo + 1e-3).min(1.0 - 1e-12);
        if feasible(hi) {
            return hi;
        }
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Limit tables `r^s(A) = g₁(1_A)` and the `(log 1/ε)²`-scale asymmetry
    /// `r^a(A)`, from the closed forms where known and from Richardson
    /// extrapolation over ε ∈ {1e-2, 1e-3, 1e-4} otherwise.
    pub fn asymptotic_rates(&self) -> Result<AsymptoticRates, RateError> {
        let n = self.kernel.neighbourhood().len();
        let size = 1usize << n;
        let nf = n as f64;
        let mut r_s = vec![0.0; size];
        let mut r_a = vec![0.0; size];
        match &self.kind {
            PerturbationKind::QVoter => {
                for a in 1..size {
                    r_s[a] = r_ell(n, (a as u32).count_ones() as usize);
                }
            }
            PerturbationKind::LotkaVolterra { beta0, beta1 } => {
                for a in 1..size {
                    let x = (a as u32).count_ones() as f64 / nf;
                    r_s[a] = -x * x;
                    r_a[a] = (beta0 - beta1) * x * x;
                }
            }
            PerturbationKind::Affine => {
                for a in 1..size {
                    r_s[a] = 1.0 - (a as u32).count_ones() as f64 / nf;
                }
            }
            PerturbationKind::Geometric => {
                for a in 1..size {
                    let k = (a as u32).count_ones() as f64;
                    r_s[a] = k * (nf - k) / (2.0 * nf);
                }
            }
            PerturbationKind::Tabulated(_) => {
                let (rs, ra) = self.extrapolated_rates()?;
                r_s = rs;
                r_a = ra;
            }
        }
        Ok(AsymptoticRates { norm_r: self.norm_r(&r_s, &r_a), r_s, r_a })
    }

    /// Richardson extrapolation of the g-tables assuming O(ε) corrections.
    fn extrapolated_rates(&self) -> Result<(Vec<f64>, Vec<f64>), RateError> {
        let n = self.kernel.neighbourhood().len();
        let size = 1usize << n;
        let full = (size - 1) as u32;
        let eps = [1e-2, 1e-3, 1e-4];
        let tables: Vec<GTables> = eps
            .iter()
            .map(|&e| self.decompose(e))
            .collect::<Result<_, _>>()?;
        // Polynomial extrapolation to ε = 0; the refinement step compares
        // the linear extrapolant through the two smallest ε against the full
        // quadratic one.
        let richardson = |vals: &[f64], tol: f64| -> Result<f64, RateError> {
            let lin = (eps[1] * vals[2] - eps[2] * vals[1]) / (eps[1] - eps[2]);
            let mut quad = 0.0;
            for i in 0..3 {
                let mut w = 1.0;
                for j in 0..3 {
                    if j != i {
                        w *= eps[j] / (eps[j] - eps[i]);
                    }
                }
                quad += w * vals[i];
            }
            if (quad - lin).abs() > tol {
                return Err(RateError::NoLimit((quad - lin).abs()));
            }
            Ok(quad)
        };
        let mut r_s = vec![0.0; size];
        let mut r_a = vec![0.0; size];
        for a in 1..size {
            let comp = (full & !(a as u32)) as usize;
            let vals: Vec<f64> = tables.iter().map(|t| t.g1[a]).collect();
            r_s[a] = richardson(&vals, 1e-6)?;
            // Asymmetry at the (log 1/ε)² scale.
            let avals: Vec<f64> = tables
                .iter()
                .zip(&eps)
                .map(|(t, &e)| (1.0 / e).ln().powi(2) * (t.g1[a] - t.g0[comp]))
                .collect();
            r_a[a] = richardson(&avals, 1e-4)?;
        }
        Ok((r_s, r_a))
    }

    /// Uniform bound `‖r‖` over the finite-scale tables and their limits:
    /// the sup of `|r^{N,s}|` and `|r^{N,a}|` over a geometric grid of
    /// lattice scales together with the limit tables.
    fn norm_r(&self, r_s: &[f64], r_a: &[f64]) -> f64 {
        let mut sup = r_s
            .iter()
            .chain(r_a)
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        for k in 0..30 {
            let n_scale = 25.0 * 2.0f64.powi(k);
            let (rns, rna) = match self.finite_scale_rates(n_scale) {
                Ok(t) => t,
                Err(_) => continue,
            };
            sup = rns.iter().chain(&rna).fold(sup, |m, &v| m.max(v.abs()));
        }
        sup
    }

    /// Finite-scale tables `r^{N,s}(A) = g₀^{ε_N}(1_{N∖A})` and
    /// `r^{N,a}(A) = (log N)²·(g₁^{ε_N}(1_A) − g₀^{ε_N}(1_{N∖A}))` at lattice
    /// scale `N`, where `ε_N = (log N)³/N`.
    pub fn finite_scale_rates(&self, n_scale: f64) -> Result<(Vec<f64>, Vec<f64>), RateError> {
        let eps = n_scale.ln().powi(3) / n_scale;
        if !(eps > 0.0 && eps < 1.0) {
            return Err(RateError::NoLimit(eps));
        }
        let t = self.decompose(eps)?;
        let size = t.g1.len();
        let full = (size - 1) as u32;
        let l2 = n_scale.ln().powi(2);
        let mut rns = vec![0.0; size];
        let mut rna = vec![0.0; size];
        for a in 1..size {
            let comp = (full & !(a as u32)) as usize;
            rns[a] = t.g0[comp];
            rna[a] = l2 * (t.g1[a] - t.g0[comp]);
        }
        Ok((rns, rna))
    }

    /// Checks the sign constraint on subsets carried by kernel holes: for
    /// every nonempty `A ⊆ N` with total kernel weight 0, the symmetric table
    /// entry `g₀^ε(1_{N∖A})` must be nonnegative. Returns violations.
    pub fn kernel_support_sign_check(&self, eps_grid: &[f64]) -> Result<(), (f64, u32, f64)> {
        let n = self.kernel.neighbourhood().len();
        let full = ((1usize << n) - 1) as u32;
        for &eps in eps_grid {
            let t = self.decompose(eps).map_err(|_| (eps, 0, f64::NAN))?;
            for a in 1..=full {
                if self.kernel.mass_of_mask(a) == 0.0 {
                    let v = t.g0[(full & !a) as usize];
                    if v < -1e-12 {
                        return Err((eps, a, v));
                    }
                }
            }
        }
        Ok(())
    }
}
