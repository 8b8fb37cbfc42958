//! Exact combinatorics behind the drift constants: set partitions of the
//! augmented neighbourhood, the partition inequality that forces positivity
//! of the drift for strictly subadditive rate profiles, closed-form drift
//! evaluation from coalescing partition statistics, and the inclusion–
//! exclusion drift used in dimensions three and above.
//!
//! Throughout, the augmented neighbourhood `N̄ = N ∪ {0}` with `|N| = n` is
//! encoded in `k = n + 1` bits: bits `0..n` are the neighbourhood sites in
//! canonical order and bit `n` is the origin, matching the convention of the
//! cancellative module.  Subsets of `N` alone are masks over the low `n`
//! bits.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DriftError {
    /// A partition lower bound failed; the weight profile is not subadditive
    /// (or a caller passed inconsistent tables).
    #[error("partition inequality violated: lhs {lhs} < rhs {rhs}")]
    InequalityViolated { lhs: f64, rhs: f64 },
    /// Cells that are empty, overlap, or fail to cover the ground set.
    #[error("not a partition of the {expected}-element ground set")]
    BadPartition { expected: usize },
    /// A weight table sized for a different neighbourhood.
    #[error("subset function over {lhs} sites used with {rhs} sites")]
    SizeMismatch { lhs: usize, rhs: usize },
}

/// A real-valued weight on the nonempty subsets of the neighbourhood,
/// stored as a dense table indexed by bitmask.
#[derive(Debug, Clone)]
pub struct SubsetFunction {
    n: usize,
    values: Vec<f64>,
}

impl SubsetFunction {
    /// Builds the table by evaluating `f` on every nonempty mask.
    pub fn from_fn(n: usize, f: impl Fn(u32) -> f64) -> Self {
        let size = 1usize << n;
        let mut values = vec![0.0; size];
        for (a, slot) in values.iter_mut().enumerate().skip(1) {
            *slot = f(a as u32);
        }
        SubsetFunction { n, values }
    }

    /// Wraps an existing mask-indexed table of length `2^n` (entry 0 unused).
    pub fn from_mask_table(n: usize, values: Vec<f64>) -> Result<Self, DriftError> {
        if values.len() != 1usize << n {
            return Err(DriftError::SizeMismatch { lhs: values.len(), rhs: 1usize << n });
        }
        Ok(SubsetFunction { n, values })
    }

    /// Builds a cardinality-only weight from `per_card[ℓ−1]`, ℓ = 1..=n.
    pub fn from_counts(n: usize, per_card: &[f64]) -> Result<Self, DriftError> {
        if per_card.len() != n {
            return Err(DriftError::SizeMismatch { lhs: per_card.len(), rhs: n });
        }
        Ok(Self::from_fn(n, |a| per_card[a.count_ones() as usize - 1]))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Weight of the nonempty subset encoded by `mask`; `value(0) = 0`.
    pub fn value(&self, mask: u32) -> f64 {
        self.values[mask as usize]
    }

    /// `(ℓ/n)·log(n/ℓ)`: the symmetric limit profile of the q-voter curve.
    pub fn qvoter(n: usize) -> Self {
        Self::from_fn(n, |a| crate::rates::r_ell(n, a.count_ones() as usize))
    }

    /// `−(ℓ/n)²`: the symmetric limit profile of the Lotka-Volterra curve.
    pub fn lotka_volterra(n: usize) -> Self {
        Self::from_fn(n, |a| {
            let x = a.count_ones() as f64 / n as f64;
            -x * x
        })
    }

    /// `1 − ℓ/n`: the symmetric limit profile of the affine curve.
    pub fn affine(n: usize) -> Self {
        Self::from_fn(n, |a| 1.0 - a.count_ones() as f64 / n as f64)
    }

    /// `ℓ(n−ℓ)/(2n)`: the symmetric limit profile of the geometric curve.
    pub fn geometric(n: usize) -> Self {
        Self::from_fn(n, |a| {
            let k = a.count_ones() as f64;
            k * (n as f64 - k) / (2.0 * n as f64)
        })
    }

    /// The constant weight 1 (strictly subadditive).
    pub fn constant(n: usize) -> Self {
        Self::from_fn(n, |_| 1.0)
    }

    /// The additive weight `|A|` (subadditive but nowhere strictly).
    pub fn linear(n: usize) -> Self {
        Self::from_fn(n, |a| a.count_ones() as f64)
    }
}

/// A partition of the `k`-element augmented neighbourhood into bitmask cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetPartition {
    k: usize,
    cells: Vec<u32>,
}

impl SetPartition {
    /// Validates that the cells are nonempty, pairwise disjoint, and cover
    /// all `k` elements.
    pub fn new(k: usize, cells: Vec<u32>) -> Result<Self, DriftError> {
        let full = ((1u64 << k) - 1) as u32;
        let mut seen = 0u32;
        for &c in &cells {
            if c == 0 || c & seen != 0 || c & !full != 0 {
                return Err(DriftError::BadPartition { expected: k });
            }
            seen |= c;
        }
        if seen != full {
            return Err(DriftError::BadPartition { expected: k });
        }
        Ok(SetPartition { k, cells })
    }

    pub fn ground_size(&self) -> usize {
        self.k
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// The cell containing the origin (bit `k − 1`).
    pub fn zero_cell(&self) -> u32 {
        let bit = 1u32 << (self.k - 1);
        *self.cells.iter().find(|&&c| c & bit != 0).expect("cells cover the origin")
    }
}

/// Iterator over all set partitions of `{0, …, k−1}`, generated from
/// restricted-growth strings in lexicographic order.
pub struct Partitions {
    k: usize,
    rgs: Vec<u8>,
    done: bool,
}

/// All set partitions of a `k`-element ground set (`k ≥ 1`).
pub fn partitions(k: usize) -> Partitions {
    assert!(k >= 1 && k <= 12, "partition enumeration limited to small ground sets");
    Partitions { k, rgs: vec![0; k], done: false }
}

impl Iterator for Partitions {
    type Item = SetPartition;

    fn next(&mut self) -> Option<SetPartition> {
        if self.done {
            return None;
        }
        // Materialize the current restricted-growth string as bitmask cells.
        let blocks = 1 + *self.rgs.iter().max().unwrap() as usize;
        let mut cells = vec![0u32; blocks];
        for (i, &b) in self.rgs.iter().enumerate() {
            cells[b as usize] |= 1 << i;
        }
        // Advance: find the rightmost position that can still grow, i.e.
        // rgs[i] ≤ max(rgs[..i]); reset everything after it to zero.
        let mut i = self.k;
        loop {
            if i <= 1 {
                self.done = true;
                break;
            }
            i -= 1;
            let prefix_max = *self.rgs[..i].iter().max().unwrap();
            if self.rgs[i] <= prefix_max {
                self.rgs[i] += 1;
                for slot in self.rgs[i + 1..].iter_mut() {
                    *slot = 0;
                }
                break;
            }
        }
        Some(SetPartition { k: self.k, cells })
    }
}

/// Outcome of the partition inequality for one partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetpiOutcome {
    /// Sum of the weights of the cells avoiding the origin.
    pub lhs: f64,
    /// Weight of the complement of the origin's cell (0 if that cell is
    /// everything).
    pub rhs: f64,
    /// Whether the inequality is strict.
    pub strict: bool,
}

/// Evaluates both sides of the partition inequality
/// `Σ_{A ∈ π, 0 ∉ A} r(A) ≥ r(N̄ ∖ [0])` for a partition `π` of `N̄`.
///
/// For any subadditive `r` the inequality holds, with equality when `π` has
/// at most two cells (the left side is then literally the same table lookup
/// as the right, so the comparison is exact in floating point).  A strict
/// violation is reported as an error: it signals a non-subadditive weight
/// profile or an inconsistent partition.
pub fn detpi_check(r: &SubsetFunction, pi: &SetPartition) -> Result<DetpiOutcome, DriftError> {
    if pi.ground_size() != r.n() + 1 {
        return Err(DriftError::SizeMismatch { lhs: pi.ground_size(), rhs: r.n() + 1 });
    }
    let origin = 1u32 << r.n();
    let full = (origin << 1) - 1;
    let lhs: f64 = pi.cells().iter().filter(|&&c| c & origin == 0).map(|&c| r.value(c)).sum();
    let zero = pi.zero_cell();
    let rhs = if zero == full { 0.0 } else { r.value(full ^ zero) };
    if lhs < rhs {
        return Err(DriftError::InequalityViolated { lhs, rhs });
    }
    Ok(DetpiOutcome { lhs, rhs, strict: lhs > rhs })
}

/// Tally from scanning the partition inequality over every set partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetpiReport {
    pub partitions: usize,
    pub equality: usize,
    pub strict: usize,
    /// Partitions with more than two cells where equality held anyway;
    /// nonzero only for weights that are not strictly subadditive.
    pub ties_beyond_two_cells: usize,
}

/// Checks the partition inequality on all set partitions of `N̄`.
///
/// Returns the tally, or the first violation encountered.
pub fn exhaustive_detpi(r: &SubsetFunction) -> Result<DetpiReport, DriftError> {
    let mut report =
        DetpiReport { partitions: 0, equality: 0, strict: 0, ties_beyond_two_cells: 0 };
    for pi in partitions(r.n() + 1) {
        let outcome = detpi_check(r, &pi)?;
        report.partitions += 1;
        if outcome.strict {
            report.strict += 1;
        } else {
            report.equality += 1;
            if pi.len() > 2 {
                report.ties_beyond_two_cells += 1;
            }
        }
    }
    Ok(report)
}

/// Partition statistics of the coalescing system started from all of `N̄`,
/// reduced to the events that carry the two-dimensional drift constants:
/// exactly three surviving clusters (the `Θ±`/κ scale) and exactly two
/// (the `K₂` scale).
///
/// Counts are integers so that the pathwise identities between the derived
/// tables hold with zero tolerance.  The Monte Carlo layer fills this in;
/// everything derived from it here is exact combinatorics.
#[derive(Debug, Clone)]
pub struct ThetaTables {
    n: usize,
    t: f64,
    replicates: u64,
    /// Keyed by the two cells avoiding the origin, as a sorted pair.
    triples: HashMap<(u32, u32), u64>,
    /// Keyed by the cell avoiding the origin.
    pairs: HashMap<u32, u64>,
}

impl ThetaTables {
    pub fn new(n: usize, t: f64) -> Self {
        assert!(n >= 2 && n < 25, "neighbourhood out of range");
        ThetaTables { n, t, replicates: 0, triples: HashMap::new(), pairs: HashMap::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.t
    }

    pub fn replicates(&self) -> u64 {
        self.replicates
    }

    /// Records one replicate's time-`t` partition of `N̄` (cells over
    /// `n + 1` bits, origin = bit `n`).
    pub fn record(&mut self, cells: &[u32]) {
        self.replicates += 1;
        let origin = 1u32 << self.n;
        match cells.len() {
            3 => {
                let mut free = cells.iter().copied().filter(|c| c & origin == 0);
                let a = free.next().expect("two cells avoid the origin");
                let b = free.next().expect("two cells avoid the origin");
                *self.triples.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
            2 => {
                if let Some(&a) = cells.iter().find(|&&c| c & origin == 0) {
                    *self.pairs.entry(a).or_insert(0) += 1;
                }
            }
            _ => {}
        }
    }

    /// Folds another table (same geometry and horizon) into this one.
    pub fn merge(&mut self, other: &ThetaTables) {
        assert_eq!(self.n, other.n);
        assert_eq!(self.t, other.t);
        self.replicates += other.replicates;
        for (&k, &v) in &other.triples {
            *self.triples.entry(k).or_insert(0) += v;
        }
        for (&k, &v) in &other.pairs {
            *self.pairs.entry(k).or_insert(0) += v;
        }
    }

    fn log3(&self) -> f64 {
        self.t.ln().powi(3)
    }

    /// Raw count of replicates ending with exactly three clusters.
    pub fn three_cluster_count(&self) -> u64 {
        self.triples.values().sum()
    }

    /// `κ̂ = (log t)³·P̂(three clusters survive)`.
    ///
    /// The scale factor multiplies the finished probability (not the raw
    /// count) so that the shared-sample identities with the weighted sums
    /// below compare bit-identical floats.
    pub fn kappa_hat(&self) -> f64 {
        self.log3() * (self.three_cluster_count() as f64 / self.replicates as f64)
    }

    /// `Θ̂⁺(A)`: three clusters survive and `A` is one of them.
    pub fn theta_plus(&self, a: u32) -> f64 {
        let count: u64 = self
            .triples
            .iter()
            .filter(|&(&(c1, c2), _)| c1 == a || c2 == a)
            .map(|(_, &v)| v)
            .sum();
        self.log3() * (count as f64 / self.replicates as f64)
    }

    /// `Θ̂⁻(A)`: three clusters survive and the origin's cluster is `N̄ ∖ A`.
    pub fn theta_minus(&self, a: u32) -> f64 {
        let count: u64 =
            self.triples.iter().filter(|&(&(c1, c2), _)| c1 | c2 == a).map(|(_, &v)| v).sum();
        self.log3() * (count as f64 / self.replicates as f64)
    }

    /// `K̂₂(A, N̄∖A) = (log t)·P̂(exactly the two clusters A and N̄∖A)`.
    pub fn k2_hat(&self, a: u32) -> f64 {
        let count = self.pairs.get(&a).copied().unwrap_or(0);
        self.t.ln() * (count as f64 / self.replicates as f64)
    }

    /// `Σ_A w(A)(Θ̂⁺(A) − Θ̂⁻(A))` with a delta-method standard error over
    /// the shared replicates.
    ///
    /// Each three-cluster replicate with origin-free cells `C₁, C₂`
    /// contributes `(log t)³·(w(C₁) + w(C₂) − w(C₁ ∪ C₂))`; all other
    /// replicates contribute zero.
    pub fn weighted_theta3(&self, w: &SubsetFunction) -> (f64, f64) {
        assert_eq!(w.n(), self.n);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for (&(c1, c2), &count) in &self.triples {
            let v = w.value(c1) + w.value(c2) - w.value(c1 | c2);
            sum += count as f64 * v;
            sumsq += count as f64 * v * v;
        }
        scaled_mean_and_se(sum, sumsq, self.replicates, self.log3())
    }

    /// `Σ_A w(A)·K̂₂(A, N̄∖A)` with a delta-method standard error.
    pub fn weighted_k2(&self, w: &SubsetFunction) -> (f64, f64) {
        assert_eq!(w.n(), self.n);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for (&a, &count) in &self.pairs {
            let v = w.value(a);
            sum += count as f64 * v;
            sumsq += count as f64 * v * v;
        }
        scaled_mean_and_se(sum, sumsq, self.replicates, self.t.ln())
    }

    /// `Σ_A |A|·(Θ⁺ − Θ⁻ counts)` in exact integers; zero pathwise because
    /// the two origin-free cells partition the origin cluster's complement.
    pub fn linear_identity_residual(&self) -> i128 {
        let mut acc: i128 = 0;
        for (&(c1, c2), &count) in &self.triples {
            let per = c1.count_ones() as i128 + c2.count_ones() as i128
                - (c1 | c2).count_ones() as i128;
            acc += per * count as i128;
        }
        acc
    }

    /// `Σ_A (Θ⁺ − Θ⁻ counts) − #{|π| = 3}` in exact integers; zero pathwise
    /// (two positive cells, one origin cluster per three-cluster replicate).
    pub fn constant_identity_residual(&self) -> i128 {
        let mut acc: i128 = 0;
        for &count in self.triples.values() {
            acc += (2 - 1 - 1) * count as i128;
        }
        acc
    }

    /// `Σ_A (n − |A|)·(Θ⁺ − Θ⁻ counts) − n·#{|π| = 3}` in exact integers:
    /// the affine-drift identity `Θ₃ = κ` at the count level.
    pub fn affine_identity_residual(&self) -> i128 {
        let n = self.n as i128;
        let mut acc: i128 = 0;
        for (&(c1, c2), &count) in &self.triples {
            let per = (n - c1.count_ones() as i128) + (n - c2.count_ones() as i128)
                - (n - (c1 | c2).count_ones() as i128)
                - n;
            acc += per * count as i128;
        }
        acc
    }

    /// `Σ_A |A|(n − |A|)·(Θ⁺ − Θ⁻ counts) + Σ_A |A|²·(Θ⁺ − Θ⁻ counts)` in
    /// exact integers: the geometric/Lotka-Volterra ratio identity
    /// `Θ₃^geo = (n/2)·Θ₃^lv` at the count level.
    pub fn geometric_identity_residual(&self) -> i128 {
        let n = self.n as i128;
        let mut acc: i128 = 0;
        for (&(c1, c2), &count) in &self.triples {
            let f = |c: u32| {
                let l = c.count_ones() as i128;
                l * (n - l) + l * l
            };
            acc += (f(c1) + f(c2) - f(c1 | c2)) * count as i128;
        }
        acc
    }
}

fn mean_and_se(sum: f64, sumsq: f64, replicates: u64) -> (f64, f64) {
    let r = replicates as f64;
    let mean = sum / r;
    if replicates < 2 {
        return (mean, f64::INFINITY);
    }
    let var = ((sumsq - r * mean * mean) / (r - 1.0)).max(0.0);
    (mean, (var / r).sqrt())
}

fn scaled_mean_and_se(sum: f64, sumsq: f64, replicates: u64, scale: f64) -> (f64, f64) {
    let (mean, se) = mean_and_se(sum, sumsq, replicates);
    (scale * mean, scale * se)
}

/// The closed-form drift constants of the model families, evaluated on one
/// shared set of coalescing replicates, together with the exact count-level
/// residuals of the identities linking them.
#[derive(Debug, Clone)]
pub struct ClosedFormDrifts {
    pub kappa_hat: f64,
    /// `(β₀ − β₁)·Σ (|A|/n)² K̂₂(A, N̄∖A)` and its standard error.
    pub theta_lv2: (f64, f64),
    /// `Σ (|A|/n)²(Θ̂⁻ − Θ̂⁺)` and its standard error.
    pub theta_lv3: (f64, f64),
    /// `Σ (1 − |A|/n)(Θ̂⁺ − Θ̂⁻)`; equals `κ̂` on shared samples.
    pub theta_av3: (f64, f64),
    /// `Σ |A|(n − |A|)/(2n)·(Θ̂⁺ − Θ̂⁻)`; equals `(n/2)·Θ̂₃^lv`.
    pub theta_gv3: (f64, f64),
    /// Count-level residual of `Θ̂₃^av = κ̂` (exactly zero).
    pub affine_residual: i128,
    /// Count-level residual of `Θ̂₃^gv = (n/2)Θ̂₃^lv` (exactly zero).
    pub geometric_residual: i128,
    /// Count-level residuals of the additive and constant identities.
    pub linear_residual: i128,
    pub constant_residual: i128,
}

/// Evaluates all closed-form drift constants from one shared table.
///
/// `beta0`/`beta1` are the competition parameters entering the
/// Lotka-Volterra asymmetric drift; with `beta0 == beta1` that drift is
/// identically zero.
pub fn closed_form_drifts(tables: &ThetaTables, beta0: f64, beta1: f64) -> ClosedFormDrifts {
    let n = tables.n();
    let lv = SubsetFunction::lotka_volterra(n);
    let av = SubsetFunction::affine(n);
    let gv = SubsetFunction::geometric(n);
    // Θ₃^lv is stated against (Θ⁻ − Θ⁺); the weighted sum uses (Θ⁺ − Θ⁻),
    // and the lv profile −(|A|/n)² flips the sign for us.
    let theta_lv3 = tables.weighted_theta3(&lv);
    let theta_av3 = tables.weighted_theta3(&av);
    let theta_gv3 = tables.weighted_theta3(&gv);
    let lv2_weight = SubsetFunction::from_fn(n, |a| {
        let x = a.count_ones() as f64 / n as f64;
        (beta0 - beta1) * x * x
    });
    let theta_lv2 = tables.weighted_k2(&lv2_weight);
    ClosedFormDrifts {
        kappa_hat: tables.kappa_hat(),
        theta_lv2,
        theta_lv3,
        theta_av3,
        theta_gv3,
        affine_residual: tables.affine_identity_residual(),
        geometric_residual: tables.geometric_identity_residual(),
        linear_residual: tables.linear_identity_residual(),
        constant_residual: tables.constant_identity_residual(),
    }
}

/// Empirical distribution of the time-`T` coalescing partition of `N̄`,
/// keyed by the full partition (sorted cell masks).  This is the exchange
/// format between the Monte Carlo layer and the exact drift combinatorics
/// for transient dimensions.
#[derive(Debug, Clone)]
pub struct PartitionCensus {
    k: usize,
    horizon: f64,
    replicates: u64,
    counts: HashMap<Vec<u32>, u64>,
}

impl PartitionCensus {
    pub fn new(k: usize, horizon: f64) -> Self {
        PartitionCensus { k, horizon, replicates: 0, counts: HashMap::new() }
    }

    pub fn ground_size(&self) -> usize {
        self.k
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn replicates(&self) -> u64 {
        self.replicates
    }

    /// Records one replicate's partition.
    pub fn record(&mut self, cells: &[u32]) {
        let mut key = cells.to_vec();
        key.sort_unstable();
        self.replicates += 1;
        *self.counts.entry(key).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &PartitionCensus) {
        assert_eq!(self.k, other.k);
        assert_eq!(self.horizon, other.horizon);
        self.replicates += other.replicates;
        for (key, &v) in &other.counts {
            *self.counts.entry(key.clone()).or_insert(0) += v;
        }
    }

    /// Mean and standard error of a per-partition statistic under the
    /// census distribution.
    pub fn estimate(&self, stat: impl Fn(&[u32]) -> f64) -> (f64, f64) {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for (key, &count) in &self.counts {
            let v = stat(key);
            sum += count as f64 * v;
            sumsq += count as f64 * v * v;
        }
        mean_and_se(sum, sumsq, self.replicates)
    }
}

/// `β(A) = Σ_{∅≠C⊆A, C≠N} (−1)^{|A|−|C|} r(C)` for every nonempty `A ⊆ N`,
/// as a mask-indexed table (entry 0 unused).
pub fn beta_table(r: &SubsetFunction) -> Vec<f64> {
    alternating_sum_table(r.n(), |c| r.value(c))
}

/// `δ(A) = Σ_{∅≠C⊆A, C≠N} (−1)^{|A|−|C|} r(N∖C)`, mask-indexed.
pub fn delta_table(r: &SubsetFunction) -> Vec<f64> {
    let full = ((1usize << r.n()) - 1) as u32;
    alternating_sum_table(r.n(), |c| r.value(full ^ c))
}

fn alternating_sum_table(n: usize, h: impl Fn(u32) -> f64) -> Vec<f64> {
    let size = 1usize << n;
    let full = (size - 1) as u32;
    let mut out = vec![0.0; size];
    for (a, slot) in out.iter_mut().enumerate().skip(1) {
        let a = a as u32;
        let mut acc = 0.0;
        // Enumerate nonempty submasks of a.
        let mut c = a;
        loop {
            if c != full {
                let sign = if (a.count_ones() - c.count_ones()) % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign * h(c);
            }
            c = (c - 1) & a;
            if c == 0 {
                break;
            }
        }
        *slot = acc;
    }
    out
}

/// Verifies by brute force that the alternating sums invert: summing
/// `β(A)` over nonempty `A ⊆ B` recovers `1(B≠N)·r(B)`, and likewise
/// `δ` recovers `1(B≠N)·r(N∖B)`.  Returns the largest absolute residual.
pub fn mobius_roundtrip_residual(r: &SubsetFunction) -> f64 {
    let n = r.n();
    let full = ((1usize << n) - 1) as u32;
    let beta = beta_table(r);
    let delta = delta_table(r);
    let mut worst = 0.0f64;
    for b in 1..=full {
        let mut beta_sum = 0.0;
        let mut delta_sum = 0.0;
        let mut a = b;
        loop {
            beta_sum += beta[a as usize];
            delta_sum += delta[a as usize];
            a = (a - 1) & b;
            if a == 0 {
                break;
            }
        }
        let want_beta = if b == full { 0.0 } else { r.value(b) };
        let want_delta = if b == full { 0.0 } else { r.value(full ^ b) };
        worst = worst.max((beta_sum - want_beta).abs()).max((delta_sum - want_delta).abs());
    }
    worst
}

/// Whether the elements of `mask` all sit in one cell of the partition.
fn within_one_cell(cells: &[u32], mask: u32) -> bool {
    cells.iter().any(|&c| mask & !c == 0)
}

/// The drift functional for transient dimensions, evaluated pathwise on a
/// time-`T` partition of `N̄`:
///
/// `Σ_A β(A)·1(A coalesced, A∪{0} did not) − δ(A)·1(A∪{0} coalesced)`,
///
/// where "`A` coalesced" means the walkers started in `A` sit in a single
/// cluster at time `T` (a truncation of the infinite-horizon event).
pub fn dge3_pathwise(beta: &[f64], delta: &[f64], n: usize, cells: &[u32]) -> f64 {
    let origin = 1u32 << n;
    let full_n = origin - 1;
    let mut acc = 0.0;
    for a in 1..=full_n {
        let joined = within_one_cell(cells, a);
        let joined_with_origin = within_one_cell(cells, a | origin);
        if joined && !joined_with_origin {
            acc += beta[a as usize];
        }
        if joined_with_origin {
            acc -= delta[a as usize];
        }
    }
    acc
}

/// Drift report for dimensions three and above: the inclusion–exclusion
/// drift estimated at two truncation horizons, with the difference as the
/// truncation diagnostic, and the reaction-derivative functional on the
/// same censuses as a sign cross-check.
#[derive(Debug, Clone)]
pub struct Dge3Report {
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    /// (value, standard error) at the first horizon.
    pub theta: (f64, f64),
    /// (value, standard error) at the doubled horizon.
    pub theta_long: (f64, f64),
    pub truncation_gap: f64,
    /// Reaction-derivative functional on the same censuses.
    pub f_prime: (f64, f64),
    pub f_prime_long: (f64, f64),
}

/// Assembles the transient-dimension drift from partition censuses at a
/// horizon and at its double.
pub fn dge3_drift(
    r: &SubsetFunction,
    census: &PartitionCensus,
    census_long: &PartitionCensus,
) -> Result<Dge3Report, DriftError> {
    let n = r.n();
    if census.ground_size() != n + 1 || census_long.ground_size() != n + 1 {
        return Err(DriftError::SizeMismatch { lhs: census.ground_size(), rhs: n + 1 });
    }
    let beta = beta_table(r);
    let delta = delta_table(r);
    let theta = census.estimate(|cells| dge3_pathwise(&beta, &delta, n, cells));
    let theta_long = census_long.estimate(|cells| dge3_pathwise(&beta, &delta, n, cells));
    let f_prime = f_prime_estimate(r, census)?;
    let f_prime_long = f_prime_estimate(r, census_long)?;
    Ok(Dge3Report {
        beta,
        delta,
        theta,
        theta_long,
        truncation_gap: theta_long.0 - theta.0,
        f_prime,
        f_prime_long,
    })
}

/// Pathwise reaction-derivative difference on one partition of `N̄`:
/// `Σ_{A ∈ π, 0 ∉ A} r(A) − r(N̄ ∖ [0])` — the same two sides as the
/// partition inequality, so it is nonnegative for subadditive `r` and
/// vanishes identically for additive `r`.
pub fn f_prime_pathwise(r: &SubsetFunction, cells: &[u32]) -> f64 {
    let origin = 1u32 << r.n();
    let full = (origin << 1) - 1;
    let mut lhs = 0.0;
    let mut zero = 0u32;
    for &c in cells {
        if c & origin == 0 {
            lhs += r.value(c);
        } else {
            zero = c;
        }
    }
    let rhs = if zero == full { 0.0 } else { r.value(full ^ zero) };
    lhs - rhs
}

/// Monte Carlo estimate of the reaction-derivative difference `f₁′(0) −
/// f₀′(0)` from a partition census (a truncated surrogate for the
/// infinite-horizon partition).
pub fn f_prime_estimate(
    r: &SubsetFunction,
    census: &PartitionCensus,
) -> Result<(f64, f64), DriftError> {
    if census.ground_size() != r.n() + 1 {
        return Err(DriftError::SizeMismatch { lhs: census.ground_size(), rhs: r.n() + 1 });
    }
    Ok(census.estimate(|cells| f_prime_pathwise(r, cells)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bell(k: usize) -> usize {
        partitions(k).count()
    }

    #[test]
    fn partition_counts_are_bell_numbers() {
        assert_eq!(
            (1..=7).map(bell).collect::<Vec<_>>(),
            vec![1, 2, 5, 15, 52, 203, 877]
        );
    }

    #[test]
    fn partitions_are_valid_and_distinct() {
        let mut seen = std::collections::HashSet::new();
        for pi in partitions(5) {
            let mut cells = pi.cells().to_vec();
            SetPartition::new(5, cells.clone()).unwrap();
            cells.sort_unstable();
            assert!(seen.insert(cells));
        }
        assert_eq!(seen.len(), 52);
    }

    #[test]
    fn set_partition_rejects_overlap_and_gaps() {
        assert!(SetPartition::new(3, vec![0b011, 0b110]).is_err());
        assert!(SetPartition::new(3, vec![0b001, 0b010]).is_err());
        assert!(SetPartition::new(3, vec![0b001, 0b010, 0b100, 0]).is_err());
        assert!(SetPartition::new(3, vec![0b011, 0b100]).is_ok());
    }

    #[test]
    fn single_cell_partition_gives_zero_on_both_sides() {
        let r = SubsetFunction::qvoter(4);
        let pi = SetPartition::new(5, vec![0b11111]).unwrap();
        let out = detpi_check(&r, &pi).unwrap();
        assert_eq!(out.lhs, 0.0);
        assert_eq!(out.rhs, 0.0);
        assert!(!out.strict);
    }

    #[test]
    fn two_cell_partitions_are_exact_ties() {
        let r = SubsetFunction::qvoter(4);
        for pi in partitions(5).filter(|p| p.len() == 2) {
            let out = detpi_check(&r, &pi).unwrap();
            assert_eq!(out.lhs, out.rhs);
            assert!(!out.strict);
        }
    }

    #[test]
    fn qvoter_scan_on_five_elements() {
        let report = exhaustive_detpi(&SubsetFunction::qvoter(4)).unwrap();
        assert_eq!(report.partitions, 52);
        // One single-cell partition plus the 15 two-cell partitions tie;
        // everything with more cells is strict.
        assert_eq!(report.equality, 16);
        assert_eq!(report.strict, 36);
        assert_eq!(report.ties_beyond_two_cells, 0);
    }

    #[test]
    fn all_family_profiles_pass_the_scan() {
        for n in [4usize, 8] {
            // Ties are the single-cell partition and the 2^n − 1 two-cell
            // partitions of the (n+1)-element ground set.
            let ties = 1 << n;
            for r in [
                SubsetFunction::qvoter(n),
                SubsetFunction::lotka_volterra(n),
                SubsetFunction::affine(n),
                SubsetFunction::geometric(n),
                SubsetFunction::constant(n),
            ] {
                let report = exhaustive_detpi(&r).unwrap();
                assert_eq!(report.partitions, bell(n + 1));
                assert_eq!(report.equality, ties);
                assert_eq!(report.strict, report.partitions - ties);
                assert_eq!(report.ties_beyond_two_cells, 0);
            }
        }
    }

    #[test]
    fn constant_profile_gap_counts_cells() {
        let r = SubsetFunction::constant(4);
        for pi in partitions(5) {
            let out = detpi_check(&r, &pi).unwrap();
            let free = pi.cells().iter().filter(|&&c| c & 0b10000 == 0).count() as f64;
            let rhs = if pi.zero_cell() == 0b11111 { 0.0 } else { 1.0 };
            assert_eq!(out.lhs - out.rhs, free - rhs);
        }
    }

    #[test]
    fn additive_profile_ties_on_every_partition() {
        let r = SubsetFunction::linear(4);
        let report = exhaustive_detpi(&r).unwrap();
        assert_eq!(report.strict, 0);
        assert_eq!(report.equality, 52);
    }

    #[test]
    fn non_subadditive_profile_is_rejected() {
        // Superadditive: r(A) = |A|², merging cells increases the weight.
        let r = SubsetFunction::from_fn(4, |a| (a.count_ones() as f64).powi(2));
        assert!(matches!(
            exhaustive_detpi(&r),
            Err(DriftError::InequalityViolated { .. })
        ));
    }

    proptest! {
        // Additive-plus-constant profiles are strictly subadditive for any
        // positive offset: every partition with more than two cells must be
        // strict, the rest exact ties.
        #[test]
        fn offset_additive_profiles_are_strict_beyond_two_cells(
            weights in proptest::array::uniform4(0.0f64..10.0),
            offset in 0.01f64..5.0,
        ) {
            let r = SubsetFunction::from_fn(4, |a| {
                let additive: f64 = (0..4).filter(|i| a >> i & 1 == 1).map(|i| weights[i]).sum();
                additive + offset
            });
            let report = exhaustive_detpi(&r).unwrap();
            prop_assert_eq!(report.equality, 16);
            prop_assert_eq!(report.strict, 36);
        }
    }

    #[test]
    fn theta_tables_accumulate_and_derive() {
        let mut tables = ThetaTables::new(4, 100.0);
        // Three-cluster outcomes: cells listed over bits 0..3 plus origin bit 4.
        tables.record(&[0b00011, 0b01100, 0b10000]); // origin alone
        tables.record(&[0b00011, 0b01100, 0b10000]);
        tables.record(&[0b00001, 0b00010, 0b11100]); // origin with sites 2,3
        // Two-cluster outcome {sites 0,1} vs rest.
        tables.record(&[0b00011, 0b11100]);
        // Fully coalesced outcome contributes to neither table.
        tables.record(&[0b11111]);
        assert_eq!(tables.replicates(), 5);
        assert_eq!(tables.three_cluster_count(), 3);

        let log3 = 100.0f64.ln().powi(3);
        assert_eq!(tables.kappa_hat(), log3 * (3.0 / 5.0));
        assert_eq!(tables.theta_plus(0b0011), log3 * (2.0 / 5.0));
        assert_eq!(tables.theta_plus(0b0001), log3 * (1.0 / 5.0));
        assert_eq!(tables.theta_plus(0b1000), 0.0);
        // Θ⁻(A): origin cluster equals N̄ ∖ A.
        assert_eq!(tables.theta_minus(0b1111), log3 * (2.0 / 5.0));
        assert_eq!(tables.theta_minus(0b0011), log3 * (1.0 / 5.0));
        assert_eq!(tables.k2_hat(0b0011), 100.0f64.ln() * (1.0 / 5.0));
        assert_eq!(tables.k2_hat(0b0111), 0.0);
    }

    #[test]
    fn count_level_identities_vanish_on_synthetic_data() {
        let mut tables = ThetaTables::new(4, 1e5);
        tables.record(&[0b00011, 0b01100, 0b10000]);
        tables.record(&[0b00001, 0b00010, 0b11100]);
        tables.record(&[0b00101, 0b01010, 0b10000]);
        tables.record(&[0b01111, 0b10000]);
        tables.record(&[0b11111]);
        assert_eq!(tables.linear_identity_residual(), 0);
        assert_eq!(tables.constant_identity_residual(), 0);
        assert_eq!(tables.affine_identity_residual(), 0);
        assert_eq!(tables.geometric_identity_residual(), 0);
    }

    proptest! {
        // The count-level identities are pathwise: they must vanish for any
        // census assembled from genuine partitions of N̄.
        #[test]
        fn count_level_identities_vanish_on_random_censuses(
            picks in proptest::collection::vec((0usize..52, 1u64..5), 1..40)
        ) {
            let all: Vec<SetPartition> = partitions(5).collect();
            let mut tables = ThetaTables::new(4, 1e5);
            for (idx, times) in picks {
                for _ in 0..times {
                    tables.record(all[idx].cells());
                }
            }
            prop_assert_eq!(tables.linear_identity_residual(), 0);
            prop_assert_eq!(tables.constant_identity_residual(), 0);
            prop_assert_eq!(tables.affine_identity_residual(), 0);
            prop_assert_eq!(tables.geometric_identity_residual(), 0);
        }
    }

    #[test]
    fn closed_form_drifts_satisfy_shared_sample_identities() {
        let mut tables = ThetaTables::new(4, 1e5);
        let all: Vec<SetPartition> = partitions(5).collect();
        for (i, pi) in all.iter().enumerate() {
            for _ in 0..=(i % 3) {
                tables.record(pi.cells());
            }
        }
        let report = closed_form_drifts(&tables, 0.7, 0.7);
        assert_eq!(report.affine_residual, 0);
        assert_eq!(report.geometric_residual, 0);
        // The affine weights on n = 4 are dyadic, so the identity Θ₃ = κ
        // survives the float evaluation bit for bit.
        assert_eq!(report.theta_av3.0, report.kappa_hat);
        // Same for the geometric/Lotka-Volterra ratio with n/2 = 2.
        assert_eq!(report.theta_gv3.0, 2.0 * report.theta_lv3.0);
        // Equal competition parameters kill the asymmetric drift.
        assert_eq!(report.theta_lv2.0, 0.0);
        let skewed = closed_form_drifts(&tables, 0.9, 0.2);
        assert!(skewed.theta_lv2.0 != 0.0 || tables.pairs.is_empty());
    }

    #[test]
    fn merge_matches_serial_accumulation() {
        let all: Vec<SetPartition> = partitions(5).collect();
        let mut serial = ThetaTables::new(4, 1e4);
        let mut left = ThetaTables::new(4, 1e4);
        let mut right = ThetaTables::new(4, 1e4);
        for (i, pi) in all.iter().enumerate() {
            serial.record(pi.cells());
            if i % 2 == 0 {
                left.record(pi.cells());
            } else {
                right.record(pi.cells());
            }
        }
        left.merge(&right);
        assert_eq!(left.replicates(), serial.replicates());
        assert_eq!(left.kappa_hat(), serial.kappa_hat());
        for a in 1..16u32 {
            assert_eq!(left.theta_plus(a), serial.theta_plus(a));
            assert_eq!(left.theta_minus(a), serial.theta_minus(a));
            assert_eq!(left.k2_hat(a), serial.k2_hat(a));
        }
    }

    #[test]
    fn beta_of_singletons_is_the_rank_one_weight() {
        let r = SubsetFunction::qvoter(4);
        let beta = beta_table(&r);
        for i in 0..4 {
            assert_eq!(beta[1usize << i], r.value(1 << i));
        }
    }

    #[test]
    fn beta_of_full_set_drops_the_excluded_term() {
        // For A = N the C = N term is excluded, so on a two-site
        // neighbourhood β(N) = −r({0}) − r({1}) + 0.
        let r = SubsetFunction::from_fn(2, |a| [0.0, 1.5, 2.25, 9.0][a as usize]);
        let beta = beta_table(&r);
        assert_eq!(beta[3], -1.5 - 2.25);
        let delta = delta_table(&r);
        // δ({site 0}) = r(N ∖ {site 0}) = r({site 1}).
        assert_eq!(delta[1], 2.25);
    }

    #[test]
    fn mobius_roundtrip_is_tight_for_all_families() {
        for n in [4usize, 6, 8] {
            for r in [
                SubsetFunction::qvoter(n),
                SubsetFunction::lotka_volterra(n),
                SubsetFunction::affine(n),
                SubsetFunction::geometric(n),
            ] {
                assert!(mobius_roundtrip_residual(&r) < 1e-9, "n = {n}");
            }
        }
    }

    #[test]
    fn all_singletons_census_evaluates_by_hand() {
        // Horizon zero: nobody has moved, every walker is its own cluster.
        let r = SubsetFunction::qvoter(4);
        let mut census = PartitionCensus::new(5, 0.5);
        census.record(&[0b00001, 0b00010, 0b00100, 0b01000, 0b10000]);
        // Only singletons A have coalesced, and no A ∪ {0} has, so the
        // inclusion–exclusion drift collapses to n·β(singleton) = n·r₁.
        let report = dge3_drift(&r, &census, &census).unwrap();
        let want = 4.0 * r.value(1);
        assert!((report.theta.0 - want).abs() < 1e-12);
        assert_eq!(report.truncation_gap, 0.0);
        // The reaction-derivative functional sees the same partition:
        // Σ_{singletons} r₁ − r(N), and r(N) = 0 for the q-voter profile.
        assert!((report.f_prime.0 - want).abs() < 1e-12);
    }

    #[test]
    fn additive_profile_has_zero_reaction_derivative_pathwise() {
        let r = SubsetFunction::linear(4);
        for pi in partitions(5) {
            assert_eq!(f_prime_pathwise(&r, pi.cells()), 0.0);
        }
    }

    #[test]
    fn subadditive_profiles_have_nonnegative_reaction_derivative_pathwise() {
        for r in [
            SubsetFunction::qvoter(4),
            SubsetFunction::affine(4),
            SubsetFunction::geometric(4),
            SubsetFunction::constant(4),
        ] {
            for pi in partitions(5) {
                assert!(f_prime_pathwise(&r, pi.cells()) >= 0.0);
            }
        }
    }

    #[test]
    fn census_estimate_matches_hand_average() {
        let mut census = PartitionCensus::new(5, 1.0);
        census.record(&[0b11111]);
        census.record(&[0b11111]);
        census.record(&[0b00001, 0b11110]);
        let (mean, se) = census.estimate(|cells| cells.len() as f64);
        assert!((mean - (1.0 + 1.0 + 2.0) / 3.0).abs() < 1e-15);
        assert!(se > 0.0);
    }

    #[test]
    fn census_merge_matches_serial() {
        let mut a = PartitionCensus::new(5, 2.0);
        let mut b = PartitionCensus::new(5, 2.0);
        let mut serial = PartitionCensus::new(5, 2.0);
        for (i, pi) in partitions(5).enumerate() {
            serial.record(pi.cells());
            if i % 3 == 0 {
                a.record(pi.cells());
            } else {
                b.record(pi.cells());
            }
        }
        a.merge(&b);
        let stat = |cells: &[u32]| cells.len() as f64;
        assert_eq!(a.estimate(stat).0, serial.estimate(stat).0);
    }

    #[test]
    fn dge3_rejects_mismatched_census() {
        let r = SubsetFunction::qvoter(4);
        let census = PartitionCensus::new(6, 1.0);
        assert!(dge3_drift(&r, &census, &census).is_err());
    }

    #[test]
    fn from_counts_and_mask_table_agree() {
        let per_card = [0.3, 0.5, 0.6, 0.1];
        let by_card = SubsetFunction::from_counts(4, &per_card).unwrap();
        let table: Vec<f64> = (0..16)
            .map(|a: u32| if a == 0 { 0.0 } else { per_card[a.count_ones() as usize - 1] })
            .collect();
        let by_mask = SubsetFunction::from_mask_table(4, table).unwrap();
        for a in 1..16 {
            assert_eq!(by_card.value(a), by_mask.value(a));
        }
    }

    #[test]
    fn family_profiles_match_the_rate_module_tables() {
        use crate::kernels::{kernel_uniform, Neighbourhood};
        use crate::rates::{Perturbation, PerturbationKind};
        let kernel = kernel_uniform(&Neighbourhood::nearest_neighbour(2));
        for (kind, profile) in [
            (PerturbationKind::QVoter, SubsetFunction::qvoter(4)),
            (
                PerturbationKind::LotkaVolterra { beta0: 0.5, beta1: 0.5 },
                SubsetFunction::lotka_volterra(4),
            ),
            (PerturbationKind::Affine, SubsetFunction::affine(4)),
            (PerturbationKind::Geometric, SubsetFunction::geometric(4)),
        ] {
            let rates = Perturbation::new(kind, kernel.clone()).asymptotic_rates().unwrap();
            for a in 1..16 {
                assert!((rates.r_s[a] - profile.value(a as u32)).abs() < 1e-15);
            }
        }
    }
}
