//! Mergeable statistical accumulators and small numeric helpers.
//!
//! Estimators are additive monoids (count / sum / sum of squares), so
//! parallel replicate blocks can be reduced in a fixed order and the final
//! numbers are independent of how the work was scheduled.

/// Running mean/variance accumulator over scalar samples.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningStat {
    pub n: u64,
    pub sum: f64,
    pub sumsq: f64,
}

impl RunningStat {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sumsq += x * x;
    }

    pub fn merge(&mut self, other: &RunningStat) {
        self.n += other.n;
        self.sum += other.sum;
        self.sumsq += other.sumsq;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        let n = self.n as f64;
        ((self.sumsq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Bernoulli counter: estimates a probability with its binomial standard
/// error.
#[derive(Clone, Copy, Debug, Default)]
pub struct HitCounter {
    pub trials: u64,
    pub hits: u64,
}

impl HitCounter {
    #[inline]
    pub fn push(&mut self, hit: bool) {
        self.trials += 1;
        self.hits += hit as u64;
    }

    pub fn merge(&mut self, other: &HitCounter) {
        self.trials += other.trials;
        self.hits += other.hits;
    }

    pub fn p_hat(&self) -> f64 {
        self.hits as f64 / self.trials as f64
    }

    pub fn std_error(&self) -> f64 {
        let p = self.p_hat();
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// Median of a sample (averages the two central order statistics for even
/// sample sizes). The slice is reordered in place.
pub fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Least-squares fit of `y ≈ k + c·x` over the given points; returns `(k, c)`.
///
/// Used to extrapolate slowly converging Monte Carlo levels, with `x` a
/// known decay variable such as `(log t)^{-1/2}`.
pub fn fit_affine(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    assert!(n >= 2.0);
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let det = n * sxx - sx * sx;
    let c = (n * sxy - sx * sy) / det;
    let k = (sy - c * sx) / n;
    (k, c)
}

/// Two-sided Kolmogorov-Smirnov statistic of a sample against the
/// exponential distribution with the given rate. Reorders the slice.
pub fn ks_statistic_exponential(samples: &mut [f64], rate: f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let cdf = 1.0 - (-rate * x).exp();
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
    }
    d
}

/// Asymptotic Kolmogorov-Smirnov critical value at significance `alpha`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    ((-0.5 * (alpha / 2.0).ln()) / n as f64).sqrt()
}
