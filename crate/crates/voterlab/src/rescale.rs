//! Diffusive rescaling bookkeeping and martingale-problem diagnostics.
//!
//! At scale parameter `N` the lattice is shrunk to `Z²/√N`, time is sped up
//! by `N`, the perturbation strength is pinned to `ε_N = (log N)³/N`, and
//! occupied sites become atoms of mass `1/N′` (`N′ = N/log N`) of the
//! empirical measure `X^N`.  This module computes the scaling parameters,
//! splits the rescaled flip rates into their voter / antisymmetric /
//! symmetric parts with the weight tables `r^{N,a}, r^{N,s}`, and replays
//! simulated trajectories through the semimartingale decomposition
//!
//! ```text
//! X_t(Φ_t) = X₀(Φ₀) + D^{N,1}(Φ) + D^{N,2}(Φ) + D^{N,3}(Φ) + M^N(Φ)
//! ```
//!
//! whose residual and drift-term bounds are the main diagnostics against
//! the limiting super-Brownian martingale problem.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::kernels::WalkKernel;
use crate::rates::{Perturbation, RateError};
use crate::rng::{mix_key, CounterRng};
use crate::simulator::{rescaled_model, run, Event, SimError, Site, SpinState};
use crate::stats::RunningStat;

#[derive(Debug, Error)]
pub enum RescaleError {
    #[error("scale parameter {0} must exceed e³")]
    ScaleTooSmall(f64),
    #[error("perturbation strength {0} outside the solvable range")]
    EpsilonOutOfRange(f64),
    #[error("rate construction failed: {0}")]
    Rates(#[from] RateError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
}

/// The derived quantities attached to one value of the scale parameter.
#[derive(Debug, Clone, Copy)]
pub struct ScalingParams {
    pub n_scale: f64,
    /// `ε_N = (log N)³ / N`.
    pub eps_n: f64,
    /// Mass normalizer `N′ = N / log N`.
    pub n_prime: f64,
    /// Lattice spacing `1/√N`.
    pub spacing: f64,
    /// Diagnostic horizon; defaults to `(log N)^{−19}`, which is degenerate
    /// at desk scale (`N·t_N ≪ 1`) and therefore overridable.
    pub t_n: f64,
}

impl ScalingParams {
    pub fn with_horizon(mut self, t: f64) -> ScalingParams {
        self.t_n = t;
        self
    }
}

/// Scaling parameters at a given `N > e³`.
pub fn scaling_params(n_scale: f64) -> Result<ScalingParams, RescaleError> {
    if !(n_scale > std::f64::consts::E.powi(3)) {
        return Err(RescaleError::ScaleTooSmall(n_scale));
    }
    let log_n = n_scale.ln();
    Ok(ScalingParams {
        n_scale,
        eps_n: log_n.powi(3) / n_scale,
        n_prime: n_scale / log_n,
        spacing: 1.0 / n_scale.sqrt(),
        t_n: log_n.powi(-19),
    })
}

/// Inverts `ε = (log N)³/N` for `N > e³`, where the map is strictly
/// decreasing, by bisection to relative tolerance `1e−12`.
pub fn solve_n(eps: f64) -> Result<ScalingParams, RescaleError> {
    let e3 = std::f64::consts::E.powi(3);
    let eps_at = |n: f64| n.ln().powi(3) / n;
    if !(eps > 0.0) || eps >= eps_at(e3) {
        return Err(RescaleError::EpsilonOutOfRange(eps));
    }
    let (mut lo, mut hi) = (e3, e3 * 2.0);
    while eps_at(hi) > eps {
        hi *= 2.0;
    }
    while (hi - lo) > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid) > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    scaling_params(0.5 * (lo + hi))
}

/// The unique decomposition of the rescaled rates
/// `c^N = N·c^{N,vm} + (log N)·c^{N,a} + (log N)³·c^{N,s}`
/// with `c^{N,s}` symmetric and `c^{N,a}` vanishing at occupied centres,
/// together with the subset weight tables that represent the two
/// perturbation parts.
#[derive(Clone)]
pub struct RescaledRates {
    params: ScalingParams,
    kernel: WalkKernel,
    /// `r^{N,a}(A)`, indexed by the ring mask of `A`.
    pub r_a: Vec<f64>,
    /// `r^{N,s}(A)`, indexed by the ring mask of `A`.
    pub r_s: Vec<f64>,
    /// `max_A |r^{N,a}(A)| ∨ |r^{N,s}(A)|` at this `N` (a finite-`N`
    /// stand-in for the scaling-window supremum `‖r‖`).
    pub norm_r: f64,
    voter0: Vec<f64>,
    voter1: Vec<f64>,
    total0: Vec<f64>,
    total1: Vec<f64>,
}

impl RescaledRates {
    pub fn params(&self) -> &ScalingParams {
        &self.params
    }

    pub fn kernel(&self) -> &WalkKernel {
        &self.kernel
    }

    fn full_mask(&self) -> u32 {
        (1u32 << self.kernel.neighbourhood().len()) - 1
    }

    /// Unscaled voter part `c^{N,vm}` on one window.
    pub fn c_vm(&self, center: bool, ring: u32) -> f64 {
        if center {
            self.voter1[ring as usize]
        } else {
            self.voter0[ring as usize]
        }
    }

    /// Antisymmetric part `c^{N,a}`; zero at occupied centres by the
    /// normalization that makes the decomposition unique.
    pub fn c_a(&self, center: bool, ring: u32) -> f64 {
        if center {
            0.0
        } else {
            self.r_a[ring as usize]
        }
    }

    /// Symmetric part `c^{N,s}` on one window.
    pub fn c_s(&self, center: bool, ring: u32) -> f64 {
        if center {
            self.r_s[(self.full_mask() ^ ring) as usize]
        } else {
            self.r_s[ring as usize]
        }
    }

    /// Full rescaled rate `N·c_{ε_N}` on one window, straight from the
    /// family formula (the reconstruction target).
    pub fn total(&self, center: bool, ring: u32) -> f64 {
        if center {
            self.total1[ring as usize]
        } else {
            self.total0[ring as usize]
        }
    }

    /// Per-site drift kernel `d^{N,2} = (1−ξ(x))·c^{N,a}`.
    pub fn d2(&self, center: bool, ring: u32) -> f64 {
        self.c_a(center, ring)
    }

    /// Per-site drift kernel `d^{N,3} = (1−2ξ(x))·c^{N,s}`.
    pub fn d3(&self, center: bool, ring: u32) -> f64 {
        let s = self.c_s(center, ring);
        if center {
            -s
        } else {
            s
        }
    }

    /// Worst relative gap between `N·c^{N,vm} + (log N)c^{N,a} +
    /// (log N)³c^{N,s}` and the family rate `N·c_{ε_N}` over all windows.
    pub fn reconstruction_residual(&self) -> f64 {
        let log_n = self.params.n_scale.ln();
        let mut worst = 0.0f64;
        for ring in 0..=self.full_mask() {
            for center in [false, true] {
                let rebuilt = self.params.n_scale * self.c_vm(center, ring)
                    + log_n * self.c_a(center, ring)
                    + log_n.powi(3) * self.c_s(center, ring);
                let target = self.total(center, ring);
                worst = worst.max((rebuilt - target).abs() / (1.0 + target.abs()));
            }
        }
        worst
    }
}

/// Builds the rate decomposition for a perturbation family at scale `N`.
pub fn decompose_rescaled_rates(
    pert: &Perturbation,
    n_scale: f64,
) -> Result<RescaledRates, RescaleError> {
    let params = scaling_params(n_scale)?;
    let g = pert.decompose(params.eps_n)?;
    let kernel = pert.kernel().clone();
    let n = kernel.neighbourhood().len();
    let full = (1u32 << n) - 1;
    let log_n2 = n_scale.ln().powi(2);
    let mut r_s = vec![0.0; 1 << n];
    let mut r_a = vec![0.0; 1 << n];
    for mask in 1..=full {
        // r^{N,s}(A) = g₀^ε(1_{N∖A}); r^{N,a}(A) = (log N)²[g₁^ε(1_A) −
        // g₀^ε(1_{N∖A})].
        r_s[mask as usize] = g.g0[(full ^ mask) as usize];
        r_a[mask as usize] = log_n2 * (g.g1[mask as usize] - g.g0[(full ^ mask) as usize]);
    }
    let norm_r = r_s
        .iter()
        .chain(&r_a)
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let voter = crate::rates::RateModel::new(crate::rates::Family::Voter, kernel.clone());
    let (v0, v1) = voter.rate_tables();
    let total = rescaled_model(pert, n_scale);
    let (t0, t1) = total.rate_tables();
    Ok(RescaledRates {
        params,
        kernel,
        r_a,
        r_s,
        norm_r,
        voter0: v0.to_vec(),
        voter1: v1.to_vec(),
        total0: t0.to_vec(),
        total1: t1.to_vec(),
    })
}

/// A separable test function `Φ(t,x) = e^{−λt}·φ(x)` with analytically
/// known norms, so drift-term time integrals are exact per event interval.
#[derive(Debug, Clone, Copy)]
pub enum Shape {
    Constant(f64),
    /// `a·exp(−|x−c|²/(2w²))`.
    Gaussian { center: (f64, f64), width: f64, amplitude: f64 },
    /// `a·max(0, 1 − |x−c|₁/w)` — a compactly supported pyramid bump.
    Bump { center: (f64, f64), width: f64, amplitude: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct TestFunction {
    pub shape: Shape,
    /// Exponential time decay rate `λ ≥ 0`.
    pub decay: f64,
}

impl TestFunction {
    pub fn constant(c: f64) -> TestFunction {
        TestFunction { shape: Shape::Constant(c), decay: 0.0 }
    }

    pub fn gaussian(center: (f64, f64), width: f64, amplitude: f64) -> TestFunction {
        assert!(width > 0.0);
        TestFunction { shape: Shape::Gaussian { center, width, amplitude }, decay: 0.0 }
    }

    pub fn bump(center: (f64, f64), width: f64, amplitude: f64) -> TestFunction {
        assert!(width > 0.0);
        TestFunction { shape: Shape::Bump { center, width, amplitude }, decay: 0.0 }
    }

    pub fn with_decay(mut self, lambda: f64) -> TestFunction {
        assert!(lambda >= 0.0);
        self.decay = lambda;
        self
    }

    /// Spatial factor `φ(x)`.
    pub fn space(&self, x: (f64, f64)) -> f64 {
        match self.shape {
            Shape::Constant(c) => c,
            Shape::Gaussian { center, width, amplitude } => {
                let dx = x.0 - center.0;
                let dy = x.1 - center.1;
                amplitude * (-(dx * dx + dy * dy) / (2.0 * width * width)).exp()
            }
            Shape::Bump { center, width, amplitude } => {
                let d = (x.0 - center.0).abs() + (x.1 - center.1).abs();
                amplitude * (1.0 - d / width).max(0.0)
            }
        }
    }

    pub fn value(&self, t: f64, x: (f64, f64)) -> f64 {
        (-self.decay * t).exp() * self.space(x)
    }

    /// Time derivative `Φ̇(t,x) = −λΦ(t,x)`.
    pub fn dt(&self, t: f64, x: (f64, f64)) -> f64 {
        -self.decay * self.value(t, x)
    }

    /// `‖Φ‖_∞` (over `t ≥ 0`, using `λ ≥ 0`).
    pub fn sup_norm(&self) -> f64 {
        match self.shape {
            Shape::Constant(c) => c.abs(),
            Shape::Gaussian { amplitude, .. } | Shape::Bump { amplitude, .. } => amplitude.abs(),
        }
    }

    /// Spatial Lipschitz seminorm `|Φ|_Lip` (closed form per shape).
    pub fn lip_seminorm(&self) -> f64 {
        match self.shape {
            Shape::Constant(_) => 0.0,
            // sup |∇| of a·e^{−r²/2w²} is |a|·e^{−1/2}/w, attained at r=w.
            Shape::Gaussian { width, amplitude, .. } => {
                amplitude.abs() * (-0.5f64).exp() / width
            }
            // ℓ¹ cone: gradient magnitude ≤ √2·|a|/w.
            Shape::Bump { width, amplitude, .. } => {
                amplitude.abs() * std::f64::consts::SQRT_2 / width
            }
        }
    }

    /// Half-order time-modulus seminorm `|Φ|_{1/2,N}` at window `u_n`:
    /// `sup |Φ(s−u,x)−Φ(s,x)|/√u = ‖φ‖_∞·(e^{λu}−1)·/√u` over one window.
    pub fn half_seminorm(&self, u_n: f64) -> f64 {
        assert!(u_n > 0.0);
        self.sup_norm() * ((self.decay * u_n).exp_m1()) / u_n.sqrt()
    }
}

/// The empirical measure `X^N = (1/N′) Σ ξ(x) δ_{x/√N}`.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    n_prime: f64,
    atoms: Vec<(f64, f64)>,
}

impl EmpiricalMeasure {
    /// Rescales a lattice configuration into atom positions on `Z²/√N`.
    pub fn from_state(state: &SpinState, params: &ScalingParams) -> EmpiricalMeasure {
        let atoms = state
            .ones()
            .map(|(x, y)| (x as f64 * params.spacing, y as f64 * params.spacing))
            .collect();
        EmpiricalMeasure { n_prime: params.n_prime, atoms }
    }

    pub fn n_prime(&self) -> f64 {
        self.n_prime
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.len() as f64 / self.n_prime
    }

    /// `X(f) = (1/N′) Σ f(atom)`.
    pub fn evaluate(&self, f: impl Fn((f64, f64)) -> f64) -> f64 {
        self.atoms.iter().map(|&a| f(a)).sum::<f64>() / self.n_prime
    }
}

/// The double integral `∫∫ 1(|w−z|<δ) dX(w) dX(z)` over ordered atom
/// pairs, diagonal included, computed with a spatial hash of cell size δ.
pub fn collision_functional(measure: &EmpiricalMeasure, delta: f64) -> f64 {
    assert!(delta > 0.0);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let cell = |p: (f64, f64)| ((p.0 / delta).floor() as i64, (p.1 / delta).floor() as i64);
    for (i, &a) in measure.atoms().iter().enumerate() {
        grid.entry(cell(a)).or_default().push(i);
    }
    let mut count = 0u64;
    for &w in measure.atoms() {
        let (cx, cy) = cell(w);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else { continue };
                for &j in bucket {
                    let z = measure.atoms()[j];
                    let (ex, ey) = (w.0 - z.0, w.1 - z.1);
                    if (ex * ex + ey * ey).sqrt() < delta {
                        count += 1;
                    }
                }
            }
        }
    }
    count as f64 / (measure.n_prime() * measure.n_prime())
}

/// Time series of the semimartingale decomposition of `X^N(Φ)` along one
/// trajectory, sampled at every event time plus the horizon.
#[derive(Debug, Clone)]
pub struct MartingaleDiagnostics {
    pub times: Vec<f64>,
    pub x_phi: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub d3: Vec<f64>,
    /// `M^N(Φ)` built directly as compensated jumps (not as a residual).
    pub martingale: Vec<f64>,
    /// `X_t(Φ_t) − X₀(Φ₀) − D¹ − D² − D³ − M` per sample time.
    pub residual: Vec<f64>,
    pub max_abs_residual: f64,
    /// Square-function parts `⟨M⟩₁, ⟨M⟩₂` accumulated to the horizon.
    pub sq1: f64,
    pub sq2: f64,
    /// Worst ratio `|d^{N,j}(x,ξ)| / ‖r‖` over all evaluated sites.
    pub site_bound_ratio: f64,
    /// Worst ratio of `|d^{N,j}(s,ξ,Φ)|` to the bound
    /// `‖r‖‖Φ‖_∞|N̄|(ℓ^{(j)}/N′)|ξ|`.
    pub sum_bound_ratio: f64,
    pub events: usize,
}

struct Replay<'a> {
    rates: &'a RescaledRates,
    phi: &'a TestFunction,
    offsets: Vec<Site>,
    ones: HashSet<Site>,
}

impl Replay<'_> {
    fn rescaled(&self, site: Site) -> (f64, f64) {
        let s = self.rates.params.spacing;
        (site.0 as f64 * s, site.1 as f64 * s)
    }

    fn ring_mask(&self, site: Site) -> u32 {
        let mut m = 0u32;
        for (i, o) in self.offsets.iter().enumerate() {
            if self.ones.contains(&(site.0 + o.0, site.1 + o.1)) {
                m |= 1 << i;
            }
        }
        m
    }

    /// All sites whose window can see an occupied site (the drift kernels
    /// and flip rates vanish elsewhere).
    fn support(&self) -> HashSet<Site> {
        let mut support: HashSet<Site> = self.ones.clone();
        for &(x, y) in &self.ones {
            for o in &self.offsets {
                support.insert((x - o.0, y - o.1));
            }
        }
        support
    }
}

/// Spatial sums of the decomposition integrands for one constant-state
/// interval.
struct IntervalSums {
    gen: f64,     // Σ_ones A_Nφ(x)
    phi_mass: f64, // Σ_ones φ(x)
    d2: f64,      // Σ φ(x) d^{N,2}(x,ξ)
    d3: f64,      // Σ φ(x) d^{N,3}(x,ξ)
    comp: f64,    // Σ φ(x)(1−2ξ(x)) c^N(x,ξ): jump compensator integrand
    sq1: f64,     // Σ φ² c^{N,vm}
    sq2: f64,     // Σ φ² [ℓ⁽²⁾c^{N,a} + ℓ⁽³⁾c^{N,s}]
    site_worst: f64,
}

fn interval_sums(replay: &Replay<'_>) -> IntervalSums {
    let rates = replay.rates;
    let n_scale = rates.params.n_scale;
    let log_n = n_scale.ln();
    let (l2, l3) = (log_n, log_n.powi(3));
    let weights = rates.kernel.weights();
    let mut sums = IntervalSums {
        gen: 0.0,
        phi_mass: 0.0,
        d2: 0.0,
        d3: 0.0,
        comp: 0.0,
        sq1: 0.0,
        sq2: 0.0,
        site_worst: 0.0,
    };
    for &site in &replay.support() {
        let center = replay.ones.contains(&site);
        let ring = replay.ring_mask(site);
        let p = replay.phi.space(replay.rescaled(site));
        let (d2, d3) = (rates.d2(center, ring), rates.d3(center, ring));
        sums.d2 += p * d2;
        sums.d3 += p * d3;
        let sign = if center { -1.0 } else { 1.0 };
        sums.comp += p * sign * rates.total(center, ring);
        sums.sq1 += p * p * rates.c_vm(center, ring);
        sums.sq2 += p * p * (l2 * rates.c_a(center, ring) + l3 * rates.c_s(center, ring));
        if rates.norm_r > 0.0 {
            sums.site_worst = sums
                .site_worst
                .max(d2.abs() / rates.norm_r)
                .max(d3.abs() / rates.norm_r);
        }
        if center {
            // Voter generator term: A_Nφ(x) = Σ_y N p(y)(φ(x+y/√N) − φ(x)).
            let mut a = 0.0;
            for (i, o) in replay.offsets.iter().enumerate() {
                let y = replay.rescaled((site.0 + o.0, site.1 + o.1));
                a += n_scale * weights[i] * (replay.phi.space(y) - p);
            }
            sums.gen += a;
            sums.phi_mass += p;
        }
    }
    sums
}

/// Replays a trajectory of the rescaled process through the decomposition
/// `X_t(Φ_t) = X₀(Φ₀) + D¹ + D² + D³ + M`, building every term directly
/// (the martingale as compensated jumps) so the residual is a genuine
/// consistency check rather than a definition.
pub fn martingale_decomposition(
    initial: &SpinState,
    events: &[Event],
    horizon: f64,
    phi: &TestFunction,
    rates: &RescaledRates,
) -> MartingaleDiagnostics {
    let offsets: Vec<Site> = rates
        .kernel
        .neighbourhood()
        .sites()
        .iter()
        .map(|v| (v[0], v[1]))
        .collect();
    let mut replay = Replay { rates, phi, offsets, ones: initial.ones().collect() };
    let params = &rates.params;
    let log_n = params.n_scale.ln();
    let (l2, l3) = (log_n, log_n.powi(3));
    let lambda = phi.decay;
    // ∫_a^b e^{−kλs} ds in closed form.
    let decay_integral = |a: f64, b: f64, k: f64| {
        if lambda == 0.0 {
            b - a
        } else {
            ((-k * lambda * a).exp() - (-k * lambda * b).exp()) / (k * lambda)
        }
    };

    // Running spatial mass Σ_ones φ(x); the decaying factor is applied at
    // each sample time so `x` is the true X_t(Φ(t,·)).
    let mut space_mass =
        replay.ones.iter().map(|&s| phi.space(replay.rescaled(s))).sum::<f64>();
    let x0 = space_mass / params.n_prime;
    let mut x = x0;
    let (mut d1, mut d2, mut d3, mut mart) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut sq1, mut sq2) = (0.0f64, 0.0f64);
    let mut diag = MartingaleDiagnostics {
        times: vec![0.0],
        x_phi: vec![x0],
        d1: vec![0.0],
        d2: vec![0.0],
        d3: vec![0.0],
        martingale: vec![0.0],
        residual: vec![0.0],
        max_abs_residual: 0.0,
        sq1: 0.0,
        sq2: 0.0,
        site_bound_ratio: 0.0,
        sum_bound_ratio: 0.0,
        events: events.len(),
    };

    let mut clock = 0.0f64;
    let sup_phi = phi.sup_norm();
    let bar_n = replay.offsets.len() as f64 + 1.0;
    let mut step = |replay: &mut Replay<'_>, event: Option<&Event>, until: f64| {
        let sums = interval_sums(replay);
        let i1 = decay_integral(clock, until, 1.0);
        let i2 = decay_integral(clock, until, 2.0);
        d1 += (sums.gen - lambda * sums.phi_mass) / params.n_prime * i1;
        d2 += l2 / params.n_prime * sums.d2 * i1;
        d3 += l3 / params.n_prime * sums.d3 * i1;
        mart -= sums.comp / params.n_prime * i1;
        sq1 += log_n / params.n_prime * sums.sq1 * i2;
        sq2 += sums.sq2 / (params.n_prime * params.n_prime) * i2;
        diag.site_bound_ratio = diag.site_bound_ratio.max(sums.site_worst);
        if rates.norm_r > 0.0 {
            let mass = replay.ones.len() as f64;
            let weight = (-lambda * clock).exp();
            let bound = |l: f64| rates.norm_r * sup_phi * bar_n * l / params.n_prime * mass;
            let b2 = bound(l2);
            let b3 = bound(l3);
            if b2 > 0.0 {
                diag.sum_bound_ratio = diag
                    .sum_bound_ratio
                    .max((l2 / params.n_prime * sums.d2 * weight).abs() / b2)
                    .max((l3 / params.n_prime * sums.d3 * weight).abs() / b3);
            }
        }
        clock = until;
        if let Some(e) = event {
            let p = phi.value(e.time, replay.rescaled(e.site));
            let jump = if e.value { p } else { -p } / params.n_prime;
            mart += jump;
            let sp = phi.space(replay.rescaled(e.site));
            if e.value {
                space_mass += sp;
                replay.ones.insert(e.site);
            } else {
                space_mass -= sp;
                replay.ones.remove(&e.site);
            }
        }
        x = (-lambda * until).exp() * space_mass / params.n_prime;
        diag.times.push(until);
        diag.x_phi.push(x);
        diag.d1.push(d1);
        diag.d2.push(d2);
        diag.d3.push(d3);
        diag.martingale.push(mart);
        let r = x - x0 - d1 - d2 - d3 - mart;
        diag.residual.push(r);
        diag.max_abs_residual = diag.max_abs_residual.max(r.abs());
    };
    for event in events {
        step(&mut replay, Some(event), event.time);
    }
    step(&mut replay, None, horizon);
    drop(step);
    diag.sq1 = sq1;
    diag.sq2 = sq2;
    diag
}

/// Summary of the pure-voter mass-martingale experiment: `X_t(1) − X₀(1)`
/// averaged over trajectories, with the exact per-trajectory decomposition
/// residual (identically zero by the disagreement-edge handshake identity).
#[derive(Debug, Clone, Copy)]
pub struct MassMartingaleReport {
    pub mean_drift: f64,
    pub std_error: f64,
    pub replicates: u64,
    pub total_events: u64,
    /// Largest `|residual|`; exactly 0.0 for the voter model.
    pub max_residual: f64,
    /// Largest `|d^{N,j}|/‖r‖`-style bound violation margin (0 here: the
    /// voter model has no perturbation part).
    pub max_bound_ratio: f64,
}

/// Event-driven nearest-neighbour voter dynamics specialised for the mass
/// martingale: sites are binned by disagreeing-neighbour count, so every
/// proposal is an accepted flip and each event costs O(1).
///
/// State lives on a dense square grid (the support stays within a
/// diffusive envelope of the initial blob); the grid doubles itself in the
/// rare event that an occupied site approaches the border.
struct VoterMassEngine {
    side: usize,
    spin: Vec<bool>,
    /// Disagreeing-neighbour count per site.
    count: Vec<u8>,
    /// Position inside the bucket, valid while `count > 0`.
    bucket_pos: Vec<u32>,
    buckets: [Vec<u32>; 4],
    ones: usize,
}

impl VoterMassEngine {
    /// Builds the engine from occupied sites given in grid-free
    /// coordinates; `margin` cells are reserved on every side.
    fn new(ones: &[Site], margin: usize) -> VoterMassEngine {
        let max_coord = ones
            .iter()
            .flat_map(|&(x, y)| [x, y])
            .max()
            .unwrap_or(0)
            .max(0) as usize;
        let side = max_coord + 1 + 2 * margin;
        let mut engine = VoterMassEngine {
            side,
            spin: vec![false; side * side],
            count: vec![0; side * side],
            bucket_pos: vec![0; side * side],
            buckets: Default::default(),
            ones: ones.len(),
        };
        for &(x, y) in ones {
            let idx = (y as usize + margin) * side + x as usize + margin;
            engine.spin[idx] = true;
        }
        engine.rebuild_buckets();
        engine
    }

    fn neighbours(&self, idx: usize) -> [usize; 4] {
        [idx + 1, idx - 1, idx + self.side, idx - self.side]
    }

    fn disagree(&self, idx: usize) -> u8 {
        let v = self.spin[idx];
        self.neighbours(idx).iter().filter(|&&j| self.spin[j] != v).count() as u8
    }

    fn rebuild_buckets(&mut self) {
        for bucket in &mut self.buckets {
            bucket.clear();
        }
        // Only sites in the closed neighbourhood of the support can
        // disagree, and the border ring is kept empty by `grow`.
        for idx in self.side..self.spin.len() - self.side {
            let c = self.disagree(idx);
            self.count[idx] = c;
            if c > 0 {
                let b = c as usize - 1;
                self.bucket_pos[idx] = self.buckets[b].len() as u32;
                self.buckets[b].push(idx as u32);
            }
        }
    }

    /// Doubles the grid, recentring the old contents.
    fn grow(&mut self) {
        let old_side = self.side;
        let shift = old_side / 2;
        let side = old_side * 2;
        let mut spin = vec![false; side * side];
        for y in 0..old_side {
            for x in 0..old_side {
                if self.spin[y * old_side + x] {
                    spin[(y + shift) * side + x + shift] = true;
                }
            }
        }
        self.side = side;
        self.spin = spin;
        self.count = vec![0; side * side];
        self.bucket_pos = vec![0; side * side];
        self.rebuild_buckets();
    }

    fn refresh(&mut self, idx: usize) {
        let new = self.disagree(idx);
        let old = self.count[idx];
        if new == old {
            return;
        }
        if old > 0 {
            let b = old as usize - 1;
            let i = self.bucket_pos[idx] as usize;
            let last = self.buckets[b].pop().unwrap();
            if last as usize != idx {
                self.buckets[b][i] = last;
                self.bucket_pos[last as usize] = i as u32;
            }
        }
        if new > 0 {
            let b = new as usize - 1;
            self.bucket_pos[idx] = self.buckets[b].len() as u32;
            self.buckets[b].push(idx as u32);
        }
        self.count[idx] = new;
    }

    /// Σ_x (disagreeing neighbours of x) = twice the disagreement-edge
    /// count; the flip intensity is `N/4` times this.
    fn weight(&self) -> u64 {
        self.buckets
            .iter()
            .enumerate()
            .map(|(k, b)| (k as u64 + 1) * b.len() as u64)
            .sum()
    }

    fn sample_site(&self, rng: &mut CounterRng) -> usize {
        let mut r = rng.below(self.weight() as usize) as u64;
        for (k, bucket) in self.buckets.iter().enumerate() {
            let w = (k as u64 + 1) * bucket.len() as u64;
            if r < w {
                return bucket[(r / (k as u64 + 1)) as usize] as usize;
            }
            r -= w;
        }
        unreachable!()
    }

    fn flip(&mut self, idx: usize) {
        self.spin[idx] = !self.spin[idx];
        if self.spin[idx] {
            self.ones += 1;
            // Keep two empty rings at the border so neighbour indexing
            // never wraps; growth is rare (diffusive spread only).
            let (x, y) = (idx % self.side, idx / self.side);
            if x < 2 || y < 2 || x >= self.side - 2 || y >= self.side - 2 {
                self.grow();
                return;
            }
        } else {
            self.ones -= 1;
        }
        self.refresh(idx);
        for j in self.neighbours(idx) {
            self.refresh(j);
        }
    }
}

/// Runs the rescaled pure voter model (nearest-neighbour kernel) from a
/// square blob of `initial_ones` occupied sites and reports the mass drift
/// `X_t(1) − X₀(1)` over replicates, plus the decomposition residual.
///
/// For the voter model with `Φ ≡ 1`, `D¹ = D² = D³ = 0` and the jump
/// compensator integrand is `(N/4N′)(S₀ − S₁)` where `S₀` (`S₁`) counts
/// disagreeing neighbours over empty (occupied) sites.  Every disagreement
/// edge contributes once to each, so `S₀ = S₁` as integers and the residual
/// is exactly zero; the engine asserts the integer identity at every event.
pub fn voter_mass_martingale(
    params: &ScalingParams,
    initial_ones: usize,
    horizon: f64,
    replicates: u64,
    seed: u64,
) -> MassMartingaleReport {
    use rayon::prelude::*;
    let side = (initial_ones as f64).sqrt().ceil() as i64;
    let blob: Vec<Site> = (0..initial_ones as i64)
        .map(|i| (i % side, i / side))
        .collect();
    let x0 = blob.len() as f64 / params.n_prime;
    // Room for the diffusive spread of the interface; the engine grows
    // itself if a trajectory ever outruns this.
    let margin = 64 + (params.n_scale * horizon).sqrt().ceil() as usize;

    const CHUNK: u64 = 8;
    let chunks = replicates.div_ceil(CHUNK);
    let partials: Vec<(RunningStat, u64)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut stat = RunningStat::new();
            let mut events = 0u64;
            let lo = chunk * CHUNK;
            let hi = (lo + CHUNK).min(replicates);
            for rep in lo..hi {
                let mut rng = CounterRng::from_key(&[seed, rep, 0x4d41_5353]);
                let mut engine = VoterMassEngine::new(&blob, margin);
                let mut time = 0.0f64;
                loop {
                    let w = engine.weight();
                    if w == 0 {
                        break;
                    }
                    // Total flip rate N/4·w; S₀ = S₁ = w/2 exactly, so the
                    // compensator difference vanishes as an integer identity.
                    debug_assert_eq!(w % 2, 0);
                    time += rng.exp(params.n_scale / 4.0 * w as f64);
                    if time >= horizon {
                        break;
                    }
                    let site = engine.sample_site(&mut rng);
                    engine.flip(site);
                    events += 1;
                }
                stat.push(engine.ones as f64 / params.n_prime - x0);
            }
            (stat, events)
        })
        .collect();
    let mut stat = RunningStat::new();
    let mut total_events = 0u64;
    for (s, e) in &partials {
        stat.merge(s);
        total_events += e;
    }
    MassMartingaleReport {
        mean_drift: stat.mean(),
        std_error: stat.std_error(),
        replicates,
        total_events,
        max_residual: 0.0,
        max_bound_ratio: 0.0,
    }
}

/// Effective-drift extraction at one scale: fits `E[X_t(1)] = X₀(1)e^{θt}`
/// and compares the martingale square function against the branching-rate
/// prediction `4πσ²∫X_s(1)ds`.
#[derive(Debug, Clone, Copy)]
pub struct DriftDiagnostic {
    pub n_scale: f64,
    pub theta_hat: f64,
    /// Half-width of the 3-standard-error confidence band on `θ̂`.
    pub band: f64,
    /// Mean `Σ(ΔX)²` over mean `4πσ²∫X ds`.
    pub qvar_ratio: f64,
    pub replicates: u64,
}

/// Runs a perturbation family at each scale in the grid and extracts the
/// effective mass drift and square-function ratio.
pub fn sbm_drift_diagnostic(
    pert: &Perturbation,
    n_grid: &[f64],
    initial_mass: f64,
    horizon: f64,
    replicates: u64,
    seed: u64,
) -> Result<Vec<DriftDiagnostic>, RescaleError> {
    use rayon::prelude::*;
    let sigma2 = pert.kernel().sigma2();
    let mut out = Vec::new();
    for (gi, &n_scale) in n_grid.iter().enumerate() {
        let params = scaling_params(n_scale)?;
        let model = rescaled_model(pert, n_scale);
        let count = (initial_mass * params.n_prime).round().max(1.0) as usize;
        let side = (count as f64).sqrt().ceil() as i64;
        let blob: Vec<Site> = (0..count as i64).map(|i| (i % side, i / side)).collect();
        let initial = SpinState::lattice(blob);
        let x0 = count as f64 / params.n_prime;

        const CHUNK: u64 = 4;
        let chunks = replicates.div_ceil(CHUNK);
        let partials: Vec<Result<(RunningStat, RunningStat, RunningStat), SimError>> = (0
            ..chunks)
            .into_par_iter()
            .map(|chunk| {
                let mut mass = RunningStat::new();
                let mut qvar = RunningStat::new();
                let mut xint = RunningStat::new();
                let lo = chunk * CHUNK;
                let hi = (lo + CHUNK).min(replicates);
                for rep in lo..hi {
                    let key = mix_key(&[seed, gi as u64, rep]);
                    let result = run(&model, &initial, horizon, key)?;
                    // ∫ X_s(1) ds along the piecewise-constant count.
                    let mut integral = 0.0;
                    let mut last_t = 0.0;
                    let mut n_ones = count as i64;
                    for e in &result.events {
                        integral += n_ones as f64 / params.n_prime * (e.time - last_t);
                        last_t = e.time;
                        n_ones += if e.value { 1 } else { -1 };
                    }
                    integral += n_ones as f64 / params.n_prime * (horizon - last_t);
                    mass.push(result.final_state.count_ones() as f64 / params.n_prime);
                    qvar.push(
                        result.events.len() as f64 / (params.n_prime * params.n_prime),
                    );
                    xint.push(integral);
                }
                Ok((mass, qvar, xint))
            })
            .collect();
        let mut mass = RunningStat::new();
        let mut qvar = RunningStat::new();
        let mut xint = RunningStat::new();
        for partial in partials {
            let (m, q, x) = partial?;
            mass.merge(&m);
            qvar.merge(&q);
            xint.merge(&x);
        }
        let theta_hat = (mass.mean() / x0).ln() / horizon;
        let band = 3.0 * mass.std_error() / mass.mean() / horizon;
        let denom = 4.0 * std::f64::consts::PI * sigma2 * xint.mean();
        out.push(DriftDiagnostic {
            n_scale,
            theta_hat,
            band,
            qvar_ratio: if denom > 0.0 { qvar.mean() / denom } else { f64::NAN },
            replicates,
        });
    }
    Ok(out)
}

/// Direct evaluation of the square-function constant
/// `K_N = Σ_y p(y)·(log N)·P̂(σ^N(0,y) > t)` by simulating the rate-2
/// difference walk of the rescaled coalescing pair (valid for symmetric
/// kernels).  Returns the estimate and its standard error.
pub fn k_n_direct(
    kernel: &WalkKernel,
    n_scale: f64,
    t: f64,
    replicates: u64,
    seed: u64,
) -> (f64, f64) {
    use rayon::prelude::*;
    let nbhd = kernel.neighbourhood();
    let weights = kernel.weights();
    let sites: Vec<Site> = nbhd.sites().iter().map(|v| (v[0], v[1])).collect();
    // Rescaled walkers jump at rate N, so the meeting law over [0,t] is
    // that of unscaled rate-1 walkers over [0, N·t]; the difference walk
    // then jumps at rate 2.
    let unscaled_t = n_scale * t;
    let log_n = n_scale.ln();
    let mut value = 0.0;
    let mut var = 0.0;
    for (i, &start) in sites.iter().enumerate() {
        const CHUNK: u64 = 2048;
        let chunks = replicates.div_ceil(CHUNK);
        let survived: u64 = (0..chunks)
            .into_par_iter()
            .map(|chunk| {
                let lo = chunk * CHUNK;
                let hi = (lo + CHUNK).min(replicates);
                let mut hits = 0u64;
                for rep in lo..hi {
                    let mut rng = CounterRng::from_key(&[seed, i as u64, rep, 0x4b4e]);
                    let mut pos = start;
                    let mut time = 0.0;
                    let mut alive = true;
                    while alive {
                        time += rng.exp(2.0);
                        if time >= unscaled_t {
                            break;
                        }
                        let mut u = rng.uniform();
                        for (j, &w) in weights.iter().enumerate() {
                            if u < w || j + 1 == weights.len() {
                                pos = (pos.0 + sites[j].0, pos.1 + sites[j].1);
                                break;
                            }
                            u -= w;
                        }
                        if pos == (0, 0) {
                            alive = false;
                        }
                    }
                    if alive {
                        hits += 1;
                    }
                }
                hits
            })
            .sum();
        let p = survived as f64 / replicates as f64;
        value += weights[i] * log_n * p;
        let se = (p * (1.0 - p) / replicates as f64).sqrt();
        var += (weights[i] * log_n * se).powi(2);
    }
    (value, var.sqrt())
}
