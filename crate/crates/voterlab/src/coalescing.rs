//! Coalescing random-walk systems and Monte Carlo estimation of the drift
//! constants, plus voter-model duality checks.
//!
//! Walkers start at labelled sites and perform independent rate-1 random
//! walks with the given step kernel; two walkers that occupy the same site
//! merge irreversibly into one cluster.  Everything of interest here — the
//! `K_n` scaling limits, the `Θ±`/κ tables, the transient-dimension drift —
//! is a functional of the label partition induced by the clusters at a
//! fixed horizon.
//!
//! For efficiency the engine steps exactly while clusters are close and
//! advances each cluster by a Poisson-distributed number of kernel steps
//! (exact displacement law) while every pairwise distance exceeds a safety
//! radius of `4·(max step)·√batch`.  A batch could in principle hide a
//! fleeting meeting; the large-deviation tail of such an event at the
//! chosen radius is far below the Monte Carlo noise floor, and the fast
//! path is never taken when any two clusters are within the radius.

use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;

use crate::drift::{PartitionCensus, SubsetFunction, ThetaTables};
use crate::kernels::{LatticeVector, WalkKernel};
use crate::rng::{mix_key, CounterRng};
use crate::simulator::{oracle_distribution, run, SimError, SpinState};
use crate::stats::fit_affine;

/// A Monte Carlo estimate of one drift constant.
#[derive(Debug, Clone, Copy)]
pub struct DriftEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: u64,
    pub horizon: f64,
    /// Exponent of the `(log t)^k` normalizer baked into `value`.
    pub log_power: u32,
}

/// The label partition at the horizon together with the two timing flags it
/// determines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSample {
    /// Cells as bitmasks over the flattened label order.
    pub partition: Vec<u32>,
    /// No two walkers from different blocks have ever met (`σ > t`).
    pub sigma_exceeded: bool,
    /// Every block had internally coalesced by the horizon (`τ < t`).
    pub tau_before: bool,
}

struct Cluster {
    pos: [i64; 3],
    labels: u32,
}

/// A system of coalescing rate-1 random walks on `Z^d`.
struct Walks {
    dim: usize,
    steps: Vec<[i64; 3]>,
    weights: Vec<f64>,
    max_step: f64,
    clusters: Vec<Cluster>,
    time: f64,
}

impl Walks {
    fn new(kernel: &WalkKernel, sites: &[LatticeVector]) -> Walks {
        let nbhd = kernel.neighbourhood();
        let dim = nbhd.dim();
        let pad = |v: &LatticeVector| {
            let mut p = [0i64; 3];
            for (slot, &c) in p.iter_mut().zip(v.iter()) {
                *slot = c;
            }
            p
        };
        let clusters = sites
            .iter()
            .enumerate()
            .map(|(i, s)| Cluster { pos: pad(s), labels: 1 << i })
            .collect();
        Walks {
            dim,
            steps: nbhd.sites().iter().map(pad).collect(),
            weights: kernel.weights().to_vec(),
            max_step: nbhd.max_step(),
            clusters,
            time: 0.0,
        }
    }

    fn sample_step(&self, rng: &mut CounterRng) -> [i64; 3] {
        let mut u = rng.uniform();
        for (i, &w) in self.weights.iter().enumerate() {
            if u < w || i + 1 == self.weights.len() {
                return self.steps[i];
            }
            u -= w;
        }
        unreachable!()
    }

    /// Smallest squared Euclidean distance between two clusters.
    fn min_dist_sq(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.clusters.len() {
            for j in (i + 1)..self.clusters.len() {
                let mut d = 0f64;
                for k in 0..self.dim {
                    let delta = (self.clusters[i].pos[k] - self.clusters[j].pos[k]) as f64;
                    d += delta * delta;
                }
                best = best.min(d);
            }
        }
        best
    }

    /// Merges clusters that share a site.
    fn merge_collisions(&mut self) {
        let mut i = 0;
        while i < self.clusters.len() {
            let mut j = i + 1;
            while j < self.clusters.len() {
                if self.clusters[i].pos == self.clusters[j].pos {
                    let absorbed = self.clusters.swap_remove(j);
                    self.clusters[i].labels |= absorbed.labels;
                } else {
                    j += 1;
                }
            }
            i += 1;
        }
    }

    /// Displacement of one cluster over a window of length `tau`: a
    /// Poisson(`tau`) number of kernel steps, realised through binomial
    /// splits of the step counts (exact distribution, O(kernel) work).
    fn batched_displacement(&self, tau: f64, rng: &mut CounterRng) -> [i64; 3] {
        let n = Poisson::new(tau).expect("positive batch length").sample(rng) as u64;
        let mut remaining = n;
        let mut mass = 1.0f64;
        let mut disp = [0i64; 3];
        for (i, &w) in self.weights.iter().enumerate() {
            if remaining == 0 {
                break;
            }
            let count = if i + 1 == self.weights.len() {
                remaining
            } else {
                let p = (w / mass).clamp(0.0, 1.0);
                Binomial::new(remaining, p).expect("valid binomial").sample(rng)
            };
            for k in 0..self.dim {
                disp[k] += count as i64 * self.steps[i][k];
            }
            remaining -= count;
            mass -= w;
        }
        disp
    }

    /// Runs the system to the horizon.
    fn advance_to(&mut self, horizon: f64, rng: &mut CounterRng) {
        while self.time < horizon {
            if self.clusters.len() == 1 {
                // A lone cluster can never merge again and only its label
                // content matters, so its walk need not be realised.
                self.time = horizon;
                return;
            }
            let d2 = self.min_dist_sq();
            // Batch window chosen so the safety radius 4·max_step·√batch is
            // half the current minimum separation.
            let batch = d2 / (64.0 * self.max_step * self.max_step);
            if batch >= 1.0 {
                let tau = batch.min(horizon - self.time);
                for c in 0..self.clusters.len() {
                    let disp = self.batched_displacement(tau, rng);
                    for k in 0..self.dim {
                        self.clusters[c].pos[k] += disp[k];
                    }
                }
                self.time += tau;
                self.merge_collisions();
            } else {
                let k = self.clusters.len();
                self.time += rng.exp(k as f64);
                if self.time >= horizon {
                    self.time = horizon;
                    return;
                }
                let c = rng.below(k);
                let step = self.sample_step(rng);
                for i in 0..self.dim {
                    self.clusters[c].pos[i] += step[i];
                }
                let moved = self.clusters[c].pos;
                if let Some(j) = (0..k).find(|&j| j != c && self.clusters[j].pos == moved) {
                    let absorbed = self.clusters.swap_remove(j);
                    let target = if c == k - 1 { j } else { c };
                    self.clusters[target].labels |= absorbed.labels;
                }
            }
        }
    }

    fn partition(&self) -> Vec<u32> {
        self.clusters.iter().map(|c| c.labels).collect()
    }
}

/// Simulates coalescing walks started from the given disjoint blocks of
/// sites up to time `t` and reports the label partition with its σ/τ flags.
pub fn simulate_partition(
    blocks: &[Vec<LatticeVector>],
    kernel: &WalkKernel,
    t: f64,
    seed: u64,
) -> PartitionSample {
    let sites: Vec<LatticeVector> = blocks.iter().flatten().cloned().collect();
    assert!(sites.len() <= 32, "label masks are 32-bit");
    let mut block_mask = vec![0u32; blocks.len()];
    let mut label = 0;
    for (b, block) in blocks.iter().enumerate() {
        for _ in block {
            block_mask[b] |= 1 << label;
            label += 1;
        }
    }
    let mut rng = CounterRng::from_key(&[seed, 0x434f_414c_4553_4345]);
    let mut walks = Walks::new(kernel, &sites);
    walks.advance_to(t, &mut rng);
    let partition = walks.partition();
    let sigma_exceeded = partition
        .iter()
        .all(|&cell| block_mask.iter().filter(|&&m| m & cell != 0).count() <= 1);
    let tau_before = block_mask
        .iter()
        .all(|&m| partition.iter().any(|&cell| m & !cell == 0));
    PartitionSample { partition, sigma_exceeded, tau_before }
}

/// Per-horizon estimates of the `K_n` functional and its extrapolated
/// limit.
#[derive(Debug, Clone)]
pub struct KnReport {
    /// `(t, (log t)^{C(n,2)}·P̂(σ > t, τ < t))` per grid point.
    pub per_t: Vec<(f64, DriftEstimate)>,
    /// Intercept of the least-squares fit `K + c·(log t)^{−1/2}`.
    pub fitted_k: f64,
    pub fitted_c: f64,
    /// Root-mean-square residual of the fit.
    pub fit_residual: f64,
}

fn chunked_counts(
    replicates: u64,
    seed: u64,
    per_rep: impl Fn(u64) -> bool + Sync,
) -> u64 {
    const CHUNK: u64 = 1024;
    let chunks = replicates.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * CHUNK;
            let hi = (lo + CHUNK).min(replicates);
            (lo..hi).filter(|&rep| per_rep(mix_key(&[seed, rep]))).count() as u64
        })
        .sum()
}

/// Estimates `K_n(A₁,…,A_n)` on a geometric horizon grid and extrapolates
/// the limit with the model `K + c·(log t)^{−1/2}`.
pub fn estimate_kn(
    blocks: &[Vec<LatticeVector>],
    kernel: &WalkKernel,
    t_grid: &[f64],
    replicates: u64,
    seed: u64,
) -> KnReport {
    assert!(replicates >= 2, "need at least two replicates");
    let n = blocks.len();
    let log_power = (n * (n - 1) / 2) as u32;
    let mut per_t = Vec::new();
    for (ti, &t) in t_grid.iter().enumerate() {
        let hits = chunked_counts(replicates, mix_key(&[seed, ti as u64]), |rep_key| {
            let sample = simulate_partition(blocks, kernel, t, rep_key);
            sample.sigma_exceeded && sample.tau_before
        });
        let p = hits as f64 / replicates as f64;
        let scale = t.ln().powi(log_power as i32);
        per_t.push((
            t,
            DriftEstimate {
                value: scale * p,
                std_error: scale * (p * (1.0 - p) / replicates as f64).sqrt(),
                samples: replicates,
                horizon: t,
                log_power,
            },
        ));
    }
    let points: Vec<(f64, f64)> = per_t
        .iter()
        .map(|&(t, est)| (t.ln().powf(-0.5), est.value))
        .collect();
    let (slope, intercept) = fit_affine(&points);
    let residual = (points
        .iter()
        .map(|&(x, y)| (y - slope * x - intercept).powi(2))
        .sum::<f64>()
        / points.len() as f64)
        .sqrt();
    KnReport { per_t, fitted_k: intercept, fitted_c: slope, fit_residual: residual }
}

/// Runs all `|N̄|` singleton walkers (ring sites plus the origin) to the
/// horizon and accumulates the three-cluster and two-cluster partition
/// statistics that carry the two-dimensional drift constants.
///
/// Label conventions match the drift module: bit `i` is the i-th
/// neighbourhood site in canonical order, bit `n` is the origin.
pub fn estimate_theta_tables(
    kernel: &WalkKernel,
    t: f64,
    replicates: u64,
    seed: u64,
) -> ThetaTables {
    let nbhd = kernel.neighbourhood();
    let n = nbhd.len();
    let mut sites: Vec<LatticeVector> = nbhd.sites().to_vec();
    sites.push(vec![0; nbhd.dim()]);

    const CHUNK: u64 = 1024;
    let chunks = replicates.div_ceil(CHUNK);
    let partials: Vec<ThetaTables> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut tables = ThetaTables::new(n, t);
            let lo = chunk * CHUNK;
            let hi = (lo + CHUNK).min(replicates);
            for rep in lo..hi {
                let mut rng = CounterRng::from_key(&[seed, rep, 0x5448_4554_41]);
                let mut walks = Walks::new(kernel, &sites);
                walks.advance_to(t, &mut rng);
                tables.record(&walks.partition());
            }
            tables
        })
        .collect();
    let mut tables = ThetaTables::new(n, t);
    for partial in &partials {
        tables.merge(partial);
    }
    tables
}

/// Weighted drift constants `Θ̂₂` and `Θ̂₃` for a family, from one shared
/// table: `Θ̂₃ = Σ r^s(A)(Θ̂⁺ − Θ̂⁻)`, `Θ̂₂ = Σ r^a(A)·K̂₂(A, N̄∖A)`, with
/// delta-method standard errors over the shared replicates.
pub fn estimate_theta23(
    r_s: &SubsetFunction,
    r_a: &SubsetFunction,
    tables: &ThetaTables,
) -> (DriftEstimate, DriftEstimate) {
    let (v3, se3) = tables.weighted_theta3(r_s);
    let (v2, se2) = tables.weighted_k2(r_a);
    let mk = |value, std_error, log_power| DriftEstimate {
        value,
        std_error,
        samples: tables.replicates(),
        horizon: tables.horizon(),
        log_power,
    };
    (mk(v2, se2, 1), mk(v3, se3, 3))
}

/// Truncated reaction-derivative estimate for transient dimensions: the
/// partition census of all `|N̄|` walkers at `T` and `2T` and the pathwise
/// functional evaluated on both.
#[derive(Debug, Clone)]
pub struct FPrimeReport {
    pub census: PartitionCensus,
    pub census_long: PartitionCensus,
    pub estimate: DriftEstimate,
    pub estimate_long: DriftEstimate,
    /// Difference between the two horizons — a truncation diagnostic.
    pub truncation_gap: f64,
}

/// Estimates `f′(0) = f₁′(0) − f₀′(0)` for a symmetric weight profile in a
/// transient dimension by truncating the terminal partition at horizons `T`
/// and `2T` along one trajectory per replicate.
pub fn estimate_f_prime_0(
    r: &SubsetFunction,
    kernel: &WalkKernel,
    horizon: f64,
    replicates: u64,
    seed: u64,
) -> FPrimeReport {
    let nbhd = kernel.neighbourhood();
    let n = nbhd.len();
    assert_eq!(r.n(), n, "weight profile sized for this neighbourhood");
    let mut sites: Vec<LatticeVector> = nbhd.sites().to_vec();
    sites.push(vec![0; nbhd.dim()]);

    const CHUNK: u64 = 1024;
    let chunks = replicates.div_ceil(CHUNK);
    let partials: Vec<(PartitionCensus, PartitionCensus)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut census = PartitionCensus::new(n + 1, horizon);
            let mut census_long = PartitionCensus::new(n + 1, 2.0 * horizon);
            let lo = chunk * CHUNK;
            let hi = (lo + CHUNK).min(replicates);
            for rep in lo..hi {
                let mut rng = CounterRng::from_key(&[seed, rep, 0x4650_5249_4d45]);
                let mut walks = Walks::new(kernel, &sites);
                walks.advance_to(horizon, &mut rng);
                census.record(&walks.partition());
                walks.advance_to(2.0 * horizon, &mut rng);
                census_long.record(&walks.partition());
            }
            (census, census_long)
        })
        .collect();
    let mut census = PartitionCensus::new(n + 1, horizon);
    let mut census_long = PartitionCensus::new(n + 1, 2.0 * horizon);
    for (a, b) in &partials {
        census.merge(a);
        census_long.merge(b);
    }
    let (v, se) = crate::drift::f_prime_estimate(r, &census).expect("census sized for r");
    let (vl, sel) = crate::drift::f_prime_estimate(r, &census_long).expect("census sized for r");
    let mk = |value, std_error, horizon| DriftEstimate {
        value,
        std_error,
        samples: replicates,
        horizon,
        log_power: 0,
    };
    FPrimeReport {
        census,
        census_long,
        estimate: mk(v, se, horizon),
        estimate_long: mk(vl, sel, 2.0 * horizon),
        truncation_gap: vl - v,
    }
}

/// Escape-probability bracket for a transient walk: `P̂(no return to the
/// origin by T)` at `T` and `2T`; both upper-bound the escape probability
/// and their gap brackets the truncation error.
pub fn estimate_escape_probability(
    kernel: &WalkKernel,
    horizon: f64,
    replicates: u64,
    seed: u64,
) -> (DriftEstimate, DriftEstimate) {
    let short = chunked_counts(replicates, mix_key(&[seed, 1]), |rep_key| {
        no_return_by(kernel, horizon, rep_key)
    });
    let long = chunked_counts(replicates, mix_key(&[seed, 2]), |rep_key| {
        no_return_by(kernel, 2.0 * horizon, rep_key)
    });
    let mk = |hits: u64, horizon: f64| {
        let p = hits as f64 / replicates as f64;
        DriftEstimate {
            value: p,
            std_error: (p * (1.0 - p) / replicates as f64).sqrt(),
            samples: replicates,
            horizon,
            log_power: 0,
        }
    };
    (mk(short, horizon), mk(long, 2.0 * horizon))
}

fn no_return_by(kernel: &WalkKernel, horizon: f64, seed: u64) -> bool {
    let mut rng = CounterRng::from_key(&[seed, 0x4553_4341_5045]);
    let dim = kernel.neighbourhood().dim();
    let origin = vec![vec![0i64; dim]];
    let walks = Walks::new(kernel, &origin);
    // Discrete steps at rate 1; the walk returns iff the embedded chain
    // does, so step the embedded chain for the Poisson number of jumps.
    let n = Poisson::new(horizon).expect("positive horizon").sample(&mut rng) as u64;
    let mut pos = [0i64; 3];
    for _ in 0..n {
        let step = walks.sample_step(&mut rng);
        for k in 0..dim {
            pos[k] += step[k];
        }
        if pos == [0; 3] {
            return false;
        }
    }
    true
}

/// Outcome of a duality comparison between a voter-model expectation and
/// its coalescing-dual evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DualityReport {
    pub forward: f64,
    pub dual: f64,
    pub discrepancy: f64,
    pub tolerance: f64,
}

/// Exact duality check on a torus with at most nine sites: the forward side
/// is the uniformized spin-system distribution, the dual side an exact
/// uniformized CTMC of coalescing walkers started from `a_sites ∪ b_sites`.
/// Verifies
/// `E[Π_{a}ξ_t(a)·Π_{b}(1−ξ_t(b))] = Ê[Π ξ₀(B^a_t)·Π(1−ξ₀(B^b_t))]`.
pub fn duality_check_exact(
    kernel: &WalkKernel,
    rate_scale: f64,
    l: i64,
    xi0: &SpinState,
    a_sites: &[(i64, i64)],
    b_sites: &[(i64, i64)],
    t: f64,
) -> Result<DualityReport, SimError> {
    let sites = (l * l) as usize;
    if sites > 9 {
        return Err(SimError::StateSpaceTooLarge);
    }
    let model = crate::rates::RateModel::new(crate::rates::Family::Voter, kernel.clone())
        .scaled(rate_scale);
    let forward_dist = oracle_distribution(&model, l, xi0, t)?;
    let forward: f64 = forward_dist
        .iter()
        .enumerate()
        .map(|(s, &p)| {
            let mut v = p;
            for &(x, y) in a_sites {
                if s >> torus_bit(l, x, y) & 1 == 0 {
                    v = 0.0;
                }
            }
            for &(x, y) in b_sites {
                if s >> torus_bit(l, x, y) & 1 == 1 {
                    v = 0.0;
                }
            }
            v
        })
        .sum();

    let dual = dual_walkers_exact(kernel, rate_scale, l, xi0, a_sites, b_sites, t)?;
    Ok(DualityReport {
        forward,
        dual,
        discrepancy: (forward - dual).abs(),
        tolerance: 1e-9,
    })
}

fn torus_bit(l: i64, x: i64, y: i64) -> usize {
    (y.rem_euclid(l) * l + x.rem_euclid(l)) as usize
}

/// Exact distribution of coalescing torus walkers by uniformization on the
/// `(L²)^k` position space; walkers sharing a site move as one.
fn dual_walkers_exact(
    kernel: &WalkKernel,
    rate_scale: f64,
    l: i64,
    xi0: &SpinState,
    a_sites: &[(i64, i64)],
    b_sites: &[(i64, i64)],
    t: f64,
) -> Result<f64, SimError> {
    let sites = (l * l) as usize;
    let k = a_sites.len() + b_sites.len();
    assert!(k >= 1 && sites.pow(k as u32) <= 1 << 20, "dual state space too large");
    let states = sites.pow(k as u32);
    let decode = |mut s: usize| -> Vec<usize> {
        let mut pos = Vec::with_capacity(k);
        for _ in 0..k {
            pos.push(s % sites);
            s /= sites;
        }
        pos
    };
    // Per torus site, where each kernel step lands.
    let mut targets = vec![vec![0usize; kernel.neighbourhood().len()]; sites];
    for x in 0..l {
        for y in 0..l {
            for (i, o) in kernel.neighbourhood().sites().iter().enumerate() {
                targets[torus_bit(l, x, y)][i] = torus_bit(l, x + o[0], y + o[1]);
            }
        }
    }
    let weights = kernel.weights();

    let lambda = rate_scale * k as f64;
    let mut p = vec![0.0f64; states];
    let init: Vec<usize> = a_sites
        .iter()
        .chain(b_sites)
        .map(|&(x, y)| torus_bit(l, x, y))
        .collect();
    let mut code = 0usize;
    for &s in init.iter().rev() {
        code = code * sites + s;
    }
    p[code] = 1.0;

    let mut remaining = t;
    while remaining > 0.0 {
        let dt = remaining.min(600.0 / lambda);
        remaining -= dt;
        let mu = lambda * dt;
        let mut dist = vec![0.0f64; states];
        let mut weight = (-mu).exp();
        let mut cumulative = 0.0;
        let mut step = 0u64;
        loop {
            for (d, &v) in dist.iter_mut().zip(&p) {
                *d += weight * v;
            }
            cumulative += weight;
            if cumulative >= 1.0 - 1e-13 && step as f64 >= mu {
                break;
            }
            let mut next = vec![0.0f64; states];
            for (s, &mass) in p.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let pos = decode(s);
                // Distinct occupied sites: each group jumps together.
                let mut groups: Vec<usize> = pos.clone();
                groups.sort_unstable();
                groups.dedup();
                let mut out = 0.0;
                for &site in &groups {
                    for (i, &w) in weights.iter().enumerate() {
                        let target = targets[site][i];
                        // Move every walker on `site` to `target`.
                        let mut ns = 0usize;
                        for &pj in pos.iter().rev() {
                            let moved = if pj == site { target } else { pj };
                            ns = ns * sites + moved;
                        }
                        let rate = rate_scale * w / lambda;
                        next[ns] += mass * rate;
                        out += rate;
                    }
                }
                next[s] += mass * (1.0 - out);
            }
            p = next;
            step += 1;
            weight *= mu / step as f64;
        }
        p = dist;
    }

    let na = a_sites.len();
    let value = p
        .iter()
        .enumerate()
        .map(|(s, &mass)| {
            if mass == 0.0 {
                return 0.0;
            }
            let pos = decode(s);
            let mut v = mass;
            for (j, &site) in pos.iter().enumerate() {
                let (sx, sy) = ((site as i64) % l, (site as i64) / l);
                let occupied = xi0.get((sx, sy));
                if j < na {
                    if !occupied {
                        v = 0.0;
                    }
                } else if occupied {
                    v = 0.0;
                }
            }
            v
        })
        .sum();
    Ok(value)
}

/// Monte Carlo duality check on a torus: forward side by spin simulation,
/// dual side by simulated coalescing walkers, both at `replicates` samples;
/// the tolerance is three combined standard errors.
pub fn duality_check_monte_carlo(
    kernel: &WalkKernel,
    rate_scale: f64,
    l: i64,
    xi0: &SpinState,
    a_sites: &[(i64, i64)],
    b_sites: &[(i64, i64)],
    t: f64,
    replicates: u64,
    seed: u64,
) -> Result<DualityReport, SimError> {
    let model = crate::rates::RateModel::new(crate::rates::Family::Voter, kernel.clone())
        .scaled(rate_scale);
    let forward_hits = chunked_counts(replicates, mix_key(&[seed, 11]), |rep_key| {
        let result = run(&model, xi0, t, rep_key).expect("torus run");
        a_sites.iter().all(|&s| result.final_state.get(s))
            && b_sites.iter().all(|&s| !result.final_state.get(s))
    });
    let dual_hits = chunked_counts(replicates, mix_key(&[seed, 12]), |rep_key| {
        dual_walkers_sample(kernel, rate_scale, l, xi0, a_sites, b_sites, t, rep_key)
    });
    let pf = forward_hits as f64 / replicates as f64;
    let pd = dual_hits as f64 / replicates as f64;
    let se = ((pf * (1.0 - pf) + pd * (1.0 - pd)) / replicates as f64).sqrt();
    Ok(DualityReport {
        forward: pf,
        dual: pd,
        discrepancy: (pf - pd).abs(),
        tolerance: 3.0 * se.max(1e-12),
    })
}

/// One sample of the dual product: coalescing torus walkers run backwards
/// for time `t`, then evaluated against the initial configuration.
#[allow(clippy::too_many_arguments)]
fn dual_walkers_sample(
    kernel: &WalkKernel,
    rate_scale: f64,
    l: i64,
    xi0: &SpinState,
    a_sites: &[(i64, i64)],
    b_sites: &[(i64, i64)],
    t: f64,
    seed: u64,
) -> bool {
    let mut rng = CounterRng::from_key(&[seed, 0x4455_414c]);
    // Positions per walker; walkers on one site always move together.
    let mut pos: Vec<(i64, i64)> = a_sites
        .iter()
        .chain(b_sites)
        .map(|&(x, y)| (x.rem_euclid(l), y.rem_euclid(l)))
        .collect();
    let nbhd = kernel.neighbourhood();
    let weights = kernel.weights();
    let mut time = 0.0;
    loop {
        let mut groups: Vec<(i64, i64)> = pos.clone();
        groups.sort_unstable();
        groups.dedup();
        time += rng.exp(rate_scale * groups.len() as f64);
        if time >= t {
            break;
        }
        let site = groups[rng.below(groups.len())];
        let mut u = rng.uniform();
        let mut step = (0i64, 0i64);
        for (i, &w) in weights.iter().enumerate() {
            if u < w || i + 1 == weights.len() {
                step = (nbhd.sites()[i][0], nbhd.sites()[i][1]);
                break;
            }
            u -= w;
        }
        let target = ((site.0 + step.0).rem_euclid(l), (site.1 + step.1).rem_euclid(l));
        for p in pos.iter_mut() {
            if *p == site {
                *p = target;
            }
        }
    }
    let na = a_sites.len();
    pos.iter().enumerate().all(|(j, &p)| {
        let occupied = xi0.get(p);
        if j < na {
            occupied
        } else {
            !occupied
        }
    })
}
