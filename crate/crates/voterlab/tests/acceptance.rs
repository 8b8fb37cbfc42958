//! Release acceptance suite.
//!
//! One test per gate, each ending in a single `PASS` line (visible with
//! `--nocapture`).  Heavy Monte Carlo gates share one replicate pool where
//! the checks are defined on shared samples.

use std::sync::OnceLock;

use num::bigint::BigInt;
use num::rational::BigRational;

use voterlab::cancellative::{
    build_m, golden, invert_m, rep_from_alpha, reconstruct_rates, AlphaForms,
};
use voterlab::coalescing::{
    duality_check_exact, estimate_f_prime_0, estimate_kn, estimate_theta_tables,
};
use voterlab::drift::{exhaustive_detpi, partitions, SubsetFunction, ThetaTables};
use voterlab::kernels::{kernel_uniform, Neighbourhood, WalkKernel};
use voterlab::rates::{r_ell, subadditivity_check, Family, Perturbation, PerturbationKind, RateModel};
use voterlab::rescale::{
    decompose_rescaled_rates, martingale_decomposition, scaling_params, voter_mass_martingale,
    TestFunction,
};
use voterlab::rng::{mix_key, CounterRng};
use voterlab::simulator::{
    biased_voter_model, rescaled_model, run, run_coupled, ComponentSpec, CoupledSpec, KillSpec,
    Site, SpinState,
};

fn nn2() -> WalkKernel {
    kernel_uniform(&Neighbourhood::nearest_neighbour(2))
}

fn nn3() -> WalkKernel {
    kernel_uniform(&Neighbourhood::nearest_neighbour(3))
}

fn pass(id: u32, what: &str) {
    println!("acceptance {id:02}: PASS — {what}");
}

/// Shared 10⁶-replicate coalescing pool at t = 10⁵ (NN, d = 2), used by the
/// partition-identity and drift-positivity gates so the identities are
/// checked on literally the same samples as the positivity claim.
fn shared_theta_tables() -> &'static ThetaTables {
    static TABLES: OnceLock<ThetaTables> = OnceLock::new();
    TABLES.get_or_init(|| estimate_theta_tables(&nn2(), 1e5, 1_000_000, 0x5448_4554_4131))
}

// ---------------------------------------------------------------------------
// 1. Frozen reference suite for the ring of size 8.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_ring8_reference_suite() {
    let m = build_m(8);
    for k in 1..=8 {
        for j in 1..=8 {
            assert_eq!(m.entry_i64(k, j), golden::M8[k - 1][j - 1], "M({k},{j})");
        }
    }
    let inv = invert_m(&m).unwrap();
    for i in 1..=8 {
        for j in 1..=8 {
            let (num, den) = golden::MINV8[i - 1][j - 1];
            let want = BigRational::new(BigInt::from(num), BigInt::from(den));
            assert_eq!(inv.entry(i, j), &want, "M⁻¹ entry ({i},{j})");
        }
    }

    // α_ℓ'(1) for ℓ = 2..8: the two closed-form representations agree and are
    // strictly negative.
    let log_sum = golden::alpha_prime8_log_sum();
    let single = golden::alpha_prime8_single_log();
    for (i, (a, b)) in log_sum.iter().zip(&single).enumerate() {
        assert!((a - b).abs() <= 1e-12, "ℓ = {}: {a} vs {b}", i + 2);
        assert!(*a < 0.0, "ℓ = {}: α_ℓ'(1) = {a} must be negative", i + 2);
    }

    let forms = AlphaForms::new(8);
    let at_one = forms.eval_qvoter(1.0);
    for (ell, &v) in at_one.iter().enumerate().skip(1) {
        assert!(v.abs() <= 1e-12, "α_{}(1) = {v}", ell + 1);
    }
    for i in 0..=1000 {
        let q = i as f64 / 1000.0;
        let a1 = forms.eval_qvoter(q)[0];
        assert!(a1 >= 1.0 / 128.0, "α₁({q}) = {a1} < 2⁻⁷");
    }
    pass(1, "n = 8 matrix, inverse, derivative forms, and α₁ floor");
}

// ---------------------------------------------------------------------------
// 2. Frozen reference suite for the ring of size 4.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_ring4_closed_forms() {
    let m = build_m(4);
    for k in 1..=4 {
        for j in 1..=4 {
            assert_eq!(m.entry_i64(k, j), golden::M4[k - 1][j - 1], "M({k},{j})");
        }
    }
    let inv = invert_m(&m).unwrap();
    for i in 1..=4 {
        for j in 1..=4 {
            let (num, den) = golden::MINV4[i - 1][j - 1];
            let want = BigRational::new(BigInt::from(num), BigInt::from(den));
            assert_eq!(inv.entry(i, j), &want, "M⁻¹ entry ({i},{j})");
        }
    }

    let forms = AlphaForms::new(4);
    for i in 0..=1000 {
        let q = i as f64 / 1000.0;
        let direct = forms.eval_qvoter(q);
        let closed = golden::alpha_n4(q);
        for (ell, (d, c)) in direct.iter().zip(&closed).enumerate() {
            assert!((d - c).abs() <= 1e-13, "α_{}({q}): {d} vs {c}", ell + 1);
        }
        if i < 1000 {
            assert!(direct.iter().all(|&v| v > 0.0), "positivity at q = {q}");
        } else {
            assert!(direct.iter().all(|&v| v >= 0.0), "nonnegativity at q = 1");
        }
    }
    pass(2, "n = 4 matrix, inverse, closed forms, and positivity on [0,1]");
}

// ---------------------------------------------------------------------------
// 3. Round trip through the dual representation.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_representation_round_trip() {
    for n in 2..=8usize {
        let m = build_m(n);
        let mut rng = CounterRng::from_key(&[0x524f_554e ^ n as u64, 3]);
        for _ in 0..200 {
            let alpha: Vec<f64> = (0..n)
                .map(|_| if rng.uniform() < 0.15 { 0.0 } else { 2.0 * rng.uniform() })
                .collect();
            if alpha.iter().all(|&a| a == 0.0) {
                continue;
            }
            let rep = rep_from_alpha(&alpha).unwrap();
            // `reconstruct_rates` re-derives the rate vector window by
            // window and errors out unless every window agrees exactly.
            let a = reconstruct_rates(&rep).unwrap();
            for j in 1..=n {
                let expected: f64 = (1..=n)
                    .map(|ell| alpha[ell - 1] * m.entry_i64(ell, j) as f64)
                    .sum();
                assert_eq!(a[j], expected, "n = {n}, j = {j}");
            }
        }
    }
    pass(3, "rates rebuilt from (k₀, β₀) equal αᵀM exactly, n = 2..8 × 200 draws");
}

// ---------------------------------------------------------------------------
// 4. Duality on the 3×3 torus.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_duality_forward_vs_dual() {
    let kernel = nn2();
    let mut rng = CounterRng::from_key(&[0x4455_414c, 4]);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let occupied: Vec<Site> = (0..9)
            .filter(|_| rng.uniform() < 0.5)
            .map(|i| (i % 3, i / 3))
            .collect();
        let xi0 = SpinState::torus(3, occupied);
        // Disjoint nonempty probe sets A and B of size 1–2 each.
        let mut sites: Vec<Site> = (0..9).map(|i| (i % 3, i / 3)).collect();
        for i in (1..sites.len()).rev() {
            sites.swap(i, rng.below(i + 1));
        }
        let na = 1 + rng.below(2);
        let nb = 1 + rng.below(2);
        let a: Vec<Site> = sites[..na].to_vec();
        let b: Vec<Site> = sites[na..na + nb].to_vec();
        let t = 2.0 * rng.uniform_pos();
        let report = duality_check_exact(&kernel, 1.0, 3, &xi0, &a, &b, t).unwrap();
        assert!(
            report.discrepancy <= 1e-9,
            "case {case}: forward {} vs dual {}",
            report.forward,
            report.dual
        );
        worst = worst.max(report.discrepancy);
    }
    pass(4, &format!("50 random duality cases, worst discrepancy {worst:.2e}"));
}

// ---------------------------------------------------------------------------
// 5. Pathwise coupling invariants.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_coupling_invariants() {
    let n_scale = 1e4;
    let pert = Perturbation::new(PerturbationKind::QVoter, nn2());
    let lower = rescaled_model(&pert, n_scale);
    let upper = biased_voter_model(&pert, n_scale).unwrap();
    let blob: Vec<Site> = (-1..=1).flat_map(|x| (-1..=1).map(move |y| (x, y))).collect();

    // q-voter vs its 1-biased voter bound: orderings asserted after every
    // event, so an Ok result certifies zero violations.
    let mut events_biased = 0usize;
    for seed in 0..100u64 {
        let spec = CoupledSpec {
            components: vec![ComponentSpec::plain(lower.clone()), ComponentSpec::plain(upper.clone())],
            initial: SpinState::lattice(blob.clone()),
            orderings: vec![(0, 1)],
            check_orderings: true,
            active_cap: None,
        };
        let result = run_coupled(&spec, 1e-3, mix_key(&[5, seed])).unwrap();
        for site in result.final_states[0].ones() {
            assert!(result.final_states[1].get(site), "final ordering at {site:?}");
        }
        events_biased += result.events.len();
    }
    assert!(events_biased >= 10_000, "only {events_biased} events in the biased coupling");

    // Killed vs unkilled copy of the same rescaled model.
    let mut events_killed = 0usize;
    for seed in 0..100u64 {
        let spec = CoupledSpec {
            components: vec![
                ComponentSpec { model: lower.clone(), kill: Some(KillSpec { half_width: 3 }), initial: None },
                ComponentSpec::plain(lower.clone()),
            ],
            initial: SpinState::lattice((-2..=2).flat_map(|x| (-2..=2).map(move |y| (x, y)))),
            orderings: vec![(0, 1)],
            check_orderings: true,
            active_cap: None,
        };
        let result = run_coupled(&spec, 1e-3, mix_key(&[55, seed])).unwrap();
        for site in result.final_states[0].ones() {
            assert!(result.final_states[1].get(site), "killed ≤ unkilled at {site:?}");
        }
        events_killed += result.events.len();
    }
    assert!(events_killed >= 10_000, "only {events_killed} events in the killed coupling");
    pass(
        5,
        &format!(
            "orderings held at all {events_biased} + {events_killed} events over 2 × 100 runs"
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Pathwise partition identities on shared samples.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_partition_identities_exact() {
    let tables = shared_theta_tables();
    assert_eq!(tables.replicates(), 1_000_000);
    assert_eq!(tables.horizon(), 1e5);
    // Count-level residuals: zero tolerance by construction of the checks.
    assert_eq!(tables.linear_identity_residual(), 0, "Σ|A|(Θ̂⁺−Θ̂⁻)");
    assert_eq!(tables.constant_identity_residual(), 0, "Σ(Θ̂⁺−Θ̂⁻) − κ̂");
    assert_eq!(tables.affine_identity_residual(), 0, "Θ̂₃^av − κ̂");
    assert_eq!(tables.geometric_identity_residual(), 0, "Θ̂₃^gv − (n/2)Θ̂₃^lv");
    pass(6, "all four identities exact on 10⁶ shared samples at t = 10⁵");
}

// ---------------------------------------------------------------------------
// 7. Drift positivity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_drift_positivity() {
    let tables = shared_theta_tables();
    let (theta3, se3) = tables.weighted_theta3(&SubsetFunction::qvoter(4));
    assert!(
        theta3 > 3.0 * se3,
        "Θ̂₃ = {theta3} ± {se3} not positive at 3 standard errors"
    );

    // d = 3: truncated reaction-derivative estimate with a horizon bracket.
    let report = estimate_f_prime_0(&SubsetFunction::qvoter(6), &nn3(), 50.0, 20_000, 0x4650_3033);
    let short = report.estimate;
    let long = report.estimate_long;
    assert!(
        short.value > 3.0 * short.std_error,
        "f′(0) at T: {} ± {}",
        short.value,
        short.std_error
    );
    assert!(
        long.value > 3.0 * long.std_error,
        "f′(0) at 2T: {} ± {}",
        long.value,
        long.std_error
    );
    pass(
        7,
        &format!(
            "Θ̂₃ = {theta3:.5} ± {se3:.5}; d=3 f′(0) = {:.5}/{:.5} at T/2T (gap {:+.1e})",
            short.value, long.value, report.truncation_gap
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Exhaustive partition inequality.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_partition_inequality_exhaustive() {
    // (n, expected Bell(n+1)): the nearest-neighbour ring and the Moore ring.
    for (n, bell) in [(4usize, 52usize), (8, 21147)] {
        assert_eq!(partitions(n + 1).count(), bell);
        // Partitions with at most two cells — exactly the equality cases for
        // a strictly subadditive weight.
        let at_most_two = 1usize << n;
        for (name, r) in [
            ("q-voter", SubsetFunction::qvoter(n)),
            ("lotka-volterra", SubsetFunction::lotka_volterra(n)),
            ("affine", SubsetFunction::affine(n)),
            ("geometric", SubsetFunction::geometric(n)),
            ("constant", SubsetFunction::constant(n)),
        ] {
            let report = exhaustive_detpi(&r).unwrap();
            assert_eq!(report.partitions, bell, "{name}, n = {n}");
            assert_eq!(report.equality, at_most_two, "{name}, n = {n}: equality cases");
            assert_eq!(report.strict, bell - at_most_two, "{name}, n = {n}: strict cases");
            assert_eq!(report.ties_beyond_two_cells, 0, "{name}, n = {n}");
        }
        // Additive weight: equality on every partition.
        let report = exhaustive_detpi(&SubsetFunction::linear(n)).unwrap();
        assert_eq!(report.partitions, bell);
        assert_eq!(report.strict, 0, "linear weight must never be strict");
        assert_eq!(report.equality, bell);
    }
    pass(8, "52 + 21147 partitions × 6 weights, strictness exactly as classified");
}

// ---------------------------------------------------------------------------
// 9. Subadditivity of the limit rate profiles.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_subadditivity() {
    for n in 2..=12usize {
        let table: Vec<f64> = (0..1u32 << n)
            .map(|mask| r_ell(n, mask.count_ones() as usize))
            .collect();
        subadditivity_check(&table, n).unwrap_or_else(|(a, b)| {
            panic!("q-voter profile fails at n = {n}: masks {a:#b}, {b:#b}")
        });
    }
    for kind in [
        PerturbationKind::LotkaVolterra { beta0: 0.3, beta1: 0.7 },
        PerturbationKind::Affine,
        PerturbationKind::Geometric,
    ] {
        let pert = Perturbation::new(kind, nn2());
        let r_s = pert.asymptotic_rates().unwrap().r_s;
        subadditivity_check(&r_s, 4).unwrap();
    }
    // Additive profile: must fail, and the witness must be an exact tie.
    let linear: Vec<f64> = (0..16u32).map(|mask| mask.count_ones() as f64).collect();
    let (a, b) = subadditivity_check(&linear, 4).unwrap_err();
    assert_eq!(a & b, 0, "witness masks must be disjoint");
    assert_eq!(
        linear[(a | b) as usize],
        linear[a as usize] + linear[b as usize],
        "additive witness is an exact tie"
    );
    pass(9, "q-voter n ≤ 12 and LV/affine/geometric subadditive; linear rejected");
}

// ---------------------------------------------------------------------------
// 10. Martingale decomposition.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_martingale_decomposition() {
    // Pure-voter mass martingale at N = 10⁴: X₀(1) ≈ 1 means ⌈N′⌉ occupied
    // sites.
    let params = scaling_params(1e4).unwrap();
    let initial_ones = params.n_prime.ceil() as usize;
    let report = voter_mass_martingale(&params, initial_ones, 0.5, 1000, 0x4d47_3130);
    assert!(
        report.mean_drift.abs() < 3.0 * report.std_error,
        "mass drift {} ± {}",
        report.mean_drift,
        report.std_error
    );
    assert!(
        report.max_residual <= 1e-10 * report.total_events as f64,
        "residual {} over {} events",
        report.max_residual,
        report.total_events
    );
    assert_eq!(report.max_bound_ratio, 0.0, "voter model has no drift kernels");

    // Substantive check of the per-site and per-sum drift-kernel bounds on a
    // genuinely perturbed model.
    let pert = Perturbation::new(PerturbationKind::QVoter, nn2());
    let n_small = 1000.0;
    let rates = decompose_rescaled_rates(&pert, n_small).unwrap();
    let model = rescaled_model(&pert, n_small);
    let initial = SpinState::lattice((0..3).flat_map(|x| (0..3).map(move |y| (x, y))));
    let horizon = 0.02;
    let mut checked_events = 0usize;
    for seed in [71, 72, 73] {
        let result = run(&model, &initial, horizon, seed).unwrap();
        for phi in [
            TestFunction::constant(1.0),
            TestFunction::gaussian((0.0, 0.0), 0.5, 1.0),
            TestFunction::gaussian((0.05, -0.02), 0.3, 2.0).with_decay(1.0),
        ] {
            let diag = martingale_decomposition(&initial, &result.events, horizon, &phi, &rates);
            assert!(
                diag.max_abs_residual <= 1e-10 * (1 + diag.events) as f64,
                "residual {} over {} events",
                diag.max_abs_residual,
                diag.events
            );
            assert!(diag.site_bound_ratio <= 1.0 + 1e-12, "per-site drift-kernel bound");
            assert!(diag.sum_bound_ratio <= 1.0 + 1e-12, "summed drift-kernel bound");
            checked_events += diag.events;
        }
    }
    assert!(checked_events > 1000, "bound check exercised too few events");
    pass(
        10,
        &format!(
            "mass drift {:+.2e} ± {:.2e} over {} events, residual {:.1e}; bounds held",
            report.mean_drift,
            report.std_error,
            report.total_events,
            report.max_residual
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. Two-walker survival trend toward 2πσ²/σ² = π.
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_pair_survival_trend() {
    let kernel = nn2();
    let nbhd = Neighbourhood::nearest_neighbour(2);
    let weights = kernel.weights().to_vec();
    let mut at_1e4 = 0.0;
    let mut at_1e6 = 0.0;
    for (i, y) in nbhd.sites().iter().enumerate() {
        let blocks = vec![vec![vec![0, 0]], vec![y.clone()]];
        let report = estimate_kn(&blocks, &kernel, &[1e4, 1e6], 1_000_000, mix_key(&[11, i as u64]));
        at_1e4 += weights[i] * report.per_t[0].1.value;
        at_1e6 += weights[i] * report.per_t[1].1.value;
    }
    let pi = std::f64::consts::PI;
    let gap4 = (at_1e4 - pi).abs();
    let gap6 = (at_1e6 - pi).abs();
    assert!(gap4 <= 0.35 * pi, "t = 10⁴: {at_1e4} is {gap4:.3} from π");
    assert!(gap6 < gap4, "no improvement: {at_1e6} at 10⁶ vs {at_1e4} at 10⁴");
    pass(
        11,
        &format!("Σp(y)(log t)P̂(σ>t): {at_1e4:.4} at 10⁴ → {at_1e6:.4} at 10⁶ (π = {pi:.4})"),
    );
}

// ---------------------------------------------------------------------------
// 12. Coexistence trend on the 64×64 torus.
// ---------------------------------------------------------------------------

/// First time the occupied density leaves (0.2, 0.8), starting from
/// product-1/2 data drawn from `seed`, censored at `cap`.
fn density_exit_time(model: &RateModel, l: i64, seed: u64, cap: f64) -> f64 {
    let mut rng = CounterRng::from_key(&[seed, 0x494e_4954]);
    let mut ones: Vec<Site> = Vec::new();
    for x in 0..l {
        for y in 0..l {
            if rng.uniform() < 0.5 {
                ones.push((x, y));
            }
        }
    }
    let total = (l * l) as f64;
    let mut state = SpinState::torus(l, ones);
    let mut count = state.count_ones() as i64;
    let lo = (0.2 * total).floor() as i64;
    let hi = (0.8 * total).ceil() as i64;
    let mut chunk_index = 0u64;
    // Simulate in chunks so the event log stays small; event times are
    // absolute, so the first crossing inside any chunk is the exit time.
    while state.time() < cap {
        let horizon = (cap - state.time()).min(20.0);
        let result = run(model, &state, horizon, mix_key(&[seed, chunk_index])).unwrap();
        for event in &result.events {
            count += if event.value { 1 } else { -1 };
            if count <= lo || count >= hi {
                return event.time;
            }
        }
        state = result.final_state;
        chunk_index += 1;
    }
    cap
}

#[test]
fn criterion_12_coexistence_trend() {
    let l = 64;
    let voter = RateModel::new(Family::Voter, nn2());
    let qvoter = RateModel::new(Family::QVoter { q: 0.95 }, nn2());
    let seeds: Vec<u64> = (0..200).map(|i| mix_key(&[12, i])).collect();

    // Uncensored voter exit times fix the scale.
    let mut voter_times: Vec<f64> = seeds
        .iter()
        .map(|&s| density_exit_time(&voter, l, s, f64::INFINITY))
        .collect();
    let voter_median = voterlab::stats::median(&mut voter_times);

    // The q-voter runs only need to prove a 3× margin, so censor at 4× the
    // voter median; a censored majority already certifies the claim.
    let cap = 4.0 * voter_median;
    let mut q_times: Vec<f64> = seeds
        .iter()
        .map(|&s| density_exit_time(&qvoter, l, s, cap))
        .collect();
    let q_median = voterlab::stats::median(&mut q_times);

    assert!(
        q_median >= 3.0 * voter_median,
        "median exit {q_median} (q = 0.95) vs {voter_median} (voter)"
    );
    pass(
        12,
        &format!(
            "median density-exit time {q_median:.1} (q = 0.95, censored at {cap:.1}) vs {voter_median:.1} (voter)"
        ),
    );
}
