//! `voterlab` — reproducible experiment runner for the voterlab toolkit.
//!
//! Every run reads an optional TOML config, applies flag overrides, runs
//! one experiment, and writes its outputs (CSV tables, one JSON summary,
//! optionally a binary event log) plus a digest manifest into the output
//! directory.  Identical config and seed produce identical CSV bytes
//! regardless of the worker-thread count.

mod config;
mod report;

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::Config;
use report::{num, OutputSet};

use voterlab::cancellative::{build_m, find_qc, golden, invert_m, AlphaForms};
use voterlab::coalescing::estimate_kn;
use voterlab::drift::{closed_form_drifts, SubsetFunction};
use voterlab::rescale::{sbm_drift_diagnostic, scaling_params};
use voterlab::rng::CounterRng;
use voterlab::simulator::{run, SpinState};

#[derive(Parser)]
#[command(name = "voterlab", version, about = "Voter-model perturbation toolkit", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file ([kernel], [family], [experiment] sections).
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replicate count override.
    #[arg(long, global = true)]
    replicates: Option<u64>,
    /// Time horizon override.
    #[arg(long = "t", visible_alias = "horizon", global = true)]
    horizon: Option<f64>,
    /// Torus side length override (0 = infinite lattice).
    #[arg(long, global = true)]
    torus: Option<i64>,
    /// Scale parameter N override.
    #[arg(long, global = true)]
    n_scale: Option<f64>,
    /// Ring size override for the cancellative commands.
    #[arg(long, global = true)]
    ring: Option<usize>,
    /// Family name override.
    #[arg(long, global = true)]
    family: Option<String>,
    /// q-voter exponent override.
    #[arg(long, global = true)]
    q: Option<f64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<std::path::PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate the configuration, building every derived object.
    Validate(Common),
    /// Tabulate the dual-representation coefficients α_ℓ(q) for one ring.
    Cancellative(Common),
    /// Locate the smallest q with a valid representation on [q, 1].
    Qc(Common),
    /// Run one spin-flip trajectory and log every event.
    Simulate(Common),
    /// Coalescing-pair survival estimates over a horizon grid.
    Coalesce(Common),
    /// Drift-constant tables from coalescing replicates.
    Drift(Common),
    /// Mass-drift diagnostics of the rescaled perturbation at scale N.
    Rescale(Common),
    /// Forward-vs-dual expectation check on a small torus.
    Duality(Common),
    /// Frozen reference suite for the n = 4 and n = 8 rings.
    Golden(Common),
}

fn main() {
    if let Err(e) = run_cli() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run_cli() -> Result<()> {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Validate(c) => ("validate", c),
        Command::Cancellative(c) => ("cancellative", c),
        Command::Qc(c) => ("qc", c),
        Command::Simulate(c) => ("simulate", c),
        Command::Coalesce(c) => ("coalesce", c),
        Command::Drift(c) => ("drift", c),
        Command::Rescale(c) => ("rescale", c),
        Command::Duality(c) => ("duality", c),
        Command::Golden(c) => ("golden", c),
    };
    let cfg = effective_config(common)?;
    if cfg.experiment.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.experiment.threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match name {
        "validate" => cmd_validate(&cfg),
        "cancellative" => cmd_cancellative(&cfg),
        "qc" => cmd_qc(&cfg),
        "simulate" => cmd_simulate(&cfg),
        "coalesce" => cmd_coalesce(&cfg),
        "drift" => cmd_drift(&cfg),
        "rescale" => cmd_rescale(&cfg),
        "duality" => cmd_duality(&cfg),
        "golden" => cmd_golden(&cfg),
        _ => unreachable!(),
    }
}

fn effective_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(v) = common.seed {
        cfg.experiment.seed = v;
    }
    if let Some(v) = common.replicates {
        cfg.experiment.replicates = v;
    }
    if let Some(v) = common.horizon {
        cfg.experiment.horizon = v;
    }
    if let Some(v) = common.torus {
        cfg.experiment.torus = v;
    }
    if let Some(v) = common.n_scale {
        cfg.experiment.n_scale = v;
    }
    if let Some(v) = common.ring {
        cfg.experiment.ring = v;
    }
    if let Some(v) = &common.family {
        cfg.family.name = v.clone();
    }
    if let Some(v) = common.q {
        cfg.family.q = v;
    }
    if let Some(v) = common.threads {
        cfg.experiment.threads = v;
    }
    if let Some(v) = &common.out {
        cfg.experiment.output = v.clone();
    }
    Ok(cfg)
}

fn cmd_validate(cfg: &Config) -> Result<()> {
    let kernel = cfg.kernel()?;
    let model = cfg.model()?;
    println!(
        "kernel: {} sites in d = {}, σ² = {}",
        kernel.neighbourhood().len(),
        kernel.neighbourhood().dim(),
        kernel.sigma2()
    );
    println!("family: {} (max rate {})", cfg.family.name, model.max_rate());
    println!("traps 0/1 preserved: {}", model.has_both_traps());
    match cfg.perturbation() {
        Ok(p) => println!("perturbation form: available, ε₀ = {}", p.epsilon0()),
        Err(e) => println!("perturbation form: n/a ({e})"),
    }
    println!("config valid");
    Ok(())
}

fn cmd_cancellative(cfg: &Config) -> Result<()> {
    let n = cfg.experiment.ring;
    ensure!((2..=16).contains(&n), "ring size {n} out of range 2..=16");
    let m = build_m(n);
    let inv = invert_m(&m).context("inverting the parity matrix")?;
    let forms = AlphaForms::new(n);
    let mut out = OutputSet::create(&cfg.experiment.output)?;

    out.write_csv(
        "matrix.csv",
        &["k", "j", "m", "minv"],
        (1..=n).flat_map(|k| {
            let m = &m;
            let inv = &inv;
            (1..=n).map(move |j| {
                vec![
                    k.to_string(),
                    j.to_string(),
                    m.entry_i64(k, j).to_string(),
                    inv.entry(k, j).to_string(),
                ]
            })
        }),
    )?;

    let grid = 1000usize;
    let header: Vec<String> = std::iter::once("q".to_string())
        .chain((1..=n).map(|l| format!("alpha_{l}")))
        .collect();
    out.write_csv(
        "alpha.csv",
        &header.iter().map(String::as_str).collect::<Vec<_>>(),
        (0..=grid).map(|i| {
            let q = i as f64 / grid as f64;
            let mut row = vec![num(q)];
            row.extend(forms.eval_qvoter(q).iter().map(|&a| num(a)));
            row
        }),
    )?;

    let min_alpha = (0..=grid)
        .map(|i| {
            forms
                .eval_qvoter(i as f64 / grid as f64)
                .into_iter()
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min);
    out.write_summary(
        "cancellative",
        serde_json::json!({
            "ring": n,
            "grid_points": grid + 1,
            "min_alpha_on_grid": min_alpha,
            "all_nonnegative": min_alpha >= 0.0,
        }),
    )?;
    out.finish(cfg, cfg.experiment.seed)?;
    println!("wrote matrix.csv, alpha.csv to {}", cfg.experiment.output.display());
    Ok(())
}

fn cmd_qc(cfg: &Config) -> Result<()> {
    let n = cfg.experiment.ring;
    let q_star = find_qc(n).context("no valid q range")?;
    let mut out = OutputSet::create(&cfg.experiment.output)?;
    out.write_summary(
        "qc",
        serde_json::json!({ "ring": n, "q_star": q_star }),
    )?;
    out.finish(cfg, cfg.experiment.seed)?;
    println!("ring {n}: representation valid on [{q_star}, 1]");
    Ok(())
}

fn cmd_simulate(cfg: &Config) -> Result<()> {
    let model = cfg.model()?;
    ensure!(cfg.kernel.dim == 2, "the simulator runs on Z²; set kernel.dim = 2");
    let initial = initial_state(cfg);
    let x0 = initial.count_ones();
    let result = run(&model, &initial, cfg.experiment.horizon, cfg.experiment.seed)
        .context("simulation failed")?;

    let mut out = OutputSet::create(&cfg.experiment.output)?;
    out.write_events("events.bin", &result.events)?;
    let mut count = x0 as i64;
    out.write_csv(
        "trajectory.csv",
        &["time", "occupied"],
        std::iter::once(vec![num(0.0), x0.to_string()]).chain(result.events.iter().map(|e| {
            count += if e.value { 1 } else { -1 };
            vec![num(e.time), count.to_string()]
        })),
    )?;
    out.write_summary(
        "simulate",
        serde_json::json!({
            "events": result.events.len(),
            "initial_occupied": x0,
            "final_occupied": result.final_state.count_ones(),
            "horizon": cfg.experiment.horizon,
            "seed": cfg.experiment.seed,
        }),
    )?;
    out.finish(cfg, cfg.experiment.seed)?;
    println!("{} events → {}", result.events.len(), cfg.experiment.output.display());
    Ok(())
}

fn cmd_coalesce(cfg: &Config) -> Result<()> {
    let kernel = cfg.kernel()?;
    let nbhd = kernel.neighbourhood();
    ensure!(!cfg.experiment.t_grid.is_empty(), "experiment.t_grid must be nonempty");
    let weights = kernel.weights().to_vec();
    let dim = nbhd.dim();

    // Kernel-weighted pair-survival functional Σ_y p(y)(log t)P̂(σ(0,y)>t),
    // one coalescing pair per kernel site.
    let mut rows = Vec::new();
    let mut weighted = vec![(0.0, 0.0); cfg.experiment.t_grid.len()];
    for (i, y) in nbhd.sites().iter().enumerate() {
        let blocks = vec![vec![vec![0i64; dim]], vec![y.clone()]];
        let report = estimate_kn(
            &blocks,
            &kernel,
            &cfg.experiment.t_grid,
            cfg.experiment.replicates,
            cfg.experiment.seed.wrapping_add(i as u64),
        );
        for (ti, (t, est)) in report.per_t.iter().enumerate() {
            rows.push(vec![
                format!("{y:?}"),
                num(*t),
                num(est.value),
                num(est.std_error),
            ]);
            weighted[ti].0 += weights[i] * est.value;
            weighted[ti].1 += weights[i] * est.std_error;
        }
    }
    let mut out = OutputSet::create(&cfg.experiment.output)?;
    out.write_csv("pair_survival.csv", &["site", "t", "estimate", "std_error"], rows)?;
    out.write_summary(
        "coalesce",
        serde_json::json!({
            "replicates": cfg.experiment.replicates,
            "t_grid": cfg.experiment.t_grid,
            "weighted": weighted.iter().map(|&(v, _)| v).collect::<Vec<_>>(),
            "reference_pi": std::f64::consts::PI,
        }),
    )?;
    out.finish(cfg, cfg.experiment.seed)?;
    println!("pair-survival estimates → {}", cfg.experiment.output.display());
    Ok(())
}

fn cmd_drift(cfg: &Config) -> Result<()> {
    let kernel = cfg.kernel()?;
    let n = kernel.neighbourhood().len();
    ensure!(n <= 24, "neighbourhood too large for partition labels");
    let tables = voterlab::coalescing::estimate_theta_tables(
        &kernel,
        cfg.experiment.horizon,
        cfg.experiment.replicates,
        cfg.experiment.seed,
    );
    let drifts = closed_form_drifts(&tables, cfg.family.beta0, cfg.family.beta1);
    let (qv, qv_se) = tables.weighted_theta3(&SubsetFunction::qvoter(n));

    let mut out = OutputSet::create(&cfg.experiment.output)?;
    out.write_csv(
        "drift.csv",
        &["quantity", "value", "std_error"],
        vec![
            vec!["kappa_hat".into(), num(drifts.kappa_hat), String::new()],
            vec!["theta3_qvoter".into(), num(qv), num(qv_se)],
            vec!["theta3_lv".into(), num(drifts.theta_lv3.0), num(drifts.theta_lv3.1)],
            vec!["theta3_affine".into(), num(drifts.theta_av3.0), num(drifts.theta_av3.1)],
            vec!["theta3_geometric".into(), num(drifts.theta_gv3.0), num(drifts.theta_gv3.1)],
            vec!["theta2_lv".into(), num(drifts.theta_lv2.0), num(drifts.theta_lv2.1)],
        ],
    )?;
    out.write_summary(
        "drift",
        serde_json::json!({
            "replicates": tables.replicates(),
            "horizon": tables.horizon(),
            "kappa_hat": drifts.kappa_hat,
            "identity_residuals": {
                "linear": drifts.linear_residual.to_string(),
                "constant": drifts.constant_residual.to_string(),
                "affine": drifts.affine_residual.to_string(),
                "geometric": drifts.geometric_residual.to_string(),
            },
        }),
    )?;
    ensure!(
        drifts.linear_residual == 0
            && drifts.constant_residual == 0
            && drifts.affine_residual == 0
            && drifts.geometric_residual == 0,
        "pathwise identity residuals nonzero: {} {} {} {}",
        drifts.linear_residual,
        drifts.constant_residual,
        drifts.affine_residual,
        drifts.geometric_residual
    );
    out.finish(cfg, cfg.experiment.seed)?;
    println!("drift tables → {}", cfg.experiment.output.display());
    Ok(())
}

fn cmd_rescale(cfg: &Config) -> Result<()> {
    let pert = cfg.perturbation()?;
    let params = scaling_params(cfg.experiment.n_scale)?;
    let diagnostics = sbm_drift_diagnostic(
        &pert,
        &[cfg.experiment.n_scale],
        1.0,
        cfg.experiment.horizon,
        cfg.experiment.replicates,
        cfg.experiment.seed,
    )?;
    let d = &diagnostics[0];
    let mut out = OutputSet::create(&cfg.experiment.output)?;
    out.write_csv(
        "drift_diagnostic.csv",
        &["n_scale", "theta_hat", "band", "qvar_ratio", "replicates"],
        diagnostics.iter().map(|d| {
            vec![
                num(d.n_scale),
                num(d.theta_hat),
                num(d.band),
                num(d.qvar_ratio),
                d.replicates.to_string(),
            ]
        }),
    )?;
    out.write_summary(
        "rescale",
        serde_json::json!({
            "n_scale": params.n_scale,
            "eps_n": params.eps_n,
            "n_prime": params.n_prime,
            "spacing": params.spacing,
            // The literal default horizon (log N)^{-19} is degenerate at
            // desk scale; the run uses experiment.horizon instead.
            "default_t_n": params.t_n,
            "horizon_used": cfg.experiment.horizon,
            "theta_hat": d.theta_hat,
            "band": d.band,
            "qvar_ratio": d.qvar_ratio,
        }),
    )?;
    out.finish(cfg, cfg.experiment.seed)?;
    println!(
        "θ̂ = {} ± {} at N = {} → {}",
        d.theta_hat,
        d.band,
        params.n_scale,
        cfg.experiment.output.display()
    );
    Ok(())
}

fn cmd_duality(cfg: &Config) -> Result<()> {
    let kernel = cfg.kernel()?;
    let l = if cfg.experiment.torus > 0 { cfg.experiment.torus } else { 3 };
    ensure!(l * l <= 9, "exact duality needs a torus with at most nine sites");
    let mut rng = CounterRng::from_key(&[cfg.experiment.seed, 0x4455_414c]);
    let occupied: Vec<(i64, i64)> = (0..l * l)
        .filter(|_| rng.uniform() < 0.5)
        .map(|i| (i % l, i / l))
        .collect();
    let xi0 = SpinState::torus(l, occupied.clone());
    let a = [(0i64, 0i64)];
    let b = [(l - 1, l - 1)];
    let report = voterlab::coalescing::duality_check_exact(
        &kernel,
        1.0,
        l,
        &xi0,
        &a,
        &b,
        cfg.experiment.horizon,
    )
    .context("duality check failed to run")?;

    let mut out = OutputSet::create(&cfg.experiment.output)?;
    out.write_summary(
        "duality",
        serde_json::json!({
            "torus": l,
            "t": cfg.experiment.horizon,
            "initial_occupied": occupied,
            "a_sites": a,
            "b_sites": b,
            "forward": report.forward,
            "dual": report.dual,
            "discrepancy": report.discrepancy,
            "tolerance": report.tolerance,
        }),
    )?;
    ensure!(
        report.discrepancy <= report.tolerance,
        "duality discrepancy {} exceeds tolerance {} (forward {}, dual {})",
        report.discrepancy,
        report.tolerance,
        report.forward,
        report.dual
    );
    out.finish(cfg, cfg.experiment.seed)?;
    println!(
        "forward {} vs dual {} (discrepancy {:.2e})",
        report.forward, report.dual, report.discrepancy
    );
    Ok(())
}

fn cmd_golden(cfg: &Config) -> Result<()> {
    // n = 8: matrix and inverse against the frozen tables.
    let m = build_m(8);
    let inv = invert_m(&m)?;
    for k in 1..=8 {
        for j in 1..=8 {
            ensure!(
                m.entry_i64(k, j) == golden::M8[k - 1][j - 1],
                "M({k},{j}) mismatch"
            );
            let (p, d) = golden::MINV8[k - 1][j - 1];
            let want = num::rational::BigRational::new(p.into(), d.into());
            ensure!(*inv.entry(k, j) == want, "M⁻¹({k},{j}) mismatch");
        }
    }
    // α′_ℓ(1): both frozen representations agree and are negative.
    let log_sum = golden::alpha_prime8_log_sum();
    let single = golden::alpha_prime8_single_log();
    for (i, (a, b)) in log_sum.iter().zip(&single).enumerate() {
        ensure!((a - b).abs() <= 1e-12, "α′_{}(1) forms disagree", i + 2);
        ensure!(*a < 0.0, "α′_{}(1) not negative", i + 2);
    }
    // α positivity margins on the q grid, n = 8 and n = 4.
    let forms8 = AlphaForms::new(8);
    let forms4 = AlphaForms::new(4);
    for i in 0..=1000 {
        let q = i as f64 / 1000.0;
        ensure!(forms8.eval_qvoter(q)[0] >= 1.0 / 128.0, "α₁({q}) below 2⁻⁷ at n = 8");
        let a4 = forms4.eval_qvoter(q);
        let g4 = golden::alpha_n4(q);
        for (x, y) in a4.iter().zip(&g4) {
            ensure!((x - y).abs() <= 1e-13, "n = 4 closed form mismatch at q = {q}");
        }
    }
    for (l, &a) in forms8.eval_qvoter(1.0).iter().enumerate().skip(1) {
        ensure!(a.abs() <= 1e-12, "α_{}(1) ≠ 0 at n = 8", l + 1);
    }

    let mut out = OutputSet::create(&cfg.experiment.output)?;
    out.write_summary(
        "golden",
        serde_json::json!({
            "checks": [
                "m8_matrix", "m8_inverse", "alpha_prime8_forms",
                "alpha8_at_one", "alpha1_floor", "alpha4_closed_forms",
            ],
            "result": "pass",
        }),
    )?;
    out.finish(cfg, cfg.experiment.seed)?;
    println!("golden suite: all checks pass");
    Ok(())
}

fn initial_state(cfg: &Config) -> SpinState {
    let count = cfg.experiment.initial_ones.max(1) as i64;
    let side = (count as f64).sqrt().ceil() as i64;
    let blob = (0..count).map(|i| (i % side, i / side));
    if cfg.experiment.torus > 0 {
        SpinState::torus(cfg.experiment.torus, blob)
    } else {
        SpinState::lattice(blob)
    }
}
