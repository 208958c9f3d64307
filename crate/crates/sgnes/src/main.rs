//! Command-line front end: generate instances, run experiment grids,
//! compare algorithms, export plot data, and verify an instance against
//! the assumptions the step-size certificates rely on.
//!
//! Exit codes: 0 on success, 1 when some cells or checks failed, 2 for
//! configuration and usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgnes::cournot::{generate_instance, CournotInstance, CournotParams, BENCHMARK_SEED};
use sgnes::harness::{
    export_dir, load_config, run_experiment, AlgorithmEntry, ExperimentConfig, ExperimentOutcome,
    HarnessError, InstanceSource, StopSection,
};
use sgnes::linalg::sym_extreme_eigs;
use sgnes::operators::{assemble_phi, max_step_sizes, skew_apply, StackedState};
use sgnes::solvers::{
    certified_gamma, game_pair, run, AlgorithmKind, Estimator, SolverConfig, StopMetric, StopRule,
};

#[derive(Parser)]
#[command(
    name = "sgnes",
    version,
    about = "Distributed equilibrium seeking for stochastic Nash games with shared constraints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a market instance and save it as a JSON document.
    Generate(GenerateArgs),
    /// Run every (algorithm, seed) cell of an experiment.
    Solve(RunArgs),
    /// Run several algorithms on one instance and print their totals.
    Compare(RunArgs),
    /// Export one metric of a finished experiment as long-format rows.
    Export(ExportArgs),
    /// Check an instance against the assumptions behind the certified
    /// step sizes, ending with a short trial solve.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator seed.
    #[arg(long, default_value_t = BENCHMARK_SEED)]
    seed: u64,
    /// Output file.
    #[arg(long, default_value = "instance.json")]
    out: PathBuf,
    #[arg(long)]
    companies: Option<usize>,
    #[arg(long)]
    markets: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file; without one the bundled benchmark instance
    /// is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the config's seed list (repeatable).
    #[arg(long = "seed", value_name = "SEED")]
    seeds: Vec<u64>,
    /// Replace the config's algorithm list with default entries
    /// (repeatable).
    #[arg(long = "algo", value_name = "NAME")]
    algos: Vec<String>,
    /// Cap every entry's iteration count.
    #[arg(long)]
    max_iters: Option<u64>,
    /// Replace every entry's stop rules with a relative-distance rule at
    /// this tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Experiment output directory.
    #[arg(long)]
    out: PathBuf,
    /// Metric column to export.
    #[arg(long)]
    metric: String,
}

#[derive(Args)]
struct VerifyArgs {
    /// Experiment config whose instance section is checked; without one
    /// the instance is generated from --seed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator seed when no config is given.
    #[arg(long, default_value_t = BENCHMARK_SEED)]
    seed: u64,
    /// Iteration budget for the trial solve.
    #[arg(long, default_value_t = 20_000)]
    max_iters: u64,
    /// Stationarity the trial solve must reach.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Solve(args) => cmd_run(args, false),
        Command::Compare(args) => cmd_run(args, true),
        Command::Export(args) => cmd_export(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<ExitCode, HarnessError> {
    let mut params = CournotParams::default();
    if let Some(n) = args.companies {
        params.companies = n;
    }
    if let Some(m) = args.markets {
        params.markets = m;
    }
    let instance = generate_instance(&params, args.seed)?;
    instance.save(&args.out)?;
    let (mu, l, beta) = instance.strong_monotonicity_constants()?;
    println!(
        "wrote {} (hash {}, {} companies, {} markets)",
        args.out.display(),
        instance.instance_hash(),
        params.companies,
        params.markets
    );
    println!("pseudogradient: mu={mu:.4e} L={l:.4e} beta={beta:.4e}");
    Ok(ExitCode::SUCCESS)
}

/// Default entry for a CLI-assembled run. Comparisons use the exact
/// oracle inside the two-evaluation engines so their totals measure the
/// engines, not the noise.
fn cli_entry(kind: AlgorithmKind, compare: bool) -> AlgorithmEntry {
    let mut entry = AlgorithmEntry::new(kind);
    if compare {
        entry.estimator = Some(Estimator::Exact);
        entry.max_iters = 20_000;
        entry.stop_rules = vec![StopSection {
            metric: StopMetric::RelDist,
            tol: 1e-2,
        }];
    } else {
        entry.max_iters = 5_000;
    }
    entry
}

fn build_config(args: &RunArgs, compare: bool) -> Result<ExperimentConfig, HarnessError> {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => {
            let out = PathBuf::from(if compare {
                "runs/compare"
            } else {
                "runs/solve"
            });
            let mut c = ExperimentConfig::single(AlgorithmKind::DetFb, out);
            let kinds: &[AlgorithmKind] = if compare {
                &[AlgorithmKind::DetFb, AlgorithmKind::Fbf, AlgorithmKind::Eg]
            } else {
                &[AlgorithmKind::DetFb]
            };
            c.algorithms = kinds.iter().map(|&k| cli_entry(k, compare)).collect();
            c
        }
    };
    if !args.seeds.is_empty() {
        config.seeds = args.seeds.clone();
    }
    if !args.algos.is_empty() {
        config.algorithms = args
            .algos
            .iter()
            .map(|name| {
                name.parse::<AlgorithmKind>()
                    .map(|k| cli_entry(k, compare))
                    .map_err(HarnessError::Invalid)
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(n) = args.max_iters {
        for entry in &mut config.algorithms {
            entry.max_iters = n;
        }
    }
    if let Some(tol) = args.tol {
        for entry in &mut config.algorithms {
            entry.stop_rules = vec![StopSection {
                metric: StopMetric::RelDist,
                tol,
            }];
        }
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn print_outcome(outcome: &ExperimentOutcome, compare: bool) {
    println!("instance {}", outcome.instance_hash);
    for cell in &outcome.cells {
        let evals = cell
            .evals_to_accuracy
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<26} seed {:<4} {:<10} {:>8} iters  rel {:<10.3e} evals-to-acc {:>8}",
            cell.algorithm.to_string(),
            cell.seed,
            cell.status.label(),
            cell.iterations,
            cell.final_rel_dist,
            evals
        );
        if let Some(detail) = &cell.detail {
            println!("    {detail}");
        }
    }
    if compare {
        println!("\nper-algorithm totals:");
        println!(
            "{:<26} {:>8} {:>16} {:>14} {:>14}",
            "algorithm", "cells", "evals-to-acc", "oracle_calls", "samples"
        );
        for t in &outcome.totals {
            let evals = t
                .evals_to_accuracy
                .map(|v| v.to_string())
                .unwrap_or_else(|| "-".into());
            println!(
                "{:<26} {:>8} {:>16} {:>14} {:>14}",
                t.algorithm.to_string(),
                t.cells,
                evals,
                t.oracle_calls,
                t.samples
            );
        }
    }
    println!("\nwrote {}", outcome.summary_path.display());
}

fn cmd_run(args: RunArgs, compare: bool) -> Result<ExitCode, HarnessError> {
    let config = build_config(&args, compare)?;
    let outcome = run_experiment(&config)?;
    print_outcome(&outcome, compare);
    if outcome.failed_cells() > 0 {
        eprintln!(
            "{} of {} cells failed",
            outcome.failed_cells(),
            outcome.cells.len()
        );
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(args: ExportArgs) -> Result<ExitCode, HarnessError> {
    let path = export_dir(&args.out, &args.metric)?;
    let rows = std::fs::read_to_string(&path)
        .map(|t| t.lines().count().saturating_sub(1))
        .unwrap_or(0);
    println!("wrote {} ({rows} rows)", path.display());
    Ok(ExitCode::SUCCESS)
}

struct CheckList {
    failures: usize,
}

impl CheckList {
    fn new() -> Self {
        Self { failures: 0 }
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "pass" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, HarnessError> {
    let instance: CournotInstance = match &args.config {
        Some(path) => load_config(path)?.instance.resolve()?,
        None => InstanceSource {
            seed: args.seed,
            ..Default::default()
        }
        .resolve()?,
    };
    println!(
        "instance {} ({} companies, {} markets)",
        instance.instance_hash(),
        instance.companies,
        instance.markets
    );
    let (game, graph) = game_pair(&instance)?;
    let mut checks = CheckList::new();

    let (mu, l, beta) = instance.strong_monotonicity_constants()?;
    checks.check(
        "strongly monotone pseudogradient",
        mu > 0.0 && l.is_finite(),
        format!("mu={mu:.4e} L={l:.4e} beta={beta:.4e}"),
    );

    let lap = graph.laplacian_dense();
    let sym_residual = (&lap - lap.transpose()).abs().max();
    let row_residual = (0..lap.nrows())
        .map(|i| lap.row(i).sum().abs())
        .fold(0.0f64, f64::max);
    let (lap_min, _) = sym_extreme_eigs(&lap);
    checks.check(
        "consensus Laplacian",
        sym_residual == 0.0 && row_residual < 1e-12 && lap_min > -1e-10,
        format!("asym={sym_residual:.1e} rowsum={row_residual:.1e} min_eig={lap_min:.1e}"),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let nm = game.agent_count() * game.constraint_rows();
    let mut worst = 0.0f64;
    for _ in 0..32 {
        let state = StackedState {
            x: (0..game.total_dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            z: (0..nm).map(|_| rng.random_range(-1.0..1.0)).collect(),
            lambda: (0..nm).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let image = skew_apply(&game, &graph, &state);
        let inner: f64 = state
            .x
            .iter()
            .zip(&image.x)
            .chain(state.z.iter().zip(&image.z))
            .chain(state.lambda.iter().zip(&image.lambda))
            .map(|(a, b)| a * b)
            .sum();
        let norm_sq: f64 = state
            .x
            .iter()
            .chain(&state.z)
            .chain(&state.lambda)
            .map(|v| v * v)
            .sum();
        worst = worst.max(inner.abs() / norm_sq);
    }
    checks.check(
        "skew interconnection annihilates",
        worst < 1e-12,
        format!("max |<C w, w>|/|w|^2 = {worst:.2e} over 32 probes"),
    );

    let gamma = certified_gamma(&game, &graph, AlgorithmKind::DetFb)?;
    let steps = max_step_sizes(&game, &graph, gamma)?;
    let phi = assemble_phi(&game, &graph, &steps);
    let (phi_min, _) = sym_extreme_eigs(&phi);
    checks.check(
        "preconditioner dominated by gamma",
        phi_min >= gamma * (1.0 - 1e-6),
        format!("lambda_min(Phi)={phi_min:.6e} certified gamma={gamma:.6e}"),
    );

    let mut cfg = SolverConfig::new(AlgorithmKind::DetFb);
    cfg.max_iters = args.max_iters;
    cfg.stop_rules = vec![StopRule {
        metric: StopMetric::KktStat,
        tol: args.tol,
    }];
    let record = run(&game, &graph, None, None, &cfg)?;
    let final_stat = record.rows.last().map_or(f64::NAN, |r| r.kkt_stat);
    checks.check(
        "trial solve reaches stationarity",
        record.stopped_early,
        format!(
            "kkt_stat={final_stat:.3e} after {} iterations (budget {}, tol {:.1e})",
            record.rows.len(),
            args.max_iters,
            args.tol
        ),
    );

    if checks.failures > 0 {
        eprintln!("{} check(s) failed", checks.failures);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
