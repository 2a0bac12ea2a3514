//! `mipprune`: train small ReLU networks, score neuron importance with a
//! mixed-integer program, prune, and run the comparison experiments.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.

mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mipprune::bounds::{bounds_csv, propagate_batch};
use mipprune::data::{Dataset, DatasetSpec};
use mipprune::mip::{export_lp, read_solution, write_solution, Batch, Rescale};
use mipprune::network::{apply_mask, init, Architecture, Mask, Network};
use mipprune::pruner::{
    balanced_batch, build_model, compare, mask_from_scores, report_from_values, score,
    score_classwise, sweep, sweep_csv, transfer, ClasswiseMode, ImportanceReport, Seeds, Setting,
    SolverStats, ScoreConfig, TransferConfig,
};
use mipprune::solver::{node_log_text, solve_mip, warm_start, SolverConfig};
use mipprune::train::{evaluate, train, trace_csv, Optimizer, TrainConfig};
use serde::Serialize;

use run::{pretty, RunConfig, RunDir};

#[derive(Parser)]
#[command(name = "mipprune", version, about = "MIP-based neuron importance scoring and pruning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Serialize)]
struct Common {
    /// Run directory; defaults to a fresh directory under the output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root for generated run directories.
    #[arg(long, global = true, env = "MIPPRUNE_OUT", default_value = "runs")]
    out_root: PathBuf,
    /// Experiment seed; every other seed is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from an architecture string.
    Train(TrainCmd),
    /// Compute importance scores for a trained network.
    Score(ScoreCmd),
    /// Mask units scoring below a threshold.
    Prune(PruneCmd),
    /// Test accuracy of a network, optionally masked.
    Evaluate(EvaluateCmd),
    /// Compare the score mask against random and critical baselines.
    CompareBaselines(CompareCmd),
    /// Score one class at a time or all classes together.
    ScoreClasswise(ClasswiseCmd),
    /// Score on a source task and retrain the masked init on a target task.
    Transfer(TransferCmd),
    /// Accuracy and pruning for several softmax weights.
    SweepLambda(SweepCmd),
    /// Accuracy and pruning for several thresholds (one solve).
    SweepThreshold(SweepThresholdCmd),
    /// Accuracy and pruning for each score offset.
    SweepRescale(SweepCmd),
    /// Write the scoring program in LP format.
    ExportLp(ExportCmd),
    /// Build a report from a solution file.
    ImportSolution(ImportCmd),
}

#[derive(Args, Serialize)]
struct DataArgs {
    /// Dataset, e.g. `blobs`, `moons:n=100` or `minidigits:noise=0.2`.
    #[arg(long, default_value = "blobs")]
    data: String,
    /// Points per class in the held-out test set.
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value = "rmsprop")]
    optimizer: String,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    /// Weight of the marginal softmax term.
    #[arg(long, default_value_t = 5.0)]
    lambda: f64,
    /// Radius of the input box used for the bounds.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Score offset in the sparsity term: minus2, minus1 or none.
    #[arg(long, default_value = "minus2")]
    rescale: String,
    /// Points per class in the scoring batch.
    #[arg(long, default_value_t = 1)]
    batch_per_class: usize,
    /// Relative optimality gap.
    #[arg(long, default_value_t = 1e-6)]
    gap: f64,
    /// Time limit per solve, in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    node_limit: usize,
    /// Write the branch-and-bound node log.
    #[arg(long)]
    log: bool,
    /// Write the propagated bounds as CSV.
    #[arg(long)]
    dump_bounds: bool,
}

#[derive(Args, Serialize)]
struct TrainCmd {
    /// Architecture, e.g. `in:2,dense:16,dense:8,out:4`.
    #[arg(long)]
    arch: String,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Serialize)]
struct ScoreCmd {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Args, Serialize)]
struct PruneCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Units scoring strictly below this value are pruned; clamped to [0, 1].
    #[arg(long)]
    threshold: f64,
}

#[derive(Args, Serialize)]
struct EvaluateCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Serialize)]
struct CompareCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    threshold: f64,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Independent,
    Simultaneous,
}

#[derive(Args, Serialize)]
struct ClasswiseCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "independent")]
    mode: ModeArg,
    /// Concurrent solves in independent mode.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Args, Serialize)]
struct TransferCmd {
    #[arg(long)]
    arch: String,
    #[arg(long)]
    source: String,
    #[arg(long)]
    target: String,
    #[arg(long)]
    threshold: f64,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Args, Serialize)]
struct SweepCmd {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated values to sweep.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    threshold: f64,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Args, Serialize)]
struct SweepThresholdCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Args, Serialize)]
struct ExportCmd {
    #[arg(long)]
    model: PathBuf,
    /// Also solve, then write the solution and the report.
    #[arg(long)]
    solve: bool,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Args, Serialize)]
struct ImportCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    solution: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    score: ScoreArgs,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            optimizer: self.optimizer.parse::<Optimizer>()?,
            seed,
        })
    }
}

impl ScoreArgs {
    fn config(&self) -> Result<ScoreConfig> {
        let time_limit = match self.time_limit {
            Some(t) if !(t > 0.0) || !t.is_finite() => bail!("time limit must be positive"),
            Some(t) => Some(Duration::from_secs_f64(t)),
            None => None,
        };
        Ok(ScoreConfig {
            lambda: self.lambda,
            epsilon: self.epsilon,
            rescale: self.rescale.parse::<Rescale>()?,
            solver: SolverConfig {
                gap_tol: self.gap,
                node_limit: self.node_limit,
                time_limit,
                ..SolverConfig::default()
            },
        })
    }
}

/// Training and test splits for one seed.
fn datasets(args: &DataArgs, seeds: &Seeds) -> Result<(Dataset, Dataset)> {
    let spec: DatasetSpec = args.data.parse()?;
    let train = spec.with_seed(seeds.data).generate()?;
    let test = spec
        .with_seed(seeds.test_data)
        .with_n(args.test_per_class)
        .generate()?;
    Ok((train, test))
}

fn load_model(dir: &RunDir, path: &Path) -> Result<Network> {
    let net = Network::load(path).with_context(|| format!("loading model {}", path.display()))?;
    dir.keep_input("input_model.net", path)?;
    Ok(net)
}

fn load_report(dir: &RunDir, path: &Path) -> Result<ImportanceReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    dir.write("input_report.json", &text)?;
    Ok(ImportanceReport::from_text(&text)?)
}

fn print_scores(report: &ImportanceReport) {
    for ls in &report.layers {
        let mean = ls.scores.iter().sum::<f64>() / ls.scores.len() as f64;
        let zeros = ls.scores.iter().filter(|&&s| s <= 1e-9).count();
        println!(
            "layer {}: {} units, mean score {mean:.3}, {zeros} at zero",
            ls.layer,
            ls.scores.len()
        );
    }
}

/// Scores `net` on `batch`, writing the report and the optional log and
/// bounds files.
fn score_into(dir: &RunDir, net: &Network, batch: &Batch, args: &ScoreArgs) -> Result<ImportanceReport> {
    let cfg = args.config()?;
    if args.dump_bounds {
        let b = propagate_batch(net, &batch.inputs, cfg.epsilon)?;
        dir.write("bounds.csv", &bounds_csv(&b))?;
    }
    let (report, sol) = score(net, batch, &cfg)?;
    if args.log {
        dir.write("node_log.txt", &node_log_text(&sol.node_log))?;
    }
    dir.write("report.json", &report.to_text())?;
    println!(
        "solve: {:?}, objective {:.6}, gap {:.2e}, {} nodes, {} cut rounds, {:.2}s",
        sol.status,
        sol.objective,
        sol.gap,
        sol.nodes,
        sol.cut_rounds,
        sol.wall_time.as_secs_f64()
    );
    print_scores(&report);
    Ok(report)
}

fn mask_for(net: &Network, report: &ImportanceReport, threshold: f64) -> Result<Mask> {
    // Clamp and empty-layer warnings go to the log.
    Ok(mask_from_scores(net, report, threshold)?.0)
}

#[derive(Serialize)]
struct Recorded<'a, T> {
    args: &'a T,
    common: &'a Common,
}

fn record<T: Serialize>(command: &str, args: &T, common: &Common) -> Result<RunConfig> {
    RunConfig::new(command, &Recorded { args, common })
}

fn execute(cli: Cli) -> Result<PathBuf> {
    let seeds = Seeds::from_seed(cli.common.seed);
    let (name, config) = match &cli.command {
        Command::Train(a) => ("train", record("train", a, &cli.common)?),
        Command::Score(a) => ("score", record("score", a, &cli.common)?),
        Command::Prune(a) => ("prune", record("prune", a, &cli.common)?),
        Command::Evaluate(a) => ("evaluate", record("evaluate", a, &cli.common)?),
        Command::CompareBaselines(a) => ("compare-baselines", record("compare-baselines", a, &cli.common)?),
        Command::ScoreClasswise(a) => ("score-classwise", record("score-classwise", a, &cli.common)?),
        Command::Transfer(a) => ("transfer", record("transfer", a, &cli.common)?),
        Command::SweepLambda(a) => ("sweep-lambda", record("sweep-lambda", a, &cli.common)?),
        Command::SweepThreshold(a) => ("sweep-threshold", record("sweep-threshold", a, &cli.common)?),
        Command::SweepRescale(a) => ("sweep-rescale", record("sweep-rescale", a, &cli.common)?),
        Command::ExportLp(a) => ("export-lp", record("export-lp", a, &cli.common)?),
        Command::ImportSolution(a) => ("import-solution", record("import-solution", a, &cli.common)?),
    };
    log::debug!("running {name}");
    let dir = RunDir::create(cli.common.out.as_deref(), &cli.common.out_root, &config, Some(seeds))?;

    match &cli.command {
        Command::Train(a) => {
            let arch: Architecture = a.arch.parse()?;
            let (train_ds, test) = datasets(&a.data, &seeds)?;
            let net = init(&arch, seeds.init)?;
            let outcome = train(&net, &train_ds, &a.train.config(seeds.train)?)?;
            outcome.net.save(dir.file("model.net"))?;
            dir.write("trace.csv", &trace_csv(&outcome.trace))?;
            println!(
                "trained {arch}: train accuracy {:.4}, test accuracy {:.4}",
                evaluate(&outcome.net, &train_ds, None)?,
                evaluate(&outcome.net, &test, None)?
            );
        }
        Command::Score(a) => {
            let net = load_model(&dir, &a.model)?;
            let (train_ds, _) = datasets(&a.data, &seeds)?;
            let batch = balanced_batch(&train_ds, a.score.batch_per_class, seeds.batch)?;
            score_into(&dir, &net, &batch, &a.score)?;
        }
        Command::Prune(a) => {
            let net = load_model(&dir, &a.model)?;
            let report = load_report(&dir, &a.report)?;
            let mask = mask_for(&net, &report, a.threshold)?;
            dir.write("mask.json", &pretty(&mask)?)?;
            apply_mask(&net, &mask)?.save(dir.file("pruned.net"))?;
            println!(
                "pruned {} of {} units ({:.1}%)",
                mask.masked_count(),
                mask.maskable_count(),
                100.0 * mask.pruned_fraction()
            );
        }
        Command::Evaluate(a) => {
            let net = load_model(&dir, &a.model)?;
            let mask: Option<Mask> = match &a.mask {
                Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
                None => None,
            };
            let (_, test) = datasets(&a.data, &seeds)?;
            let acc = evaluate(&net, &test, mask.as_ref())?;
            dir.write("evaluation.json", &pretty(&serde_json::json!({ "accuracy": acc }))?)?;
            println!("test accuracy {acc:.4}");
        }
        Command::CompareBaselines(a) => {
            let net = load_model(&dir, &a.model)?;
            let report = load_report(&dir, &a.report)?;
            mask_for(&net, &report, a.threshold)?;
            let (train_ds, test) = datasets(&a.data, &seeds)?;
            let tc = a.train.config(seeds.train)?;
            let r = compare(&net, &train_ds, &test, &report, a.threshold, &tc, seeds)?;
            dir.write("comparison.json", &pretty(&r)?)?;
            println!(
                "accuracy: reference {:.4}, ours {:.4}, ours fine-tuned {:.4}, random {:.4}, critical {:.4}; pruned {:.1}%",
                r.reference, r.ours, r.ours_finetuned, r.random, r.critical, r.prune_pct
            );
        }
        Command::ScoreClasswise(a) => {
            if a.jobs == 0 {
                bail!("--jobs must be at least 1");
            }
            let net = load_model(&dir, &a.model)?;
            let (train_ds, _) = datasets(&a.data, &seeds)?;
            let mode = match a.mode {
                ModeArg::Independent => ClasswiseMode::Independent,
                ModeArg::Simultaneous => ClasswiseMode::Simultaneous,
            };
            let cfg = a.score.config()?;
            let report = score_classwise(&net, &train_ds, a.score.batch_per_class, &cfg, mode, seeds.batch, a.jobs)?;
            dir.write("report.json", &report.to_text())?;
            print_scores(&report);
        }
        Command::Transfer(a) => {
            let tc = a.train.config(seeds.train)?;
            let cfg = TransferConfig {
                arch: a.arch.parse()?,
                source: a.source.parse()?,
                target: a.target.parse()?,
                test_per_class: a.test_per_class,
                source_train: tc,
                target_train: tc,
                score: a.score.config()?,
                batch_per_class: a.score.batch_per_class,
                threshold: a.threshold,
                seed: cli.common.seed,
            };
            let (r, report) = transfer(&cfg)?;
            dir.write("report.json", &report.to_text())?;
            dir.write("transfer.json", &pretty(&r)?)?;
            println!(
                "source accuracy {:.4}; target accuracy masked {:.4}, reference {:.4}; pruned {:.1}%",
                r.source_accuracy, r.masked, r.reference, r.prune_pct
            );
        }
        Command::SweepLambda(a) | Command::SweepRescale(a) => {
            let settings = a
                .values
                .iter()
                .map(|v| match &cli.command {
                    Command::SweepLambda(_) => v
                        .parse::<f64>()
                        .map(Setting::Lambda)
                        .with_context(|| format!("bad lambda '{v}'")),
                    _ => Ok(Setting::Rescale(v.parse::<Rescale>()?)),
                })
                .collect::<Result<Vec<_>>>()?;
            run_sweep(&dir, &seeds, &a.model, &a.data, &a.score, a.threshold, &settings)?;
        }
        Command::SweepThreshold(a) => {
            let settings: Vec<Setting> = a.values.iter().map(|&t| Setting::Threshold(t)).collect();
            run_sweep(&dir, &seeds, &a.model, &a.data, &a.score, 0.0, &settings)?;
        }
        Command::ExportLp(a) => {
            let net = load_model(&dir, &a.model)?;
            let (train_ds, _) = datasets(&a.data, &seeds)?;
            let batch = balanced_batch(&train_ds, a.score.batch_per_class, seeds.batch)?;
            let cfg = a.score.config()?;
            let (mut model, reference) = build_model(&net, &batch, &cfg)?;
            if a.solve {
                let start = warm_start(&model, &reference)?;
                let sol = solve_mip(&mut model, &cfg.solver, Some(start))?;
                dir.write("solution.sol", &write_solution(&model, &sol.values, sol.objective))?;
                let stats = vec![SolverStats::from_solution(&sol, &cfg.solver)];
                let report = report_from_values(&model, &sol.values, &batch, &cfg, stats);
                dir.write("report.json", &report.to_text())?;
                if a.score.log {
                    dir.write("node_log.txt", &node_log_text(&sol.node_log))?;
                }
                println!("solved: {:?}, objective {:.6}", sol.status, sol.objective);
            }
            dir.write("model.lp", &export_lp(&model))?;
            println!(
                "exported {} variables and {} constraints",
                model.n_vars(),
                model.constraints.len() + model.cuts.len()
            );
        }
        Command::ImportSolution(a) => {
            let net = load_model(&dir, &a.model)?;
            let (train_ds, _) = datasets(&a.data, &seeds)?;
            let batch = balanced_batch(&train_ds, a.score.batch_per_class, seeds.batch)?;
            let cfg = a.score.config()?;
            let (model, _) = build_model(&net, &batch, &cfg)?;
            let text = std::fs::read_to_string(&a.solution)
                .with_context(|| format!("reading {}", a.solution.display()))?;
            dir.write("input_solution.sol", &text)?;
            let (values, objective) = read_solution(&model, &text)?;
            if let Err(e) = model.check_assignment(&values, 1e-6) {
                eprintln!("warning: solution violates the model: {e}");
            }
            let report = report_from_values(&model, &values, &batch, &cfg, Vec::new());
            dir.write("report.json", &report.to_text())?;
            match objective {
                Some(v) => println!("imported solution with objective {v:.6}"),
                None => println!("imported solution"),
            }
            print_scores(&report);
        }
    }
    Ok(dir.path)
}

fn run_sweep(
    dir: &RunDir,
    seeds: &Seeds,
    model: &Path,
    data: &DataArgs,
    score: &ScoreArgs,
    threshold: f64,
    settings: &[Setting],
) -> Result<()> {
    let net = load_model(dir, model)?;
    let (train_ds, test) = datasets(data, seeds)?;
    let batch = balanced_batch(&train_ds, score.batch_per_class, seeds.batch)?;
    let rows = sweep(&net, &batch, &test, &score.config()?, threshold, settings)?;
    dir.write("sweep.csv", &sweep_csv(&rows))?;
    for r in &rows {
        let label = match r.setting {
            Setting::Lambda(v) => format!("lambda {v}"),
            Setting::Threshold(v) => format!("threshold {v}"),
            Setting::Rescale(v) => format!("rescale {v}"),
        };
        println!("{label}: accuracy {:.4}, pruned {:.1}%", r.accuracy, r.prune_pct);
    }
    Ok(())
}

/// The error chain joined with `: `, skipping causes that the previous
/// message already quotes.
fn message(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format(|buf, rec| {
            use std::io::Write;
            writeln!(buf, "{}: {}", rec.level().as_str().to_lowercase(), rec.args())
        })
        .init();
    // Usage errors exit with status 2 inside `parse`.
    let cli = Cli::parse();
    match execute(cli) {
        Ok(path) => {
            println!("run directory: {}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(1)
        }
    }
}
