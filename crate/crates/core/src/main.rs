//! `fedadm`: validate, solve, train, evaluate, sweep and report.
//!
//! Exit codes: 0 on success, 1 when a run violates an invariant or fails
//! numerically, 2 for usage errors (bad flags, unreadable or invalid config).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fedadm::agents::{
    evaluate_policy, q_learning_train, r_learning_train, simulated_profit, CurveSpec, EpisodeUnit,
    LearningParams,
};
use fedadm::dp::{policy_iteration, DpParams};
use fedadm::harness::{
    format_report, read_csv, run_sweep, summarize_rows, Algorithm, CsvSink, ExperimentKind,
    ExperimentSpec,
};
use fedadm::mdp::{exact_average_profit, validate_model, TransitionModel};
use fedadm::policy_file::PolicyFile;
use fedadm::sim::{run_policy, DecisionRule, RunOptions};
use fedadm::{DiscountEpoch, Error, Policy, SystemConfig};

const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(
    name = "fedadm",
    version,
    about = "Admission control under two-domain service federation",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every transition row of the model for a config.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Solve the model by policy iteration and write the policy.
    Solve(SolveArgs),
    /// Train a Q-Learning or R-Learning agent and write its greedy policy.
    Train(TrainArgs),
    /// Simulate a policy and report its profit and optimality gap.
    Evaluate(EvaluateArgs),
    /// Run one of the experiment sweeps and write a CSV.
    Sweep(SweepArgs),
    /// Print mean profit and gap per algorithm from a sweep CSV.
    Report { csv: PathBuf },
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    /// Evaluation stops when no value moves by more than this in a sweep.
    #[arg(long, default_value_t = 1e-6)]
    theta: f64,
    /// Discount every transition or once per demand.
    #[arg(long, value_enum, default_value_t = DiscountEpoch::Demand)]
    discount_per: DiscountEpoch,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum LearnerArg {
    Q,
    R,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    algo: LearnerArg,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    beta: f64,
    #[arg(long, default_value_t = 0.9)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Per-episode multiplier of α, β and ε.
    #[arg(long, default_value_t = 0.99)]
    decay: f64,
    /// What the per-episode step budget counts.
    #[arg(long, value_enum, default_value_t = EpisodeUnit::Steps)]
    episode_unit: EpisodeUnit,
    /// Unit of time for the discount and the average-reward estimate.
    #[arg(long, value_enum, default_value_t = DiscountEpoch::Transition)]
    discount_per: DiscountEpoch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-episode learning curve (CSV).
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Reference policy for the curve's gap column; solved if absent.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    curve_seeds: u64,
    #[arg(long, default_value_t = 20_000)]
    curve_demands: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    demands: u64,
    /// Number of evaluation seeds.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// First evaluation seed; seeds are consecutive.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reference policy for the gap; the config is solved if absent.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Take the reference profit from the stationary distribution instead
    /// of simulating the reference policy on the same seeds.
    #[arg(long)]
    exact_reference: bool,
    /// Line-delimited JSON trajectory of the first seed's run.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: ExperimentKind,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated sweep values; the built-in grid if absent.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Comma-separated algorithm labels (dp, greedy, QL-<γ>, RL).
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<String>>,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 100_000)]
    demands: u64,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::ConfigMismatch { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Validate { config } => validate(&config),
        Command::Solve(args) => solve(&args),
        Command::Train(args) => train(&args),
        Command::Evaluate(args) => evaluate(&args),
        Command::Sweep(args) => sweep(&args),
        Command::Report { csv } => report(&csv),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("fedadm: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path) -> Result<SystemConfig, Failure> {
    SystemConfig::load(path).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn validate(path: &Path) -> CliResult {
    let config = load_config(path)?;
    let started = Instant::now();
    let v = validate_model(&config, ROW_TOLERANCE)?;
    println!("states: {}", v.num_states);
    println!("legal rows: {}", v.num_rows);
    println!(
        "row-sum deviation: min {:.3e}, max {:.3e}",
        v.min_row_sum_deviation, v.max_row_sum_deviation
    );
    println!("elapsed: {:.2?}", started.elapsed());
    if v.is_ok() {
        println!("all row sums within {ROW_TOLERANCE:e}");
        Ok(())
    } else {
        for violation in v.violations.iter().take(20) {
            println!("violation: {violation}");
        }
        Err(Failure {
            code: 1,
            message: format!("{} invariant violations", v.violations.len()),
        })
    }
}

#[derive(Serialize)]
struct SolveReport {
    config_hash: String,
    num_states: usize,
    discount: f64,
    tolerance: f64,
    discount_per: DiscountEpoch,
    improvement_rounds: usize,
    evaluation_sweeps: usize,
    final_delta: f64,
    exact_average_profit: f64,
    seconds: f64,
}

/// `policy.json` → `policy.report.json`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}.json"))
}

fn dp_params(gamma: f64, theta: f64, epoch: DiscountEpoch) -> DpParams {
    DpParams {
        discount: gamma,
        tolerance: theta,
        epoch,
        ..DpParams::default()
    }
}

fn solve(args: &SolveArgs) -> CliResult {
    let config = load_config(&args.config)?;
    let params = dp_params(args.gamma, args.theta, args.discount_per);
    params.validate()?;
    let started = Instant::now();
    let model = TransitionModel::build(&config)?;
    let sol = policy_iteration(&params, &model)?;
    let policy = sol.policy(&model);
    let profit = exact_average_profit(&policy, &model)?;
    let report = SolveReport {
        config_hash: config.content_hash(),
        num_states: model.num_states(),
        discount: params.discount,
        tolerance: params.tolerance,
        discount_per: params.epoch,
        improvement_rounds: sol.iterations,
        evaluation_sweeps: sol.eval_sweeps,
        final_delta: sol.final_delta,
        exact_average_profit: profit,
        seconds: started.elapsed().as_secs_f64(),
    };
    PolicyFile::from_policy(&policy, model.space(), &config).save(&args.out)?;
    let report_path = sidecar(&args.out, "report");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    println!(
        "solved {} states in {} rounds ({} sweeps); exact average profit {profit:.6}",
        report.num_states, report.improvement_rounds, report.evaluation_sweeps
    );
    println!("policy: {}; report: {}", args.out.display(), report_path.display());
    Ok(())
}

fn load_policy(path: &Path, config: &SystemConfig) -> Result<(Policy, TransitionModel), Failure> {
    let model = TransitionModel::build(config)?;
    let file = PolicyFile::load(path)?;
    let policy = file.to_policy(model.space(), config)?;
    Ok((policy, model))
}

fn dp_policy(config: &SystemConfig) -> Result<(Policy, TransitionModel), Failure> {
    let model = TransitionModel::build(config)?;
    let sol = policy_iteration(&DpParams::default(), &model)?;
    Ok((sol.policy(&model), model))
}

fn reference_policy(
    path: Option<&Path>,
    config: &SystemConfig,
) -> Result<(Policy, TransitionModel), Failure> {
    match path {
        Some(p) => load_policy(p, config),
        None => dp_policy(config),
    }
}

fn train(args: &TrainArgs) -> CliResult {
    let config = load_config(&args.config)?;
    let params = LearningParams {
        episodes: args.episodes,
        steps_per_episode: args.steps,
        learning_rate: args.alpha,
        exploration: args.epsilon,
        discount: args.gamma,
        epoch: args.discount_per,
        rho_rate: args.beta,
        decay: args.decay,
        episode_unit: args.episode_unit,
    };
    params.validate()?;
    let curve = match &args.curve {
        Some(_) => {
            let eval_seeds: Vec<u64> = (0..args.curve_seeds).map(|k| 1_000_000 + k).collect();
            let (reference, _) = reference_policy(args.reference.as_deref(), &config)?;
            let reference = simulated_profit(&reference, &config, args.curve_demands, &eval_seeds)?;
            Some(CurveSpec {
                eval_seeds,
                demands: args.curve_demands,
                reference,
            })
        }
        None => None,
    };
    let started = Instant::now();
    let agent = match args.algo {
        LearnerArg::Q => q_learning_train(&config, &params, args.seed, curve.as_ref())?,
        LearnerArg::R => r_learning_train(&config, &params, args.seed, curve.as_ref())?,
    };
    if !agent.qtable.all_finite() {
        return Err(Failure {
            code: 1,
            message: "training produced non-finite Q values".into(),
        });
    }
    let model = TransitionModel::build(&config)?;
    PolicyFile::from_policy(&agent.policy, model.space(), &config).save(&args.out)?;
    println!(
        "trained {} episodes in {:.2?}; {} states visited of {}",
        params.episodes,
        started.elapsed(),
        agent.qtable.len(),
        model.num_states()
    );
    if args.algo == LearnerArg::R {
        println!("final rho: {:.6}", agent.rho_series.last().copied().unwrap_or(0.0));
    }
    println!("policy: {}", args.out.display());
    if let (Some(path), Some(spec)) = (&args.curve, &curve) {
        let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
        w.write_record(["episode", "avg_profit", "gap", "rho", "fallbacks"])
            .map_err(Error::from)?;
        for (k, r) in agent.curve.iter().enumerate() {
            w.write_record([
                (k + 1).to_string(),
                r.average_profit.to_string(),
                r.optimality_gap.to_string(),
                agent.rho_series[k].to_string(),
                r.fallbacks.to_string(),
            ])
            .map_err(Error::from)?;
        }
        w.flush()?;
        println!("curve: {} (reference {:.4})", path.display(), spec.reference);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateOutput<'a> {
    #[serde(flatten)]
    report: &'a fedadm::agents::EvalReport,
    reference_kind: &'static str,
}

fn evaluate(args: &EvaluateArgs) -> CliResult {
    let config = load_config(&args.config)?;
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let (policy, _) = load_policy(&args.policy, &config)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|k| args.seed + k).collect();
    let (reference, model) = reference_policy(args.reference.as_deref(), &config)?;
    let (reference_profit, reference_kind) = if args.exact_reference {
        (exact_average_profit(&reference, &model)?, "exact")
    } else {
        (simulated_profit(&reference, &config, args.demands, &seeds)?, "simulated")
    };
    let report = evaluate_policy(&policy, &config, args.demands, &seeds, reference_profit)?;
    if let Some(path) = &args.trace {
        let mut out = BufWriter::new(File::create(path)?);
        run_policy(
            &config,
            &policy as &dyn DecisionRule,
            args.demands,
            seeds[0],
            RunOptions {
                record_outcomes: false,
                trace: Some(&mut out),
            },
        )?;
        out.flush()?;
    }
    let output = EvaluateOutput {
        report: &report,
        reference_kind,
    };
    println!("{}", serde_json::to_string_pretty(&output).map_err(Error::from)?);
    Ok(())
}

fn sweep(args: &SweepArgs) -> CliResult {
    let config = load_config(&args.config)?;
    let mut spec = ExperimentSpec::new(args.kind, config);
    if let Some(values) = &args.values {
        spec.sweep_values = values.clone();
    }
    if let Some(labels) = &args.algorithms {
        spec.algorithms = labels
            .iter()
            .map(|l| Algorithm::parse(l).ok_or_else(|| usage(format!("unknown algorithm {l:?}"))))
            .collect::<Result<_, _>>()?;
    }
    spec.repetitions = args.repetitions;
    spec.eval_demands = args.demands;
    spec.learning.episodes = args.episodes;
    spec.learning.steps_per_episode = args.steps;
    spec.seed_base = args.seed;
    spec.validate()?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut sink = CsvSink::new(BufWriter::new(File::create(&args.out)?))?;
    let started = Instant::now();
    let rows = run_sweep(&spec, args.jobs, Some(&mut sink)).map_err(|e| Failure {
        code: 1,
        message: format!("{e} (rows completed so far are in {})", args.out.display()),
    })?;
    println!(
        "{} rows written to {} in {:.2?}",
        rows.len(),
        args.out.display(),
        started.elapsed()
    );
    print!("{}", format_report(&summarize_rows(&rows)));
    Ok(())
}

fn report(path: &Path) -> CliResult {
    let rows = read_csv(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    print!("{}", format_report(&summarize_rows(&rows)));
    Ok(())
}
