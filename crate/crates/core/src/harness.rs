//! Experiment sweeps: derive a config per sweep value, solve it exactly,
//! train the learners with independent seeds, evaluate every policy on a
//! shared evaluation seed set and emit one CSV row per (algorithm, seed)
//! plus a mean row per algorithm.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::agents::{
    mean, optimality_gap, train, Greedy, LearnerKind, LearningParams,
};
use crate::dp::{policy_iteration, DpParams};
use crate::error::{Error, Result};
use crate::mdp::TransitionModel;
use crate::model::{Policy, SystemConfig};
use crate::seed::{derive_seed, label_hash};
use crate::sim::{run_policy, DecisionRule, RunOptions, RunSummary};

pub const CSV_HEADER: [&str; 9] = [
    "experiment",
    "sweep",
    "algorithm",
    "seed",
    "avg_profit",
    "gap",
    "accepted",
    "federated",
    "rejected",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Episodes,
    LocalCapacity,
    OfferedLoad,
    FederationCost,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Episodes => "episodes",
            ExperimentKind::LocalCapacity => "local_capacity",
            ExperimentKind::OfferedLoad => "offered_load",
            ExperimentKind::FederationCost => "federation_cost",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            ExperimentKind::Episodes => vec![10.0, 25.0, 50.0, 100.0, 150.0, 200.0],
            ExperimentKind::LocalCapacity => vec![10.0, 20.0, 30.0, 45.0, 60.0, 90.0, 120.0],
            ExperimentKind::OfferedLoad => vec![0.25, 0.5, 1.0, 1.5, 2.0],
            ExperimentKind::FederationCost => vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0],
        }
    }

    /// The configuration a sweep value stands for.
    pub fn apply(self, base: &SystemConfig, value: f64) -> SystemConfig {
        match self {
            ExperimentKind::Episodes => base.clone(),
            ExperimentKind::LocalCapacity => base.with_local_capacity(value as u32),
            ExperimentKind::OfferedLoad => base.with_load_scale(value),
            ExperimentKind::FederationCost => base.with_cost_scale(value),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Algorithm {
    Dp,
    Greedy,
    QLearning { discount: f64 },
    RLearning,
}

impl Algorithm {
    pub fn label(&self) -> String {
        match self {
            Algorithm::Dp => "dp".into(),
            Algorithm::Greedy => "greedy".into(),
            Algorithm::QLearning { discount } => format!("QL-{discount}"),
            Algorithm::RLearning => "RL".into(),
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        match label {
            "dp" => Some(Algorithm::Dp),
            "greedy" => Some(Algorithm::Greedy),
            "RL" | "rl" => Some(Algorithm::RLearning),
            _ => label
                .strip_prefix("QL-")
                .or_else(|| label.strip_prefix("ql-"))
                .and_then(|g| g.parse().ok())
                .map(|discount| Algorithm::QLearning { discount }),
        }
    }

    fn is_learner(&self) -> bool {
        matches!(self, Algorithm::QLearning { .. } | Algorithm::RLearning)
    }
}

pub fn default_algorithms() -> Vec<Algorithm> {
    vec![
        Algorithm::Dp,
        Algorithm::Greedy,
        Algorithm::QLearning { discount: 0.5 },
        Algorithm::QLearning { discount: 0.9 },
        Algorithm::RLearning,
    ]
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub sweep_values: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    pub repetitions: usize,
    pub base_config: SystemConfig,
    pub eval_demands: u64,
    pub seed_base: u64,
    pub learning: LearningParams,
    pub dp: DpParams,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, base_config: SystemConfig) -> Self {
        Self {
            kind,
            sweep_values: kind.default_grid(),
            algorithms: default_algorithms(),
            repetitions: 10,
            base_config,
            eval_demands: 100_000,
            seed_base: 0,
            learning: LearningParams::default(),
            dp: DpParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep_values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.sweep_values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("sweep values must be strictly increasing".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if !self.algorithms.contains(&Algorithm::Dp) {
            return Err(Error::Config("the dp algorithm is required as the gap reference".into()));
        }
        let integral = |v: f64| v >= 0.0 && v.fract() == 0.0;
        match self.kind {
            ExperimentKind::Episodes | ExperimentKind::LocalCapacity
                if !self.sweep_values.iter().all(|&v| integral(v)) =>
            {
                return Err(Error::Config(format!(
                    "{} sweep values must be non-negative integers",
                    self.kind.name()
                )));
            }
            ExperimentKind::Episodes if self.sweep_values[0] < 1.0 => {
                return Err(Error::Config("episode counts must be at least 1".into()));
            }
            _ => {}
        }
        self.learning.validate()?;
        self.dp.validate()?;
        self.base_config.validate()
    }

    /// Seed of the k-th evaluation run, shared by every algorithm and sweep
    /// value.
    pub fn eval_seed(&self, rep: usize) -> u64 {
        derive_seed(&[self.seed_base, label_hash("eval"), rep as u64])
    }

    /// Seed of one training run. Episode sweeps drop the sweep value: all
    /// episode counts are prefixes of the same run.
    pub fn training_seed(&self, value: Option<f64>, algorithm: &Algorithm, rep: usize) -> u64 {
        derive_seed(&[
            self.seed_base,
            label_hash(self.kind.name()),
            value.map_or(u64::MAX, f64::to_bits),
            label_hash(&algorithm.label()),
            rep as u64,
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub sweep: f64,
    pub algorithm: String,
    /// `None` marks the mean row.
    pub seed: Option<u64>,
    pub avg_profit: f64,
    pub gap: f64,
    pub accepted: f64,
    pub federated: f64,
    pub rejected: f64,
}

impl ResultRow {
    fn record(&self) -> [String; 9] {
        [
            self.experiment.clone(),
            self.sweep.to_string(),
            self.algorithm.clone(),
            self.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
            self.avg_profit.to_string(),
            self.gap.to_string(),
            self.accepted.to_string(),
            self.federated.to_string(),
            self.rejected.to_string(),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::Config(format!("bad number {:?} in column {}", field(i), CSV_HEADER[i])))
        };
        let seed = match field(3) {
            "mean" => None,
            s => Some(
                s.parse()
                    .map_err(|_| Error::Config(format!("bad seed {s:?}")))?,
            ),
        };
        Ok(Self {
            experiment: field(0).to_string(),
            sweep: num(1)?,
            algorithm: field(2).to_string(),
            seed,
            avg_profit: num(4)?,
            gap: num(5)?,
            accepted: num(6)?,
            federated: num(7)?,
            rejected: num(8)?,
        })
    }
}

pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(inner: W) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record(CSV_HEADER)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn write_rows(&mut self, rows: &[ResultRow]) -> Result<()> {
        for row in rows {
            self.writer.write_record(row.record())?;
        }
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Config(format!(
            "unexpected CSV header {:?}, expected {}",
            header.iter().collect::<Vec<_>>(),
            CSV_HEADER.join(",")
        )));
    }
    reader
        .records()
        .map(|rec| ResultRow::from_record(&rec?))
        .collect()
}

/// One evaluated policy: sweep value, algorithm, repetition and its run.
struct Evaluated {
    value: f64,
    algorithm: usize,
    rep: usize,
    run: RunSummary,
}

fn cell_error(kind: ExperimentKind, value: f64, label: &str, rep: Option<usize>, e: Error) -> Error {
    let rep = rep.map_or_else(String::new, |r| format!("/rep {r}"));
    Error::Cell {
        cell: format!("{}={value}/{label}{rep}", kind.name()),
        source: Box::new(e),
    }
}

struct DpCell {
    value: f64,
    config: SystemConfig,
    policy: Policy,
}

fn solve_cell(spec: &ExperimentSpec, value: f64) -> Result<DpCell> {
    let config = spec.kind.apply(&spec.base_config, value);
    let solve = || -> Result<Policy> {
        let model = TransitionModel::build(&config)?;
        let sol = policy_iteration(&spec.dp, &model)?;
        Ok(sol.policy(&model))
    };
    let policy = solve().map_err(|e| cell_error(spec.kind, value, "dp", None, e))?;
    Ok(DpCell {
        value,
        config,
        policy,
    })
}

fn evaluate(
    spec: &ExperimentSpec,
    config: &SystemConfig,
    rule: &dyn DecisionRule,
    rep: usize,
) -> Result<RunSummary> {
    run_policy(
        config,
        rule,
        spec.eval_demands,
        spec.eval_seed(rep),
        RunOptions::default(),
    )
}

/// Trains one learner and evaluates its readout after each of `checkpoints`
/// episodes (just the final one outside episode sweeps).
fn train_and_evaluate(
    spec: &ExperimentSpec,
    cell: &DpCell,
    checkpoints: &[(f64, usize)],
    alg_index: usize,
    rep: usize,
) -> Result<Vec<Evaluated>> {
    let algorithm = spec.algorithms[alg_index];
    let (kind, discount) = match algorithm {
        Algorithm::QLearning { discount } => (LearnerKind::QLearning, discount),
        Algorithm::RLearning => (LearnerKind::RLearning, spec.learning.discount),
        _ => unreachable!("only learners are trained"),
    };
    let episodes = checkpoints.iter().map(|&(_, n)| n).max().unwrap_or(0);
    let params = LearningParams {
        episodes,
        discount,
        ..spec.learning
    };
    let seed_value = (spec.kind != ExperimentKind::Episodes).then_some(cell.value);
    let seed = spec.training_seed(seed_value, &algorithm, rep);
    let mut out = Vec::new();
    train(kind, &cell.config, &params, seed, |episode, run| {
        for &(value, _) in checkpoints.iter().filter(|&&(_, n)| n == episode) {
            let policy = run.qtable.readout(&cell.config);
            let summary = evaluate(spec, &cell.config, &policy, rep)?;
            out.push(Evaluated {
                value,
                algorithm: alg_index,
                rep,
                run: summary,
            });
        }
        Ok(())
    })?;
    Ok(out)
}

fn summarize(spec: &ExperimentSpec, value: f64, mut evaluated: Vec<Evaluated>) -> Result<Vec<ResultRow>> {
    evaluated.sort_by_key(|e| (e.algorithm, e.rep));
    let dp_index = spec
        .algorithms
        .iter()
        .position(|a| *a == Algorithm::Dp)
        .expect("validated");
    let reference: BTreeMap<usize, f64> = evaluated
        .iter()
        .filter(|e| e.algorithm == dp_index)
        .map(|e| (e.rep, e.run.profit_per_demand))
        .collect();
    let mut rows = Vec::new();
    for (alg_index, algorithm) in spec.algorithms.iter().enumerate() {
        let label = algorithm.label();
        let mut seed_rows = Vec::new();
        for e in evaluated.iter().filter(|e| e.algorithm == alg_index) {
            let reference = reference[&e.rep];
            let gap = if alg_index == dp_index {
                0.0
            } else {
                optimality_gap(reference, e.run.profit_per_demand)
                    .map_err(|err| cell_error(spec.kind, value, &label, Some(e.rep), err))?
            };
            seed_rows.push(ResultRow {
                experiment: spec.kind.name().to_string(),
                sweep: value,
                algorithm: label.clone(),
                seed: Some(e.rep as u64),
                avg_profit: e.run.profit_per_demand,
                gap,
                accepted: e.run.decisions.total_accepted() as f64,
                federated: e.run.decisions.total_federated() as f64,
                rejected: e.run.decisions.total_rejected() as f64,
            });
        }
        let column = |f: fn(&ResultRow) -> f64| mean(&seed_rows.iter().map(f).collect::<Vec<_>>());
        let mean_row = ResultRow {
            experiment: spec.kind.name().to_string(),
            sweep: value,
            algorithm: label.clone(),
            seed: None,
            avg_profit: column(|r| r.avg_profit),
            gap: column(|r| r.gap),
            accepted: column(|r| r.accepted),
            federated: column(|r| r.federated),
            rejected: column(|r| r.rejected),
        };
        rows.extend(seed_rows);
        rows.push(mean_row);
    }
    Ok(rows)
}

enum Task<'a> {
    Fixed { cell: &'a DpCell, alg: usize, rep: usize },
    Learner { cell: &'a DpCell, checkpoints: Vec<(f64, usize)>, alg: usize, rep: usize },
}

fn run_task(spec: &ExperimentSpec, task: &Task<'_>) -> Result<Vec<Evaluated>> {
    match *task {
        Task::Fixed { cell, alg, rep } => {
            let rule: &dyn DecisionRule = match spec.algorithms[alg] {
                Algorithm::Dp => &cell.policy,
                _ => &Greedy,
            };
            let run = evaluate(spec, &cell.config, rule, rep).map_err(|e| {
                cell_error(spec.kind, cell.value, &spec.algorithms[alg].label(), Some(rep), e)
            })?;
            Ok(vec![Evaluated {
                value: cell.value,
                algorithm: alg,
                rep,
                run,
            }])
        }
        Task::Learner {
            cell,
            ref checkpoints,
            alg,
            rep,
        } => train_and_evaluate(spec, cell, checkpoints, alg, rep).map_err(|e| {
            let value = if checkpoints.len() == 1 { checkpoints[0].0 } else { cell.value };
            cell_error(spec.kind, value, &spec.algorithms[alg].label(), Some(rep), e)
        }),
    }
}

fn tasks_for<'a>(spec: &ExperimentSpec, cell: &'a DpCell, checkpoints: &[(f64, usize)]) -> Vec<Task<'a>> {
    let mut tasks = Vec::new();
    for (alg, algorithm) in spec.algorithms.iter().enumerate() {
        for rep in 0..spec.repetitions {
            if algorithm.is_learner() {
                tasks.push(Task::Learner {
                    cell,
                    checkpoints: checkpoints.to_vec(),
                    alg,
                    rep,
                });
            } else {
                tasks.push(Task::Fixed { cell, alg, rep });
            }
        }
    }
    tasks
}

/// Runs the sweep on a pool of `jobs` workers. Rows of completed sweep
/// values are written to `sink` as soon as they are known, so a failure
/// leaves a valid partial CSV behind.
pub fn run_sweep<W: Write>(
    spec: &ExperimentSpec,
    jobs: usize,
    mut sink: Option<&mut CsvSink<W>>,
) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let mut rows = Vec::new();

    let mut emit = |value_rows: Vec<ResultRow>, rows: &mut Vec<ResultRow>| -> Result<()> {
        if let Some(sink) = sink.as_deref_mut() {
            sink.write_rows(&value_rows)?;
        }
        rows.extend(value_rows);
        Ok(())
    };

    if spec.kind == ExperimentKind::Episodes {
        let cell = solve_cell(spec, 0.0)?;
        let checkpoints: Vec<(f64, usize)> =
            spec.sweep_values.iter().map(|&v| (v, v as usize)).collect();
        let tasks = tasks_for(spec, &cell, &checkpoints);
        let results: Vec<Result<Vec<Evaluated>>> =
            pool.install(|| tasks.par_iter().map(|t| run_task(spec, t)).collect());
        let mut by_value: BTreeMap<usize, Vec<Evaluated>> = BTreeMap::new();
        let mut fixed = Vec::new();
        for r in results {
            for e in r? {
                if spec.algorithms[e.algorithm].is_learner() {
                    let k = spec.sweep_values.iter().position(|&v| v == e.value).expect("checkpoint value");
                    by_value.entry(k).or_default().push(e);
                } else {
                    fixed.push(e);
                }
            }
        }
        for (k, &value) in spec.sweep_values.iter().enumerate() {
            let mut evaluated = by_value.remove(&k).unwrap_or_default();
            evaluated.extend(fixed.iter().map(|e| Evaluated {
                value,
                algorithm: e.algorithm,
                rep: e.rep,
                run: e.run.clone(),
            }));
            emit(summarize(spec, value, evaluated)?, &mut rows)?;
        }
        return Ok(rows);
    }

    let episodes = spec.learning.episodes;
    for &value in &spec.sweep_values {
        let cell = solve_cell(spec, value)?;
        let tasks = tasks_for(spec, &cell, &[(value, episodes)]);
        let results: Vec<Result<Vec<Evaluated>>> =
            pool.install(|| tasks.par_iter().map(|t| run_task(spec, t)).collect());
        let mut evaluated = Vec::new();
        for r in results {
            evaluated.extend(r?);
        }
        emit(summarize(spec, value, evaluated)?, &mut rows)?;
    }
    Ok(rows)
}

/// Mean and 95% confidence half-width (Student t) of a sample.
pub fn mean_and_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid degrees of freedom")
        .inverse_cdf(0.975);
    (m, t * (var / n as f64).sqrt())
}

/// Aggregate line of a `report` table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportLine {
    pub experiment: String,
    pub sweep: f64,
    pub algorithm: String,
    pub mean_profit: f64,
    pub profit_ci95: f64,
    pub mean_gap: f64,
    pub samples: usize,
}

/// Groups seed rows by (experiment, sweep, algorithm) in file order.
pub fn summarize_rows(rows: &[ResultRow]) -> Vec<ReportLine> {
    let mut order: Vec<(String, u64, String)> = Vec::new();
    let mut groups: BTreeMap<(String, u64, String), Vec<&ResultRow>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.seed.is_some()) {
        let key = (row.experiment.clone(), row.sweep.to_bits(), row.algorithm.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }
    order
        .into_iter()
        .map(|key| {
            let group = &groups[&key];
            let profits: Vec<f64> = group.iter().map(|r| r.avg_profit).collect();
            let gaps: Vec<f64> = group.iter().map(|r| r.gap).collect();
            let (mean_profit, profit_ci95) = mean_and_ci95(&profits);
            ReportLine {
                experiment: key.0,
                sweep: f64::from_bits(key.1),
                algorithm: key.2,
                mean_profit,
                profit_ci95,
                mean_gap: mean(&gaps),
                samples: group.len(),
            }
        })
        .collect()
}

pub fn format_report(lines: &[ReportLine]) -> String {
    let mut out = format!(
        "{:<16} {:>8} {:<10} {:>12} {:>10} {:>9} {:>4}\n",
        "experiment", "sweep", "algorithm", "profit", "±ci95", "gap%", "n"
    );
    for l in lines {
        out.push_str(&format!(
            "{:<16} {:>8} {:<10} {:>12.4} {:>10.4} {:>9.3} {:>4}\n",
            l.experiment,
            l.sweep,
            l.algorithm,
            l.mean_profit,
            l.profit_ci95,
            100.0 * l.mean_gap,
            l.samples
        ));
    }
    out
}
