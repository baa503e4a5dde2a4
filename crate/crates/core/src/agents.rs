//! Decision makers: the greedy baseline, tabular Q-Learning and R-Learning,
//! and Monte-Carlo evaluation of any decision rule.

use rand::Rng;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    can_accept, can_federate, valid_actions, Action, ActionSet, DiscountEpoch, Policy, State,
    SystemConfig,
};
use crate::seed::{derive_seed, rng_from_seed, SimRng};
use crate::sim::{run_policy, DecisionCounts, DecisionRule, Env, RunOptions};

/// Accept if the consumer domain has room, else federate if the quota has
/// room, else reject.
pub fn greedy_action(state: &State, config: &SystemConfig) -> Action {
    if !state.is_arrival() {
        Action::NoAction
    } else if can_accept(state, config) {
        Action::Accept
    } else if can_federate(state, config) {
        Action::Federate
    } else {
        Action::Reject
    }
}

pub struct Greedy;

impl DecisionRule for Greedy {
    fn decide(&self, state: &State, config: &SystemConfig) -> Option<Action> {
        Some(greedy_action(state, config))
    }
}

/// State-action values, zero for anything never written.
#[derive(Clone, Debug, Default)]
pub struct QTable {
    values: FxHashMap<State, [f64; 4]>,
}

impl QTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn contains(&self, state: &State) -> bool {
        self.values.contains_key(state)
    }

    pub fn get(&self, state: &State, action: Action) -> f64 {
        self.values
            .get(state)
            .map_or(0.0, |row| row[action.index()])
    }

    pub fn set(&mut self, state: &State, action: Action, value: f64) {
        match self.values.get_mut(state) {
            Some(row) => row[action.index()] = value,
            None => {
                let mut row = [0.0; 4];
                row[action.index()] = value;
                self.values.insert(state.clone(), row);
            }
        }
    }

    /// max over `legal` of Q[state, ·].
    pub fn max_value(&self, state: &State, legal: ActionSet) -> f64 {
        match self.values.get(state) {
            Some(row) => legal
                .iter()
                .map(|a| row[a.index()])
                .fold(f64::NEG_INFINITY, f64::max),
            None => 0.0,
        }
    }

    /// argmax over `legal`; ties resolve to the earlier action in
    /// Accept > Federate > Reject order.
    pub fn best_action(&self, state: &State, legal: ActionSet) -> Action {
        let row = self.values.get(state).copied().unwrap_or([0.0; 4]);
        let mut best: Option<(Action, f64)> = None;
        for a in legal.iter() {
            let q = row[a.index()];
            if best.is_none_or(|(_, b)| q > b) {
                best = Some((a, q));
            }
        }
        best.expect("legal set is never empty").0
    }

    pub fn all_finite(&self) -> bool {
        self.values.values().all(|row| row.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .values()
            .flat_map(|row| row.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Greedy readout over every visited state.
    pub fn readout(&self, config: &SystemConfig) -> Policy {
        self.values
            .keys()
            .map(|s| (s.clone(), self.best_action(s, valid_actions(s, config))))
            .collect()
    }
}

/// With probability ε a uniform legal action, otherwise the greedy one.
pub fn epsilon_greedy(
    qtable: &QTable,
    state: &State,
    legal: ActionSet,
    epsilon: f64,
    rng: &mut SimRng,
) -> Action {
    if legal.len() == 1 {
        return legal.nth(0).expect("nonempty");
    }
    if rng.gen::<f64>() < epsilon {
        legal
            .nth(rng.gen_range(0..legal.len()))
            .expect("index within legal set")
    } else {
        qtable.best_action(state, legal)
    }
}

/// Q[s,a] ← (1−α)Q[s,a] + α(R + γ·max_{a'} Q[s',a']).
#[allow(clippy::too_many_arguments)]
pub fn q_learning_update(
    qtable: &mut QTable,
    state: &State,
    action: Action,
    reward: f64,
    next: &State,
    next_legal: ActionSet,
    alpha: f64,
    discount: f64,
) -> f64 {
    let target = reward + discount * qtable.max_value(next, next_legal);
    let updated = (1.0 - alpha) * qtable.get(state, action) + alpha * target;
    qtable.set(state, action, updated);
    updated
}

/// Running estimate ρ of the reward per step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AverageRewardEstimate {
    pub rho: f64,
}

impl AverageRewardEstimate {
    /// One R-Learning step:
    /// Q[s,a] ← (1−α)Q[s,a] + α(R − ρ + max Q[s',·]), then, if a is now
    /// greedy in s, ρ ← (1−β)ρ + β(R − max Q[s,·] + max Q[s',·]).
    /// Returns whether ρ was updated.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        qtable: &mut QTable,
        state: &State,
        legal: ActionSet,
        action: Action,
        reward: f64,
        next: &State,
        next_legal: ActionSet,
        alpha: f64,
        beta: f64,
    ) -> bool {
        self.update_timed(qtable, state, legal, action, reward, 1.0, next, next_legal, alpha, beta)
    }

    /// As [`update`](Self::update) for a step lasting `time` units: ρ is
    /// charged `time` times, and a zero-length step never moves ρ. With
    /// `time = 1` this is exactly the plain update.
    #[allow(clippy::too_many_arguments)]
    pub fn update_timed(
        &mut self,
        qtable: &mut QTable,
        state: &State,
        legal: ActionSet,
        action: Action,
        reward: f64,
        time: f64,
        next: &State,
        next_legal: ActionSet,
        alpha: f64,
        beta: f64,
    ) -> bool {
        let next_max = qtable.max_value(next, next_legal);
        let updated = (1.0 - alpha) * qtable.get(state, action)
            + alpha * (reward - self.rho * time + next_max);
        qtable.set(state, action, updated);
        let state_max = qtable.max_value(state, legal);
        if time > 0.0 && updated == state_max {
            // s may equal s'; re-read after the write.
            let next_max = qtable.max_value(next, next_legal);
            let error = reward - state_max + next_max - self.rho * time;
            self.rho += beta * error / time;
            true
        } else {
            false
        }
    }
}

/// Time units a learner charges for a step from `state` under `epoch`.
pub fn step_time(state: &State, epoch: DiscountEpoch) -> f64 {
    match epoch {
        DiscountEpoch::Transition => 1.0,
        DiscountEpoch::Demand if state.is_arrival() => 1.0,
        DiscountEpoch::Demand => 0.0,
    }
}

/// What the inner training loop counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeUnit {
    /// Every environment transition, departures included.
    Steps,
    /// Arrival states only.
    Demands,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LearningParams {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub learning_rate: f64,
    pub exploration: f64,
    /// Q-Learning only.
    pub discount: f64,
    /// Unit of time for the discount (Q-Learning) and for ρ (R-Learning).
    pub epoch: DiscountEpoch,
    /// R-Learning only.
    pub rho_rate: f64,
    pub decay: f64,
    pub episode_unit: EpisodeUnit,
}

impl Default for LearningParams {
    fn default() -> Self {
        Self {
            episodes: 200,
            steps_per_episode: 4000,
            learning_rate: 0.9,
            exploration: 0.9,
            discount: 0.9,
            epoch: DiscountEpoch::Transition,
            rho_rate: 0.9,
            decay: 0.99,
            episode_unit: EpisodeUnit::Steps,
        }
    }
}

impl LearningParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !unit(self.learning_rate) || !unit(self.rho_rate) {
            return Err(Error::Config("learning rates must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.exploration) {
            return Err(Error::Config("exploration must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config("discount must lie in [0, 1)".into()));
        }
        if !unit(self.decay) {
            return Err(Error::Config("decay must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Learning-rate and exploration values in force during one episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub alpha: f64,
    pub epsilon: f64,
    pub beta: f64,
}

impl Schedule {
    pub fn initial(params: &LearningParams) -> Self {
        Self {
            alpha: params.learning_rate,
            epsilon: params.exploration,
            beta: params.rho_rate,
        }
    }

    /// Applied at the start of every episode, the first one included.
    pub fn decay(&mut self, factor: f64) {
        self.alpha *= factor;
        self.epsilon *= factor;
        self.beta *= factor;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LearnerKind {
    QLearning,
    RLearning,
}

/// Seed of the environment used in `episode` of a run seeded with `seed`.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(&[seed, 0x0E91_50DE, episode as u64])
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub qtable: QTable,
    pub rho: AverageRewardEstimate,
    /// ρ at the end of each episode (R-Learning; zeros for Q-Learning).
    pub rho_series: Vec<f64>,
    pub schedule: Schedule,
    pub steps: u64,
}

/// Runs the episodic training loop. `on_episode_end(episode, run)` is
/// called after each episode with a 1-based episode number.
pub fn train(
    kind: LearnerKind,
    config: &SystemConfig,
    params: &LearningParams,
    seed: u64,
    mut on_episode_end: impl FnMut(usize, &TrainingRun) -> Result<()>,
) -> Result<TrainingRun> {
    params.validate()?;
    let mut run = TrainingRun {
        qtable: QTable::new(),
        rho: AverageRewardEstimate::default(),
        rho_series: Vec::with_capacity(params.episodes),
        schedule: Schedule::initial(params),
        steps: 0,
    };
    let mut explore = rng_from_seed(derive_seed(&[seed, 0x0E8B_10BE]));
    let mut env = Env::new(config);
    for episode in 1..=params.episodes {
        run.schedule.decay(params.decay);
        let Schedule { alpha, epsilon, beta } = run.schedule;
        let mut state = env.reset(episode_seed(seed, episode));
        let mut legal = valid_actions(&state, config);
        let mut counted = 0;
        while counted < params.steps_per_episode {
            if params.episode_unit == EpisodeUnit::Steps || state.is_arrival() {
                counted += 1;
            }
            let action = epsilon_greedy(&run.qtable, &state, legal, epsilon, &mut explore);
            let (next, reward) = env.step(action)?;
            let next_legal = valid_actions(&next, config);
            match kind {
                LearnerKind::QLearning => {
                    // Discounting per demand: only steps into an arrival
                    // advance the clock.
                    let discount = match params.epoch {
                        DiscountEpoch::Demand if !next.is_arrival() => 1.0,
                        _ => params.discount,
                    };
                    q_learning_update(
                        &mut run.qtable,
                        &state,
                        action,
                        reward,
                        &next,
                        next_legal,
                        alpha,
                        discount,
                    );
                }
                LearnerKind::RLearning => {
                    run.rho.update_timed(
                        &mut run.qtable,
                        &state,
                        legal,
                        action,
                        reward,
                        step_time(&state, params.epoch),
                        &next,
                        next_legal,
                        alpha,
                        beta,
                    );
                }
            }
            run.steps += 1;
            state = next;
            legal = next_legal;
        }
        run.rho_series.push(run.rho.rho);
        on_episode_end(episode, &run)?;
    }
    Ok(run)
}

/// Learning curve protocol: the greedy readout after each episode is
/// evaluated on a fixed held-out seed set.
#[derive(Clone, Debug)]
pub struct CurveSpec {
    pub eval_seeds: Vec<u64>,
    pub demands: u64,
    pub reference: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedAgent {
    pub policy: Policy,
    pub qtable: QTable,
    pub rho_series: Vec<f64>,
    pub curve: Vec<EvalReport>,
}

fn train_agent(
    kind: LearnerKind,
    config: &SystemConfig,
    params: &LearningParams,
    seed: u64,
    curve: Option<&CurveSpec>,
) -> Result<TrainedAgent> {
    let mut reports = Vec::new();
    let run = train(kind, config, params, seed, |_, run| {
        if let Some(spec) = curve {
            let policy = run.qtable.readout(config);
            reports.push(evaluate_policy(
                &policy,
                config,
                spec.demands,
                &spec.eval_seeds,
                spec.reference,
            )?);
        }
        Ok(())
    })?;
    Ok(TrainedAgent {
        policy: run.qtable.readout(config),
        qtable: run.qtable,
        rho_series: run.rho_series,
        curve: reports,
    })
}

pub fn q_learning_train(
    config: &SystemConfig,
    params: &LearningParams,
    seed: u64,
    curve: Option<&CurveSpec>,
) -> Result<TrainedAgent> {
    train_agent(LearnerKind::QLearning, config, params, seed, curve)
}

pub fn r_learning_train(
    config: &SystemConfig,
    params: &LearningParams,
    seed: u64,
    curve: Option<&CurveSpec>,
) -> Result<TrainedAgent> {
    train_agent(LearnerKind::RLearning, config, params, seed, curve)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub average_profit: f64,
    pub optimality_gap: f64,
    pub reference_profit: f64,
    pub per_seed_profit: Vec<f64>,
    pub decisions: DecisionCounts,
    pub num_demands: u64,
    pub seeds: Vec<u64>,
    pub fallbacks: u64,
}

/// (reference − profit) / reference.
pub fn optimality_gap(reference: f64, profit: f64) -> Result<f64> {
    if !(reference > 0.0) {
        return Err(Error::GapUndefined(reference));
    }
    Ok((reference - profit) / reference)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs `rule` once per seed (no exploration) and reports the mean profit
/// per demand and its gap to `reference`.
pub fn evaluate_policy(
    rule: &dyn DecisionRule,
    config: &SystemConfig,
    num_demands: u64,
    seeds: &[u64],
    reference: f64,
) -> Result<EvalReport> {
    if !(reference > 0.0) {
        return Err(Error::GapUndefined(reference));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| run_policy(config, rule, num_demands, seed, RunOptions::default()))
        .collect::<Result<Vec<_>>>()?;
    let per_seed_profit: Vec<f64> = runs.iter().map(|r| r.profit_per_demand).collect();
    let average_profit = mean(&per_seed_profit);
    let mut decisions = DecisionCounts::new(config.num_classes());
    for r in &runs {
        decisions.add(&r.decisions);
    }
    Ok(EvalReport {
        average_profit,
        optimality_gap: optimality_gap(reference, average_profit)?,
        reference_profit: reference,
        per_seed_profit,
        decisions,
        num_demands,
        seeds: seeds.to_vec(),
        fallbacks: runs.iter().map(|r| r.fallbacks).sum(),
    })
}

/// Mean simulated profit of `rule` over `seeds`, for use as a reference.
pub fn simulated_profit(
    rule: &dyn DecisionRule,
    config: &SystemConfig,
    num_demands: u64,
    seeds: &[u64],
) -> Result<f64> {
    let profits = seeds
        .par_iter()
        .map(|&seed| {
            run_policy(config, rule, num_demands, seed, RunOptions::default())
                .map(|r| r.profit_per_demand)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&profits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EventMark;

    fn arrival(l: &[u32], f: &[u32], c: usize) -> State {
        State::new(l, f, EventMark::arrival(c))
    }

    fn full() -> ActionSet {
        [Action::Reject, Action::Accept, Action::Federate]
            .into_iter()
            .collect()
    }

    #[test]
    fn greedy_examples() {
        let cfg = SystemConfig::table2();
        assert_eq!(greedy_action(&arrival(&[0, 0], &[0, 0], 0), &cfg), Action::Accept);
        assert_eq!(greedy_action(&arrival(&[13, 1], &[0, 0], 0), &cfg), Action::Federate);
        assert_eq!(greedy_action(&arrival(&[13, 1], &[8, 1], 0), &cfg), Action::Reject);
        let dep = State::new(&[1, 0], &[0, 0], EventMark::departure(0));
        assert_eq!(greedy_action(&dep, &cfg), Action::NoAction);
    }

    #[test]
    fn epsilon_zero_is_greedy_on_q() {
        let s = arrival(&[0, 0], &[0, 0], 0);
        let mut q = QTable::new();
        let mut rng = rng_from_seed(1);
        assert_eq!(epsilon_greedy(&q, &s, full(), 0.0, &mut rng), Action::Accept);
        q.set(&s, Action::Reject, 5.0);
        assert_eq!(epsilon_greedy(&q, &s, full(), 0.0, &mut rng), Action::Reject);
        q.set(&s, Action::Accept, 5.0);
        assert_eq!(epsilon_greedy(&q, &s, full(), 0.0, &mut rng), Action::Accept);
    }

    #[test]
    fn epsilon_one_is_uniform() {
        let s = arrival(&[0, 0], &[0, 0], 0);
        let mut q = QTable::new();
        q.set(&s, Action::Accept, 5.0);
        let mut rng = rng_from_seed(2);
        let n = 30_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[epsilon_greedy(&q, &s, full(), 1.0, &mut rng).index()] += 1;
        }
        for a in [Action::Reject, Action::Accept, Action::Federate] {
            let freq = counts[a.index()] as f64 / n as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "{a}: {freq}");
        }
        assert_eq!(counts[Action::NoAction.index()], 0);
    }

    #[test]
    fn single_q_update() {
        let s = arrival(&[0, 0], &[0, 0], 0);
        let s2 = arrival(&[1, 0], &[0, 0], 1);
        let mut q = QTable::new();
        let v = q_learning_update(&mut q, &s, Action::Accept, 100.0, &s2, full(), 0.9, 0.9);
        assert_eq!(v, 90.0);
        assert_eq!(q.get(&s, Action::Accept), 90.0);
    }

    #[test]
    fn single_r_update() {
        let s = arrival(&[0, 0], &[0, 0], 0);
        let s2 = arrival(&[1, 0], &[0, 0], 1);
        let mut q = QTable::new();
        let mut est = AverageRewardEstimate::default();
        let updated = est.update(&mut q, &s, full(), Action::Accept, 100.0, &s2, full(), 0.9, 0.9);
        assert!(updated);
        assert_eq!(q.get(&s, Action::Accept), 90.0);
        assert_eq!(est.rho, 9.0);
    }

    #[test]
    fn zero_reward_r_update_is_a_no_op() {
        let s = arrival(&[0, 0], &[0, 0], 0);
        let s2 = arrival(&[0, 0], &[0, 0], 1);
        let mut q = QTable::new();
        let mut est = AverageRewardEstimate::default();
        est.update(&mut q, &s, full(), Action::Reject, 0.0, &s2, full(), 0.9, 0.9);
        assert_eq!(q.get(&s, Action::Reject), 0.0);
        assert_eq!(est.rho, 0.0);
    }

    #[test]
    fn zero_length_steps_never_move_rho() {
        let s = arrival(&[0, 0], &[0, 0], 0);
        let s2 = arrival(&[0, 0], &[0, 0], 1);
        let mut q = QTable::new();
        let mut est = AverageRewardEstimate { rho: 5.0 };
        let updated =
            est.update_timed(&mut q, &s, full(), Action::Accept, 100.0, 0.0, &s2, full(), 0.9, 0.9);
        assert!(!updated);
        assert_eq!(q.get(&s, Action::Accept), 90.0);
        assert_eq!(est.rho, 5.0);
    }

    #[test]
    fn unit_length_step_is_the_plain_update() {
        let s = arrival(&[0, 0], &[0, 0], 0);
        let s2 = arrival(&[0, 0], &[0, 0], 1);
        let (mut qa, mut qb) = (QTable::new(), QTable::new());
        qa.set(&s2, Action::Accept, 7.0);
        qb.set(&s2, Action::Accept, 7.0);
        let mut a = AverageRewardEstimate { rho: 2.0 };
        let mut b = a;
        a.update(&mut qa, &s, full(), Action::Accept, 40.0, &s2, full(), 0.3, 0.6);
        b.update_timed(&mut qb, &s, full(), Action::Accept, 40.0, 1.0, &s2, full(), 0.3, 0.6);
        assert_eq!(qa.get(&s, Action::Accept), qb.get(&s, Action::Accept));
        assert!((a.rho - b.rho).abs() < 1e-12);
    }

    #[test]
    fn non_greedy_action_leaves_rho() {
        let s = arrival(&[0, 0], &[0, 0], 0);
        let mut q = QTable::new();
        q.set(&s, Action::Accept, 50.0);
        let mut est = AverageRewardEstimate { rho: 3.0 };
        let updated = est.update(&mut q, &s, full(), Action::Reject, 0.0, &s, full(), 0.5, 0.5);
        assert!(!updated);
        assert_eq!(est.rho, 3.0);
    }

    #[test]
    fn rho_converges_on_a_one_state_chain() {
        // A single state with one action paying r every step.
        let s = State::new(&[0], &[0], EventMark::arrival(0));
        let legal = ActionSet::only(Action::Accept);
        let mut q = QTable::new();
        let mut est = AverageRewardEstimate::default();
        for _ in 0..10_000 {
            est.update(&mut q, &s, legal, Action::Accept, 7.5, &s, legal, 0.9, 0.9);
        }
        assert!((est.rho - 7.5).abs() < 1e-3, "{}", est.rho);
    }

    #[test]
    fn decay_schedule() {
        let params = LearningParams::default();
        let mut sched = Schedule::initial(&params);
        sched.decay(params.decay);
        assert_eq!(sched.alpha, 0.9 * 0.99);
        assert!((sched.alpha - 0.891).abs() < 1e-15);
        assert!((sched.epsilon - 0.891).abs() < 1e-15);
        assert!((sched.beta - 0.891).abs() < 1e-15);
    }

    #[test]
    fn first_episode_trains_with_decayed_rates() {
        let cfg = SystemConfig::table2();
        let params = LearningParams {
            episodes: 1,
            steps_per_episode: 10,
            ..LearningParams::default()
        };
        let run = train(LearnerKind::QLearning, &cfg, &params, 1, |_, _| Ok(())).unwrap();
        assert_eq!(run.schedule.alpha, 0.9 * 0.99);
        assert_eq!(run.steps, 10);
    }

    #[test]
    fn demand_unit_counts_arrivals() {
        let cfg = SystemConfig::table2();
        let params = LearningParams {
            episodes: 2,
            steps_per_episode: 100,
            episode_unit: EpisodeUnit::Demands,
            ..LearningParams::default()
        };
        let run = train(LearnerKind::RLearning, &cfg, &params, 4, |_, _| Ok(())).unwrap();
        assert!(run.steps > 200);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = SystemConfig::table2();
        let params = LearningParams {
            episodes: 3,
            steps_per_episode: 500,
            ..LearningParams::default()
        };
        let a = r_learning_train(&cfg, &params, 17, None).unwrap();
        let b = r_learning_train(&cfg, &params, 17, None).unwrap();
        assert_eq!(a.rho_series, b.rho_series);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn zero_discount_q_learning_matches_greedy() {
        // With γ = 0 every Q value converges to its immediate reward, so the
        // readout is the myopic argmax, which is greedy on these rewards.
        let cfg = SystemConfig::table2();
        let params = LearningParams {
            episodes: 30,
            steps_per_episode: 4000,
            discount: 0.0,
            ..LearningParams::default()
        };
        let agent = q_learning_train(&cfg, &params, 5, None).unwrap();
        let mut checked = 0;
        for (s, a) in agent.policy.iter() {
            if !s.is_arrival() {
                continue;
            }
            let legal = valid_actions(s, &cfg);
            // Only judge states whose legal values have converged to their
            // immediate rewards.
            let converged = legal.iter().all(|b| {
                let r = crate::model::action_reward(s, b, &cfg);
                (agent.qtable.get(s, b) - r).abs() <= 0.05 * r
            });
            if converged {
                assert_eq!(a, greedy_action(s, &cfg), "{s}");
                checked += 1;
            }
        }
        assert!(checked > 50, "{checked}");
    }

    #[test]
    fn evaluation_edge_cases() {
        let cfg = SystemConfig::table2();
        let report = evaluate_policy(&crate::sim::RejectAll, &cfg, 1_000, &[1, 2], 10.0).unwrap();
        assert_eq!(report.average_profit, 0.0);
        assert_eq!(report.optimality_gap, 1.0);
        assert!(matches!(
            evaluate_policy(&Greedy, &cfg, 10, &[1], 0.0),
            Err(Error::GapUndefined(_))
        ));
        let reference = simulated_profit(&Greedy, &cfg, 2_000, &[5, 6]).unwrap();
        let report = evaluate_policy(&Greedy, &cfg, 2_000, &[5, 6], reference).unwrap();
        assert_eq!(report.optimality_gap, 0.0);
        assert_eq!(report.decisions.total(), 4_000);
    }
}
