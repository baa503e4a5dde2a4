//! Seeded event-driven environment.
//!
//! Holding times are exponential, so the next event is drawn by competing
//! rates instead of keeping a future-event list: arrivals of class j fire at
//! rate ℓλⱼ and departures at (l[j]+f[j])μⱼ. A departure state's removal
//! (local or provider) is resolved in the step that consumes it.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    action_reward, valid_actions, Action, EventMark, Policy, State, SystemConfig,
};
use crate::seed::{derive_seed, label_hash, rng_from_seed, SimRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Local,
    Provider,
}

/// Everything observable about one transition.
#[derive(Clone, Debug)]
pub struct StepInfo {
    pub next: State,
    pub reward: f64,
    /// Where a departing demand was removed from, for departure states.
    pub removed_from: Option<Domain>,
    /// Simulated time after the step.
    pub clock: f64,
}

pub struct Env<'a> {
    config: &'a SystemConfig,
    current: Option<State>,
    rng: SimRng,
    clock: f64,
    demand_counter: u64,
}

impl<'a> Env<'a> {
    pub fn new(config: &'a SystemConfig) -> Self {
        Self {
            config,
            current: None,
            rng: rng_from_seed(0),
            clock: 0.0,
            demand_counter: 0,
        }
    }

    pub fn config(&self) -> &SystemConfig {
        self.config
    }

    pub fn state(&self) -> Option<&State> {
        self.current.as_ref()
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Arrival states produced so far, including the current one.
    pub fn demand_counter(&self) -> u64 {
        self.demand_counter
    }

    /// Empties both domains and draws the first event, which is an arrival
    /// of class j with probability ℓλⱼ/Λ.
    pub fn reset(&mut self, seed: u64) -> State {
        self.rng = rng_from_seed(seed);
        self.clock = 0.0;
        self.demand_counter = 0;
        let k = self.config.num_classes();
        let mut state = State::empty(k, 0);
        state.event = self.sample_event(&state);
        self.advance_clock(&state);
        if state.is_arrival() {
            self.demand_counter += 1;
        }
        self.current = Some(state.clone());
        state
    }

    /// Places the environment in `state` (which must satisfy the state
    /// invariants) with a fresh stream, e.g. to sample one transition.
    pub fn reset_to(&mut self, state: State, seed: u64) -> Result<()> {
        state.check(self.config)?;
        self.rng = rng_from_seed(seed);
        self.clock = 0.0;
        self.demand_counter = u64::from(state.is_arrival());
        self.current = Some(state);
        Ok(())
    }

    fn departure_rate_total(&self, state: &State) -> f64 {
        self.config
            .classes
            .iter()
            .enumerate()
            .map(|(j, c)| (state.local[j] + state.federated[j]) as f64 * c.departure_rate)
            .sum()
    }

    fn advance_clock(&mut self, occupancy: &State) {
        let total = self.config.total_arrival_rate() + self.departure_rate_total(occupancy);
        let dt = Exp::new(total).expect("positive total rate").sample(&mut self.rng);
        self.clock += dt;
    }

    /// Next event for the occupancy of `state` (its event mark is ignored).
    fn sample_event(&mut self, state: &State) -> EventMark {
        let cfg = self.config;
        let k = cfg.num_classes();
        let total = cfg.total_arrival_rate() + self.departure_rate_total(state);
        let mut x = self.rng.gen::<f64>() * total;
        for j in 0..k {
            let rate = cfg.effective_arrival_rate(j);
            if x < rate {
                return EventMark::arrival(j);
            }
            x -= rate;
        }
        let mut last = EventMark::arrival(k - 1);
        for (j, c) in cfg.classes.iter().enumerate() {
            let active = state.local[j] + state.federated[j];
            if active == 0 {
                continue;
            }
            last = EventMark::departure(j);
            let rate = active as f64 * c.departure_rate;
            if x < rate {
                return last;
            }
            x -= rate;
        }
        // Only reachable through rounding at the top of the range.
        last
    }

    pub fn step(&mut self, action: Action) -> Result<(State, f64)> {
        let info = self.step_detailed(action)?;
        Ok((info.next, info.reward))
    }

    pub fn step_detailed(&mut self, action: Action) -> Result<StepInfo> {
        let mut state = self.current.take().ok_or(Error::NotReset)?;
        if !valid_actions(&state, self.config).contains(action) {
            let err = Error::InvalidAction {
                action,
                state: state.to_string(),
            };
            self.current = Some(state);
            return Err(err);
        }
        let reward = action_reward(&state, action, self.config);
        let i = state.event.class_index;
        let mut removed_from = None;
        match action {
            Action::Accept => state.local[i] += 1,
            Action::Federate => state.federated[i] += 1,
            Action::Reject => {}
            Action::NoAction => {
                let active = state.local[i] + state.federated[i];
                if self.rng.gen_range(0..active) < state.local[i] {
                    state.local[i] -= 1;
                    removed_from = Some(Domain::Local);
                } else {
                    state.federated[i] -= 1;
                    removed_from = Some(Domain::Provider);
                }
            }
        }
        state.event = self.sample_event(&state);
        self.advance_clock(&state);
        if state.is_arrival() {
            self.demand_counter += 1;
        }
        debug_assert!(state.check(self.config).is_ok(), "{state}");
        self.current = Some(state.clone());
        Ok(StepInfo {
            next: state,
            reward,
            removed_from,
            clock: self.clock,
        })
    }
}

/// Something that maps states to actions. `None` means the rule has no
/// opinion and the caller falls back to the greedy baseline.
pub trait DecisionRule: Sync {
    fn decide(&self, state: &State, config: &SystemConfig) -> Option<Action>;
}

impl DecisionRule for Policy {
    fn decide(&self, state: &State, _config: &SystemConfig) -> Option<Action> {
        self.get(state)
    }
}

/// Rejects every arrival.
pub struct RejectAll;

impl DecisionRule for RejectAll {
    fn decide(&self, state: &State, _config: &SystemConfig) -> Option<Action> {
        Some(if state.is_arrival() {
            Action::Reject
        } else {
            Action::NoAction
        })
    }
}

/// Per-class decision tallies.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DecisionCounts {
    pub accepted: Vec<u64>,
    pub federated: Vec<u64>,
    pub rejected: Vec<u64>,
}

impl DecisionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            accepted: vec![0; num_classes],
            federated: vec![0; num_classes],
            rejected: vec![0; num_classes],
        }
    }

    pub fn record(&mut self, class: usize, action: Action) {
        match action {
            Action::Accept => self.accepted[class] += 1,
            Action::Federate => self.federated[class] += 1,
            Action::Reject => self.rejected[class] += 1,
            Action::NoAction => {}
        }
    }

    pub fn total_accepted(&self) -> u64 {
        self.accepted.iter().sum()
    }

    pub fn total_federated(&self) -> u64 {
        self.federated.iter().sum()
    }

    pub fn total_rejected(&self) -> u64 {
        self.rejected.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.total_accepted() + self.total_federated() + self.total_rejected()
    }

    pub fn add(&mut self, other: &DecisionCounts) {
        for (a, b) in self.accepted.iter_mut().zip(&other.accepted) {
            *a += b;
        }
        for (a, b) in self.federated.iter_mut().zip(&other.federated) {
            *a += b;
        }
        for (a, b) in self.rejected.iter_mut().zip(&other.rejected) {
            *a += b;
        }
    }
}

/// One demand's fate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DemandOutcome {
    pub class_index: usize,
    pub decision: Action,
    pub reward: f64,
    pub start_time: f64,
    /// Departure time; absent for rejected demands and for demands still
    /// active when the run stops.
    pub end_time: Option<f64>,
}

#[derive(Default)]
pub struct RunOptions<'w> {
    /// Keep a [`DemandOutcome`] per demand.
    pub record_outcomes: bool,
    /// Line-delimited JSON trajectory sink.
    pub trace: Option<&'w mut dyn Write>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub profit_per_demand: f64,
    pub total_profit: f64,
    pub num_demands: u64,
    pub steps: u64,
    pub decisions: DecisionCounts,
    /// Arrival states where the rule had no action and greedy was used.
    pub fallbacks: u64,
    pub outcomes: Vec<DemandOutcome>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    step: u64,
    clock: f64,
    state: String,
    action: &'a str,
    reward: f64,
}

/// Runs `rule` from an empty system until `num_demands` arrivals have been
/// decided and returns the average profit per demand over exactly those.
pub fn run_policy(
    config: &SystemConfig,
    rule: &dyn DecisionRule,
    num_demands: u64,
    seed: u64,
    mut options: RunOptions<'_>,
) -> Result<RunSummary> {
    let mut env = Env::new(config);
    let mut state = env.reset(seed);
    let mut summary = RunSummary {
        profit_per_demand: 0.0,
        total_profit: 0.0,
        num_demands: 0,
        steps: 0,
        decisions: DecisionCounts::new(config.num_classes()),
        fallbacks: 0,
        outcomes: Vec::new(),
    };
    // Outstanding outcome indices per (class, domain); which one departs is
    // drawn from its own stream so recording never perturbs the trajectory.
    let mut active: Vec<[Vec<usize>; 2]> = vec![[Vec::new(), Vec::new()]; config.num_classes()];
    let mut outcome_rng = rng_from_seed(derive_seed(&[seed, label_hash("outcomes")]));
    let mut clock = env.clock();

    while summary.num_demands < num_demands {
        let action = if state.is_arrival() {
            match rule.decide(&state, config) {
                Some(a) => a,
                None => {
                    summary.fallbacks += 1;
                    crate::agents::greedy_action(&state, config)
                }
            }
        } else {
            Action::NoAction
        };
        let info = env.step_detailed(action)?;
        summary.steps += 1;
        if let Some(trace) = options.trace.as_deref_mut() {
            let line = TraceLine {
                step: summary.steps,
                clock,
                state: state.to_string(),
                action: action.name(),
                reward: info.reward,
            };
            serde_json::to_writer(&mut *trace, &line)?;
            trace.write_all(b"\n")?;
        }

        let class = state.event.class_index;
        if state.is_arrival() {
            summary.num_demands += 1;
            summary.total_profit += info.reward;
            summary.decisions.record(class, action);
            if options.record_outcomes {
                let idx = summary.outcomes.len();
                summary.outcomes.push(DemandOutcome {
                    class_index: class,
                    decision: action,
                    reward: info.reward,
                    start_time: clock,
                    end_time: None,
                });
                match action {
                    Action::Accept => active[class][0].push(idx),
                    Action::Federate => active[class][1].push(idx),
                    _ => {}
                }
            }
        } else if options.record_outcomes {
            let slot = match info.removed_from {
                Some(Domain::Local) => 0,
                _ => 1,
            };
            let pool = &mut active[class][slot];
            if !pool.is_empty() {
                let k = outcome_rng.gen_range(0..pool.len());
                let idx = pool.swap_remove(k);
                summary.outcomes[idx].end_time = Some(clock);
            }
        }
        clock = info.clock;
        state = info.next;
    }
    summary.profit_per_demand = if summary.num_demands == 0 {
        0.0
    } else {
        summary.total_profit / summary.num_demands as f64
    };
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::transition_distribution;
    use crate::model::TrafficClass;

    fn arrival(l: &[u32], f: &[u32], c: usize) -> State {
        State::new(l, f, EventMark::arrival(c))
    }

    #[test]
    fn step_before_reset_fails() {
        let cfg = SystemConfig::table2();
        let mut env = Env::new(&cfg);
        assert!(matches!(env.step(Action::Reject), Err(Error::NotReset)));
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = SystemConfig::table2();
        let mut env = Env::new(&cfg);
        let a = env.reset(42);
        let b = env.reset(42);
        assert_eq!(a, b);
        assert!(a.is_arrival() && a.is_empty_system());
    }

    #[test]
    fn single_class_reset_is_class_zero() {
        let c = TrafficClass::new(0, 3.0, 1.0, 1, 1.0, 0.0).unwrap();
        let cfg = SystemConfig::new(5, 5, vec![c], 1.0, 1.0).unwrap();
        let mut env = Env::new(&cfg);
        for seed in 0..100 {
            assert_eq!(env.reset(seed), State::empty(1, 0));
        }
    }

    #[test]
    fn first_arrival_frequency() {
        let cfg = SystemConfig::table2();
        let mut env = Env::new(&cfg);
        let n = 100_000;
        let hits = (0..n)
            .filter(|&s| env.reset(s).event == EventMark::arrival(0))
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 10.0 / 15.0).abs() < 0.01, "{freq}");
    }

    #[test]
    fn accept_on_empty_departure_frequency() {
        let cfg = SystemConfig::table2();
        let mut env = Env::new(&cfg);
        let n = 100_000;
        let mut deps = 0;
        for seed in 0..n {
            env.reset(seed);
            // Force the starting state to an empty-system class-1 arrival.
            env.current = Some(State::empty(2, 0));
            let (next, _) = env.step(Action::Accept).unwrap();
            if next.event == EventMark::departure(0) {
                deps += 1;
            }
        }
        let freq = deps as f64 / n as f64;
        assert!((freq - 4.0 / 19.0).abs() < 0.01, "{freq}");
    }

    #[test]
    fn reject_on_empty_system_never_departs() {
        let cfg = SystemConfig::table2();
        let mut env = Env::new(&cfg);
        for seed in 0..2_000 {
            env.reset(seed);
            env.current = Some(State::empty(2, 0));
            let (next, r) = env.step(Action::Reject).unwrap();
            assert!(next.is_arrival());
            assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn federate_class_two_reward() {
        let cfg = SystemConfig::table2();
        let mut env = Env::new(&cfg);
        for seed in 0..50 {
            env.reset(seed);
            env.current = Some(arrival(&[3, 2], &[1, 0], 1));
            let (_, r) = env.step(Action::Federate).unwrap();
            assert_eq!(r, 15.0);
        }
    }

    #[test]
    fn illegal_action_keeps_state() {
        let cfg = SystemConfig::table2();
        let mut env = Env::new(&cfg);
        env.reset(1);
        env.current = Some(arrival(&[13, 1], &[0, 0], 0));
        assert!(env.step(Action::Accept).is_err());
        assert_eq!(env.state(), Some(&arrival(&[13, 1], &[0, 0], 0)));
    }

    #[test]
    fn departure_branch_frequencies_match_rows() {
        let cfg = SystemConfig::table2();
        let s = State::new(&[3, 1], &[1, 2], EventMark::departure(1));
        let row = transition_distribution(&s, Action::NoAction, &cfg).unwrap();
        let mut env = Env::new(&cfg);
        let n = 50_000;
        let mut counts = rustc_hash::FxHashMap::default();
        for seed in 0..n {
            env.reset(seed);
            env.current = Some(s.clone());
            let (next, _) = env.step(Action::NoAction).unwrap();
            *counts.entry(next).or_insert(0u64) += 1;
        }
        let tv: f64 = row
            .iter()
            .map(|e| (e.probability - *counts.get(&e.next).unwrap_or(&0) as f64 / n as f64).abs())
            .sum::<f64>()
            / 2.0;
        assert!(counts.keys().all(|k| row.iter().any(|e| &e.next == k)));
        assert!(tv < 0.01, "{tv}");
    }

    #[test]
    fn reject_all_run() {
        let cfg = SystemConfig::table2();
        let run = run_policy(&cfg, &RejectAll, 1_000, 3, RunOptions::default()).unwrap();
        assert_eq!(run.profit_per_demand, 0.0);
        assert_eq!(run.decisions.total_rejected(), 1_000);
        assert_eq!(run.num_demands, 1_000);
    }

    #[test]
    fn eq1_on_a_fixed_outcome_set() {
        // accept c1, federate c1, reject c2.
        struct Scripted;
        impl DecisionRule for Scripted {
            fn decide(&self, _: &State, _: &SystemConfig) -> Option<Action> {
                None
            }
        }
        let cfg = SystemConfig::table2();
        let outcomes = [
            (0, Action::Accept),
            (0, Action::Federate),
            (1, Action::Reject),
        ];
        let total: f64 = outcomes
            .iter()
            .map(|&(c, a)| action_reward(&arrival(&[0, 0], &[0, 0], c), a, &cfg))
            .sum();
        assert!((total / 3.0 - 56.666_666_666_666_664).abs() < 1e-12);
        // Greedy fallback counts every decision as a fallback.
        let run = run_policy(&cfg, &Scripted, 100, 9, RunOptions::default()).unwrap();
        assert_eq!(run.fallbacks, 100);
    }

    #[test]
    fn outcomes_and_trace() {
        let cfg = SystemConfig::table2();
        let mut trace = Vec::new();
        let run = run_policy(
            &cfg,
            &crate::agents::Greedy,
            500,
            11,
            RunOptions {
                record_outcomes: true,
                trace: Some(&mut trace),
            },
        )
        .unwrap();
        assert_eq!(run.outcomes.len(), 500);
        let profit: f64 = run.outcomes.iter().map(|o| o.reward).sum();
        assert_eq!(profit, run.total_profit);
        for o in &run.outcomes {
            match o.decision {
                Action::Reject => assert!(o.end_time.is_none()),
                _ => {
                    if let Some(end) = o.end_time {
                        assert!(end >= o.start_time);
                    }
                }
            }
        }
        let lines = String::from_utf8(trace).unwrap();
        assert_eq!(lines.lines().count() as u64, run.steps);
        let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 1);

        // Recording must not change the trajectory.
        let plain = run_policy(&cfg, &crate::agents::Greedy, 500, 11, RunOptions::default()).unwrap();
        assert_eq!(plain.total_profit, run.total_profit);
        assert_eq!(plain.steps, run.steps);
    }
}
