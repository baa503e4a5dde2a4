//! The finite MDP: state enumeration, transition rows built from competing
//! exponentials, and the stationary-chain evaluation of a fixed policy.

use std::collections::VecDeque;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::model::{
    apply_action, valid_actions, Action, Counts, EventMark, Policy, State, SystemConfig,
};

pub const DEFAULT_STATE_CEILING: usize = 5_000_000;

/// All valid states of a configuration with a dense id for each.
#[derive(Clone, Debug)]
pub struct StateSpace {
    states: Vec<State>,
    index: FxHashMap<State, usize>,
}

/// Every count vector `n` with Σᵢ n[i]·weights[i] ≤ capacity, in
/// lexicographic order.
pub fn feasible_count_vectors(capacity: u32, weights: &[u32]) -> Vec<Counts> {
    fn extend(
        prefix: &mut Counts,
        remaining: u32,
        weights: &[u32],
        out: &mut Vec<Counts>,
    ) {
        let Some((&w, rest)) = weights.split_first() else {
            out.push(prefix.clone());
            return;
        };
        for n in 0..=remaining / w {
            prefix.push(n);
            extend(prefix, remaining - n * w, rest, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    extend(&mut Counts::new(), capacity, weights, &mut out);
    out
}

pub fn enumerate_states(config: &SystemConfig) -> Result<StateSpace> {
    StateSpace::enumerate(config, DEFAULT_STATE_CEILING)
}

impl StateSpace {
    pub fn enumerate(config: &SystemConfig, ceiling: usize) -> Result<Self> {
        let weights: Vec<u32> = config.classes.iter().map(|c| c.resource_demand).collect();
        let locals = feasible_count_vectors(config.local_capacity, &weights);
        let feds = feasible_count_vectors(config.provider_capacity, &weights);
        let k = config.num_classes();

        let mut count = 0usize;
        for l in &locals {
            for f in &feds {
                count += k + (0..k).filter(|&i| l[i] + f[i] > 0).count();
            }
            if count > ceiling {
                break;
            }
        }
        if count > ceiling {
            return Err(Error::Intractable { count, ceiling });
        }

        let mut states = Vec::with_capacity(count);
        for l in &locals {
            for f in &feds {
                for i in 0..k {
                    states.push(State {
                        local: l.clone(),
                        federated: f.clone(),
                        event: EventMark::arrival(i),
                    });
                }
                for i in (0..k).filter(|&i| l[i] + f[i] > 0) {
                    states.push(State {
                        local: l.clone(),
                        federated: f.clone(),
                        event: EventMark::departure(i),
                    });
                }
            }
        }
        let index = states
            .iter()
            .enumerate()
            .map(|(id, s)| (s.clone(), id))
            .collect();
        Ok(Self { states, index })
    }

    /// Wraps an explicit list of distinct states.
    pub fn from_states(states: Vec<State>) -> Self {
        let index = states
            .iter()
            .enumerate()
            .map(|(id, s)| (s.clone(), id))
            .collect();
        Self { states, index }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, id: usize) -> &State {
        &self.states[id]
    }

    pub fn id_of(&self, state: &State) -> Option<usize> {
        self.index.get(state).copied()
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    /// Ids of the empty-system arrival states, the entry points of every
    /// episode.
    pub fn empty_arrival_ids(&self) -> Vec<usize> {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_arrival() && s.is_empty_system())
            .map(|(id, _)| id)
            .collect()
    }

    /// Maps a state-keyed policy onto ids. Fails on the first missing state.
    pub fn policy_actions(&self, policy: &Policy) -> Result<Vec<Action>> {
        self.states
            .iter()
            .map(|s| {
                policy
                    .get(s)
                    .ok_or_else(|| Error::IncompletePolicy(s.to_string()))
            })
            .collect()
    }

    pub fn policy_from_actions(&self, actions: &[Action]) -> Policy {
        self.states.iter().cloned().zip(actions.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionEntry {
    pub next: State,
    pub probability: f64,
    pub reward: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateSummary {
    pub total_arrival_rate: f64,
    pub total_departure_rate: f64,
}

impl RateSummary {
    pub fn total(&self) -> f64 {
        self.total_arrival_rate + self.total_departure_rate
    }
}

/// Λ and M(s') for a post-decision occupancy.
pub fn rate_summary(local: &[u32], federated: &[u32], config: &SystemConfig) -> RateSummary {
    let total_departure_rate = config
        .classes
        .iter()
        .enumerate()
        .map(|(j, c)| (local[j] + federated[j]) as f64 * c.departure_rate)
        .sum();
    RateSummary {
        total_arrival_rate: config.total_arrival_rate(),
        total_departure_rate,
    }
}

/// Pushes the next-event expansion of one post-decision occupancy, each
/// probability multiplied by `weight`.
fn expand_events(
    local: &Counts,
    federated: &Counts,
    weight: f64,
    reward: f64,
    config: &SystemConfig,
    out: &mut Vec<TransitionEntry>,
) {
    let total = rate_summary(local, federated, config).total();
    for j in 0..config.num_classes() {
        out.push(TransitionEntry {
            next: State {
                local: local.clone(),
                federated: federated.clone(),
                event: EventMark::arrival(j),
            },
            probability: weight * config.effective_arrival_rate(j) / total,
            reward,
        });
    }
    for (j, class) in config.classes.iter().enumerate() {
        let active = local[j] + federated[j];
        if active == 0 {
            continue;
        }
        out.push(TransitionEntry {
            next: State {
                local: local.clone(),
                federated: federated.clone(),
                event: EventMark::departure(j),
            },
            probability: weight * active as f64 * class.departure_rate / total,
            reward,
        });
    }
}

/// The row P_a(s, ·) with rewards R_a(s, ·).
///
/// Departure states split into a local-removal and a provider-removal
/// branch weighted by l[i]/(l[i]+f[i]) and f[i]/(l[i]+f[i]); each branch is
/// expanded with its own post-removal rates. Zero-probability entries are
/// dropped and coincident successors merged.
pub fn transition_distribution(
    state: &State,
    action: Action,
    config: &SystemConfig,
) -> Result<Vec<TransitionEntry>> {
    let effect = apply_action(state, action, config)?;
    let mut out = Vec::with_capacity(2 * config.num_classes() + 2);
    if state.is_arrival() {
        expand_events(&effect.local, &effect.federated, 1.0, effect.reward, config, &mut out);
    } else {
        let i = state.event.class_index;
        let active = (state.local[i] + state.federated[i]) as f64;
        if state.local[i] > 0 {
            let mut local = effect.local.clone();
            local[i] -= 1;
            let w = state.local[i] as f64 / active;
            expand_events(&local, &effect.federated, w, effect.reward, config, &mut out);
        }
        if state.federated[i] > 0 {
            let mut federated = effect.federated.clone();
            federated[i] -= 1;
            let w = state.federated[i] as f64 / active;
            expand_events(&effect.local, &federated, w, effect.reward, config, &mut out);
        }
    }

    let mut merged: Vec<TransitionEntry> = Vec::with_capacity(out.len());
    for entry in out {
        if entry.probability <= 0.0 {
            continue;
        }
        match merged.iter_mut().find(|e| e.next == entry.next) {
            Some(e) => e.probability += entry.probability,
            None => merged.push(entry),
        }
    }
    Ok(merged)
}

/// One legal (state, action) pair inside a [`TransitionModel`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Choice {
    pub action: Action,
    pub reward: f64,
    start: u32,
    end: u32,
}

/// Every legal transition row of a state space, indexed by state id.
#[derive(Clone, Debug)]
pub struct TransitionModel {
    config: SystemConfig,
    space: StateSpace,
    choice_offsets: Vec<u32>,
    choices: Vec<Choice>,
    entries: Vec<(u32, f64)>,
}

impl TransitionModel {
    pub fn build(config: &SystemConfig) -> Result<Self> {
        Self::from_space(enumerate_states(config)?, config)
    }

    pub fn from_space(space: StateSpace, config: &SystemConfig) -> Result<Self> {
        let mut choice_offsets = Vec::with_capacity(space.len() + 1);
        let mut choices = Vec::new();
        let mut entries = Vec::new();
        choice_offsets.push(0);
        for state in space.states() {
            for action in valid_actions(state, config).iter() {
                let row = transition_distribution(state, action, config)?;
                let start = entries.len() as u32;
                let reward = row.first().map_or(0.0, |e| e.reward);
                for e in row {
                    let id = space.id_of(&e.next).ok_or_else(|| {
                        Error::Config(format!(
                            "successor {} of {state} is outside the state space",
                            e.next
                        ))
                    })?;
                    entries.push((id as u32, e.probability));
                }
                choices.push(Choice {
                    action,
                    reward,
                    start,
                    end: entries.len() as u32,
                });
            }
            choice_offsets.push(choices.len() as u32);
        }
        Ok(Self {
            config: config.clone(),
            space,
            choice_offsets,
            choices,
            entries,
        })
    }

    /// Builds a model from explicit rows `(action, reward, [(next id, p)])`
    /// per state, bypassing the traffic dynamics. Used for hand-made chains.
    pub fn from_rows(
        config: &SystemConfig,
        space: StateSpace,
        rows: Vec<Vec<(Action, f64, Vec<(u32, f64)>)>>,
    ) -> Self {
        let mut choice_offsets = vec![0];
        let mut choices = Vec::new();
        let mut entries = Vec::new();
        for row in rows {
            for (action, reward, next) in row {
                let start = entries.len() as u32;
                entries.extend(next);
                choices.push(Choice {
                    action,
                    reward,
                    start,
                    end: entries.len() as u32,
                });
            }
            choice_offsets.push(choices.len() as u32);
        }
        Self {
            config: config.clone(),
            space,
            choice_offsets,
            choices,
            entries,
        }
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn num_states(&self) -> usize {
        self.space.len()
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    /// Legal choices of a state, in action preference order.
    pub fn choices(&self, state: usize) -> &[Choice] {
        let lo = self.choice_offsets[state] as usize;
        let hi = self.choice_offsets[state + 1] as usize;
        &self.choices[lo..hi]
    }

    pub fn choice(&self, state: usize, action: Action) -> Option<&Choice> {
        self.choices(state).iter().find(|c| c.action == action)
    }

    pub fn entries(&self, choice: &Choice) -> &[(u32, f64)] {
        &self.entries[choice.start as usize..choice.end as usize]
    }
}

/// The Markov chain induced by a fixed policy, in CSR layout.
#[derive(Clone, Debug)]
pub struct InducedChain {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    probs: Vec<f64>,
    rewards: Vec<f64>,
    arrival: Vec<bool>,
}

impl InducedChain {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn row(&self, s: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[s]..self.row_ptr[s + 1];
        self.cols[r.clone()]
            .iter()
            .zip(&self.probs[r])
            .map(|(&c, &p)| (c as usize, p))
    }

    pub fn reward(&self, s: usize) -> f64 {
        self.rewards[s]
    }

    pub fn row_sum(&self, s: usize) -> f64 {
        self.row(s).map(|(_, p)| p).sum()
    }
}

/// Assembles the rows of `actions` (indexed by state id).
pub fn induced_chain_from_actions(
    actions: &[Action],
    model: &TransitionModel,
) -> Result<InducedChain> {
    if actions.len() != model.num_states() {
        return Err(Error::IncompletePolicy(format!(
            "{} actions for {} states",
            actions.len(),
            model.num_states()
        )));
    }
    let mut chain = InducedChain {
        row_ptr: vec![0],
        cols: Vec::new(),
        probs: Vec::new(),
        rewards: Vec::with_capacity(actions.len()),
        arrival: Vec::with_capacity(actions.len()),
    };
    for (s, &a) in actions.iter().enumerate() {
        let choice = model.choice(s, a).ok_or_else(|| Error::InvalidAction {
            action: a,
            state: model.space().state(s).to_string(),
        })?;
        for &(c, p) in model.entries(choice) {
            chain.cols.push(c);
            chain.probs.push(p);
        }
        chain.row_ptr.push(chain.cols.len());
        chain.rewards.push(choice.reward);
        chain.arrival.push(model.space().state(s).is_arrival());
    }
    Ok(chain)
}

pub fn induced_chain(policy: &Policy, model: &TransitionModel) -> Result<InducedChain> {
    let actions = model.space().policy_actions(policy)?;
    induced_chain_from_actions(&actions, model)
}

/// Outcome of the stationary solve behind [`exact_average_profit`].
#[derive(Clone, Debug)]
pub struct StationaryReport {
    pub average_profit: f64,
    /// Long-run reward per transition.
    pub reward_per_step: f64,
    /// Stationary mass on arrival states.
    pub arrival_fraction: f64,
    pub residual: f64,
    pub iterations: usize,
    pub reachable_states: usize,
    pub used_direct_solve: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct StationaryParams {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_residual: f64,
    /// Largest reachable set the dense fallback will factorize.
    pub direct_solve_limit: usize,
}

impl Default for StationaryParams {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 1_000_000,
            max_residual: 1e-10,
            direct_solve_limit: 6_000,
        }
    }
}

/// States reachable from the empty-system arrivals. Fails unless every one
/// of them can get back to an empty-system state, i.e. the chain restricted
/// to this set is a single closed class.
fn recurrent_class(chain: &InducedChain, roots: &[usize]) -> Result<Vec<usize>> {
    let n = chain.len();
    let mut seen = vec![false; n];
    let mut queue: VecDeque<usize> = roots.iter().copied().collect();
    for &r in roots {
        seen[r] = true;
    }
    let mut reverse: Vec<Vec<u32>> = vec![Vec::new(); n];
    while let Some(s) = queue.pop_front() {
        for (t, _) in chain.row(s) {
            reverse[t].push(s as u32);
            if !seen[t] {
                seen[t] = true;
                queue.push_back(t);
            }
        }
    }
    let reachable: Vec<usize> = (0..n).filter(|&s| seen[s]).collect();

    let mut back = vec![false; n];
    let mut queue: VecDeque<usize> = roots.iter().copied().collect();
    for &r in roots {
        back[r] = true;
    }
    while let Some(t) = queue.pop_front() {
        for &s in &reverse[t] {
            let s = s as usize;
            if !back[s] {
                back[s] = true;
                queue.push_back(s);
            }
        }
    }
    let stranded = reachable.iter().filter(|&&s| !back[s]).count();
    if stranded > 0 {
        return Err(Error::Numerical {
            message: format!("{stranded} reachable states cannot return to the empty system"),
            residual: f64::NAN,
        });
    }
    Ok(reachable)
}

fn stationary_residual(chain: &InducedChain, local: &[usize], members: &[u32], pi: &[f64]) -> f64 {
    let mut next = vec![0.0; pi.len()];
    for (k, &s) in members.iter().enumerate() {
        for (t, p) in chain.row(s as usize) {
            next[local[t]] += pi[k] * p;
        }
    }
    next.iter().zip(pi).map(|(a, b)| (a - b).abs()).sum()
}

fn direct_stationary(chain: &InducedChain, local: &[usize], members: &[u32]) -> Vec<f64> {
    use nalgebra::{DMatrix, DVector};
    let n = members.len();
    // Rows of (Pᵀ − I), with the last balance equation replaced by Σπ = 1.
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (k, &s) in members.iter().enumerate() {
        for (t, p) in chain.row(s as usize) {
            a[(local[t], k)] += p;
        }
        a[(k, k)] -= 1.0;
    }
    for k in 0..n {
        a[(n - 1, k)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    a.lu()
        .solve(&b)
        .map(|x| x.iter().copied().collect())
        .unwrap_or_else(|| vec![f64::NAN; n])
}

/// Long-run profit per demand of the chain: Σπ(s)·reward(s) / Σ_{s∈S⁺}π(s).
pub fn chain_average_profit(
    chain: &InducedChain,
    roots: &[usize],
    params: StationaryParams,
) -> Result<StationaryReport> {
    let members: Vec<u32> = recurrent_class(chain, roots)?
        .into_iter()
        .map(|s| s as u32)
        .collect();
    let n = members.len();
    let mut local = vec![usize::MAX; chain.len()];
    for (k, &s) in members.iter().enumerate() {
        local[s as usize] = k;
    }

    // Incoming transitions per member (transposed CSR), self-loops apart.
    let mut offsets = vec![0usize; n + 1];
    let mut stay = vec![0.0; n];
    for (k, &s) in members.iter().enumerate() {
        for (t, p) in chain.row(s as usize) {
            if local[t] == k {
                stay[k] += p;
            } else {
                offsets[local[t] + 1] += 1;
            }
        }
    }
    for k in 0..n {
        offsets[k + 1] += offsets[k];
    }
    let mut fill = offsets.clone();
    let mut incoming = vec![(0u32, 0.0f64); offsets[n]];
    for (k, &s) in members.iter().enumerate() {
        for (t, p) in chain.row(s as usize) {
            let j = local[t];
            if j != k {
                incoming[fill[j]] = (k as u32, p);
                fill[j] += 1;
            }
        }
    }

    // Gauss-Seidel sweeps on π_j (1 − P_jj) = Σ_{i≠j} π_i P_ij.
    let mut pi = vec![1.0 / n as f64; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iterations {
        iterations += 1;
        let mut change = 0.0;
        for j in 0..n {
            let inflow: f64 = incoming[offsets[j]..offsets[j + 1]]
                .iter()
                .map(|&(i, p)| pi[i as usize] * p)
                .sum();
            let updated = if stay[j] < 1.0 { inflow / (1.0 - stay[j]) } else { pi[j] };
            change += (updated - pi[j]).abs();
            pi[j] = updated;
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|x| *x /= total);
        if change / total <= params.tolerance {
            converged = true;
            break;
        }
    }

    let mut used_direct_solve = false;
    if !converged {
        if n > params.direct_solve_limit {
            return Err(Error::Numerical {
                message: format!(
                    "Gauss-Seidel hit {} sweeps on {n} states and the chain is too large for a direct solve",
                    params.max_iterations
                ),
                residual: stationary_residual(chain, &local, &members, &pi),
            });
        }
        pi = direct_stationary(chain, &local, &members);
        used_direct_solve = true;
    }

    let residual = stationary_residual(chain, &local, &members, &pi);
    if !(residual <= params.max_residual) {
        return Err(Error::Numerical {
            message: "stationary distribution residual above tolerance".into(),
            residual,
        });
    }

    let mut reward_per_step = 0.0;
    let mut arrival_fraction = 0.0;
    for (k, &s) in members.iter().enumerate() {
        let s = s as usize;
        reward_per_step += pi[k] * chain.reward(s);
        if chain.arrival[s] {
            arrival_fraction += pi[k];
        }
    }
    Ok(StationaryReport {
        average_profit: reward_per_step / arrival_fraction,
        reward_per_step,
        arrival_fraction,
        residual,
        iterations,
        reachable_states: n,
        used_direct_solve,
    })
}

/// Exact long-run average profit per demand of `actions` (indexed by id).
pub fn exact_average_profit_of_actions(
    actions: &[Action],
    model: &TransitionModel,
) -> Result<StationaryReport> {
    let chain = induced_chain_from_actions(actions, model)?;
    chain_average_profit(
        &chain,
        &model.space().empty_arrival_ids(),
        StationaryParams::default(),
    )
}

pub fn exact_average_profit(policy: &Policy, model: &TransitionModel) -> Result<f64> {
    let actions = model.space().policy_actions(policy)?;
    Ok(exact_average_profit_of_actions(&actions, model)?.average_profit)
}

/// Result of checking every legal row of a model.
#[derive(Clone, Debug)]
pub struct Validation {
    pub num_states: usize,
    pub num_rows: usize,
    pub min_row_sum_deviation: f64,
    pub max_row_sum_deviation: f64,
    pub violations: Vec<String>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Row sums, successor invariants and reward placement over the full space.
pub fn validate_model(config: &SystemConfig, row_tolerance: f64) -> Result<Validation> {
    let space = enumerate_states(config)?;
    let mut v = Validation {
        num_states: space.len(),
        num_rows: 0,
        min_row_sum_deviation: f64::INFINITY,
        max_row_sum_deviation: 0.0,
        violations: Vec::new(),
    };
    for state in space.states() {
        if let Err(e) = state.check(config) {
            v.violations.push(e.to_string());
        }
        for action in valid_actions(state, config).iter() {
            let row = transition_distribution(state, action, config)?;
            v.num_rows += 1;
            let sum: f64 = row.iter().map(|e| e.probability).sum();
            let dev = (sum - 1.0).abs();
            v.min_row_sum_deviation = v.min_row_sum_deviation.min(dev);
            v.max_row_sum_deviation = v.max_row_sum_deviation.max(dev);
            if dev > row_tolerance {
                v.violations
                    .push(format!("row ({state}, {action}) sums to {sum}"));
            }
            let earns = state.is_arrival() && matches!(action, Action::Accept | Action::Federate);
            for e in &row {
                if let Err(err) = e.next.check(config) {
                    v.violations.push(format!("successor of ({state}, {action}): {err}"));
                }
                if space.id_of(&e.next).is_none() {
                    v.violations
                        .push(format!("successor {} of ({state}, {action}) not enumerated", e.next));
                }
                if !earns && e.reward != 0.0 {
                    v.violations
                        .push(format!("row ({state}, {action}) pays reward {}", e.reward));
                }
                if e.reward != row[0].reward {
                    v.violations
                        .push(format!("row ({state}, {action}) has non-uniform rewards"));
                }
            }
        }
    }
    Ok(v)
}
