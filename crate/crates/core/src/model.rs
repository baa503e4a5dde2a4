//! Domain vocabulary: traffic classes, the two-domain system configuration,
//! MDP states and actions, and the immediate effect of an admission decision.

use std::fmt;
use std::path::Path;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Per-class demand counts. Inline for up to four classes.
pub type Counts = SmallVec<[u32; 4]>;

/// A service type together with its traffic parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficClass {
    pub index: usize,
    pub arrival_rate: f64,
    pub departure_rate: f64,
    pub resource_demand: u32,
    pub revenue: f64,
    pub federation_cost: f64,
}

impl TrafficClass {
    pub fn new(
        index: usize,
        arrival_rate: f64,
        departure_rate: f64,
        resource_demand: u32,
        revenue: f64,
        federation_cost: f64,
    ) -> Result<Self> {
        let class = Self {
            index,
            arrival_rate,
            departure_rate,
            resource_demand,
            revenue,
            federation_cost,
        };
        class.validate()?;
        Ok(class)
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("class {}: {what}", self.index)));
        if !(self.arrival_rate.is_finite() && self.arrival_rate > 0.0) {
            return bad("arrival rate must be positive");
        }
        if !(self.departure_rate.is_finite() && self.departure_rate > 0.0) {
            return bad("departure rate must be positive");
        }
        if self.resource_demand < 1 {
            return bad("resource demand must be at least 1");
        }
        if !(self.revenue.is_finite() && self.revenue >= 0.0) {
            return bad("revenue must be non-negative");
        }
        if !(self.federation_cost.is_finite() && self.federation_cost >= 0.0) {
            return bad("federation cost must be non-negative");
        }
        Ok(())
    }
}

/// On-disk shape of one class: `{lambda, mu, w, r, phi}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassFile {
    lambda: f64,
    mu: f64,
    w: u32,
    r: f64,
    phi: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConfigFile {
    lc: u32,
    pc: u32,
    #[serde(default = "one")]
    load_scale: f64,
    #[serde(default = "one")]
    cost_scale: f64,
    classes: Vec<ClassFile>,
}

/// Capacities of the consumer and provider domains plus the offered traffic.
///
/// Arrival rates and federation costs are stored unscaled; `load_scale` and
/// `cost_scale` are applied by the `effective_*` accessors so that one base
/// configuration can drive every sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    pub local_capacity: u32,
    pub provider_capacity: u32,
    pub classes: Vec<TrafficClass>,
    pub load_scale: f64,
    pub cost_scale: f64,
}

impl SystemConfig {
    pub fn new(
        local_capacity: u32,
        provider_capacity: u32,
        classes: Vec<TrafficClass>,
        load_scale: f64,
        cost_scale: f64,
    ) -> Result<Self> {
        let config = Self {
            local_capacity,
            provider_capacity,
            classes,
            load_scale,
            cost_scale,
        };
        config.validate()?;
        Ok(config)
    }

    /// The two-class setting used throughout the experiments: LC=30, PC=20,
    /// class 1 = (10, 4, 2, 100, 30), class 2 = (5, 0.5, 4, 20, 5).
    pub fn table2() -> Self {
        let classes = vec![
            TrafficClass::new(0, 10.0, 4.0, 2, 100.0, 30.0).unwrap(),
            TrafficClass::new(1, 5.0, 0.5, 4, 20.0, 5.0).unwrap(),
        ];
        Self::new(30, 20, classes, 1.0, 1.0).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("at least one traffic class is required".into()));
        }
        if !(self.load_scale.is_finite() && self.load_scale > 0.0) {
            return Err(Error::Config("load_scale must be positive".into()));
        }
        if !(self.cost_scale.is_finite() && self.cost_scale >= 0.0) {
            return Err(Error::Config("cost_scale must be non-negative".into()));
        }
        for (i, class) in self.classes.iter().enumerate() {
            if class.index != i {
                return Err(Error::Config(format!(
                    "class at position {i} carries index {}",
                    class.index
                )));
            }
            class.validate()?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn effective_arrival_rate(&self, class: usize) -> f64 {
        self.load_scale * self.classes[class].arrival_rate
    }

    pub fn effective_federation_cost(&self, class: usize) -> f64 {
        self.cost_scale * self.classes[class].federation_cost
    }

    /// Λ: total (scaled) arrival rate.
    pub fn total_arrival_rate(&self) -> f64 {
        (0..self.num_classes())
            .map(|i| self.effective_arrival_rate(i))
            .sum()
    }

    /// Σᵢ wᵢλᵢ/μᵢ under the current load scale.
    pub fn offered_load(&self) -> f64 {
        self.classes
            .iter()
            .map(|c| {
                self.load_scale * c.arrival_rate * c.resource_demand as f64 / c.departure_rate
            })
            .sum()
    }

    pub fn with_local_capacity(&self, lc: u32) -> Self {
        Self {
            local_capacity: lc,
            ..self.clone()
        }
    }

    pub fn with_load_scale(&self, load_scale: f64) -> Self {
        Self {
            load_scale,
            ..self.clone()
        }
    }

    pub fn with_cost_scale(&self, cost_scale: f64) -> Self {
        Self {
            cost_scale,
            ..self.clone()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ConfigFile = serde_json::from_str(text)?;
        let classes = file
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| TrafficClass::new(i, c.lambda, c.mu, c.w, c.r, c.phi))
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.lc, file.pc, classes, file.load_scale, file.cost_scale)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_json(&text)
    }

    fn to_file(&self) -> ConfigFile {
        ConfigFile {
            lc: self.local_capacity,
            pc: self.provider_capacity,
            load_scale: self.load_scale,
            cost_scale: self.cost_scale,
            classes: self
                .classes
                .iter()
                .map(|c| ClassFile {
                    lambda: c.arrival_rate,
                    mu: c.departure_rate,
                    w: c.resource_demand,
                    r: c.revenue,
                    phi: c.federation_cost,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let compact = serde_json::to_string(&self.to_file()).expect("config serializes");
        Sha256::digest(compact.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Arrival,
    Departure,
}

/// The single nonzero entry of the event vector `d`: `+eᵢ` or `−eᵢ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventMark {
    pub class_index: usize,
    pub kind: EventKind,
}

impl EventMark {
    pub fn arrival(class_index: usize) -> Self {
        Self {
            class_index,
            kind: EventKind::Arrival,
        }
    }

    pub fn departure(class_index: usize) -> Self {
        Self {
            class_index,
            kind: EventKind::Departure,
        }
    }

    pub fn is_arrival(&self) -> bool {
        self.kind == EventKind::Arrival
    }
}

/// `(l, f, d)`: occupancy of both domains plus the pending event.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    pub local: Counts,
    pub federated: Counts,
    pub event: EventMark,
}

impl State {
    pub fn new(local: &[u32], federated: &[u32], event: EventMark) -> Self {
        Self {
            local: Counts::from_slice(local),
            federated: Counts::from_slice(federated),
            event,
        }
    }

    /// Empty system with an arrival of `class`.
    pub fn empty(num_classes: usize, class: usize) -> Self {
        Self {
            local: smallvec::smallvec![0; num_classes],
            federated: smallvec::smallvec![0; num_classes],
            event: EventMark::arrival(class),
        }
    }

    pub fn is_arrival(&self) -> bool {
        self.event.is_arrival()
    }

    pub fn is_empty_system(&self) -> bool {
        self.local.iter().chain(self.federated.iter()).all(|&c| c == 0)
    }

    /// Checks every state invariant against `config`.
    pub fn check(&self, config: &SystemConfig) -> Result<()> {
        let k = config.num_classes();
        if self.local.len() != k || self.federated.len() != k {
            return Err(Error::Config(format!(
                "state {self} has count vectors of the wrong length (expected {k})"
            )));
        }
        if self.event.class_index >= k {
            return Err(Error::Config(format!("state {self} marks an unknown class")));
        }
        if used_capacity(&self.local, config)? > config.local_capacity as u64 {
            return Err(Error::Config(format!("state {self} exceeds LC")));
        }
        if used_capacity(&self.federated, config)? > config.provider_capacity as u64 {
            return Err(Error::Config(format!("state {self} exceeds PC")));
        }
        let i = self.event.class_index;
        if !self.is_arrival() && self.local[i] + self.federated[i] == 0 {
            return Err(Error::Config(format!(
                "state {self} marks a departure of a class with no active demand"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.is_arrival() { '+' } else { '-' };
        write!(
            f,
            "(l={:?}, f={:?}, {sign}e{})",
            self.local.as_slice(),
            self.federated.as_slice(),
            self.event.class_index
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Reject,
    Accept,
    Federate,
    NoAction,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::Reject,
        Action::Accept,
        Action::Federate,
        Action::NoAction,
    ];

    /// Tie-break order used by every argmax in the crate.
    pub const PREFERENCE: [Action; 4] = [
        Action::Accept,
        Action::Federate,
        Action::Reject,
        Action::NoAction,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Reject => "reject",
            Action::Accept => "accept",
            Action::Federate => "federate",
            Action::NoAction => "no_action",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of actions as a bitmask, iterated in [`Action::PREFERENCE`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ActionSet(u8);

impl ActionSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn only(action: Action) -> Self {
        Self(1 << action.index())
    }

    pub fn insert(&mut self, action: Action) {
        self.0 |= 1 << action.index();
    }

    pub fn contains(&self, action: Action) -> bool {
        self.0 & (1 << action.index()) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Action> {
        Action::PREFERENCE
            .into_iter()
            .filter(move |a| self.contains(*a))
    }

    /// The `k`-th member in preference order.
    pub fn nth(self, k: usize) -> Option<Action> {
        self.iter().nth(k)
    }
}

impl FromIterator<Action> for ActionSet {
    fn from_iter<T: IntoIterator<Item = Action>>(iter: T) -> Self {
        let mut set = Self::empty();
        for a in iter {
            set.insert(a);
        }
        set
    }
}

/// Σᵢ counts[i]·wᵢ.
pub fn used_capacity(counts: &[u32], config: &SystemConfig) -> Result<u64> {
    if counts.len() != config.num_classes() {
        return Err(Error::Config(format!(
            "count vector has {} entries but the config has {} classes",
            counts.len(),
            config.num_classes()
        )));
    }
    Ok(counts
        .iter()
        .zip(&config.classes)
        .map(|(&n, c)| n as u64 * c.resource_demand as u64)
        .sum())
}

fn used_unchecked(counts: &[u32], config: &SystemConfig) -> u64 {
    counts
        .iter()
        .zip(&config.classes)
        .map(|(&n, c)| n as u64 * c.resource_demand as u64)
        .sum()
}

pub fn can_accept(state: &State, config: &SystemConfig) -> bool {
    let w = config.classes[state.event.class_index].resource_demand as u64;
    used_unchecked(&state.local, config) + w <= config.local_capacity as u64
}

pub fn can_federate(state: &State, config: &SystemConfig) -> bool {
    let w = config.classes[state.event.class_index].resource_demand as u64;
    used_unchecked(&state.federated, config) + w <= config.provider_capacity as u64
}

/// A(s). Never empty: departure states get `{NoAction}`, arrivals always
/// allow `Reject`.
pub fn valid_actions(state: &State, config: &SystemConfig) -> ActionSet {
    if !state.is_arrival() {
        return ActionSet::only(Action::NoAction);
    }
    let mut set = ActionSet::only(Action::Reject);
    if can_accept(state, config) {
        set.insert(Action::Accept);
    }
    if can_federate(state, config) {
        set.insert(Action::Federate);
    }
    set
}

/// Occupancy right after the decision, before the next event.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionEffect {
    pub local: Counts,
    pub federated: Counts,
    pub reward: f64,
}

/// Immediate reward of taking `action` in `state`.
pub fn action_reward(state: &State, action: Action, config: &SystemConfig) -> f64 {
    let i = state.event.class_index;
    match action {
        Action::Accept => config.classes[i].revenue,
        Action::Federate => config.classes[i].revenue - config.effective_federation_cost(i),
        Action::Reject | Action::NoAction => 0.0,
    }
}

/// Applies the decision part of a transition. A departure's removal is not
/// applied here; it belongs to the event step that consumes the departure.
pub fn apply_action(state: &State, action: Action, config: &SystemConfig) -> Result<ActionEffect> {
    if !valid_actions(state, config).contains(action) {
        return Err(Error::InvalidAction {
            action,
            state: state.to_string(),
        });
    }
    let mut local = state.local.clone();
    let mut federated = state.federated.clone();
    let i = state.event.class_index;
    match action {
        Action::Accept => local[i] += 1,
        Action::Federate => federated[i] += 1,
        Action::Reject | Action::NoAction => {}
    }
    Ok(ActionEffect {
        local,
        federated,
        reward: action_reward(state, action, config),
    })
}

/// A deterministic decision rule over states.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Policy {
    actions: FxHashMap<State, Action>,
}

impl Policy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, state: State, action: Action) {
        self.actions.insert(state, action);
    }

    pub fn get(&self, state: &State) -> Option<Action> {
        self.actions.get(state).copied()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&State, Action)> {
        self.actions.iter().map(|(s, a)| (s, *a))
    }

    /// Returns the first state whose mapped action is illegal.
    pub fn find_illegal(&self, config: &SystemConfig) -> Option<(&State, Action)> {
        self.iter()
            .find(|(s, a)| !valid_actions(s, config).contains(*a))
    }
}

impl FromIterator<(State, Action)> for Policy {
    fn from_iter<T: IntoIterator<Item = (State, Action)>>(iter: T) -> Self {
        Self {
            actions: iter.into_iter().collect(),
        }
    }
}

/// What one unit of "time" is for discounting and average-reward
/// estimates: every transition, or only transitions that reach an arrival
/// (one per demand).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DiscountEpoch {
    /// Every transition is discounted.
    Transition,
    /// Only transitions into arrival states (one per demand).
    Demand,
}
