//! Policy iteration with in-place (Gauss–Seidel) evaluation.
//!
//! The solver maximizes discounted value. By default the discount is
//! applied once per demand (on transitions into arrival states), so with a
//! discount close to one the policy approximates the optimum of profit per
//! demand. Discounting every transition instead approaches the optimum of
//! reward per transition, which is a different objective: each admitted
//! demand later adds a zero-reward departure transition, so low-revenue
//! demands look worse than they are.

use crate::error::{Error, Result};
use crate::mdp::{Choice, TransitionModel};
use crate::model::{Action, DiscountEpoch, Policy};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpParams {
    pub discount: f64,
    pub epoch: DiscountEpoch,
    pub tolerance: f64,
    pub max_eval_sweeps: usize,
    pub max_improvement_rounds: usize,
}

impl Default for DpParams {
    fn default() -> Self {
        Self {
            discount: 0.99,
            epoch: DiscountEpoch::Demand,
            tolerance: 1e-6,
            max_eval_sweeps: 1_000_000,
            max_improvement_rounds: 1_000,
        }
    }
}

impl DpParams {
    /// Smallest Q-value advantage that makes improvement switch away from
    /// the current action: the evaluation error bound θ/(1−γ).
    pub fn improvement_margin(&self) -> f64 {
        self.tolerance / (1.0 - self.discount)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config(format!(
                "discount must lie in [0, 1), got {}",
                self.discount
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Discounted state values indexed by state id.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable(pub Vec<f64>);

impl ValueTable {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }
}

/// Per-successor discount factors.
fn discounts(model: &TransitionModel, params: &DpParams) -> Vec<f64> {
    model
        .space()
        .states()
        .iter()
        .map(|s| match params.epoch {
            DiscountEpoch::Transition => params.discount,
            DiscountEpoch::Demand if s.is_arrival() => params.discount,
            DiscountEpoch::Demand => 1.0,
        })
        .collect()
}

#[inline]
fn backup(model: &TransitionModel, choice: &Choice, values: &[f64], discount: &[f64]) -> f64 {
    let future: f64 = model
        .entries(choice)
        .iter()
        .map(|&(t, p)| p * discount[t as usize] * values[t as usize])
        .sum();
    choice.reward + future
}

#[derive(Clone, Copy, Debug)]
pub struct EvaluationStats {
    pub sweeps: usize,
    pub final_delta: f64,
}

/// Sweeps V(s) ← Σ P(R + γV) in place until the largest change is ≤ θ.
pub fn policy_evaluation(
    actions: &[Action],
    values: &mut ValueTable,
    params: &DpParams,
    model: &TransitionModel,
) -> Result<EvaluationStats> {
    let choices: Vec<Choice> = actions
        .iter()
        .enumerate()
        .map(|(s, &a)| {
            model.choice(s, a).copied().ok_or_else(|| Error::InvalidAction {
                action: a,
                state: model.space().state(s).to_string(),
            })
        })
        .collect::<Result<_>>()?;
    let discount = discounts(model, params);
    let v = &mut values.0;
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut delta: f64 = 0.0;
        for (s, choice) in choices.iter().enumerate() {
            let updated = backup(model, choice, v, &discount);
            delta = delta.max((updated - v[s]).abs());
            v[s] = updated;
        }
        if delta <= params.tolerance {
            return Ok(EvaluationStats {
                sweeps,
                final_delta: delta,
            });
        }
        if sweeps >= params.max_eval_sweeps || !delta.is_finite() {
            return Err(Error::EvaluationDiverged { sweeps, delta });
        }
    }
}

/// Greedy one-step lookahead on `values`. The current action is kept unless
/// another beats it by more than [`DpParams::improvement_margin`]; among the
/// rest, ties go to the earlier action in Accept > Federate > Reject order.
pub fn policy_improvement(
    current: &[Action],
    values: &ValueTable,
    params: &DpParams,
    model: &TransitionModel,
) -> (Vec<Action>, bool) {
    let discount = discounts(model, params);
    let margin = params.improvement_margin();
    let mut changed = false;
    let improved: Vec<Action> = (0..model.num_states())
        .map(|s| {
            let mut best: Option<(Action, f64)> = None;
            let mut kept: Option<f64> = None;
            for choice in model.choices(s) {
                let q = backup(model, choice, &values.0, &discount);
                if best.is_none_or(|(_, b)| q > b) {
                    best = Some((choice.action, q));
                }
                if current.get(s) == Some(&choice.action) {
                    kept = Some(q);
                }
            }
            let (best_action, best_q) = best.expect("every state has a legal action");
            // Values are only accurate to about θ/(1−γ); switching on a
            // smaller difference lets exact ties flip forever.
            let action = match kept {
                Some(q) if best_q <= q + margin => current[s],
                _ => best_action,
            };
            if current.get(s) != Some(&action) {
                changed = true;
            }
            action
        })
        .collect();
    (improved, changed)
}

#[derive(Clone, Debug)]
pub struct DpSolution {
    pub actions: Vec<Action>,
    pub values: ValueTable,
    /// Number of improvement rounds run, including the final stable one.
    pub iterations: usize,
    pub final_delta: f64,
    pub eval_sweeps: usize,
}

impl DpSolution {
    pub fn policy(&self, model: &TransitionModel) -> Policy {
        model.space().policy_from_actions(&self.actions)
    }
}

/// Starting policy: reject every arrival.
pub fn reject_all(model: &TransitionModel) -> Vec<Action> {
    model
        .space()
        .states()
        .iter()
        .map(|s| {
            if s.is_arrival() {
                Action::Reject
            } else {
                Action::NoAction
            }
        })
        .collect()
}

pub fn policy_iteration(params: &DpParams, model: &TransitionModel) -> Result<DpSolution> {
    policy_iteration_observed(params, model, |_, _, _| {})
}

/// Policy iteration that reports each evaluated policy and its values to
/// `observe(round, actions, values)` before improving on it.
pub fn policy_iteration_observed(
    params: &DpParams,
    model: &TransitionModel,
    mut observe: impl FnMut(usize, &[Action], &ValueTable),
) -> Result<DpSolution> {
    params.validate()?;
    let mut actions = reject_all(model);
    let mut values = ValueTable::zeros(model.num_states());
    let mut previous: Option<Vec<Action>> = None;
    let mut eval_sweeps = 0;
    for round in 1..=params.max_improvement_rounds {
        let stats = policy_evaluation(&actions, &mut values, params, model)?;
        eval_sweeps += stats.sweeps;
        observe(round, &actions, &values);
        let (improved, changed) = policy_improvement(&actions, &values, params, model);
        if !changed {
            return Ok(DpSolution {
                actions,
                values,
                iterations: round,
                final_delta: stats.final_delta,
                eval_sweeps,
            });
        }
        previous = Some(std::mem::replace(&mut actions, improved));
    }
    let previous = previous.unwrap_or_default();
    let diff: Vec<usize> = (0..actions.len())
        .filter(|&s| previous.get(s) != Some(&actions[s]))
        .collect();
    let example = diff.first().map_or_else(String::new, |&s| {
        format!(
            "{}: {:?} -> {:?}",
            model.space().state(s),
            previous[s],
            actions[s]
        )
    });
    Err(Error::PolicyOscillation {
        rounds: params.max_improvement_rounds,
        flipping: diff.len(),
        example,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::exact_average_profit_of_actions;
    use crate::model::{State, SystemConfig, TrafficClass};

    fn single_class(lc: u32, pc: u32, r: f64, phi: f64) -> SystemConfig {
        let c = TrafficClass::new(0, 10.0, 4.0, 2, r, phi).unwrap();
        SystemConfig::new(lc, pc, vec![c], 1.0, 1.0).unwrap()
    }

    #[test]
    fn reject_all_evaluates_to_zero() {
        let model = TransitionModel::build(&SystemConfig::table2()).unwrap();
        let mut v = ValueTable::zeros(model.num_states());
        for discount in [0.0, 0.5, 0.99] {
            let p = DpParams {
                discount,
                ..DpParams::default()
            };
            policy_evaluation(&reject_all(&model), &mut v, &p, &model).unwrap();
            assert!(v.0.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_discount_gives_immediate_rewards() {
        let cfg = SystemConfig::table2();
        let model = TransitionModel::build(&cfg).unwrap();
        let p = DpParams {
            discount: 0.0,
            ..DpParams::default()
        };
        let actions: Vec<Action> = (0..model.num_states())
            .map(|s| model.choices(s)[0].action)
            .collect();
        let mut v = ValueTable::zeros(model.num_states());
        policy_evaluation(&actions, &mut v, &p, &model).unwrap();
        for s in 0..model.num_states() {
            assert_eq!(v.0[s], model.choices(s)[0].reward);
        }
        let s0 = model.space().id_of(&State::empty(2, 0)).unwrap();
        assert_eq!(v.0[s0], 100.0);
    }

    #[test]
    fn self_loop_geometric_series() {
        // One state paying r = 100 and returning to itself with p = 1.
        let cfg = single_class(0, 0, 100.0, 0.0);
        let space = crate::mdp::StateSpace::from_states(vec![State::empty(1, 0)]);
        let model = TransitionModel::from_rows(
            &cfg,
            space,
            vec![vec![(Action::Accept, 100.0, vec![(0, 1.0)])]],
        );
        let params = DpParams::default();
        let mut v = ValueTable::zeros(1);
        policy_evaluation(&[Action::Accept], &mut v, &params, &model).unwrap();
        let slack = params.tolerance / (1.0 - params.discount);
        assert!((v.0[0] - 10_000.0).abs() <= slack, "{}", v.0[0]);
    }

    #[test]
    fn demand_epoch_leaves_departure_steps_undiscounted() {
        // Arrival (reward 100) → departure (reward 0) → arrival: one demand
        // per cycle, so the per-demand value is 100/(1−γ), not 100/(1−γ²).
        let cfg = single_class(1, 0, 100.0, 0.0);
        let arrival = State::empty(1, 0);
        let departure = State::new(&[1], &[0], crate::model::EventMark::departure(0));
        let space = crate::mdp::StateSpace::from_states(vec![arrival, departure]);
        let rows = vec![
            vec![(Action::Accept, 100.0, vec![(1, 1.0)])],
            vec![(Action::NoAction, 0.0, vec![(0, 1.0)])],
        ];
        let model = TransitionModel::from_rows(&cfg, space, rows);
        let actions = [Action::Accept, Action::NoAction];
        let slack = 1e-3;

        let per_demand = DpParams::default();
        let mut v = ValueTable::zeros(2);
        policy_evaluation(&actions, &mut v, &per_demand, &model).unwrap();
        assert!((v.0[0] - 100.0 * 0.99 / 0.01 - 100.0).abs() < slack, "{}", v.0[0]);
        assert!((v.0[1] - 100.0 * 0.99 / 0.01).abs() < slack, "{}", v.0[1]);

        let per_transition = DpParams {
            epoch: DiscountEpoch::Transition,
            ..DpParams::default()
        };
        let mut v = ValueTable::zeros(2);
        policy_evaluation(&actions, &mut v, &per_transition, &model).unwrap();
        assert!((v.0[0] - 100.0 / (1.0 - 0.99 * 0.99)).abs() < slack, "{}", v.0[0]);
    }

    #[test]
    fn demand_epoch_earns_more_per_demand_than_transition_epoch() {
        let model = TransitionModel::build(&SystemConfig::table2()).unwrap();
        let profit = |epoch| {
            let p = DpParams {
                epoch,
                ..DpParams::default()
            };
            let sol = policy_iteration(&p, &model).unwrap();
            exact_average_profit_of_actions(&sol.actions, &model)
                .unwrap()
                .average_profit
        };
        let per_demand = profit(DiscountEpoch::Demand);
        let per_transition = profit(DiscountEpoch::Transition);
        assert!(per_demand > per_transition + 1.0, "{per_demand} vs {per_transition}");
    }

    #[test]
    fn zero_values_improve_to_myopic_accept() {
        let cfg = SystemConfig::table2();
        let model = TransitionModel::build(&cfg).unwrap();
        let zero = ValueTable::zeros(model.num_states());
        for discount in [0.0, 0.9] {
            let p = DpParams {
                discount,
                ..DpParams::default()
            };
            let (policy, changed) = policy_improvement(&reject_all(&model), &zero, &p, &model);
            assert!(changed);
            for (s, state) in model.space().states().iter().enumerate() {
                let legal: Vec<Action> = model.choices(s).iter().map(|c| c.action).collect();
                let expected = if !state.is_arrival() {
                    Action::NoAction
                } else if legal.contains(&Action::Accept) {
                    Action::Accept
                } else if legal.contains(&Action::Federate) {
                    Action::Federate
                } else {
                    Action::Reject
                };
                assert_eq!(policy[s], expected, "{state}");
            }
        }
    }

    #[test]
    fn zero_discount_improvement_ignores_values() {
        let model = TransitionModel::build(&SystemConfig::table2()).unwrap();
        let p = DpParams {
            discount: 0.0,
            epoch: DiscountEpoch::Transition,
            ..DpParams::default()
        };
        let noisy = ValueTable((0..model.num_states()).map(|s| (s % 17) as f64 * 3.0).collect());
        let zero = ValueTable::zeros(model.num_states());
        let a = policy_improvement(&reject_all(&model), &noisy, &p, &model).0;
        let b = policy_improvement(&reject_all(&model), &zero, &p, &model).0;
        assert_eq!(a, b);
    }

    #[test]
    fn expensive_federation_without_local_capacity_rejects_everything() {
        let cfg = single_class(0, 10, 10.0, 50.0);
        let model = TransitionModel::build(&cfg).unwrap();
        let sol = policy_iteration(&DpParams::default(), &model).unwrap();
        for (s, state) in model.space().states().iter().enumerate() {
            if state.is_arrival() {
                assert_eq!(sol.actions[s], Action::Reject);
            }
        }
        let report = exact_average_profit_of_actions(&sol.actions, &model).unwrap();
        assert_eq!(report.average_profit, 0.0);
    }

    #[test]
    fn large_capacity_accepts_everywhere() {
        let cfg = single_class(100, 20, 100.0, 30.0);
        let model = TransitionModel::build(&cfg).unwrap();
        let sol = policy_iteration(&DpParams::default(), &model).unwrap();
        for (s, state) in model.space().states().iter().enumerate() {
            if state.is_arrival() && model.choice(s, Action::Accept).is_some() {
                assert_eq!(sol.actions[s], Action::Accept, "{state}");
            }
        }
    }

    #[test]
    fn final_policy_is_a_fixed_point() {
        let model = TransitionModel::build(&SystemConfig::table2()).unwrap();
        let params = DpParams::default();
        let sol = policy_iteration(&params, &model).unwrap();
        assert!(sol.iterations < 100);
        let (again, changed) = policy_improvement(&sol.actions, &sol.values, &params, &model);
        assert!(!changed);
        assert_eq!(again, sol.actions);
    }

    #[test]
    fn free_federation_ties_do_not_oscillate() {
        // With ζ = 0, Accept and Federate earn the same; their values can
        // tie exactly and must not flip between rounds.
        let cfg = SystemConfig::table2().with_local_capacity(10).with_cost_scale(0.0);
        let model = TransitionModel::build(&cfg).unwrap();
        let sol = policy_iteration(&DpParams::default(), &model).unwrap();
        assert!(sol.iterations < 20, "{}", sol.iterations);
    }

    #[test]
    fn invalid_discount_is_rejected() {
        let model = TransitionModel::build(&single_class(0, 0, 1.0, 0.0)).unwrap();
        let p = DpParams {
            discount: 1.0,
            ..DpParams::default()
        };
        assert!(policy_iteration(&p, &model).is_err());
    }

    #[test]
    fn sweep_cap_reports_non_convergence() {
        let model = TransitionModel::build(&SystemConfig::table2()).unwrap();
        let p = DpParams {
            max_eval_sweeps: 3,
            ..DpParams::default()
        };
        let actions: Vec<Action> = (0..model.num_states())
            .map(|s| model.choices(s)[0].action)
            .collect();
        let mut v = ValueTable::zeros(model.num_states());
        let err = policy_evaluation(&actions, &mut v, &p, &model).unwrap_err();
        assert!(matches!(err, Error::EvaluationDiverged { sweeps: 3, .. }));
    }
}
