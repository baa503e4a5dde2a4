use std::collections::HashMap;

use fedadm::agents::Greedy;
use fedadm::mdp::{enumerate_states, transition_distribution};
use fedadm::model::valid_actions;
use fedadm::seed::rng_from_seed;
use fedadm::sim::{run_policy, Env, RunOptions};
use fedadm::{State, SystemConfig};
use rand::seq::SliceRandom;

#[test]
fn sampled_successors_match_the_model_rows() {
    let cfg = SystemConfig::table2().with_local_capacity(16);
    let space = enumerate_states(&cfg).unwrap();
    let mut rng = rng_from_seed(11);
    let samples = 20_000;
    for _ in 0..8 {
        let state = space.states().choose(&mut rng).unwrap().clone();
        let legal: Vec<_> = valid_actions(&state, &cfg).iter().collect();
        let action = *legal.choose(&mut rng).unwrap();
        let row = transition_distribution(&state, action, &cfg).unwrap();
        let mut counts: HashMap<State, u64> = HashMap::new();
        let mut env = Env::new(&cfg);
        for _ in 0..samples {
            env.reset_to(state.clone(), rand::Rng::gen(&mut rng)).unwrap();
            let (next, reward) = env.step(action).unwrap();
            assert_eq!(reward, row[0].reward);
            *counts.entry(next).or_default() += 1;
        }
        let mut tv = 0.0;
        for e in &row {
            let observed = counts.remove(&e.next).unwrap_or(0) as f64 / samples as f64;
            tv += (observed - e.probability).abs();
        }
        assert!(counts.is_empty(), "successors outside the row from {state}");
        assert!(tv / 2.0 < 0.02, "{state} {action}: tv {}", tv / 2.0);
    }
}

#[test]
fn reset_to_rejects_invalid_states() {
    let cfg = SystemConfig::table2();
    let mut env = Env::new(&cfg);
    let over = State::new(&[16, 0], &[0, 0], fedadm::EventMark::arrival(0));
    assert!(env.reset_to(over, 0).is_err());
}

#[test]
fn runs_are_pure_functions_of_the_seed() {
    let cfg = SystemConfig::table2();
    let a = run_policy(&cfg, &Greedy, 5_000, 42, RunOptions::default()).unwrap();
    let b = run_policy(&cfg, &Greedy, 5_000, 42, RunOptions::default()).unwrap();
    let c = run_policy(&cfg, &Greedy, 5_000, 43, RunOptions::default()).unwrap();
    assert_eq!(a.total_profit, b.total_profit);
    assert_eq!(a.steps, b.steps);
    assert_ne!(a.total_profit, c.total_profit);
}

#[test]
fn counted_decisions_cover_every_demand() {
    let cfg = SystemConfig::table2().with_local_capacity(8);
    let run = run_policy(&cfg, &Greedy, 20_000, 3, RunOptions::default()).unwrap();
    assert_eq!(run.num_demands, 20_000);
    assert_eq!(run.decisions.total(), 20_000);
    assert!(run.steps >= run.num_demands);
    assert!((run.total_profit / run.num_demands as f64 - run.profit_per_demand).abs() < 1e-9);
}

#[test]
fn mean_holding_time_matches_the_total_rate() {
    // From the empty system the next event comes after Exp(Λ).
    let cfg = SystemConfig::table2();
    let mut env = Env::new(&cfg);
    let n = 50_000;
    let mut total = 0.0;
    for k in 0..n {
        env.reset_to(State::empty(2, 0), k).unwrap();
        env.step(fedadm::Action::Reject).unwrap();
        total += env.clock();
    }
    let expected = 1.0 / cfg.total_arrival_rate();
    assert!(((total / n as f64) - expected).abs() < 0.02 * expected);
}
