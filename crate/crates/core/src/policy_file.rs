//! JSON policy files: a header with the config hash and state count, then a
//! map from state id (enumeration order of the config) to action name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::StateSpace;
use crate::model::{Action, Policy, SystemConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub config_hash: String,
    pub num_states: usize,
    pub actions: BTreeMap<usize, Action>,
}

impl PolicyFile {
    /// States of `policy` outside `space` are dropped.
    pub fn from_policy(policy: &Policy, space: &StateSpace, config: &SystemConfig) -> Self {
        let actions = policy
            .iter()
            .filter_map(|(s, a)| space.id_of(s).map(|id| (id, a)))
            .collect();
        Self {
            config_hash: config.content_hash(),
            num_states: space.len(),
            actions,
        }
    }

    pub fn to_policy(&self, space: &StateSpace, config: &SystemConfig) -> Result<Policy> {
        let found = config.content_hash();
        if found != self.config_hash {
            return Err(Error::ConfigMismatch {
                expected: self.config_hash.clone(),
                found,
            });
        }
        if self.num_states != space.len() {
            return Err(Error::Config(format!(
                "policy file covers {} states, config has {}",
                self.num_states,
                space.len()
            )));
        }
        let mut policy = Policy::new();
        for (&id, &action) in &self.actions {
            if id >= space.len() {
                return Err(Error::Config(format!("state id {id} out of range")));
            }
            policy.insert(space.state(id).clone(), action);
        }
        if let Some((s, a)) = policy.find_illegal(config) {
            return Err(Error::InvalidAction {
                action: a,
                state: s.to_string(),
            });
        }
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::enumerate_states;

    #[test]
    fn round_trip_and_hash_check() {
        let cfg = SystemConfig::table2().with_local_capacity(6);
        let space = enumerate_states(&cfg).unwrap();
        let policy: Policy = space
            .states()
            .iter()
            .map(|s| (s.clone(), crate::agents::greedy_action(s, &cfg)))
            .collect();
        let file = PolicyFile::from_policy(&policy, &space, &cfg);
        let text = serde_json::to_string(&file).unwrap();
        assert!(text.contains("\"accept\"") && text.contains("\"no_action\""));
        let back: PolicyFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_policy(&space, &cfg).unwrap(), policy);

        let other = cfg.with_cost_scale(2.0);
        assert!(matches!(
            back.to_policy(&space, &other),
            Err(Error::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn illegal_entries_are_refused() {
        let cfg = SystemConfig::table2().with_local_capacity(0);
        let space = enumerate_states(&cfg).unwrap();
        let mut file = PolicyFile {
            config_hash: cfg.content_hash(),
            num_states: space.len(),
            actions: BTreeMap::new(),
        };
        file.actions.insert(0, Action::Accept);
        assert!(file.to_policy(&space, &cfg).is_err());
    }
}
