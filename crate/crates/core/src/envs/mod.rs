//! Built-in environments: injective chain and gridworld MDPs for exact
//! checks, and a planar point mass for the neural pipeline.
//!
//! Experts are produced in-repo: soft value iteration at temperature
//! [`EXPERT_TEMPERATURE`] on the tabular environments and a noisy PD
//! controller on the point mass.

mod grid;
mod pointmass;

pub use grid::{build_chain, build_gridworld, GridAction, GridworldSpec, CHAIN_ACTIONS};
pub use pointmass::{
    pointmass_reward, pointmass_step, PdExpert, PointMassSpec, POINTMASS_ACTION_DIM, POINTMASS_STATE_DIM,
};

use crate::imitation::{soft_policy_iteration, ImitationError};
use crate::mdp::{MdpError, SoftmaxPolicy, TabularMdp};

pub const EXPERT_TEMPERATURE: f64 = 0.05;

/// Registry names accepted by [`registry`].
pub const ENV_NAMES: [&str; 3] = ["chain-5", "grid-5x5", "pointmass"];

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("unknown environment {0:?}")]
    Unknown(String),
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("dynamics are not injective: {0}")]
    NotInjective(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Imitation(#[from] ImitationError),
}

/// A tabular environment together with the real-valued embeddings used by
/// density models and the critic.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    pub name: String,
    pub mdp: TabularMdp,
    /// One vector per state.
    pub state_features: Vec<Vec<f64>>,
    /// One vector per action.
    pub action_features: Vec<Vec<f64>>,
}

impl TabularEnv {
    /// Concatenated `(state, action)` feature vector.
    pub fn pair_features(&self, s: usize, a: usize) -> Vec<f64> {
        let mut v = self.state_features[s].clone();
        v.extend_from_slice(&self.action_features[a]);
        v
    }

    /// Inverse of the feature maps by exact match.
    pub fn state_index(&self, features: &[f64]) -> Option<usize> {
        self.state_features.iter().position(|f| f.as_slice() == features)
    }

    pub fn action_index(&self, features: &[f64]) -> Option<usize> {
        self.action_features.iter().position(|f| f.as_slice() == features)
    }

    /// Soft-optimal expert on the true reward.
    pub fn expert(&self) -> Result<SoftmaxPolicy, EnvError> {
        Ok(soft_policy_iteration(&self.mdp, EXPERT_TEMPERATURE, 1e-12)?)
    }
}

#[derive(Debug, Clone)]
pub enum RegisteredEnv {
    Tabular(TabularEnv),
    PointMass(PointMassSpec),
}

pub fn chain_env(n_states: usize, gamma: f64) -> Result<TabularEnv, EnvError> {
    Ok(TabularEnv {
        name: format!("chain-{n_states}"),
        mdp: build_chain(n_states, gamma, 1.0)?,
        state_features: (0..n_states).map(|s| vec![s as f64]).collect(),
        action_features: vec![vec![-1.0], vec![1.0]],
    })
}

pub fn grid_env(spec: &GridworldSpec) -> Result<TabularEnv, EnvError> {
    let mdp = build_gridworld(spec)?;
    let state_features = (0..spec.n_states())
        .map(|s| {
            let (x, y) = spec.coords(s);
            vec![x as f64, y as f64]
        })
        .collect();
    let action_features = spec
        .actions()
        .iter()
        .map(|a| {
            let (dx, dy) = a.displacement();
            vec![dx as f64, dy as f64]
        })
        .collect();
    Ok(TabularEnv {
        name: format!("grid-{}x{}", spec.width, spec.height),
        mdp,
        state_features,
        action_features,
    })
}

/// Looks up a built-in environment by name.
pub fn registry(name: &str) -> Result<RegisteredEnv, EnvError> {
    match name {
        "chain-5" => Ok(RegisteredEnv::Tabular(chain_env(5, 0.9)?)),
        "grid-5x5" => Ok(RegisteredEnv::Tabular(grid_env(&GridworldSpec::five_by_five())?)),
        "pointmass" => Ok(RegisteredEnv::PointMass(PointMassSpec::default())),
        other => Err(EnvError::Unknown(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::check_injective_dynamics;
    use crate::occupancy::occupancy_measure;

    #[test]
    fn registry_names() {
        for name in ENV_NAMES {
            assert!(registry(name).is_ok(), "{name}");
        }
        assert!(matches!(registry("hopper"), Err(EnvError::Unknown(_))));
    }

    #[test]
    fn tabular_envs_are_injective_and_experts_near_optimal() {
        for name in ["chain-5", "grid-5x5"] {
            let RegisteredEnv::Tabular(env) = registry(name).unwrap() else {
                panic!("{name} should be tabular");
            };
            assert!(check_injective_dynamics(&env.mdp));
            let expert = env.expert().unwrap();
            let ret = occupancy_measure(&env.mdp, &expert, 1e-10).unwrap().expectation(env.mdp.reward_table());
            // Deterministic optimum: both fixtures reach the goal in 4 steps.
            let optimal = 0.9f64.powi(4) / 0.1;
            assert!(ret >= 0.99 * optimal, "{name}: {ret} vs {optimal}");
            assert!(ret <= optimal + 1e-9);
        }
    }

    #[test]
    fn feature_maps_roundtrip() {
        let RegisteredEnv::Tabular(env) = registry("grid-5x5").unwrap() else {
            unreachable!()
        };
        for s in 0..25 {
            assert_eq!(env.state_index(&env.state_features[s]), Some(s));
        }
        assert_eq!(env.pair_features(7, 4), vec![2.0, 1.0, 0.0, 0.0]);
    }
}
