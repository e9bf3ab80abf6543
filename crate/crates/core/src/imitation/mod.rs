//! Augmented-reward reinforcement learning.
//!
//! The learner maximizes `log q(s,a) + λ_π r_π + λ_f r_f` where `q` is a
//! density model of expert occupancy, `r_π` is the policy-entropy reward and
//! `r_f` the mutual-information correction built from a critic and a
//! timestep-indexed replay buffer.

mod buffer;
mod continuous;
mod critic;
mod eval;
mod sac;
mod spi;
mod tabular;

pub use buffer::{Tagged, TimestepReplayBuffer, Transition, TransitionBuffer, DEFAULT_BUCKET_CAPACITY};
pub use continuous::{run_continuous_ndi, ContinuousMetrics, ContinuousNdiConfig, ContinuousNdiRun, ContinuousReward};
pub use critic::{rbf_critic_value, reward_f, sq_dist, MarginalSampling, RbfCritic, StateCritic};
pub use eval::{
    evaluate_policy_kl_continuous, evaluate_policy_kl_tabular, evaluate_return_env, evaluate_return_tabular,
    gaussian_kl, normalized_kl_from_states, ConditionalGaussian, FixedGaussian, KlMode, ReturnEstimate,
};
pub use sac::{sac_step, SacConfig, SacLearner, SacStats};
pub use spi::{soft_policy_iteration, soft_q_iteration, SoftQ};
pub use tabular::{
    mi_reward_table, run_tabular_ndi, FeatureCritic, IterationMetrics, LambdaPi, TabularNdiConfig, TabularNdiRun,
};

use crate::mdp::{MdpError, SoftmaxPolicy};
use crate::nn::NnError;
use crate::occupancy::OccupancyError;

/// Mass tolerance for exact occupancy solves.
pub(crate) const OCC_TOL: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum ImitationError {
    #[error("marginal pair set is empty")]
    EmptyPairs,
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("soft Bellman iteration did not converge (residual {residual:e})")]
    NotConverged { residual: f64 },
    #[error("normalizing baseline KL is zero")]
    ZeroDenominator,
    #[error("need at least {needed} transitions, buffer holds {have}")]
    BufferTooSmall { needed: usize, have: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Occupancy(#[from] OccupancyError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Weights and shape of the augmented reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedRewardConfig {
    pub lambda_pi: f64,
    pub lambda_f: f64,
    pub gamma: f64,
    /// Algorithm-style shapes when true, theorem-style `(1+γ)` / `γ f`
    /// shapes otherwise.
    pub use_alg1_form: bool,
}

impl Default for AugmentedRewardConfig {
    fn default() -> Self {
        Self {
            lambda_pi: 1.0,
            lambda_f: 0.005,
            gamma: 0.99,
            use_alg1_form: true,
        }
    }
}

/// Entropy reward for taking `a` in `s`.
pub fn reward_pi(policy: &SoftmaxPolicy, s: usize, a: usize, config: &AugmentedRewardConfig) -> f64 {
    reward_pi_from_log_prob(policy.log_prob_at(s, a), config)
}

pub fn reward_pi_from_log_prob(log_prob: f64, config: &AugmentedRewardConfig) -> f64 {
    if config.use_alg1_form {
        -log_prob
    } else {
        -(1.0 + config.gamma) * log_prob
    }
}

/// `log q + λ_π r_π + λ_f r_f`.
pub fn augmented_reward(log_q: f64, r_pi: f64, r_f: f64, config: &AugmentedRewardConfig) -> f64 {
    log_q + config.lambda_pi * r_pi + config.lambda_f * r_f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(alg1: bool) -> AugmentedRewardConfig {
        AugmentedRewardConfig {
            lambda_pi: 0.1,
            lambda_f: 0.005,
            gamma: 0.9,
            use_alg1_form: alg1,
        }
    }

    #[test]
    fn entropy_reward_examples() {
        let u = SoftmaxPolicy::uniform(1, 2);
        assert!((reward_pi(&u, 0, 0, &cfg(true)) - 2f64.ln()).abs() < 1e-15);
        assert!((reward_pi(&u, 0, 1, &cfg(false)) - 1.9 * 2f64.ln()).abs() < 1e-15);
        let sharp = SoftmaxPolicy::new(1, 2, vec![40.0, 0.0]).unwrap();
        assert!(reward_pi(&sharp, 0, 0, &cfg(true)).abs() < 1e-15);
    }

    #[test]
    fn augmented_examples() {
        let zero = AugmentedRewardConfig {
            lambda_pi: 0.0,
            lambda_f: 0.0,
            ..cfg(true)
        };
        assert_eq!(augmented_reward(-2.5, 3.0, 7.0, &zero), -2.5);
        let r = augmented_reward(1.5, 0.6931, -0.8, &cfg(true));
        assert!((r - 1.56531).abs() < 1e-12);
    }
}
