//! Continuous-state pipeline: soft actor-critic on the augmented reward.
//!
//! The entropy weight `λ_π` is the SAC temperature, so the stored reward
//! holds only `log q + λ_f r_f`; the `-λ_π log π` term enters through the
//! soft value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    evaluate_policy_kl_continuous, reward_f, sac_step, AugmentedRewardConfig, ConditionalGaussian, FixedGaussian,
    ImitationError, MarginalSampling, RbfCritic, SacConfig, SacLearner, TimestepReplayBuffer, Transition,
    TransitionBuffer, DEFAULT_BUCKET_CAPACITY,
};
use crate::density::Standardizer;
use crate::mdp::{Environment, GaussianPolicy, Policy};

/// Where the non-entropy part of the reward comes from.
pub enum ContinuousReward<'a> {
    /// `log q(s, a)` from a fitted density model.
    Density(&'a dyn Fn(&[f64], &[f64]) -> f64),
    /// The environment's own reward (plain SAC baseline).
    Environment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousNdiConfig {
    pub lambda_f: f64,
    pub use_alg1_form: bool,
    pub total_steps: usize,
    /// Uniform-action steps before learning starts.
    pub warmup_steps: usize,
    pub episode_length: usize,
    /// Environment steps between evaluations (and candidate checkpoints).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub n_eval_states: usize,
    pub bucket_capacity: usize,
    pub critic_bandwidth: f64,
    pub marginal_samples: usize,
    pub normalizer_pairs: usize,
    /// Standard deviation of the random baseline used to normalize KL.
    pub baseline_std: f64,
    pub sac: SacConfig,
}

impl Default for ContinuousNdiConfig {
    fn default() -> Self {
        Self {
            lambda_f: 0.005,
            use_alg1_form: true,
            total_steps: 20_000,
            warmup_steps: 1_000,
            episode_length: 50,
            eval_every: 1_000,
            eval_episodes: 5,
            n_eval_states: 500,
            bucket_capacity: DEFAULT_BUCKET_CAPACITY,
            critic_bandwidth: 1.0,
            marginal_samples: 8,
            normalizer_pairs: 32,
            baseline_std: 1.0,
            sac: SacConfig {
                target_entropy: Some(-2.0),
                ..SacConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousMetrics {
    pub evaluation: usize,
    pub env_steps: usize,
    pub augmented_return: f64,
    pub env_return: f64,
    pub normalized_kl: Option<f64>,
    pub lambda_pi: f64,
}

#[derive(Debug, Clone)]
pub struct ContinuousNdiRun {
    pub policy: GaussianPolicy,
    pub best_evaluation: usize,
    pub metrics: Vec<ContinuousMetrics>,
    pub audit: Vec<String>,
    /// Set when a non-finite quantity stopped training after at least one
    /// evaluation; `policy` is then the best evaluated one.
    pub diverged: Option<&'static str>,
}

struct Rewarder<'a> {
    source: &'a ContinuousReward<'a>,
    critic: RbfCritic,
    states: TimestepReplayBuffer<Vec<f64>>,
    standardizer: &'a Standardizer,
    reward_cfg: AugmentedRewardConfig,
    marginal_samples: usize,
}

impl Rewarder<'_> {
    /// `log q + λ_f r_f` for a transition at timestep `t` (env reward for
    /// the baseline source).
    fn reward<R: Rng + ?Sized>(
        &self,
        s: &[f64],
        a: &[f64],
        s_next: &[f64],
        env_reward: f64,
        t: usize,
        rng: &mut R,
    ) -> Result<f64, ImitationError> {
        let base = match self.source {
            ContinuousReward::Density(log_q) => log_q(s, a),
            ContinuousReward::Environment => env_reward,
        };
        if self.reward_cfg.lambda_f == 0.0 || self.states.is_empty() {
            return Ok(base);
        }
        let zs = self.standardizer.apply(s);
        let zn = self.standardizer.apply(s_next);
        let rf = reward_f(
            &self.critic,
            &zs,
            &zn,
            &self.states,
            t,
            &self.reward_cfg,
            MarginalSampling::Sampled(self.marginal_samples),
            rng,
        )?;
        Ok(base + self.reward_cfg.lambda_f * rf)
    }

    fn refresh_normalizer<R: Rng + ?Sized>(&mut self, n_pairs: usize, t_max: usize, rng: &mut R) {
        let mut pairs = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let t = rng.random_range(0..t_max);
            if let (Some(x), Some(y)) = (self.states.sample(t, rng), self.states.sample(t + 1, rng)) {
                pairs.push((x.state.clone(), y.state.clone()));
            }
        }
        self.critic.update_normalizer(&pairs);
    }
}

/// Runs augmented-reward SAC on `env` and returns the checkpoint with the
/// best augmented return. Environment reward and KL are only reported.
pub fn run_continuous_ndi<E, X>(
    env: &E,
    reward: &ContinuousReward<'_>,
    state_standardizer: &Standardizer,
    expert: Option<&X>,
    config: &ContinuousNdiConfig,
    seed: u64,
) -> Result<ContinuousNdiRun, ImitationError>
where
    E: Environment<State = Vec<f64>, Action = Vec<f64>>,
    X: ConditionalGaussian,
{
    if config.episode_length == 0 || config.eval_every == 0 || config.eval_episodes == 0 {
        return Err(ImitationError::InvalidConfig(
            "episode length, eval interval and eval episodes must be positive".into(),
        ));
    }
    if !(config.critic_bandwidth > 0.0) || config.lambda_f < 0.0 {
        return Err(ImitationError::InvalidConfig("bandwidth must be positive and lambda_f >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0 = env.reset(&mut rng);
    let state_dim = s0.len();
    if state_standardizer.dim() != state_dim {
        return Err(ImitationError::InvalidConfig(format!(
            "state standardizer has dimension {}, environment {state_dim}",
            state_standardizer.dim()
        )));
    }
    let action_dim = probe_action_dim(env)
        .ok_or_else(|| ImitationError::InvalidConfig("environment accepts no finite action vector".into()))?;
    let mut learner = SacLearner::new(state_dim, action_dim, config.sac.clone(), &mut rng)?;
    let mut transitions = TransitionBuffer::new(config.total_steps.max(1));
    let mut rewarder = Rewarder {
        source: reward,
        critic: RbfCritic::new(config.critic_bandwidth),
        states: TimestepReplayBuffer::new(config.bucket_capacity),
        standardizer: state_standardizer,
        reward_cfg: AugmentedRewardConfig {
            lambda_pi: learner.alpha(),
            lambda_f: config.lambda_f,
            gamma: config.sac.gamma,
            use_alg1_form: config.use_alg1_form,
        },
        marginal_samples: config.marginal_samples,
    };
    let baseline = FixedGaussian::isotropic(action_dim, config.baseline_std);

    let mut metrics = Vec::new();
    let mut audit = Vec::new();
    let mut best: Option<(f64, GaussianPolicy, usize)> = None;
    let mut diverged = None;
    // Non-finite values abort; once something was evaluated, keep it.
    macro_rules! guard {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(ImitationError::NonFinite(what)) if best.is_some() => {
                    diverged = Some(what);
                    break;
                }
                Err(e) => return Err(e),
            }
        };
    }
    let mut state = s0;
    let mut t = 0;
    for step in 1..=config.total_steps {
        let action: Vec<f64> = if step <= config.warmup_steps {
            (0..action_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        } else {
            learner.policy.sample(&state, &mut rng)
        };
        let (next, env_r) = env.step(&state, &action);
        if t == 0 {
            rewarder.states.push(0, state_standardizer.apply(&state));
        }
        rewarder.states.push(t + 1, state_standardizer.apply(&next));
        let r = guard!(rewarder.reward(&state, &action, &next, env_r, t, &mut rng));
        transitions.push(Transition {
            t,
            state: state.clone(),
            action,
            reward: r,
            next_state: next.clone(),
            // Episodes end by time limit only, so targets always bootstrap.
            done: false,
        });
        t += 1;
        if t >= config.episode_length {
            t = 0;
            state = env.reset(&mut rng);
            if config.lambda_f > 0.0 {
                rewarder.refresh_normalizer(config.normalizer_pairs, config.episode_length, &mut rng);
            }
        } else {
            state = next;
        }
        if step > config.warmup_steps && transitions.len() >= config.sac.batch_size {
            guard!(sac_step(&mut learner, &transitions, &mut rng));
        }
        if step % config.eval_every == 0 {
            rewarder.reward_cfg.lambda_pi = learner.alpha();
            let eval_seed = seed.wrapping_mul(1_000_003).wrapping_add(step as u64);
            let (aug, env_ret) = guard!(evaluate_returns(env, &learner, &rewarder, config, eval_seed));
            let normalized_kl = match expert {
                Some(x) => Some(guard!(evaluate_policy_kl_continuous(
                    env,
                    &learner.policy,
                    x,
                    &baseline,
                    config.episode_length,
                    config.n_eval_states,
                    eval_seed,
                ))),
                None => None,
            };
            let evaluation = metrics.len();
            let improved = best.as_ref().is_none_or(|(b, _, _)| aug > *b);
            audit.push(format!(
                "evaluation {evaluation}: augmented_return {aug:.6}{}",
                if improved { " (new best)" } else { "" }
            ));
            if improved {
                best = Some((aug, learner.policy.clone(), evaluation));
            }
            metrics.push(ContinuousMetrics {
                evaluation,
                env_steps: step,
                augmented_return: aug,
                env_return: env_ret,
                normalized_kl,
                lambda_pi: learner.alpha(),
            });
        }
    }
    let (policy, best_evaluation) = match best {
        Some((_, p, i)) => (p, i),
        None => (learner.policy.clone(), 0),
    };
    if let Some(what) = diverged {
        audit.push(format!("non-finite {what}, stopped early"));
    }
    audit.push(format!("selected evaluation {best_evaluation} by augmented return"));
    Ok(ContinuousNdiRun {
        policy,
        best_evaluation,
        metrics,
        audit,
        diverged,
    })
}

/// Action dimension inferred from what the environment accepts.
fn probe_action_dim<E: Environment<State = Vec<f64>, Action = Vec<f64>>>(env: &E) -> Option<usize> {
    (1..=16).find(|&d| env.validate_action(&vec![0.0; d]).is_ok())
}

/// Undiscounted episode returns: augmented (`log q + λ_f r_f - λ_π log π`)
/// and environment.
fn evaluate_returns<E>(
    env: &E,
    learner: &SacLearner,
    rewarder: &Rewarder<'_>,
    config: &ContinuousNdiConfig,
    seed: u64,
) -> Result<(f64, f64), ImitationError>
where
    E: Environment<State = Vec<f64>, Action = Vec<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda_pi = learner.alpha();
    let (mut aug, mut env_total) = (0.0, 0.0);
    for _ in 0..config.eval_episodes {
        let mut s = env.reset(&mut rng);
        for t in 0..config.episode_length {
            let a = learner.policy.sample(&s, &mut rng);
            let (next, r) = env.step(&s, &a);
            let entropy = if lambda_pi > 0.0 { -lambda_pi * learner.policy.log_prob(&s, &a) } else { 0.0 };
            aug += rewarder.reward(&s, &a, &next, r, t, &mut rng)? + entropy;
            env_total += r;
            s = next;
        }
    }
    let n = config.eval_episodes as f64;
    if !aug.is_finite() {
        return Err(ImitationError::NonFinite("augmented return"));
    }
    Ok((aug / n, env_total / n))
}
