//! Markov decision processes, policies, trajectory sampling and exact
//! per-timestep state marginals.
//!
//! Tabular MDPs have deterministic transition tables. Everything stochastic
//! takes an explicit seed; nothing here holds shared mutable state.

mod policy;
mod tabular;

pub use policy::{
    diag_gaussian_log_density, policy_log_prob, GaussianPolicy, Policy, SoftmaxPolicy,
    LOG_STD_MAX, LOG_STD_MIN, NEVER_LOGIT,
};
pub(crate) use policy::sample_categorical;
pub use tabular::{check_injective_dynamics, single_state_mdp, xor_mdp, TabularMdp};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("mdp needs at least one state and one action")]
    Empty,
    #[error("table shapes do not match {n_states} states x {n_actions} actions")]
    ShapeMismatch { n_states: usize, n_actions: usize },
    #[error("discount {0} outside [0, 1)")]
    InvalidDiscount(f64),
    #[error("transition ({state}, {action}) -> {target} is not a valid state")]
    InvalidTransition {
        state: usize,
        action: usize,
        target: usize,
    },
    #[error("initial distribution must be nonnegative and sum to 1 (sum = {0})")]
    InvalidInitialDist(f64),
    #[error("reward table contains non-finite entries")]
    NonFiniteReward,
    #[error("policy logits must be finite or -inf")]
    InvalidLogits,
    #[error("action dimension mismatch: expected {expected}, got {got}")]
    ActionDimMismatch { expected: usize, got: usize },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("max_steps must be at least 1")]
    ZeroSteps,
    #[error("policy produced a non-finite action {action:?} at step {t}")]
    NonFiniteAction { t: usize, action: Vec<f64> },
}

/// An environment with deterministic dynamics and a seeded start state.
pub trait Environment {
    type State: Clone;
    type Action: Clone;

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;

    /// Next state and environment reward.
    fn step(&self, state: &Self::State, action: &Self::Action) -> (Self::State, f64);

    /// Rejects actions the dynamics cannot consume. `Err` carries the
    /// offending action as reals for diagnostics.
    fn validate_action(&self, _action: &Self::Action) -> Result<(), Vec<f64>> {
        Ok(())
    }
}

impl Environment for TabularMdp {
    type State = usize;
    type Action = usize;

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(self.initial_dist(), rng)
    }

    fn step(&self, state: &usize, action: &usize) -> (usize, f64) {
        (self.next_state(*state, *action), self.reward(*state, *action))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step<S, A> {
    pub t: usize,
    pub state: S,
    pub action: A,
    pub next_state: S,
    pub reward: f64,
}

/// Contiguous sequence of steps starting at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S, A> {
    pub steps: Vec<Step<S, A>>,
}

impl<S: PartialEq, A> Trajectory<S, A> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks contiguity of timesteps and state chaining.
    pub fn is_consistent(&self) -> bool {
        self.steps.iter().enumerate().all(|(i, st)| st.t == i)
            && self
                .steps
                .windows(2)
                .all(|w| w[0].next_state == w[1].state)
    }

    /// `Σ_t γ^t r_t`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut g = 1.0;
        let mut total = 0.0;
        for st in &self.steps {
            total += g * st.reward;
            g *= gamma;
        }
        total
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Rolls `policy` out for exactly `max_steps` steps.
pub fn sample_trajectory<E, P>(
    env: &E,
    policy: &P,
    max_steps: usize,
    seed: u64,
) -> Result<Trajectory<E::State, E::Action>, MdpError>
where
    E: Environment,
    P: Policy<E::State, E::Action>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout(env, policy, max_steps, &mut rng)
}

/// Same as [`sample_trajectory`] with a caller-owned generator.
pub fn rollout<E, P, R>(
    env: &E,
    policy: &P,
    max_steps: usize,
    rng: &mut R,
) -> Result<Trajectory<E::State, E::Action>, MdpError>
where
    E: Environment,
    P: Policy<E::State, E::Action>,
    R: Rng + ?Sized,
{
    if max_steps == 0 {
        return Err(MdpError::ZeroSteps);
    }
    let mut state = env.reset(rng);
    let mut steps = Vec::with_capacity(max_steps);
    for t in 0..max_steps {
        let action = policy.sample(&state, rng);
        env.validate_action(&action)
            .map_err(|action| MdpError::NonFiniteAction { t, action })?;
        let (next_state, reward) = env.step(&state, &action);
        steps.push(Step {
            t,
            state: state.clone(),
            action,
            next_state: next_state.clone(),
            reward,
        });
        state = next_state;
    }
    Ok(Trajectory { steps })
}

/// Exact state marginals `p_0 … p_{horizon-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSchedule {
    pub per_timestep: Vec<Vec<f64>>,
    pub horizon: usize,
}

impl MarginalSchedule {
    pub fn at(&self, t: usize) -> &[f64] {
        &self.per_timestep[t]
    }
}

/// One step of the forward recursion
/// `p_{t+1}(s') = Σ_{s,a} p_t(s) π(a|s) [P(s,a) = s']`.
pub fn propagate_marginal(mdp: &TabularMdp, policy: &SoftmaxPolicy, p: &[f64]) -> Vec<f64> {
    let mut next = vec![0.0; mdp.n_states()];
    for (s, &ps) in p.iter().enumerate() {
        if ps == 0.0 {
            continue;
        }
        for (a, pa) in policy.probs(s).into_iter().enumerate() {
            next[mdp.next_state(s, a)] += ps * pa;
        }
    }
    next
}

pub fn state_marginals(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    horizon: usize,
) -> Result<MarginalSchedule, MdpError> {
    if horizon == 0 {
        return Err(MdpError::ZeroHorizon);
    }
    check_policy_shape(mdp, policy)?;
    let mut per_timestep = Vec::with_capacity(horizon);
    per_timestep.push(mdp.initial_dist().to_vec());
    for t in 1..horizon {
        let next = propagate_marginal(mdp, policy, &per_timestep[t - 1]);
        per_timestep.push(next);
    }
    Ok(MarginalSchedule {
        per_timestep,
        horizon,
    })
}

pub(crate) fn check_policy_shape(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> Result<(), MdpError> {
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(MdpError::ShapeMismatch {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
        });
    }
    Ok(())
}

/// Joint law of `(s_t, s_{t+1})` given the marginal `p_t`, row-major
/// `n_states × n_states`.
pub fn consecutive_joint(mdp: &TabularMdp, policy: &SoftmaxPolicy, p_t: &[f64]) -> Vec<f64> {
    let n = mdp.n_states();
    let mut joint = vec![0.0; n * n];
    for (s, &ps) in p_t.iter().enumerate() {
        if ps == 0.0 {
            continue;
        }
        for (a, pa) in policy.probs(s).into_iter().enumerate() {
            joint[s * n + mdp.next_state(s, a)] += ps * pa;
        }
    }
    joint
}

/// Smallest `T` with `γ^T · bound < tol`; sums truncated at `T` drop a tail
/// below `tol / (1 - γ)`.
pub fn truncation_horizon(gamma: f64, bound: f64, tol: f64) -> usize {
    assert!(tol > 0.0, "tolerance must be positive");
    if bound <= 0.0 || bound < tol {
        return 1;
    }
    if gamma <= 0.0 {
        return 1;
    }
    let t = ((tol / bound).ln() / gamma.ln()).ceil().max(1.0) as usize;
    // Guard against rounding at the boundary.
    if gamma.powi(t as i32) * bound < tol {
        t
    } else {
        t + 1
    }
}
