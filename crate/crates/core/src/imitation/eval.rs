use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ImitationError, OCC_TOL};
use crate::mdp::{sample_categorical, truncation_horizon, Environment, GaussianPolicy, Policy, SoftmaxPolicy, TabularMdp};
use crate::occupancy::occupancy_measure;

/// How states are drawn for the tabular KL average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlMode {
    /// Weight every state by its normalized discounted occupancy.
    Exact,
    /// Monte-Carlo draws from the normalized discounted occupancy.
    Sampled { n_states: usize, seed: u64 },
}

fn discrete_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

fn normalized_state_occupancy(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> Result<Vec<f64>, ImitationError> {
    let occ = occupancy_measure(mdp, policy, OCC_TOL)?;
    let d = occ.state_occupancy();
    let z: f64 = d.iter().sum();
    Ok(d.into_iter().map(|x| x / z).collect())
}

/// Draw from the normalized discounted occupancy: run the chain and stop at
/// each step with probability `1 - γ`.
fn sample_occupancy_state<R: Rng + ?Sized>(mdp: &TabularMdp, policy: &SoftmaxPolicy, rng: &mut R) -> usize {
    let mut s = sample_categorical(mdp.initial_dist(), rng);
    loop {
        if rng.random::<f64>() >= mdp.discount() {
            return s;
        }
        let a = sample_categorical(&policy.probs(s), rng);
        s = mdp.next_state(s, a);
    }
}

fn mean_state_kl(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    expert: &SoftmaxPolicy,
    mode: KlMode,
    seed_offset: u64,
) -> Result<f64, ImitationError> {
    let kl_at = |s: usize| discrete_kl(&policy.probs(s), &expert.probs(s));
    match mode {
        KlMode::Exact => {
            let w = normalized_state_occupancy(mdp, policy)?;
            Ok(w.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(s, w)| w * kl_at(s)).sum())
        }
        KlMode::Sampled { n_states, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(seed_offset));
            let n = n_states.max(1);
            Ok((0..n).map(|_| kl_at(sample_occupancy_state(mdp, policy, &mut rng))).sum::<f64>() / n as f64)
        }
    }
}

/// `E_{s∼π}[KL(π‖π_E)] / E_{s∼uniform}[KL(uniform‖π_E)]`, with states drawn
/// from each policy's own normalized discounted occupancy.
pub fn evaluate_policy_kl_tabular(
    policy: &SoftmaxPolicy,
    expert: &SoftmaxPolicy,
    mdp: &TabularMdp,
    mode: KlMode,
) -> Result<f64, ImitationError> {
    let uniform = SoftmaxPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let num = mean_state_kl(mdp, policy, expert, mode, 0)?;
    let den = mean_state_kl(mdp, &uniform, expert, mode, 1)?;
    if den <= 0.0 {
        return Err(ImitationError::ZeroDenominator);
    }
    Ok(num / den)
}

/// A state-conditioned diagonal Gaussian over actions.
pub trait ConditionalGaussian {
    /// Mean and log standard deviation at `state`.
    fn mean_log_std(&self, state: &[f64]) -> (Vec<f64>, Vec<f64>);

    fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Vec<f64>
    where
        Self: Sized,
    {
        let (m, ls) = self.mean_log_std(state);
        m.iter()
            .zip(&ls)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

impl ConditionalGaussian for GaussianPolicy {
    fn mean_log_std(&self, state: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.mean(state), self.log_std().to_vec())
    }
}

/// State-independent Gaussian, used as the random baseline `N(0, σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl FixedGaussian {
    pub fn isotropic(dim: usize, std: f64) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![std.ln(); dim],
        }
    }
}

impl ConditionalGaussian for FixedGaussian {
    fn mean_log_std(&self, _state: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.mean.clone(), self.log_std.clone())
    }
}

impl Policy<Vec<f64>, Vec<f64>> for FixedGaussian {
    fn sample<R: Rng + ?Sized>(&self, state: &Vec<f64>, rng: &mut R) -> Vec<f64> {
        self.sample_action(state, rng)
    }

    fn log_prob(&self, _state: &Vec<f64>, action: &Vec<f64>) -> f64 {
        crate::mdp::diag_gaussian_log_density(action, &self.mean, &self.log_std)
    }
}

/// `KL(N(m1, e^{2 l1}) ‖ N(m2, e^{2 l2}))` for diagonal Gaussians.
pub fn gaussian_kl(m1: &[f64], l1: &[f64], m2: &[f64], l2: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..m1.len() {
        let v1 = (2.0 * l1[i]).exp();
        let v2 = (2.0 * l2[i]).exp();
        let d = m1[i] - m2[i];
        kl += l2[i] - l1[i] + (v1 + d * d) / (2.0 * v2) - 0.5;
    }
    kl
}

fn mean_gaussian_kl<P: ConditionalGaussian + ?Sized, Q: ConditionalGaussian + ?Sized>(
    p: &P,
    q: &Q,
    states: &[Vec<f64>],
) -> f64 {
    states
        .iter()
        .map(|s| {
            let (m1, l1) = p.mean_log_std(s);
            let (m2, l2) = q.mean_log_std(s);
            gaussian_kl(&m1, &l1, &m2, &l2)
        })
        .sum::<f64>()
        / states.len() as f64
}

/// Normalized KL from explicit state samples: `states_policy` are visited
/// by the policy, `states_baseline` by the random baseline.
pub fn normalized_kl_from_states<P, E, B>(
    policy: &P,
    expert: &E,
    baseline: &B,
    states_policy: &[Vec<f64>],
    states_baseline: &[Vec<f64>],
) -> Result<f64, ImitationError>
where
    P: ConditionalGaussian + ?Sized,
    E: ConditionalGaussian + ?Sized,
    B: ConditionalGaussian + ?Sized,
{
    if states_policy.is_empty() || states_baseline.is_empty() {
        return Err(ImitationError::InvalidConfig("no evaluation states".into()));
    }
    let den = mean_gaussian_kl(baseline, expert, states_baseline);
    if den <= 0.0 {
        return Err(ImitationError::ZeroDenominator);
    }
    Ok(mean_gaussian_kl(policy, expert, states_policy) / den)
}

fn visited_states<E, P>(env: &E, policy: &P, episode_length: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>>
where
    E: Environment<State = Vec<f64>, Action = Vec<f64>>,
    P: ConditionalGaussian,
{
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut s = env.reset(rng);
        for _ in 0..episode_length {
            if out.len() == n {
                break;
            }
            out.push(s.clone());
            let a = policy.sample_action(&s, rng);
            s = env.step(&s, &a).0;
        }
    }
    out
}

/// Continuous normalized KL with states gathered from `n_eval_states`
/// rollout steps of the policy and of the baseline.
pub fn evaluate_policy_kl_continuous<E, P, X, B>(
    env: &E,
    policy: &P,
    expert: &X,
    baseline: &B,
    episode_length: usize,
    n_eval_states: usize,
    seed: u64,
) -> Result<f64, ImitationError>
where
    E: Environment<State = Vec<f64>, Action = Vec<f64>>,
    P: ConditionalGaussian,
    X: ConditionalGaussian,
    B: ConditionalGaussian,
{
    if n_eval_states == 0 || episode_length == 0 {
        return Err(ImitationError::InvalidConfig("need at least one evaluation state".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = visited_states(env, policy, episode_length, n_eval_states, &mut rng);
    let sb = visited_states(env, baseline, episode_length, n_eval_states, &mut rng);
    normalized_kl_from_states(policy, expert, baseline, &sp, &sb)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_episodes: usize,
}

fn summarize(values: &[f64]) -> ReturnEstimate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    ReturnEstimate {
        mean,
        stderr,
        n_episodes: n,
    }
}

/// Discounted return of `policy` on `reward` (row-major `S×A`, the MDP's own
/// table when `None`). `n_episodes = None` gives the exact occupancy-weighted
/// value; otherwise episodes are truncated where `γ^T max|r|` drops below
/// `1e-10`.
pub fn evaluate_return_tabular(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    reward: Option<&[f64]>,
    n_episodes: Option<usize>,
    seed: u64,
) -> Result<ReturnEstimate, ImitationError> {
    let reward = reward.unwrap_or(mdp.reward_table());
    if reward.len() != mdp.n_states() * mdp.n_actions() {
        return Err(ImitationError::InvalidConfig("reward table shape".into()));
    }
    match n_episodes {
        None => {
            let occ = occupancy_measure(mdp, policy, OCC_TOL)?;
            Ok(ReturnEstimate {
                mean: occ.expectation(reward),
                stderr: 0.0,
                n_episodes: 0,
            })
        }
        Some(0) => Err(ImitationError::InvalidConfig("n_episodes must be at least 1".into())),
        Some(n) => {
            let bound = reward.iter().fold(0.0f64, |m, r| m.max(r.abs()));
            let horizon = truncation_horizon(mdp.discount(), bound, 1e-10);
            let na = mdp.n_actions();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let returns: Vec<f64> = (0..n)
                .map(|_| {
                    let mut s = mdp.reset(&mut rng);
                    let (mut g, mut total) = (1.0, 0.0);
                    for _ in 0..horizon {
                        let a = policy.sample(&s, &mut rng);
                        total += g * reward[s * na + a];
                        g *= mdp.discount();
                        s = mdp.next_state(s, a);
                    }
                    total
                })
                .collect();
            Ok(summarize(&returns))
        }
    }
}

/// Undiscounted episode return. `reward_fn` replaces the environment reward
/// (for augmented-reward evaluation) when given.
#[allow(clippy::type_complexity)]
pub fn evaluate_return_env<E, P>(
    env: &E,
    policy: &P,
    episode_length: usize,
    n_episodes: usize,
    seed: u64,
    reward_fn: Option<&dyn Fn(&E::State, &E::Action, &E::State) -> f64>,
) -> Result<ReturnEstimate, ImitationError>
where
    E: Environment,
    P: Policy<E::State, E::Action>,
{
    if n_episodes == 0 {
        return Err(ImitationError::InvalidConfig("n_episodes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut s = env.reset(&mut rng);
        let mut total = 0.0;
        for _ in 0..episode_length {
            let a = policy.sample(&s, &mut rng);
            let (next, r) = env.step(&s, &a);
            total += match reward_fn {
                Some(f) => f(&s, &a, &next),
                None => r,
            };
            s = next;
        }
        returns.push(total);
    }
    Ok(summarize(&returns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::single_state_mdp;

    fn chain() -> TabularMdp {
        // Three states, right moves forward, left moves back, walls reflect.
        TabularMdp::new(3, 2, vec![1, 0, 2, 0, 1, 2], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0], 0.9)
            .unwrap()
    }

    #[test]
    fn kl_self_and_baseline() {
        let mdp = chain();
        let expert = SoftmaxPolicy::new(3, 2, vec![2.0, -1.0, 0.5, 0.0, -0.3, 1.0]).unwrap();
        assert!(evaluate_policy_kl_tabular(&expert, &expert, &mdp, KlMode::Exact).unwrap().abs() < 1e-15);
        let u = SoftmaxPolicy::uniform(3, 2);
        assert!((evaluate_policy_kl_tabular(&u, &expert, &mdp, KlMode::Exact).unwrap() - 1.0).abs() < 1e-12);
        let sampled = KlMode::Sampled { n_states: 200, seed: 3 };
        let v = evaluate_policy_kl_tabular(&u, &expert, &mdp, sampled).unwrap();
        assert!((v - 1.0).abs() < 0.3);
        assert!(matches!(
            evaluate_policy_kl_tabular(&u, &u, &mdp, KlMode::Exact),
            Err(ImitationError::ZeroDenominator)
        ));
    }

    #[test]
    fn gaussian_kl_fixture() {
        assert!((gaussian_kl(&[0.0], &[0.0], &[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        // Policy mean 0 vs expert mean 1 everywhere; baseline N(0, 2²):
        // KL(N(0,4)‖N(1,1)) = -ln 2 + (4 + 1)/2 - 1/2 = 2 - ln 2.
        let policy = FixedGaussian::isotropic(1, 1.0);
        let expert = FixedGaussian {
            mean: vec![1.0],
            log_std: vec![0.0],
        };
        let baseline = FixedGaussian::isotropic(1, 2.0);
        let states = vec![vec![0.0]; 4];
        let v = normalized_kl_from_states(&policy, &expert, &baseline, &states, &states).unwrap();
        assert!((v - 0.5 / (2.0 - 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn return_examples() {
        let one = single_state_mdp(0.9, 1.0);
        let p = SoftmaxPolicy::uniform(1, 1);
        let r = evaluate_return_tabular(&one, &p, None, None, 0).unwrap();
        assert!((r.mean - 10.0).abs() < 1e-10);
        let det = SoftmaxPolicy::deterministic(3, 2, &[0, 0, 0]);
        let r = evaluate_return_tabular(&chain(), &det, None, Some(7), 1).unwrap();
        assert_eq!(r.stderr, 0.0);
    }

    #[test]
    fn sampled_return_matches_exact() {
        let mdp = chain();
        let p = SoftmaxPolicy::epsilon_greedy(3, 2, &[0, 0, 0], 0.3);
        let exact = evaluate_return_tabular(&mdp, &p, None, None, 0).unwrap().mean;
        let mc = evaluate_return_tabular(&mdp, &p, None, Some(4000), 9).unwrap();
        assert!((mc.mean - exact).abs() < 3.0 * mc.stderr, "{} vs {exact} ± {}", mc.mean, mc.stderr);
    }
}
