use rand::Rng;
use rand_distr::StandardNormal;

use super::MdpError;
use crate::autodiff::logsumexp;
use crate::nn::Mlp;

/// Logit used for actions that a deterministic policy never takes. Its
/// exponential underflows to exactly zero.
pub const NEVER_LOGIT: f64 = -1.0e3;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// A stochastic policy over states `S` and actions `A`.
pub trait Policy<S, A> {
    fn sample<R: Rng + ?Sized>(&self, state: &S, rng: &mut R) -> A;
    fn log_prob(&self, state: &S, action: &A) -> f64;
}

/// `log π(a|s)` for any policy.
pub fn policy_log_prob<S, A, P: Policy<S, A>>(policy: &P, state: &S, action: &A) -> f64 {
    policy.log_prob(state, action)
}

/// Tabular softmax policy `π(a|s) ∝ exp(θ[s, a])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self, MdpError> {
        if logits.len() != n_states * n_actions {
            return Err(MdpError::ShapeMismatch {
                n_states,
                n_actions,
            });
        }
        if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(MdpError::InvalidLogits);
        }
        Ok(Self {
            n_states,
            n_actions,
            logits,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    /// Puts all mass on `actions[s]` in each state.
    pub fn deterministic(n_states: usize, n_actions: usize, actions: &[usize]) -> Self {
        assert_eq!(actions.len(), n_states);
        let mut logits = vec![NEVER_LOGIT; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            logits[s * n_actions + a] = 0.0;
        }
        Self {
            n_states,
            n_actions,
            logits,
        }
    }

    /// Builds logits `ln p`, with zero-probability actions at [`NEVER_LOGIT`].
    pub fn from_probs(n_states: usize, n_actions: usize, probs: &[f64]) -> Result<Self, MdpError> {
        if probs.len() != n_states * n_actions {
            return Err(MdpError::ShapeMismatch {
                n_states,
                n_actions,
            });
        }
        let logits = probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln().max(NEVER_LOGIT) } else { NEVER_LOGIT })
            .collect();
        Self::new(n_states, n_actions, logits)
    }

    /// `(1 - ε)` on the greedy action plus `ε` spread uniformly.
    pub fn epsilon_greedy(n_states: usize, n_actions: usize, greedy: &[usize], epsilon: f64) -> Self {
        let mut probs = vec![epsilon / n_actions as f64; n_states * n_actions];
        for (s, &a) in greedy.iter().enumerate() {
            probs[s * n_actions + a] += 1.0 - epsilon;
        }
        Self::from_probs(n_states, n_actions, &probs).expect("valid epsilon-greedy table")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn row(&self, s: usize) -> &[f64] {
        &self.logits[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn log_probs(&self, s: usize) -> Vec<f64> {
        let row = self.row(s);
        let lse = logsumexp(row);
        row.iter().map(|l| l - lse).collect()
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        self.log_probs(s).into_iter().map(f64::exp).collect()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.log_prob_at(s, a).exp()
    }

    pub fn log_prob_at(&self, s: usize, a: usize) -> f64 {
        self.row(s)[a] - logsumexp(self.row(s))
    }

    /// Full `n_states × n_actions` probability table, row-major.
    pub fn prob_table(&self) -> Vec<f64> {
        (0..self.n_states).flat_map(|s| self.probs(s)).collect()
    }

    /// Shannon entropy of `π(·|s)` with `0 ln 0 = 0`.
    pub fn entropy(&self, s: usize) -> f64 {
        self.log_probs(s)
            .iter()
            .map(|&lp| {
                let p = lp.exp();
                if p > 0.0 {
                    -p * lp
                } else {
                    0.0
                }
            })
            .sum()
    }

    pub fn greedy_action(&self, s: usize) -> usize {
        let row = self.row(s);
        (0..self.n_actions)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum: take the last
    // action with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl Policy<usize, usize> for SoftmaxPolicy {
    fn sample<R: Rng + ?Sized>(&self, state: &usize, rng: &mut R) -> usize {
        sample_categorical(&self.probs(*state), rng)
    }

    fn log_prob(&self, state: &usize, action: &usize) -> f64 {
        self.log_prob_at(*state, *action)
    }
}

/// State-conditioned diagonal Gaussian: mean from an MLP, state-independent
/// log standard deviation clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    mean_net: Mlp,
    log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(mean_net: Mlp, log_std: Vec<f64>) -> Result<Self, MdpError> {
        if mean_net.output_dim() != log_std.len() {
            return Err(MdpError::ActionDimMismatch {
                expected: mean_net.output_dim(),
                got: log_std.len(),
            });
        }
        let log_std = log_std
            .into_iter()
            .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(Self { mean_net, log_std })
    }

    pub fn state_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean_net(&self) -> &Mlp {
        &self.mean_net
    }

    pub fn mean_net_mut(&mut self) -> &mut Mlp {
        &mut self.mean_net
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn set_log_std(&mut self, log_std: &[f64]) {
        for (dst, &src) in self.log_std.iter_mut().zip(log_std) {
            *dst = src.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn mean(&self, state: &[f64]) -> Vec<f64> {
        self.mean_net.predict(state)
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }
}

/// Log-density of a diagonal Gaussian.
pub fn diag_gaussian_log_density(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

impl Policy<Vec<f64>, Vec<f64>> for GaussianPolicy {
    fn sample<R: Rng + ?Sized>(&self, state: &Vec<f64>, rng: &mut R) -> Vec<f64> {
        let mean = self.mean(state);
        mean.iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + ls.exp() * eps
            })
            .collect()
    }

    fn log_prob(&self, state: &Vec<f64>, action: &Vec<f64>) -> f64 {
        diag_gaussian_log_density(action, &self.mean(state), &self.log_std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp};

    #[test]
    fn uniform_two_action_log_prob() {
        let p = SoftmaxPolicy::uniform(3, 2);
        assert!((policy_log_prob(&p, &1, &0) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_action_log_prob_is_zero() {
        let p = SoftmaxPolicy::new(1, 1, vec![0.37]).unwrap();
        assert_eq!(policy_log_prob(&p, &0, &0), 0.0);
    }

    #[test]
    fn gaussian_log_prob_at_mean() {
        let net = Mlp::zeros(&[2, 1], Activation::Tanh, Activation::Identity);
        let pol = GaussianPolicy::new(net, vec![0.0]).unwrap();
        let lp = policy_log_prob(&pol, &vec![0.3, -0.2], &vec![0.0]);
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12, "{lp}");
    }

    #[test]
    fn log_std_is_clamped() {
        let net = Mlp::zeros(&[1, 2], Activation::Tanh, Activation::Identity);
        let pol = GaussianPolicy::new(net, vec![-9.0, 7.0]).unwrap();
        assert_eq!(pol.log_std(), &[LOG_STD_MIN, LOG_STD_MAX]);
    }

    #[test]
    fn rows_sum_to_one() {
        let p = SoftmaxPolicy::new(2, 3, vec![0.1, -2.0, 3.0, 40.0, 0.0, -40.0]).unwrap();
        for s in 0..2 {
            let total: f64 = p.probs(s).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(p.probs(s).iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn deterministic_policy_has_zero_entropy() {
        let p = SoftmaxPolicy::deterministic(2, 3, &[2, 0]);
        assert_eq!(p.entropy(0), 0.0);
        assert_eq!(p.prob(1, 0), 1.0);
        assert_eq!(p.prob(1, 2), 0.0);
    }
}
