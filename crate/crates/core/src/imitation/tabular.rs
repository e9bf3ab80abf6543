//! Exact tabular learner: rollouts feed the timestep buffer, the critic
//! reward is tabulated from bucket histograms, and soft policy iteration
//! solves the augmented problem in closed form each iteration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::critic::{sq_dist, StateCritic};
use super::eval::{evaluate_policy_kl_tabular, KlMode};
use super::{
    reward_pi_from_log_prob, soft_policy_iteration, AugmentedRewardConfig, ImitationError, RbfCritic,
    TimestepReplayBuffer, OCC_TOL,
};
use crate::mdp::{Environment, Policy, SoftmaxPolicy, TabularMdp};
use crate::occupancy::{occupancy_measure, reverse_kl_occupancy};

const INV_E: f64 = 0.367_879_441_171_442_33;

/// RBF critic evaluated on fixed per-state feature vectors.
#[derive(Debug, Clone, Copy)]
pub struct FeatureCritic<'a> {
    pub rbf: &'a RbfCritic,
    pub features: &'a [Vec<f64>],
}

impl StateCritic<usize> for FeatureCritic<'_> {
    fn value(&self, x: &usize, y: &usize) -> f64 {
        -sq_dist(&self.features[*x], &self.features[*y]) / self.rbf.bandwidth - self.rbf.normalizer().ln() + 1.0
    }
}

fn histogram(buffer: &TimestepReplayBuffer<usize>, t: usize, n: usize) -> Option<Vec<f64>> {
    let len = buffer.bucket_len(t);
    if len == 0 {
        return None;
    }
    let mut h = vec![0.0; n];
    for x in buffer.bucket(t) {
        h[x.state] += 1.0;
    }
    h.iter_mut().for_each(|c| *c /= len as f64);
    Some(h)
}

/// Critic reward at timestep `t` for every `(s, a)`, with the marginal
/// expectations taken exhaustively over buckets `t` and `t+1`. `None` when
/// either bucket is empty.
pub fn mi_reward_at<C: StateCritic<usize>>(
    critic: &C,
    mdp: &TabularMdp,
    buffer: &TimestepReplayBuffer<usize>,
    t: usize,
    config: &AugmentedRewardConfig,
) -> Option<Vec<f64>> {
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let h_now = histogram(buffer, t, n)?;
    let h_next = histogram(buffer, t + 1, n)?;
    let mut ef = vec![0.0; n * n];
    for x in 0..n {
        for y in 0..n {
            ef[x * n + y] = critic.value(&x, &y).exp();
        }
    }
    let gamma = config.gamma;
    // a(u) = E_{x̃~B_t} e^{f(u, x̃)} or e^{f(x̃, u)}; b(s) likewise over B_{t+1}.
    let mut a_term = vec![0.0; n];
    let mut b_term = vec![0.0; n];
    for u in 0..n {
        for v in 0..n {
            if config.use_alg1_form {
                a_term[u] += h_now[v] * ef[u * n + v];
                b_term[u] += h_next[v] * ef[v * n + u];
            } else {
                a_term[u] += h_now[v] * ef[v * n + u];
                b_term[u] += h_next[v] * ef[u * n + v];
            }
        }
    }
    let mut out = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            let sn = mdp.next_state(s, a);
            let f = critic.value(&s, &sn);
            let lead = if config.use_alg1_form { f } else { gamma * f };
            out[s * na + a] = lead - gamma * INV_E * (a_term[sn] + b_term[s]);
        }
    }
    Some(out)
}

/// Stationary critic-reward table: per-timestep rewards averaged with
/// weights `γ^t p̂_t(s)` from the bucket histograms. States never visited
/// get the unweighted mean over timesteps.
pub fn mi_reward_table<C: StateCritic<usize>>(
    critic: &C,
    mdp: &TabularMdp,
    buffer: &TimestepReplayBuffer<usize>,
    config: &AugmentedRewardConfig,
) -> Result<Vec<f64>, ImitationError> {
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let mut weighted = vec![0.0; n * na];
    let mut weight = vec![0.0; n];
    let mut plain = vec![0.0; n * na];
    let mut n_t = 0usize;
    let mut g = 1.0;
    for t in 0..buffer.n_buckets().saturating_sub(1) {
        if let Some(r) = mi_reward_at(critic, mdp, buffer, t, config) {
            let h = histogram(buffer, t, n).expect("bucket checked above");
            for s in 0..n {
                let w = g * h[s];
                weight[s] += w;
                for a in 0..na {
                    weighted[s * na + a] += w * r[s * na + a];
                    plain[s * na + a] += r[s * na + a];
                }
            }
            n_t += 1;
        }
        g *= config.gamma;
    }
    if n_t == 0 {
        return Err(ImitationError::EmptyBuffer);
    }
    let mut out = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            let i = s * na + a;
            out[i] = if weight[s] > 0.0 {
                weighted[i] / weight[s]
            } else {
                plain[i] / n_t as f64
            };
        }
    }
    if out.iter().any(|r| !r.is_finite()) {
        return Err(ImitationError::NonFinite("critic reward table"));
    }
    Ok(out)
}

/// Policy-entropy weight schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPi {
    Fixed(f64),
    /// `ln λ += lr (target − H̄)` after every iteration, with `H̄` the
    /// occupancy-weighted action entropy of the new policy.
    Auto { initial: f64, lr: f64, target_entropy: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularNdiConfig {
    pub lambda_pi: LambdaPi,
    pub lambda_f: f64,
    pub use_alg1_form: bool,
    pub iterations: usize,
    pub rollouts_per_iteration: usize,
    pub episode_length: usize,
    pub bucket_capacity: usize,
    pub critic_bandwidth: f64,
    /// Marginal pairs per timestep folded into the critic normalizer each
    /// iteration.
    pub normalizer_pairs: usize,
    /// Lower bound on the soft-policy-iteration temperature.
    pub temperature_floor: f64,
    pub spi_tol: f64,
}

impl Default for TabularNdiConfig {
    fn default() -> Self {
        Self {
            lambda_pi: LambdaPi::Fixed(0.01),
            lambda_f: 0.005,
            use_alg1_form: true,
            iterations: 20,
            rollouts_per_iteration: 16,
            episode_length: 30,
            bucket_capacity: super::DEFAULT_BUCKET_CAPACITY,
            critic_bandwidth: 1.0,
            normalizer_pairs: 32,
            temperature_floor: 1e-3,
            spi_tol: 1e-10,
        }
    }
}

impl TabularNdiConfig {
    fn validate(&self) -> Result<(), ImitationError> {
        let bad = |m: &str| Err(ImitationError::InvalidConfig(m.to_string()));
        if self.iterations == 0 || self.rollouts_per_iteration == 0 || self.episode_length == 0 {
            return bad("iterations, rollouts and episode length must be positive");
        }
        if !(self.lambda_f >= 0.0) || !(self.critic_bandwidth > 0.0) || !(self.temperature_floor > 0.0) {
            return bad("lambda_f must be nonnegative, bandwidth and temperature floor positive");
        }
        match self.lambda_pi {
            LambdaPi::Fixed(l) if !(l >= 0.0) => bad("lambda_pi must be nonnegative"),
            LambdaPi::Auto { initial, .. } if !(initial > 0.0) => bad("initial lambda_pi must be positive"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps: usize,
    pub augmented_return: f64,
    pub env_return: f64,
    pub normalized_kl: Option<f64>,
    pub reverse_kl: Option<f64>,
    pub lambda_pi: f64,
}

#[derive(Debug, Clone)]
pub struct TabularNdiRun {
    /// Iterate with the highest augmented return.
    pub policy: SoftmaxPolicy,
    pub best_iteration: usize,
    pub metrics: Vec<IterationMetrics>,
    /// One line per iteration recording the selection decision.
    pub audit: Vec<String>,
    pub critic: RbfCritic,
    /// Set when a non-finite quantity stopped training early; `policy` is
    /// then the best iterate before the failure.
    pub diverged: Option<&'static str>,
}

fn mean_action_entropy(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> Result<f64, ImitationError> {
    let occ = occupancy_measure(mdp, policy, OCC_TOL)?;
    let d = occ.state_occupancy();
    let z: f64 = d.iter().sum();
    Ok(d.iter().enumerate().map(|(s, w)| w / z * policy.entropy(s)).sum())
}

/// Runs the augmented-reward learner on `mdp`.
///
/// `log_q` is the density model's log-density on every `(s, a)` (row-major),
/// `features` the per-state vectors seen by the RBF critic. The MDP's own
/// reward is read only for the reported `env_return`, never for selection.
pub fn run_tabular_ndi(
    mdp: &TabularMdp,
    log_q: &[f64],
    features: &[Vec<f64>],
    expert: Option<&SoftmaxPolicy>,
    config: &TabularNdiConfig,
    seed: u64,
) -> Result<TabularNdiRun, ImitationError> {
    config.validate()?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if log_q.len() != ns * na || features.len() != ns {
        return Err(ImitationError::InvalidConfig(format!(
            "log_q needs {} entries and features {} rows",
            ns * na,
            ns
        )));
    }
    if log_q.iter().any(|v| !v.is_finite()) {
        return Err(ImitationError::NonFinite("density log q"));
    }
    let gamma = mdp.discount();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffer = TimestepReplayBuffer::new(config.bucket_capacity);
    let mut critic = RbfCritic::new(config.critic_bandwidth);
    let mut policy = SoftmaxPolicy::uniform(ns, na);
    let mut lambda = match config.lambda_pi {
        LambdaPi::Fixed(l) => l,
        LambdaPi::Auto { initial, .. } => initial,
    };
    let mut env_steps = 0usize;
    let mut metrics = Vec::with_capacity(config.iterations);
    let mut audit = Vec::with_capacity(config.iterations);
    let mut best: Option<(usize, f64, SoftmaxPolicy)> = None;
    let mut diverged = None;

    for k in 0..config.iterations {
        for _ in 0..config.rollouts_per_iteration {
            let mut s = mdp.reset(&mut rng);
            for t in 0..config.episode_length {
                buffer.push(t, s);
                let a = policy.sample(&s, &mut rng);
                s = mdp.next_state(s, a);
            }
            buffer.push(config.episode_length, s);
            env_steps += config.episode_length;
        }

        let mut pairs = Vec::with_capacity(config.normalizer_pairs * config.episode_length);
        for t in 0..config.episode_length {
            for _ in 0..config.normalizer_pairs {
                let x = buffer.sample(t, &mut rng).expect("bucket filled by rollouts").state;
                let y = buffer.sample(t + 1, &mut rng).expect("bucket filled by rollouts").state;
                pairs.push((features[x].clone(), features[y].clone()));
            }
        }
        critic.update_normalizer(&pairs);

        let reward_cfg = AugmentedRewardConfig {
            lambda_pi: lambda,
            lambda_f: config.lambda_f,
            gamma,
            use_alg1_form: config.use_alg1_form,
        };
        let base: Vec<f64> = if config.lambda_f > 0.0 {
            let fc = FeatureCritic {
                rbf: &critic,
                features,
            };
            let rf = mi_reward_table(&fc, mdp, &buffer, &reward_cfg)?;
            log_q.iter().zip(&rf).map(|(q, r)| q + config.lambda_f * r).collect()
        } else {
            log_q.to_vec()
        };
        // Soft optimality at temperature τ maximizes E[Σ γ^t (r − τ log π)],
        // which is the augmented objective with τ = λ_π (times 1+γ in the
        // theorem-style shape).
        let scale = if config.use_alg1_form { 1.0 } else { 1.0 + gamma };
        let temperature = (lambda * scale).max(config.temperature_floor);
        let new_policy = soft_policy_iteration(&mdp.with_reward(base.clone())?, temperature, config.spi_tol)?;

        let occ = occupancy_measure(mdp, &new_policy, OCC_TOL)?;
        let mut aug_table = base;
        for s in 0..ns {
            for a in 0..na {
                aug_table[s * na + a] += lambda * reward_pi_from_log_prob(new_policy.log_prob_at(s, a), &reward_cfg);
            }
        }
        let augmented_return = occ.expectation(&aug_table);
        if !augmented_return.is_finite() {
            if best.is_some() {
                diverged = Some("augmented return");
                audit.push(format!("iteration {k}: non-finite augmented return, stopping"));
                break;
            }
            return Err(ImitationError::NonFinite("augmented return"));
        }
        let env_return = occ.expectation(mdp.reward_table());
        let (normalized_kl, reverse_kl) = match expert {
            Some(e) => {
                let nk = evaluate_policy_kl_tabular(&new_policy, e, mdp, KlMode::Exact)?;
                let rk = reverse_kl_occupancy(&occ, &occupancy_measure(mdp, e, OCC_TOL)?)?;
                (Some(nk), Some(rk))
            }
            None => (None, None),
        };
        metrics.push(IterationMetrics {
            iteration: k,
            env_steps,
            augmented_return,
            env_return,
            normalized_kl,
            reverse_kl,
            lambda_pi: lambda,
        });

        let improved = best.as_ref().is_none_or(|(_, b, _)| augmented_return > *b);
        audit.push(format!(
            "iteration {k}: augmented_return={augmented_return:.12e} {}",
            if improved { "selected" } else { "kept previous" }
        ));
        if improved {
            best = Some((k, augmented_return, new_policy.clone()));
        }

        if let LambdaPi::Auto { lr, target_entropy, .. } = config.lambda_pi {
            let h = mean_action_entropy(mdp, &new_policy)?;
            lambda = (lambda.ln() + lr * (target_entropy - h)).exp();
            if !lambda.is_finite() || lambda <= 0.0 {
                diverged = Some("lambda_pi");
                audit.push(format!("iteration {k}: non-finite lambda_pi, stopping"));
                break;
            }
        }
        policy = new_policy;
    }

    let (best_iteration, _, policy) = best.expect("at least one iteration");
    Ok(TabularNdiRun {
        policy,
        best_iteration,
        metrics,
        audit,
        critic,
        diverged,
    })
}
