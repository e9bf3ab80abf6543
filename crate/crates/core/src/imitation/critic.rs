use rand::Rng;

use super::{AugmentedRewardConfig, ImitationError, TimestepReplayBuffer};
use crate::occupancy::CriticTable;

const INV_E: f64 = 0.367_879_441_171_442_33;

/// Critic `f(x, y)` on consecutive states.
pub trait StateCritic<S> {
    fn value(&self, x: &S, y: &S) -> f64;
}

impl StateCritic<usize> for CriticTable {
    fn value(&self, x: &usize, y: &usize) -> f64 {
        self.get(*x, *y)
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Normalized RBF critic
/// `f(s, s') = -‖s - s'‖²/h - ln(mean kernel over marginal pairs) + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfCritic {
    pub bandwidth: f64,
    normalizer: f64,
    n_seen: u64,
}

impl Default for RbfCritic {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl RbfCritic {
    pub fn new(bandwidth: f64) -> Self {
        assert!(bandwidth > 0.0, "bandwidth must be positive");
        Self {
            bandwidth,
            normalizer: 1.0,
            n_seen: 0,
        }
    }

    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        (-sq_dist(x, y) / self.bandwidth).exp()
    }

    /// Current running-mean estimate of `E_{p(x)p(y)}[kernel]`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// Folds kernel values of freshly sampled marginal pairs into the running
    /// mean.
    pub fn update_normalizer(&mut self, pairs: &[(Vec<f64>, Vec<f64>)]) {
        for (x, y) in pairs {
            let k = self.kernel(x, y);
            self.n_seen += 1;
            if self.n_seen == 1 {
                self.normalizer = k;
            } else {
                self.normalizer += (k - self.normalizer) / self.n_seen as f64;
            }
        }
    }

    pub fn set_normalizer(&mut self, normalizer: f64) {
        assert!(normalizer > 0.0);
        self.normalizer = normalizer;
        self.n_seen = 1;
    }
}

impl StateCritic<Vec<f64>> for RbfCritic {
    fn value(&self, x: &Vec<f64>, y: &Vec<f64>) -> f64 {
        -sq_dist(x, y) / self.bandwidth - self.normalizer.ln() + 1.0
    }
}

/// RBF critic value with the normalizer computed from `marginal_pairs`.
pub fn rbf_critic_value(
    critic: &RbfCritic,
    s: &[f64],
    s_next: &[f64],
    marginal_pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<f64, ImitationError> {
    if marginal_pairs.is_empty() {
        return Err(ImitationError::EmptyPairs);
    }
    let mean = marginal_pairs.iter().map(|(x, y)| critic.kernel(x, y)).sum::<f64>() / marginal_pairs.len() as f64;
    Ok((critic.kernel(s, s_next) / mean).ln() + 1.0)
}

/// How the marginal expectations in the critic reward are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalSampling {
    /// Average over every state in the bucket.
    Exhaustive,
    /// Average over this many uniform draws (pairs) from the buckets.
    Sampled(usize),
}

/// Mutual-information reward `r_f` for the transition `s_t → s_next`.
///
/// Alg-1 form: `f(s_t, s') - (γ/e) E[e^{f(s', s̃_t)} + e^{f(s̃_{t+1}, s_t)}]`.
/// Theorem form: `γ f(s_t, s') - (γ/e) E[e^{f(s̃_t, s')} + e^{f(s_t, s̃_{t+1})}]`.
/// `s̃_t` and `s̃_{t+1}` come from buckets `t` and `t+1`; an empty bucket
/// falls back to the pooled buffer with a warning.
#[allow(clippy::too_many_arguments)]
pub fn reward_f<S: Clone, C: StateCritic<S>, R: Rng + ?Sized>(
    critic: &C,
    s_t: &S,
    s_next: &S,
    buffer: &TimestepReplayBuffer<S>,
    t: usize,
    config: &AugmentedRewardConfig,
    sampling: MarginalSampling,
    rng: &mut R,
) -> Result<f64, ImitationError> {
    let (now, pooled_now) = buffer.bucket_or_pooled(t);
    let (next, pooled_next) = buffer.bucket_or_pooled(t + 1);
    if now.is_empty() || next.is_empty() {
        return Err(ImitationError::EmptyBuffer);
    }
    if pooled_now || pooled_next {
        log::warn!("replay bucket {} empty, sampling from pooled buffer", if pooled_now { t } else { t + 1 });
    }
    let (term_now, term_next): (Box<dyn Fn(&S) -> f64 + '_>, Box<dyn Fn(&S) -> f64 + '_>) = if config.use_alg1_form {
        (
            Box::new(|x: &S| critic.value(s_next, x).exp()),
            Box::new(|y: &S| critic.value(y, s_t).exp()),
        )
    } else {
        (
            Box::new(|x: &S| critic.value(x, s_next).exp()),
            Box::new(|y: &S| critic.value(s_t, y).exp()),
        )
    };
    let expectation = match sampling {
        MarginalSampling::Exhaustive => {
            now.iter().map(|x| term_now(x)).sum::<f64>() / now.len() as f64
                + next.iter().map(|y| term_next(y)).sum::<f64>() / next.len() as f64
        }
        MarginalSampling::Sampled(n) => {
            let n = n.max(1);
            let mut acc = 0.0;
            for _ in 0..n {
                let x = now[rng.random_range(0..now.len())];
                let y = next[rng.random_range(0..next.len())];
                acc += term_now(x) + term_next(y);
            }
            acc / n as f64
        }
    };
    let gamma = config.gamma;
    let f = critic.value(s_t, s_next);
    let lead = if config.use_alg1_form { f } else { gamma * f };
    let r = lead - gamma * INV_E * expectation;
    if !r.is_finite() {
        return Err(ImitationError::NonFinite("critic reward"));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(gamma: f64, alg1: bool) -> AugmentedRewardConfig {
        AugmentedRewardConfig {
            lambda_pi: 0.0,
            lambda_f: 0.005,
            gamma,
            use_alg1_form: alg1,
        }
    }

    #[test]
    fn rbf_examples() {
        let c = RbfCritic::default();
        let s = vec![0.3, 0.1];
        let same = vec![(s.clone(), s.clone()); 3];
        assert!((rbf_critic_value(&c, &s, &s, &same).unwrap() - 1.0).abs() < 1e-15);
        let unit = vec![(vec![0.0], vec![1.0]), (vec![2.0], vec![3.0])];
        assert!((rbf_critic_value(&c, &[5.0], &[4.0], &unit).unwrap() - 1.0).abs() < 1e-15);
        let pairs = vec![
            (vec![0.0, 0.0], vec![1.0, 0.0]),
            (vec![0.0, 0.0], vec![0.0, 0.0]),
            (vec![1.0, 1.0], vec![0.0, 2.0]),
            (vec![0.5, 0.0], vec![0.0, 0.0]),
        ];
        // Kernels e^{-1}, 1, e^{-2}, e^{-0.25}; pair value at distance² 0.5.
        let mean = ((-1.0f64).exp() + 1.0 + (-2.0f64).exp() + (-0.25f64).exp()) / 4.0;
        let hand = -0.5 - mean.ln() + 1.0;
        let v = rbf_critic_value(&c, &[0.0, 0.0], &[0.5, 0.5], &pairs).unwrap();
        assert!((v - hand).abs() < 1e-12);
        assert!(rbf_critic_value(&c, &[0.0], &[0.0], &[]).is_err());
    }

    #[test]
    fn running_normalizer_matches_batch_mean() {
        let mut c = RbfCritic::default();
        let pairs = vec![(vec![0.0], vec![1.0]), (vec![0.0], vec![0.0]), (vec![0.0], vec![2.0])];
        c.update_normalizer(&pairs[..1]);
        c.update_normalizer(&pairs[1..]);
        let mean = ((-1.0f64).exp() + 1.0 + (-4.0f64).exp()) / 3.0;
        assert!((c.normalizer() - mean).abs() < 1e-15);
        let v = c.value(&vec![0.0], &vec![0.0]);
        assert!((v - rbf_critic_value(&c, &[0.0], &[0.0], &pairs).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn constant_states_give_one_minus_two_gamma() {
        let mut buf = TimestepReplayBuffer::new(8);
        for t in 0..3 {
            buf.push(t, vec![1.0, 1.0]);
        }
        let c = RbfCritic::default();
        let s = vec![1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = reward_f(&c, &s, &s, &buf, 0, &cfg(0.9, true), MarginalSampling::Sampled(16), &mut rng).unwrap();
        assert!((r - (1.0 - 1.8)).abs() < 1e-12);
        let r = reward_f(&c, &s, &s, &buf, 0, &cfg(0.0, true), MarginalSampling::Exhaustive, &mut rng).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn exhaustive_matches_enumeration_oracle() {
        let vals: Vec<f64> = vec![0.3, -1.0, 0.5, 1.2, 0.0, -0.4, 0.9, 0.1, -2.0];
        let f = CriticTable::new(3, vals.clone()).unwrap();
        let mut buf = TimestepReplayBuffer::new(16);
        for s in [0usize, 2, 2, 1] {
            buf.push(1, s);
        }
        for s in [1usize, 1, 0] {
            buf.push(2, s);
        }
        let (st, sn, gamma) = (2usize, 0usize, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fv = |x: usize, y: usize| vals[x * 3 + y];
        let b1 = [0usize, 2, 2, 1];
        let b2 = [1usize, 1, 0];
        let mut pair_sum = 0.0;
        for &x in &b1 {
            for &y in &b2 {
                pair_sum += fv(sn, x).exp() + fv(y, st).exp();
            }
        }
        let oracle = fv(st, sn) - gamma / std::f64::consts::E * pair_sum / 12.0;
        let r = reward_f(&f, &st, &sn, &buf, 1, &cfg(gamma, true), MarginalSampling::Exhaustive, &mut rng).unwrap();
        assert!((r - oracle).abs() < 1e-12);

        let mut pair_sum = 0.0;
        for &x in &b1 {
            for &y in &b2 {
                pair_sum += fv(x, sn).exp() + fv(st, y).exp();
            }
        }
        let oracle = gamma * fv(st, sn) - gamma / std::f64::consts::E * pair_sum / 12.0;
        let r = reward_f(&f, &st, &sn, &buf, 1, &cfg(gamma, false), MarginalSampling::Exhaustive, &mut rng).unwrap();
        assert!((r - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_bucket_uses_pool() {
        let mut buf = TimestepReplayBuffer::new(4);
        buf.push(0, vec![0.0]);
        let c = RbfCritic::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = reward_f(&c, &vec![0.0], &vec![0.0], &buf, 5, &cfg(0.9, true), MarginalSampling::Exhaustive, &mut rng);
        assert!(r.is_ok());
        let empty: TimestepReplayBuffer<Vec<f64>> = TimestepReplayBuffer::new(4);
        assert!(matches!(
            reward_f(&c, &vec![0.0], &vec![0.0], &empty, 0, &cfg(0.9, true), MarginalSampling::Exhaustive, &mut rng),
            Err(ImitationError::EmptyBuffer)
        ));
    }
}
