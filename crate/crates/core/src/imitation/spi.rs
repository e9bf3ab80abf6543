use super::ImitationError;
use crate::autodiff::logsumexp;
use crate::mdp::{SoftmaxPolicy, TabularMdp};

const MAX_SWEEPS: usize = 1_000_000;

/// Fixed point of the soft Bellman backup.
#[derive(Debug, Clone)]
pub struct SoftQ {
    /// Row-major `n_states × n_actions`.
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub sweeps: usize,
    pub residual: f64,
}

/// Iterates `Q ← r + γ V(P(s,a))`, `V(s) = τ logsumexp(Q(s,·)/τ)` until the
/// sup-norm change drops below `tol`.
pub fn soft_q_iteration(mdp: &TabularMdp, temperature: f64, tol: f64) -> Result<SoftQ, ImitationError> {
    if !(temperature > 0.0) {
        return Err(ImitationError::InvalidTemperature(temperature));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.discount();
    let mut q = mdp.reward_table().to_vec();
    let mut v = vec![0.0; ns];
    let mut scaled = vec![0.0; na];
    let mut residual = f64::INFINITY;
    for sweep in 1..=MAX_SWEEPS {
        for s in 0..ns {
            for a in 0..na {
                scaled[a] = q[s * na + a] / temperature;
            }
            v[s] = temperature * logsumexp(&scaled);
        }
        residual = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let i = s * na + a;
                let next = mdp.reward(s, a) + gamma * v[mdp.next_state(s, a)];
                residual = f64::max(residual, (next - q[i]).abs());
                q[i] = next;
            }
        }
        if !residual.is_finite() {
            return Err(ImitationError::NonFinite("soft Q backup"));
        }
        if residual < tol {
            for s in 0..ns {
                for a in 0..na {
                    scaled[a] = q[s * na + a] / temperature;
                }
                v[s] = temperature * logsumexp(&scaled);
            }
            return Ok(SoftQ {
                q,
                v,
                sweeps: sweep,
                residual,
            });
        }
    }
    Err(ImitationError::NotConverged { residual })
}

/// Softmax policy `π ∝ exp(Q_soft/τ)` at the soft Bellman fixed point of the
/// MDP's own reward table.
pub fn soft_policy_iteration(mdp: &TabularMdp, temperature: f64, tol: f64) -> Result<SoftmaxPolicy, ImitationError> {
    let soft = soft_q_iteration(mdp, temperature, tol)?;
    let logits = soft.q.iter().map(|q| q / temperature).collect();
    Ok(SoftmaxPolicy::new(mdp.n_states(), mdp.n_actions(), logits)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bandit(gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 2, vec![0, 0], vec![1.0], vec![1.0, 0.0], gamma).unwrap()
    }

    #[test]
    fn one_step_softmax() {
        let p = soft_policy_iteration(&bandit(0.0), 1.0, 1e-12).unwrap();
        assert!((p.prob(0, 0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p.prob(0, 1) - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn small_temperature_is_greedy() {
        let p = soft_policy_iteration(&bandit(0.5), 0.01, 1e-12).unwrap();
        assert!(p.prob(0, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn chain_matches_value_iteration() {
        // Four states, goal at the right end, left/right with wall stay.
        let transition = vec![0, 1, 0, 2, 1, 3, 2, 3];
        let reward = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        let mdp = TabularMdp::new(4, 2, transition, vec![1.0, 0.0, 0.0, 0.0], reward, 0.9).unwrap();
        let mut v = [0.0f64; 4];
        for _ in 0..2000 {
            let mut nv = [0.0; 4];
            for s in 0..4 {
                nv[s] = (0..2)
                    .map(|a| mdp.reward(s, a) + 0.9 * v[mdp.next_state(s, a)])
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            v = nv;
        }
        let p = soft_policy_iteration(&mdp, 0.01, 1e-10).unwrap();
        for s in 0..3 {
            let best = (0..2)
                .max_by(|&a, &b| {
                    let qa = mdp.reward(s, a) + 0.9 * v[mdp.next_state(s, a)];
                    let qb = mdp.reward(s, b) + 0.9 * v[mdp.next_state(s, b)];
                    qa.total_cmp(&qb)
                })
                .unwrap();
            assert_eq!(p.greedy_action(s), best);
            assert!(p.prob(s, best) > 0.99);
        }
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        assert!(matches!(
            soft_policy_iteration(&bandit(0.5), 0.0, 1e-8),
            Err(ImitationError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn reward_shift_leaves_policy_unchanged() {
        let base = TabularMdp::new(2, 2, vec![0, 1, 1, 0], vec![0.5, 0.5], vec![0.3, -0.2, 1.0, 0.4], 0.8).unwrap();
        let shifted = base
            .with_reward(base.reward_table().iter().map(|r| r + 7.5).collect())
            .unwrap();
        let a = soft_policy_iteration(&base, 0.5, 1e-12).unwrap();
        let b = soft_policy_iteration(&shifted, 0.5, 1e-12).unwrap();
        for (x, y) in a.prob_table().iter().zip(b.prob_table()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
