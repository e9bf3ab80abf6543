//! Twin-Q soft actor-critic with a state-independent Gaussian scale and
//! optional automatic temperature.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{ImitationError, TransitionBuffer};
use std::ops::{Add, Sub};

use crate::autodiff::{Tape, Tensor, Var};
use crate::mdp::GaussianPolicy;
use crate::nn::{Activation, AdamConfig, AdamState, Mlp};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq)]
pub struct SacConfig {
    pub gamma: f64,
    pub polyak: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub batch_size: usize,
    /// `Some(h)` tunes the temperature toward entropy `h`; `None` keeps it
    /// fixed at `initial_alpha`.
    pub target_entropy: Option<f64>,
    pub initial_alpha: f64,
    pub hidden: Vec<usize>,
    /// Squash the policy mean into `[-1, 1]` with a tanh output layer. Keeps
    /// the critic from being queried far outside clipped action ranges.
    pub bounded_mean: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            polyak: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            batch_size: 64,
            target_entropy: None,
            initial_alpha: 0.1,
            hidden: vec![64, 64],
            bounded_mean: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SacLearner {
    pub policy: GaussianPolicy,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    pub config: SacConfig,
    opt_policy: AdamState,
    opt_q1: AdamState,
    opt_q2: AdamState,
    opt_alpha: AdamState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SacStats {
    pub q_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
    /// Batch estimate of the policy entropy.
    pub entropy: f64,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl SacLearner {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: SacConfig,
        rng: &mut R,
    ) -> Result<Self, ImitationError> {
        if config.batch_size == 0 || !(config.initial_alpha >= 0.0) {
            return Err(ImitationError::InvalidConfig("batch size and alpha".into()));
        }
        let mean_net = Mlp::new(
            &widths(state_dim, &config.hidden, action_dim),
            Activation::Tanh,
            if config.bounded_mean { Activation::Tanh } else { Activation::Identity },
            rng,
        );
        let policy = GaussianPolicy::new(mean_net, vec![-0.5; action_dim])?;
        let qw = widths(state_dim + action_dim, &config.hidden, 1);
        let q1 = Mlp::new(&qw, Activation::Tanh, Activation::Identity, rng);
        let q2 = Mlp::new(&qw, Activation::Tanh, Activation::Identity, rng);
        let log_std = Tensor::row_vector(policy.log_std().to_vec());
        let mut pparams = policy.mean_net().params();
        pparams.push(&log_std);
        let opt_policy = AdamState::new(pparams, AdamConfig::with_lr(config.lr_actor));
        let opt_q1 = AdamState::new(q1.params(), AdamConfig::with_lr(config.lr_critic));
        let opt_q2 = AdamState::new(q2.params(), AdamConfig::with_lr(config.lr_critic));
        let opt_alpha = AdamState::new([&Tensor::scalar(0.0)], AdamConfig::with_lr(config.lr_alpha));
        // ln 0 = -inf keeps a zero temperature exactly zero.
        let log_alpha = config.initial_alpha.ln();
        Ok(Self {
            policy,
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            log_alpha,
            config,
            opt_policy,
            opt_q1,
            opt_q2,
            opt_alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// `min(Q1, Q2)` at `(s, a)` from the online critics.
    pub fn q_value(&self, s: &[f64], a: &[f64]) -> f64 {
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        self.q1.predict(&x)[0].min(self.q2.predict(&x)[0])
    }
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..a.rows())
        .map(|i| a.row(i).iter().chain(b.row(i)).copied().collect())
        .collect();
    Tensor::from_rows(&rows)
}

fn normal_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Actions `μ(s) + σ ε` and their log-densities.
fn sample_actions(policy: &GaussianPolicy, states: &Tensor, eps: &Tensor) -> (Tensor, Vec<f64>) {
    let mu = policy.mean_net().predict_batch(states);
    let ls = policy.log_std();
    let mut a = mu.clone();
    let mut logp = vec![0.0; states.rows()];
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let e = eps.get(i, j);
            a.set(i, j, mu.get(i, j) + ls[j].exp() * e);
            logp[i] += -0.5 * e * e - ls[j] - HALF_LN_2PI;
        }
    }
    (a, logp)
}

fn check_finite(v: f64, what: &'static str) -> Result<f64, ImitationError> {
    if v.is_finite() {
        Ok(v)
    } else {
        log::error!("{what} is {v}");
        Err(ImitationError::NonFinite(what))
    }
}

/// One gradient step on both critics, the actor and (when tuned) the
/// temperature, followed by Polyak averaging of the target critics.
pub fn sac_step<R: Rng + ?Sized>(
    learner: &mut SacLearner,
    buffer: &TransitionBuffer,
    rng: &mut R,
) -> Result<SacStats, ImitationError> {
    let cfg = learner.config.clone();
    let b = cfg.batch_size;
    if buffer.len() < b {
        return Err(ImitationError::BufferTooSmall {
            needed: b,
            have: buffer.len(),
        });
    }
    let idx = buffer.sample_indices(b, rng);
    let batch: Vec<_> = idx.iter().map(|&i| buffer.get(i)).collect();
    let states = Tensor::from_rows(&batch.iter().map(|t| t.state.clone()).collect::<Vec<_>>());
    let actions = Tensor::from_rows(&batch.iter().map(|t| t.action.clone()).collect::<Vec<_>>());
    let next_states = Tensor::from_rows(&batch.iter().map(|t| t.next_state.clone()).collect::<Vec<_>>());
    let da = learner.policy.action_dim();
    let alpha = learner.alpha();

    // Soft Bellman targets from the target critics.
    let eps_next = normal_tensor(b, da, rng);
    let (next_a, next_logp) = sample_actions(&learner.policy, &next_states, &eps_next);
    let sa_next = concat_rows(&next_states, &next_a);
    let t1 = learner.q1_target.predict_batch(&sa_next);
    let t2 = learner.q2_target.predict_batch(&sa_next);
    let targets: Vec<f64> = (0..b)
        .map(|i| {
            let soft_v = t1.get(i, 0).min(t2.get(i, 0)) - if alpha > 0.0 { alpha * next_logp[i] } else { 0.0 };
            let cont = if batch[i].done { 0.0 } else { 1.0 };
            batch[i].reward + cfg.gamma * cont * soft_v
        })
        .collect();

    let q_loss = {
        let tape = Tape::new();
        let sa = tape.constant(concat_rows(&states, &actions));
        let y = tape.constant(Tensor::column_vector(targets));
        let b1 = learner.q1.bind(&tape);
        let b2 = learner.q2.bind(&tape);
        let l1 = b1.forward(sa).sub(y).square().mean();
        let l2 = b2.forward(sa).sub(y).square().mean();
        let loss = l1.add(l2);
        let value = check_finite(loss.item(), "critic loss")?;
        let grads = tape.backward(loss).map_err(|_| ImitationError::NonFinite("critic gradient"))?;
        let g1 = b1.param_grads(&grads);
        let g2 = b2.param_grads(&grads);
        learner.opt_q1.step(&mut learner.q1.params_mut(), &g1)?;
        learner.opt_q2.step(&mut learner.q2.params_mut(), &g2)?;
        value
    };

    let eps = normal_tensor(b, da, rng);
    let (policy_loss, mean_logp) = {
        let tape = Tape::new();
        let s = tape.constant(states.clone());
        let bound = learner.policy.mean_net().bind(&tape);
        let log_std = tape.leaf(Tensor::row_vector(learner.policy.log_std().to_vec()));
        let ones = tape.constant(Tensor::filled(b, 1, 1.0));
        let sigma = ones.matmul(log_std.exp());
        let a = bound.forward(s).add(tape.constant(eps.clone()).mul(sigma));
        let sa = Var::concat_cols(&[s, a]);
        let q = learner.q1.bind(&tape).forward(sa).minimum(learner.q2.bind(&tape).forward(sa));
        let eps_sq: f64 = eps.data().iter().map(|e| e * e).sum::<f64>() / b as f64;
        let mean_logp = log_std.sum().scale(-1.0).add_scalar(-(da as f64) * HALF_LN_2PI - 0.5 * eps_sq);
        let loss = mean_logp.scale(alpha).sub(q.mean());
        let value = check_finite(loss.item(), "actor loss")?;
        let grads = tape.backward(loss).map_err(|_| ImitationError::NonFinite("actor gradient"))?;
        let mut g = bound.param_grads(&grads);
        g.push(grads.get(log_std));
        let mut ls = Tensor::row_vector(learner.policy.log_std().to_vec());
        {
            let mut params = learner.policy.mean_net_mut().params_mut();
            params.push(&mut ls);
            learner.opt_policy.step(&mut params, &g)?;
        }
        learner.policy.set_log_std(ls.data());
        (value, mean_logp.item())
    };

    if let Some(target) = cfg.target_entropy {
        // J(α) = E[-α (log π + H̄)]; derivative in ln α.
        let grad = -alpha * (mean_logp + target);
        let mut la = Tensor::scalar(learner.log_alpha);
        learner
            .opt_alpha
            .step(&mut [&mut la], &[Tensor::scalar(check_finite(grad, "temperature gradient")?)])?;
        learner.log_alpha = la.item();
    }

    learner.q1_target.soft_update_from(&learner.q1, cfg.polyak);
    learner.q2_target.soft_update_from(&learner.q2, cfg.polyak);

    Ok(SacStats {
        q_loss,
        policy_loss,
        alpha: learner.alpha(),
        entropy: -mean_logp,
    })
}
