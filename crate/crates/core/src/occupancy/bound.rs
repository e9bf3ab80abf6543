//! The state-action entropy lower bound and its policy gradient.

use std::borrow::Cow;

use super::{
    generalized_entropy, nwj_bound, occupancy_measure, optimal_critic_table, policy_entropy_under, CriticTable,
    JointTable, OccupancyError,
};
use crate::mdp::{consecutive_joint, state_marginals, truncation_horizon, SoftmaxPolicy, TabularMdp};

const INV_E: f64 = 0.367_879_441_171_442_33;

/// Source of the critic `f_t(s_t, s_{t+1})` used at each timestep.
#[derive(Debug, Clone, PartialEq)]
pub enum CriticFamily {
    /// One table shared by every timestep.
    Fixed(CriticTable),
    /// Table `t` at timestep `t`; the last table is reused past the end.
    PerTimestep(Vec<CriticTable>),
    /// The optimal critic of the current consecutive-state joint.
    Optimal,
}

impl CriticFamily {
    fn resolve<'a>(&'a self, t: usize, joint: &JointTable) -> Result<Cow<'a, CriticTable>, OccupancyError> {
        let table = match self {
            CriticFamily::Fixed(c) => Cow::Borrowed(c),
            CriticFamily::PerTimestep(cs) => {
                let c = cs.get(t).or(cs.last()).ok_or(OccupancyError::ShapeMismatch)?;
                Cow::Borrowed(c)
            }
            CriticFamily::Optimal => Cow::Owned(optimal_critic_table(joint)),
        };
        if table.n() != joint.n() {
            return Err(OccupancyError::ShapeMismatch);
        }
        Ok(table)
    }

    /// Uniform bound on `|I_NWJ,t|` over timesteps.
    fn term_bound(&self, n_states: usize) -> f64 {
        let table_bound = |c: &CriticTable| c.max_abs() + (c.max_value() - 1.0).exp();
        match self {
            CriticFamily::Fixed(c) => table_bound(c),
            CriticFamily::PerTimestep(cs) => cs.iter().map(table_bound).fold(0.0, f64::max),
            CriticFamily::Optimal => (n_states as f64).ln() + 1.0,
        }
    }
}

/// Components of `H^f = H(s_0) + (1+γ) H(π) + γ Σ_t γ^t I_NWJ,t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaelboReport {
    pub gamma: f64,
    pub h_s0: f64,
    pub h_policy: f64,
    pub mi_sum: f64,
    /// `ln(1-γ)/(1-γ)`: the normalization constant relating the discounted
    /// marginal entropies to the occupancy entropy.
    pub constant_c_gamma: f64,
    pub saelbo: f64,
    pub truncation_t: usize,
}

impl SaelboReport {
    /// `H^f + C(γ)`, a lower bound on the occupancy entropy.
    pub fn corrected(&self) -> f64 {
        self.saelbo + self.constant_c_gamma
    }
}

pub fn c_gamma(gamma: f64) -> f64 {
    (1.0 - gamma).ln() / (1.0 - gamma)
}

fn horizon_for(mdp: &TabularMdp, bound: f64, tol: f64) -> Result<usize, OccupancyError> {
    if !(tol > 0.0) {
        return Err(OccupancyError::InvalidTolerance(tol));
    }
    let gamma = mdp.discount();
    Ok(truncation_horizon(gamma, bound / (1.0 - gamma), tol))
}

/// SAELBO with the mutual-information sum truncated so its tail is below
/// `tol`.
pub fn saelbo(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    family: &CriticFamily,
    tol: f64,
) -> Result<SaelboReport, OccupancyError> {
    let horizon = horizon_for(mdp, family.term_bound(mdp.n_states()), tol)?;
    saelbo_with_horizon(mdp, policy, family, horizon)
}

/// SAELBO with the mutual-information sum over `t = 0 … horizon-1`.
pub fn saelbo_with_horizon(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    family: &CriticFamily,
    horizon: usize,
) -> Result<SaelboReport, OccupancyError> {
    let gamma = mdp.discount();
    let occ = occupancy_measure(mdp, policy, 1e-12)?;
    let h_s0 = generalized_entropy(mdp.initial_dist())?;
    let h_policy = policy_entropy_under(&occ, policy);
    let marginals = state_marginals(mdp, policy, horizon)?;
    let mut mi_sum = 0.0;
    let mut weight = 1.0;
    for (t, p) in marginals.per_timestep.iter().enumerate() {
        let joint = JointTable::consecutive(mdp, policy, p)?;
        let critic = family.resolve(t, &joint)?;
        mi_sum += weight * nwj_bound(&joint, &critic)?;
        weight *= gamma;
    }
    Ok(SaelboReport {
        gamma,
        h_s0,
        h_policy,
        mi_sum,
        constant_c_gamma: c_gamma(gamma),
        saelbo: h_s0 + (1.0 + gamma) * h_policy + gamma * mi_sum,
        truncation_t: horizon,
    })
}

/// Central differences of `H^f` in the logits, every quantity re-derived at
/// the perturbed parameters.
pub fn saelbo_gradient_fd(
    mdp: &TabularMdp,
    theta: &[f64],
    family: &CriticFamily,
    eps: f64,
    tol: f64,
) -> Result<Vec<f64>, OccupancyError> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let horizon = horizon_for(mdp, family.term_bound(ns), tol)?;
    let mut probe = theta.to_vec();
    let eval = |probe: &[f64]| -> Result<f64, OccupancyError> {
        let policy = SoftmaxPolicy::new(ns, na, probe.to_vec())?;
        Ok(saelbo_with_horizon(mdp, &policy, family, horizon)?.saelbo)
    };
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let up = eval(&probe)?;
        probe[i] = theta[i] - eps;
        let down = eval(&probe)?;
        probe[i] = theta[i];
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Exact gradient in the logits of `Σ_t γ^t E[R_t(s_t, a_t)]` where
/// `rewards[t]` is a fixed `n_states × n_actions` table and the sum stops at
/// `rewards.len()`.
pub fn time_indexed_policy_gradient(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    rewards: &[Vec<f64>],
) -> Result<Vec<f64>, OccupancyError> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let horizon = rewards.len();
    if horizon == 0 {
        return Ok(vec![0.0; ns * na]);
    }
    let gamma = mdp.discount();
    let marginals = state_marginals(mdp, policy, horizon)?;
    let probs = policy.prob_table();
    let mut grad = vec![0.0; ns * na];
    let mut v_next = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    for t in (0..horizon).rev() {
        let r = &rewards[t];
        let mut v = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let i = s * na + a;
                q[i] = r[i] + gamma * v_next[mdp.next_state(s, a)];
                v[s] += probs[i] * q[i];
            }
        }
        let w = gamma.powi(t as i32);
        let p = marginals.at(t);
        for s in 0..ns {
            if p[s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let i = s * na + a;
                grad[i] += w * p[s] * probs[i] * (q[i] - v[s]);
            }
        }
        v_next = v;
    }
    Ok(grad)
}

/// Per-timestep surrogate rewards whose exact policy gradient equals the
/// gradient of `H^f`: `r_π = -(1+γ) ln π(a|s)` and
/// `r_f = γ f_t(s, s') - (γ/e)[Σ_x q_t(x) e^{f_t(x, s')} + Σ_y q_{t+1}(y) e^{f_t(s, y)}]`
/// with `s' = P(s, a)` and `π`, `q_t` frozen at their current values.
fn surrogate_rewards(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    family: &CriticFamily,
    horizon: usize,
) -> Result<Vec<Vec<f64>>, OccupancyError> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.discount();
    let marginals = state_marginals(mdp, policy, horizon + 1)?;
    let log_pi: Vec<f64> = (0..ns).flat_map(|s| policy.log_probs(s)).collect();
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let q_t = marginals.at(t);
        let q_next = marginals.at(t + 1);
        let joint = JointTable::new(ns, consecutive_joint(mdp, policy, q_t))?;
        let f = family.resolve(t, &joint)?;
        f.check_exp()?;
        let h: Vec<f64> = (0..ns)
            .map(|y| (0..ns).map(|x| q_t[x] * f.get(x, y).exp()).sum())
            .collect();
        let g: Vec<f64> = (0..ns)
            .map(|x| (0..ns).map(|y| q_next[y] * f.get(x, y).exp()).sum())
            .collect();
        let mut r = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let next = mdp.next_state(s, a);
                r[s * na + a] = -(1.0 + gamma) * log_pi[s * na + a] + gamma * f.get(s, next)
                    - gamma * INV_E * (h[next] + g[s]);
            }
        }
        out.push(r);
    }
    Ok(out)
}

fn pg_with_horizon(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    family: &CriticFamily,
    horizon: usize,
) -> Result<Vec<f64>, OccupancyError> {
    let rewards = surrogate_rewards(mdp, policy, family, horizon)?;
    time_indexed_policy_gradient(mdp, policy, &rewards)
}

/// Gradient of `H^f` as the exact policy gradient of the surrogate rewards.
pub fn saelbo_gradient_pg(
    mdp: &TabularMdp,
    theta: &[f64],
    family: &CriticFamily,
    tol: f64,
) -> Result<Vec<f64>, OccupancyError> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let policy = SoftmaxPolicy::new(ns, na, theta.to_vec())?;
    let max_log = (0..ns)
        .flat_map(|s| policy.log_probs(s))
        .fold(0.0f64, |m, l| m.max(l.abs()));
    let bound = family.term_bound(ns).max((1.0 + mdp.discount()) * max_log);
    let horizon = horizon_for(mdp, bound, tol)?;
    pg_with_horizon(mdp, &policy, family, horizon)
}

/// Objective values recorded by [`coordinate_ascent`], one after each
/// critic update and one after each policy update.
#[derive(Debug, Clone)]
pub struct AscentTrace {
    pub objective: Vec<f64>,
    pub theta: Vec<f64>,
    pub horizon: usize,
}

/// Alternates an exact critic update (per-timestep optimal critics) with a
/// backtracking gradient step on the logits, both maximizing `H^f`.
pub fn coordinate_ascent(
    mdp: &TabularMdp,
    theta0: &[f64],
    initial_critics: CriticFamily,
    alternations: usize,
    step_size: f64,
    tol: f64,
) -> Result<AscentTrace, OccupancyError> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let horizon = horizon_for(mdp, CriticFamily::Optimal.term_bound(ns), tol)?;
    let mut theta = theta0.to_vec();
    let mut policy = SoftmaxPolicy::new(ns, na, theta.clone())?;
    let mut objective = vec![saelbo_with_horizon(mdp, &policy, &initial_critics, horizon)?.saelbo];
    for _ in 0..alternations {
        let marginals = state_marginals(mdp, &policy, horizon)?;
        let critics = marginals
            .per_timestep
            .iter()
            .map(|p| JointTable::consecutive(mdp, &policy, p).map(|j| optimal_critic_table(&j)))
            .collect::<Result<Vec<_>, _>>()?;
        let family = CriticFamily::PerTimestep(critics);
        let current = saelbo_with_horizon(mdp, &policy, &family, horizon)?.saelbo;
        objective.push(current);

        let grad = pg_with_horizon(mdp, &policy, &family, horizon)?;
        let mut lr = step_size;
        let mut accepted = current;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + lr * g).collect();
            let cand_policy = SoftmaxPolicy::new(ns, na, cand.clone())?;
            let value = saelbo_with_horizon(mdp, &cand_policy, &family, horizon)?.saelbo;
            if value >= current {
                theta = cand;
                policy = cand_policy;
                accepted = value;
                break;
            }
            lr *= 0.5;
        }
        objective.push(accepted);
    }
    Ok(AscentTrace {
        objective,
        theta,
        horizon,
    })
}
