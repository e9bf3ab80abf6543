//! Exact occupancy measures and information quantities on tabular MDPs.
//!
//! Everything here is computed by enumeration or by a dense linear solve,
//! so the results serve as ground truth for the sampled estimators used in
//! training.

mod bound;

pub use bound::{
    coordinate_ascent, saelbo, saelbo_gradient_fd, saelbo_gradient_pg, saelbo_with_horizon,
    time_indexed_policy_gradient, c_gamma, AscentTrace, CriticFamily, SaelboReport,
};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::mdp::{check_policy_shape, consecutive_joint, state_marginals, MdpError, SoftmaxPolicy, TabularMdp};

/// Critic value assigned to state pairs the joint never visits.
pub const CRITIC_FLOOR: f64 = -30.0;

/// Largest exponent whose `exp` is finite.
const MAX_EXP_ARG: f64 = 709.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OccupancyError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("negative density entry {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },
    #[error("occupancy linear system is singular")]
    SingularSystem,
    #[error("occupancy masses differ: {p} vs {q}")]
    MassMismatch { p: f64, q: f64 },
    #[error("support violation at state {state}, action {action}: p = {p} but q = 0")]
    SupportViolation { state: usize, action: usize, p: f64 },
    #[error("table shapes differ")]
    ShapeMismatch,
    #[error("joint table does not sum to one (total {0})")]
    InvalidJoint(f64),
    #[error("critic value {value} at ({x}, {y}) is not finite")]
    NonFiniteCritic { x: usize, y: usize, value: f64 },
    #[error("exp(f) overflows at cell ({x}, {y}) with f = {value}")]
    CriticOverflow { x: usize, y: usize, value: f64 },
    #[error("conditional entropies need t >= 1")]
    ZeroTimestep,
}

/// Non-normalized discounted state-action occupancy, row-major
/// `n_states × n_actions`, total mass `1/(1-γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    n_states: usize,
    n_actions: usize,
    rho: Vec<f64>,
    mass: f64,
}

impl OccupancyTable {
    pub fn new(n_states: usize, n_actions: usize, rho: Vec<f64>) -> Result<Self, OccupancyError> {
        if rho.len() != n_states * n_actions {
            return Err(OccupancyError::ShapeMismatch);
        }
        if let Some(index) = rho.iter().position(|&r| !(r >= 0.0)) {
            return Err(OccupancyError::NegativeEntry {
                index,
                value: rho[index],
            });
        }
        let mass = rho.iter().sum();
        Ok(Self {
            n_states,
            n_actions,
            rho,
            mass,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.rho
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.rho[s * self.n_actions + a]
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// State occupancy `ρ(s) = Σ_a ρ(s, a)`.
    pub fn state_occupancy(&self) -> Vec<f64> {
        self.rho.chunks(self.n_actions).map(|row| row.iter().sum()).collect()
    }

    /// Generalized entropy of the state-action occupancy.
    pub fn entropy(&self) -> f64 {
        entropy_unchecked(&self.rho)
    }

    /// `Σ ρ(s,a) r(s,a)`, the discounted return of a reward table.
    pub fn expectation(&self, table: &[f64]) -> f64 {
        assert_eq!(table.len(), self.rho.len());
        self.rho
            .iter()
            .zip(table)
            .filter(|(r, _)| **r > 0.0)
            .map(|(r, x)| r * x)
            .sum()
    }
}

fn policy_tables(policy: &SoftmaxPolicy) -> (Vec<f64>, Vec<f64>) {
    let mut probs = Vec::with_capacity(policy.n_states() * policy.n_actions());
    let mut logs = Vec::with_capacity(probs.capacity());
    for s in 0..policy.n_states() {
        let lp = policy.log_probs(s);
        probs.extend(lp.iter().map(|l| l.exp()));
        logs.extend(lp);
    }
    (probs, logs)
}

fn check_tol(tol: f64) -> Result<(), OccupancyError> {
    if tol > 0.0 {
        Ok(())
    } else {
        Err(OccupancyError::InvalidTolerance(tol))
    }
}

/// Exact occupancy from the linear system `(I - γ P_πᵀ) ρ_s = p_0`.
pub fn occupancy_measure(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    tol: f64,
) -> Result<OccupancyTable, OccupancyError> {
    check_tol(tol)?;
    check_policy_shape(mdp, policy)?;
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let gamma = mdp.discount();
    let (probs, _) = policy_tables(policy);
    let mut a = DMatrix::<f64>::identity(n, n);
    for s in 0..n {
        for act in 0..na {
            let next = mdp.next_state(s, act);
            a[(next, s)] -= gamma * probs[s * na + act];
        }
    }
    let b = DVector::from_column_slice(mdp.initial_dist());
    let rho_s = a.lu().solve(&b).ok_or(OccupancyError::SingularSystem)?;
    let mut rho = Vec::with_capacity(n * na);
    for s in 0..n {
        // Round-off can leave tiny negatives on unreachable states.
        let mass = rho_s[s].max(0.0);
        rho.extend(probs[s * na..(s + 1) * na].iter().map(|p| mass * p));
    }
    OccupancyTable::new(n, na, rho)
}

/// Occupancy by truncated forward recursion over `horizon` steps.
pub fn occupancy_by_recursion(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    horizon: usize,
) -> Result<OccupancyTable, OccupancyError> {
    let marginals = state_marginals(mdp, policy, horizon)?;
    let na = mdp.n_actions();
    let (probs, _) = policy_tables(policy);
    let mut rho = vec![0.0; mdp.n_states() * na];
    let mut weight = 1.0;
    for p in &marginals.per_timestep {
        for (s, &ps) in p.iter().enumerate() {
            for a in 0..na {
                rho[s * na + a] += weight * ps * probs[s * na + a];
            }
        }
        weight *= mdp.discount();
    }
    OccupancyTable::new(mdp.n_states(), na, rho)
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// `-Σ p ln p` for a non-negative, possibly non-normalized table.
pub fn generalized_entropy(density: &[f64]) -> Result<f64, OccupancyError> {
    if let Some(index) = density.iter().position(|&x| !(x >= 0.0)) {
        return Err(OccupancyError::NegativeEntry {
            index,
            value: density[index],
        });
    }
    Ok(entropy_unchecked(density))
}

/// Discounted causal entropy `-Σ ρ(s,a) ln π(a|s)`.
pub fn discounted_policy_entropy(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    tol: f64,
) -> Result<f64, OccupancyError> {
    let occ = occupancy_measure(mdp, policy, tol)?;
    Ok(policy_entropy_under(&occ, policy))
}

pub(crate) fn policy_entropy_under(occ: &OccupancyTable, policy: &SoftmaxPolicy) -> f64 {
    let (_, logs) = policy_tables(policy);
    occ.values()
        .iter()
        .zip(&logs)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, l)| -r * l)
        .sum()
}

/// Joint law of two discrete variables on a common `n`-point space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    n: usize,
    joint: Vec<f64>,
    marg_x: Vec<f64>,
    marg_y: Vec<f64>,
}

impl JointTable {
    /// `joint` is row-major with `x` indexing rows.
    pub fn new(n: usize, joint: Vec<f64>) -> Result<Self, OccupancyError> {
        if joint.len() != n * n {
            return Err(OccupancyError::ShapeMismatch);
        }
        if let Some(index) = joint.iter().position(|&x| !(x >= 0.0)) {
            return Err(OccupancyError::NegativeEntry {
                index,
                value: joint[index],
            });
        }
        let total: f64 = joint.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(OccupancyError::InvalidJoint(total));
        }
        let marg_x = joint.chunks(n).map(|r| r.iter().sum()).collect();
        let marg_y = (0..n).map(|y| (0..n).map(|x| joint[x * n + y]).sum()).collect();
        Ok(Self {
            n,
            joint,
            marg_x,
            marg_y,
        })
    }

    /// Joint of `(s_t, s_{t+1})` given `p_t`.
    pub fn consecutive(mdp: &TabularMdp, policy: &SoftmaxPolicy, p_t: &[f64]) -> Result<Self, OccupancyError> {
        Self::new(mdp.n_states(), consecutive_joint(mdp, policy, p_t))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.joint[x * self.n + y]
    }

    pub fn joint(&self) -> &[f64] {
        &self.joint
    }

    pub fn marg_x(&self) -> &[f64] {
        &self.marg_x
    }

    pub fn marg_y(&self) -> &[f64] {
        &self.marg_y
    }
}

/// Table critic `f(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTable {
    n: usize,
    values: Vec<f64>,
}

impl CriticTable {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self, OccupancyError> {
        if values.len() != n * n {
            return Err(OccupancyError::ShapeMismatch);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(OccupancyError::NonFiniteCritic {
                x: i / n,
                y: i % n,
                value: values[i],
            });
        }
        Ok(Self { n, values })
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self::new(n, vec![value; n * n]).expect("finite constant critic")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.n + y]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn check_exp(&self) -> Result<(), OccupancyError> {
        match self.values.iter().position(|&v| v > MAX_EXP_ARG) {
            Some(i) => Err(OccupancyError::CriticOverflow {
                x: i / self.n,
                y: i % self.n,
                value: self.values[i],
            }),
            None => Ok(()),
        }
    }
}

/// `Σ p(x,y) ln(p(x,y) / (p(x) p(y)))`, skipping zero-mass cells.
pub fn mutual_information(joint: &JointTable) -> f64 {
    let n = joint.n();
    let mut mi = 0.0;
    for x in 0..n {
        for y in 0..n {
            let p = joint.get(x, y);
            if p > 0.0 {
                mi += p * (p.ln() - joint.marg_x()[x].ln() - joint.marg_y()[y].ln());
            }
        }
    }
    mi.max(0.0)
}

/// `E_joint[f] - e^{-1} E_{p(x)} E_{p(y)}[e^f]`.
pub fn nwj_bound(joint: &JointTable, critic: &CriticTable) -> Result<f64, OccupancyError> {
    if joint.n() != critic.n() {
        return Err(OccupancyError::ShapeMismatch);
    }
    critic.check_exp()?;
    let n = joint.n();
    let mut first = 0.0;
    let mut second = 0.0;
    for x in 0..n {
        let px = joint.marg_x()[x];
        for y in 0..n {
            let f = critic.get(x, y);
            let p = joint.get(x, y);
            if p > 0.0 {
                first += p * f;
            }
            let q = px * joint.marg_y()[y];
            if q > 0.0 {
                second += q * f.exp();
            }
        }
    }
    Ok(first - (-1.0f64).exp() * second)
}

/// `f*(x,y) = ln(p(x,y) / (p(x) p(y))) + 1` on the support, [`CRITIC_FLOOR`]
/// elsewhere.
pub fn optimal_critic_table(joint: &JointTable) -> CriticTable {
    let n = joint.n();
    let mut values = vec![CRITIC_FLOOR; n * n];
    for x in 0..n {
        for y in 0..n {
            let p = joint.get(x, y);
            if p > 0.0 {
                // Log space: the marginal product can underflow on transient states.
                values[x * n + y] = p.ln() - joint.marg_x()[x].ln() - joint.marg_y()[y].ln() + 1.0;
            }
        }
    }
    CriticTable { n, values }
}

/// `H(s_t | s_{t-1})` from the exact consecutive joint.
pub fn conditional_state_entropy(mdp: &TabularMdp, policy: &SoftmaxPolicy, t: usize) -> Result<f64, OccupancyError> {
    if t == 0 {
        return Err(OccupancyError::ZeroTimestep);
    }
    let marginals = state_marginals(mdp, policy, t)?;
    let prev = marginals.at(t - 1);
    let joint = consecutive_joint(mdp, policy, prev);
    let n = mdp.n_states();
    let mut h = 0.0;
    for x in 0..n {
        for y in 0..n {
            let p = joint[x * n + y];
            if p > 0.0 {
                h -= p * (p / prev[x]).ln();
            }
        }
    }
    Ok(h)
}

/// `H(a_{t-1} | s_{t-1})` from the marginal and the policy.
pub fn conditional_action_entropy(mdp: &TabularMdp, policy: &SoftmaxPolicy, t: usize) -> Result<f64, OccupancyError> {
    if t == 0 {
        return Err(OccupancyError::ZeroTimestep);
    }
    let marginals = state_marginals(mdp, policy, t)?;
    Ok(marginals
        .at(t - 1)
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, &p)| p * policy.entropy(s))
        .sum())
}

/// Generalized KL `Σ p ln(p/q)` between equal-mass occupancies.
pub fn reverse_kl_occupancy(rho_p: &OccupancyTable, rho_q: &OccupancyTable) -> Result<f64, OccupancyError> {
    if rho_p.values().len() != rho_q.values().len() || rho_p.n_actions() != rho_q.n_actions() {
        return Err(OccupancyError::ShapeMismatch);
    }
    if (rho_p.mass() - rho_q.mass()).abs() > 1e-8 * rho_p.mass().max(1.0) {
        return Err(OccupancyError::MassMismatch {
            p: rho_p.mass(),
            q: rho_q.mass(),
        });
    }
    let na = rho_p.n_actions();
    let mut kl = 0.0;
    for (i, (&p, &q)) in rho_p.values().iter().zip(rho_q.values()).enumerate() {
        if p > 0.0 {
            if q <= 0.0 {
                return Err(OccupancyError::SupportViolation {
                    state: i / na,
                    action: i % na,
                    p,
                });
            }
            kl += p * (p / q).ln();
        }
    }
    Ok(kl)
}
