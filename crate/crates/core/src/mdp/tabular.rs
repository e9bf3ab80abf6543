use super::MdpError;

/// Finite MDP with deterministic transitions `transition[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<usize>,
    initial_dist: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
}

impl TabularMdp {
    /// `transition` and `reward` are row-major `n_states × n_actions` tables.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<usize>,
        initial_dist: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
    ) -> Result<Self, MdpError> {
        if n_states == 0 || n_actions == 0 {
            return Err(MdpError::Empty);
        }
        let cells = n_states * n_actions;
        if transition.len() != cells || reward.len() != cells || initial_dist.len() != n_states {
            return Err(MdpError::ShapeMismatch {
                n_states,
                n_actions,
            });
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(MdpError::InvalidDiscount(discount));
        }
        for (i, &next) in transition.iter().enumerate() {
            if next >= n_states {
                return Err(MdpError::InvalidTransition {
                    state: i / n_actions,
                    action: i % n_actions,
                    target: next,
                });
            }
        }
        let total: f64 = initial_dist.iter().sum();
        if initial_dist.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(MdpError::InvalidInitialDist(total));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(MdpError::NonFiniteReward);
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            initial_dist,
            reward,
            discount,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    #[inline]
    pub fn next_state(&self, s: usize, a: usize) -> usize {
        self.transition[s * self.n_actions + a]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn reward_table(&self) -> &[f64] {
        &self.reward
    }

    pub fn transition_table(&self) -> &[usize] {
        &self.transition
    }

    /// Same dynamics with a different reward table.
    pub fn with_reward(&self, reward: Vec<f64>) -> Result<Self, MdpError> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.initial_dist.clone(),
            reward,
            self.discount,
        )
    }

    pub fn with_discount(&self, discount: f64) -> Result<Self, MdpError> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.initial_dist.clone(),
            self.reward.clone(),
            discount,
        )
    }

    pub fn with_initial_dist(&self, initial_dist: Vec<f64>) -> Result<Self, MdpError> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            initial_dist,
            self.reward.clone(),
            self.discount,
        )
    }
}

/// True iff no two actions from the same state reach the same next state.
pub fn check_injective_dynamics(mdp: &TabularMdp) -> bool {
    let mut seen = vec![usize::MAX; mdp.n_states()];
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let next = mdp.next_state(s, a);
            if seen[next] == s {
                return false;
            }
            seen[next] = s;
        }
    }
    true
}

/// Two states, two actions, `s' = s XOR a`, uniform start.
pub fn xor_mdp(discount: f64) -> TabularMdp {
    TabularMdp::new(
        2,
        2,
        vec![0, 1, 1, 0],
        vec![0.5, 0.5],
        vec![0.0; 4],
        discount,
    )
    .expect("xor mdp is well formed")
}

/// One state, one action, reward `reward`.
pub fn single_state_mdp(discount: f64, reward: f64) -> TabularMdp {
    TabularMdp::new(1, 1, vec![0], vec![1.0], vec![reward], discount)
        .expect("single-state mdp is well formed")
}
