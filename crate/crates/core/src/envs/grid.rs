use super::EnvError;
use crate::mdp::{check_injective_dynamics, TabularMdp};

/// Chain of `n` states with left/right moves. A move off either end stays
/// put, which keeps the two actions distinct; the goal is the last state.
pub fn build_chain(n_states: usize, gamma: f64, goal_reward: f64) -> Result<TabularMdp, EnvError> {
    if n_states < 2 {
        return Err(EnvError::InvalidSpec("chain needs at least two states".into()));
    }
    let mut transition = Vec::with_capacity(2 * n_states);
    let mut reward = Vec::with_capacity(2 * n_states);
    for s in 0..n_states {
        transition.push(s.saturating_sub(1));
        transition.push((s + 1).min(n_states - 1));
        let r = if s == n_states - 1 { goal_reward } else { 0.0 };
        reward.extend([r, r]);
    }
    let mut p0 = vec![0.0; n_states];
    p0[0] = 1.0;
    Ok(TabularMdp::new(n_states, 2, transition, p0, reward, gamma)?)
}

/// Action labels for the chain, in table order.
pub const CHAIN_ACTIONS: [&str; 2] = ["left", "right"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl GridAction {
    /// Nominal displacement `(dx, dy)`; `y` grows downward.
    pub fn displacement(self) -> (i64, i64) {
        match self {
            GridAction::Up => (0, -1),
            GridAction::Down => (0, 1),
            GridAction::Left => (-1, 0),
            GridAction::Right => (1, 0),
            GridAction::Stay => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub step_reward: f64,
    pub goal_reward: f64,
    pub gamma: f64,
    /// Adds the stay action; the goal is absorbing through it.
    pub include_stay: bool,
}

impl GridworldSpec {
    pub fn five_by_five() -> Self {
        Self {
            width: 5,
            height: 5,
            start: (0, 0),
            goal: (2, 2),
            step_reward: 0.0,
            goal_reward: 1.0,
            gamma: 0.9,
            include_stay: true,
        }
    }

    pub fn actions(&self) -> Vec<GridAction> {
        let mut a = vec![GridAction::Up, GridAction::Down, GridAction::Left, GridAction::Right];
        if self.include_stay {
            a.push(GridAction::Stay);
        }
        a
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn coords(&self, s: usize) -> (usize, usize) {
        (s % self.width, s / self.width)
    }
}

/// Builds the grid MDP. Moves off an edge wrap around (a torus step). If
/// two actions from one cell would still land on the same cell (grids with
/// a side shorter than 3), the later action goes to the first unused cell
/// in row-major order instead. The result is checked for injectivity.
pub fn build_gridworld(spec: &GridworldSpec) -> Result<TabularMdp, EnvError> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 || spec.start.0 >= w || spec.start.1 >= h || spec.goal.0 >= w || spec.goal.1 >= h {
        return Err(EnvError::InvalidSpec(format!("{spec:?}")));
    }
    let actions = spec.actions();
    let ns = spec.n_states();
    let na = actions.len();
    if na > ns {
        return Err(EnvError::NotInjective(format!("{na} actions cannot be injective on {ns} cells")));
    }
    let goal = spec.index(spec.goal.0, spec.goal.1);
    let mut transition = Vec::with_capacity(ns * na);
    let mut reward = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let (x, y) = spec.coords(s);
        let mut used = vec![false; ns];
        for act in &actions {
            let (dx, dy) = act.displacement();
            let nx = (x as i64 + dx).rem_euclid(w as i64) as usize;
            let ny = (y as i64 + dy).rem_euclid(h as i64) as usize;
            let mut next = spec.index(nx, ny);
            if used[next] {
                next = used.iter().position(|u| !u).expect("fewer actions than cells");
            }
            used[next] = true;
            transition.push(next);
            reward.push(if s == goal { spec.goal_reward } else { spec.step_reward });
        }
    }
    let mut p0 = vec![0.0; ns];
    p0[spec.index(spec.start.0, spec.start.1)] = 1.0;
    let mdp = TabularMdp::new(ns, na, transition, p0, reward, spec.gamma)?;
    if !check_injective_dynamics(&mdp) {
        return Err(EnvError::NotInjective(format!("{spec:?}")));
    }
    Ok(mdp)
}
