use rand::Rng;
use rand_distr::StandardNormal;

use crate::imitation::ConditionalGaussian;
use crate::mdp::{Environment, Policy};

/// Planar point mass. State `[x, y, vx, vy]`, action `[ax, ay]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMassSpec {
    pub dt: f64,
    pub friction: f64,
    pub max_accel: f64,
    pub episode_length: usize,
    /// Start positions are uniform in `[-r, r]²` with zero velocity.
    pub start_radius: f64,
}

impl Default for PointMassSpec {
    fn default() -> Self {
        Self {
            dt: 0.1,
            friction: 0.1,
            max_accel: 1.0,
            episode_length: 50,
            start_radius: 1.0,
        }
    }
}

pub const POINTMASS_STATE_DIM: usize = 4;
pub const POINTMASS_ACTION_DIM: usize = 2;

/// Semi-implicit Euler: `v' = (1 - friction) v + a dt`, `x' = x + v' dt`.
/// Acceleration components are clipped to `±max_accel`.
pub fn pointmass_step(spec: &PointMassSpec, s: &[f64], a: &[f64]) -> Vec<f64> {
    let mut next = vec![0.0; POINTMASS_STATE_DIM];
    for i in 0..2 {
        let acc = a[i].clamp(-spec.max_accel, spec.max_accel);
        let v = (1.0 - spec.friction) * s[2 + i] + acc * spec.dt;
        next[2 + i] = v;
        next[i] = s[i] + v * spec.dt;
    }
    next
}

/// `-‖position‖²`.
pub fn pointmass_reward(s: &[f64]) -> f64 {
    -(s[0] * s[0] + s[1] * s[1])
}

impl Environment for PointMassSpec {
    type State = Vec<f64>;
    type Action = Vec<f64>;

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let r = self.start_radius;
        vec![rng.random_range(-r..=r), rng.random_range(-r..=r), 0.0, 0.0]
    }

    fn step(&self, state: &Vec<f64>, action: &Vec<f64>) -> (Vec<f64>, f64) {
        (pointmass_step(self, state, action), pointmass_reward(state))
    }

    fn validate_action(&self, action: &Vec<f64>) -> Result<(), Vec<f64>> {
        if action.len() == POINTMASS_ACTION_DIM && action.iter().all(|a| a.is_finite()) {
            Ok(())
        } else {
            Err(action.clone())
        }
    }
}

/// Proportional-derivative controller toward the origin with Gaussian
/// action noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PdExpert {
    pub kp: f64,
    pub kd: f64,
    pub noise_std: f64,
}

impl Default for PdExpert {
    fn default() -> Self {
        Self {
            kp: 3.0,
            kd: 2.5,
            noise_std: 0.1,
        }
    }
}

impl ConditionalGaussian for PdExpert {
    fn mean_log_std(&self, s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mean = (0..2).map(|i| -self.kp * s[i] - self.kd * s[2 + i]).collect();
        (mean, vec![self.noise_std.ln(); 2])
    }
}

impl Policy<Vec<f64>, Vec<f64>> for PdExpert {
    fn sample<R: Rng + ?Sized>(&self, state: &Vec<f64>, rng: &mut R) -> Vec<f64> {
        let (m, _) = self.mean_log_std(state);
        m.into_iter()
            .map(|m| m + self.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn log_prob(&self, state: &Vec<f64>, action: &Vec<f64>) -> f64 {
        let (m, ls) = self.mean_log_std(state);
        crate::mdp::diag_gaussian_log_density(action, &m, &ls)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::sample_trajectory;

    #[test]
    fn rest_is_fixed_point() {
        let spec = PointMassSpec::default();
        let s = vec![0.3, -0.2, 0.0, 0.0];
        assert_eq!(pointmass_step(&spec, &s, &[0.0, 0.0]), s);
    }

    #[test]
    fn unit_acceleration_telescopes() {
        let spec = PointMassSpec {
            friction: 0.0,
            ..PointMassSpec::default()
        };
        let mut s = vec![0.0; 4];
        for k in 1..=7 {
            s = pointmass_step(&spec, &s, &[1.0, 0.0]);
            assert!((s[2] - k as f64 * spec.dt).abs() < 1e-12);
            assert_eq!(s[3], 0.0);
        }
    }

    #[test]
    fn friction_contracts_speed() {
        let spec = PointMassSpec {
            friction: 0.2,
            ..PointMassSpec::default()
        };
        let mut s = vec![0.0, 0.0, 1.0, -2.0];
        let mut speed = f64::INFINITY;
        for _ in 0..50 {
            s = pointmass_step(&spec, &s, &[0.0, 0.0]);
            let v = s[2].hypot(s[3]);
            assert!(v <= speed);
            speed = v;
        }
    }

    #[test]
    fn pd_expert_reaches_origin() {
        let spec = PointMassSpec::default();
        let expert = PdExpert::default();
        let mut final_norm = 0.0;
        for seed in 0..10 {
            let tr = sample_trajectory(&spec, &expert, 100, seed).unwrap();
            let last = &tr.steps.last().unwrap().next_state;
            final_norm += last[0].hypot(last[1]) / 10.0;
        }
        assert!(final_norm < 0.2, "{final_norm}");
    }
}
