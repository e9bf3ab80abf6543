use ndi_core::density::{smoothed_nonincreasing, Standardizer};
use ndi_core::envs::{PdExpert, PointMassSpec};
use ndi_core::imitation::{run_continuous_ndi, ContinuousNdiConfig, ContinuousReward, SacConfig};
use ndi_core::mdp::{Environment, Policy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn final_position_norm<P: Policy<Vec<f64>, Vec<f64>>>(env: &PointMassSpec, policy: &P, episodes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut s = env.reset(&mut rng);
        for _ in 0..env.episode_length {
            let a = policy.sample(&s, &mut rng);
            s = env.step(&s, &a).0;
        }
        total += (s[0] * s[0] + s[1] * s[1]).sqrt();
    }
    total / episodes as f64
}

#[test]
fn pd_controller_reaches_origin() {
    let env = PointMassSpec::default();
    let d = final_position_norm(&env, &PdExpert::default(), 50, 0);
    assert!(d < 0.2, "{d}");
}

#[test]
fn sac_learns_to_stabilize_point_mass() {
    let env = PointMassSpec::default();
    let config = ContinuousNdiConfig {
        lambda_f: 0.0,
        total_steps: 15_000,
        eval_every: 1_000,
        eval_episodes: 10,
        sac: SacConfig {
            gamma: 0.95,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            lr_alpha: 1e-3,
            batch_size: 64,
            target_entropy: Some(-2.0),
            initial_alpha: 0.05,
            hidden: vec![32, 32],
            ..SacConfig::default()
        },
        ..ContinuousNdiConfig::default()
    };
    let run = run_continuous_ndi(
        &env,
        &ContinuousReward::Environment,
        &Standardizer::identity(4),
        Some(&PdExpert::default()),
        &config,
        3,
    )
    .unwrap();
    // Blocks of five evaluations: mean return never drops.
    let losses: Vec<f64> = run.metrics.iter().map(|m| -m.env_return).collect();
    assert!(smoothed_nonincreasing(&losses, 5, 0.0), "{losses:?}");
    let d = final_position_norm(&env, &run.policy, 50, 1);
    assert!(d < 0.2, "{d}");
}
