use std::path::Path;
use std::process::Command;

use ndi_cli::commands::{self, DEMOS_FILE, DENSITY_FILE, METRICS_FILE};
use ndi_cli::config::ExperimentConfig;
use ndi_cli::demos::{DemoRecord, DemoSet};
use proptest::prelude::*;

fn config(dir: &Path, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        seeds: vec![seed, seed + 1],
        out_dir: dir.to_string_lossy().into_owned(),
        iterations: 5,
        ..ExperimentConfig::default()
    }
}

fn full_run(dir: &Path, seed: u64) {
    let cfg = config(dir, seed);
    commands::gen_demos(&cfg).unwrap();
    commands::fit_density(&cfg, &dir.join(DEMOS_FILE)).unwrap();
    commands::train(&cfg, &dir.join(DENSITY_FILE)).unwrap();
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    full_run(a.path(), 7);
    full_run(b.path(), 7);
    for name in [DEMOS_FILE, DENSITY_FILE, METRICS_FILE, "policy_seed7.ckpt", "policy_seed8.ckpt", "audit_seed8.log"] {
        assert!(read(a.path(), name) == read(b.path(), name), "{name} differs");
    }
}

#[test]
fn different_seed_changes_demos() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    commands::gen_demos(&config(a.path(), 1)).unwrap();
    commands::gen_demos(&config(b.path(), 2)).unwrap();
    assert_ne!(read(a.path(), DEMOS_FILE), read(b.path(), DEMOS_FILE));
}

#[test]
fn metrics_schema_and_stamps() {
    let dir = tempfile::tempdir().unwrap();
    full_run(dir.path(), 3);
    let cfg = config(dir.path(), 3);
    let text = String::from_utf8(read(dir.path(), METRICS_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "config_hash,seed,iteration,env_steps,augmented_return,env_return,normalized_kl,reverse_kl,lambda_pi,horizon"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * cfg.iterations);
    assert!(rows.iter().all(|r| r.len() == 10 && r[0] == cfg.hash()));
    // Env steps grow within each seed.
    for seed_rows in rows.chunks(cfg.iterations) {
        let steps: Vec<usize> = seed_rows.iter().map(|r| r[3].parse().unwrap()).collect();
        assert!(steps.windows(2).all(|w| w[1] > w[0]));
    }
    let demos = DemoSet::load(&dir.path().join(DEMOS_FILE)).unwrap();
    assert_eq!(demos.header["config_hash"], cfg.hash());
    assert_eq!(demos.records.len(), cfg.episode_length);
    let ckpt = ndi_core::nn::ModelFile::load(&dir.path().join("policy_seed4.ckpt")).unwrap();
    assert_eq!(ckpt.meta("seed"), Some("4"));
    assert_eq!(ckpt.meta("config_hash"), Some(cfg.hash().as_str()));
}

#[test]
fn eval_orders_expert_uniform_and_learned() {
    let dir = tempfile::tempdir().unwrap();
    full_run(dir.path(), 0);
    let cfg = config(dir.path(), 0);
    let expert = commands::eval(&cfg, "expert").unwrap();
    let uniform = commands::eval(&cfg, "uniform").unwrap();
    let learned = commands::eval(&cfg, &dir.path().join("policy_seed0.ckpt").to_string_lossy()).unwrap();
    assert!(expert.normalized_kl.abs() < 1e-12);
    assert!((uniform.normalized_kl - 1.0).abs() < 1e-12);
    assert!(learned.normalized_kl < 0.1, "{}", learned.normalized_kl);
    assert!(dir.path().join("eval_policy_seed0.json").exists());
}

#[test]
fn train_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0);
    commands::gen_demos(&cfg).unwrap();
    commands::fit_density(&cfg, &dir.path().join(DEMOS_FILE)).unwrap();
    let other = ExperimentConfig {
        env: "chain-5".into(),
        ..cfg
    };
    assert_eq!(commands::train(&other, &dir.path().join(DENSITY_FILE)).unwrap_err().exit_code(), 1);
}

fn ndi(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ndi")).args(args).output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let ok = ndi(&["verify", "--suite", "nwj"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("nwj seed=0 checks=2000 violations=0"));
    assert_eq!(ndi(&["verify", "--suite", "nope"]).status.code(), Some(1));
    assert_eq!(ndi(&["train", "--out", "/nonexistent/dir/for/ndi"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "lamda_f = 1.0\n").unwrap();
    assert_eq!(ndi(&["gen-demos", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn verify_reports_expected_failure() {
    let out = ndi(&["verify", "--suite", "theorem1"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("expected failure"), "{text}");
    assert!(text.contains("H(ρ)=-23.03"), "{text}");
}

proptest! {
    #[test]
    fn demo_csv_roundtrip(
        dims in (1usize..4, 1usize..3),
        lens in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
    ) {
        let (ds, da) = dims;
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            f64::from_bits((x >> 12) | 0x3ff0_0000_0000_0000) - 1.5
        };
        let mut records = Vec::new();
        for (episode, &len) in lens.iter().enumerate() {
            for t in 0..len {
                records.push(DemoRecord {
                    episode,
                    t,
                    s: (0..ds).map(|_| next()).collect(),
                    a: (0..da).map(|_| next()).collect(),
                });
            }
        }
        let set = DemoSet { header: Default::default(), records };
        prop_assert_eq!(DemoSet::from_csv(&set.to_csv()).unwrap(), set);
    }
}

#[test]
fn chain_runs_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        let cfg = ExperimentConfig {
            env: "chain-5".into(),
            ..config(dir, 5)
        };
        commands::gen_demos(&cfg).unwrap();
        commands::fit_density(&cfg, &dir.join(DEMOS_FILE)).unwrap();
        commands::train(&cfg, &dir.join(DENSITY_FILE)).unwrap();
    }
    for name in [DEMOS_FILE, DENSITY_FILE, METRICS_FILE, "policy_seed5.ckpt", "audit_seed6.log"] {
        assert!(read(a.path(), name) == read(b.path(), name), "{name} differs");
    }
}

#[test]
fn demo_count_and_expert_return() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        n_trajectories: 25,
        ..config(dir.path(), 0)
    };
    commands::gen_demos(&cfg).unwrap();
    let demos = DemoSet::load(&dir.path().join(DEMOS_FILE)).unwrap();
    assert_eq!(demos.records.len(), 25 * cfg.episode_length);
    assert_eq!(demos.header["count"], (25 * cfg.episode_length).to_string());

    // Independent oracle: iterative policy evaluation of the soft expert.
    let mdp = match ndi_core::envs::registry("grid-5x5").unwrap() {
        ndi_core::envs::RegisteredEnv::Tabular(te) => te.mdp,
        _ => unreachable!(),
    };
    let expert = ndi_core::imitation::soft_policy_iteration(&mdp, cfg.expert_temperature, 1e-12).unwrap();
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    let mut v = vec![0.0; ns];
    for _ in 0..2000 {
        v = (0..ns)
            .map(|s| (0..na).map(|a| expert.prob(s, a) * (mdp.reward(s, a) + g * v[mdp.next_state(s, a)])).sum())
            .collect();
    }
    let oracle: f64 = mdp.initial_dist().iter().zip(&v).map(|(p, v)| p * v).sum();
    let recorded: f64 = demos.header["expert_return"].parse().unwrap();
    assert!((recorded - oracle).abs() < 1e-9, "{recorded} vs {oracle}");
}

#[test]
fn five_seeds_each_get_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        seeds: vec![0, 1, 2, 3, 4],
        iterations: 3,
        ..config(dir.path(), 0)
    };
    commands::gen_demos(&cfg).unwrap();
    commands::fit_density(&cfg, &dir.path().join(DEMOS_FILE)).unwrap();
    let out = commands::train(&cfg, &dir.path().join(DENSITY_FILE)).unwrap();
    let seeds: std::collections::BTreeSet<u64> = out.metrics.iter().map(|m| m.seed).collect();
    assert_eq!(seeds.len(), 5);
    assert_eq!(out.policies.len(), 5);
    let audit = String::from_utf8(read(dir.path(), "audit_seed3.log")).unwrap();
    assert_eq!(audit.lines().next().unwrap(), format!("# config_hash={} seed=3", cfg.hash()));
}

#[test]
fn expert_has_zero_reverse_kl() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0);
    let expert = commands::eval(&cfg, "expert").unwrap();
    assert!(expert.reverse_kl.unwrap().abs() < 1e-12);
    assert!(commands::eval(&cfg, "uniform").unwrap().reverse_kl.unwrap() > 1.0);
}

#[test]
fn ebm_density_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        density: ndi_cli::config::DensityKind::Ebm,
        density_epochs: 5,
        n_trajectories: 4,
        ..config(dir.path(), 0)
    };
    commands::gen_demos(&cfg).unwrap();
    let fit = commands::fit_density(&cfg, &dir.path().join(DEMOS_FILE)).unwrap();
    assert_eq!(fit.epoch_losses.len(), 5);
    assert!(fit.epoch_losses.iter().all(|l| l.is_finite()));
    let (density, _) = commands::Density::load(&fit.checkpoint).unwrap();
    assert_eq!(density.kind(), ndi_cli::config::DensityKind::Ebm);
    commands::train(&cfg, &fit.checkpoint).unwrap();
}

#[test]
fn divergence_keeps_checkpoint_and_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        lambda_pi_mode: ndi_cli::config::LambdaPiMode::Auto,
        lambda_pi: 1.0,
        lambda_pi_lr: 1e6,
        target_entropy: Some(10.0),
        seeds: vec![0],
        ..config(dir.path(), 0)
    };
    commands::gen_demos(&cfg).unwrap();
    commands::fit_density(&cfg, &dir.path().join(DEMOS_FILE)).unwrap();
    let err = commands::train(&cfg, &dir.path().join(DENSITY_FILE)).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    let (_, file) = commands::load_policy(&dir.path().join("policy_seed0.ckpt")).unwrap();
    assert_eq!(file.meta("best_iteration"), Some("0"));
    let metrics = String::from_utf8(read(dir.path(), METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}
