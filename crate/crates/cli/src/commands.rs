//! The pipeline subcommands. Each writes into the output directory and
//! stamps its files with the config hash and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ndi_core::density::{
    ebm_fit, ebm_log_density_unnormalized, made_fit, made_log_density, smoothed_nonincreasing, EbmConfig, EbmModel,
    MadeConfig, MadeModel, SsmConfig, Standardizer,
};
use ndi_core::envs::{registry, PdExpert, PointMassSpec, RegisteredEnv, TabularEnv};
use ndi_core::imitation::{
    evaluate_policy_kl_continuous, evaluate_policy_kl_tabular, evaluate_return_env, evaluate_return_tabular,
    run_continuous_ndi, run_tabular_ndi, soft_policy_iteration, ContinuousNdiConfig, ContinuousReward, FixedGaussian,
    KlMode, LambdaPi, SacConfig, TabularNdiConfig,
};
use ndi_core::mdp::{rollout, GaussianPolicy, SoftmaxPolicy};
use ndi_core::nn::ModelFile;
use ndi_core::occupancy::{occupancy_measure, reverse_kl_occupancy};

use crate::config::{DensityKind, ExperimentConfig, LambdaPiMode};
use crate::demos::{DemoRecord, DemoSet};
use crate::CliError;

pub const DEMOS_FILE: &str = "demos.csv";
pub const DENSITY_FILE: &str = "density.ckpt";
pub const DENSITY_CURVE_FILE: &str = "density_curve.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
const OCC_TOL: f64 = 1e-8;
/// Episodes for sampled expert returns on continuous environments.
const EXPERT_RETURN_EPISODES: usize = 100;

pub fn policy_file(seed: u64) -> String {
    format!("policy_seed{seed}.ckpt")
}

fn out_dir(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Environment with the config's episode length and expert settings.
enum Env {
    Tabular { env: TabularEnv, expert: SoftmaxPolicy },
    PointMass { spec: PointMassSpec, expert: PdExpert },
}

fn build_env(config: &ExperimentConfig) -> Result<Env, CliError> {
    Ok(match registry(&config.env)? {
        RegisteredEnv::Tabular(env) => {
            let expert = soft_policy_iteration(&env.mdp, config.expert_temperature, 1e-12)?;
            Env::Tabular { env, expert }
        }
        RegisteredEnv::PointMass(spec) => Env::PointMass {
            spec: PointMassSpec {
                episode_length: config.episode_length,
                ..spec
            },
            expert: PdExpert {
                kp: config.expert_kp,
                kd: config.expert_kd,
                noise_std: config.expert_noise,
            },
        },
    })
}

fn expert_descriptor(config: &ExperimentConfig, env: &Env) -> String {
    match env {
        Env::Tabular { .. } => format!("soft-optimal temperature {}", config.expert_temperature),
        Env::PointMass { expert, .. } => format!("pd kp {} kd {} noise {}", expert.kp, expert.kd, expert.noise_std),
    }
}

/// Samples `n_trajectories` expert episodes and writes `demos.csv`.
pub fn gen_demos(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = out_dir(config)?;
    let env = build_env(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    let expert_return = match &env {
        Env::Tabular { env: te, expert } => {
            for ep in 0..config.n_trajectories {
                let traj = rollout(&te.mdp, expert, config.episode_length, &mut rng)?;
                records.extend(traj.steps.iter().map(|st| DemoRecord {
                    episode: ep,
                    t: st.t,
                    s: te.state_features[st.state].clone(),
                    a: te.action_features[st.action].clone(),
                }));
            }
            evaluate_return_tabular(&te.mdp, expert, None, None, config.seed)?.mean
        }
        Env::PointMass { spec, expert } => {
            for ep in 0..config.n_trajectories {
                let traj = rollout(spec, expert, config.episode_length, &mut rng)?;
                records.extend(traj.steps.iter().map(|st| DemoRecord {
                    episode: ep,
                    t: st.t,
                    s: st.state.clone(),
                    a: st.action.clone(),
                }));
            }
            evaluate_return_env(spec, expert, config.episode_length, EXPERT_RETURN_EPISODES, config.seed, None)?.mean
        }
    };
    let mut header = BTreeMap::new();
    header.insert("env".into(), config.env.clone());
    header.insert("expert".into(), expert_descriptor(config, &env));
    header.insert("seed".into(), config.seed.to_string());
    header.insert("count".into(), records.len().to_string());
    header.insert("n_trajectories".into(), config.n_trajectories.to_string());
    header.insert("expert_return".into(), format!("{expert_return:.16e}"));
    header.insert("config_hash".into(), config.hash());
    let demos = DemoSet { header, records };
    let path = dir.join(DEMOS_FILE);
    demos.save(&path)?;
    log::info!("wrote {} demonstration rows to {}", demos.records.len(), path.display());
    Ok(path)
}

/// A fitted density model of either kind.
pub enum Density {
    Made(MadeModel),
    Ebm(EbmModel),
}

impl Density {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            Density::Made(m) => made_log_density(m, x),
            Density::Ebm(m) => ebm_log_density_unnormalized(m, x),
        }
    }

    pub fn standardizer(&self) -> &Standardizer {
        match self {
            Density::Made(m) => &m.standardizer,
            Density::Ebm(m) => &m.standardizer,
        }
    }

    pub fn kind(&self) -> DensityKind {
        match self {
            Density::Made(_) => DensityKind::Made,
            Density::Ebm(_) => DensityKind::Ebm,
        }
    }

    pub fn load(path: &Path) -> Result<(Self, ModelFile), CliError> {
        let file = ModelFile::load(path)?;
        let model = match file.kind.as_str() {
            "made" => Density::Made(MadeModel::from_model_file(&file)?),
            "ebm" => Density::Ebm(EbmModel::from_model_file(&file)?),
            other => return Err(CliError::Input(format!("{} holds a {other} model", path.display()))),
        };
        Ok((model, file))
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub epoch_losses: Vec<f64>,
    /// Smoothed loss never increased over 10-epoch blocks.
    pub smoothed_monotone: bool,
}

/// Fits the configured density model to the demonstrations.
pub fn fit_density(config: &ExperimentConfig, demos_path: &Path) -> Result<FitOutcome, CliError> {
    let dir = out_dir(config)?;
    let demos = DemoSet::load(demos_path)?;
    let data = demos.pairs();
    let (mut file, losses) = match config.density {
        DensityKind::Made => {
            let fit = made_fit(
                &data,
                &MadeConfig {
                    n_components: config.made_components,
                    hidden: config.density_hidden.clone(),
                    epochs: config.density_epochs,
                    batch_size: config.density_batch,
                    lr: config.density_lr,
                    seed: config.seed,
                    ..MadeConfig::default()
                },
            )?;
            (fit.model.to_model_file(), fit.epoch_losses)
        }
        DensityKind::Ebm => {
            let fit = ebm_fit(
                &data,
                &EbmConfig {
                    ssm: SsmConfig {
                        n_slices: config.ebm_slices,
                        sliced_norm: config.ebm_sliced_norm,
                        batch_size: config.density_batch,
                        epochs: config.density_epochs,
                        ..SsmConfig::default()
                    },
                    hidden: config.density_hidden.clone(),
                    lr: config.density_lr,
                    spectral_norm: config.spectral_norm,
                    seed: config.seed,
                    ..EbmConfig::default()
                },
            )?;
            (fit.model.to_model_file(), fit.epoch_losses)
        }
    };
    let smoothed_monotone = smoothed_nonincreasing(&losses, 10, 0.0);
    if !smoothed_monotone {
        log::warn!("density loss rose between 10-epoch blocks");
    }
    file.metadata.insert("config_hash".into(), config.hash());
    file.metadata.insert("seed".into(), config.seed.to_string());
    file.metadata.insert("env".into(), config.env.clone());
    file.metadata.insert("state_dim".into(), demos.state_dim().to_string());
    file.metadata.insert("action_dim".into(), demos.action_dim().to_string());
    let checkpoint = dir.join(DENSITY_FILE);
    file.save(&checkpoint)?;
    let mut curve = String::from("config_hash,seed,epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(curve, "{},{},{i},{l:.16e}", config.hash(), config.seed).expect("string write");
    }
    write(&dir.join(DENSITY_CURVE_FILE), curve)?;
    Ok(FitOutcome {
        checkpoint,
        epoch_losses: losses,
        smoothed_monotone,
    })
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub config_hash: String,
    pub seed: u64,
    pub iteration: usize,
    pub env_steps: usize,
    pub augmented_return: f64,
    pub env_return: f64,
    pub normalized_kl: Option<f64>,
    pub reverse_kl: Option<f64>,
    pub lambda_pi: f64,
    /// Rollout horizon behind each iteration.
    pub horizon: usize,
}

const METRICS_HEADER: &str =
    "config_hash,seed,iteration,env_steps,augmented_return,env_return,normalized_kl,reverse_kl,lambda_pi,horizon\n";

impl MetricsRecord {
    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.16e}"));
        format!(
            "{},{},{},{},{:.16e},{:.16e},{},{},{:.16e},{}\n",
            self.config_hash,
            self.seed,
            self.iteration,
            self.env_steps,
            self.augmented_return,
            self.env_return,
            opt(self.normalized_kl),
            opt(self.reverse_kl),
            self.lambda_pi,
            self.horizon
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policies: Vec<(u64, PathBuf)>,
    pub metrics: Vec<MetricsRecord>,
    pub audit: Vec<(u64, Vec<String>)>,
}

fn tabular_log_q(env: &TabularEnv, density: &Density) -> Vec<f64> {
    let (ns, na) = (env.mdp.n_states(), env.mdp.n_actions());
    let mut table = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            table.push(density.log_density(&env.pair_features(s, a)));
        }
    }
    table
}

pub fn tabular_ndi_config(config: &ExperimentConfig, n_actions: usize) -> TabularNdiConfig {
    TabularNdiConfig {
        lambda_pi: match config.lambda_pi_mode {
            LambdaPiMode::Fixed => LambdaPi::Fixed(config.lambda_pi),
            LambdaPiMode::Auto => LambdaPi::Auto {
                initial: config.lambda_pi,
                lr: config.lambda_pi_lr,
                target_entropy: config.target_entropy.unwrap_or(0.5 * (n_actions as f64).ln()),
            },
        },
        lambda_f: config.lambda_f,
        use_alg1_form: config.use_alg1_form,
        iterations: config.iterations,
        rollouts_per_iteration: config.rollouts_per_iteration,
        episode_length: config.episode_length,
        critic_bandwidth: config.critic_bandwidth,
        ..TabularNdiConfig::default()
    }
}

pub fn continuous_ndi_config(config: &ExperimentConfig, action_dim: usize) -> ContinuousNdiConfig {
    let auto = config.lambda_pi_mode == LambdaPiMode::Auto;
    ContinuousNdiConfig {
        lambda_f: config.lambda_f,
        use_alg1_form: config.use_alg1_form,
        total_steps: config.total_steps,
        warmup_steps: config.warmup_steps,
        episode_length: config.episode_length,
        eval_every: config.eval_every,
        eval_episodes: config.eval_episodes,
        n_eval_states: config.n_eval_states,
        critic_bandwidth: config.critic_bandwidth,
        sac: SacConfig {
            gamma: config.sac_gamma,
            lr_actor: config.sac_lr,
            lr_critic: config.sac_lr,
            lr_alpha: config.sac_lr,
            batch_size: config.sac_batch,
            target_entropy: auto.then(|| config.target_entropy.unwrap_or(-(action_dim as f64))),
            initial_alpha: config.lambda_pi,
            hidden: config.sac_hidden.clone(),
            ..SacConfig::default()
        },
        ..ContinuousNdiConfig::default()
    }
}

fn stamp(file: &mut ModelFile, config: &ExperimentConfig, seed: u64) {
    file.metadata.insert("config_hash".into(), config.hash());
    file.metadata.insert("seed".into(), seed.to_string());
    file.metadata.insert("env".into(), config.env.clone());
}

fn tabular_policy_file(policy: &SoftmaxPolicy) -> ModelFile {
    let mut f = ModelFile::new("tabular-policy");
    f.metadata.insert("n_states".into(), policy.n_states().to_string());
    f.metadata.insert("n_actions".into(), policy.n_actions().to_string());
    f.arrays.push(("logits".into(), policy.logits().to_vec()));
    f
}

fn gaussian_policy_file(policy: &GaussianPolicy) -> ModelFile {
    let mut f = ModelFile::new("gaussian-policy");
    f.networks.push(policy.mean_net().clone());
    f.arrays.push(("log_std".into(), policy.log_std().to_vec()));
    f
}

/// A policy loaded for evaluation.
pub enum LoadedPolicy {
    Tabular(SoftmaxPolicy),
    Gaussian(GaussianPolicy),
}

pub fn load_policy(path: &Path) -> Result<(LoadedPolicy, ModelFile), CliError> {
    let f = ModelFile::load(path)?;
    let bad = |m: &str| CliError::Input(format!("{}: {m}", path.display()));
    let policy = match f.kind.as_str() {
        "tabular-policy" => {
            let parse = |k: &str| -> Result<usize, CliError> {
                f.meta(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(&format!("missing {k}")))
            };
            let logits = f.array("logits").ok_or_else(|| bad("missing logits"))?.to_vec();
            LoadedPolicy::Tabular(SoftmaxPolicy::new(parse("n_states")?, parse("n_actions")?, logits)?)
        }
        "gaussian-policy" => {
            let net = f.networks.first().cloned().ok_or_else(|| bad("missing network"))?;
            let log_std = f.array("log_std").ok_or_else(|| bad("missing log_std"))?.to_vec();
            LoadedPolicy::Gaussian(GaussianPolicy::new(net, log_std)?)
        }
        other => return Err(bad(&format!("not a policy checkpoint ({other})"))),
    };
    Ok((policy, f))
}

/// Runs the learner for every configured seed and saves each run's
/// best-by-augmented-return policy.
pub fn train(config: &ExperimentConfig, density_path: &Path) -> Result<TrainOutcome, CliError> {
    let dir = out_dir(config)?;
    let (density, file) = Density::load(density_path)?;
    if density.kind() != config.density {
        return Err(CliError::Usage(format!(
            "checkpoint holds a {:?} model but the config asks for {:?}",
            density.kind(),
            config.density
        )));
    }
    if let Some(env) = file.meta("env") {
        if env != config.env {
            return Err(CliError::Usage(format!("checkpoint was fitted on {env}, config names {}", config.env)));
        }
    }
    let env = build_env(config)?;
    let hash = config.hash();
    let mut outcome = TrainOutcome {
        policies: Vec::new(),
        metrics: Vec::new(),
        audit: Vec::new(),
    };
    let mut timing = String::from("config_hash,seed,wallclock_s\n");
    for seed in config.train_seeds() {
        let start = Instant::now();
        let (mut policy_file_contents, rows, audit, diverged) = match &env {
            Env::Tabular { env: te, expert } => {
                let log_q = tabular_log_q(te, &density);
                let cfg = tabular_ndi_config(config, te.mdp.n_actions());
                let run = run_tabular_ndi(&te.mdp, &log_q, &te.state_features, Some(expert), &cfg, seed)?;
                let rows: Vec<MetricsRecord> = run
                    .metrics
                    .iter()
                    .map(|m| MetricsRecord {
                        config_hash: hash.clone(),
                        seed,
                        iteration: m.iteration,
                        env_steps: m.env_steps,
                        augmented_return: m.augmented_return,
                        env_return: m.env_return,
                        normalized_kl: m.normalized_kl,
                        reverse_kl: m.reverse_kl,
                        lambda_pi: m.lambda_pi,
                        horizon: config.episode_length,
                    })
                    .collect();
                let mut f = tabular_policy_file(&run.policy);
                f.metadata.insert("best_iteration".into(), run.best_iteration.to_string());
                f.metadata
                    .insert("env_steps".into(), rows.last().map_or(0, |r| r.env_steps).to_string());
                (f, rows, run.audit, run.diverged)
            }
            Env::PointMass { spec, expert } => {
                let ds = file
                    .meta("state_dim")
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| CliError::Input("density checkpoint lacks state_dim".into()))?;
                let st = density.standardizer();
                let states = Standardizer {
                    shift: st.shift[..ds].to_vec(),
                    scale: st.scale[..ds].to_vec(),
                };
                let log_q = |s: &[f64], a: &[f64]| {
                    let x: Vec<f64> = s.iter().chain(a).copied().collect();
                    density.log_density(&x)
                };
                let cfg = continuous_ndi_config(config, st.dim() - ds);
                let run = run_continuous_ndi(spec, &ContinuousReward::Density(&log_q), &states, Some(expert), &cfg, seed)?;
                let rows: Vec<MetricsRecord> = run
                    .metrics
                    .iter()
                    .map(|m| MetricsRecord {
                        config_hash: hash.clone(),
                        seed,
                        iteration: m.evaluation,
                        env_steps: m.env_steps,
                        augmented_return: m.augmented_return,
                        env_return: m.env_return,
                        normalized_kl: m.normalized_kl,
                        reverse_kl: None,
                        lambda_pi: m.lambda_pi,
                        horizon: config.episode_length,
                    })
                    .collect();
                let mut f = gaussian_policy_file(&run.policy);
                f.metadata.insert("best_iteration".into(), run.best_evaluation.to_string());
                f.metadata.insert(
                    "env_steps".into(),
                    rows.get(run.best_evaluation).map_or(0, |r| r.env_steps).to_string(),
                );
                (f, rows, run.audit, run.diverged)
            }
        };
        stamp(&mut policy_file_contents, config, seed);
        let path = dir.join(policy_file(seed));
        policy_file_contents.save(&path)?;
        let log = format!("# config_hash={hash} seed={seed}\n{}\n", audit.join("\n"));
        write(&dir.join(format!("audit_seed{seed}.log")), log)?;
        writeln!(timing, "{hash},{seed},{:.3}", start.elapsed().as_secs_f64()).expect("string write");
        outcome.policies.push((seed, path));
        outcome.metrics.extend(rows);
        outcome.audit.push((seed, audit));
        if let Some(what) = diverged {
            // The best checkpoint before the failure is already on disk.
            write_metrics(&dir, &outcome.metrics, &timing)?;
            return Err(CliError::Divergence(format!(
                "seed {seed}: non-finite {what}; kept best checkpoint {}",
                dir.join(policy_file(seed)).display()
            )));
        }
    }
    write_metrics(&dir, &outcome.metrics, &timing)?;
    Ok(outcome)
}

fn write_metrics(dir: &Path, metrics: &[MetricsRecord], timing: &str) -> Result<(), CliError> {
    let mut csv = String::from(METRICS_HEADER);
    for r in metrics {
        csv.push_str(&r.csv_row());
    }
    write(&dir.join(METRICS_FILE), csv)?;
    write(&dir.join(TIMING_FILE), timing.to_string())
}

/// Summary of one evaluated policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub seed: u64,
    pub env: String,
    pub policy: String,
    pub env_return_mean: f64,
    pub env_return_stderr: f64,
    pub normalized_kl: f64,
    pub reverse_kl: Option<f64>,
    pub env_steps: Option<usize>,
}

/// Evaluates a policy checkpoint, or the built-in `expert` / `uniform`
/// policies, against the config's expert.
pub fn eval(config: &ExperimentConfig, policy: &str) -> Result<EvalSummary, CliError> {
    let dir = out_dir(config)?;
    let env = build_env(config)?;
    let (loaded, env_steps, name) = match policy {
        "expert" | "uniform" => (None, None, policy.to_string()),
        path => {
            let (p, f) = load_policy(Path::new(path))?;
            let steps = f.meta("env_steps").and_then(|v| v.parse().ok());
            let stem = Path::new(path).file_stem().map_or("policy".into(), |s| s.to_string_lossy().into_owned());
            (Some(p), steps, stem)
        }
    };
    let summary = match &env {
        Env::Tabular { env: te, expert } => {
            let (ns, na) = (te.mdp.n_states(), te.mdp.n_actions());
            let pol = match (policy, loaded) {
                ("expert", _) => expert.clone(),
                ("uniform", _) => SoftmaxPolicy::uniform(ns, na),
                (_, Some(LoadedPolicy::Tabular(p))) if p.n_states() == ns && p.n_actions() == na => p,
                _ => return Err(CliError::Usage(format!("policy does not fit {}", config.env))),
            };
            let ret = evaluate_return_tabular(&te.mdp, &pol, None, None, config.seed)?;
            let nkl = evaluate_policy_kl_tabular(&pol, expert, &te.mdp, KlMode::Exact)?;
            let rk = reverse_kl_occupancy(
                &occupancy_measure(&te.mdp, &pol, OCC_TOL)?,
                &occupancy_measure(&te.mdp, expert, OCC_TOL)?,
            )?;
            EvalSummary {
                config_hash: config.hash(),
                seed: config.seed,
                env: config.env.clone(),
                policy: name.clone(),
                env_return_mean: ret.mean,
                env_return_stderr: ret.stderr,
                normalized_kl: nkl,
                reverse_kl: Some(rk),
                env_steps,
            }
        }
        Env::PointMass { spec, expert } => {
            let baseline = FixedGaussian::isotropic(2, 1.0);
            let (ret, nkl) = match (policy, loaded) {
                ("expert", _) => (
                    evaluate_return_env(spec, expert, config.episode_length, config.eval_episodes, config.seed, None)?,
                    evaluate_policy_kl_continuous(
                        spec,
                        expert,
                        expert,
                        &baseline,
                        config.episode_length,
                        config.n_eval_states,
                        config.seed,
                    )?,
                ),
                ("uniform", _) => (
                    evaluate_return_env(spec, &baseline, config.episode_length, config.eval_episodes, config.seed, None)?,
                    evaluate_policy_kl_continuous(
                        spec,
                        &baseline,
                        expert,
                        &baseline,
                        config.episode_length,
                        config.n_eval_states,
                        config.seed,
                    )?,
                ),
                (_, Some(LoadedPolicy::Gaussian(p))) => (
                    evaluate_return_env(spec, &p, config.episode_length, config.eval_episodes, config.seed, None)?,
                    evaluate_policy_kl_continuous(
                        spec,
                        &p,
                        expert,
                        &baseline,
                        config.episode_length,
                        config.n_eval_states,
                        config.seed,
                    )?,
                ),
                _ => return Err(CliError::Usage(format!("policy does not fit {}", config.env))),
            };
            EvalSummary {
                config_hash: config.hash(),
                seed: config.seed,
                env: config.env.clone(),
                policy: name.clone(),
                env_return_mean: ret.mean,
                env_return_stderr: ret.stderr,
                normalized_kl: nkl,
                reverse_kl: None,
                env_steps,
            }
        }
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&dir.join(format!("eval_{name}.json")), json + "\n")?;
    Ok(summary)
}
