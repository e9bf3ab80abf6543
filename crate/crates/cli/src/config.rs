//! Experiment configuration: flat TOML with strict key checking.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityKind {
    Made,
    Ebm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaPiMode {
    Fixed,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: String,
    pub seed: u64,
    /// Training seeds; empty means just `seed`.
    pub seeds: Vec<u64>,
    pub out_dir: String,

    pub n_trajectories: usize,
    pub episode_length: usize,
    /// Soft-optimality temperature of tabular experts.
    pub expert_temperature: f64,
    pub expert_kp: f64,
    pub expert_kd: f64,
    pub expert_noise: f64,

    pub density: DensityKind,
    pub made_components: usize,
    pub density_hidden: Vec<usize>,
    pub density_epochs: usize,
    pub density_lr: f64,
    pub density_batch: usize,
    pub ebm_slices: usize,
    pub ebm_sliced_norm: bool,
    pub spectral_norm: bool,

    pub lambda_pi_mode: LambdaPiMode,
    pub lambda_pi: f64,
    pub lambda_pi_lr: f64,
    /// Defaults to `0.5 ln|A|` (tabular) or `-dim(A)` (continuous).
    pub target_entropy: Option<f64>,
    pub lambda_f: f64,
    pub use_alg1_form: bool,
    pub critic_bandwidth: f64,

    pub iterations: usize,
    pub rollouts_per_iteration: usize,

    pub total_steps: usize,
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub sac_gamma: f64,
    pub sac_lr: f64,
    pub sac_batch: usize,
    pub sac_hidden: Vec<usize>,

    pub n_eval_states: usize,
    pub eval_episodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: "grid-5x5".into(),
            seed: 0,
            seeds: Vec::new(),
            out_dir: "runs".into(),
            n_trajectories: 1,
            episode_length: 30,
            expert_temperature: ndi_core::envs::EXPERT_TEMPERATURE,
            expert_kp: 3.0,
            expert_kd: 2.5,
            expert_noise: 0.1,
            density: DensityKind::Made,
            made_components: 5,
            density_hidden: vec![32, 32],
            density_epochs: 40,
            density_lr: 3e-3,
            density_batch: 128,
            ebm_slices: 1,
            ebm_sliced_norm: false,
            spectral_norm: false,
            lambda_pi_mode: LambdaPiMode::Fixed,
            lambda_pi: 0.01,
            lambda_pi_lr: 0.5,
            target_entropy: None,
            lambda_f: 0.005,
            use_alg1_form: true,
            critic_bandwidth: 1.0,
            iterations: 20,
            rollouts_per_iteration: 16,
            total_steps: 20_000,
            warmup_steps: 1_000,
            eval_every: 1_000,
            sac_gamma: 0.99,
            sac_lr: 1e-3,
            sac_batch: 64,
            sac_hidden: vec![64, 64],
            n_eval_states: 500,
            eval_episodes: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Usage(format!("config: {m}")));
        if self.n_trajectories == 0 || self.episode_length == 0 {
            return bad("n_trajectories and episode_length must be positive");
        }
        if !(self.expert_temperature > 0.0) {
            return bad("expert_temperature must be positive");
        }
        if self.lambda_f < 0.0 || self.lambda_pi < 0.0 {
            return bad("lambda weights must be nonnegative");
        }
        if self.iterations == 0 || self.rollouts_per_iteration == 0 || self.density_epochs == 0 {
            return bad("iterations, rollouts_per_iteration and density_epochs must be positive");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 || self.n_eval_states == 0 {
            return bad("evaluation counts must be positive");
        }
        Ok(())
    }

    /// Seeds trained by `train`.
    pub fn train_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding,
    /// with the output directory blanked so relocated runs hash alike.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out_dir: String::new(),
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("lamda_f = 0.1"), Err(CliError::Usage(_))));
    }

    #[test]
    fn typed_fields() {
        let c = ExperimentConfig::from_toml("env = \"chain-5\"\ndensity = \"ebm\"\nlambda_pi_mode = \"auto\"\nseeds = [1, 2]").unwrap();
        assert_eq!(c.density, DensityKind::Ebm);
        assert_eq!(c.lambda_pi_mode, LambdaPiMode::Auto);
        assert_eq!(c.train_seeds(), vec![1, 2]);
        assert!(ExperimentConfig::from_toml("density = \"flow\"").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.lambda_f = 0.1;
        assert_ne!(a.hash(), b.hash());
    }
}
