use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_dims, minibatches, DensityError, Standardizer, DEFAULT_STD_FLOOR};
use crate::autodiff::{Tape, Tensor, Var};
use crate::nn::{Activation, AdamConfig, AdamState, Mlp, ModelFile};

/// Energy function. By convention `E` is the log of the unnormalized
/// density, so the score is `+∇E`.
#[derive(Debug, Clone)]
pub enum Energy {
    Mlp(Mlp),
    /// `½ zᵀ A z + bᵀ z + c` with symmetric `A`.
    Quadratic { a: Tensor, b: Vec<f64>, c: f64 },
}

#[derive(Debug, Clone)]
pub struct EbmModel {
    pub energy: Energy,
    /// Constant added to every output.
    pub offset: f64,
    pub standardizer: Standardizer,
}

impl EbmModel {
    pub fn from_mlp(net: Mlp, standardizer: Standardizer) -> Result<Self, DensityError> {
        if net.output_dim() != 1 || net.input_dim() != standardizer.dim() {
            return Err(DensityError::DimensionMismatch {
                expected: standardizer.dim(),
                got: net.input_dim(),
            });
        }
        Ok(Self {
            energy: Energy::Mlp(net),
            offset: 0.0,
            standardizer,
        })
    }

    /// Quadratic energy on raw coordinates (identity standardizer).
    pub fn quadratic(a: Tensor, b: Vec<f64>, c: f64) -> Result<Self, DensityError> {
        let d = b.len();
        if a.shape() != (d, d) {
            return Err(DensityError::DimensionMismatch {
                expected: d,
                got: a.rows(),
            });
        }
        Ok(Self {
            energy: Energy::Quadratic { a, b, c },
            offset: 0.0,
            standardizer: Standardizer::identity(d),
        })
    }

    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    /// `E(z)` at standardized `z`, offset included.
    pub fn energy_standardized(&self, z: &[f64]) -> f64 {
        self.offset
            + match &self.energy {
                Energy::Mlp(net) => net.predict(z)[0],
                Energy::Quadratic { a, b, c } => {
                    let az = mat_vec(a, z);
                    0.5 * dot(z, &az) + dot(b, z) + c
                }
            }
    }

    /// `∇_z E(z)`.
    pub fn grad_standardized(&self, z: &[f64]) -> Vec<f64> {
        match &self.energy {
            Energy::Mlp(net) => {
                let tape = Tape::new();
                let (_, g) = net.bind(&tape).forward_with_input_grad(tape.constant(Tensor::row_vector(z.to_vec())));
                g.value().into_vec()
            }
            Energy::Quadratic { a, b, .. } => mat_vec(a, z).iter().zip(b).map(|(x, y)| x + y).collect(),
        }
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut f = ModelFile::new("ebm");
        f.shift = self.standardizer.shift.clone();
        f.scale = self.standardizer.scale.clone();
        f.arrays.push(("offset".into(), vec![self.offset]));
        match &self.energy {
            Energy::Mlp(net) => {
                f.metadata.insert("energy".into(), "mlp".into());
                f.networks.push(net.clone());
            }
            Energy::Quadratic { a, b, c } => {
                f.metadata.insert("energy".into(), "quadratic".into());
                f.arrays.push(("quad_a".into(), a.data().to_vec()));
                f.arrays.push(("quad_b".into(), b.clone()));
                f.arrays.push(("quad_c".into(), vec![*c]));
            }
        }
        f
    }

    pub fn from_model_file(f: &ModelFile) -> Result<Self, DensityError> {
        let bad = |m: &str| DensityError::Checkpoint(m.to_string());
        if f.kind != "ebm" {
            return Err(bad(&format!("expected kind ebm, found {}", f.kind)));
        }
        let standardizer = Standardizer {
            shift: f.shift.clone(),
            scale: f.scale.clone(),
        };
        let offset = f.array("offset").and_then(|o| o.first().copied()).ok_or_else(|| bad("missing offset"))?;
        let energy = match f.meta("energy") {
            Some("mlp") => Energy::Mlp(f.networks.first().cloned().ok_or_else(|| bad("missing network"))?),
            Some("quadratic") => {
                let b = f.array("quad_b").ok_or_else(|| bad("missing quad_b"))?.to_vec();
                let a = f.array("quad_a").ok_or_else(|| bad("missing quad_a"))?;
                if a.len() != b.len() * b.len() {
                    return Err(bad("quad_a shape"));
                }
                let c = f.array("quad_c").and_then(|c| c.first().copied()).ok_or_else(|| bad("missing quad_c"))?;
                Energy::Quadratic {
                    a: Tensor::from_vec(b.len(), b.len(), a.to_vec()),
                    b,
                    c,
                }
            }
            other => return Err(bad(&format!("unknown energy kind {other:?}"))),
        };
        let model = Self {
            energy,
            offset,
            standardizer,
        };
        if let Energy::Mlp(net) = &model.energy {
            if net.input_dim() != model.dim() || net.output_dim() != 1 {
                return Err(bad("network shape does not match standardizer"));
            }
        }
        Ok(model)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(a: &Tensor, z: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|i| dot(a.row(i), z)).collect()
}

/// Unnormalized log-density `E(standardize(x))`. The partition function is
/// never computed.
pub fn ebm_log_density_unnormalized(model: &EbmModel, x: &[f64]) -> f64 {
    model.energy_standardized(&model.standardizer.apply(x))
}

/// Score `∇E` in standardized coordinates at raw input `x`.
pub fn ebm_score(model: &EbmModel, x: &[f64]) -> Vec<f64> {
    model.grad_standardized(&model.standardizer.apply(x))
}

/// `H v ≈ (∇E(z + εv) - ∇E(z - εv)) / 2ε` at standardized `z`.
pub fn fd_hessian_vector_product(model: &EbmModel, z: &[f64], v: &[f64], eps: f64) -> Vec<f64> {
    let plus: Vec<f64> = z.iter().zip(v).map(|(z, v)| z + eps * v).collect();
    let minus: Vec<f64> = z.iter().zip(v).map(|(z, v)| z - eps * v).collect();
    let gp = model.grad_standardized(&plus);
    let gm = model.grad_standardized(&minus);
    gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
}

/// Hutchinson estimate of `tr ∇²E(z)` from `n` standard-normal probes:
/// mean and standard error.
pub fn hutchinson_trace<R: Rng + ?Sized>(model: &EbmModel, z: &[f64], n: usize, eps: f64, rng: &mut R) -> (f64, f64) {
    let samples: Vec<f64> = (0..n.max(2))
        .map(|_| {
            let v: Vec<f64> = (0..z.len()).map(|_| rng.sample(StandardNormal)).collect();
            dot(&v, &fd_hessian_vector_product(model, z, &v, eps))
        })
        .collect();
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmConfig {
    pub n_slices: usize,
    pub hvp_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Use the `d` coordinate directions instead of random slices, giving
    /// the exact Hessian trace.
    pub exact_trace: bool,
    /// Penalize `½ (vᵀ∇E)²` instead of `½ ‖∇E‖²`.
    pub sliced_norm: bool,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            n_slices: 1,
            hvp_epsilon: 1e-4,
            batch_size: 128,
            epochs: 30,
            exact_trace: false,
            sliced_norm: false,
        }
    }
}

impl SsmConfig {
    fn validate(&self) -> Result<(), DensityError> {
        if self.n_slices == 0 || !(self.hvp_epsilon > 0.0) || self.batch_size == 0 {
            return Err(DensityError::InvalidConfig(
                "n_slices and batch size must be positive, hvp_epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Probe directions for one sample: random normals or the unit basis.
fn probes<R: Rng + ?Sized>(d: usize, config: &SsmConfig, rng: &mut R) -> Vec<Vec<f64>> {
    if config.exact_trace {
        (0..d)
            .map(|j| {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                e
            })
            .collect()
    } else {
        (0..config.n_slices)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }
}

/// Per-sample contribution: summed over the unit basis for the exact
/// trace, averaged over slices otherwise.
fn combine(config: &SsmConfig) -> f64 {
    if config.exact_trace {
        1.0
    } else {
        1.0 / config.n_slices as f64
    }
}

/// Sliced score-matching loss `E_v[vᵀ∇²E v + ½‖∇E‖²]` averaged over a batch
/// of standardized points.
pub fn ssm_loss(model: &EbmModel, batch: &[Vec<f64>], config: &SsmConfig, seed: u64) -> Result<f64, DensityError> {
    config.validate()?;
    if batch.is_empty() {
        return Err(DensityError::TooFewSamples { needed: 1, got: 0 });
    }
    check_dims(batch, model.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = combine(config);
    let mut total = 0.0;
    for z in batch {
        let g = model.grad_standardized(z);
        for v in probes(z.len(), config, &mut rng) {
            let hvp = dot(&v, &fd_hessian_vector_product(model, z, &v, config.hvp_epsilon));
            let norm = if config.sliced_norm {
                0.5 * dot(&v, &g).powi(2)
            } else if config.exact_trace {
                // Spread ½‖g‖² over the d basis terms.
                0.5 * dot(&g, &g) / z.len() as f64
            } else {
                0.5 * dot(&g, &g)
            };
            total += w * (hvp + norm);
        }
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(DensityError::NonFiniteLoss { epoch: 0, value: loss });
    }
    Ok(loss)
}

/// Graph version of [`ssm_loss`] for an MLP energy.
fn ssm_loss_graph<'t>(
    tape: &'t Tape,
    net: &crate::nn::BoundMlp<'t>,
    z: &Tensor,
    v: &Tensor,
    config: &SsmConfig,
    weight: f64,
    n_points: usize,
) -> Var<'t> {
    let eps = config.hvp_epsilon;
    let d = z.cols();
    let shifted = |sign: f64| z.zip_map(v, |a, b| a + sign * eps * b);
    let (_, gp) = net.forward_with_input_grad(tape.constant(shifted(1.0)));
    let (_, gm) = net.forward_with_input_grad(tape.constant(shifted(-1.0)));
    let (_, g) = net.forward_with_input_grad(tape.constant(z.clone()));
    let vc = tape.constant(v.clone());
    let hvp = ((gp - gm) * vc).sum_cols().scale(1.0 / (2.0 * eps));
    let norm = if config.sliced_norm {
        (g * vc).sum_cols().square().scale(0.5)
    } else if config.exact_trace {
        g.square().sum_cols().scale(0.5 / d as f64)
    } else {
        g.square().sum_cols().scale(0.5)
    };
    (hvp + norm).sum().scale(weight / n_points as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EbmConfig {
    pub ssm: SsmConfig,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub spectral_norm: bool,
    pub std_floor: f64,
    pub seed: u64,
}

impl Default for EbmConfig {
    fn default() -> Self {
        Self {
            ssm: SsmConfig::default(),
            hidden: vec![64, 64],
            lr: 1e-3,
            spectral_norm: false,
            std_floor: DEFAULT_STD_FLOOR,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EbmFit {
    pub model: EbmModel,
    pub epoch_losses: Vec<f64>,
}

/// Fits an MLP energy by sliced score matching with Adam.
pub fn ebm_fit(data: &[Vec<f64>], config: &EbmConfig) -> Result<EbmFit, DensityError> {
    config.ssm.validate()?;
    if data.len() < 2 {
        return Err(DensityError::TooFewSamples {
            needed: 2,
            got: data.len(),
        });
    }
    let d = data[0].len();
    check_dims(data, d)?;
    if config.ssm.epochs == 0 || !(config.lr > 0.0) {
        return Err(DensityError::InvalidConfig("epochs and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let standardizer = Standardizer::fit(data, config.std_floor)?;
    let z = standardizer.apply_all(data);
    let mut widths = vec![d];
    widths.extend_from_slice(&config.hidden);
    widths.push(1);
    let mut net = Mlp::new(&widths, Activation::Tanh, Activation::Identity, &mut rng);
    if config.spectral_norm {
        net.enable_spectral_norm(&mut rng, 20);
    }
    let mut opt = AdamState::new(net.params(), AdamConfig::with_lr(config.lr));
    let weight = combine(&config.ssm);
    let mut epoch_losses = Vec::with_capacity(config.ssm.epochs);
    for epoch in 0..config.ssm.epochs {
        let mut sum = 0.0;
        for idx in minibatches(z.len(), config.ssm.batch_size, &mut rng) {
            let mut rows = Vec::new();
            let mut dirs = Vec::new();
            for &i in &idx {
                for v in probes(d, &config.ssm, &mut rng) {
                    rows.push(z[i].clone());
                    dirs.push(v);
                }
            }
            let zt = Tensor::from_rows(&rows);
            let vt = Tensor::from_rows(&dirs);
            let tape = Tape::new();
            let bound = net.bind(&tape);
            let loss = ssm_loss_graph(&tape, &bound, &zt, &vt, &config.ssm, weight, idx.len());
            let value = loss.item();
            if !value.is_finite() {
                return Err(DensityError::NonFiniteLoss { epoch, value });
            }
            let grads = tape.backward(loss).map_err(|e| DensityError::InvalidConfig(e.to_string()))?;
            opt.step(&mut net.params_mut(), &bound.param_grads(&grads))?;
            if config.spectral_norm {
                net.power_iterate(1);
            }
            sum += value * idx.len() as f64;
        }
        let mean = sum / z.len() as f64;
        log::debug!("ebm epoch {epoch}: ssm {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(EbmFit {
        model: EbmModel::from_mlp(net, standardizer)?,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neg_half_norm(d: usize) -> EbmModel {
        EbmModel::quadratic(Tensor::identity(d).scale(-1.0), vec![0.0; d], 0.0).unwrap()
    }

    #[test]
    fn energy_examples() {
        let zero = EbmModel::from_mlp(Mlp::zeros(&[2, 3, 1], Activation::Tanh, Activation::Identity), Standardizer::identity(2)).unwrap();
        assert_eq!(ebm_log_density_unnormalized(&zero, &[0.4, -2.0]), 0.0);
        let q = neg_half_norm(2);
        assert!((ebm_log_density_unnormalized(&q, &[1.0, 1.0]) + 1.0).abs() < 1e-15);
        let mut shifted = q.clone();
        shifted.offset = 2.5;
        for x in [[0.0, 0.0], [1.0, -3.0]] {
            let d = ebm_log_density_unnormalized(&shifted, &x) - ebm_log_density_unnormalized(&q, &x);
            assert!((d - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_trace_loss_on_quadratic() {
        let q = neg_half_norm(2);
        let cfg = SsmConfig {
            exact_trace: true,
            ..SsmConfig::default()
        };
        assert!((ssm_loss(&q, &[vec![0.0, 0.0]], &cfg, 0).unwrap() + 2.0).abs() < 1e-8);
        let x = vec![0.7, -1.3];
        let want = -2.0 + 0.5 * (0.49 + 1.69);
        assert!((ssm_loss(&q, &[x], &cfg, 0).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn hutchinson_at_origin() {
        let q = neg_half_norm(2);
        let cfg = SsmConfig {
            n_slices: 10_000,
            ..SsmConfig::default()
        };
        let loss = ssm_loss(&q, &[vec![0.0, 0.0]], &cfg, 4).unwrap();
        // Per-probe value -‖v‖²: variance 2d = 4, so stderr = 2/100.
        assert!((loss + 2.0).abs() < 3.0 * 0.02, "{loss}");
    }

    #[test]
    fn fd_hvp_matches_analytic() {
        let q = neg_half_norm(3);
        let v = [0.3, -1.2, 2.0];
        let hv = fd_hessian_vector_product(&q, &[0.5, 0.1, -0.4], &v, 1e-4);
        let vhv: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        let analytic = -v.iter().map(|x| x * x).sum::<f64>();
        assert!((vhv - analytic).abs() < 1e-6);
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[2, 8, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let model = EbmModel::from_mlp(net.clone(), Standardizer::identity(2)).unwrap();
        let pts = vec![vec![0.2, -0.5], vec![1.0, 0.3], vec![-0.7, 0.9]];
        for cfg in [
            SsmConfig {
                exact_trace: true,
                ..SsmConfig::default()
            },
            SsmConfig {
                sliced_norm: true,
                n_slices: 3,
                ..SsmConfig::default()
            },
        ] {
            let plain = ssm_loss(&model, &pts, &cfg, 9).unwrap();
            let mut prng = ChaCha8Rng::seed_from_u64(9);
            let mut rows = Vec::new();
            let mut dirs = Vec::new();
            for p in &pts {
                for v in probes(2, &cfg, &mut prng) {
                    rows.push(p.clone());
                    dirs.push(v);
                }
            }
            let tape = Tape::new();
            let bound = net.bind(&tape);
            let g = ssm_loss_graph(&tape, &bound, &Tensor::from_rows(&rows), &Tensor::from_rows(&dirs), &cfg, combine(&cfg), 3);
            assert!((g.item() - plain).abs() < 1e-9, "{} vs {plain}", g.item());
        }
    }

    #[test]
    fn checkpoint_roundtrip_both_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mlp = EbmModel::from_mlp(Mlp::new(&[2, 4, 1], Activation::Tanh, Activation::Identity, &mut rng), Standardizer::identity(2)).unwrap();
        for m in [mlp, neg_half_norm(2)] {
            let back = EbmModel::from_model_file(&ModelFile::from_bytes(&m.to_model_file().to_bytes()).unwrap()).unwrap();
            assert_eq!(ebm_log_density_unnormalized(&m, &[0.3, 0.4]), ebm_log_density_unnormalized(&back, &[0.3, 0.4]));
        }
    }
}
