use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_dims, minibatches, rows_tensor, DensityError, Standardizer, DEFAULT_STD_FLOOR};
use crate::autodiff::{logsumexp, Tape, Tensor, Var};
use crate::nn::{Activation, AdamConfig, AdamState, Mlp, ModelFile};

pub const LOG_SCALE_MIN: f64 = -7.0;
pub const LOG_SCALE_MAX: f64 = 3.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Masked autoencoder with a `K`-component Gaussian mixture conditional per
/// coordinate.
///
/// The network output holds one head of `3K` columns per coordinate,
/// `[logits | means | log-scales]`, in coordinate order. `ordering[k]` is the
/// coordinate modelled `k`-th; its head only sees coordinates placed
/// earlier.
#[derive(Debug, Clone)]
pub struct MadeModel {
    pub net: Mlp,
    pub ordering: Vec<usize>,
    pub n_components: usize,
    pub standardizer: Standardizer,
}

/// One conditional mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureHead {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

impl MixtureHead {
    pub fn log_density(&self, x: f64) -> f64 {
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|j| {
                let z = (x - self.means[j]) * (-self.log_scales[j]).exp();
                self.weights[j].ln() - 0.5 * z * z - self.log_scales[j] - HALF_LN_2PI
            })
            .collect();
        logsumexp(&terms)
    }
}

fn check_ordering(ordering: &[usize], d: usize) -> Result<(), DensityError> {
    let mut seen = vec![false; d];
    if ordering.len() != d {
        return Err(DensityError::InvalidConfig(format!("ordering has {} entries for {d} coordinates", ordering.len())));
    }
    for &c in ordering {
        if c >= d || seen[c] {
            return Err(DensityError::InvalidConfig(format!("ordering {ordering:?} is not a permutation")));
        }
        seen[c] = true;
    }
    Ok(())
}

/// Connectivity masks for the given layer widths. Coordinate at position
/// `k` has degree `k + 1`; hidden units cycle through degrees `1..d-1`
/// (all zero when `d = 1`, so every head is unconditional).
fn made_masks(ordering: &[usize], hidden: &[usize], n_components: usize) -> Vec<Tensor> {
    let d = ordering.len();
    let mut input_degree = vec![0usize; d];
    for (k, &c) in ordering.iter().enumerate() {
        input_degree[c] = k + 1;
    }
    let hidden_degrees: Vec<Vec<usize>> = hidden
        .iter()
        .map(|&h| (0..h).map(|u| if d > 1 { u % (d - 1) + 1 } else { 0 }).collect())
        .collect();
    let mut masks = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input_degree.clone();
    for hd in &hidden_degrees {
        let mut m = Tensor::zeros(prev.len(), hd.len());
        for (i, &pi) in prev.iter().enumerate() {
            for (j, &hj) in hd.iter().enumerate() {
                if hj >= pi {
                    m.set(i, j, 1.0);
                }
            }
        }
        masks.push(m);
        prev = hd.clone();
    }
    let out_width = 3 * n_components * d;
    let mut m = Tensor::zeros(prev.len(), out_width);
    for (i, &pi) in prev.iter().enumerate() {
        for c in 0..d {
            // Strict: a head never sees its own coordinate.
            if pi < input_degree[c] {
                for col in c * 3 * n_components..(c + 1) * 3 * n_components {
                    m.set(i, col, 1.0);
                }
            }
        }
    }
    masks.push(m);
    masks
}

impl MadeModel {
    pub fn new<R: rand::Rng + ?Sized>(
        ordering: Vec<usize>,
        hidden: &[usize],
        n_components: usize,
        standardizer: Standardizer,
        rng: &mut R,
    ) -> Result<Self, DensityError> {
        let d = ordering.len();
        check_ordering(&ordering, d)?;
        if n_components == 0 || d == 0 {
            return Err(DensityError::InvalidConfig("need at least one coordinate and component".into()));
        }
        if standardizer.dim() != d {
            return Err(DensityError::DimensionMismatch {
                expected: d,
                got: standardizer.dim(),
            });
        }
        let mut widths = vec![d];
        widths.extend_from_slice(hidden);
        widths.push(3 * n_components * d);
        let mut net = Mlp::new(&widths, Activation::Tanh, Activation::Identity, rng);
        for (layer, mask) in net.layers_mut().iter_mut().zip(made_masks(&ordering, hidden, n_components)) {
            layer.mask = Some(mask);
        }
        Ok(Self {
            net,
            ordering,
            n_components,
            standardizer,
        })
    }

    pub fn dim(&self) -> usize {
        self.ordering.len()
    }

    /// Mixture heads at standardized input `z`, indexed by coordinate.
    pub fn heads(&self, z: &[f64]) -> Vec<MixtureHead> {
        let out = self.net.predict(z);
        let k = self.n_components;
        (0..self.dim())
            .map(|c| {
                let h = &out[c * 3 * k..(c + 1) * 3 * k];
                let lse = logsumexp(&h[..k]);
                MixtureHead {
                    weights: h[..k].iter().map(|l| (l - lse).exp()).collect(),
                    means: h[k..2 * k].to_vec(),
                    log_scales: h[2 * k..].iter().map(|s| s.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)).collect(),
                }
            })
            .collect()
    }

    /// Log-density of an already standardized vector.
    pub fn log_density_standardized(&self, z: &[f64]) -> f64 {
        self.heads(z).iter().zip(z).map(|(h, &x)| h.log_density(x)).sum()
    }

    /// Raw-space log-density (standardized density plus the Jacobian).
    pub fn log_density_raw(&self, x: &[f64]) -> f64 {
        made_log_density(self, x) + self.standardizer.log_jacobian()
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut f = ModelFile::new("made");
        f.metadata.insert("n_components".into(), self.n_components.to_string());
        f.shift = self.standardizer.shift.clone();
        f.scale = self.standardizer.scale.clone();
        f.networks.push(self.net.clone());
        f.arrays.push(("ordering".into(), self.ordering.iter().map(|&c| c as f64).collect()));
        f
    }

    pub fn from_model_file(f: &ModelFile) -> Result<Self, DensityError> {
        let bad = |m: &str| DensityError::Checkpoint(m.to_string());
        if f.kind != "made" {
            return Err(bad(&format!("expected kind made, found {}", f.kind)));
        }
        let n_components = f
            .meta("n_components")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing n_components"))?;
        let ordering: Vec<usize> = f
            .array("ordering")
            .ok_or_else(|| bad("missing ordering"))?
            .iter()
            .map(|&c| c as usize)
            .collect();
        check_ordering(&ordering, ordering.len())?;
        let net = f.networks.first().cloned().ok_or_else(|| bad("missing network"))?;
        if net.input_dim() != ordering.len() || net.output_dim() != 3 * n_components * ordering.len() {
            return Err(bad("network shape does not match ordering"));
        }
        Ok(Self {
            net,
            ordering,
            n_components,
            standardizer: Standardizer {
                shift: f.shift.clone(),
                scale: f.scale.clone(),
            },
        })
    }
}

/// `Σ_i log p(x_i | x_<i)` in standardized coordinates.
pub fn made_log_density(model: &MadeModel, x: &[f64]) -> f64 {
    model.log_density_standardized(&model.standardizer.apply(x))
}

/// Mean log-likelihood of the standardized batch `x` as a graph node.
fn mean_log_likelihood<'t>(out: Var<'t>, x: &Tensor, n_components: usize) -> Var<'t> {
    let tape = out.tape();
    let (b, d) = x.shape();
    let k = n_components;
    let mut total: Option<Var<'t>> = None;
    for c in 0..d {
        let base = c * 3 * k;
        let logits = out.columns(base, k);
        let mu = out.columns(base + k, k);
        let ls = out.columns(base + 2 * k, k).clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);
        let mut xc = Tensor::zeros(b, k);
        for i in 0..b {
            for j in 0..k {
                xc.set(i, j, x.get(i, c));
            }
        }
        let z = (tape.constant(xc) - mu) * ls.scale(-1.0).exp();
        let log_n = (z.square().scale(-0.5) - ls).add_scalar(-HALF_LN_2PI);
        let log_w = logits - logits.logsumexp_cols().broadcast_cols(k);
        let lp = (log_w + log_n).logsumexp_cols();
        total = Some(match total {
            Some(t) => t + lp,
            None => lp,
        });
    }
    total.expect("at least one coordinate").mean()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MadeConfig {
    pub n_components: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Autoregressive order; identity when `None`.
    pub ordering: Option<Vec<usize>>,
    pub std_floor: f64,
    pub seed: u64,
}

impl Default for MadeConfig {
    fn default() -> Self {
        Self {
            n_components: 5,
            hidden: vec![32, 32],
            epochs: 40,
            batch_size: 128,
            lr: 3e-3,
            ordering: None,
            std_floor: DEFAULT_STD_FLOOR,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MadeFit {
    pub model: MadeModel,
    /// Mean negative log-likelihood per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Maximum-likelihood fit with Adam on shuffled minibatches.
pub fn made_fit(data: &[Vec<f64>], config: &MadeConfig) -> Result<MadeFit, DensityError> {
    if data.len() < 2 {
        return Err(DensityError::TooFewSamples {
            needed: 2,
            got: data.len(),
        });
    }
    let d = data[0].len();
    check_dims(data, d)?;
    if config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(DensityError::InvalidConfig("epochs, batch size and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let standardizer = Standardizer::fit(data, config.std_floor)?;
    let z = standardizer.apply_all(data);
    let ordering = config.ordering.clone().unwrap_or_else(|| (0..d).collect());
    let mut model = MadeModel::new(ordering, &config.hidden, config.n_components, standardizer, &mut rng)?;
    let mut opt = AdamState::new(model.net.params(), AdamConfig::with_lr(config.lr));
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for idx in minibatches(z.len(), config.batch_size, &mut rng) {
            let x = rows_tensor(&z, &idx);
            let tape = Tape::new();
            let bound = model.net.bind(&tape);
            let out = bound.forward(tape.constant(x.clone()));
            let loss = mean_log_likelihood(out, &x, config.n_components).scale(-1.0);
            let value = loss.item();
            if !value.is_finite() {
                return Err(DensityError::NonFiniteLoss { epoch, value });
            }
            let grads = tape.backward(loss).map_err(|e| DensityError::InvalidConfig(e.to_string()))?;
            opt.step(&mut model.net.params_mut(), &bound.param_grads(&grads))?;
            sum += value * idx.len() as f64;
        }
        let mean = sum / z.len() as f64;
        log::debug!("made epoch {epoch}: nll {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(MadeFit { model, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_difference_gradient;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn frozen_standard(d: usize) -> MadeModel {
        // All weights zero: every head is a single N(0, 1).
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = MadeModel::new((0..d).collect(), &[4], 1, Standardizer::identity(d), &mut rng).unwrap();
        for p in m.net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    #[test]
    fn standard_normal_heads() {
        assert!((made_log_density(&frozen_standard(1), &[0.0]) + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((made_log_density(&frozen_standard(2), &[0.0, 0.0]) + 2.0 * 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn random_model_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MadeModel::new(vec![1, 0], &[16, 16], 3, Standardizer::identity(2), &mut rng).unwrap();
        let h = 0.04;
        let mut total = 0.0;
        let n = (16.0 / h) as i64;
        for i in 0..n {
            for j in 0..n {
                let x = [-8.0 + (i as f64 + 0.5) * h, -8.0 + (j as f64 + 0.5) * h];
                total += made_log_density(&m, &x).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 0.02, "{total}");
        // Each 1-D conditional is itself normalized.
        for head in m.heads(&[0.3, -0.4]) {
            let mut s = 0.0;
            let h = 1e-3;
            let mut x = -40.0;
            while x < 40.0 {
                s += head.log_density(x + h / 2.0).exp() * h;
                x += h;
            }
            assert!((s - 1.0).abs() < 1e-6, "{s}");
            assert!((head.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_ignore_later_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ordering = vec![2, 0, 3, 1];
        let m = MadeModel::new(ordering.clone(), &[12, 12], 2, Standardizer::identity(4), &mut rng).unwrap();
        let x0 = [0.3, -1.1, 0.7, 0.2];
        for (pos, &c) in ordering.iter().enumerate() {
            let k = m.n_components;
            for j in 0..3 * k {
                let f = |x: &[f64]| m.net.predict(x)[c * 3 * k + j];
                let g = central_difference_gradient(f, &x0, 1e-5);
                for &later in &ordering[pos..] {
                    assert!(g[later].abs() <= 1e-9, "head {c} sees coordinate {later}: {}", g[later]);
                }
            }
        }
    }

    #[test]
    fn graph_likelihood_matches_plain_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = MadeModel::new(vec![0, 1, 2], &[8], 3, Standardizer::identity(3), &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let x = Tensor::from_rows(&rows);
        let tape = Tape::new();
        let out = m.net.bind(&tape).forward(tape.constant(x.clone()));
        let graph = mean_log_likelihood(out, &x, 3).item();
        let plain = rows.iter().map(|r| made_log_density(&m, r)).sum::<f64>() / 5.0;
        assert!((graph - plain).abs() < 1e-12);
    }

    #[test]
    fn single_point_pins_scale_at_floor() {
        let data = vec![vec![2.5]; 8];
        let cfg = MadeConfig {
            n_components: 1,
            hidden: vec![4],
            epochs: 8000,
            batch_size: 8,
            lr: 2e-3,
            ..MadeConfig::default()
        };
        let fit = made_fit(&data, &cfg).unwrap();
        let head = &fit.model.heads(&fit.model.standardizer.apply(&[2.5]))[0];
        assert!(head.means[0].abs() < 1e-3, "{head:?}");
        assert_eq!(head.log_scales[0], LOG_SCALE_MIN);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = MadeModel::new(vec![1, 0], &[6], 2, Standardizer::fit(&[vec![0.0, 1.0], vec![2.0, 5.0]], 1e-3).unwrap(), &mut rng)
            .unwrap();
        let back = MadeModel::from_model_file(&ModelFile::from_bytes(&m.to_model_file().to_bytes()).unwrap()).unwrap();
        for x in [[0.1, 0.2], [-3.0, 4.0]] {
            assert_eq!(made_log_density(&m, &x), made_log_density(&back, &x));
        }
        assert!(MadeModel::from_model_file(&ModelFile::new("ebm")).is_err());
    }

    #[test]
    fn rejects_tiny_data_and_bad_ordering() {
        assert!(matches!(made_fit(&[vec![1.0]], &MadeConfig::default()), Err(DensityError::TooFewSamples { .. })));
        let cfg = MadeConfig {
            ordering: Some(vec![0, 0]),
            ..MadeConfig::default()
        };
        assert!(made_fit(&[vec![1.0, 2.0], vec![0.0, 1.0]], &cfg).is_err());
    }
}
