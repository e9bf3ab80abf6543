use rand::Rng;
use rand_distr::StandardNormal;

use super::spectral::{power_iteration_step, SPECTRAL_EPS};
use super::NnError;
use crate::autodiff::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    fn apply_var(self, v: Var<'_>) -> Var<'_> {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Affine layer `x ↦ x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Fixed 0/1 connectivity mask multiplied into `weight`.
    pub mask: Option<Tensor>,
    /// Persistent power-iteration vector (length `out`) when spectral
    /// normalization is on.
    pub spectral_u: Option<Vec<f64>>,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Weight after masking, before spectral scaling.
    pub fn masked_weight(&self) -> Tensor {
        match &self.mask {
            Some(m) => self.weight.zip_map(m, |w, m| w * m),
            None => self.weight.clone(),
        }
    }

    /// Power-iteration estimate `σ = vᵀ W u` of the masked weight's top
    /// singular value, using the stored vector without updating it.
    pub fn sigma_estimate(&self) -> Option<f64> {
        let u = self.spectral_u.as_ref()?;
        let w = self.masked_weight();
        let (v, _) = power_iteration_step(&w, u);
        Some(sigma_of(&w, &v, u))
    }

    /// Weight actually applied in the forward pass.
    pub fn effective_weight(&self) -> Tensor {
        let w = self.masked_weight();
        match self.sigma_estimate() {
            Some(sigma) => w.scale(1.0 / sigma.max(SPECTRAL_EPS)),
            None => w,
        }
    }
}

fn sigma_of(w: &Tensor, v: &[f64], u: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, vi) in v.iter().enumerate() {
        for (j, uj) in u.iter().enumerate() {
            s += vi * w.get(i, j) * uj;
        }
    }
    s
}

/// Multilayer perceptron with a shared hidden activation and a separate
/// output activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    hidden: Activation,
    output: Activation,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Tensor::from_vec(
                    w[0],
                    w[1],
                    (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect(),
                );
                let bias = Tensor::from_vec(
                    1,
                    w[1],
                    (0..w[1]).map(|_| rng.random_range(-bound..bound)).collect(),
                );
                Linear {
                    weight,
                    bias,
                    mask: None,
                    spectral_u: None,
                }
            })
            .collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(w[0], w[1]),
                bias: Tensor::zeros(1, w[1]),
                mask: None,
                spectral_u: None,
            })
            .collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    pub fn from_layers(layers: Vec<Linear>, hidden: Activation, output: Activation) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::EmptyNetwork);
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::DimensionMismatch {
                    expected: pair[1].in_dim(),
                    got: pair[0].out_dim(),
                });
            }
        }
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    /// Turns on spectral normalization for every layer and runs
    /// `warmup_iterations` power iterations so the first estimate is already
    /// converged.
    pub fn enable_spectral_norm<R: Rng + ?Sized>(&mut self, rng: &mut R, warmup_iterations: usize) {
        for layer in &mut self.layers {
            let mut u: Vec<f64> = (0..layer.out_dim()).map(|_| rng.sample(StandardNormal)).collect();
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(SPECTRAL_EPS);
            u.iter_mut().for_each(|x| *x /= n);
            layer.spectral_u = Some(u);
        }
        self.power_iterate(warmup_iterations);
    }

    pub fn spectral_norm_enabled(&self) -> bool {
        self.layers.iter().any(|l| l.spectral_u.is_some())
    }

    /// Advances every layer's persistent power-iteration vector.
    pub fn power_iterate(&mut self, iterations: usize) {
        for layer in &mut self.layers {
            if let Some(u) = layer.spectral_u.take() {
                let w = layer.masked_weight();
                let mut u = u;
                for _ in 0..iterations {
                    let (_, next_u) = power_iteration_step(&w, &u);
                    u = next_u;
                }
                layer.spectral_u = Some(u);
            }
        }
    }

    /// Estimated top singular value of each layer's effective weight.
    pub fn effective_spectral_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| {
                let w = l.effective_weight();
                super::spectral::top_singular_value(&w, 30)
            })
            .collect()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Linear::out_dim));
        w
    }

    /// Trainable tensors in the order `[W0, b0, W1, b1, …]`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Batch forward pass without recording a tape (`x` is `batch × in`).
    pub fn predict_batch(&self, x: &Tensor) -> Tensor {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.effective_weight());
            for r in 0..z.rows() {
                for c in 0..z.cols() {
                    z.set(r, c, z.get(r, c) + layer.bias.get(0, c));
                }
            }
            let act = if i == last { self.output } else { self.hidden };
            h = z.map(|v| act.apply(v));
        }
        h
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.predict_batch(&Tensor::row_vector(x.to_vec())).into_vec()
    }

    /// Records the parameters on `tape` and returns a handle for forward
    /// passes. Masking and spectral scaling are part of the recorded graph.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            params.push(w);
            params.push(b);
            let mut eff = match &layer.mask {
                Some(m) => w.mul(tape.constant(m.clone())),
                None => w,
            };
            if let Some(u) = &layer.spectral_u {
                let (v, _) = power_iteration_step(&layer.masked_weight(), u);
                let v = tape.constant(Tensor::row_vector(v));
                let u = tape.constant(Tensor::column_vector(u.clone()));
                // σ = vᵀ W u with u, v held fixed; gradients flow through W.
                let sigma = v.matmul(eff).matmul(u);
                let inv = tape.constant(Tensor::scalar(1.0)).div(sigma);
                eff = eff.mul_scalar(inv);
            }
            weights.push(eff);
            biases.push(b);
        }
        BoundMlp {
            params,
            weights,
            biases,
            hidden: self.hidden,
            output: self.output,
        }
    }

    /// Adds `grads` (same order as [`Mlp::params`]) scaled by `-lr`.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) {
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= lr * d;
            }
        }
    }

    /// Polyak averaging `self ← (1 - tau) self + tau · source`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        for (dst, src) in self.params_mut().into_iter().zip(source.params()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += tau * (s - *d);
            }
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp<'t> {
    params: Vec<Var<'t>>,
    weights: Vec<Var<'t>>,
    biases: Vec<Var<'t>>,
    hidden: Activation,
    output: Activation,
}

impl<'t> BoundMlp<'t> {
    /// Parameter variables in [`Mlp::params`] order.
    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params.iter().map(|p| grads.get(*p)).collect()
    }

    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        self.forward_with_activations(x).0
    }

    /// Output plus each layer's activated output (hidden layers first).
    fn forward_with_activations(&self, x: Var<'t>) -> (Var<'t>, Vec<Var<'t>>) {
        let last = self.weights.len() - 1;
        let mut h = x;
        let mut acts = Vec::with_capacity(self.weights.len());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = h.matmul(*w).add_row(*b);
            let act = if i == last { self.output } else { self.hidden };
            h = act.apply_var(z);
            acts.push(h);
        }
        (h, acts)
    }

    /// For a scalar-output network, returns the batch of outputs
    /// (`batch × 1`) and the input gradients `∂out/∂x` (`batch × in`), both
    /// as differentiable graph nodes.
    pub fn forward_with_input_grad(&self, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let (out, acts) = self.forward_with_activations(x);
        let one_minus_sq = |h: Var<'t>| h.square().scale(-1.0).add_scalar(1.0);
        let n_layers = self.weights.len();
        let mut delta = match self.output {
            Activation::Identity => None,
            Activation::Tanh => Some(one_minus_sq(out)),
        };
        let mut grad = None;
        for l in (0..n_layers).rev() {
            // Upstream gradient w.r.t. this layer's pre-activation.
            let wt = self.weights[l].t();
            let g_in = match delta {
                // d(out)/dz = 1 broadcast: row of Wᵀ repeated per sample.
                None => {
                    let rows = x.shape().0;
                    let ones = x.tape().constant(Tensor::filled(rows, 1, 1.0));
                    ones.matmul(wt)
                }
                Some(d) => d.matmul(wt),
            };
            if l == 0 {
                grad = Some(g_in);
            } else {
                delta = Some(match self.hidden {
                    Activation::Identity => g_in,
                    Activation::Tanh => g_in.mul(one_minus_sq(acts[l - 1])),
                });
            }
        }
        (out, grad.expect("network has at least one layer"))
    }
}

/// Records `model` on `tape` and evaluates it at the single input `x`.
pub fn mlp_forward<'t>(tape: &'t Tape, model: &Mlp, x: &[f64]) -> Result<(Var<'t>, BoundMlp<'t>), NnError> {
    if x.len() != model.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    let bound = model.bind(tape);
    let input = tape.constant(Tensor::row_vector(x.to_vec()));
    let out = bound.forward(input);
    Ok((out, bound))
}
