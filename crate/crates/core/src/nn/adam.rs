use super::NnError;
use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        let v = m.clone();
        Self { config, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Bias-corrected update. Nothing is modified when any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ParamCountMismatch {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(NnError::ShapeMismatch {
                    index: i,
                    expected: self.m[i].shape(),
                    got: g.shape(),
                });
            }
            if let Some(k) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteGradient {
                    param: i,
                    index: k,
                    value: g.data()[k],
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NnError> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::row_vector(vec![1.0, -2.0]);
        let mut st = AdamState::new([&w], AdamConfig::with_lr(0.1));
        adam_step(&mut st, &mut [&mut w], &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut w = Tensor::row_vector(vec![0.0, 0.0]);
        let mut st = AdamState::new([&w], AdamConfig::with_lr(0.01));
        adam_step(&mut st, &mut [&mut w], &[Tensor::row_vector(vec![3.0, -0.2])]).unwrap();
        assert!((w.data()[0] + 0.01).abs() < 1e-8);
        assert!((w.data()[1] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut w = Tensor::scalar(0.0);
        let mut st = AdamState::new([&w], AdamConfig::with_lr(0.1));
        let mut dist = Vec::new();
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * (w.item() - 2.0));
            adam_step(&mut st, &mut [&mut w], &[g]).unwrap();
            dist.push((w.item() - 2.0).abs());
        }
        assert!(dist[99] < 0.1, "final distance {}", dist[99]);
        // Decreasing over the burn-in (before the iterate starts to
        // oscillate around the optimum).
        assert!(dist[..15].windows(2).all(|d| d[1] < d[0]));
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut w = Tensor::scalar(1.0);
        let mut st = AdamState::new([&w], AdamConfig::default());
        let err = adam_step(&mut st, &mut [&mut w], &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient { param: 0, index: 0, .. }));
        assert_eq!(w.item(), 1.0);
        assert_eq!(st.step_count(), 0);
    }
}
