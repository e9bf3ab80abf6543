//! Density models of expert `(state, action)` vectors: a Gaussian-mixture
//! MADE fitted by maximum likelihood and an energy-based model fitted by
//! sliced score matching.
//!
//! Both models standardize their inputs with training-set statistics and
//! report log-densities in standardized coordinates. The Jacobian of that
//! map is a constant, so it does not change which policy is optimal; use
//! [`Standardizer::log_jacobian`] to convert to raw-space densities.

mod ebm;
mod made;

pub use ebm::{
    ebm_fit, ebm_log_density_unnormalized, ebm_score, fd_hessian_vector_product, hutchinson_trace, ssm_loss, EbmConfig,
    EbmFit, EbmModel, Energy, SsmConfig,
};
pub use made::{made_fit, made_log_density, MadeConfig, MadeFit, MadeModel, LOG_SCALE_MAX, LOG_SCALE_MIN};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::nn::NnError;

pub const DEFAULT_STD_FLOOR: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum DensityError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite loss {value} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Per-coordinate affine map `z = (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Sample mean and standard deviation, the latter floored at `std_floor`
    /// so constant coordinates stay finite.
    pub fn fit(data: &[Vec<f64>], std_floor: f64) -> Result<Self, DensityError> {
        if data.is_empty() {
            return Err(DensityError::TooFewSamples { needed: 1, got: 0 });
        }
        let d = data[0].len();
        check_dims(data, d)?;
        let n = data.len() as f64;
        let mut shift = vec![0.0; d];
        for row in data {
            for (m, x) in shift.iter_mut().zip(row) {
                *m += x / n;
            }
        }
        let mut scale = vec![0.0; d];
        for row in data {
            for j in 0..d {
                scale[j] += (row[j] - shift[j]).powi(2) / n;
            }
        }
        scale.iter_mut().for_each(|v| *v = v.sqrt().max(std_floor));
        Ok(Self { shift, scale })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn apply_all(&self, data: &[Vec<f64>]) -> Vec<Vec<f64>> {
        data.iter().map(|x| self.apply(x)).collect()
    }

    /// `log |dz/dx| = -Σ ln scale`; add to a standardized log-density to get
    /// the raw-space one.
    pub fn log_jacobian(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

pub(crate) fn check_dims(data: &[Vec<f64>], d: usize) -> Result<(), DensityError> {
    for row in data {
        if row.len() != d {
            return Err(DensityError::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
    }
    Ok(())
}

/// Shuffled minibatches of row indices.
pub(crate) fn minibatches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn rows_tensor(data: &[Vec<f64>], idx: &[usize]) -> Tensor {
    Tensor::from_rows(&idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>())
}

/// True when the mean loss of each `window`-epoch block is no larger than
/// the previous block's plus `tol`.
pub fn smoothed_nonincreasing(losses: &[f64], window: usize, tol: f64) -> bool {
    let blocks: Vec<f64> = losses
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    blocks.windows(2).all(|w| w[1] <= w[0] + tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_moments() {
        let data = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(&data, 1e-3).unwrap();
        assert_eq!(s.shift, vec![2.0, 5.0]);
        assert_eq!(s.scale, vec![1.0, 1e-3]);
        assert_eq!(s.apply(&[3.0, 5.0]), vec![1.0, 0.0]);
        assert!((s.log_jacobian() - 1e3f64.ln()).abs() < 1e-12);
        assert!(Standardizer::fit(&[vec![1.0], vec![1.0, 2.0]], 1e-3).is_err());
    }

    #[test]
    fn smoothing_check() {
        assert!(smoothed_nonincreasing(&[3.0, 2.0, 2.5, 1.0, 1.0, 0.9], 2, 0.0));
        assert!(!smoothed_nonincreasing(&[1.0, 1.0, 2.0, 2.0], 2, 0.0));
    }
}
