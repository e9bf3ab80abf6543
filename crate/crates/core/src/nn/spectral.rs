use super::{Linear, NnError};
use crate::autodiff::Tensor;

/// Guard against dividing by the norm of a zero matrix.
pub const SPECTRAL_EPS: f64 = 1e-12;

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(SPECTRAL_EPS);
    x.iter_mut().for_each(|v| *v /= n);
}

/// One power-iteration step on `w` (`in × out`) starting from the right
/// vector `u` (length `out`). Returns the normalized left vector `v = Wu/‖Wu‖`
/// and the next right vector `Wᵀv/‖Wᵀv‖`.
pub fn power_iteration_step(w: &Tensor, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = w.shape();
    let mut v = vec![0.0; rows];
    for (i, vi) in v.iter_mut().enumerate() {
        *vi = (0..cols).map(|j| w.get(i, j) * u[j]).sum();
    }
    normalize(&mut v);
    let mut next = vec![0.0; cols];
    for (j, nj) in next.iter_mut().enumerate() {
        *nj = (0..rows).map(|i| w.get(i, j) * v[i]).sum();
    }
    normalize(&mut next);
    (v, next)
}

/// Deterministic non-degenerate start vector.
fn start_vector(n: usize) -> Vec<f64> {
    let mut u: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * ((i as f64) * 1.618).sin()).collect();
    normalize(&mut u);
    u
}

/// Power-iteration estimate of the largest singular value.
pub fn top_singular_value(w: &Tensor, iterations: usize) -> f64 {
    let mut u = start_vector(w.cols());
    for _ in 0..iterations {
        u = power_iteration_step(w, &u).1;
    }
    let (rows, cols) = w.shape();
    (0..rows)
        .map(|i| {
            let x: f64 = (0..cols).map(|j| w.get(i, j) * u[j]).sum();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Runs `n_power_iterations` on the layer's persistent vector (creating a
/// deterministic one if absent) and returns the normalized weight.
pub fn spectral_normalize(layer: &mut Linear, n_power_iterations: usize) -> Result<Tensor, NnError> {
    if n_power_iterations == 0 {
        return Err(NnError::ZeroPowerIterations);
    }
    let w = layer.masked_weight();
    let mut u = layer
        .spectral_u
        .take()
        .unwrap_or_else(|| start_vector(w.cols()));
    for _ in 0..n_power_iterations {
        u = power_iteration_step(&w, &u).1;
    }
    layer.spectral_u = Some(u);
    Ok(layer.effective_weight())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: Tensor) -> Linear {
        let out = w.cols();
        Linear {
            weight: w,
            bias: Tensor::zeros(1, out),
            mask: None,
            spectral_u: None,
        }
    }

    #[test]
    fn diagonal_matrix_normalizes_to_unit_norm() {
        let mut l = layer(Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]));
        let eff = spectral_normalize(&mut l, 20).unwrap();
        assert!((eff.get(0, 0) - 1.0).abs() < 1e-6);
        assert!((top_singular_value(&eff, 100) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalized_matrix_is_nearly_unchanged() {
        let w = Tensor::from_rows(&[vec![0.6, 0.0], vec![0.0, 1.0]]);
        let mut l = layer(w.clone());
        let eff = spectral_normalize(&mut l, 20).unwrap();
        for (a, b) in eff.data().iter().zip(w.data()) {
            if *b != 0.0 {
                assert!((a / b - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_matrix_stays_finite() {
        let mut l = layer(Tensor::zeros(3, 2));
        let eff = spectral_normalize(&mut l, 5).unwrap();
        assert!(eff.all_finite());
    }

    #[test]
    fn zero_iterations_rejected() {
        let mut l = layer(Tensor::identity(2));
        assert!(spectral_normalize(&mut l, 0).is_err());
    }

    #[test]
    fn random_matrix_matches_svd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::from_vec(8, 8, data.clone());
        let svd = nalgebra::DMatrix::from_row_slice(8, 8, &data).singular_values();
        let top = svd.iter().copied().fold(0.0, f64::max);
        assert!((top_singular_value(&w, 500) - top).abs() < 1e-6 * top);
        let mut l = layer(w);
        let eff = spectral_normalize(&mut l, 500).unwrap();
        let eff_top = nalgebra::DMatrix::from_row_slice(8, 8, eff.data()).singular_values().max();
        assert!((eff_top - 1.0).abs() < 1e-6);
    }
}
