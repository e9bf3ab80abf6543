use super::{Tape, Tensor, Var};

/// Central finite-difference gradient of a plain scalar function.
pub fn central_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the maximum over all parameter coordinates of
/// `|analytic - fd| / (|analytic| + |fd| + 1e-12)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    assert!(eps > 0.0, "grad_check needs eps > 0");
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out).expect("grad_check function must return a scalar");
        vars.iter().map(|v| grads.get(*v)).collect()
    };

    let eval = |ps: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (k, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let orig = p.data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe);
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe);
            probe[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let err = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        let a = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let x = Tensor::column_vector(vec![0.3, -1.2]);
        let err = grad_check(
            |tape, v| {
                let a = tape.constant(a.clone());
                v[0].t().matmul(a).matmul(v[0])
            },
            &[x],
            1e-4,
        );
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::row_vector(vec![1.0, 2.0, 3.0]);
        let err = grad_check(
            |tape, _| tape.constant(Tensor::scalar(4.0)),
            &[x],
            1e-5,
        );
        assert_eq!(err, 0.0);
    }

    #[test]
    fn plain_central_difference() {
        let g = central_difference_gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
