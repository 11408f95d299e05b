use crate::error::{CladError, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Central-difference gradient of a scalar-valued `f` at `at`.
pub fn finite_diff_grad<S, F>(mut f: F, at: &Tensor<S>, h: f64) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> Result<Tensor<S>>,
{
    if !(h > 0.0) {
        return Err(CladError::usage("finite-difference step must be positive"));
    }
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.numel());
    let eval = |f: &mut F, t: &Tensor<S>| -> Result<f64> {
        let out = f(t)?;
        if out.numel() != 1 {
            return Err(CladError::usage(format!(
                "finite_diff_grad: function returned {} elements, expected a scalar",
                out.numel()
            )));
        }
        Ok(out.data()[0].as_f64())
    };
    for i in 0..at.numel() {
        let x = at.data()[i];
        probe.data_mut()[i] = S::lit(x.as_f64() + h);
        let plus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = S::lit(x.as_f64() - h);
        let minus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = x;
        grad.push(S::lit((plus - minus) / (2.0 * h)));
    }
    Tensor::new(at.shape().to_vec(), grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, falling back to the absolute difference
/// when both norms are below `1e-12`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on unequal lengths");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_squares(t: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(Tensor::scalar(t.data().iter().map(|x| x * x).sum()))
    }

    #[test]
    fn quadratic_gradient() {
        let at = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(sum_squares, &at, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let at = Tensor::vector(vec![0.3, -1.0, 5.0]);
        let g = finite_diff_grad(|_| Ok(Tensor::scalar(7.0)), &at, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let at = Tensor::vector(vec![1.0f64]);
        let err = finite_diff_grad(|t| Ok(t.clone().reshape(&[1]).unwrap()), &at, 1e-4);
        // a one-element vector is still a scalar value
        assert!(err.is_ok());
        let err = finite_diff_grad(|_| Ok(Tensor::<f64>::zeros(&[2])), &at, 1e-4);
        assert!(matches!(err, Err(CladError::Usage(_))));
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let at = Tensor::vector(vec![1.0f64]);
        assert!(finite_diff_grad(sum_squares, &at, 0.0).is_err());
    }
}
