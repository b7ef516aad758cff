use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` per coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, theta: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Argument(format!("step h must be positive, got {h}")));
    }
    let mut probe = theta.clone();
    let mut grad = vec![0.0; theta.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + h;
        let plus = f(&probe);
        if !plus.is_finite() {
            return Err(Error::Evaluation { index: i, value: plus });
        }
        probe.data_mut()[i] = original - h;
        let minus = f(&probe);
        if !minus.is_finite() {
            return Err(Error::Evaluation { index: i, value: minus });
        }
        probe.data_mut()[i] = original;
        *g = (plus - minus) / (2.0 * h);
    }
    Ok(Tensor::from_parts(theta.shape().to_vec(), grad))
}

/// Norm-wise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let theta = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|x| x * x).sum(), &theta, 1e-5).unwrap();
        for (gi, ti) in g.data().iter().zip(theta.data()) {
            assert!((gi - 2.0 * ti).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let theta = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = finite_diff_grad(|_| 7.0, &theta, 1e-5).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let theta = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = finite_diff_grad(
            |t| if t.data()[1] > 2.0 { f64::NAN } else { 0.0 },
            &theta,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation { index: 1, .. }));
        assert!(finite_diff_grad(|_| 0.0, &theta, 0.0).is_err());
    }
}
