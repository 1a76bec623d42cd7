use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient estimate `(f(x + h·e) − f(x − h·e)) / 2h`
/// for every element of `x`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, step: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Invalid(format!("finite-difference step {step} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + step);
        let plus = f(&probe)?;
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - step);
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        grad.push(T::from_f64((plus - minus) / (2.0 * step)));
    }
    Ok(Tensor::from_parts(x.dims(), grad))
}

/// Elementwise `|a − b| / max(|a|, |b|, floor)`, maximised over the tensor.
///
/// `floor` keeps entries that are zero in both tensors from dividing by
/// zero; it should sit well below the gradient magnitudes being compared.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    assert_eq!(a.dims(), b.dims(), "relative_error on mismatched dims");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new([1, 1, 1, 2], vec![1.0f64, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-3).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-4);
        assert!((g.data()[1] - 4.0).abs() < 1e-4);
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        let x = Tensor::new([1, 1, 1, 3], vec![0.5f64, -1.0, 3.0]).unwrap();
        let f = |t: &Tensor<f64>| Ok(3.0 * t.data()[0] - 2.0 * t.data()[1] + 0.25 * t.data()[2]);
        for step in [1e-1, 1e-3, 1.0] {
            let g = finite_diff_grad(f, &x, step).unwrap();
            assert!((g.data()[0] - 3.0).abs() < 1e-12);
            assert!((g.data()[1] + 2.0).abs() < 1e-12);
            assert!((g.data()[2] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn propagates_failures() {
        let x = Tensor::<f64>::zeros([1, 1, 1, 1]);
        assert!(finite_diff_grad(|_| Err(Error::Invalid("boom".into())), &x, 1e-3).is_err());
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-3).is_err());
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
