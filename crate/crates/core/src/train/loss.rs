use ndarray::{ArrayView, Dimension, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check<T, D: Dimension>(actual: &ArrayView<'_, T, D>, predicted: &ArrayView<'_, T, D>) -> Result<()> {
    if actual.shape() != predicted.shape() {
        return Err(Error::shape(
            "metric operands",
            format!("{:?}", actual.shape()),
            format!("{:?}", predicted.shape()),
        ));
    }
    if actual.is_empty() {
        return Err(Error::Config("metrics need at least one element".into()));
    }
    Ok(())
}

/// Sums of squared and absolute differences, accumulated in `f64`.
pub fn error_sums<T: Scalar, D: Dimension>(actual: ArrayView<'_, T, D>, predicted: ArrayView<'_, T, D>) -> (f64, f64) {
    let mut sq = 0.0;
    let mut abs = 0.0;
    Zip::from(&actual).and(&predicted).for_each(|&a, &p| {
        let d = a.as_f64() - p.as_f64();
        sq += d * d;
        abs += d.abs();
    });
    (sq, abs)
}

/// Mean squared error over all elements.
pub fn mse<T: Scalar, D: Dimension>(actual: ArrayView<'_, T, D>, predicted: ArrayView<'_, T, D>) -> Result<f64> {
    check(&actual, &predicted)?;
    Ok(error_sums(actual.view(), predicted.view()).0 / actual.len() as f64)
}

/// Mean absolute error over all elements.
pub fn mae<T: Scalar, D: Dimension>(actual: ArrayView<'_, T, D>, predicted: ArrayView<'_, T, D>) -> Result<f64> {
    check(&actual, &predicted)?;
    Ok(error_sums(actual.view(), predicted.view()).1 / actual.len() as f64)
}
