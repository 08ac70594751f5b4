use crate::error::{domain, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fan-in of a weight stored as `[out, ...inputs]`.
pub fn fan_in(shape: &[usize]) -> usize {
    if shape.len() < 2 {
        return 0;
    }
    shape[1..].iter().product()
}

pub fn init_gaussian<F: Scalar>(
    shape: &[usize],
    variance: f64,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    if !(variance.is_finite() && variance >= 0.0) {
        return domain(format!("invalid init variance {variance}"));
    }
    Ok(Tensor::randn(shape, variance.sqrt(), rng))
}

/// `N(0, 1/(q fan_in))`.
pub fn init_fan_in<F: Scalar>(shape: &[usize], q: f64, rng: &mut Rng) -> Result<Tensor<F>> {
    init_residual(shape, q, 1, rng)
}

/// `N(0, 1/(q K fan_in))`.
pub fn init_residual<F: Scalar>(
    shape: &[usize],
    q: f64,
    k: usize,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    let n = fan_in(shape);
    if n == 0 {
        return domain(format!("zero fan-in for shape {shape:?}"));
    }
    if !(q > 0.0) || k == 0 {
        return domain(format!("need q > 0 and K >= 1, got q={q}, K={k}"));
    }
    init_gaussian(shape, 1.0 / (q * k as f64 * n as f64), rng)
}
