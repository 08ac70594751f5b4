use crate::error::{domain, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn moments<F: Scalar>(x: &[F]) -> (F, F) {
    let d = F::c(x.len() as f64);
    let mu = x.iter().copied().sum::<F>() / d;
    let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / d;
    (mu, var)
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn layernorm_forward<F: Scalar>(x: &[F], gamma: &[F], beta: &[F], eps: F) -> Vec<F> {
    let (mu, var) = moments(x);
    let s = (var + eps).sqrt();
    x.iter()
        .zip(gamma)
        .zip(beta)
        .map(|((&v, &g), &b)| g * (v - mu) / s + b)
        .collect()
}

/// `diag(gamma) (1/s) (I - 11^T/d - (Px)(Px)^T/(d s^2))` as a `[d, d]` tensor.
pub fn layernorm_jacobian<F: Scalar>(x: &[F], gamma: &[F], eps: F) -> Result<Tensor<F>> {
    let d = x.len();
    if d == 0 || gamma.len() != d {
        return domain("layernorm input and gamma lengths differ or are empty");
    }
    let (mu, var) = moments(x);
    let s2 = var + eps;
    if !(s2 > F::zero()) {
        return domain("singular layernorm: eps = 0 with constant input");
    }
    let s = s2.sqrt();
    let dn = F::c(d as f64);
    let px: Vec<F> = x.iter().map(|&v| v - mu).collect();
    let mut j = Tensor::zeros(&[d, d]);
    for a in 0..d {
        for b in 0..d {
            let id = if a == b { F::one() } else { F::zero() };
            j.data[a * d + b] = gamma[a] / s * (id - F::one() / dn - px[a] * px[b] / (dn * s2));
        }
    }
    Ok(j)
}

/// Spectral norm by power iteration on `J^T J`, stopping at relative change `tol`.
pub fn spectral_norm<F: Scalar>(j: &Tensor<F>, tol: f64, max_iter: usize) -> F {
    let (m, n) = (j.shape[0], j.shape[1]);
    let mut v: Vec<F> = (0..n)
        .map(|i| F::c(1.0 + 0.1 * ((i * 7919) % 13) as f64))
        .collect();
    let mut lam = F::zero();
    for _ in 0..max_iter {
        let nv = v.iter().map(|&a| a * a).sum::<F>().sqrt();
        if nv.is_zero() {
            return F::zero();
        }
        v.iter_mut().for_each(|a| *a /= nv);
        let jv: Vec<F> = (0..m)
            .map(|r| (0..n).map(|c| j.data[r * n + c] * v[c]).sum())
            .collect();
        let w: Vec<F> = (0..n)
            .map(|c| (0..m).map(|r| j.data[r * n + c] * jv[r]).sum())
            .collect();
        let next = w.iter().zip(&v).map(|(&a, &b)| a * b).sum::<F>();
        let done = (next - lam).abs() <= F::c(tol) * next.abs().max(F::c(1e-300));
        lam = next;
        v = w;
        if done {
            break;
        }
    }
    lam.max(F::zero()).sqrt()
}
