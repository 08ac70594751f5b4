use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

#[inline]
fn std_cdf<F: Scalar>(x: F) -> F {
    F::c(0.5) * (F::one() + (x * F::c(FRAC_1_SQRT_2)).erf())
}

#[inline]
fn std_pdf<F: Scalar>(x: F) -> F {
    F::c(1.0 / (2.0 * PI).sqrt()) * (-(x * x) * F::c(0.5)).exp()
}

impl Activation {
    #[inline]
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Relu => x.max(F::zero()),
            Activation::Gelu => x * std_cdf(x),
            Activation::Identity => x,
        }
    }

    /// Exact derivative; GELU uses `Phi(x) + x phi(x)`.
    #[inline]
    pub fn deriv<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Gelu => std_cdf(x) + x * std_pdf(x),
            Activation::Identity => F::one(),
        }
    }

    /// Deterministic `q = E[sigma'(Z)^2]` used by initializers.
    pub fn gating_constant(self) -> f64 {
        match self {
            Activation::Relu => 0.5,
            Activation::Identity => 1.0,
            Activation::Gelu => {
                simpson(|z| self.deriv(z).powi(2) * std_pdf(z), -12.0, 12.0, 24_000)
            }
        }
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "identity" | "linear" => Ok(Activation::Identity),
            _ => Err(format!("unknown activation `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte-Carlo estimate of `q = E[sigma'(Z)^2]`. ReLU and identity are exact.
pub fn gating_factor(act: Activation, n_samples: usize, seed: u64) -> Estimate {
    match act {
        Activation::Relu => Estimate {
            mean: 0.5,
            stderr: 0.0,
        },
        Activation::Identity => Estimate {
            mean: 1.0,
            stderr: 0.0,
        },
        Activation::Gelu => {
            let mut r = rng::named(seed, "gating_factor", 0);
            let n = n_samples.max(1);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let d = act.deriv(rng::normal(&mut r)).powi(2);
                s += d;
                s2 += d * d;
            }
            let mean = s / n as f64;
            let var = if n > 1 {
                (s2 - n as f64 * mean * mean) / (n - 1) as f64
            } else {
                0.0
            };
            Estimate {
                mean,
                stderr: (var.max(0.0) / n as f64).sqrt(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.deriv(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn exact_gating_factors() {
        assert_eq!(gating_factor(Activation::Relu, 10, 0).mean, 0.5);
        assert_eq!(gating_factor(Activation::Identity, 10, 0).mean, 1.0);
    }

    #[test]
    fn gelu_gating_factor_near_0456() {
        let e = gating_factor(Activation::Gelu, 1_000_000, 7);
        assert!((e.mean - 0.456).abs() < 1e-3, "{e:?}");
        let q = Activation::Gelu.gating_constant();
        assert!((e.mean - q).abs() < 4.0 * e.stderr, "{e:?} vs {q}");
    }
}
