//! Maximal-update learning rate and the depth transfer rule.

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{domain, Result};
use crate::scalar::Scalar;
use crate::sensitivity::{
    layer_energy, layer_energy_literal, EnergyConfig, LossSpec, SensitivityReport,
};

pub const DEFAULT_EXPONENT: f64 = -1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaStar {
    pub value: f64,
    pub s_bar_at_one: f64,
    pub stderr: f64,
    #[serde(rename = "L")]
    pub depth: usize,
    pub arch: String,
}

impl EtaStar {
    /// Closed form `S^(-1/2)` with a delta-method standard error.
    pub fn from_s_bar(s_bar: f64, s_stderr: f64, depth: usize, arch: String) -> Result<Self> {
        if !(s_bar > 0.0) || !s_bar.is_finite() {
            return domain(format!("S_bar(1) = {s_bar}; network is degenerate"));
        }
        let value = s_bar.powf(-0.5);
        Ok(EtaStar {
            value,
            s_bar_at_one: s_bar,
            stderr: 0.5 * value / s_bar * s_stderr,
            depth,
            arch,
        })
    }
}

pub fn eta_star_from_report(r: &SensitivityReport, spec: &ArchSpec) -> Result<EtaStar> {
    if r.eta != 1.0 {
        return domain("eta* needs the report at eta = 1");
    }
    EtaStar::from_s_bar(r.s_bar, r.s_bar_stderr, spec.effective_depth(), spec.tag())
}

pub fn solve_eta_star<F: Scalar>(
    spec: &ArchSpec,
    loss: &LossSpec,
    cfg: &EnergyConfig,
) -> Result<EtaStar> {
    eta_star_from_report(&layer_energy::<F>(spec, loss, 1.0, cfg)?, spec)
}

/// Root of the literal one-step `S_bar(eta) = 1` by geometric bisection.
pub fn bisect_eta_star_literal(
    spec: &ArchSpec,
    loss: &LossSpec,
    cfg: &EnergyConfig,
    rel_tol: f64,
) -> Result<f64> {
    let guess = solve_eta_star::<f64>(spec, loss, cfg)?.value;
    let f = |eta: f64| -> Result<f64> {
        Ok(layer_energy_literal::<f64>(spec, loss, eta, cfg)?.s_bar - 1.0)
    };
    let (mut lo, mut hi) = (guess / 2.0, guess * 2.0);
    let (mut flo, mut fhi) = (f(lo)?, f(hi)?);
    let mut tries = 0;
    while flo > 0.0 || fhi < 0.0 {
        tries += 1;
        if tries > 40 {
            return domain("could not bracket literal eta*");
        }
        if flo > 0.0 {
            lo /= 2.0;
            flo = f(lo)?;
        }
        if fhi < 0.0 {
            hi *= 2.0;
            fhi = f(hi)?;
        }
    }
    while hi / lo - 1.0 > rel_tol {
        let mid = (lo * hi).sqrt();
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo * hi).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRule {
    pub eta0: f64,
    pub l0: usize,
    pub exponent: f64,
}

impl TransferRule {
    pub fn new(eta0: f64, l0: usize) -> Result<Self> {
        Self::with_exponent(eta0, l0, DEFAULT_EXPONENT)
    }

    pub fn with_exponent(eta0: f64, l0: usize, exponent: f64) -> Result<Self> {
        if !(eta0 > 0.0) || !eta0.is_finite() || l0 == 0 || !exponent.is_finite() {
            return domain("transfer rule needs eta0 > 0, L0 >= 1 and a finite exponent");
        }
        Ok(TransferRule { eta0, l0, exponent })
    }
}

pub fn transfer_eta(rule: &TransferRule, l: usize) -> Result<f64> {
    if l == 0 {
        return domain("target depth must be >= 1");
    }
    TransferRule::with_exponent(rule.eta0, rule.l0, rule.exponent)?;
    if l == rule.l0 {
        return Ok(rule.eta0);
    }
    Ok(rule.eta0 * (l as f64 / rule.l0 as f64).powf(rule.exponent))
}

pub fn predict_curve(rule: &TransferRule, depths: &[usize]) -> Result<Vec<(usize, f64)>> {
    if depths.is_empty() {
        return domain("no depths given");
    }
    let mut d = depths.to_vec();
    d.sort_unstable();
    d.into_iter()
        .map(|l| Ok((l, transfer_eta(rule, l)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn closed_form() {
        let e = EtaStar::from_s_bar(4.0, 0.0, 3, "mlp".into()).unwrap();
        assert_eq!(e.value, 0.5);
        assert!(matches!(
            EtaStar::from_s_bar(0.0, 0.0, 3, "mlp".into()),
            Err(Error::Domain(_))
        ));
        // S scaled by c^2 gives eta*/c
        let c = 3.0;
        let a = EtaStar::from_s_bar(2.5, 0.0, 1, String::new())
            .unwrap()
            .value;
        let b = EtaStar::from_s_bar(2.5 * c * c, 0.0, 1, String::new())
            .unwrap()
            .value;
        assert!((b - a / c).abs() <= 1e-15 * a);
    }

    #[test]
    fn eta_star_normalizes_energy() {
        let mut spec = ArchSpec::mlp(3, 6);
        spec.input_dim = 4;
        spec.outputs = 2;
        let loss = LossSpec::mse(2, 1.0);
        let cfg = EnergyConfig {
            n_init: 4,
            n_data: 2,
            batch: 8,
            ..Default::default()
        };
        let e = solve_eta_star::<f64>(&spec, &loss, &cfg).unwrap();
        let s = layer_energy::<f64>(&spec, &loss, e.value, &cfg)
            .unwrap()
            .s_bar;
        assert!((s - 1.0).abs() < 1e-9);
        let lit = bisect_eta_star_literal(&spec, &loss, &cfg, 1e-3).unwrap();
        let sl = layer_energy_literal::<f64>(&spec, &loss, lit, &cfg)
            .unwrap()
            .s_bar;
        assert!((sl - 1.0).abs() < 1e-2, "{sl}");
    }

    #[test]
    fn transfer_examples() {
        let r = TransferRule::new(0.1, 4).unwrap();
        assert!((transfer_eta(&r, 16).unwrap() - 0.0125).abs() < 1e-15);
        assert_eq!(transfer_eta(&r, 4).unwrap(), 0.1);
        assert!(transfer_eta(&r, 0).is_err());
        assert!(TransferRule::new(0.0, 4).is_err());
        assert!(TransferRule::new(0.1, 0).is_err());
        let c = predict_curve(&r, &[16, 4]).unwrap();
        assert_eq!(c[0], (4, 0.1));
        assert_eq!(c[1].0, 16);
        assert!(predict_curve(&r, &[]).is_err());
    }

    #[test]
    fn transfer_is_transitive() {
        let r = TransferRule::new(0.3, 2).unwrap();
        let e1 = transfer_eta(&r, 8).unwrap();
        let two = transfer_eta(&TransferRule::new(e1, 8).unwrap(), 32).unwrap();
        let one = transfer_eta(&r, 32).unwrap();
        assert!((two - one).abs() <= 4.0 * f64::EPSILON * one);
    }
}
