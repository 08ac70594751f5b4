use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

use super::SweepRecord;

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthPoint {
    #[serde(rename = "L")]
    pub depth: usize,
    pub mean_log_eta: f64,
    pub var: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub beta0: f64,
    pub stderr_alpha: f64,
    pub ci95: [f64; 2],
    pub r2: f64,
    pub points: Vec<DepthPoint>,
    pub weights: Vec<f64>,
}

/// Grid argmin of the loss; ties go to the smallest eta. `None` if every loss is infinite.
pub fn grid_argmin(rows: &[(f64, f64)]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(eta, loss) in rows {
        if !loss.is_finite() {
            continue;
        }
        best = match best {
            Some((be, bl)) if bl < loss || (bl == loss && be <= eta) => Some((be, bl)),
            _ => Some((eta, loss)),
        };
    }
    best.map(|b| b.0)
}

/// Per-seed argmin, then mean and unbiased variance of log10 eta* per depth.
/// Depths without any usable seed are dropped with a warning.
pub fn optimum_per_depth(records: &[SweepRecord]) -> Vec<DepthPoint> {
    let mut cells: BTreeMap<(usize, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.depth, r.seed))
            .or_default()
            .push((r.eta, r.final_loss));
    }
    let mut per_depth: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ((depth, seed), rows) in cells {
        let entry = per_depth.entry(depth).or_default();
        match grid_argmin(&rows) {
            Some(eta) => entry.push(eta.log10()),
            None => log::warn!("depth {depth} seed {seed}: every learning rate diverged"),
        }
    }
    per_depth
        .into_iter()
        .filter_map(|(depth, v)| {
            if v.is_empty() {
                log::warn!("depth {depth} has no valid seeds; excluded from the fit");
                return None;
            }
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            Some(DepthPoint {
                depth,
                mean_log_eta: mean,
                var,
                n,
            })
        })
        .collect()
}

/// Weighted least squares of mean log10 eta* on log10 L with weights 1/max(var, floor).
pub fn wls_fit(points: &[DepthPoint]) -> Result<PowerLawFit> {
    let mut distinct: Vec<usize> = points.iter().map(|p| p.depth).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 || distinct[0] == 0 {
        return domain("power-law fit needs at least two distinct positive depths");
    }
    if points
        .iter()
        .any(|p| !p.mean_log_eta.is_finite() || !(p.var >= 0.0))
    {
        return domain("fit points must be finite with nonnegative variance");
    }
    let w: Vec<f64> = points
        .iter()
        .map(|p| 1.0 / p.var.max(VARIANCE_FLOOR))
        .collect();
    let x: Vec<f64> = points.iter().map(|p| (p.depth as f64).log10()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean_log_eta).collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(w, x)| w * (x - xm).powi(2)).sum();
    let sxy: f64 = (0..x.len()).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    let alpha = sxy / sxx;
    let beta0 = ym - alpha * xm;
    let rss: f64 = (0..x.len())
        .map(|i| w[i] * (y[i] - beta0 - alpha * x[i]).powi(2))
        .sum();
    let tss: f64 = (0..x.len()).map(|i| w[i] * (y[i] - ym).powi(2)).sum();
    let k = distinct.len();
    // residual scale needs spare degrees of freedom; with two depths fall back to the known-variance form
    let se = if k > 2 {
        (rss / (points.len() as f64 - 2.0) / sxx).sqrt()
    } else {
        (1.0 / sxx).sqrt()
    };
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    Ok(PowerLawFit {
        alpha,
        beta0,
        stderr_alpha: se,
        ci95: [alpha - 1.96 * se, alpha + 1.96 * se],
        r2,
        points: points.to_vec(),
        weights: w,
    })
}
