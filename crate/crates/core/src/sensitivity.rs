//! One-step linearized updates, layerwise energies and Jacobian overlaps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{domain, Error, Result};
use crate::nncore::{Forward, Model, ParamKey};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flat parameter-space vector aligned with a model's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<F> {
    pub keys: Vec<ParamKey>,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ParamVector<F> {
    pub fn zeros(model: &Model<F>) -> Self {
        ParamVector {
            keys: model.params.iter().map(|p| p.key).collect(),
            tensors: model.params.iter().map(|p| p.value.zeros_like()).collect(),
        }
    }

    /// The model's current parameter values.
    pub fn of(model: &Model<F>) -> Self {
        ParamVector {
            keys: model.params.iter().map(|p| p.key).collect(),
            tensors: model.params.iter().map(|p| p.value.clone()).collect(),
        }
    }

    /// i.i.d. standard normal entries.
    pub fn random(model: &Model<F>, rng: &mut Rng) -> Self {
        let mut v = Self::zeros(model);
        for t in &mut v.tensors {
            *t = Tensor::randn(&t.shape, 1.0, rng);
        }
        v
    }

    /// Indicator of one scalar parameter.
    pub fn unit(model: &Model<F>, param: usize, entry: usize) -> Self {
        let mut v = Self::zeros(model);
        v.tensors[param].data[entry] = F::one();
        v
    }

    /// Keeps only parameters whose depth unit satisfies `keep`.
    pub fn restrict(mut self, keep: impl Fn(usize) -> bool) -> Self {
        for (k, t) in self.keys.iter().zip(&mut self.tensors) {
            if !keep(k.unit) {
                t.data.iter_mut().for_each(|v| *v = F::zero());
            }
        }
        self
    }

    pub fn check(&self, model: &Model<F>) -> Result<()> {
        let ok = self.keys.len() == model.params.len()
            && self
                .keys
                .iter()
                .zip(&model.params)
                .all(|(k, p)| *k == p.key)
            && self
                .tensors
                .iter()
                .zip(&model.params)
                .all(|(t, p)| t.shape == p.value.shape);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("parameter vector does not match model".into()))
        }
    }

    pub fn dot(&self, other: &Self) -> F {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm(&self) -> F {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, c: F) -> Self {
        ParamVector {
            keys: self.keys.clone(),
            tensors: self.tensors.iter().map(|t| t.scale(c)).collect(),
        }
    }

    pub fn axpy(&mut self, alpha: F, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b);
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Flattened copy in parameter order.
    pub fn flat(&self) -> Vec<F> {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }
}

impl<F: Scalar> Model<F> {
    /// Adds `alpha * dir` to the parameters.
    pub fn step(&mut self, alpha: F, dir: &ParamVector<F>) {
        for (p, t) in self.params.iter_mut().zip(&dir.tensors) {
            p.value.axpy(alpha, t);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub output_dim: usize,
    /// Label variance for MSE.
    pub label_var: f64,
}

impl LossSpec {
    pub fn mse(output_dim: usize, sigma_y: f64) -> Self {
        LossSpec {
            kind: LossKind::Mse,
            output_dim,
            label_var: sigma_y * sigma_y,
        }
    }

    pub fn cross_entropy(classes: usize) -> Self {
        LossSpec {
            kind: LossKind::CrossEntropy,
            output_dim: classes,
            label_var: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 || !(self.label_var >= 0.0) {
            return domain("loss needs output_dim >= 1 and label variance >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets<F> {
    Regression(Tensor<F>),
    Classes(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub x: Tensor<F>,
    pub y: Targets<F>,
}

/// Mean loss over the batch and its gradient with respect to the outputs.
///
/// MSE is `(1/(2M)) |z - y|^2` per sample; cross entropy uses softmax logits.
pub fn loss_and_seed<F: Scalar>(
    out: &Tensor<F>,
    y: &Targets<F>,
    loss: &LossSpec,
) -> Result<(F, Tensor<F>)> {
    let m = loss.output_dim;
    if out.shape.len() != 2 || out.shape[1] != m {
        return Err(Error::Shape(format!(
            "output shape {:?} vs output_dim {m}",
            out.shape
        )));
    }
    let b = out.shape[0];
    let inv_b = F::one() / F::c(b as f64);
    let mut seed = Tensor::zeros(&out.shape);
    let mut total = F::zero();
    match (loss.kind, y) {
        (LossKind::Mse, Targets::Regression(t)) => {
            if t.len() != out.len() {
                return Err(Error::Shape(
                    "regression targets do not match outputs".into(),
                ));
            }
            let inv_m = F::one() / F::c(m as f64);
            for ((s, &z), &yy) in seed.data.iter_mut().zip(&out.data).zip(&t.data) {
                let g = z - yy;
                total += g * g;
                *s = g * inv_m * inv_b;
            }
            total = total * F::c(0.5) * inv_m * inv_b;
        }
        (LossKind::CrossEntropy, Targets::Classes(c)) => {
            if c.len() != b || c.iter().any(|&k| k >= m) {
                return Err(Error::Shape("class labels do not match outputs".into()));
            }
            for (i, &k) in c.iter().enumerate() {
                let row = &out.data[i * m..(i + 1) * m];
                let mx = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
                let z: F = row.iter().map(|&v| (v - mx).exp()).sum();
                total += mx + z.ln() - row[k];
                for j in 0..m {
                    let p = (row[j] - mx).exp() / z;
                    let t = if j == k { F::one() } else { F::zero() };
                    seed.data[i * m + j] = (p - t) * inv_b;
                }
            }
            total = total * inv_b;
        }
        _ => return domain("target kind does not match loss kind"),
    }
    if !total.is_finite() {
        return Err(Error::Numeric {
            depth: 0,
            seed: None,
        });
    }
    Ok((total, seed))
}

pub fn batch_loss<F: Scalar>(model: &Model<F>, batch: &Batch<F>, loss: &LossSpec) -> Result<F> {
    let f = model.record(&batch.x)?;
    Ok(loss_and_seed(f.tape.value(f.output), &batch.y, loss)?.0)
}

fn grads_to_vector<F: Scalar>(model: &Model<F>, grads: Vec<Option<Tensor<F>>>) -> ParamVector<F> {
    let mut v = ParamVector::zeros(model);
    for (t, g) in v.tensors.iter_mut().zip(grads) {
        if let Some(g) = g {
            t.data = g.data;
        }
    }
    v
}

/// Mean-reduced loss gradient over the batch, with the loss value.
pub fn loss_gradient<F: Scalar>(
    model: &Model<F>,
    batch: &Batch<F>,
    loss: &LossSpec,
) -> Result<(F, ParamVector<F>)> {
    let f = model.record(&batch.x)?;
    let (l, seed) = loss_and_seed(f.tape.value(f.output), &batch.y, loss)?;
    let g = f.tape.vjp(&[(f.output, &seed)], model.params.len());
    Ok((l, grads_to_vector(model, g.params)))
}

/// Pull-back of output/unit cotangents into parameter space.
pub fn vjp_params<F: Scalar>(
    model: &Model<F>,
    f: &Forward<F>,
    seeds: &[(crate::nncore::Var, &Tensor<F>)],
) -> ParamVector<F> {
    grads_to_vector(model, f.tape.vjp(seeds, model.params.len()).params)
}

fn tangents<F: Scalar>(f: &Forward<F>, dir: &ParamVector<F>) -> Vec<Tensor<F>> {
    let tan = f.tape.jvp(Some(&dir.tensors), &[]);
    f.units
        .iter()
        .chain(std::iter::once(&f.output))
        .map(|v| {
            tan[v.0]
                .clone()
                .unwrap_or_else(|| f.tape.value(*v).zeros_like())
        })
        .collect()
}

/// Directional derivatives of `z^(1..L)` and the readout (last entry).
pub fn jvp_preactivations<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    dir: &ParamVector<F>,
) -> Result<Vec<Tensor<F>>> {
    dir.check(model)?;
    let f = model.record(x)?;
    Ok(tangents(&f, dir))
}

/// `-eta * JVP(grad)` at `probe`, gradient taken on `batch`; entries for
/// `z^(1..L)` then the readout.
pub fn delta_z_linearized<F: Scalar>(
    model: &Model<F>,
    batch: &Batch<F>,
    probe: &Tensor<F>,
    eta: F,
    loss: &LossSpec,
) -> Result<Vec<Tensor<F>>> {
    if eta < F::zero() {
        return domain("eta must be nonnegative");
    }
    let (_, g) = loss_gradient(model, batch, loss)?;
    let j = jvp_preactivations(model, probe, &g)?;
    Ok(j.into_iter().map(|t| t.scale(-eta)).collect())
}

/// `z(theta - eta grad) - z(theta)` at `probe`.
pub fn delta_z_literal<F: Scalar>(
    model: &Model<F>,
    batch: &Batch<F>,
    probe: &Tensor<F>,
    eta: F,
    loss: &LossSpec,
) -> Result<Vec<Tensor<F>>> {
    let (_, g) = loss_gradient(model, batch, loss)?;
    let before = model.forward(probe)?;
    let mut m2 = model.clone();
    m2.step(-eta, &g);
    let after = m2.forward(probe)?;
    Ok(after
        .units
        .iter()
        .chain(std::iter::once(&after.output))
        .zip(before.units.iter().chain(std::iter::once(&before.output)))
        .map(|(a, b)| {
            let mut d = a.clone();
            d.axpy(-F::one(), b);
            d
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Probe inputs drawn independently of the batch.
    #[default]
    Independent,
    /// Probe on the first batch element.
    InBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub n_init: usize,
    pub n_data: usize,
    pub batch: usize,
    pub n_probe: usize,
    pub probe: ProbeMode,
    pub seed: u64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            n_init: 64,
            n_data: 8,
            batch: 128,
            n_probe: 1,
            probe: ProbeMode::Independent,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub l: usize,
    #[serde(rename = "S")]
    pub s: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub eta: f64,
    #[serde(rename = "B")]
    pub batch: usize,
    pub layers: Vec<LayerEnergy>,
    #[serde(rename = "S_bar")]
    pub s_bar: f64,
    pub n_init: usize,
    pub n_data: usize,
    pub seed: u64,
    /// Standard error of `S_bar` across initializations.
    #[serde(skip)]
    pub s_bar_stderr: f64,
    /// Per-initialization `S_bar` values.
    #[serde(skip)]
    pub per_init: Vec<f64>,
}

/// Standard-normal inputs and labels for the energy estimator.
pub fn gaussian_batch<F: Scalar>(
    spec: &ArchSpec,
    loss: &LossSpec,
    b: usize,
    rng: &mut Rng,
) -> Batch<F> {
    let mut shape = vec![b];
    shape.extend(spec.input_shape());
    let x = Tensor::randn(&shape, 1.0, rng);
    let y = match loss.kind {
        LossKind::Mse => Targets::Regression(Tensor::randn(
            &[b, loss.output_dim],
            loss.label_var.sqrt(),
            rng,
        )),
        LossKind::CrossEntropy => {
            use rand::Rng as _;
            Targets::Classes((0..b).map(|_| rng.gen_range(0..loss.output_dim)).collect())
        }
    };
    Batch { x, y }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Per-initialization energies `E[(1/M_l) sum_a (dz_a)^2]` at `eta`.
fn energies_one_init<F: Scalar>(
    spec: &ArchSpec,
    loss: &LossSpec,
    eta: f64,
    cfg: &EnergyConfig,
    init: usize,
    literal: bool,
) -> Result<Vec<f64>> {
    let iseed = rng::child_seed(cfg.seed, init as u64);
    let model: Model<F> = Model::build(spec, iseed)?;
    let l = spec.effective_depth();
    let mut acc = vec![0.0; l];
    for j in 0..cfg.n_data {
        let mut r = rng::named(iseed, "energy_data", j as u64);
        let batch = gaussian_batch::<F>(spec, loss, cfg.batch, &mut r);
        let probe = match cfg.probe {
            ProbeMode::Independent => gaussian_batch::<F>(spec, loss, cfg.n_probe, &mut r).x,
            ProbeMode::InBatch => batch.x.rows(0, cfg.n_probe.min(cfg.batch)),
        };
        let dz = if literal {
            delta_z_literal(&model, &batch, &probe, F::c(eta), loss)
        } else {
            delta_z_linearized(&model, &batch, &probe, F::c(eta), loss)
        };
        let dz = dz.map_err(|e| match e {
            Error::Numeric { depth, .. } => Error::Numeric {
                depth,
                seed: Some(iseed),
            },
            e => e,
        })?;
        for (a, t) in acc.iter_mut().zip(&dz[..l]) {
            *a += t.mean_sq().f64();
        }
    }
    Ok(acc.into_iter().map(|a| a / cfg.n_data as f64).collect())
}

/// Monte-Carlo estimate of `S_l(eta)` for every depth unit.
pub fn layer_energy<F: Scalar>(
    spec: &ArchSpec,
    loss: &LossSpec,
    eta: f64,
    cfg: &EnergyConfig,
) -> Result<SensitivityReport> {
    energy_report::<F>(spec, loss, eta, cfg, false)
}

/// As [`layer_energy`] but with the literal one-step SGD change.
pub fn layer_energy_literal<F: Scalar>(
    spec: &ArchSpec,
    loss: &LossSpec,
    eta: f64,
    cfg: &EnergyConfig,
) -> Result<SensitivityReport> {
    energy_report::<F>(spec, loss, eta, cfg, true)
}

fn energy_report<F: Scalar>(
    spec: &ArchSpec,
    loss: &LossSpec,
    eta: f64,
    cfg: &EnergyConfig,
    literal: bool,
) -> Result<SensitivityReport> {
    if cfg.n_init == 0 || cfg.n_data == 0 || cfg.batch == 0 || cfg.n_probe == 0 {
        return domain("n_init, n_data, B and n_probe must be >= 1");
    }
    if !(eta >= 0.0) {
        return domain("eta must be nonnegative");
    }
    loss.validate()?;
    spec.validate()?;
    let per: Vec<Vec<f64>> = (0..cfg.n_init)
        .into_par_iter()
        .map(|i| energies_one_init::<F>(spec, loss, eta, cfg, i, literal))
        .collect::<Result<_>>()?;
    let l = spec.effective_depth();
    let layers: Vec<LayerEnergy> = (0..l)
        .map(|k| {
            let col: Vec<f64> = per.iter().map(|p| p[k]).collect();
            let (s, stderr) = mean_se(&col);
            LayerEnergy {
                l: k + 1,
                s,
                stderr,
            }
        })
        .collect();
    let per_init: Vec<f64> = per
        .iter()
        .map(|p| p.iter().sum::<f64>() / l as f64)
        .collect();
    let (_, s_bar_stderr) = mean_se(&per_init);
    let s: Vec<f64> = layers.iter().map(|e| e.s).collect();
    Ok(SensitivityReport {
        eta,
        batch: cfg.batch,
        s_bar: mean_energy(&s)?,
        layers,
        n_init: cfg.n_init,
        n_data: cfg.n_data,
        seed: cfg.seed,
        s_bar_stderr,
        per_init,
    })
}

/// Arithmetic mean of the layer energies.
pub fn mean_energy(s: &[f64]) -> Result<f64> {
    if s.is_empty() {
        return domain("no layer energies");
    }
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

pub fn report_mean_energy(r: &SensitivityReport) -> Result<f64> {
    if r.layers.iter().enumerate().any(|(i, e)| e.l != i + 1) {
        return domain("report is missing layers");
    }
    mean_energy(&r.layers.iter().map(|e| e.s).collect::<Vec<_>>())
}

/// `(1/M_h) sum_a d_mu1 z_a^(h) d_mu2 z_a^(h)`; `h = L + 1` is the readout.
pub fn overlap_t<F: Scalar>(
    model: &Model<F>,
    h: usize,
    mu1: &ParamVector<F>,
    mu2: &ParamVector<F>,
    x: &Tensor<F>,
) -> Result<F> {
    let l = model.depth();
    if h == 0 || h > l + 1 {
        return domain(format!("overlap depth {h} outside 1..={}", l + 1));
    }
    let a = jvp_preactivations(model, x, mu1)?;
    let b = jvp_preactivations(model, x, mu2)?;
    let (a, b) = (&a[h - 1], &b[h - 1]);
    Ok(a.dot(b) / F::c(a.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AbTerms {
    pub l: usize,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub total: f64,
}

/// Rows `d z_a / d theta` of every depth unit and of the readout for a single sample.
pub fn jacobian_rows<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
) -> Result<(Vec<Vec<Vec<F>>>, Vec<F>)> {
    if model.check_input(x)? != 1 {
        return domain("jacobian rows need a single sample");
    }
    let f = model.record(x)?;
    let mut rows = Vec::new();
    for &v in f.units.iter().chain(std::iter::once(&f.output)) {
        let n = f.tape.value(v).len();
        let mut unit = Vec::with_capacity(n);
        for a in 0..n {
            let mut e = f.tape.value(v).zeros_like();
            e.data[a] = F::one();
            unit.push(vjp_params(model, &f, &[(v, &e)]).flat());
        }
        rows.push(unit);
    }
    Ok((rows, f.tape.value(f.output).data.clone()))
}

pub const AB_MAX_PARAMS: usize = 10_000;

/// Label-diagonal term `B` and remainder `A` of `E_y[(dz_a)^2]` for one MSE
/// step on the single sample `x`, averaged over coordinates of each unit.
///
/// Explicit double sums over parameter pairs:
/// `B = s2 eta^2 sum_{m1,m2} d_m1 z_a d_m2 z_a T_out(m1,m2) / M`,
/// `A = eta^2 sum_{m1,m2} d_m1 z_a d_m2 z_a S_out(m1,m2)`.
pub fn ab_decomposition<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    eta: f64,
    loss: &LossSpec,
) -> Result<Vec<AbTerms>> {
    if loss.kind != LossKind::Mse {
        return domain("A/B decomposition is defined for MSE");
    }
    let p = model.n_scalars();
    if p > AB_MAX_PARAMS {
        return Err(Error::Capacity(format!(
            "{p} parameters exceed {AB_MAX_PARAMS}"
        )));
    }
    let (rows, z) = jacobian_rows(model, x)?;
    let (units, out) = rows.split_at(rows.len() - 1);
    let out = &out[0];
    let m = out.len();
    let mf = m as f64;
    // T_out and S_out over all parameter pairs
    let mut t_out = vec![0.0; p * p];
    let mut u = vec![0.0; p];
    for (t, row) in out.iter().enumerate() {
        for m1 in 0..p {
            let r1 = row[m1].f64();
            u[m1] += r1 * z[t].f64() / mf;
            for m2 in 0..p {
                t_out[m1 * p + m2] += r1 * row[m2].f64() / mf;
            }
        }
    }
    let eta2 = eta * eta;
    let mut res = Vec::with_capacity(units.len());
    for (li, unit) in units.iter().enumerate() {
        let (mut sa, mut sb) = (0.0, 0.0);
        for row in unit {
            let r: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            let (mut a, mut b) = (0.0, 0.0);
            for m1 in 0..p {
                if r[m1] == 0.0 {
                    continue;
                }
                for m2 in 0..p {
                    let rr = r[m1] * r[m2];
                    b += rr * t_out[m1 * p + m2];
                    a += rr * u[m1] * u[m2];
                }
            }
            sa += eta2 * a;
            sb += loss.label_var * eta2 * b / mf;
        }
        let n = unit.len() as f64;
        res.push(AbTerms {
            l: li + 1,
            a: sa / n,
            b: sb / n,
            total: (sa + sb) / n,
        });
    }
    Ok(res)
}

/// Same quantities through the output kernel `K_at = <d z_a, d z_t>`.
pub fn ab_terms_kernel<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    eta: f64,
    loss: &LossSpec,
) -> Result<Vec<AbTerms>> {
    let (rows, z) = jacobian_rows(model, x)?;
    let (units, out) = rows.split_at(rows.len() - 1);
    let out = &out[0];
    let mf = out.len() as f64;
    let eta2 = eta * eta;
    Ok(units
        .iter()
        .enumerate()
        .map(|(li, unit)| {
            let (mut sa, mut sb) = (0.0, 0.0);
            for row in unit {
                let k: Vec<f64> = out
                    .iter()
                    .map(|o| crate::tensor::dot(row, o).f64())
                    .collect();
                let c: f64 = k.iter().zip(&z).map(|(a, b)| a * b.f64()).sum();
                sa += eta2 * c * c / (mf * mf);
                sb += loss.label_var * eta2 * k.iter().map(|v| v * v).sum::<f64>() / (mf * mf);
            }
            let n = unit.len() as f64;
            AbTerms {
                l: li + 1,
                a: sa / n,
                b: sb / n,
                total: (sa + sb) / n,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::Activation;

    fn tiny(depth: usize, width: usize) -> ArchSpec {
        let mut s = ArchSpec::mlp(depth, width);
        s.input_dim = 3;
        s.outputs = 2;
        s
    }

    fn sample(spec: &ArchSpec, loss: &LossSpec, b: usize, seed: u64) -> Batch<f64> {
        gaussian_batch(spec, loss, b, &mut rng::stream(seed, 7))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for loss in [LossSpec::mse(2, 0.7), LossSpec::cross_entropy(2)] {
            let spec = tiny(3, 4);
            let model: Model<f64> = Model::build(&spec, 3).unwrap();
            let batch = sample(&spec, &loss, 5, 1);
            let (_, g) = loss_gradient(&model, &batch, &loss).unwrap();
            let dir = ParamVector::random(&model, &mut rng::stream(9, 0));
            let h = 1e-5;
            let mut p = model.clone();
            p.step(h, &dir);
            let mut m = model.clone();
            m.step(-h, &dir);
            let fd = (batch_loss(&p, &batch, &loss).unwrap()
                - batch_loss(&m, &batch, &loss).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g.dot(&dir)).abs() < 1e-6 * (1.0 + fd.abs()),
                "{fd} vs {}",
                g.dot(&dir)
            );
        }
    }

    #[test]
    fn ce_seed_at_zero_logits() {
        let out = Tensor::<f64>::zeros(&[1, 4]);
        let (l, s) = loss_and_seed(
            &out,
            &Targets::Classes(vec![2]),
            &LossSpec::cross_entropy(4),
        )
        .unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert_eq!(s.data, vec![0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn linearized_update_agrees_with_literal_for_small_eta() {
        let spec = tiny(4, 6);
        let loss = LossSpec::mse(2, 1.0);
        let model: Model<f64> = Model::build(&spec, 11).unwrap();
        let batch = sample(&spec, &loss, 4, 2);
        let probe = sample(&spec, &loss, 1, 3).x;
        for eta in [1e-3, 1e-4] {
            let lin = delta_z_linearized(&model, &batch, &probe, eta, &loss).unwrap();
            let lit = delta_z_literal(&model, &batch, &probe, eta, &loss).unwrap();
            for (a, b) in lin.iter().zip(&lit) {
                let mut d = a.clone();
                d.axpy(-1.0, b);
                assert!(d.max_abs() <= 1e-2 * a.max_abs() * (eta / 1e-3) + 1e-14);
            }
        }
    }

    #[test]
    fn energy_scales_quadratically_in_eta() {
        let spec = tiny(3, 5);
        let loss = LossSpec::mse(2, 1.0);
        let cfg = EnergyConfig {
            n_init: 3,
            n_data: 2,
            batch: 4,
            ..Default::default()
        };
        let a = layer_energy::<f64>(&spec, &loss, 0.1, &cfg).unwrap();
        let b = layer_energy::<f64>(&spec, &loss, 0.2, &cfg).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            assert!((y.s / x.s - 4.0).abs() < 1e-9);
        }
        assert!((b.s_bar / a.s_bar - 4.0).abs() < 1e-9);
        let z = layer_energy::<f64>(&spec, &loss, 0.0, &cfg).unwrap();
        assert_eq!(z.s_bar, 0.0);
        assert_eq!(a, layer_energy::<f64>(&spec, &loss, 0.1, &cfg).unwrap());
    }

    #[test]
    fn energy_rejects_bad_config() {
        let spec = tiny(2, 3);
        let loss = LossSpec::mse(2, 1.0);
        let cfg = EnergyConfig {
            n_init: 0,
            ..Default::default()
        };
        assert!(matches!(
            layer_energy::<f64>(&spec, &loss, 0.1, &cfg),
            Err(Error::Domain(_))
        ));
        assert!(matches!(mean_energy(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn ab_double_sum_matches_kernel_and_label_expectation() {
        for act in [Activation::Relu, Activation::Gelu] {
            let mut spec = tiny(3, 3);
            spec.activation = act;
            let sigma = 0.8;
            let loss = LossSpec::mse(2, sigma);
            let model: Model<f64> = Model::build(&spec, 5).unwrap();
            let x = sample(&spec, &loss, 1, 4).x;
            let eta = 0.3;
            let ab = ab_decomposition(&model, &x, eta, &loss).unwrap();
            let kern = ab_terms_kernel(&model, &x, eta, &loss).unwrap();
            // E_y[(c + b.y)^2] = c^2 + s2 |b|^2 from the update with shifted labels
            let at = |y: Vec<f64>| {
                let batch = Batch {
                    x: x.clone(),
                    y: Targets::Regression(Tensor::from_vec(&[1, 2], y).unwrap()),
                };
                delta_z_linearized(&model, &batch, &x, eta, &loss).unwrap()
            };
            let c = at(vec![0.0, 0.0]);
            let b: Vec<_> = (0..2)
                .map(|t| {
                    let mut y = vec![0.0; 2];
                    y[t] = sigma;
                    at(y)
                })
                .collect();
            for (li, (p, k)) in ab.iter().zip(&kern).enumerate() {
                assert!((p.a - k.a).abs() <= 1e-10 * (1.0 + k.a.abs()));
                assert!((p.b - k.b).abs() <= 1e-10 * (1.0 + k.b.abs()));
                let n = c[li].len() as f64;
                let a_bf = c[li].sq_norm() / n;
                let mut b_bf = 0.0;
                for bt in &b {
                    let mut d = bt[li].clone();
                    d.axpy(-1.0, &c[li]);
                    b_bf += d.sq_norm() / n;
                }
                assert!(
                    (p.a - a_bf).abs() <= 1e-9 * (1.0 + a_bf),
                    "A {} vs {a_bf}",
                    p.a
                );
                assert!(
                    (p.b - b_bf).abs() <= 1e-9 * (1.0 + b_bf),
                    "B {} vs {b_bf}",
                    p.b
                );
            }
        }
    }

    #[test]
    fn ab_capacity_limit() {
        let spec = tiny(3, 80);
        let model: Model<f64> = Model::build(&spec, 0).unwrap();
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            ab_decomposition(&model, &x, 0.1, &LossSpec::mse(2, 1.0)),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn overlap_is_symmetric_and_bounded() {
        let spec = tiny(3, 4);
        let model: Model<f64> = Model::build(&spec, 2).unwrap();
        let x = Tensor::randn(&[1, 3], 1.0, &mut rng::stream(1, 1));
        let u = ParamVector::random(&model, &mut rng::stream(2, 0));
        let v = ParamVector::random(&model, &mut rng::stream(3, 0));
        for h in 1..=4 {
            let a = overlap_t(&model, h, &u, &v, &x).unwrap();
            assert_eq!(a, overlap_t(&model, h, &v, &u, &x).unwrap());
            let uu = overlap_t(&model, h, &u, &u, &x).unwrap();
            let vv = overlap_t(&model, h, &v, &v, &x).unwrap();
            assert!(a * a <= uu * vv * (1.0 + 1e-12));
        }
        assert!(overlap_t(&model, 5, &u, &v, &x).is_err());
    }
}
