use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{domain, Error, Result};
use crate::nncore::Model;
use crate::rng;
use crate::scalar::Scalar;
use crate::sensitivity::{loss_gradient, Batch, LossKind, LossSpec, ParamVector, Targets};

use super::data::SynthDataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::adam()),
            _ => Err(format!("unknown optimizer '{s}' (expected sgd or adam)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossStatistic {
    Last,
    EpochMean,
    #[default]
    TailMean,
}

impl std::str::FromStr for LossStatistic {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "last" => Ok(LossStatistic::Last),
            "epoch_mean" => Ok(LossStatistic::EpochMean),
            "tail_mean" => Ok(LossStatistic::TailMean),
            _ => Err(format!("unknown loss statistic '{s}'")),
        }
    }
}

impl LossStatistic {
    pub fn reduce(&self, losses: &[f64]) -> f64 {
        let n = losses.len();
        let tail = match self {
            LossStatistic::Last => &losses[n - 1..],
            LossStatistic::EpochMean => losses,
            LossStatistic::TailMean => &losses[n - n.div_ceil(4)..],
        };
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub loss: LossSpec,
    pub batch: usize,
    pub epochs: usize,
    pub statistic: LossStatistic,
}

struct Adam<F> {
    m: ParamVector<F>,
    v: ParamVector<F>,
    t: i32,
}

/// Trains a fresh model and returns the reduced training loss, or `inf` on divergence.
pub fn train_one_epoch<F: Scalar>(
    spec: &ArchSpec,
    data: &SynthDataset,
    eta: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    if cfg.batch == 0 || cfg.batch > data.len() {
        return domain(format!(
            "batch size {} must be in 1..={}",
            cfg.batch,
            data.len()
        ));
    }
    if cfg.epochs == 0 || !(eta >= 0.0) {
        return domain("epochs must be >= 1 and eta >= 0");
    }
    if cfg.loss.kind != LossKind::CrossEntropy
        || cfg.loss.output_dim != data.classes
        || spec.outputs != data.classes
    {
        return domain("sweeps train classifiers with cross entropy over the dataset's classes");
    }
    let mut model: Model<F> = Model::build(spec, seed)?;
    let mut adam = match cfg.optimizer {
        Optimizer::Adam { .. } => Some(Adam {
            m: ParamVector::zeros(&model),
            v: ParamVector::zeros(&model),
            t: 0,
        }),
        Optimizer::Sgd => None,
    };
    let mut losses = Vec::new();
    let steps = data.len() / cfg.batch;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::named(seed, "epoch_order", epoch as u64));
        for s in 0..steps {
            let (x, y) = data.batch::<F>(&order[s * cfg.batch..(s + 1) * cfg.batch]);
            let batch = Batch {
                x,
                y: Targets::Classes(y),
            };
            let (l, g) = match loss_gradient(&model, &batch, &cfg.loss) {
                Ok(r) => r,
                Err(Error::Numeric { .. }) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            };
            let l = l.f64();
            if !l.is_finite() {
                return Ok(f64::INFINITY);
            }
            losses.push(l);
            let eta = F::c(eta);
            match (&cfg.optimizer, adam.as_mut()) {
                (Optimizer::Adam { beta1, beta2, eps }, Some(st)) => {
                    st.t += 1;
                    let (b1, b2, e) = (F::c(*beta1), F::c(*beta2), F::c(*eps));
                    let c1 = F::one() - b1.powi(st.t);
                    let c2 = F::one() - b2.powi(st.t);
                    for (i, p) in model.params.iter_mut().enumerate() {
                        let (m, v, g) = (
                            &mut st.m.tensors[i].data,
                            &mut st.v.tensors[i].data,
                            &g.tensors[i].data,
                        );
                        for j in 0..g.len() {
                            m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                            v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                            p.value.data[j] -= eta * (m[j] / c1) / ((v[j] / c2).sqrt() + e);
                        }
                    }
                }
                _ => model.step(-eta, &g),
            }
        }
    }
    Ok(cfg.statistic.reduce(&losses))
}
