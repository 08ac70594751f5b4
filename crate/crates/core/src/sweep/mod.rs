//! Learning-rate sweeps, per-depth optima and power-law fits.

mod data;
mod fit;
mod train;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{config_pairs, ArchSpec};
use crate::error::{config, domain, Error, Result};
use crate::sensitivity::LossSpec;

pub use data::{synth_classification, DatasetSpec, SynthDataset};
pub use fit::{grid_argmin, optimum_per_depth, wls_fit, DepthPoint, PowerLawFit, VARIANCE_FLOOR};
pub use train::{train_one_epoch, LossStatistic, Optimizer, TrainConfig};

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn lr_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0) || !(hi > lo) || !hi.is_finite() || n < 2 {
        return domain(format!(
            "lr grid needs 0 < lo < hi and n >= 2, got ({lo}, {hi}, {n})"
        ));
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut g: Vec<f64> = (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect();
    g[0] = lo;
    g[n - 1] = hi;
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub arch: ArchSpec,
    pub depths: Vec<usize>,
    pub lr_lo: f64,
    pub lr_hi: f64,
    pub lr_points: usize,
    pub seeds: Vec<u64>,
    pub optimizer: Optimizer,
    pub dataset: DatasetSpec,
    pub batch: usize,
    pub epochs: usize,
    pub statistic: LossStatistic,
    pub precision: Precision,
}

pub const SWEEP_KEYS: &[&str] = &[
    "depths",
    "lr_lo",
    "lr_hi",
    "lr_points",
    "seeds",
    "optimizer",
    "batch",
    "epochs",
    "n_data",
    "classes",
    "separation",
    "data_seed",
    "loss_statistic",
    "precision",
];

impl SweepPlan {
    pub fn new(arch: ArchSpec, depths: Vec<usize>, seeds: Vec<u64>) -> Self {
        let dataset = DatasetSpec::default();
        let mut arch = arch;
        arch.outputs = dataset.classes;
        SweepPlan {
            arch,
            depths,
            lr_lo: 1e-4,
            lr_hi: 1e1,
            lr_points: 20,
            seeds,
            optimizer: Optimizer::Sgd,
            dataset,
            batch: 32,
            epochs: 1,
            statistic: LossStatistic::TailMean,
            precision: Precision::F64,
        }
    }

    /// Architecture keys plus sweep keys in the `key = value` format.
    pub fn parse_config(text: &str) -> Result<Self> {
        let pairs = config_pairs(text)?;
        let (sweep, arch): (Vec<_>, Vec<_>) = pairs
            .into_iter()
            .partition(|(_, k, _)| SWEEP_KEYS.contains(&k.as_str()));
        let mut spec = ArchSpec::default();
        spec.apply(&arch)?;
        spec.fix_kernel_dims();
        let mut plan = SweepPlan::new(spec.clone(), vec![2, 4, 8, 16], vec![0, 1, 2]);
        for (line, k, v) in &sweep {
            plan.set(k, v)
                .map_err(|msg| Error::Parse { line: *line, msg })?;
        }
        plan.arch.outputs = plan.dataset.classes;
        plan.validate()?;
        Ok(plan)
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.trim()
                .parse()
                .map_err(|_| format!("bad value `{v}` for `{k}`"))
        }
        fn list<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<Vec<T>, String> {
            v.split(',').map(|s| num(k, s)).collect()
        }
        match key {
            "depths" => self.depths = list(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "lr_lo" => self.lr_lo = num(key, v)?,
            "lr_hi" => self.lr_hi = num(key, v)?,
            "lr_points" => self.lr_points = num(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "batch" => self.batch = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "n_data" => self.dataset.n = num(key, v)?,
            "classes" => {
                self.dataset.classes = num(key, v)?;
                self.arch.outputs = self.dataset.classes;
            }
            "separation" => self.dataset.separation = num(key, v)?,
            "data_seed" => self.dataset.seed = num(key, v)?,
            "loss_statistic" => self.statistic = v.parse()?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(format!("unknown precision `{v}`")),
                }
            }
            _ => self.arch.set(key, v)?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        lr_grid(self.lr_lo, self.lr_hi, self.lr_points)?;
        if self.depths.is_empty()
            || self.depths.windows(2).any(|w| w[0] >= w[1])
            || self.depths[0] == 0
        {
            return config("depths must be nonempty, positive and strictly increasing");
        }
        if self.seeds.is_empty() {
            return config("at least one seed is required");
        }
        if self.batch == 0 || self.batch > self.dataset.n || self.epochs == 0 {
            return config("need 1 <= batch <= n_data and epochs >= 1");
        }
        if self.arch.outputs != self.dataset.classes {
            return config("model outputs must equal the class count");
        }
        for &d in &self.depths {
            self.arch.with_depth(d)?.validate()?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        lr_grid(self.lr_lo, self.lr_hi, self.lr_points).expect("validated grid")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            loss: LossSpec::cross_entropy(self.dataset.classes),
            batch: self.batch,
            epochs: self.epochs,
            statistic: self.statistic,
        }
    }

    /// Jobs in output order: depth, then seed, then learning rate.
    pub fn jobs(&self) -> Vec<(usize, u64, f64)> {
        let grid = self.grid();
        let mut v = Vec::new();
        for &d in &self.depths {
            for &s in &self.seeds {
                v.extend(grid.iter().map(|&e| (d, s, e)));
            }
        }
        v
    }

    pub fn dataset(&self) -> Result<SynthDataset> {
        let d = &self.dataset;
        synth_classification(
            d.n,
            &self.arch.input_shape(),
            d.classes,
            d.separation,
            d.seed,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub arch: String,
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
    pub eta: f64,
    pub final_loss: f64,
}

pub const CSV_HEADER: &str = "arch,depth,width,seed,eta,final_loss";

impl SweepRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.arch, self.depth, self.width, self.seed, self.eta, self.final_loss
        )
    }

    fn key(&self) -> (String, usize, u64, u64) {
        (self.arch.clone(), self.depth, self.seed, self.eta.to_bits())
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<SweepRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header `{CSV_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::Parse {
            line: i + 1,
            msg: format!("bad {what} in `{line}`"),
        };
        if f.len() != 6 {
            return Err(bad("field count"));
        }
        let loss: f64 = f[5].parse().map_err(|_| bad("final_loss"))?;
        if loss.is_nan() || loss == f64::NEG_INFINITY {
            return Err(bad("final_loss"));
        }
        out.push(SweepRecord {
            arch: f[0].to_string(),
            depth: f[1].parse().map_err(|_| bad("depth"))?,
            width: f[2].parse().map_err(|_| bad("width"))?,
            seed: f[3].parse().map_err(|_| bad("seed"))?,
            eta: f[4].parse().map_err(|_| bad("eta"))?,
            final_loss: loss,
        });
    }
    Ok(out)
}

fn run_job(
    plan: &SweepPlan,
    data: &SynthDataset,
    depth: usize,
    seed: u64,
    eta: f64,
) -> Result<SweepRecord> {
    let spec = plan.arch.with_depth(depth)?;
    let cfg = plan.train_config();
    let loss = match plan.precision {
        Precision::F64 => train_one_epoch::<f64>(&spec, data, eta, &cfg, seed)?,
        Precision::F32 => train_one_epoch::<f32>(&spec, data, eta, &cfg, seed)?,
    };
    Ok(SweepRecord {
        arch: spec.tag(),
        depth,
        width: spec.width_param(),
        seed,
        eta,
        final_loss: loss,
    })
}

/// Runs every (depth, seed, eta) job. With `csv`, records are written in plan
/// order as they finish; rows already present are reused, so an interrupted
/// sweep resumes where it stopped.
pub fn run_sweep(plan: &SweepPlan, csv: Option<&Path>) -> Result<Vec<SweepRecord>> {
    plan.validate()?;
    let data = plan.dataset()?;
    let tag = plan.arch.tag();
    let jobs = plan.jobs();
    let mut done: HashMap<(String, usize, u64, u64), SweepRecord> = HashMap::new();
    let mut writer = None;
    let mut prefix = 0;
    if let Some(path) = csv {
        if path.exists() {
            let old = parse_csv(&std::fs::read_to_string(path)?)?;
            prefix = old
                .iter()
                .zip(&jobs)
                .take_while(|(r, &(d, s, e))| {
                    r.arch == tag && r.depth == d && r.seed == s && r.eta.to_bits() == e.to_bits()
                })
                .count();
            if prefix > 0 {
                log::info!("resuming sweep: {prefix} of {} records present", jobs.len());
            }
            done.extend(old.into_iter().map(|r| (r.key(), r)));
        }
        let mut f = File::create(path)?;
        writeln!(f, "{CSV_HEADER}")?;
        for &(d, s, e) in &jobs[..prefix] {
            writeln!(f, "{}", done[&(tag.clone(), d, s, e.to_bits())].to_csv())?;
        }
        f.flush()?;
        drop(f);
        writer = Some(OpenOptions::new().append(true).open(path)?);
    }
    let mut out = Vec::with_capacity(jobs.len());
    let chunk = 2 * rayon::current_num_threads().max(1);
    for block in jobs.chunks(chunk) {
        let recs: Vec<SweepRecord> = block
            .par_iter()
            .map(
                |&(d, s, e)| match done.get(&(tag.clone(), d, s, e.to_bits())) {
                    Some(r) => Ok(r.clone()),
                    None => run_job(plan, &data, d, s, e),
                },
            )
            .collect::<Result<_>>()?;
        for r in recs {
            if let Some(w) = writer.as_mut() {
                if out.len() >= prefix {
                    writeln!(w, "{}", r.to_csv())?;
                }
            }
            out.push(r);
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
    }
    Ok(out)
}
