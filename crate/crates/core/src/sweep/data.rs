use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub inputs: Tensor<f64>,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub classes: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n: 1024,
            classes: 10,
            separation: 4.0,
            seed: 0,
        }
    }
}

/// Gaussian clusters around random orthonormal means scaled to pairwise
/// distance `separation`, unit noise, balanced labels, shuffled.
pub fn synth_classification(
    n: usize,
    shape: &[usize],
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<SynthDataset> {
    let dim: usize = shape.iter().product();
    if classes < 2 || n < classes {
        return domain(format!("need n >= C >= 2, got n={n}, C={classes}"));
    }
    if dim < classes {
        return domain(format!(
            "input dimension {dim} cannot hold {classes} orthogonal class means"
        ));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return domain("separation must be finite and nonnegative");
    }
    let mut r = rng::named(seed, "synth_means", 0);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while means.len() < classes {
        let mut v = rng::normals(&mut r, dim);
        for m in &means {
            let d: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(m).for_each(|(a, b)| *a -= d * b);
        }
        let nrm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nrm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= nrm);
            means.push(v);
        }
    }
    let scale = separation / std::f64::consts::SQRT_2;
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng::named(seed, "synth_order", 0));
    let mut noise = rng::named(seed, "synth_noise", 0);
    let mut data = Vec::with_capacity(n * dim);
    for &c in &labels {
        for j in 0..dim {
            data.push(scale * means[c][j] + rng::normal(&mut noise));
        }
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Ok(SynthDataset {
        inputs: Tensor::from_vec(&full, data)?,
        labels,
        seed,
        classes,
    })
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    pub fn batch<F: Scalar>(&self, idx: &[usize]) -> (Tensor<F>, Vec<usize>) {
        (
            self.inputs.select(idx).cast(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}
