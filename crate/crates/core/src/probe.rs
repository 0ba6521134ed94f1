//! Evaluation: accuracy, the clean-vs-noisy linear probe, and PCA.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt, CorruptionSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim(
            "accuracy",
            format!("{} predictions for {} labels", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::Usage("accuracy of zero predictions".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// L2-regularized binary logistic regression with an unregularized intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LogisticModel {
    pub fn decision(&self, row: &[f64]) -> f64 {
        self.intercept
            + row
                .iter()
                .zip(&self.weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        (0..x.rows())
            .map(|r| usize::from(self.decision(x.row(r)) > 0.0))
            .collect()
    }

    /// Minimizes `mean logloss + l2 · ‖w‖²` by damped Newton steps.
    pub fn fit(x: &Tensor, y: &[usize], l2: f64) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || y.len() != n {
            return Err(Error::Usage(format!(
                "logistic fit needs matching non-empty data ({n} rows, {} labels)",
                y.len()
            )));
        }
        let p = d + 1;
        // design matrix with a trailing intercept column
        let design = DMatrix::from_fn(n, p, |r, c| if c < d { x.get(r, c) } else { 1.0 });
        let target = DVector::from_iterator(n, y.iter().map(|&v| v as f64));
        let mut theta = DVector::<f64>::zeros(p);
        let reg = |theta: &DVector<f64>| {
            let mut r = theta.clone() * (2.0 * l2);
            r[d] = 0.0;
            r
        };
        let objective = |theta: &DVector<f64>| {
            let z = &design * theta;
            let loss: f64 = z
                .iter()
                .zip(target.iter())
                .map(|(&zi, &yi)| log1p_exp(zi) - yi * zi)
                .sum::<f64>()
                / n as f64;
            let w2: f64 = theta.rows(0, d).norm_squared();
            loss + l2 * w2
        };

        let mut current = objective(&theta);
        for _ in 0..100 {
            let z = &design * &theta;
            let probs = z.map(sigmoid);
            let grad = design.transpose() * (&probs - &target) / n as f64 + reg(&theta);
            let weights = probs.map(|q| q * (1.0 - q) / n as f64);
            let weighted = DMatrix::from_fn(n, p, |r, c| design[(r, c)] * weights[r]);
            let mut hess = design.transpose() * weighted;
            for i in 0..d {
                hess[(i, i)] += 2.0 * l2;
            }
            hess[(d, d)] += 1e-12;
            let step = match hess.clone().cholesky() {
                Some(ch) => ch.solve(&grad),
                None => grad.clone(),
            };
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-10 {
                let cand = &theta - &step * t;
                let val = objective(&cand);
                if val <= current {
                    theta = cand;
                    current = val;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || step.norm() * t < 1e-10 {
                break;
            }
        }
        Ok(Self {
            weights: theta.rows(0, d).iter().copied().collect(),
            intercept: theta[d],
        })
    }
}

fn default_l2() -> f64 {
    1e-3
}

fn default_train_fraction() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub corruption: CorruptionSpec,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Permutation control: shuffle the clean/noisy labels before training.
    #[serde(default)]
    pub shuffle_labels: bool,
}

impl ProbeConfig {
    pub fn new(corruption: CorruptionSpec) -> Self {
        Self {
            corruption,
            l2: default_l2(),
            train_fraction: default_train_fraction(),
            shuffle_labels: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub total: usize,
    pub correct: usize,
}

/// Outcome of the clean-vs-noisy probe. Class 0 is clean, class 1 is noisy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub clean: ClassCounts,
    pub noisy: ClassCounts,
    pub classifier: String,
    pub config: ProbeConfig,
}

/// Trains a linear classifier to tell `encode(x)` from `encode(corrupt(x))`
/// and reports its held-out accuracy. Lower means the representation is
/// less sensitive to the corruption.
pub fn noise_probe<R: Rng + ?Sized>(
    encode: &dyn Fn(&Tensor) -> Result<Tensor>,
    clean: &Tensor,
    config: &ProbeConfig,
    rng: &mut R,
) -> Result<ProbeReport> {
    if clean.rows() == 0 {
        return Err(Error::Usage("noise probe needs a non-empty dataset".into()));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::Config(
            "probe train_fraction must be in (0, 1)".into(),
        ));
    }
    let noisy = corrupt(clean, &config.corruption, rng)?;
    let features = encode(clean)?.vstack(&encode(&noisy)?)?;
    let n = clean.rows();
    let mut labels: Vec<usize> = (0..2 * n).map(|i| usize::from(i >= n)).collect();
    if config.shuffle_labels {
        labels.shuffle(rng);
    }
    let mut order: Vec<usize> = (0..2 * n).collect();
    order.shuffle(rng);
    let n_train = ((2 * n) as f64 * config.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, 2 * n - 1);
    let (train_idx, eval_idx) = order.split_at(n_train);

    let pick = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| labels[i]).collect() };
    let model = LogisticModel::fit(
        &features.select_rows(train_idx),
        &pick(train_idx),
        config.l2,
    )?;
    let eval_y = pick(eval_idx);
    let pred = model.predict(&features.select_rows(eval_idx));

    let mut counts = [
        ClassCounts {
            total: 0,
            correct: 0,
        },
        ClassCounts {
            total: 0,
            correct: 0,
        },
    ];
    for (p, t) in pred.iter().zip(&eval_y) {
        counts[*t].total += 1;
        if p == t {
            counts[*t].correct += 1;
        }
    }
    let [clean_counts, noisy_counts] = counts;
    Ok(ProbeReport {
        accuracy: accuracy(&pred, &eval_y)?,
        train_examples: train_idx.len(),
        eval_examples: eval_idx.len(),
        clean: clean_counts,
        noisy: noisy_counts,
        classifier: "logistic regression (L2, Newton)".into(),
        config: config.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `n x k` coordinates of the centered data.
    pub projections: Tensor,
    /// `k x d`, unit-norm rows.
    pub components: Tensor,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub mean: Tensor,
}

/// Top-`k` principal components from the eigendecomposition of the sample
/// covariance. Each component's largest-magnitude entry is made positive.
pub fn pca_project(x: &Tensor, k: usize) -> Result<Pca> {
    let (n, d) = x.shape();
    if k > d {
        return Err(Error::Usage(format!(
            "{k} components requested from {d} columns"
        )));
    }
    if n < 2 {
        return Err(Error::Usage("PCA needs at least two rows".into()));
    }
    let mean = x.column_means();
    let mut centered = x.clone();
    for r in 0..n {
        for (v, m) in centered.row_mut(r).iter_mut().zip(mean.data()) {
            *v -= m;
        }
    }
    let cov = centered.t_matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    let eig = DMatrix::from_row_slice(d, d, cov.data()).symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Tensor::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    for (row, &i) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(i);
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let norm = v.norm();
        for (c, e) in v.iter().enumerate() {
            components.set(row, c, sign * e / norm);
        }
        explained_variance.push(eig.eigenvalues[i].max(0.0));
    }
    let projections = centered.matmul_t(&components)?;
    Ok(Pca {
        projections,
        components,
        explained_variance,
        mean,
    })
}
