//! Kernels, Gram matrices and maximum mean discrepancy.
//!
//! Every statistic here comes in two forms: a differentiable one that records
//! onto a [`Tape`] (used as a training penalty or objective) and a plain
//! value form that builds a throwaway tape and clamps roundoff below zero.
//!
//! The two-sample statistic is the biased V-statistic
//!
//! ```text
//! MMD(X, Y) = 1/N² ΣΣ k(x, x') + 1/M² ΣΣ k(y, y') − 2/(NM) ΣΣ k(x, y)
//! ```
//!
//! which equals `‖mean φ(X) − mean φ(Y)‖²` for the kernel's feature map φ.
//! The multi-domain form sums, over domains, the squared distance between
//! each domain's mean embedding and the pooled mean embedding.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel family. The Gaussian kernel is `exp(−‖a − b‖² / σ²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Linear {},
    Gaussian { bandwidth: f64 },
}

impl Kernel {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        let k = Kernel::Gaussian { bandwidth };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Kernel::Gaussian { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => {
                Err(Error::Config(format!(
                    "gaussian bandwidth must be positive, got {bandwidth}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear {} => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Gaussian { bandwidth } => {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d / (bandwidth * bandwidth)).exp()
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Linear {} => "linear",
            Kernel::Gaussian { .. } => "gaussian",
        }
    }
}

/// Per-row domain assignment for a batch of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainLabels {
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl DomainLabels {
    /// `labels[i]` is the domain of row `i`, in `0..num_domains`. Every
    /// domain must own at least one row.
    pub fn new(labels: Vec<usize>, num_domains: usize) -> Result<Self> {
        if num_domains == 0 {
            return Err(Error::Usage("at least one domain is required".into()));
        }
        let mut counts = vec![0usize; num_domains];
        for (i, &d) in labels.iter().enumerate() {
            if d >= num_domains {
                return Err(Error::Data(format!(
                    "row {i} has domain {d}, but only {num_domains} domains exist"
                )));
            }
            counts[d] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Usage(format!("domain {empty} has no samples")));
        }
        Ok(Self { labels, counts })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_domains(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.labels.len()
    }

    /// `N x S` matrix with entry `1[d_i = s] / N_s − 1 / N`; the multi-domain
    /// statistic is `Σ_s w_sᵀ K w_s` over its columns.
    fn deviation_weights(&self) -> Tensor {
        let n = self.total() as f64;
        let s = self.num_domains();
        let mut w = Tensor::filled(self.total(), s, -1.0 / n);
        for (i, &d) in self.labels.iter().enumerate() {
            let v = w.get(i, d) + 1.0 / self.counts[d] as f64;
            w.set(i, d, v);
        }
        w
    }
}

/// Samples together with their domain labels.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub samples: Tensor,
    pub domains: DomainLabels,
}

impl DomainBatch {
    pub fn new(samples: Tensor, domains: DomainLabels) -> Result<Self> {
        if samples.rows() != domains.total() {
            return Err(Error::dim(
                "domain_batch",
                format!("{} rows, {} labels", samples.rows(), domains.total()),
            ));
        }
        Ok(Self { samples, domains })
    }
}

fn check_batches(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Usage(format!("{op} needs non-empty sample batches")));
    }
    if a.cols() != b.cols() {
        return Err(Error::dim(
            op,
            format!("{} vs {} columns", a.cols(), b.cols()),
        ));
    }
    Ok(())
}

/// Differentiable Gram matrix, entry `(i, j) = k(a_i, b_j)`.
pub fn gram_node(tape: &mut Tape, kernel: &Kernel, a: NodeId, b: NodeId) -> Result<NodeId> {
    kernel.validate()?;
    let (ca, cb) = (tape.value(a).cols(), tape.value(b).cols());
    if ca != cb {
        return Err(Error::dim("gram", format!("{ca} vs {cb} columns")));
    }
    match *kernel {
        Kernel::Linear {} => {
            let bt = tape.transpose(b)?;
            tape.matmul(a, bt)
        }
        Kernel::Gaussian { bandwidth } => {
            let d = tape.sq_dists(a, b)?;
            let scaled = tape.scale(d, -1.0 / (bandwidth * bandwidth))?;
            tape.exp(scaled)
        }
    }
}

pub fn gram(kernel: &Kernel, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    kernel.validate()?;
    if a.cols() != b.cols() {
        return Err(Error::dim(
            "gram",
            format!("{} vs {} columns", a.cols(), b.cols()),
        ));
    }
    match *kernel {
        Kernel::Linear {} => a.matmul_t(b),
        Kernel::Gaussian { bandwidth } => {
            let s = -1.0 / (bandwidth * bandwidth);
            Ok(a.pairwise_sq_dists(b)?.map(|d| (d * s).exp()))
        }
    }
}

/// Lexicographic order on (shape, values), used to fix the argument order of
/// the cross term so that `mmd(x, y)` and `mmd(y, x)` are bitwise equal.
fn precedes(a: &Tensor, b: &Tensor) -> bool {
    let by_shape = a.shape().cmp(&b.shape());
    let ord = by_shape.then_with(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    ord.is_le()
}

/// Differentiable biased MMD between the rows of `x` and the rows of `y`.
///
/// The returned node is not clamped, so gradients flow through the raw value
/// even when roundoff pushes it slightly below zero.
pub fn mmd_biased_node(tape: &mut Tape, kernel: &Kernel, x: NodeId, y: NodeId) -> Result<NodeId> {
    check_batches("mmd_biased", tape.value(x), tape.value(y))?;
    let kxx = gram_node(tape, kernel, x, x)?;
    let kyy = gram_node(tape, kernel, y, y)?;
    let (first, second) = if precedes(tape.value(x), tape.value(y)) {
        (x, y)
    } else {
        (y, x)
    };
    let kxy = gram_node(tape, kernel, first, second)?;
    let txx = tape.mean(kxx)?;
    let tyy = tape.mean(kyy)?;
    let txy = tape.mean(kxy)?;
    let within = tape.add(txx, tyy)?;
    let cross = tape.scale(txy, -2.0)?;
    tape.add(within, cross)
}

/// Biased MMD, clamped at zero.
pub fn mmd_biased(kernel: &Kernel, x: &Tensor, y: &Tensor) -> Result<f64> {
    check_batches("mmd_biased", x, y)?;
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone())?;
    let yn = tape.leaf(y.clone())?;
    let out = mmd_biased_node(&mut tape, kernel, xn, yn)?;
    Ok(tape.value(out).item()?.max(0.0))
}

/// Differentiable multi-domain MMD of the rows of `h`, grouped by `domains`.
pub fn multi_domain_mmd_node(
    tape: &mut Tape,
    kernel: &Kernel,
    h: NodeId,
    domains: &DomainLabels,
) -> Result<NodeId> {
    let rows = tape.value(h).rows();
    if rows != domains.total() {
        return Err(Error::dim(
            "multi_domain_mmd",
            format!("{rows} rows, {} domain labels", domains.total()),
        ));
    }
    let k = gram_node(tape, kernel, h, h)?;
    let w = tape.leaf(domains.deviation_weights())?;
    let kw = tape.matmul(k, w)?;
    let terms = tape.mul(kw, w)?;
    tape.sum(terms)
}

/// Multi-domain MMD, clamped at zero.
pub fn multi_domain_mmd(kernel: &Kernel, batch: &DomainBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let h = tape.leaf(batch.samples.clone())?;
    let out = multi_domain_mmd_node(&mut tape, kernel, h, &batch.domains)?;
    Ok(tape.value(out).item()?.max(0.0))
}

/// Gaussian bandwidth from the pooled sample: `σ²` is the median of the
/// non-zero pairwise squared distances. Falls back to `σ = 1` when every
/// pair coincides.
pub fn median_heuristic_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64> {
    let pooled = x.vstack(y)?;
    if pooled.rows() < 2 {
        return Err(Error::Usage(
            "median heuristic needs at least two samples".into(),
        ));
    }
    let mut d2 = Vec::with_capacity(pooled.rows() * (pooled.rows() - 1) / 2);
    for i in 0..pooled.rows() {
        for j in i + 1..pooled.rows() {
            let d: f64 = pooled
                .row(i)
                .iter()
                .zip(pooled.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d > 0.0 {
                d2.push(d);
            }
        }
    }
    if d2.is_empty() {
        return Ok(1.0);
    }
    d2.sort_by(f64::total_cmp);
    let mid = d2.len() / 2;
    let median = if d2.len() % 2 == 1 {
        d2[mid]
    } else {
        0.5 * (d2[mid - 1] + d2[mid])
    };
    Ok(median.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Statistic of the split `(first n_x pooled indices, rest)` from a pooled Gram matrix.
fn split_statistic(k: &Tensor, order: &[usize], n_x: usize) -> f64 {
    let n = order.len();
    let n_y = n - n_x;
    let mut w = vec![0.0; n];
    for (pos, &i) in order.iter().enumerate() {
        w[i] = if pos < n_x {
            1.0 / n_x as f64
        } else {
            -1.0 / n_y as f64
        };
    }
    let mut total = 0.0;
    for i in 0..n {
        let row = k.row(i);
        let inner: f64 = row.iter().zip(&w).map(|(kij, wj)| kij * wj).sum();
        total += w[i] * inner;
    }
    total.max(0.0)
}

/// Permutation two-sample test on the biased MMD.
///
/// The p-value is `(1 + #{permuted ≥ observed}) / (permutations + 1)`.
/// Permutations are drawn sequentially from `rng` and then scored in
/// parallel, so the result depends only on the seed.
pub fn permutation_two_sample_test<R: Rng + ?Sized>(
    kernel: &Kernel,
    x: &Tensor,
    y: &Tensor,
    permutations: usize,
    rng: &mut R,
) -> Result<TwoSampleResult> {
    check_batches("permutation_two_sample_test", x, y)?;
    if permutations == 0 {
        return Err(Error::Usage("at least one permutation is required".into()));
    }
    let pooled = x.vstack(y)?;
    let k = gram(kernel, &pooled, &pooled)?;
    let n = pooled.rows();
    let identity: Vec<usize> = (0..n).collect();
    let observed = mmd_biased(kernel, x, y)?;

    let orders: Vec<Vec<usize>> = (0..permutations)
        .map(|_| {
            let mut o = identity.clone();
            o.shuffle(rng);
            o
        })
        .collect();
    let tol = 1e-12 * (1.0 + observed.abs());
    let exceed = orders
        .par_iter()
        .filter(|o| split_statistic(&k, o, x.rows()) >= observed - tol)
        .count();
    Ok(TwoSampleResult {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (permutations + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn linear_gram_of_orthonormal_rows() {
        let i2 = Tensor::identity(2);
        assert_eq!(gram(&Kernel::Linear {}, &i2, &i2).unwrap(), i2);
    }

    #[test]
    fn gaussian_gram_has_unit_diagonal_and_is_psd() {
        let mut rng = stream(1, "t");
        let a = random(12, 3, &mut rng);
        let k = gram(&Kernel::gaussian(0.8).unwrap(), &a, &a).unwrap();
        for i in 0..12 {
            assert_eq!(k.get(i, i), 1.0);
        }
        assert_eq!(k, k.transpose());
        let m = nalgebra::DMatrix::from_row_slice(12, 12, k.data());
        let eig = m.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10));
    }

    #[test]
    fn gram_column_mismatch() {
        let r = gram(
            &Kernel::Linear {},
            &Tensor::zeros(2, 3),
            &Tensor::zeros(2, 2),
        );
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn closed_forms() {
        let x = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[[0.0, 1.0], [0.0, 1.0]]).unwrap();
        assert!((mmd_biased(&Kernel::Linear {}, &x, &y).unwrap() - 2.0).abs() < 1e-12);

        let g = Kernel::gaussian(1.0).unwrap();
        let v = mmd_biased(&g, &Tensor::scalar(0.0), &Tensor::scalar(1.0)).unwrap();
        assert!((v - (2.0 - 2.0 * (-1f64).exp())).abs() < 1e-12);

        let mut rng = stream(2, "t");
        let a = random(6, 3, &mut rng);
        let shuffled = a.select_rows(&[3, 1, 5, 0, 4, 2]);
        assert!(mmd_biased(&g, &a, &shuffled).unwrap() <= 1e-12);
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let r = mmd_biased(
            &Kernel::Linear {},
            &Tensor::zeros(0, 2),
            &Tensor::zeros(3, 2),
        );
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn single_domain_and_identical_domains_vanish() {
        let mut rng = stream(3, "t");
        let h = random(5, 2, &mut rng);
        let g = Kernel::gaussian(1.3).unwrap();
        let one = DomainBatch::new(h.clone(), DomainLabels::new(vec![0; 5], 1).unwrap()).unwrap();
        assert!(multi_domain_mmd(&g, &one).unwrap() <= 1e-12);

        let doubled = h.vstack(&h).unwrap();
        let labels = [vec![0; 5], vec![1; 5]].concat();
        let two = DomainBatch::new(doubled, DomainLabels::new(labels, 2).unwrap()).unwrap();
        assert!(multi_domain_mmd(&g, &two).unwrap() <= 1e-12);
    }

    #[test]
    fn empty_domain_rejected() {
        assert!(matches!(
            DomainLabels::new(vec![0, 0, 2], 3),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn median_heuristic_cases() {
        let x = Tensor::from_rows(&[[0.0]]).unwrap();
        let y = Tensor::from_rows(&[[2.0]]).unwrap();
        assert_eq!(median_heuristic_bandwidth(&x, &y).unwrap(), 2.0);
        let same = Tensor::filled(4, 3, 0.5);
        assert_eq!(median_heuristic_bandwidth(&same, &same).unwrap(), 1.0);
        assert!(median_heuristic_bandwidth(&x, &Tensor::zeros(0, 1)).is_err());
    }

    #[test]
    fn permutation_test_identical_samples() {
        let mut rng = stream(4, "t");
        let x = random(10, 2, &mut rng);
        let r = permutation_two_sample_test(&Kernel::gaussian(1.0).unwrap(), &x, &x, 50, &mut rng)
            .unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn permutation_test_replays_with_seed() {
        let mut rng = stream(5, "t");
        let x = random(15, 2, &mut rng);
        let y = random(15, 2, &mut rng).map(|v| v + 0.3);
        let k = Kernel::gaussian(1.0).unwrap();
        let a = permutation_two_sample_test(&k, &x, &y, 100, &mut stream(9, "perm")).unwrap();
        let b = permutation_two_sample_test(&k, &x, &y, 100, &mut stream(9, "perm")).unwrap();
        assert_eq!(a, b);
        assert!(permutation_two_sample_test(&k, &x, &y, 0, &mut rng).is_err());
    }
}
