//! The four training procedures: domain adaptation with an MMD penalty,
//! domain-invariant features, penalized auto-encoders and a moment-matching
//! generator.
//!
//! Every trainer is deterministic given its seed. Randomness is drawn from
//! named sub-streams (see [`crate::rng::streams`]), so switching one component
//! off does not shift the draws of the others.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernels::{median_heuristic_bandwidth, Kernel};
use crate::network::{BoundParams, Parameters};
use crate::tensor::Tensor;

pub mod autoencoder;
pub mod da;
pub mod generative;
pub mod invariant;

pub use autoencoder::{
    coordinate_perturbation_penalty, train_autoencoder, AeConfig, AeKind, AeOutcome, AeVariant,
};
pub use da::{train_domain_adaptation, DaConfig, DaData, DaOutcome};
pub use generative::{
    sample_generative, sample_prior, train_generative, GenerativeConfig, GenerativeOutcome,
    GenerativeSpec,
};
pub use invariant::{train_invariant, InvariantConfig, InvariantData, InvariantOutcome};

/// Rows used by the median heuristic are capped at this many per sample.
pub const MEDIAN_HEURISTIC_ROWS: usize = 500;

/// Gaussian bandwidth: a fixed value or the median heuristic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Rule(BandwidthRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    Median,
}

/// A kernel as written in a config, before the bandwidth is resolved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Linear {},
    Gaussian { bandwidth: Bandwidth },
}

impl KernelSpec {
    pub fn median() -> Self {
        KernelSpec::Gaussian {
            bandwidth: Bandwidth::Rule(BandwidthRule::Median),
        }
    }

    pub fn fixed(sigma: f64) -> Self {
        KernelSpec::Gaussian {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian {
                bandwidth: Bandwidth::Fixed(s),
            } => Kernel::gaussian(s).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Turns the spec into a concrete kernel. The median rule looks at (at
    /// most [`MEDIAN_HEURISTIC_ROWS`] leading rows of) `x` and `y`.
    pub fn resolve(&self, x: &Tensor, y: &Tensor) -> Result<Kernel> {
        match *self {
            KernelSpec::Linear {} => Ok(Kernel::Linear {}),
            KernelSpec::Gaussian {
                bandwidth: Bandwidth::Fixed(s),
            } => Kernel::gaussian(s),
            KernelSpec::Gaussian {
                bandwidth: Bandwidth::Rule(BandwidthRule::Median),
            } => {
                let head = |t: &Tensor| {
                    let n = t.rows().min(MEDIAN_HEURISTIC_ROWS);
                    t.select_rows(&(0..n).collect::<Vec<_>>())
                };
                Kernel::gaussian(median_heuristic_bandwidth(&head(x), &head(y))?)
            }
        }
    }
}

/// An MMD penalty attached to one layer's activations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub weight: f64,
    pub layer_index: usize,
    pub kernel: KernelSpec,
}

impl PenaltyConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::Config(format!(
                "penalty weight must be a finite non-negative number, got {}",
                self.weight
            )));
        }
        if self.layer_index >= num_layers {
            return Err(Error::Config(format!(
                "penalty layer {} out of range for a {num_layers}-layer network",
                self.layer_index
            )));
        }
        self.kernel.validate()
    }

    pub fn is_active(&self) -> bool {
        self.weight > 0.0
    }
}

/// Per-epoch (or per-checkpoint) log. The first column is the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl History {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "history row width");
        self.rows.push(row);
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.column(name).and_then(|c| c.last().copied())
    }

    /// Header line plus one line per row; numbers use the shortest
    /// representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{v}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}

/// Shuffled index batches covering `0..n`; the last one may be short.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Largest difference between reverse-mode gradients and central finite
/// differences of `objective`, as `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over all
/// parameters. `objective` must be a deterministic function of the
/// parameters (reseed any random stream it draws from).
pub fn gradient_check_error(
    params: &Parameters,
    step: f64,
    objective: impl Fn(&mut Tape, &BoundParams) -> Result<NodeId>,
) -> Result<f64> {
    let value = |p: &Parameters| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, p)?;
        let loss = objective(&mut tape, &bound)?;
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params)?;
    let loss = objective(&mut tape, &bound)?;
    let analytic: Vec<f64> = bound
        .gradients(&tape.backward(loss)?)
        .iter()
        .flat_map(|g| g.data().to_vec())
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = params.clone();
    let sizes: Vec<usize> = params.tensors().map(Tensor::len).collect();
    for (t, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = params.tensors().nth(t).expect("tensor index").data()[i];
            probe.tensors_mut().nth(t).expect("tensor index").data_mut()[i] = orig + step;
            let up = value(&probe)?;
            probe.tensors_mut().nth(t).expect("tensor index").data_mut()[i] = orig - step;
            let down = value(&probe)?;
            probe.tensors_mut().nth(t).expect("tensor index").data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(norm(&diff) / scale)
}

pub(crate) fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

pub(crate) fn check_weight_decay(v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::Config(format!(
            "weight decay must be finite and non-negative, got {v}"
        )));
    }
    Ok(())
}

pub(crate) fn finite(v: f64, what: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            epoch,
            detail: format!("{what} is {v}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn kernel_spec_parses_both_bandwidth_forms() {
        let m: KernelSpec =
            serde_json::from_str(r#"{"family":"gaussian","bandwidth":"median"}"#).unwrap();
        assert_eq!(m, KernelSpec::median());
        let f: KernelSpec =
            serde_json::from_str(r#"{"family":"gaussian","bandwidth":2.5}"#).unwrap();
        assert_eq!(f, KernelSpec::fixed(2.5));
        let l: KernelSpec = serde_json::from_str(r#"{"family":"linear"}"#).unwrap();
        assert_eq!(l, KernelSpec::Linear {});
        assert!(
            serde_json::from_str::<KernelSpec>(r#"{"family":"gaussian","bandwidth":"mean"}"#)
                .is_err()
        );
        assert!(serde_json::from_str::<KernelSpec>(r#"{"family":"linear","extra":1}"#).is_err());
    }

    #[test]
    fn median_resolution_on_a_single_pair() {
        let x = Tensor::from_rows(&[vec![0.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![2.0]]).unwrap();
        assert_eq!(
            KernelSpec::median().resolve(&x, &y).unwrap(),
            Kernel::Gaussian { bandwidth: 2.0 }
        );
        assert!(KernelSpec::fixed(0.0).validate().is_err());
    }

    #[test]
    fn penalty_validation() {
        let p = PenaltyConfig {
            weight: 1.0,
            layer_index: 2,
            kernel: KernelSpec::Linear {},
        };
        assert!(p.validate(3).is_ok());
        assert!(matches!(p.validate(2), Err(Error::Config(_))));
        let neg = PenaltyConfig { weight: -1.0, ..p };
        assert!(matches!(neg.validate(3), Err(Error::Config(_))));
    }

    #[test]
    fn history_csv_round_trips_numbers() {
        let mut h = History::new(&["epoch", "loss"]);
        h.push(vec![0.0, 0.1 + 0.2]);
        h.push(vec![1.0, 0.25]);
        let csv = h.to_csv();
        assert_eq!(csv, "epoch,loss\n0,0.30000000000000004\n1,0.25\n");
        assert_eq!(h.last("loss"), Some(0.25));
        assert_eq!(h.column("missing"), None);
    }

    #[test]
    fn minibatches_partition_the_indices() {
        let mut rng = stream(3, "shuffle");
        let b = minibatches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
