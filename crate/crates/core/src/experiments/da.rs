//! Domain adaptation: a classifier trained on a labeled source domain with
//! an MMD penalty pulling one hidden layer's source and target activations
//! together.
//!
//! Each update pairs a source minibatch with an equally sized target
//! minibatch. The target rows are drawn from their own stream, so a run with
//! the penalty switched off consumes exactly the random numbers of plain
//! network training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{mmd_biased, mmd_biased_node, Kernel};
use crate::network::{
    argmax_rows, forward, predict, BoundParams, Mode, NetworkSpec, Optimizer, OptimizerConfig,
    Parameters,
};
use crate::probe::accuracy;
use crate::rng::{stream, streams, Rng};
use crate::tensor::Tensor;

use super::{check_positive, check_weight_decay, finite, minibatches, History, PenaltyConfig};

fn default_batch_size() -> usize {
    64
}

fn default_weight_decay() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaConfig {
    pub network: NetworkSpec,
    pub penalty: PenaltyConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Stop after this many epochs without a better validation accuracy.
    #[serde(default)]
    pub patience: Option<usize>,
    pub seed: u64,
}

impl DaConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.penalty.validate(self.network.layers.len())?;
        self.optimizer.validate()?;
        check_positive("epochs", self.epochs)?;
        check_positive("batch_size", self.batch_size)?;
        check_weight_decay(self.weight_decay)?;
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(())
    }
}

/// Source rows carry labels; target rows are used without them except for
/// the optional labeled test split.
#[derive(Clone, Debug)]
pub struct DaData {
    pub source_train: Dataset,
    pub source_valid: Dataset,
    pub target_train: Dataset,
    pub target_test: Option<Dataset>,
}

impl DaData {
    fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let named = [
            ("source_train", Some(&self.source_train)),
            ("source_valid", Some(&self.source_valid)),
            ("target_train", Some(&self.target_train)),
            ("target_test", self.target_test.as_ref()),
        ];
        for (name, d) in named {
            let Some(d) = d else { continue };
            if d.is_empty() {
                return Err(Error::Data(format!("{name} is empty")));
            }
            if d.dim() != spec.input_dim() {
                return Err(Error::dim(
                    "train_domain_adaptation",
                    format!(
                        "{name} has {} features, network expects {}",
                        d.dim(),
                        spec.input_dim()
                    ),
                ));
            }
        }
        for (name, d) in [
            ("source_train", Some(&self.source_train)),
            ("source_valid", Some(&self.source_valid)),
            ("target_test", self.target_test.as_ref()),
        ] {
            let Some(d) = d else { continue };
            if d.labels.is_none() {
                return Err(Error::Usage(format!("{name} has no labels")));
            }
            if d.num_classes() > spec.output_dim() {
                return Err(Error::Data(format!(
                    "{name} has {} classes, network has {} outputs",
                    d.num_classes(),
                    spec.output_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Nodes of one minibatch objective.
#[derive(Clone, Copy, Debug)]
pub struct DaTerms {
    pub loss: NodeId,
    pub cross_entropy: NodeId,
    pub penalty: Option<NodeId>,
    pub weight_decay: Option<NodeId>,
}

/// `CE(source) + λ·MMD(h_k(source), h_k(target)) + weight decay` on one
/// pair of batches. The penalty (and the target forward pass) is skipped
/// when `λ = 0`.
#[allow(clippy::too_many_arguments)]
pub fn objective<R: rand::Rng + ?Sized>(
    tape: &mut Tape,
    config: &DaConfig,
    kernel: &Kernel,
    bound: &BoundParams,
    source: &Tensor,
    labels: &[usize],
    target: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<DaTerms> {
    let xs = tape.leaf(source.clone())?;
    let acts = forward(tape, &config.network, bound, xs, mode, rng)?;
    let logits = *acts.last().expect("validated network has layers");
    let cross_entropy = tape.softmax_cross_entropy(logits, labels)?;
    let mut loss = cross_entropy;
    let mut penalty = None;
    if config.penalty.is_active() {
        let xt = tape.leaf(target.clone())?;
        let acts_t = forward(tape, &config.network, bound, xt, mode, rng)?;
        let k = config.penalty.layer_index;
        let p = mmd_biased_node(tape, kernel, acts[k], acts_t[k])?;
        let weighted = tape.scale(p, config.penalty.weight)?;
        loss = tape.add(loss, weighted)?;
        penalty = Some(p);
    }
    let weight_decay = bound.weight_decay(tape, config.weight_decay)?;
    if let Some(wd) = weight_decay {
        loss = tape.add(loss, wd)?;
    }
    Ok(DaTerms {
        loss,
        cross_entropy,
        penalty,
        weight_decay,
    })
}

#[derive(Clone, Debug)]
pub struct DaOutcome {
    /// Parameters from the epoch with the best source-validation accuracy.
    pub params: Parameters,
    pub final_params: Parameters,
    pub history: History,
    /// Kernel actually used by the penalty and the logged MMD.
    pub kernel: Kernel,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    /// Target test accuracy of [`DaOutcome::params`], when a test split exists.
    pub target_test_accuracy: Option<f64>,
}

struct EpochEval {
    loss: f64,
    cross_entropy: f64,
    mmd: f64,
    weight_decay: f64,
    train_acc: f64,
    valid_acc: f64,
    test_acc: Option<f64>,
}

fn labels(d: &Dataset) -> &[usize] {
    d.labels.as_deref().expect("validated labeled dataset")
}

fn evaluate(
    config: &DaConfig,
    kernel: &Kernel,
    params: &Parameters,
    data: &DaData,
    epoch: usize,
) -> Result<EpochEval> {
    let spec = &config.network;
    let k = config.penalty.layer_index;
    let src = predict(spec, params, &data.source_train.features)?;
    let tgt = predict(spec, params, &data.target_train.features)?;

    let mut tape = Tape::new();
    let logits = tape.leaf(src.last().expect("layers").clone())?;
    let ce_node = tape.softmax_cross_entropy(logits, labels(&data.source_train))?;
    let cross_entropy = tape.value(ce_node).item()?;
    let mmd = mmd_biased(kernel, &src[k], &tgt[k])?;
    let weight_decay = config.weight_decay
        * params
            .layers
            .iter()
            .map(|l| l.w.squared_norm())
            .sum::<f64>();
    let loss = finite(
        cross_entropy + config.penalty.weight * mmd + weight_decay,
        "loss",
        epoch,
    )?;

    let acc = |d: &Dataset| -> Result<f64> {
        let out = predict(spec, params, &d.features)?;
        accuracy(&argmax_rows(out.last().expect("layers")), labels(d))
    };
    Ok(EpochEval {
        loss,
        cross_entropy,
        mmd,
        weight_decay,
        train_acc: accuracy(
            &argmax_rows(src.last().expect("layers")),
            labels(&data.source_train),
        )?,
        valid_acc: acc(&data.source_valid)?,
        test_acc: data.target_test.as_ref().map(acc).transpose()?,
    })
}

/// Column names of the history this trainer writes.
pub fn history_columns(with_test: bool) -> Vec<&'static str> {
    let mut c = vec![
        "epoch",
        "loss",
        "cross_entropy",
        "mmd",
        "weight_decay",
        "train_acc",
        "valid_acc",
    ];
    if with_test {
        c.push("test_acc");
    }
    c
}

/// Trains the classifier. History rows are epoch-end evaluations on the
/// full training sets (row 0 is the initialization): `loss` is the full
/// objective there and `mmd` the penalty-layer discrepancy between all
/// source and all target training rows, logged even when `λ = 0`.
pub fn train_domain_adaptation(data: &DaData, config: &DaConfig) -> Result<DaOutcome> {
    config.validate()?;
    data.validate(&config.network)?;
    let spec = &config.network;
    let k = config.penalty.layer_index;
    let mut params = Parameters::init(spec, &mut stream(config.seed, streams::INIT))?;
    let mut dropout_rng = stream(config.seed, streams::DROPOUT);
    let mut shuffle_rng = stream(config.seed, streams::SHUFFLE);
    let mut pairing_rng = stream(config.seed, streams::PAIRING);

    let kernel = {
        let src = predict(spec, &params, &data.source_train.features)?;
        let tgt = predict(spec, &params, &data.target_train.features)?;
        config.penalty.kernel.resolve(&src[k], &tgt[k])?
    };

    let mut optimizer = Optimizer::new(config.optimizer.clone(), &params)?;
    let with_test = data.target_test.is_some();
    let mut history = History::new(&history_columns(with_test));
    let record = |history: &mut History, epoch: usize, e: &EpochEval| {
        let mut row = vec![
            epoch as f64,
            e.loss,
            e.cross_entropy,
            e.mmd,
            e.weight_decay,
            e.train_acc,
            e.valid_acc,
        ];
        row.extend(e.test_acc);
        history.push(row);
    };

    let initial = evaluate(config, &kernel, &params, data, 0)?;
    record(&mut history, 0, &initial);
    let mut best = (initial.valid_acc, 0, params.clone(), initial.test_acc);

    let mut target_queue = TargetQueue::new(data.target_train.len());
    for epoch in 1..=config.epochs {
        for batch in minibatches(data.source_train.len(), config.batch_size, &mut shuffle_rng) {
            let src = data.source_train.features.select_rows(&batch);
            let ys: Vec<usize> = batch
                .iter()
                .map(|&i| labels(&data.source_train)[i])
                .collect();
            let tgt = if config.penalty.is_active() {
                let rows = target_queue.take(batch.len(), &mut pairing_rng);
                data.target_train.features.select_rows(&rows)
            } else {
                Tensor::zeros(0, spec.input_dim())
            };
            let mut step = || -> Result<()> {
                let mut tape = Tape::new();
                let bound = BoundParams::bind(&mut tape, &params)?;
                let terms = objective(
                    &mut tape,
                    config,
                    &kernel,
                    &bound,
                    &src,
                    &ys,
                    &tgt,
                    Mode::Train,
                    &mut dropout_rng,
                )?;
                let grads = tape.backward(terms.loss)?;
                optimizer.step(&mut params, &bound.gradients(&grads))
            };
            step().map_err(|e| e.at_epoch(epoch))?;
        }
        let e = evaluate(config, &kernel, &params, data, epoch)?;
        record(&mut history, epoch, &e);
        if e.valid_acc > best.0 {
            best = (e.valid_acc, epoch, params.clone(), e.test_acc);
        }
        if config.patience.is_some_and(|p| epoch - best.1 >= p) {
            break;
        }
    }

    let (best_valid_accuracy, best_epoch, best_params, target_test_accuracy) = best;
    Ok(DaOutcome {
        params: best_params,
        final_params: params,
        history,
        kernel,
        best_epoch,
        best_valid_accuracy,
        target_test_accuracy,
    })
}

/// Cycles through a shuffled permutation of the target rows, reshuffling
/// whenever it runs out.
struct TargetQueue {
    order: Vec<usize>,
    pos: usize,
}

impl TargetQueue {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn take(&mut self, count: usize, rng: &mut Rng) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let n = (count - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + n]);
            self.pos += n;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_domains, SynthSpec};
    use crate::experiments::{gradient_check_error, KernelSpec};
    use crate::network::Activation;

    fn blobs(seed: u64) -> DaData {
        let spec = SynthSpec::TwoDomainBlobs {
            dim: 2,
            per_class: 40,
            separation: 4.0,
            noise: 0.7,
            rotation_deg: 40.0,
            translation: 1.5,
        };
        let all = synth_domains(&spec, &mut stream(seed, streams::DATA)).unwrap();
        let src = all.domain(0);
        let tgt = all.domain(1);
        let even = |d: &Dataset, parity| {
            d.select(&(0..d.len()).filter(|i| i % 2 == parity).collect::<Vec<_>>())
        };
        DaData {
            source_train: even(&src, 0),
            source_valid: even(&src, 1),
            target_train: tgt.without_labels(),
            target_test: Some(tgt),
        }
    }

    fn config(weight: f64) -> DaConfig {
        DaConfig {
            network: NetworkSpec::chain(
                2,
                &[(8, Activation::Relu), (2, Activation::Identity)],
                0.2,
            ),
            penalty: PenaltyConfig {
                weight,
                layer_index: 0,
                kernel: KernelSpec::median(),
            },
            optimizer: OptimizerConfig::adagrad(0.05),
            epochs: 4,
            batch_size: 16,
            weight_decay: 1e-4,
            patience: None,
            seed: 7,
        }
    }

    #[test]
    fn zero_weight_matches_plain_training_bitwise() {
        let data = blobs(1);
        let a = train_domain_adaptation(&data, &config(0.0)).unwrap();
        let b = train_domain_adaptation(&data, &config(0.0)).unwrap();
        assert_eq!(a.history.to_csv(), b.history.to_csv());
        assert_eq!(a.final_params, b.final_params);
        // dropping the penalty layer choice must not matter when λ = 0
        let mut other = config(0.0);
        other.penalty.layer_index = 1;
        other.penalty.kernel = KernelSpec::Linear {};
        let c = train_domain_adaptation(&data, &other).unwrap();
        assert_eq!(a.final_params, c.final_params);
        let loss = |h: &History| h.column("cross_entropy").unwrap();
        assert_eq!(loss(&a.history), loss(&c.history));
    }

    #[test]
    fn history_is_finite_and_best_epoch_is_returned() {
        let data = blobs(2);
        let out = train_domain_adaptation(&data, &config(1.0)).unwrap();
        assert_eq!(out.history.len(), 5);
        assert!(out.history.rows().iter().flatten().all(|v| v.is_finite()));
        let valid = out.history.column("valid_acc").unwrap();
        let best = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_valid_accuracy, best);
        assert_eq!(valid[out.best_epoch], best);
        let acc = accuracy(
            &argmax_rows(
                predict(
                    &config(1.0).network,
                    &out.params,
                    &data.source_valid.features,
                )
                .unwrap()
                .last()
                .unwrap(),
            ),
            labels(&data.source_valid),
        )
        .unwrap();
        assert_eq!(acc, best);
    }

    #[test]
    fn unlabeled_source_is_a_usage_error() {
        let mut data = blobs(3);
        data.source_train = data.source_train.without_labels();
        assert!(matches!(
            train_domain_adaptation(&data, &config(1.0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let data = blobs(3);
        let mut c = config(1.0);
        c.network = NetworkSpec::chain(3, &[(4, Activation::Relu), (2, Activation::Identity)], 0.0);
        assert!(matches!(
            train_domain_adaptation(&data, &c),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let data = blobs(4);
        let c = config(2.0);
        let params = Parameters::init(&c.network, &mut stream(5, streams::INIT)).unwrap();
        let src = data.source_train.features.select_rows(&[0, 3, 5, 8, 13]);
        let ys: Vec<usize> = [0, 3, 5, 8, 13]
            .iter()
            .map(|&i| labels(&data.source_train)[i])
            .collect();
        let tgt = data.target_train.features.select_rows(&[1, 2, 4, 7, 9]);
        let kernel = Kernel::gaussian(1.3).unwrap();
        let err = gradient_check_error(&params, 1e-5, |tape, bound| {
            let mut rng = stream(9, streams::DROPOUT);
            Ok(objective(
                tape,
                &c,
                &kernel,
                bound,
                &src,
                &ys,
                &tgt,
                Mode::Train,
                &mut rng,
            )?
            .loss)
        })
        .unwrap();
        assert!(err < 1e-6, "relative gradient error {err}");
    }

    #[test]
    fn target_queue_covers_rows_before_repeating() {
        let mut q = TargetQueue::new(5);
        let mut rng = stream(1, streams::PAIRING);
        let mut first: Vec<usize> = q.take(3, &mut rng);
        first.extend(q.take(2, &mut rng));
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(q.take(7, &mut rng).len(), 7);
    }
}
