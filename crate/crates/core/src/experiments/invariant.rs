//! Domain-invariant features: a classifier trained on rows from several
//! domains, with a multi-domain MMD penalty on one hidden layer that pulls
//! every domain's mean embedding toward the pooled mean.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{multi_domain_mmd, multi_domain_mmd_node, DomainBatch, DomainLabels, Kernel};
use crate::network::{
    argmax_rows, forward, predict, BoundParams, Mode, NetworkSpec, Optimizer, OptimizerConfig,
    Parameters,
};
use crate::probe::accuracy;
use crate::rng::{stream, streams};
use crate::tensor::Tensor;

use super::{check_positive, check_weight_decay, finite, minibatches, History, PenaltyConfig};

fn default_weight_decay() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantConfig {
    pub network: NetworkSpec,
    pub penalty: PenaltyConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// `None` trains on the whole training set at every update.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
}

impl InvariantConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.penalty.validate(self.network.layers.len())?;
        self.optimizer.validate()?;
        check_positive("epochs", self.epochs)?;
        if let Some(b) = self.batch_size {
            check_positive("batch_size", b)?;
        }
        check_weight_decay(self.weight_decay)
    }
}

/// Training rows need class and domain labels; test rows need class labels.
#[derive(Clone, Debug)]
pub struct InvariantData {
    pub train: Dataset,
    pub test: Dataset,
}

impl InvariantData {
    fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        for (name, d) in [("train", &self.train), ("test", &self.test)] {
            if d.is_empty() {
                return Err(Error::Data(format!("{name} split is empty")));
            }
            if d.dim() != spec.input_dim() {
                return Err(Error::dim(
                    "train_invariant",
                    format!(
                        "{name} has {} features, network expects {}",
                        d.dim(),
                        spec.input_dim()
                    ),
                ));
            }
            if d.labels.is_none() {
                return Err(Error::Usage(format!("{name} split has no class labels")));
            }
            if d.num_classes() > spec.output_dim() {
                return Err(Error::Data(format!(
                    "{name} has {} classes, network has {} outputs",
                    d.num_classes(),
                    spec.output_dim()
                )));
            }
        }
        let Some(domains) = &self.train.domains else {
            return Err(Error::Usage("training rows have no domain labels".into()));
        };
        let mut seen = vec![false; self.train.num_domains()];
        for &d in domains {
            seen[d] = true;
        }
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(Error::Usage("need at least two domains".into()));
        }
        Ok(())
    }
}

/// Compacts the domains present in `domains` to `0..k`. Returns the labels
/// and the original ids that were absent.
pub fn present_domains(
    domains: &[usize],
    num_domains: usize,
) -> Result<(DomainLabels, Vec<usize>)> {
    let mut remap = vec![usize::MAX; num_domains];
    let mut next = 0;
    for &d in domains {
        if d >= num_domains {
            return Err(Error::Data(format!("domain {d} out of range")));
        }
        if remap[d] == usize::MAX {
            remap[d] = next;
            next += 1;
        }
    }
    let absent = (0..num_domains)
        .filter(|&d| remap[d] == usize::MAX)
        .collect();
    let labels = DomainLabels::new(domains.iter().map(|&d| remap[d]).collect(), next)?;
    Ok((labels, absent))
}

#[derive(Clone, Copy, Debug)]
pub struct InvariantTerms {
    pub loss: NodeId,
    pub cross_entropy: NodeId,
    pub penalty: Option<NodeId>,
    pub weight_decay: Option<NodeId>,
}

/// `CE(all rows) + λ·multi-domain MMD(h_k grouped by domain) + weight decay`.
#[allow(clippy::too_many_arguments)]
pub fn objective<R: rand::Rng + ?Sized>(
    tape: &mut Tape,
    config: &InvariantConfig,
    kernel: &Kernel,
    bound: &BoundParams,
    x: &Tensor,
    labels: &[usize],
    domains: &DomainLabels,
    mode: Mode,
    rng: &mut R,
) -> Result<InvariantTerms> {
    let xn = tape.leaf(x.clone())?;
    let acts = forward(tape, &config.network, bound, xn, mode, rng)?;
    let logits = *acts.last().expect("validated network has layers");
    let cross_entropy = tape.softmax_cross_entropy(logits, labels)?;
    let mut loss = cross_entropy;
    let mut penalty = None;
    if config.penalty.is_active() {
        let p = multi_domain_mmd_node(tape, kernel, acts[config.penalty.layer_index], domains)?;
        let weighted = tape.scale(p, config.penalty.weight)?;
        loss = tape.add(loss, weighted)?;
        penalty = Some(p);
    }
    let weight_decay = bound.weight_decay(tape, config.weight_decay)?;
    if let Some(wd) = weight_decay {
        loss = tape.add(loss, wd)?;
    }
    Ok(InvariantTerms {
        loss,
        cross_entropy,
        penalty,
        weight_decay,
    })
}

#[derive(Clone, Debug)]
pub struct InvariantOutcome {
    /// Parameters from the epoch with the best test accuracy.
    pub params: Parameters,
    pub final_params: Parameters,
    pub history: History,
    pub kernel: Kernel,
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
    /// `(epoch, domain)` for every penalty term skipped because the domain
    /// had no rows in a minibatch.
    pub skipped_terms: Vec<(usize, usize)>,
}

pub const HISTORY_COLUMNS: [&str; 7] = [
    "epoch",
    "loss",
    "cross_entropy",
    "mmd",
    "weight_decay",
    "train_acc",
    "test_acc",
];

/// Trains the classifier. Rows of the history are epoch-end evaluations on
/// the full training set (row 0 is the initialization); `mmd` is the
/// multi-domain discrepancy of the penalty layer, logged even when `λ = 0`.
/// There is no validation split: the reported model is the one with the
/// best test accuracy over epochs.
pub fn train_invariant(data: &InvariantData, config: &InvariantConfig) -> Result<InvariantOutcome> {
    config.validate()?;
    data.validate(&config.network)?;
    let spec = &config.network;
    let k = config.penalty.layer_index;
    let train_labels = data.train.labels.as_deref().expect("validated");
    let train_domains = data.train.domains.as_deref().expect("validated");
    let num_domains = data.train.num_domains();
    let (all_domains, _) = present_domains(train_domains, num_domains)?;

    let mut params = Parameters::init(spec, &mut stream(config.seed, streams::INIT))?;
    let mut dropout_rng = stream(config.seed, streams::DROPOUT);
    let mut shuffle_rng = stream(config.seed, streams::SHUFFLE);

    let kernel = {
        let acts = predict(spec, &params, &data.train.features)?;
        let empty = Tensor::zeros(0, acts[k].cols());
        config.penalty.kernel.resolve(&acts[k], &empty)?
    };

    let evaluate = |params: &Parameters, epoch: usize| -> Result<Vec<f64>> {
        let acts = predict(spec, params, &data.train.features)?;
        let logits = acts.last().expect("layers");
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone())?;
        let ce = tape.softmax_cross_entropy(l, train_labels)?;
        let cross_entropy = tape.value(ce).item()?;
        let mmd = multi_domain_mmd(
            &kernel,
            &DomainBatch::new(acts[k].clone(), all_domains.clone())?,
        )?;
        let wd = config.weight_decay
            * params
                .layers
                .iter()
                .map(|l| l.w.squared_norm())
                .sum::<f64>();
        let loss = finite(
            cross_entropy + config.penalty.weight * mmd + wd,
            "loss",
            epoch,
        )?;
        let train_acc = accuracy(&argmax_rows(logits), train_labels)?;
        let test_out = predict(spec, params, &data.test.features)?;
        let test_acc = accuracy(
            &argmax_rows(test_out.last().expect("layers")),
            data.test.labels.as_deref().expect("validated"),
        )?;
        Ok(vec![
            epoch as f64,
            loss,
            cross_entropy,
            mmd,
            wd,
            train_acc,
            test_acc,
        ])
    };

    let mut optimizer = Optimizer::new(config.optimizer.clone(), &params)?;
    let mut history = History::new(&HISTORY_COLUMNS);
    let row = evaluate(&params, 0)?;
    let mut best = (row[6], 0, params.clone());
    history.push(row);
    let mut skipped_terms = Vec::new();

    for epoch in 1..=config.epochs {
        let batches = match config.batch_size {
            Some(b) => minibatches(data.train.len(), b, &mut shuffle_rng),
            None => vec![(0..data.train.len()).collect()],
        };
        for batch in batches {
            let x = data.train.features.select_rows(&batch);
            let ys: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let ds: Vec<usize> = batch.iter().map(|&i| train_domains[i]).collect();
            let (domains, absent) = present_domains(&ds, num_domains)?;
            if config.penalty.is_active() {
                skipped_terms.extend(absent.into_iter().map(|d| (epoch, d)));
            }
            let mut step = || -> Result<()> {
                let mut tape = Tape::new();
                let bound = BoundParams::bind(&mut tape, &params)?;
                let terms = objective(
                    &mut tape,
                    config,
                    &kernel,
                    &bound,
                    &x,
                    &ys,
                    &domains,
                    Mode::Train,
                    &mut dropout_rng,
                )?;
                let grads = tape.backward(terms.loss)?;
                optimizer.step(&mut params, &bound.gradients(&grads))
            };
            step().map_err(|e| e.at_epoch(epoch))?;
        }
        let row = evaluate(&params, epoch)?;
        if row[6] > best.0 {
            best = (row[6], epoch, params.clone());
        }
        history.push(row);
    }

    let (best_test_accuracy, best_epoch, best_params) = best;
    Ok(InvariantOutcome {
        params: best_params,
        final_params: params,
        history,
        kernel,
        best_epoch,
        best_test_accuracy,
        skipped_terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_domains, SynthSpec};
    use crate::experiments::{gradient_check_error, KernelSpec};
    use crate::network::Activation;

    fn shifted(seed: u64) -> InvariantData {
        let spec = SynthSpec::FiveShiftDomains {
            dim: 6,
            classes: 3,
            domains: 7,
            per_cell: 8,
            class_spread: 2.0,
            domain_shift: 1.5,
            noise: 0.8,
            shift_dims: None,
        };
        let all = synth_domains(&spec, &mut stream(seed, streams::DATA)).unwrap();
        let d = all.domains.clone().unwrap();
        let pick = |keep: &dyn Fn(usize) -> bool| {
            all.select(&(0..all.len()).filter(|&i| keep(d[i])).collect::<Vec<_>>())
        };
        InvariantData {
            train: pick(&|d| d < 5),
            test: pick(&|d| d >= 5),
        }
    }

    fn config(weight: f64, kernel: KernelSpec) -> InvariantConfig {
        InvariantConfig {
            network: NetworkSpec::chain(
                6,
                &[
                    (16, Activation::Relu),
                    (8, Activation::Relu),
                    (3, Activation::Identity),
                ],
                0.1,
            ),
            penalty: PenaltyConfig {
                weight,
                layer_index: 1,
                kernel,
            },
            optimizer: OptimizerConfig::adagrad(0.05),
            epochs: 5,
            batch_size: None,
            weight_decay: 1e-4,
            seed: 3,
        }
    }

    #[test]
    fn both_kernels_run_and_histories_differ() {
        let data = shifted(1);
        let g = train_invariant(&data, &config(1.0, KernelSpec::median())).unwrap();
        let l = train_invariant(&data, &config(1.0, KernelSpec::Linear {})).unwrap();
        assert_eq!(g.kernel.name(), "gaussian");
        assert_eq!(l.kernel, Kernel::Linear {});
        assert_eq!(g.history.len(), 6);
        assert_ne!(g.history.column("mmd"), l.history.column("mmd"));
        assert!(g.history.rows().iter().flatten().all(|v| v.is_finite()));
        assert!(g.skipped_terms.is_empty());
        let best = g.history.column("test_acc").unwrap()[g.best_epoch];
        assert_eq!(best, g.best_test_accuracy);
    }

    #[test]
    fn identical_domains_give_a_vanishing_penalty() {
        let base = shifted(2);
        let one = base.train.domain(0);
        let mut twin = one.clone();
        twin.domains = Some(vec![1; twin.len()]);
        let data = InvariantData {
            train: one.concat(&twin).unwrap(),
            test: base.test,
        };
        let out = train_invariant(&data, &config(1.0, KernelSpec::median())).unwrap();
        for v in out.history.column("mmd").unwrap() {
            assert!(v <= 1e-6, "{v}");
        }
    }

    #[test]
    fn minibatches_missing_a_domain_are_logged() {
        let data = shifted(3);
        let mut c = config(1.0, KernelSpec::median());
        c.batch_size = Some(2);
        c.epochs = 1;
        let out = train_invariant(&data, &c).unwrap();
        assert!(!out.skipped_terms.is_empty());
        assert!(out.skipped_terms.iter().all(|&(e, d)| e == 1 && d < 5));
    }

    #[test]
    fn single_domain_is_a_usage_error() {
        let data = shifted(4);
        let d = InvariantData {
            train: data.train.domain(2),
            test: data.test,
        };
        assert!(matches!(
            train_invariant(&d, &config(1.0, KernelSpec::median())),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let data = shifted(5);
        let c = config(3.0, KernelSpec::median());
        let params = Parameters::init(&c.network, &mut stream(8, streams::INIT)).unwrap();
        let idx: Vec<usize> = (0..data.train.len()).step_by(6).collect();
        let sub = data.train.select(&idx);
        let (domains, _) = present_domains(sub.domains.as_deref().unwrap(), 5).unwrap();
        let kernel = Kernel::gaussian(2.0).unwrap();
        let err = gradient_check_error(&params, 1e-5, |tape, bound| {
            let mut rng = stream(1, streams::DROPOUT);
            Ok(objective(
                tape,
                &c,
                &kernel,
                bound,
                &sub.features,
                sub.labels.as_deref().unwrap(),
                &domains,
                Mode::Train,
                &mut rng,
            )?
            .loss)
        })
        .unwrap();
        assert!(err < 1e-6, "relative gradient error {err}");
    }

    #[test]
    fn present_domains_compacts_ids() {
        let (labels, absent) = present_domains(&[3, 0, 3], 4).unwrap();
        assert_eq!(labels.labels(), &[0, 1, 0]);
        assert_eq!(absent, vec![1, 2]);
    }
}
