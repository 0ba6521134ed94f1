//! `train` subcommands: load data, validate, train, write artifacts.
//!
//! Every run writes `resolved-config.json` (defaults filled in, paths made
//! absolute) before training starts, then `history.csv`, `checkpoint.json`
//! and `run-info.json` once it finishes.

use std::path::{Path, PathBuf};

use mmd_repr::data::{corrupt, format_csv_matrix, Dataset};
use mmd_repr::experiments::{
    autoencoder, da, generative, invariant, sample_generative, train_autoencoder,
    train_domain_adaptation, train_generative, train_invariant, AeConfig, DaConfig,
    GenerativeConfig, GenerativeSpec, InvariantConfig,
};
use mmd_repr::network::{
    predict, Activation, Checkpoint, NetworkSpec, OptimizerConfig, Parameters,
};
use mmd_repr::probe::{noise_probe, pca_project};
use mmd_repr::rng::{stream, streams};
use mmd_repr::Tensor;
use serde::Serialize;
use serde_json::json;

use crate::config::{AeRun, DaRun, GmmnRun, GmmnSource, InvariantRun};
use crate::error::{CliError, CliResult};
use crate::sources;

pub const DA_COLUMNS_HELP: &str =
    "epoch,loss,cross_entropy,mmd,weight_decay,train_acc,valid_acc[,test_acc]";
pub const INVARIANT_COLUMNS_HELP: &str =
    "epoch,loss,cross_entropy,mmd,weight_decay,train_acc,test_acc";
pub const AE_COLUMNS_HELP: &str = "epoch,loss,reconstruction,penalty[,valid_reconstruction]";
pub const GMMN_COLUMNS_HELP: &str = "update,train_mmd,heldout_mmd";

/// Decisions that apply to every classifier run.
const PENALTY_DECISION: &str =
    "the MMD penalty is computed on pre-dropout activations of the penalty layer";

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Write { path, source })
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("config types serialize");
    text.push('\n');
    write(dir, name, text)
}

fn absolute(p: &mut PathBuf) -> CliResult<()> {
    *p = std::path::absolute(&*p)
        .map_err(|e| CliError::Usage(format!("cannot resolve {}: {e}", p.display())))?;
    Ok(())
}

/// `--out` wins over the config's `output_dir`; the choice is stored back
/// into the config so the resolved copy records it.
fn output_dir(configured: &mut Option<PathBuf>, flag: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(f) = flag {
        *configured = Some(f.to_path_buf());
    }
    let dir = configured.as_mut().ok_or_else(|| {
        CliError::Usage("no output directory: set output_dir or pass --out".into())
    })?;
    absolute(dir)?;
    std::fs::create_dir_all(&*dir).map_err(|source| CliError::Write {
        path: dir.clone(),
        source,
    })?;
    Ok(dir.clone())
}

fn checkpoint(
    spec: &NetworkSpec,
    params: &Parameters,
    optimizer: &OptimizerConfig,
    step: usize,
) -> CliResult<String> {
    Ok(Checkpoint {
        spec: spec.clone(),
        params: params.clone(),
        optimizer: Some(optimizer.kind),
        step: step as u64,
    }
    .to_json()?)
}

/// One CSV row per example: `pc1..pck`, then `label` and `domain` when known.
pub fn pca_csv(
    projections: &Tensor,
    labels: Option<&[usize]>,
    domains: Option<&[usize]>,
) -> String {
    let mut header: Vec<String> = (1..=projections.cols()).map(|i| format!("pc{i}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    if domains.is_some() {
        header.push("domain".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in 0..projections.rows() {
        let mut row: Vec<String> = projections.row(r).iter().map(|v| v.to_string()).collect();
        row.extend(labels.map(|l| l[r].to_string()));
        row.extend(domains.map(|d| d[r].to_string()));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// What a finished run reports on stdout.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub info: serde_json::Value,
}

pub fn train_da(mut run: DaRun, out: Option<&Path>) -> CliResult<RunSummary> {
    if let crate::config::DaSource::Text { source, target, .. } = &mut run.data {
        absolute(source)?;
        absolute(target)?;
    }
    let data = sources::da_data(&run.data, run.seed)?;
    let classes = data
        .source_train
        .num_classes()
        .max(data.source_valid.num_classes());
    let config = DaConfig {
        network: run.network.build(data.source_train.dim(), classes),
        penalty: run.penalty,
        optimizer: run.optimizer.clone(),
        epochs: run.epochs,
        batch_size: run.batch_size,
        weight_decay: run.weight_decay,
        patience: run.patience,
        seed: run.seed,
    };
    config.validate()?;
    let dir = output_dir(&mut run.output_dir, out)?;
    write_json(&dir, "resolved-config.json", &run)?;

    let outcome = train_domain_adaptation(&data, &config)?;
    write(&dir, "history.csv", outcome.history.to_csv())?;
    write(
        &dir,
        "checkpoint.json",
        checkpoint(
            &config.network,
            &outcome.params,
            &config.optimizer,
            outcome.best_epoch,
        )?,
    )?;
    let info = json!({
        "subcommand": "da",
        "history_columns": da::history_columns(outcome.target_test_accuracy.is_some()),
        "kernel": outcome.kernel,
        "best_epoch": outcome.best_epoch,
        "best_valid_accuracy": outcome.best_valid_accuracy,
        "target_test_accuracy": outcome.target_test_accuracy,
        "rows": {
            "source_train": data.source_train.len(),
            "source_valid": data.source_valid.len(),
            "target_train": data.target_train.len(),
            "target_test": data.target_test.as_ref().map(Dataset::len),
        },
        "decisions": [
            PENALTY_DECISION,
            "each source minibatch is paired with an equal-size target minibatch drawn by cycling through shuffled target rows",
            "history rows are evaluated without dropout on the full training and validation sets; row 0 is the initialization",
            "checkpoint.json holds the parameters with the best validation accuracy",
        ],
    });
    write_json(&dir, "run-info.json", &info)?;
    Ok(RunSummary {
        output_dir: dir,
        info,
    })
}

pub fn train_invariant_run(mut run: InvariantRun, out: Option<&Path>) -> CliResult<RunSummary> {
    if let crate::config::InvariantSource::Csv { train, test } = &mut run.data {
        absolute(train)?;
        absolute(test)?;
    }
    let data = sources::invariant_data(&run.data, run.seed)?;
    let classes = data.train.num_classes().max(data.test.num_classes());
    let config = InvariantConfig {
        network: run.network.build(data.train.dim(), classes),
        penalty: run.penalty,
        optimizer: run.optimizer.clone(),
        epochs: run.epochs,
        batch_size: run.batch_size,
        weight_decay: run.weight_decay,
        seed: run.seed,
    };
    config.validate()?;
    if let Some(k) = run.pca {
        let width = config.network.layers[config.penalty.layer_index].output_dim;
        if k == 0 || k > width {
            return Err(CliError::Usage(format!(
                "pca needs 1..={width} components, got {k}"
            )));
        }
    }
    let dir = output_dir(&mut run.output_dir, out)?;
    write_json(&dir, "resolved-config.json", &run)?;

    let outcome = train_invariant(&data, &config)?;
    write(&dir, "history.csv", outcome.history.to_csv())?;
    write(
        &dir,
        "checkpoint.json",
        checkpoint(
            &config.network,
            &outcome.params,
            &config.optimizer,
            outcome.best_epoch,
        )?,
    )?;
    if let Some(k) = run.pca {
        let all = data.train.concat(&data.test)?;
        let acts = predict(&config.network, &outcome.params, &all.features)?;
        let pca = pca_project(&acts[config.penalty.layer_index], k)?;
        write(
            &dir,
            "pca.csv",
            pca_csv(
                &pca.projections,
                all.labels.as_deref(),
                all.domains.as_deref(),
            ),
        )?;
    }
    let info = json!({
        "subcommand": "invariant",
        "history_columns": invariant::HISTORY_COLUMNS,
        "kernel": outcome.kernel,
        "best_epoch": outcome.best_epoch,
        "best_test_accuracy": outcome.best_test_accuracy,
        "final_test_accuracy": outcome.history.last("test_acc"),
        "skipped_domain_terms": outcome.skipped_terms,
        "rows": { "train": data.train.len(), "test": data.test.len() },
        "decisions": [
            PENALTY_DECISION,
            "domains absent from a minibatch are left out of that batch's penalty and listed in skipped_domain_terms",
            "pca.csv projects the penalty layer of the best checkpoint over training then test rows",
        ],
    });
    write_json(&dir, "run-info.json", &info)?;
    Ok(RunSummary {
        output_dir: dir,
        info,
    })
}

pub fn train_ae(mut run: AeRun, out: Option<&Path>) -> CliResult<RunSummary> {
    absolute(&mut run.data.images)?;
    absolute(&mut run.data.labels)?;
    let config = AeConfig {
        variant: run.variant,
        hidden: run.hidden,
        optimizer: run.optimizer.clone(),
        epochs: run.epochs,
        batch_size: run.batch_size,
        weight_decay: run.weight_decay,
        seed: run.seed,
    };
    config.validate()?;
    if let Some(p) = &run.probe {
        p.corruption.validate()?;
    }
    if let Some(k) = run.pca {
        if k == 0 || k > run.hidden {
            return Err(CliError::Usage(format!(
                "pca needs 1..={} components, got {k}",
                run.hidden
            )));
        }
    }
    let (train, heldout) = sources::image_data(&run.data)?;
    if (run.probe.is_some() || run.pca.is_some()) && heldout.len() < 2 {
        return Err(CliError::Usage(
            "probe and pca need at least two held-out rows".into(),
        ));
    }
    let dir = output_dir(&mut run.output_dir, out)?;
    write_json(&dir, "resolved-config.json", &run)?;

    let valid = (!heldout.is_empty()).then_some(&heldout.features);
    let outcome = train_autoencoder(&train, valid, &config)?;
    write(&dir, "history.csv", outcome.history.to_csv())?;
    write(
        &dir,
        "checkpoint.json",
        checkpoint(
            &outcome.spec,
            &outcome.params,
            &config.optimizer,
            config.epochs,
        )?,
    )?;
    let mut probe_accuracy = None;
    if let Some(settings) = &run.probe {
        let encode = |x: &Tensor| outcome.encode(x);
        let report = noise_probe(
            &encode,
            &heldout.features,
            &settings.probe_config(),
            &mut stream(run.seed, streams::PROBE),
        )?;
        probe_accuracy = Some(report.accuracy);
        write_json(&dir, "probe-report.json", &report)?;
    }
    if let Some(k) = run.pca {
        let corruption = run
            .probe
            .as_ref()
            .map(|p| p.corruption)
            .or(config.variant.corruption);
        let mut codes = outcome.encode(&heldout.features)?;
        let mut labels = heldout.labels.clone().unwrap_or_default();
        let mut domains = vec![0; heldout.len()];
        if let Some(c) = corruption {
            let noisy = corrupt(&heldout.features, &c, &mut stream(run.seed, streams::EVAL))?;
            codes = codes.vstack(&outcome.encode(&noisy)?)?;
            labels.extend_from_within(..);
            domains.extend(std::iter::repeat_n(1, heldout.len()));
        }
        let pca = pca_project(&codes, k)?;
        write(
            &dir,
            "pca.csv",
            pca_csv(&pca.projections, Some(&labels), Some(&domains)),
        )?;
    }
    let info = json!({
        "subcommand": "ae",
        "variant": config.variant.kind.name(),
        "history_columns": autoencoder::history_columns(valid.is_some()),
        "kernel": outcome.kernel,
        "probe_accuracy": probe_accuracy,
        "rows": { "train": train.rows(), "heldout": heldout.len() },
        "decisions": [
            "a fresh corruption of every minibatch is drawn at each update",
            "the MMD kernel bandwidth comes from the median rule on codes of up to 500 clean training rows and their corrupted copies at initialization",
            "the probe is an L2-regularized logistic regression on a 50/50 split of clean and corrupted held-out codes",
            "pca.csv projects hidden codes of the held-out rows (domain 0) and their corrupted copies (domain 1)",
        ],
    });
    write_json(&dir, "run-info.json", &info)?;
    Ok(RunSummary {
        output_dir: dir,
        info,
    })
}

pub fn train_gmmn(mut run: GmmnRun, out: Option<&Path>) -> CliResult<RunSummary> {
    if let GmmnSource::Idx { images, .. } = &mut run.data {
        absolute(images)?;
    }
    let (train, heldout) = sources::gmmn_data(&run.data, run.seed)?;
    if run.generator.is_none() {
        let head = match run.data {
            GmmnSource::Idx { .. } => Activation::Sigmoid,
            GmmnSource::Synth { .. } => Activation::Identity,
        };
        run.generator = Some(GenerativeSpec::standard(32, train.cols(), head));
    }
    let config = GenerativeConfig {
        generator: run.generator.clone().expect("filled above"),
        kernel: run.kernel,
        optimizer: run.optimizer.clone(),
        updates: run.updates,
        batch_size: run.batch_size,
        eval_every: run.eval_every,
        eval_samples: run.eval_samples,
        seed: run.seed,
    };
    config.validate()?;
    let dir = output_dir(&mut run.output_dir, out)?;
    write_json(&dir, "resolved-config.json", &run)?;

    let outcome = train_generative(&train, &heldout, &config)?;
    write(&dir, "history.csv", outcome.history.to_csv())?;
    let decoder = &config.generator.decoder;
    write(
        &dir,
        "checkpoint.json",
        checkpoint(decoder, &outcome.params, &config.optimizer, config.updates)?,
    )?;
    let samples = sample_generative(
        &config.generator,
        &outcome.params,
        run.samples,
        &mut stream(run.seed, streams::PRIOR),
    )?;
    write(&dir, "samples.csv", format_csv_matrix(&samples))?;
    let info = json!({
        "subcommand": "gmmn",
        "history_columns": generative::HISTORY_COLUMNS,
        "kernel": outcome.kernel,
        "initial_heldout_mmd": outcome.history.column("heldout_mmd").and_then(|c| c.first().copied()),
        "final_heldout_mmd": outcome.history.last("heldout_mmd"),
        "rows": { "train": train.rows(), "heldout": heldout.rows() },
        "decisions": [
            "the generator is trained with the configured optimizer (AdaGrad by default)",
            "a median-rule bandwidth is computed from the leading training and held-out rows",
            "samples.csv draws fresh prior points from the prior stream after training",
        ],
    });
    write_json(&dir, "run-info.json", &info)?;
    Ok(RunSummary {
        output_dir: dir,
        info,
    })
}
