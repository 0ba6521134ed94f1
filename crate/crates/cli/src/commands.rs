//! Command-line surface and the small utility subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmd_repr::data::CorruptionSpec;
use mmd_repr::kernels::{median_heuristic_bandwidth, permutation_two_sample_test, Kernel};
use mmd_repr::network::{predict, Checkpoint};
use mmd_repr::probe::{noise_probe, pca_project, ProbeConfig, ProbeReport};
use mmd_repr::rng::{stream, streams};
use mmd_repr::Tensor;
use serde::Serialize;

use crate::config;
use crate::error::{CliError, CliResult};
use crate::run;
use crate::sources::{load_labels, load_matrix};

const TRAIN_AFTER_HELP: &str = "\
history.csv columns:
  da         epoch,loss,cross_entropy,mmd,weight_decay,train_acc,valid_acc[,test_acc]
  invariant  epoch,loss,cross_entropy,mmd,weight_decay,train_acc,test_acc
  ae         epoch,loss,reconstruction,penalty[,valid_reconstruction]
  gmmn       update,train_mmd,heldout_mmd

Bracketed columns appear when the run has a target test split (da) or
held-out rows (ae).

Exit codes: 0 success, 2 config or input error, 3 numerical failure.";

#[derive(Debug, Parser)]
#[command(
    name = "mmd-repr",
    version,
    about = "MMD-penalized representation learning experiments",
    after_help = "Set MMD_REPR_THREADS to cap the worker threads (default: one per core)."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON config and write its artifacts.
    #[command(after_help = TRAIN_AFTER_HELP)]
    Train(TrainArgs),
    /// Permutation two-sample test on two CSV matrices; prints JSON.
    MmdTest(MmdTestArgs),
    /// Clean-vs-noisy linear probe of a checkpoint's hidden layer.
    Probe(ProbeArgs),
    /// PCA projection of data or of a checkpoint's layer activations.
    Pca(PcaArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// Domain adaptation with an MMD penalty between source and target.
    Da,
    /// Features invariant across several training domains.
    Invariant,
    /// Auto-encoder variants (ae, dae, cae, mmd, mmd_dae).
    Ae,
    /// Moment-matching generator.
    Gmmn,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub experiment: Experiment,
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Gaussian,
    Linear,
}

#[derive(Debug, Args)]
pub struct MmdTestArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub kernel: KernelArg,
    /// Gaussian bandwidth; the median rule is used when absent.
    #[arg(long, conflicts_with = "median")]
    pub sigma: Option<f64>,
    /// Median rule on the pooled samples (the default for the Gaussian kernel).
    #[arg(long)]
    pub median: bool,
    #[arg(long, default_value_t = 1000)]
    pub perms: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// IDX images or a header-less CSV matrix.
    #[arg(long)]
    pub data: PathBuf,
    /// Layer whose activations are probed (0 = first hidden layer).
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Probability of zeroing each input coordinate in the noisy copy.
    #[arg(long, default_value_t = 0.5)]
    pub corruption: f64,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Permutation control: shuffle the clean/noisy labels before fitting.
    #[arg(long)]
    pub shuffle_labels: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    /// IDX images or a header-less CSV matrix.
    #[arg(long)]
    pub data: PathBuf,
    /// Project this network's activations instead of the raw rows.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0, requires = "checkpoint")]
    pub layer: usize,
    /// IDX labels or a one-column CSV, written as the `label` column.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// One-column CSV written as the `domain` column.
    #[arg(long)]
    pub domains: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MmdTestReport {
    pub statistic: f64,
    pub p_value: f64,
    /// Gaussian bandwidth used, `null` for the linear kernel.
    pub sigma: Option<f64>,
}

pub fn mmd_test(args: &MmdTestArgs) -> CliResult<MmdTestReport> {
    let x = load_matrix(&args.x)?;
    let y = load_matrix(&args.y)?;
    if x.cols() != y.cols() {
        return Err(CliError::Usage(format!(
            "x has {} columns but y has {}",
            x.cols(),
            y.cols()
        )));
    }
    let (kernel, sigma) = match args.kernel {
        KernelArg::Linear => {
            if args.sigma.is_some() || args.median {
                return Err(CliError::Usage(
                    "--sigma and --median apply to the gaussian kernel".into(),
                ));
            }
            (Kernel::Linear {}, None)
        }
        KernelArg::Gaussian => {
            let s = match args.sigma {
                Some(s) => s,
                None => median_heuristic_bandwidth(&x, &y)?,
            };
            (Kernel::gaussian(s)?, Some(s))
        }
    };
    let r = permutation_two_sample_test(
        &kernel,
        &x,
        &y,
        args.perms,
        &mut stream(args.seed, streams::SHUFFLE),
    )?;
    Ok(MmdTestReport {
        statistic: r.statistic,
        p_value: r.p_value,
        sigma,
    })
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn check_layer(ckpt: &Checkpoint, x: &Tensor, layer: usize) -> CliResult<()> {
    let layers = ckpt.spec.layers.len();
    if layer >= layers {
        return Err(CliError::Usage(format!(
            "layer {layer} requested from a {layers}-layer network"
        )));
    }
    if x.cols() != ckpt.spec.input_dim() {
        return Err(CliError::Usage(format!(
            "data has {} columns, the network takes {}",
            x.cols(),
            ckpt.spec.input_dim()
        )));
    }
    Ok(())
}

fn activations(ckpt: &Checkpoint, x: &Tensor, layer: usize) -> CliResult<Tensor> {
    check_layer(ckpt, x, layer)?;
    Ok(predict(&ckpt.spec, &ckpt.params, x)?.swap_remove(layer))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: PathBuf, contents: String) -> CliResult<()> {
    std::fs::write(&path, contents).map_err(|source| CliError::Write { path, source })
}

/// Writes `probe-report.json` into `--out` and returns the report.
pub fn probe(args: &ProbeArgs) -> CliResult<ProbeReport> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let x = load_matrix(&args.data)?;
    let mut config = ProbeConfig::new(CorruptionSpec::bernoulli(args.corruption));
    config.corruption.validate()?;
    if let Some(l2) = args.l2 {
        config.l2 = l2;
    }
    if let Some(f) = args.train_fraction {
        config.train_fraction = f;
    }
    config.shuffle_labels = args.shuffle_labels;
    check_layer(&ckpt, &x, args.layer)?;
    let encode = |t: &Tensor| -> mmd_repr::Result<Tensor> {
        Ok(predict(&ckpt.spec, &ckpt.params, t)?.swap_remove(args.layer))
    };
    let report = noise_probe(&encode, &x, &config, &mut stream(args.seed, streams::PROBE))?;
    create_dir(&args.out)?;
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_file(args.out.join("probe-report.json"), text)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PcaSummary {
    pub rows: usize,
    pub explained_variance: Vec<f64>,
}

/// Writes `pca.csv` into `--out`.
pub fn pca(args: &PcaArgs) -> CliResult<PcaSummary> {
    let mut x = load_matrix(&args.data)?;
    if let Some(path) = &args.checkpoint {
        x = activations(&load_checkpoint(path)?, &x, args.layer)?;
    }
    let column = |path: &Option<PathBuf>| -> CliResult<Option<Vec<usize>>> {
        let Some(p) = path else { return Ok(None) };
        let v = load_labels(p)?;
        if v.len() != x.rows() {
            return Err(CliError::Usage(format!(
                "{} has {} entries for {} rows",
                p.display(),
                v.len(),
                x.rows()
            )));
        }
        Ok(Some(v))
    };
    let labels = column(&args.labels)?;
    let domains = column(&args.domains)?;
    let p = pca_project(&x, args.k)?;
    create_dir(&args.out)?;
    write_file(
        args.out.join("pca.csv"),
        run::pca_csv(&p.projections, labels.as_deref(), domains.as_deref()),
    )?;
    Ok(PcaSummary {
        rows: x.rows(),
        explained_variance: p.explained_variance,
    })
}

/// Applies `MMD_REPR_THREADS` to the global rayon pool.
pub fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("MMD_REPR_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "MMD_REPR_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))
}

fn print_json(value: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("reports serialize")
    );
}

/// Runs one parsed invocation, printing its JSON result on stdout.
pub fn execute(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(t) => {
            let out = t.out.as_deref();
            let summary = match t.experiment {
                Experiment::Da => run::train_da(config::load(&t.config)?, out)?,
                Experiment::Invariant => run::train_invariant_run(config::load(&t.config)?, out)?,
                Experiment::Ae => run::train_ae(config::load(&t.config)?, out)?,
                Experiment::Gmmn => run::train_gmmn(config::load(&t.config)?, out)?,
            };
            print_json(&summary);
        }
        Command::MmdTest(a) => print_json(&mmd_test(&a)?),
        Command::Probe(a) => print_json(&probe(&a)?),
        Command::Pca(a) => print_json(&pca(&a)?),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::run::{AE_COLUMNS_HELP, DA_COLUMNS_HELP, GMMN_COLUMNS_HELP, INVARIANT_COLUMNS_HELP};
    use clap::CommandFactory;
    use mmd_repr::experiments::{autoencoder, da, generative, invariant};

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_schemas_match_the_trainers() {
        let full = |cols: Vec<&str>| cols.join(",");
        let expect = [
            (
                DA_COLUMNS_HELP,
                full(da::history_columns(true)),
                full(da::history_columns(false)),
            ),
            (
                INVARIANT_COLUMNS_HELP,
                full(invariant::HISTORY_COLUMNS.to_vec()),
                full(invariant::HISTORY_COLUMNS.to_vec()),
            ),
            (
                AE_COLUMNS_HELP,
                full(autoencoder::history_columns(true)),
                full(autoencoder::history_columns(false)),
            ),
            (
                GMMN_COLUMNS_HELP,
                full(generative::HISTORY_COLUMNS.to_vec()),
                full(generative::HISTORY_COLUMNS.to_vec()),
            ),
        ];
        for (help, with, without) in expect {
            assert_eq!(help.replace(['[', ']'], ""), with);
            let short = help.split('[').next().unwrap();
            assert_eq!(short, without);
            assert!(TRAIN_AFTER_HELP.contains(help));
        }
    }
}
