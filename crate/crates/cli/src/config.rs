//! JSON experiment configs. Unknown keys are rejected; every optional field
//! has a default that is written out in `resolved-config.json`.

use std::path::{Path, PathBuf};

use mmd_repr::data::{CorruptionSpec, SplitSizes, SynthSpec};
use mmd_repr::experiments::{AeVariant, GenerativeSpec, KernelSpec, PenaltyConfig};
use mmd_repr::network::{Activation, NetworkSpec, OptimizerConfig};
use mmd_repr::probe::ProbeConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Reads and parses a config file.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::ConfigSyntax {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenLayer {
    pub width: usize,
    pub activation: Activation,
}

/// Hidden layers of a classifier; input and output widths come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkShape {
    pub hidden: Vec<HiddenLayer>,
    /// Applied after every hidden layer.
    #[serde(default)]
    pub dropout: f64,
}

impl NetworkShape {
    pub fn build(&self, input_dim: usize, classes: usize) -> NetworkSpec {
        let mut widths: Vec<(usize, Activation)> = self
            .hidden
            .iter()
            .map(|h| (h.width, h.activation))
            .collect();
        widths.push((classes, Activation::Identity));
        NetworkSpec::chain(input_dim, &widths, self.dropout)
    }

    /// 256 and 128 ReLU units.
    fn invariant_default() -> Self {
        Self {
            hidden: vec![
                HiddenLayer {
                    width: 256,
                    activation: Activation::Relu,
                },
                HiddenLayer {
                    width: 128,
                    activation: Activation::Relu,
                },
            ],
            dropout: 0.2,
        }
    }
}

fn default_adagrad() -> OptimizerConfig {
    OptimizerConfig::adagrad(0.05)
}

fn default_sgd() -> OptimizerConfig {
    OptimizerConfig::sgd_momentum(0.01, 0.9)
}

fn default_batch_size() -> usize {
    64
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_min_count() -> f64 {
    50.0
}

fn default_text_split() -> SplitSizes {
    SplitSizes {
        train: 1500,
        valid: 100,
        test: 400,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextFeatures {
    #[default]
    Tfidf,
    Counts,
}

/// Where the domain-adaptation rows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DaSource {
    /// A `two_domain_blobs` draw. Alternate source rows go to training and
    /// validation; alternate target rows to the unlabeled training pool and
    /// the labeled test split.
    Synth { spec: SynthSpec },
    /// Two bag-of-words corpora. Vocabulary, count filter and TF-IDF
    /// statistics are computed over both corpora together.
    Text {
        source: PathBuf,
        target: PathBuf,
        #[serde(default = "default_min_count")]
        min_count: f64,
        #[serde(default)]
        features: TextFeatures,
        #[serde(default = "default_text_split")]
        source_split: SplitSizes,
        /// Target `train` rows are used without labels; `test` rows score the model.
        #[serde(default = "default_text_split")]
        target_split: SplitSizes,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaRun {
    pub data: DaSource,
    pub network: NetworkShape,
    pub penalty: PenaltyConfig,
    #[serde(default = "default_adagrad")]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub patience: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Where the invariant-feature rows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InvariantSource {
    /// A `five_shift_domains` draw. Domains below `train_domains` form the
    /// training set, the remaining domains the test set.
    Synth {
        spec: SynthSpec,
        train_domains: usize,
    },
    /// Header-less CSV files whose columns are `label, domain, features...`.
    Csv { train: PathBuf, test: PathBuf },
}

fn default_penalty_layer1() -> PenaltyConfig {
    PenaltyConfig {
        weight: 1.0,
        layer_index: 1,
        kernel: KernelSpec::median(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantRun {
    pub data: InvariantSource,
    #[serde(default = "NetworkShape::invariant_default")]
    pub network: NetworkShape,
    #[serde(default = "default_penalty_layer1")]
    pub penalty: PenaltyConfig,
    #[serde(default = "default_adagrad")]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Absent: every update uses the whole training set.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Components of the penalty-layer PCA written to `pca.csv`.
    #[serde(default)]
    pub pca: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// IDX image files. The first `train_rows` images train the model and the
/// next `heldout_rows` are held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub train_rows: usize,
    #[serde(default)]
    pub heldout_rows: usize,
}

/// Clean-vs-noisy probe of the trained encoder, run on the held-out images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    pub corruption: CorruptionSpec,
    #[serde(default = "default_probe_l2")]
    pub l2: f64,
    #[serde(default = "default_probe_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub shuffle_labels: bool,
}

fn default_probe_l2() -> f64 {
    ProbeConfig::new(CorruptionSpec::bernoulli(0.0)).l2
}

fn default_probe_train_fraction() -> f64 {
    ProbeConfig::new(CorruptionSpec::bernoulli(0.0)).train_fraction
}

impl ProbeSettings {
    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            corruption: self.corruption,
            l2: self.l2,
            train_fraction: self.train_fraction,
            shuffle_labels: self.shuffle_labels,
        }
    }
}

fn default_hidden() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeRun {
    pub data: ImageSource,
    pub variant: AeVariant,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_sgd")]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub probe: Option<ProbeSettings>,
    /// Components of the hidden-code PCA of the held-out images.
    #[serde(default)]
    pub pca: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Training and held-out rows for the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GmmnSource {
    Idx {
        images: PathBuf,
        train_rows: usize,
        heldout_rows: usize,
    },
    /// Two independent draws of a synthetic spec (usually `ring2d`).
    Synth {
        spec: SynthSpec,
        heldout_rows: usize,
    },
}

fn default_samples() -> usize {
    100
}

fn default_eval_every() -> usize {
    100
}

fn default_eval_samples() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmnRun {
    pub data: GmmnSource,
    /// Absent: 32 latent units, `64 ReLU → 128 ReLU →` data width, with a
    /// sigmoid head for images and an identity head for synthetic data.
    #[serde(default)]
    pub generator: Option<GenerativeSpec>,
    #[serde(default = "KernelSpec::median")]
    pub kernel: KernelSpec,
    #[serde(default = "default_adagrad")]
    pub optimizer: OptimizerConfig,
    pub updates: usize,
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Rows of `samples.csv`.
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let ok = r#"{"data":{"kind":"synth","spec":{"kind":"ring2d","n":10,"components":2,"radius":1,"noise":0.1},"heldout_rows":5},
                    "updates":3,"batch_size":2,"seed":1}"#;
        let run: GmmnRun = serde_json::from_str(ok).unwrap();
        assert_eq!(run.eval_every, 100);
        assert_eq!(run.kernel, KernelSpec::median());
        let bad = ok.replace("\"seed\":1", "\"seed\":1,\"sed\":2");
        assert!(serde_json::from_str::<GmmnRun>(&bad).is_err());
    }

    #[test]
    fn defaults_materialize_on_output() {
        let text = r#"{"data":{"kind":"synth","spec":{"kind":"five_shift_domains","dim":4,"classes":2,"domains":6,
                      "per_cell":2,"class_spread":1,"domain_shift":1,"noise":0.5},"train_domains":5},"epochs":2,"seed":0}"#;
        let run: InvariantRun = serde_json::from_str(text).unwrap();
        let out = serde_json::to_value(&run).unwrap();
        assert_eq!(out["network"]["hidden"][0]["width"], 256);
        assert_eq!(out["penalty"]["layer_index"], 1);
        assert_eq!(out["optimizer"]["kind"], "adagrad");
        assert_eq!(out["weight_decay"], 1e-4);
        let back: InvariantRun = serde_json::from_value(out).unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn network_shape_adds_the_output_layer() {
        let spec = NetworkShape::invariant_default().build(10, 3);
        assert_eq!(spec.layers.len(), 3);
        assert_eq!(spec.output_dim(), 3);
        assert_eq!(spec.layers[0].dropout_rate, 0.2);
        assert_eq!(spec.layers[2].dropout_rate, 0.0);
    }
}
