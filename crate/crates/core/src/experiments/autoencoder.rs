//! One-hidden-layer auto-encoders: plain, denoising, contractive, and two
//! variants with an MMD penalty between the codes of clean and corrupted
//! inputs.
//!
//! The encoder is `h = sigmoid(x·W₀ + b₀)` and the decoder
//! `r = sigmoid(h·W₁ + b₁)`. Reconstruction error is the squared error
//! summed over coordinates and averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::{corrupt, CorruptionSpec};
use crate::error::{Error, Result};
use crate::kernels::{mmd_biased_node, Kernel};
use crate::network::{
    apply_layer, predict, Activation, BoundParams, LayerParams, LayerSpec, NetworkSpec, Optimizer,
    OptimizerConfig, Parameters,
};
use crate::rng::{stream, streams};
use crate::tensor::Tensor;

use super::{check_positive, check_weight_decay, finite, minibatches, History, PenaltyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeKind {
    Ae,
    Dae,
    Cae,
    Mmd,
    MmdDae,
}

impl AeKind {
    pub const ALL: [AeKind; 5] = [
        AeKind::Ae,
        AeKind::Dae,
        AeKind::Cae,
        AeKind::Mmd,
        AeKind::MmdDae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AeKind::Ae => "ae",
            AeKind::Dae => "dae",
            AeKind::Cae => "cae",
            AeKind::Mmd => "mmd",
            AeKind::MmdDae => "mmd_dae",
        }
    }

    fn needs_corruption(self) -> bool {
        matches!(self, AeKind::Dae | AeKind::Mmd | AeKind::MmdDae)
    }

    fn needs_penalty(self) -> bool {
        matches!(self, AeKind::Mmd | AeKind::MmdDae)
    }

    /// Whether the decoder reconstructs from the corrupted input.
    fn denoises(self) -> bool {
        matches!(self, AeKind::Dae | AeKind::MmdDae)
    }
}

/// Which objective to train, with exactly the settings that objective uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeVariant {
    pub kind: AeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contraction_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<PenaltyConfig>,
}

impl AeVariant {
    pub fn ae() -> Self {
        Self {
            kind: AeKind::Ae,
            corruption: None,
            contraction_weight: None,
            penalty: None,
        }
    }

    pub fn dae(corruption: CorruptionSpec) -> Self {
        Self {
            kind: AeKind::Dae,
            corruption: Some(corruption),
            ..Self::ae()
        }
    }

    pub fn cae(weight: f64) -> Self {
        Self {
            kind: AeKind::Cae,
            contraction_weight: Some(weight),
            ..Self::ae()
        }
    }

    pub fn mmd(corruption: CorruptionSpec, penalty: PenaltyConfig) -> Self {
        Self {
            kind: AeKind::Mmd,
            corruption: Some(corruption),
            penalty: Some(penalty),
            ..Self::ae()
        }
    }

    pub fn mmd_dae(corruption: CorruptionSpec, penalty: PenaltyConfig) -> Self {
        Self {
            kind: AeKind::MmdDae,
            ..Self::mmd(corruption, penalty)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind.name();
        let check = |present: bool, needed: bool, field: &str| -> Result<()> {
            match (present, needed) {
                (false, true) => Err(Error::Config(format!("variant {kind} requires `{field}`"))),
                (true, false) => Err(Error::Config(format!(
                    "variant {kind} does not use `{field}`"
                ))),
                _ => Ok(()),
            }
        };
        check(
            self.corruption.is_some(),
            self.kind.needs_corruption(),
            "corruption",
        )?;
        check(
            self.contraction_weight.is_some(),
            self.kind == AeKind::Cae,
            "contraction_weight",
        )?;
        check(self.penalty.is_some(), self.kind.needs_penalty(), "penalty")?;
        if let Some(c) = &self.corruption {
            c.validate()?;
        }
        if let Some(c) = self.contraction_weight {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!(
                    "contraction_weight must be finite and non-negative, got {c}"
                )));
            }
        }
        if let Some(p) = &self.penalty {
            // the penalty acts on the code, the first of the two layers
            p.validate(1)?;
        }
        Ok(())
    }

    fn penalty_active(&self) -> bool {
        self.penalty.is_some_and(|p| p.is_active())
    }

    /// Whether a corrupted copy of each batch is needed at all.
    fn uses_corruption(&self) -> bool {
        self.kind.denoises() || self.penalty_active()
    }
}

fn default_hidden() -> usize {
    100
}

fn default_batch_size() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub variant: AeVariant,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.optimizer.validate()?;
        check_positive("hidden", self.hidden)?;
        check_positive("epochs", self.epochs)?;
        check_positive("batch_size", self.batch_size)?;
        check_weight_decay(self.weight_decay)
    }

    /// Encoder then decoder, both sigmoid.
    pub fn network(&self, input_dim: usize) -> NetworkSpec {
        NetworkSpec::chain(
            input_dim,
            &[
                (self.hidden, Activation::Sigmoid),
                (input_dim, Activation::Sigmoid),
            ],
            0.0,
        )
    }
}

/// Nodes of one minibatch objective.
#[derive(Clone, Copy, Debug)]
pub struct AeTerms {
    pub loss: NodeId,
    pub reconstruction: NodeId,
    /// Contraction penalty (cae) or unweighted MMD (mmd variants).
    pub penalty: Option<NodeId>,
    pub weight_decay: Option<NodeId>,
}

/// `mean_b Σ_j (h_bj (1 − h_bj))² ‖W_:,j‖²`: the squared Frobenius norm of
/// the Jacobian of a sigmoid layer, averaged over the batch. `h` is the
/// layer's output and `w` its weight matrix.
pub fn contraction_penalty_node(tape: &mut Tape, h: NodeId, w: NodeId) -> Result<NodeId> {
    let one_minus = tape.affine(h, -1.0, 1.0)?;
    let slope = tape.mul(h, one_minus)?;
    let slope_sq = tape.square(slope)?;
    let w_sq = tape.square(w)?;
    let col_norms = tape.column_sums(w_sq)?;
    let col_norms_t = tape.transpose(col_norms)?;
    let per_row = tape.matmul(slope_sq, col_norms_t)?;
    tape.mean(per_row)
}

/// Value form of [`contraction_penalty_node`] for one sigmoid layer.
pub fn contraction_penalty(layer: &LayerSpec, params: &LayerParams, x: &Tensor) -> Result<f64> {
    if layer.activation != Activation::Sigmoid {
        return Err(Error::Usage(
            "the contraction penalty assumes a sigmoid layer".into(),
        ));
    }
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone())?;
    let w = tape.leaf(params.w.clone())?;
    let b = tape.leaf(params.b.clone())?;
    let h = apply_layer(&mut tape, layer, (w, b), xn)?;
    let p = contraction_penalty_node(&mut tape, h, w)?;
    tape.value(p).item()
}

fn layer_values(layer: &LayerSpec, params: &LayerParams, x: &Tensor) -> Result<Tensor> {
    let spec = NetworkSpec {
        layers: vec![layer.clone()],
    };
    let p = Parameters {
        layers: vec![params.clone()],
    };
    Ok(predict(&spec, &p, x)?.remove(0))
}

/// `mean_x Σ_i ‖h(x + ε e_i) − h(x)‖² / ε²`, the coordinate-wise perturbation
/// sum. Stacking the perturbed codes `h(x + ε e_i)` as one sample and the
/// repeated clean code as the other, this is `d/ε²` times a linear-kernel MMD
/// between the two; as `ε → 0` it tends to the contraction penalty.
pub fn coordinate_perturbation_penalty(
    layer: &LayerSpec,
    params: &LayerParams,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Usage(format!(
            "perturbation size must be positive, got {eps}"
        )));
    }
    if x.is_empty() {
        return Err(Error::Usage("no rows to perturb".into()));
    }
    let d = x.cols();
    let clean = layer_values(layer, params, x)?;
    let mut total = 0.0;
    for r in 0..x.rows() {
        let mut shifted = Tensor::zeros(d, d);
        for i in 0..d {
            shifted.row_mut(i).copy_from_slice(x.row(r));
            shifted.row_mut(i)[i] += eps;
        }
        let h = layer_values(layer, params, &shifted)?;
        for i in 0..d {
            total += h
                .row(i)
                .iter()
                .zip(clean.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(total / (eps * eps * x.rows() as f64))
}

/// One minibatch objective. `corrupted` must be given when the variant
/// reconstructs from a corrupted input or has an active MMD penalty.
pub fn objective(
    tape: &mut Tape,
    config: &AeConfig,
    kernel: Option<&Kernel>,
    bound: &BoundParams,
    clean: &Tensor,
    corrupted: Option<&Tensor>,
) -> Result<AeTerms> {
    let spec = config.network(clean.cols());
    let (enc, dec) = (bound.layers[0], bound.layers[1]);
    let variant = &config.variant;
    let x = tape.leaf(clean.clone())?;
    let x_tilde = match corrupted {
        Some(c) => Some(tape.leaf(c.clone())?),
        None if variant.uses_corruption() => {
            return Err(Error::Usage(format!(
                "variant {} needs a corrupted batch",
                variant.kind.name()
            )))
        }
        None => None,
    };

    let needs_clean_code = !variant.kind.denoises() || variant.penalty_active();
    let h_clean = if needs_clean_code {
        Some(apply_layer(tape, &spec.layers[0], enc, x)?)
    } else {
        None
    };
    let h_noisy = match x_tilde {
        Some(xt) if variant.uses_corruption() => Some(apply_layer(tape, &spec.layers[0], enc, xt)?),
        _ => None,
    };
    let code = if variant.kind.denoises() {
        h_noisy.expect("denoising variants encode the corrupted batch")
    } else {
        h_clean.expect("other variants encode the clean batch")
    };
    let recon = apply_layer(tape, &spec.layers[1], dec, code)?;
    let reconstruction = tape.squared_error(recon, x)?;
    let mut loss = reconstruction;

    let mut penalty = None;
    match variant.kind {
        AeKind::Cae => {
            let c = variant.contraction_weight.expect("validated");
            if c > 0.0 {
                let h = h_clean.expect("cae encodes the clean batch");
                let p = contraction_penalty_node(tape, h, enc.0)?;
                let weighted = tape.scale(p, c)?;
                loss = tape.add(loss, weighted)?;
                penalty = Some(p);
            }
        }
        AeKind::Mmd | AeKind::MmdDae if variant.penalty_active() => {
            let kernel = kernel.ok_or_else(|| Error::Usage("mmd variants need a kernel".into()))?;
            let p = mmd_biased_node(
                tape,
                kernel,
                h_clean.expect("encoded above"),
                h_noisy.expect("encoded above"),
            )?;
            let weighted = tape.scale(p, variant.penalty.expect("validated").weight)?;
            loss = tape.add(loss, weighted)?;
            penalty = Some(p);
        }
        _ => {}
    }
    let weight_decay = bound.weight_decay(tape, config.weight_decay)?;
    if let Some(wd) = weight_decay {
        loss = tape.add(loss, wd)?;
    }
    Ok(AeTerms {
        loss,
        reconstruction,
        penalty,
        weight_decay,
    })
}

#[derive(Clone, Debug)]
pub struct AeOutcome {
    pub spec: NetworkSpec,
    pub params: Parameters,
    pub history: History,
    /// Kernel of the MMD penalty, for the mmd variants.
    pub kernel: Option<Kernel>,
}

impl AeOutcome {
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        encode(&self.spec, &self.params, x)
    }
}

/// Hidden code of an encoder/decoder pair (the first layer's output).
pub fn encode(spec: &NetworkSpec, params: &Parameters, x: &Tensor) -> Result<Tensor> {
    Ok(predict(spec, params, x)?.remove(0))
}

pub fn history_columns(with_valid: bool) -> Vec<&'static str> {
    let mut c = vec!["epoch", "loss", "reconstruction", "penalty"];
    if with_valid {
        c.push("valid_reconstruction");
    }
    c
}

/// Trains an auto-encoder on rows of `train` (values in `[0, 1]`). Each
/// history row averages the minibatch terms of one epoch, weighted by batch
/// size; `penalty` is the unweighted contraction or MMD term (0 when the
/// variant has none). With `valid`, the clean reconstruction error on it is
/// logged too.
pub fn train_autoencoder(
    train: &Tensor,
    valid: Option<&Tensor>,
    config: &AeConfig,
) -> Result<AeOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training rows".into()));
    }
    if train.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data("auto-encoder inputs must lie in [0, 1]".into()));
    }
    if let Some(v) = valid {
        if v.cols() != train.cols() {
            return Err(Error::dim(
                "train_autoencoder",
                format!(
                    "validation rows have {} columns, training rows {}",
                    v.cols(),
                    train.cols()
                ),
            ));
        }
    }
    let spec = config.network(train.cols());
    let variant = &config.variant;
    let mut params = Parameters::init(&spec, &mut stream(config.seed, streams::INIT))?;
    let mut shuffle_rng = stream(config.seed, streams::SHUFFLE);
    let mut corruption_rng = stream(config.seed, streams::CORRUPTION);

    let kernel = match variant.penalty {
        Some(p) if p.is_active() => {
            let n = train.rows().min(super::MEDIAN_HEURISTIC_ROWS);
            let head = train.select_rows(&(0..n).collect::<Vec<_>>());
            let noisy = corrupt(
                &head,
                &variant.corruption.expect("validated"),
                &mut stream(config.seed, streams::EVAL),
            )?;
            Some(p.kernel.resolve(
                &encode(&spec, &params, &head)?,
                &encode(&spec, &params, &noisy)?,
            )?)
        }
        _ => None,
    };

    let mut optimizer = Optimizer::new(config.optimizer.clone(), &params)?;
    let mut history = History::new(&history_columns(valid.is_some()));
    for epoch in 1..=config.epochs {
        let mut sums = [0.0; 3];
        for batch in minibatches(train.rows(), config.batch_size, &mut shuffle_rng) {
            let x = train.select_rows(&batch);
            let mut step = || -> Result<[f64; 3]> {
                let noisy = if variant.uses_corruption() {
                    Some(corrupt(
                        &x,
                        &variant.corruption.expect("validated"),
                        &mut corruption_rng,
                    )?)
                } else {
                    None
                };
                let mut tape = Tape::new();
                let bound = BoundParams::bind(&mut tape, &params)?;
                let terms = objective(
                    &mut tape,
                    config,
                    kernel.as_ref(),
                    &bound,
                    &x,
                    noisy.as_ref(),
                )?;
                let grads = tape.backward(terms.loss)?;
                optimizer.step(&mut params, &bound.gradients(&grads))?;
                Ok([
                    tape.value(terms.loss).item()?,
                    tape.value(terms.reconstruction).item()?,
                    terms.penalty.map_or(Ok(0.0), |p| tape.value(p).item())?,
                ])
            };
            let vals = step().map_err(|e| e.at_epoch(epoch))?;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * batch.len() as f64;
            }
        }
        let n = train.rows() as f64;
        let mut row = vec![
            epoch as f64,
            finite(sums[0] / n, "loss", epoch)?,
            sums[1] / n,
            sums[2] / n,
        ];
        if let Some(v) = valid {
            let recon = predict(&spec, &params, v)?.remove(1);
            let err = recon
                .data()
                .iter()
                .zip(v.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / v.rows().max(1) as f64;
            row.push(err);
        }
        history.push(row);
    }
    Ok(AeOutcome {
        spec,
        params,
        history,
        kernel,
    })
}
