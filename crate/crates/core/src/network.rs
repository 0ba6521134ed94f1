//! Fully connected networks: layer specs, parameters, a forward pass that
//! exposes every layer's activations, optimizers and checkpoints.
//!
//! Each layer computes `a = act(input · W + b)`. The activation `a` is what
//! [`forward`] reports for that layer (penalties attach there); the layer's
//! dropout is applied to `a` only on its way into the next layer.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Chains `input_dim -> widths[0] -> widths[1] -> ...`, with `dropout_rate`
    /// after every layer except the last.
    pub fn chain(input_dim: usize, widths: &[(usize, Activation)], dropout_rate: f64) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for (i, &(width, activation)) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            layers.push(LayerSpec {
                input_dim: prev,
                output_dim: width,
                activation,
                dropout_rate: if last { 0.0 } else { dropout_rate },
            });
            prev = width;
        }
        Self { layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.input_dim == 0 || l.output_dim == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
            if !(0.0..1.0).contains(&l.dropout_rate) {
                return Err(Error::Config(format!(
                    "layer {i} dropout rate {} not in [0, 1)",
                    l.dropout_rate
                )));
            }
            if i > 0 && self.layers[i - 1].output_dim != l.input_dim {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.input_dim,
                    i - 1,
                    self.layers[i - 1].output_dim
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `input_dim x output_dim`
    pub w: Tensor,
    /// `1 x output_dim`
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub layers: Vec<LayerParams>,
}

impl Parameters {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let bound = (6.0 / (l.input_dim + l.output_dim) as f64).sqrt();
                let w = (0..l.input_dim * l.output_dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                LayerParams {
                    w: Tensor::from_vec(l.input_dim, l.output_dim, w).expect("sized above"),
                    b: Tensor::zeros(1, l.output_dim),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// `W0, b0, W1, b1, ...`
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::dim(
                "parameters",
                format!(
                    "{} layers for a {}-layer spec",
                    self.layers.len(),
                    spec.layers.len()
                ),
            ));
        }
        for (i, (p, l)) in self.layers.iter().zip(&spec.layers).enumerate() {
            if p.w.shape() != (l.input_dim, l.output_dim) || p.b.shape() != (1, l.output_dim) {
                return Err(Error::dim(
                    "parameters",
                    format!("layer {i} shapes do not match its spec"),
                ));
            }
        }
        Ok(())
    }
}

/// Parameter leaves of one tape, in the order of [`Parameters::tensors`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &Parameters) -> Result<Self> {
        let layers = params
            .layers
            .iter()
            .map(|l| Ok((tape.leaf(l.w.clone())?, tape.leaf(l.b.clone())?)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Gradients in the order of [`Parameters::tensors`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.nodes().map(|id| grads.wrt(id)).collect()
    }

    /// `coef · Σ ‖W‖²` over weight matrices (biases excluded).
    pub fn weight_decay(&self, tape: &mut Tape, coef: f64) -> Result<Option<NodeId>> {
        if coef == 0.0 {
            return Ok(None);
        }
        let mut total = None;
        for &(w, _) in &self.layers {
            let sq = tape.square(w)?;
            let s = tape.sum(sq)?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        match total {
            Some(t) => Ok(Some(tape.scale(t, coef)?)),
            None => Ok(None),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One layer, `act(input · W + b)`, without dropout.
pub fn apply_layer(
    tape: &mut Tape,
    layer: &LayerSpec,
    (w, b): (NodeId, NodeId),
    input: NodeId,
) -> Result<NodeId> {
    let z = tape.matmul(input, w)?;
    let z = tape.add_row(z, b)?;
    match layer.activation {
        Activation::Relu => tape.relu(z),
        Activation::Sigmoid => tape.sigmoid(z),
        Activation::Identity => Ok(z),
    }
}

/// Runs the network on `x`, returning every layer's post-activation output
/// (before that layer's dropout). The last entry is the network output.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    spec: &NetworkSpec,
    params: &BoundParams,
    x: NodeId,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<NodeId>> {
    let cols = tape.value(x).cols();
    if cols != spec.input_dim() {
        return Err(Error::dim(
            "forward",
            format!(
                "input has {cols} columns, network expects {}",
                spec.input_dim()
            ),
        ));
    }
    let mut activations = Vec::with_capacity(spec.layers.len());
    let mut input = x;
    for (layer, &wb) in spec.layers.iter().zip(&params.layers) {
        let a = apply_layer(tape, layer, wb, input)?;
        activations.push(a);
        input = tape.dropout(a, layer.dropout_rate, rng, mode == Mode::Train)?;
    }
    Ok(activations)
}

/// Eval-mode activations of every layer, as plain tensors.
pub fn predict(spec: &NetworkSpec, params: &Parameters, x: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params)?;
    let xn = tape.leaf(x.clone())?;
    // eval mode never draws from the generator
    let mut unused = crate::rng::stream(0, "unused");
    let acts = forward(&mut tape, spec, &bound, xn, Mode::Eval, &mut unused)?;
    Ok(acts.into_iter().map(|a| tape.value(a).clone()).collect())
}

/// Index of the largest entry of each row.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            t.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adagrad,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Only used by `sgd_momentum`.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Only used by `adagrad`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn adagrad(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adagrad,
            learning_rate,
            momentum: default_momentum(),
            epsilon: default_epsilon(),
        }
    }

    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            epsilon: default_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} not in [0, 1)",
                self.momentum
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("adagrad epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer with per-parameter state: velocities for SGD with momentum,
/// squared-gradient accumulators for AdaGrad.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &Parameters) -> Result<Self> {
        config.validate()?;
        let state = params
            .tensors()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Ok(Self {
            config,
            state,
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Accumulators (AdaGrad) or velocities (SGD), one per parameter tensor.
    pub fn state(&self) -> &[Tensor] {
        &self.state
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.state.len() {
            return Err(Error::dim(
                "optimizer_step",
                format!(
                    "{} gradients for {} parameters",
                    grads.len(),
                    self.state.len()
                ),
            ));
        }
        for g in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: "optimizer_step",
                });
            }
        }
        let lr = self.config.learning_rate;
        for ((p, g), s) in params.tensors_mut().zip(grads).zip(&mut self.state) {
            p.expect_same_shape(g, "optimizer_step")?;
            let (p, g, s) = (p.data_mut(), g.data(), s.data_mut());
            match self.config.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = self.config.momentum;
                    for i in 0..p.len() {
                        s[i] = mu * s[i] - lr * g[i];
                        p[i] += s[i];
                    }
                }
                OptimizerKind::Adagrad => {
                    let eps = self.config.epsilon;
                    for i in 0..p.len() {
                        s[i] += g[i] * g[i];
                        p[i] -= lr * g[i] / (s[i].sqrt() + eps);
                    }
                }
            }
        }
        self.steps += 1;
        if !params.is_finite() {
            return Err(Error::NonFinite {
                op: "optimizer_step",
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

/// On-disk form of a trained network.
///
/// Doubles are written in shortest round-trip form, so loading restores
/// every parameter bit for bit.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    spec: NetworkSpec,
    layers: Vec<LayerRecord>,
    optimizer: Option<OptimizerKind>,
    step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Parameters,
    pub optimizer: Option<OptimizerKind>,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let record = CheckpointRecord {
            spec: self.spec.clone(),
            layers: self
                .params
                .layers
                .iter()
                .map(|l| LayerRecord {
                    w: l.w.to_rows(),
                    b: l.b.data().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer,
            step: self.step,
        };
        Ok(serde_json::to_string(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: CheckpointRecord = serde_json::from_str(text)?;
        record.spec.validate()?;
        let layers = record
            .layers
            .into_iter()
            .map(|l| {
                let w = Tensor::from_rows(&l.w)?;
                let cols = l.b.len();
                Ok(LayerParams {
                    w,
                    b: Tensor::from_vec(1, cols, l.b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = Parameters { layers };
        params.check_against(&record.spec)?;
        Ok(Self {
            spec: record.spec,
            params,
            optimizer: record.optimizer,
            step: record.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn da_spec() -> NetworkSpec {
        NetworkSpec::chain(
            10,
            &[
                (128, Activation::Relu),
                (64, Activation::Relu),
                (2, Activation::Identity),
            ],
            0.0,
        )
    }

    #[test]
    fn init_bounds_and_replay() {
        let spec = da_spec();
        let p = Parameters::init(&spec, &mut stream(3, "init")).unwrap();
        assert_eq!(p, Parameters::init(&spec, &mut stream(3, "init")).unwrap());
        for (l, s) in p.layers.iter().zip(&spec.layers) {
            assert!(l.b.data().iter().all(|&v| v == 0.0));
            let bound = (6.0 / (s.input_dim + s.output_dim) as f64).sqrt();
            assert!(l.w.data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = da_spec();
        spec.layers[1].input_dim = 5;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = da_spec();
        spec.layers[0].dropout_rate = 1.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn exposes_hidden_layers() {
        let spec = da_spec();
        let p = Parameters::init(&spec, &mut stream(1, "init")).unwrap();
        let x = Tensor::filled(3, 10, 0.2);
        let acts = predict(&spec, &p, &x).unwrap();
        assert_eq!(acts.len(), 3);
        assert_eq!(acts[1].shape(), (3, 64));
        assert!(acts[0].data().iter().all(|&v| v >= 0.0));
        assert_eq!(acts, predict(&spec, &p, &x).unwrap());
        assert!(predict(&spec, &p, &Tensor::zeros(3, 9)).is_err());
    }

    #[test]
    fn zero_weights_identity_activation_output_is_bias() {
        let spec = NetworkSpec::chain(4, &[(3, Activation::Identity)], 0.0);
        let mut p = Parameters::init(&spec, &mut stream(1, "init")).unwrap();
        p.layers[0].w = Tensor::zeros(4, 3);
        let out = predict(&spec, &p, &Tensor::filled(2, 4, 1.5)).unwrap();
        assert_eq!(out[0], Tensor::zeros(2, 3));
    }

    #[test]
    fn train_equals_eval_without_dropout() {
        let spec = da_spec();
        let p = Parameters::init(&spec, &mut stream(1, "init")).unwrap();
        let x = Tensor::filled(2, 10, -0.4);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p).unwrap();
        let xn = tape.leaf(x.clone()).unwrap();
        let acts = forward(
            &mut tape,
            &spec,
            &bound,
            xn,
            Mode::Train,
            &mut stream(1, "d"),
        )
        .unwrap();
        let eval = predict(&spec, &p, &x).unwrap();
        for (a, e) in acts.iter().zip(&eval) {
            assert_eq!(tape.value(*a), e);
        }
    }

    fn one_param(v: f64) -> Parameters {
        Parameters {
            layers: vec![LayerParams {
                w: Tensor::scalar(v),
                b: Tensor::scalar(0.0),
            }],
        }
    }

    #[test]
    fn adagrad_first_step() {
        let mut p = one_param(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adagrad(0.1), &p).unwrap();
        opt.step(&mut p, &[Tensor::scalar(3.0), Tensor::scalar(0.0)])
            .unwrap();
        let delta = p.layers[0].w.data()[0] - 1.0;
        assert!((delta - (-0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(p.layers[0].b.data()[0], 0.0);
    }

    #[test]
    fn sgd_without_momentum_is_vanilla() {
        let mut p = one_param(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd_momentum(0.5, 0.0), &p).unwrap();
        for _ in 0..3 {
            opt.step(&mut p, &[Tensor::scalar(2.0), Tensor::scalar(0.0)])
                .unwrap();
        }
        assert_eq!(p.layers[0].w.data()[0], 1.0 - 3.0 * 0.5 * 2.0);
    }

    #[test]
    fn adagrad_accumulator_never_decreases() {
        let mut rng = stream(11, "g");
        let mut p = one_param(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::adagrad(0.05), &p).unwrap();
        let mut prev = 0.0;
        for _ in 0..100 {
            let g = rng.random_range(-2.0..2.0);
            opt.step(&mut p, &[Tensor::scalar(g), Tensor::scalar(0.0)])
                .unwrap();
            let acc = opt.state()[0].data()[0];
            assert!(acc >= prev && acc >= 0.0);
            prev = acc;
        }
        assert!(p.is_finite());
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = one_param(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::adagrad(0.05), &p).unwrap();
        let r = opt.step(&mut p, &[Tensor::scalar(f64::NAN), Tensor::scalar(0.0)]);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let spec = da_spec();
        let params = Parameters::init(&spec, &mut stream(5, "init")).unwrap();
        let ck = Checkpoint {
            spec,
            params,
            optimizer: Some(OptimizerKind::Adagrad),
            step: 17,
        };
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let spec = NetworkSpec::chain(2, &[(2, Activation::Relu)], 0.0);
        let text = serde_json::json!({
            "spec": spec,
            "layers": [{"w": [[1.0, 2.0]], "b": [0.0, 0.0]}],
            "optimizer": null,
            "step": 0
        })
        .to_string();
        assert!(Checkpoint::from_json(&text).is_err());
    }
}
