//! Moment-matching generator: a decoder network `f` maps draws from a
//! uniform prior on `[−1, 1]^latent_dim` to samples, and is trained by
//! minimizing the MMD between a batch of its samples and a data batch.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernels::{mmd_biased, mmd_biased_node, Kernel};
use crate::network::{
    forward, predict, Activation, BoundParams, Mode, NetworkSpec, Optimizer, OptimizerConfig,
    Parameters,
};
use crate::rng::{stream, streams};
use crate::tensor::Tensor;

use super::{check_positive, finite, History, KernelSpec};

fn default_latent_dim() -> usize {
    32
}

fn default_resample_period() -> usize {
    200
}

/// Prior and decoder of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeSpec {
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub decoder: NetworkSpec,
    /// Updates between fresh prior draws.
    #[serde(default = "default_resample_period")]
    pub resample_period: usize,
}

impl GenerativeSpec {
    /// `latent → 64 ReLU → 128 ReLU → output_dim` with the given head.
    pub fn standard(latent_dim: usize, output_dim: usize, head: Activation) -> Self {
        Self {
            latent_dim,
            decoder: NetworkSpec::chain(
                latent_dim,
                &[
                    (64, Activation::Relu),
                    (128, Activation::Relu),
                    (output_dim, head),
                ],
                0.0,
            ),
            resample_period: default_resample_period(),
        }
    }

    /// The image generator: 32 latent units, 784 sigmoid outputs.
    pub fn mnist() -> Self {
        Self::standard(32, 784, Activation::Sigmoid)
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("latent_dim", self.latent_dim)?;
        check_positive("resample_period", self.resample_period)?;
        self.decoder.validate()?;
        if self.decoder.input_dim() != self.latent_dim {
            return Err(Error::Config(format!(
                "decoder takes {} inputs but latent_dim is {}",
                self.decoder.input_dim(),
                self.latent_dim
            )));
        }
        if self.decoder.layers.iter().any(|l| l.dropout_rate != 0.0) {
            return Err(Error::Config(
                "the generator decoder does not use dropout".into(),
            ));
        }
        Ok(())
    }
}

fn default_eval_every() -> usize {
    100
}

fn default_eval_samples() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeConfig {
    pub generator: GenerativeSpec,
    pub kernel: KernelSpec,
    pub optimizer: OptimizerConfig,
    pub updates: usize,
    pub batch_size: usize,
    /// Updates between history rows.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Rows of generated, training and held-out samples used for the logged MMDs.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    pub seed: u64,
}

impl GenerativeConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.kernel.validate()?;
        self.optimizer.validate()?;
        check_positive("updates", self.updates)?;
        check_positive("batch_size", self.batch_size)?;
        check_positive("eval_every", self.eval_every)?;
        check_positive("eval_samples", self.eval_samples)
    }
}

/// `n` draws from the uniform prior on `[−1, 1]^latent_dim`.
pub fn sample_prior<R: Rng + ?Sized>(n: usize, latent_dim: usize, rng: &mut R) -> Tensor {
    let v = (0..n * latent_dim)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    Tensor::from_vec(n, latent_dim, v).expect("sized above")
}

/// `n` independent samples `f(h)`, `h` drawn fresh from the prior.
pub fn sample_generative<R: Rng + ?Sized>(
    spec: &GenerativeSpec,
    params: &Parameters,
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    params.check_against(&spec.decoder)?;
    let h = sample_prior(n, spec.latent_dim, rng);
    Ok(predict(&spec.decoder, params, &h)?
        .pop()
        .expect("decoder has layers"))
}

/// `MMD(f(h), data)` on one batch.
pub fn objective(
    tape: &mut Tape,
    spec: &GenerativeSpec,
    kernel: &Kernel,
    bound: &BoundParams,
    latents: &Tensor,
    data: &Tensor,
) -> Result<NodeId> {
    let h = tape.leaf(latents.clone())?;
    // the decoder has no dropout, so the generator is never drawn from
    let mut unused = stream(0, "unused");
    let out = forward(tape, &spec.decoder, bound, h, Mode::Train, &mut unused)?;
    let y = tape.leaf(data.clone())?;
    mmd_biased_node(tape, kernel, *out.last().expect("decoder has layers"), y)
}

#[derive(Clone, Debug)]
pub struct GenerativeOutcome {
    pub params: Parameters,
    pub history: History,
    pub kernel: Kernel,
}

pub const HISTORY_COLUMNS: [&str; 3] = ["update", "train_mmd", "heldout_mmd"];

fn head(t: &Tensor, n: usize) -> Tensor {
    t.select_rows(&(0..t.rows().min(n)).collect::<Vec<_>>())
}

/// Trains the decoder. Every `eval_every` updates (and at update 0) the
/// history logs the MMD between samples from a fixed set of evaluation
/// latents and, respectively, the leading training rows and the held-out
/// rows. A Gaussian bandwidth chosen by the median rule is computed from
/// those training and held-out rows.
pub fn train_generative(
    train: &Tensor,
    heldout: &Tensor,
    config: &GenerativeConfig,
) -> Result<GenerativeOutcome> {
    config.validate()?;
    let spec = &config.generator;
    let out_dim = spec.decoder.output_dim();
    for (name, t) in [("training", train), ("held-out", heldout)] {
        if t.cols() != out_dim {
            return Err(Error::dim(
                "train_generative",
                format!(
                    "{name} rows have {} columns, decoder produces {out_dim}",
                    t.cols()
                ),
            ));
        }
        if t.is_empty() {
            return Err(Error::Data(format!("no {name} rows")));
        }
    }
    if config.batch_size > train.rows() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training rows",
            config.batch_size,
            train.rows()
        )));
    }

    let train_eval = head(train, config.eval_samples);
    let heldout_eval = head(heldout, config.eval_samples);
    let kernel = config.kernel.resolve(&train_eval, &heldout_eval)?;
    let eval_latents = sample_prior(
        config.eval_samples,
        spec.latent_dim,
        &mut stream(config.seed, streams::EVAL),
    );

    let mut params = Parameters::init(&spec.decoder, &mut stream(config.seed, streams::INIT))?;
    let mut prior_rng = stream(config.seed, streams::PRIOR);
    let mut data_rng = stream(config.seed, streams::DATA);
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &params)?;

    let mut history = History::new(&HISTORY_COLUMNS);
    let evaluate = |params: &Parameters, update: usize| -> Result<Vec<f64>> {
        let samples = predict(&spec.decoder, params, &eval_latents)?
            .pop()
            .expect("decoder has layers");
        Ok(vec![
            update as f64,
            finite(
                mmd_biased(&kernel, &samples, &train_eval)?,
                "train_mmd",
                update,
            )?,
            finite(
                mmd_biased(&kernel, &samples, &heldout_eval)?,
                "heldout_mmd",
                update,
            )?,
        ])
    };
    history.push(evaluate(&params, 0)?);

    let mut latents = Tensor::zeros(0, spec.latent_dim);
    for update in 0..config.updates {
        if update % spec.resample_period == 0 {
            latents = sample_prior(config.batch_size, spec.latent_dim, &mut prior_rng);
        }
        let rows = index::sample(&mut data_rng, train.rows(), config.batch_size).into_vec();
        let batch = train.select_rows(&rows);
        let mut step = || -> Result<()> {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params)?;
            let loss = objective(&mut tape, spec, &kernel, &bound, &latents, &batch)?;
            let grads = tape.backward(loss)?;
            optimizer.step(&mut params, &bound.gradients(&grads))
        };
        step().map_err(|e| e.at_epoch(update + 1))?;
        if (update + 1) % config.eval_every == 0 || update + 1 == config.updates {
            history.push(evaluate(&params, update + 1)?);
        }
    }
    Ok(GenerativeOutcome {
        params,
        history,
        kernel,
    })
}
