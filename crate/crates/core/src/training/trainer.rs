use serde::{Deserialize, Serialize};

use crate::datagen::ActivationBatch;
use crate::error::{Error, Result};
use crate::model::{Architecture, DenseTopKSae, SaeModel, ScaleSae, ScaleShape};
use crate::rng::Rng;
use crate::training::adam::{adam_step, Adam, AdamConfig};
use crate::training::backward::backward;
use crate::training::config::TrainConfig;

/// One logged training step. Losses are those of the batch before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub recon_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub mean_l0: f64,
    /// Fraction of tokens routed to each expert; sums to `e_active`.
    pub expert_load: Vec<f64>,
    /// Batch-mean router probabilities; sums to 1.
    pub mean_router_probs: Vec<f64>,
    pub omega: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SaeModel,
    pub reports: Vec<StepReport>,
}

pub fn init_model(config: &TrainConfig, data_mean: &[f64], rng: &mut Rng) -> Result<SaeModel> {
    config.validate()?;
    if data_mean.len() != config.d_model {
        return Err(Error::ShapeMismatch {
            op: "init_model",
            left: (config.d_model, 1),
            right: (data_mean.len(), 1),
        });
    }
    match config.architecture {
        Architecture::DenseTopK => Ok(SaeModel::Dense(DenseTopKSae::init(
            config.d_model,
            config.expert_width,
            config.k,
            data_mean,
            rng,
        )?)),
        arch => {
            let shape = ScaleShape {
                d_model: config.d_model,
                n_experts: config.n_experts,
                expert_width: config.expert_width,
                e_active: config.e_active,
                k: config.k,
                scaling_mode: config.scaling_mode,
                output_bias: config.output_bias,
            };
            SaeModel::from_routed(arch, ScaleSae::init(shape, data_mean, rng)?)
        }
    }
}

/// Shuffled, epoch-based batch order.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: Rng) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        s.reshuffle_if_exhausted(n);
        s
    }

    fn reshuffle_if_exhausted(&mut self, need: usize) {
        if self.pos + need > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
    }

    fn next_batch(&mut self, data: &ActivationBatch, size: usize, out: &mut Vec<f64>) {
        self.reshuffle_if_exhausted(size);
        out.clear();
        for &i in &self.order[self.pos..self.pos + size] {
            out.extend_from_slice(data.token(i));
        }
        self.pos += size;
    }
}

pub fn train(config: &TrainConfig, data: &ActivationBatch) -> Result<TrainOutcome> {
    train_with(config, data, |_| {})
}

/// Trains from scratch. `on_report` sees each report as it is produced.
///
/// Randomness: `seed` forks into an initialization stream and a batch-order
/// stream, so identical config and data give bitwise-identical results.
pub fn train_with(
    config: &TrainConfig,
    data: &ActivationBatch,
    mut on_report: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.d_model != config.d_model {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: (config.d_model, 1),
            right: (data.d_model, 1),
        });
    }
    if data.n_tokens() < config.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} tokens, fewer than batch_size {}",
            data.n_tokens(),
            config.batch_size
        )));
    }
    let root = Rng::new(config.seed);
    let mut model = init_model(config, &data.mean(), &mut root.fork(1))?;
    let mut sampler = BatchSampler::new(data.n_tokens(), root.fork(2));
    let mut adam = Adam::for_model(
        AdamConfig {
            learn_rate: config.learn_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
        },
        &model,
    );

    let mut reports = Vec::new();
    let mut last_finite: Option<StepReport> = None;
    let mut tokens = Vec::with_capacity(config.batch_size * config.d_model);
    for step in 0..config.n_steps {
        sampler.next_batch(data, config.batch_size, &mut tokens);
        let traces = model.forward_batch(&tokens)?;
        let (mut grads, loss) = backward(&model, &tokens, &traces, config.alpha)?;
        let report = StepReport {
            step,
            recon_loss: loss.recon,
            aux_loss: loss.aux,
            total_loss: loss.total,
            mean_l0: loss.mean_l0,
            expert_load: loss.routing.as_ref().map_or_else(|| vec![1.0], |r| r.load.clone()),
            mean_router_probs: loss
                .routing
                .as_ref()
                .map_or_else(|| vec![1.0], |r| r.mean_probs.clone()),
            omega: model.omega(),
        };
        let diverged = |last: &Option<StepReport>| Error::Diverged {
            step,
            last_finite: last.clone().map(Box::new),
        };
        if !report.total_loss.is_finite() {
            return Err(diverged(&last_finite));
        }
        if config.decoder_renorm {
            grads.project_decoder_tangent(&model);
        }
        if let Err(Error::Diverged { .. }) = adam_step(&mut model, &grads, &mut adam, step, config.decoder_renorm) {
            return Err(diverged(&last_finite));
        }
        if step % config.log_every == 0 || step + 1 == config.n_steps {
            on_report(&report);
            reports.push(report.clone());
        }
        last_finite = Some(report);
    }
    Ok(TrainOutcome { model, reports })
}
