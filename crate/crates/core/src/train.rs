//! Learning-rate schedule, Adam, training steps and checkpoint averaging.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Batch, Batcher};
use crate::error::{Error, Result};
use crate::math;
use crate::recurrent::{Model, ParamStore};
use crate::rng::{self, split_seed};
use crate::tensor::Tensor;

/// Linear warmup followed by inverse-square-root decay:
/// `scale · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub d_model: usize,
    pub warmup_steps: u64,
    pub scale: f64,
}

impl LrSchedule {
    pub fn new(d_model: usize, warmup_steps: u64) -> Self {
        Self {
            d_model,
            warmup_steps,
            scale: 1.0,
        }
    }

    pub fn lr_at_step(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(Error::Contract(
                "learning rate is defined from step 1".into(),
            ));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be positive".into()));
        }
        let s = step as f64;
        let w = self.warmup_steps as f64;
        let decay = 1.0 / math::sqrt(s);
        let warm = s / (w * math::sqrt(w));
        Ok(self.scale / math::sqrt(self.d_model as f64) * decay.min(warm))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments per parameter tensor plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Vec<f64>],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                &[params.len()],
                &[grads.len(), self.m.len()],
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
            }
        }
        self.t += 1;
        let c1 = 1.0 - math::powf(cfg.beta1, self.t as f64);
        let c2 = 1.0 - math::powf(cfg.beta2, self.t as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (math::sqrt(vhat) + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub label_smoothing: f64,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Root seed; dropout masks use a seed split from it.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Supervised target tokens in the batch.
    pub tokens: usize,
}

/// Owns a model and its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    adam: AdamState,
    cfg: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        let adam = AdamState::new(model.params().tensors());
        Self {
            model,
            adam,
            cfg,
            step: 0,
        }
    }

    /// Resumes from a checkpoint that carries optimizer state.
    pub fn resume(model: Model, cfg: TrainConfig, adam: AdamState, step: u64) -> Result<Self> {
        if adam.m.len() != model.params().len() {
            return Err(Error::Incompatible(format!(
                "optimizer state has {} tensors, model has {}",
                adam.m.len(),
                model.params().len()
            )));
        }
        Ok(Self {
            model,
            adam,
            cfg,
            step,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed updates.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Forward, backward, optional clipping and one Adam update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<Metrics> {
        let step = self.step + 1;
        let dropout_seed = split_seed(split_seed(self.cfg.seed, rng::DROPOUT), step);
        let (loss, mut grads) =
            self.model
                .loss_and_grads(batch, self.cfg.label_smoothing, true, dropout_seed)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, loss });
        }
        let grad_norm = math::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
        if let Some(limit) = self.cfg.clip_norm {
            if grad_norm > limit {
                let f = limit / grad_norm;
                grads.iter_mut().flatten().for_each(|g| *g *= f);
            }
        }
        let lr = self.cfg.schedule.lr_at_step(step)?;
        self.adam.step(
            self.model.params_mut().tensors_mut(),
            &grads,
            lr,
            &self.cfg.adam,
        )?;
        self.step = step;
        Ok(Metrics {
            step,
            loss,
            lr,
            grad_norm,
            tokens: batch.target_tokens(),
        })
    }

    pub fn checkpoint(&self, config_text: String) -> Checkpoint {
        Checkpoint {
            params: self.model.params().clone(),
            optimizer: Some(self.adam.clone()),
            step: self.step,
            config: config_text,
        }
    }
}

/// Returned by the per-step callback of [`run_epochs`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Trains over successive epochs of `batcher` until the trainer has made
/// `max_steps` updates or `after_step` returns [`Control::Stop`]. Epoch `e`
/// is shuffled from `(shuffle_seed, e)`; epochs are counted from zero on
/// every call.
pub fn run_epochs<F>(
    trainer: &mut Trainer,
    batcher: &Batcher,
    shuffle_seed: u64,
    max_steps: u64,
    mut after_step: F,
) -> Result<()>
where
    F: FnMut(&Trainer, &Metrics) -> Result<Control>,
{
    if batcher.pairs().is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut epoch = 0;
    while trainer.step_count() < max_steps {
        for batch in batcher.epoch(shuffle_seed, epoch) {
            if trainer.step_count() >= max_steps {
                break;
            }
            let m = trainer.train_step(&batch)?;
            if after_step(trainer, &m)? == Control::Stop {
                return Ok(());
            }
        }
        epoch += 1;
    }
    Ok(())
}

/// Means of consecutive full windows of `values`; a trailing partial window
/// is dropped.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    values
        .chunks_exact(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Parameters by name, optional optimizer state, step and the configuration
/// text the run was started with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    pub config: String,
}

/// Elementwise mean of the parameters of `checkpoints`. Optimizer state is
/// dropped; step and configuration come from the last checkpoint.
///
/// The mean is accumulated incrementally (`μ += (x - μ)/k`), which returns
/// every value unchanged when all inputs agree.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let Some(first) = checkpoints.first() else {
        return Err(Error::Incompatible("no checkpoints to average".into()));
    };
    let mut offenders = Vec::new();
    for (i, c) in checkpoints.iter().enumerate().skip(1) {
        if c.params.len() != first.params.len() {
            offenders.push(format!(
                "checkpoint {i} has {} tensors, expected {}",
                c.params.len(),
                first.params.len()
            ));
            continue;
        }
        for ((n0, t0), (n, t)) in first.params.iter().zip(c.params.iter()) {
            if n0 != n || t0.shape() != t.shape() {
                offenders.push(format!(
                    "checkpoint {i}: {n} {:?} vs {n0} {:?}",
                    t.shape(),
                    t0.shape()
                ));
            }
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Incompatible(offenders.join("; ")));
    }
    let mut mean = first.params.clone();
    for (k, c) in checkpoints.iter().enumerate().skip(1) {
        let k = (k + 1) as f64;
        for (acc, t) in mean.tensors_mut().iter_mut().zip(c.params.tensors()) {
            for (a, x) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += (x - *a) / k;
            }
        }
    }
    let last = checkpoints.last().expect("non-empty");
    Ok(Checkpoint {
        params: mean,
        optimizer: None,
        step: last.step,
        config: last.config.clone(),
    })
}
