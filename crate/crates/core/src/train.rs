//! Noise-prediction training on moving sprites.

use alloc::string::String;
use alloc::vec::Vec;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sprites::{generate_sprite_video, SpriteSpec};
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Probability of replacing the prompt with the null condition.
    pub cond_dropout: f64,
    pub model: DenoiserConfig,
    /// Decoded canvas side in pixels; the latent grid is `canvas / scale`.
    pub canvas: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            learning_rate: 0.1,
            seed: 0,
            cond_dropout: 0.1,
            model: DenoiserConfig::default(),
            canvas: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("training steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(alloc::format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(alloc::format!("condition dropout {} outside [0, 1]", self.cond_dropout)));
        }
        self.model.validate()?;
        if self.model.width != self.model.height || !self.canvas.is_multiple_of(self.model.width) {
            return Err(Error::Config(alloc::format!(
                "canvas {} is not a multiple of the {}x{} latent grid",
                self.canvas,
                self.model.height,
                self.model.width
            )));
        }
        if self.model.channels != crate::video::LATENT_CHANNELS {
            return Err(Error::Config(alloc::format!(
                "sprite latents have {} channels, model expects {}",
                crate::video::LATENT_CHANNELS,
                self.model.channels
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> usize {
        self.canvas / self.model.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub latent: Tensor,
    pub prompt: String,
}

/// What one step drew and what it cost.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean loss over the batch, before the update.
    pub loss: f32,
    pub timesteps: Vec<usize>,
    pub dropped: Vec<bool>,
}

/// Draws `t ~ U{1..T}`, `ε ~ N(0, I)` and the dropout coin for one example.
pub fn draw_example_noise(stream: &mut RngStream, total: usize, shape: &[usize], dropout: f64) -> (usize, Tensor, bool) {
    let t = 1 + stream.below(total as u64) as usize;
    let eps = stream.gaussian(shape);
    let drop = stream.bernoulli(dropout);
    (t, eps, drop)
}

/// One gradient-descent update on the batch mean of the per-example MSE.
pub fn training_step(
    model: &mut Denoiser,
    batch: &[TrainingExample],
    schedule: &NoiseSchedule,
    stream: &mut RngStream,
    learning_rate: f32,
    cond_dropout: f64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let total = model.config().timesteps;
    let null = model.null_condition();
    let mut grads = Gradients::default();
    let mut loss_sum = 0.0f64;
    let mut timesteps = Vec::with_capacity(batch.len());
    let mut dropped = Vec::with_capacity(batch.len());
    for ex in batch {
        let (t, eps, drop) = draw_example_noise(stream, total, ex.latent.shape(), cond_dropout);
        let z_t = schedule.add_noise(&ex.latent, &eps, t)?;
        let cond = if drop { null.clone() } else { model.embed_text(&ex.prompt) };
        let (loss, g) = model.loss_and_gradients(&z_t, &cond, t, &eps)?;
        grads.accumulate(g)?;
        loss_sum += loss as f64;
        timesteps.push(t);
        dropped.push(drop);
    }
    model.apply_gradients(&grads, learning_rate / batch.len() as f32)?;
    Ok(StepOutcome {
        loss: (loss_sum / batch.len() as f64) as f32,
        timesteps,
        dropped,
    })
}

/// Freshly sampled sprite batch.
pub fn sample_batch(stream: &mut RngStream, config: &TrainConfig) -> Result<Vec<TrainingExample>> {
    (0..config.batch_size)
        .map(|_| {
            let spec = SpriteSpec::random(stream, config.canvas);
            let v = generate_sprite_video(&spec, config.model.frames, config.canvas, config.scale())?;
            Ok(TrainingExample {
                latent: v.latent,
                prompt: v.prompt,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Denoiser,
    pub losses: Vec<f32>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f32 {
        *self.losses.last().unwrap_or(&f32::NAN)
    }

    /// Mean of the first and last `window` losses.
    pub fn loss_window_means(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.losses.len()).max(1);
        let m = |s: &[f32]| s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64;
        (m(&self.losses[..w]), m(&self.losses[self.losses.len() - w..]))
    }
}

/// Trains a fresh model; `progress(step, loss)` is called after each step.
pub fn train(config: &TrainConfig, mut progress: impl FnMut(usize, f32)) -> Result<TrainOutcome> {
    config.validate()?;
    let root = RngStream::new(config.seed, 0);
    let mut model = Denoiser::new(config.model.clone(), root.fork(0).seed())?;
    let schedule = NoiseSchedule::linear(config.model.timesteps, config.model.beta_start, config.model.beta_end)?;
    let mut data = root.fork(1);
    let mut noise = root.fork(2);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sample_batch(&mut data, config)?;
        let out = training_step(&mut model, &batch, &schedule, &mut noise, config.learning_rate, config.cond_dropout)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        progress(step, out.loss);
        losses.push(out.loss);
    }
    Ok(TrainOutcome { model, losses })
}
