//! Reconstruction training of the adapter with a frozen pose controller,
//! condition dropout and train-mode masked injection.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{ControllerKind, Injection, PoseSkeleton, RefInjection, TextEncoder};
use crate::diffusion::{forward_diffuse, randn_like, training_loss};
use crate::encoder::{aggregate_backward, aggregate_with_cache, encode_layers, LayerStack};
use crate::error::{Error, Result};
use crate::image::{image_to_latent, Mask, RgbImage};
use crate::injection::{pixel_mask_to_token_mask, InjectionConfig, MaskMode, TokenMask};
use crate::linalg::Mat;
use crate::model::{AdapterState, FrozenDigests, SurrogateStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// `c ~ U[0,1)`: 15% image, 5% text, 5% both, 75% nothing.
    Reinterpreted,
    /// `c ~ U[0,0.25)`: something is dropped on every step.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutDecision {
    pub c: f64,
    pub drop_image: bool,
    pub drop_text: bool,
}

impl DropoutDecision {
    pub const KEEP: DropoutDecision = DropoutDecision { c: 1.0, drop_image: false, drop_text: false };
}

pub fn sample_dropout(c: f64, mode: DropoutMode) -> Result<DropoutDecision> {
    let upper = match mode {
        DropoutMode::Reinterpreted => 1.0,
        DropoutMode::Literal => 0.25,
    };
    if !(0.0..upper).contains(&c) {
        return Err(Error::OutOfRange(format!("dropout draw {c} outside [0, {upper})")));
    }
    let (drop_image, drop_text) = if c < 0.15 {
        (true, false)
    } else if c < 0.2 {
        (false, true)
    } else if c < 0.25 {
        (true, true)
    } else {
        (false, false)
    };
    Ok(DropoutDecision { c, drop_image, drop_text })
}

pub fn draw_dropout(rng: &mut impl Rng, mode: DropoutMode) -> DropoutDecision {
    let c = match mode {
        DropoutMode::Reinterpreted => rng.random_range(0.0..1.0),
        DropoutMode::Literal => rng.random_range(0.0..0.25),
    };
    sample_dropout(c, mode).expect("draw lies in range")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub dropout_mode: DropoutMode,
    pub controller: ControllerKind,
    pub checkpoint_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            steps: 1000,
            dropout_mode: DropoutMode::Reinterpreted,
            controller: ControllerKind::T2iAdapter,
            checkpoint_every: 1000,
        }
    }
}

/// Decoupled-weight-decay Adam over the adapter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &AdapterState) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut AdapterState, grads: &AdapterState, cfg: &TrainerConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let grads = grads.tensors();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i].data);
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
                p[j] -= cfg.lr * (update + cfg.weight_decay * p[j]);
            }
        }
    }
}

/// One reconstruction example at the denoiser's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub image: RgbImage,
    pub prompt: Vec<String>,
    pub mask: TokenMask,
    pub skeleton: PoseSkeleton,
}

impl TrainingSample {
    /// Fits a full-resolution image and pixel mask to the stack's input size.
    pub fn prepare(
        id: impl Into<String>,
        image: &RgbImage,
        mask: &Mask,
        skeleton: PoseSkeleton,
        prompt: Vec<String>,
        stack: &SurrogateStack,
        injection: &InjectionConfig,
    ) -> Result<Self> {
        let (w, h) = stack.image_size();
        let small = image.fit_to(w, h)?;
        let mask = pixel_mask_to_token_mask(&mask.resize_nearest(w, h), &stack.encoder_spec(), injection.token_threshold, injection.class_token_foreground)?;
        skeleton.validate()?;
        Ok(Self { id: id.into(), image: small, prompt, mask, skeleton })
    }
}

/// The per-sample randomness of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraw {
    pub t: usize,
    pub eps: Mat,
    pub dropout: DropoutDecision,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutcome {
    pub loss: f64,
    pub pose_fed: bool,
}

/// Loss of one sample under `draw`; accumulates adapter gradients into
/// `grads` when given. Frozen components never receive gradients.
pub fn sample_objective(
    stack: &SurrogateStack,
    adapter: &AdapterState,
    injection: &InjectionConfig,
    sample: &TrainingSample,
    layers: &LayerStack,
    draw: &StepDraw,
    grads: Option<&mut AdapterState>,
) -> Result<SampleOutcome> {
    let x0 = image_to_latent(&sample.image, stack.unet.config().latent_patch)?;
    let x_t = forward_diffuse(&x0, draw.t, &draw.eps, &stack.schedule)?;
    let prompt: &[String] = if draw.dropout.drop_text { &[] } else { &sample.prompt };
    let text = stack.text.encode(prompt);
    // The pose condition is never dropped.
    let control = stack.controller.residuals(Some(&sample.skeleton));
    let pose_fed = stack.controller.kind() != ControllerKind::None;
    let (tokens, agg_cache) = aggregate_with_cache(layers, &adapter.aggregator)?;
    let image_tokens = if draw.dropout.drop_image { Mat::zeros(tokens.tokens.raw_dim()) } else { tokens.tokens };
    let inj = Injection {
        projections: adapter.projections_for(stack.unet.site_ids()),
        refs: vec![RefInjection { tokens: &image_tokens, mask: Some(&sample.mask), scale: injection.ref_scale(0) }],
        mode: MaskMode::TrainBias,
        neg_bias: injection.neg_bias,
        renormalize: false,
    };
    let (out, cache) = stack.unet.forward(&x_t, draw.t, &stack.schedule, &text, &control, &inj)?;
    let loss = training_loss(&draw.eps, &out.eps_hat)?;
    if let Some(grads) = grads {
        let ab = stack.schedule.alpha_bar(draw.t);
        let d_eps = (&out.eps_hat - &draw.eps) * (2.0 / draw.eps.len() as f64);
        let d_x0 = d_eps * (-(ab / (1.0 - ab)).sqrt());
        let ug = stack.unet.backward(&cache, &inj, &d_x0);
        for (s, site) in stack.unet.site_ids().iter().enumerate() {
            if let (Some(dk), Some(dv)) = (&ug.d_w_k[s], &ug.d_w_v[s]) {
                let target = grads.sites.iter_mut().find(|p| p.site == *site).expect("attached site");
                target.w_k += dk;
                target.w_v += dv;
            }
        }
        if !draw.dropout.drop_image {
            aggregate_backward(&adapter.aggregator, &agg_cache, &ug.d_refs[0], &mut grads.aggregator);
        }
    }
    Ok(SampleOutcome { loss, pose_fed })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainStats {
    pub steps: u64,
    pub samples: u64,
    pub pose_fed: u64,
    pub image_dropped: u64,
    pub text_dropped: u64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreezeReport {
    pub components: Vec<(String, String)>,
    pub steps: u64,
}

pub struct Trainer {
    pub stack: SurrogateStack,
    pub adapter: AdapterState,
    pub opt: AdamW,
    pub cfg: TrainerConfig,
    pub injection: InjectionConfig,
    pub stats: TrainStats,
    rng: ChaCha8Rng,
    baseline: FrozenDigests,
    layer_cache: HashMap<String, LayerStack>,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(stack: SurrogateStack, adapter: AdapterState, cfg: TrainerConfig, injection: InjectionConfig, seed: u64) -> Result<Self> {
        injection.validate()?;
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let baseline = stack.frozen_digests();
        Ok(Self {
            opt: AdamW::new(&adapter),
            stack,
            adapter,
            cfg,
            injection,
            stats: TrainStats::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            baseline,
            layer_cache: HashMap::new(),
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.stats.steps
    }

    /// Frozen-encoder features, computed once per sample id.
    pub fn layers_for(&mut self, sample: &TrainingSample) -> Result<LayerStack> {
        if let Some(l) = self.layer_cache.get(&sample.id) {
            return Ok(l.clone());
        }
        let layers = encode_layers(&sample.image, self.stack.encoder.as_ref(), self.adapter.k())?;
        self.layer_cache.insert(sample.id.clone(), layers.clone());
        Ok(layers)
    }

    pub fn draw(&mut self, latent_shape: (usize, usize)) -> StepDraw {
        let t = self.rng.random_range(1..=self.stack.schedule.steps());
        let eps = randn_like(&Mat::zeros(latent_shape), &mut self.rng);
        let dropout = draw_dropout(&mut self.rng, self.cfg.dropout_mode);
        StepDraw { t, eps, dropout }
    }

    /// One optimizer step on the mean loss of `batch`.
    pub fn train_step(&mut self, batch: &[&TrainingSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut grads = self.adapter.zeros_like();
        let mut total = 0.0;
        let shape = self.stack.unet.latent_shape();
        for sample in batch {
            let layers = self.layers_for(sample)?;
            let draw = self.draw(shape);
            let out = sample_objective(&self.stack, &self.adapter, &self.injection, sample, &layers, &draw, Some(&mut grads))?;
            total += out.loss;
            self.stats.samples += 1;
            self.stats.pose_fed += out.pose_fed as u64;
            self.stats.image_dropped += draw.dropout.drop_image as u64;
            self.stats.text_dropped += draw.dropout.drop_text as u64;
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.stats.steps,
                detail: format!("batch of {} ({})", batch.len(), batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(", ")),
            });
        }
        let inv = 1.0 / batch.len() as f64;
        for g in grads.tensors_mut() {
            g.iter_mut().for_each(|v| *v *= inv);
        }
        self.opt.step(&mut self.adapter, &grads, &self.cfg);
        self.stats.steps += 1;
        self.stats.losses.push(loss);
        Ok(loss)
    }

    /// Next batch indices, cycling through seeded shuffles of the data.
    pub fn next_batch(&mut self, len: usize) -> Vec<usize> {
        (0..self.cfg.batch_size)
            .map(|_| {
                if self.cursor == 0 || self.order.len() != len {
                    self.order = (0..len).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let i = self.order[self.cursor];
                self.cursor = (self.cursor + 1) % len;
                i
            })
            .collect()
    }

    pub fn fit(&mut self, data: &[TrainingSample], steps: u64, mut on_step: impl FnMut(&Self, f64) -> Result<()>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        for _ in 0..steps {
            let idx = self.next_batch(data.len());
            let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &data[i]).collect();
            let loss = self.train_step(&batch)?;
            on_step(self, loss)?;
        }
        Ok(())
    }

    /// Mean loss over every sample and every timestep with fixed noise and no
    /// dropout; comparable across training.
    pub fn eval_loss(&mut self, data: &[TrainingSample], seed: u64) -> Result<f64> {
        let shape = self.stack.unet.latent_shape();
        let mut total = 0.0;
        let mut n = 0usize;
        for (i, sample) in data.iter().enumerate() {
            let layers = self.layers_for(sample)?;
            for t in 1..=self.stack.schedule.steps() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 32) ^ t as u64);
                let draw = StepDraw { t, eps: randn_like(&Mat::zeros(shape), &mut rng), dropout: DropoutDecision::KEEP };
                total += sample_objective(&self.stack, &self.adapter, &self.injection, sample, &layers, &draw, None)?.loss;
                n += 1;
            }
        }
        Ok(total / n.max(1) as f64)
    }

    /// Compares every frozen component against its digest at construction.
    pub fn freeze_audit(&self) -> Result<FreezeReport> {
        let now = self.stack.frozen_digests();
        let mut components = Vec::new();
        for (name, before) in &self.baseline {
            let after = now.get(name).expect("same component set");
            if before != after {
                return Err(Error::FreezeViolation(format!(
                    "{name} changed after {} steps ({} -> {})",
                    self.stats.steps,
                    hex::encode(before),
                    hex::encode(after)
                )));
            }
            components.push((name.to_string(), hex::encode(after)));
        }
        Ok(FreezeReport { components, steps: self.stats.steps })
    }
}
