//! Reference-conditioned sampling with classifier-free guidance.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{Injection, PoseSkeleton, RefInjection, TextEncoder};
use crate::diffusion::{cfg_combine, ddim_step, ddpm_step, randn_like};
use crate::encoder::ReferenceTokens;
use crate::error::{Error, Result};
use crate::image::{latent_to_image, RgbImage};
use crate::injection::{InjectionConfig, TokenMask};
use crate::linalg::Mat;
use crate::model::{AdapterState, SurrogateStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefInput {
    pub image: RgbImage,
    pub mask: Option<TokenMask>,
    /// Overrides the configured scale for this reference.
    pub scale: Option<f64>,
    pub source: String,
}

impl RefInput {
    pub fn new(image: RgbImage, source: impl Into<String>) -> Self {
        Self { image, mask: None, scale: None, source: source.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub refs: Vec<RefInput>,
    pub prompt: Vec<String>,
    pub pose: Option<PoseSkeleton>,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefProvenance {
    pub source: String,
    pub scale: f64,
    pub foreground_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub seed: u64,
    pub samples: usize,
    pub sampler: Sampler,
    pub guidance: f64,
    pub mask_mode: String,
    pub scope: Option<String>,
    pub prompt: String,
    pub pose: bool,
    pub refs: Vec<RefProvenance>,
    pub encoder_calls: usize,
    pub denoiser_calls: usize,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub images: Vec<RgbImage>,
    pub provenance: Provenance,
}

/// Frozen stack plus an optional adapter. Without an adapter the pipeline
/// is the base text(+pose)-to-image model.
pub struct Pipeline<'a> {
    pub stack: &'a SurrogateStack,
    pub adapter: Option<&'a AdapterState>,
    pub injection: InjectionConfig,
    pub guidance: f64,
    pub sampler: Sampler,
    pub clip_x0: bool,
    encoder_calls: Cell<usize>,
}

impl<'a> Pipeline<'a> {
    pub fn new(stack: &'a SurrogateStack, adapter: Option<&'a AdapterState>, injection: InjectionConfig, guidance: f64) -> Self {
        Self { stack, adapter, injection, guidance, sampler: Sampler::Ddim, clip_x0: true, encoder_calls: Cell::new(0) }
    }

    /// Reference encodings performed so far.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.get()
    }

    fn encode(&self, adapter: &AdapterState, r: &RefInput) -> Result<ReferenceTokens> {
        self.encoder_calls.set(self.encoder_calls.get() + 1);
        self.stack.encode_reference(adapter, &r.image, &r.source)
    }

    pub fn generate(&self, req: &GenerateRequest) -> Result<Generated> {
        self.injection.validate()?;
        if req.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        let calls_before = self.encoder_calls();
        // Encode every reference exactly once, outside the sampling loop.
        let mut encoded = Vec::new();
        if let Some(adapter) = self.adapter {
            for (i, r) in req.refs.iter().enumerate() {
                let tokens = self.encode(adapter, r)?;
                if let Some(m) = &r.mask {
                    if m.len() != tokens.tokens.nrows() {
                        return Err(Error::Shape(format!("mask for `{}` has {} entries, encoder emits {}", r.source, m.len(), tokens.tokens.nrows())));
                    }
                }
                encoded.push((tokens.tokens, r.scale.unwrap_or_else(|| self.injection.ref_scale(i))));
            }
        }
        let zeros: Vec<Mat> = encoded.iter().map(|(t, _)| Mat::zeros(t.raw_dim())).collect();
        let sites = self.stack.unet.site_ids();
        let projections = match self.adapter {
            Some(a) => a.projections_for(sites),
            None => vec![None; sites.len()],
        };
        let injection = |uncond: bool| Injection {
            projections: projections.clone(),
            refs: encoded
                .iter()
                .zip(&req.refs)
                .zip(&zeros)
                .map(|(((tokens, scale), r), zero)| RefInjection {
                    tokens: if uncond { zero } else { tokens },
                    mask: r.mask.as_ref(),
                    scale: *scale,
                })
                .collect(),
            mode: self.injection.mode,
            neg_bias: self.injection.neg_bias,
            renormalize: self.injection.renormalize,
        };
        let (cond_inj, uncond_inj) = (injection(false), injection(true));
        let text_cond = self.stack.text.encode(&req.prompt);
        let text_uncond = self.stack.text.encode(&[]);
        // The pose condition is structural and shared by both guidance branches.
        let control = self.stack.controller.residuals(req.pose.as_ref());
        let schedule = &self.stack.schedule;
        let shape = self.stack.unet.latent_shape();
        let (w, h) = self.stack.image_size();
        let patch = self.stack.unet.config().latent_patch;
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let mut images = Vec::with_capacity(req.samples);
        let mut denoiser_calls = 0;
        for _ in 0..req.samples {
            let mut x = randn_like(&Mat::zeros(shape), &mut rng);
            for t in (1..=schedule.steps()).rev() {
                let (cond, _) = self.stack.unet.forward(&x, t, schedule, &text_cond, &control, &cond_inj)?;
                let (uncond, _) = self.stack.unet.forward(&x, t, schedule, &text_uncond, &control, &uncond_inj)?;
                denoiser_calls += 2;
                let eps = cfg_combine(&cond.eps_hat, &uncond.eps_hat, self.guidance)?;
                x = match self.sampler {
                    Sampler::Ddim => ddim_step(&x, &eps, t, t - 1, schedule, self.clip_x0)?,
                    Sampler::Ddpm => {
                        let z = randn_like(&x, &mut rng);
                        ddpm_step(&x, &eps, t, schedule, Some(&z))?
                    }
                };
            }
            images.push(latent_to_image(&x, w, h, patch)?);
        }
        let provenance = Provenance {
            seed: req.seed,
            samples: req.samples,
            sampler: self.sampler,
            guidance: self.guidance,
            mask_mode: self.injection.mode.to_string(),
            scope: self.adapter.map(|a| a.scope.to_string()),
            prompt: req.prompt.join(", "),
            pose: req.pose.is_some(),
            refs: req
                .refs
                .iter()
                .enumerate()
                .map(|(i, r)| RefProvenance {
                    source: r.source.clone(),
                    scale: if self.adapter.is_some() { r.scale.unwrap_or_else(|| self.injection.ref_scale(i)) } else { 0.0 },
                    foreground_tokens: r.mask.as_ref().map(TokenMask::count),
                })
                .collect(),
            encoder_calls: self.encoder_calls() - calls_before,
            denoiser_calls,
        };
        Ok(Generated { images, provenance })
    }
}
