//! Trainable adapter state and the frozen surrogate stack it plugs into.

use std::collections::BTreeMap;

use rand::Rng;

use crate::backends::{ClipVisionEncoder, ControllerHandle, ControllerKind, SurrogateText, SurrogateUnet, SurrogateVit, TextEncoder};
use crate::config::{AppConfig, VisionBackend};
use crate::diffusion::NoiseSchedule;
use crate::encoder::{aggregate, encode_layers, AggregatorParams, EncoderSpec, ReferenceTokens, VisionEncoder};
use crate::error::{shape_err, Error, Result};
use crate::image::RgbImage;
use crate::injection::{attach, Scope, SiteId};
use crate::linalg::{randn, LayerNorm, Mat};

/// Image-branch projections owned by one attached site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteProjection {
    pub site: SiteId,
    pub w_k: Mat,
    pub w_v: Mat,
}

/// Every trainable parameter: the aggregator and per-site `W_K′`, `W_V′`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub scope: Scope,
    pub aggregator: AggregatorParams,
    pub sites: Vec<SiteProjection>,
}

/// Borrowed view of one named parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

impl AdapterState {
    pub fn init(spec: &EncoderSpec, sites: &[SiteId], scope: Scope, attn_dim: usize, rng: &mut impl Rng) -> Self {
        let aggregator = AggregatorParams::init(spec, rng);
        let dp = spec.target_dim;
        let sites = sites
            .iter()
            .map(|&site| SiteProjection {
                site,
                w_k: randn(dp, attn_dim, 1.0 / (dp as f64).sqrt(), rng),
                w_v: randn(dp, attn_dim, 0.1 / (dp as f64).sqrt(), rng),
            })
            .collect();
        Self { scope, aggregator, sites }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            scope: self.scope,
            aggregator: self.aggregator.zeros_like(),
            sites: self
                .sites
                .iter()
                .map(|s| SiteProjection { site: s.site, w_k: Mat::zeros(s.w_k.raw_dim()), w_v: Mat::zeros(s.w_v.raw_dim()) })
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.aggregator.k()
    }

    pub fn target_dim(&self) -> usize {
        self.aggregator.target_dim()
    }

    /// `(W_K′, W_V′)` per denoiser site, `None` where not attached.
    pub fn projections_for<'a>(&'a self, unet_sites: &[SiteId]) -> Vec<Option<(&'a Mat, &'a Mat)>> {
        unet_sites
            .iter()
            .map(|id| self.sites.iter().find(|s| s.site == *id).map(|s| (&s.w_k, &s.w_v)))
            .collect()
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let agg = &self.aggregator;
        let mut out = vec![TensorRef { name: "agg.alpha".into(), shape: (1, agg.k()), data: agg.alphas.as_slice().expect("contiguous") }];
        for (i, w) in agg.projections.iter().enumerate() {
            out.push(TensorRef { name: format!("agg.w.{i}"), shape: w.dim(), data: w.as_slice().expect("standard layout") });
        }
        let d = agg.target_dim();
        out.push(TensorRef { name: "agg.ln.gain".into(), shape: (1, d), data: agg.norm.gain.as_slice().expect("contiguous") });
        out.push(TensorRef { name: "agg.ln.bias".into(), shape: (1, d), data: agg.norm.bias.as_slice().expect("contiguous") });
        for s in &self.sites {
            out.push(TensorRef { name: format!("site.{}.w_k", s.site), shape: s.w_k.dim(), data: s.w_k.as_slice().expect("standard layout") });
            out.push(TensorRef { name: format!("site.{}.w_v", s.site), shape: s.w_v.dim(), data: s.w_v.as_slice().expect("standard layout") });
        }
        out
    }

    /// Same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let agg = &mut self.aggregator;
        let mut out: Vec<&mut [f64]> = vec![agg.alphas.as_slice_mut().expect("contiguous")];
        for w in &mut agg.projections {
            out.push(w.as_slice_mut().expect("standard layout"));
        }
        out.push(agg.norm.gain.as_slice_mut().expect("contiguous"));
        out.push(agg.norm.bias.as_slice_mut().expect("contiguous"));
        for s in &mut self.sites {
            out.push(s.w_k.as_slice_mut().expect("standard layout"));
            out.push(s.w_v.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Rebuilds from named tensors (as stored in a checkpoint).
    pub fn from_tensors(scope: Scope, sites: &[SiteId], k: usize, mut named: BTreeMap<String, Mat>) -> Result<Self> {
        let mut take = |name: &str| named.remove(name).ok_or_else(|| Error::Integrity(format!("missing tensor `{name}`")));
        let alphas = take("agg.alpha")?.row(0).to_owned();
        if alphas.len() != k {
            return Err(Error::Integrity(format!("{} layer scales for k = {k}", alphas.len())));
        }
        let projections = (0..k).map(|i| take(&format!("agg.w.{i}"))).collect::<Result<Vec<_>>>()?;
        let gain = take("agg.ln.gain")?.row(0).to_owned();
        let bias = take("agg.ln.bias")?.row(0).to_owned();
        let mut out_sites = Vec::with_capacity(sites.len());
        for &site in sites {
            out_sites.push(SiteProjection { site, w_k: take(&format!("site.{site}.w_k"))?, w_v: take(&format!("site.{site}.w_v"))? });
        }
        let state = Self {
            scope,
            aggregator: AggregatorParams { alphas, projections, norm: LayerNorm { gain, bias, eps: 1e-5 }, bypass_norm: false },
            sites: out_sites,
        };
        state.check_shapes()?;
        Ok(state)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.target_dim();
        if self.aggregator.norm.bias.len() != d || self.aggregator.projections.iter().any(|w| w.ncols() != d) {
            return Err(shape_err("aggregator widths disagree"));
        }
        if let Some(first) = self.sites.first() {
            let dim = first.w_k.dim();
            if dim.0 != d || self.sites.iter().any(|s| s.w_k.dim() != dim || s.w_v.dim() != dim) {
                return Err(shape_err("site projections disagree"));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

/// Digests of every frozen component, compared by the freeze audit.
pub type FrozenDigests = BTreeMap<&'static str, [u8; 32]>;

/// The frozen models: vision encoder, text encoder, denoiser and controller.
pub struct SurrogateStack {
    pub encoder: Box<dyn VisionEncoder + Send + Sync>,
    pub text: SurrogateText,
    pub unet: SurrogateUnet,
    pub controller: ControllerHandle,
    pub schedule: NoiseSchedule,
    pub k: usize,
    pub target_dim: usize,
}

impl SurrogateStack {
    pub fn build(cfg: &AppConfig) -> Result<Self> {
        let seed = cfg.backends.backbone_seed;
        let encoder: Box<dyn VisionEncoder + Send + Sync> = match &cfg.backends.vision {
            VisionBackend::Surrogate => Box::new(SurrogateVit::new(cfg.encoder, seed)?),
            VisionBackend::Clip { weights, config } => {
                let clip_cfg = match config {
                    Some(p) => Some(crate::backends::ClipVisionConfig::from_json(
                        &std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                    )?),
                    None => None,
                };
                Box::new(ClipVisionEncoder::load(weights, clip_cfg, cfg.encoder.k, cfg.encoder.target_dim)?)
            }
        };
        let espec = encoder.spec();
        let unet = SurrogateUnet::new(cfg.unet.clone(), (espec.width, espec.height), seed.wrapping_add(1))?;
        let controller = ControllerHandle::new(
            cfg.trainer.controller,
            cfg.unet.hidden,
            unet.grid(),
            unet.site_ids(),
            cfg.unet.controller_strength,
            seed.wrapping_add(2),
        );
        Ok(Self {
            encoder,
            text: SurrogateText::new(cfg.unet.text_dim, seed.wrapping_add(3)),
            unet,
            controller,
            schedule: NoiseSchedule::from_config(&cfg.diffusion)?,
            k: cfg.encoder.k,
            target_dim: cfg.encoder.target_dim,
        })
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec { k: self.k, target_dim: self.target_dim, ..self.encoder.spec() }
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.encoder.spec();
        (s.width, s.height)
    }

    pub fn controller_kind(&self) -> ControllerKind {
        self.controller.kind()
    }

    /// Attaches a freshly initialized adapter; attaching twice is an error.
    pub fn attach_new(&mut self, scope: Scope, rng: &mut impl Rng) -> Result<AdapterState> {
        let sites = attach(self.unet.spec_mut(), scope)?;
        Ok(AdapterState::init(&self.encoder_spec(), &sites, scope, self.unet.config().attn_dim, rng))
    }

    /// Attaches an existing adapter, checking it fits this stack.
    pub fn attach_existing(&mut self, adapter: &AdapterState) -> Result<()> {
        let sites = attach(self.unet.spec_mut(), adapter.scope)?;
        if sites != adapter.sites.iter().map(|s| s.site).collect::<Vec<_>>() {
            return Err(Error::Config(format!("adapter sites do not match scope {}", adapter.scope)));
        }
        let spec = self.encoder_spec();
        let w = &adapter.aggregator.projections;
        if adapter.k() != spec.k || w.iter().any(|w| w.nrows() != spec.hidden) || adapter.target_dim() != spec.target_dim {
            return Err(Error::Config("adapter does not fit the configured encoder (k, D, D′)".into()));
        }
        Ok(())
    }

    pub fn frozen_digests(&self) -> FrozenDigests {
        BTreeMap::from([
            ("vision_encoder", self.encoder.param_digest()),
            ("text_encoder", self.text.param_digest()),
            ("denoiser", self.unet.param_digest()),
            ("controller", self.controller.param_digest()),
        ])
    }

    /// Encodes a reference once into injection-ready tokens.
    pub fn encode_reference(&self, adapter: &AdapterState, image: &RgbImage, source: &str) -> Result<ReferenceTokens> {
        let stack = encode_layers(image, self.encoder.as_ref(), adapter.k())?;
        let mut tokens = aggregate(&stack, &adapter.aggregator)?;
        tokens.source = source.to_owned();
        Ok(tokens)
    }
}
