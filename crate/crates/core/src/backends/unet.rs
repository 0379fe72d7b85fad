//! Surrogate cross-attention denoiser.
//!
//! Hidden state starts from fixed 2D positions plus timestep and (weakly) the
//! noisy latent, then passes through residual cross-attention sites. The
//! accumulated residual is read out as a clean-latent estimate on top of a
//! white prior and converted to a noise prediction.

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::controller::ControlResidual;
use crate::diffusion::{predict_eps, NoiseSchedule};
use crate::error::{shape_err, Result};
use crate::injection::{branch_backward, branch_forward, MaskMode, SiteId, TokenMask, UnetSpec};
use crate::linalg::{digest_mats, orthonormal, randn, sincos_2d, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnetConfig {
    pub hidden: usize,
    pub attn_dim: usize,
    pub text_dim: usize,
    /// Pixel patch folded into one latent position.
    pub latent_patch: usize,
    pub down_sites: usize,
    pub mid_sites: usize,
    pub up_sites: usize,
    pub text_value_scale: f64,
    pub input_scale: f64,
    pub time_scale: f64,
    pub controller_strength: f64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            hidden: 48,
            attn_dim: 48,
            text_dim: 32,
            latent_patch: 4,
            down_sites: 2,
            mid_sites: 1,
            up_sites: 2,
            text_value_scale: 0.05,
            input_scale: 0.05,
            time_scale: 0.1,
            controller_strength: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SiteWeights {
    w_q: Mat,
    w_kt: Mat,
    w_vt: Mat,
    w_o: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateUnet {
    spec: UnetSpec,
    cfg: UnetConfig,
    grid: (usize, usize),
    channels: usize,
    positions: Mat,
    w_in: Mat,
    sites: Vec<SiteWeights>,
    w_out: Mat,
    prior: f64,
}

/// One reference for this call: tokens `I`, optional mask, scale.
#[derive(Debug, Clone, Copy)]
pub struct RefInjection<'a> {
    pub tokens: &'a Mat,
    pub mask: Option<&'a TokenMask>,
    pub scale: f64,
}

/// Image-branch inputs; `projections[s]` is `(W_K′, W_V′)` for site `s` when attached.
#[derive(Debug, Clone)]
pub struct Injection<'a> {
    pub projections: Vec<Option<(&'a Mat, &'a Mat)>>,
    pub refs: Vec<RefInjection<'a>>,
    pub mode: MaskMode,
    pub neg_bias: f64,
    pub renormalize: bool,
}

impl Injection<'_> {
    pub fn none(sites: usize) -> Self {
        Self { projections: vec![None; sites], refs: Vec::new(), mode: MaskMode::InferMultiplicative, neg_bias: 1e4, renormalize: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: Mat,
    pub x0_hat: Mat,
}

struct RefCache {
    keys: Mat,
    values: Mat,
    branch: crate::injection::BranchCache,
}

struct SiteCache {
    q: Mat,
    text_keys: Mat,
    text_values: Mat,
    text: crate::injection::BranchCache,
    refs: Vec<Option<RefCache>>,
}

pub struct UnetCache {
    sites: Vec<SiteCache>,
}

/// Gradients w.r.t. every reference's tokens and every attached site's projections.
#[derive(Debug, Clone)]
pub struct UnetGrads {
    pub d_refs: Vec<Mat>,
    pub d_w_k: Vec<Option<Mat>>,
    pub d_w_v: Vec<Option<Mat>>,
}

impl SurrogateUnet {
    pub fn new(cfg: UnetConfig, image_size: (usize, usize), seed: u64) -> Result<Self> {
        let p = cfg.latent_patch;
        if p == 0 || image_size.0 % p != 0 || image_size.1 % p != 0 {
            return Err(shape_err("image size not divisible by the latent patch"));
        }
        let grid = (image_size.0 / p, image_size.1 / p);
        let channels = 3 * p * p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, d) = (cfg.hidden, cfg.attn_dim);
        let spec = UnetSpec::new(cfg.down_sites, cfg.mid_sites, cfg.up_sites);
        let sites = spec
            .sites()
            .iter()
            .map(|_| SiteWeights {
                w_q: randn(h, d, 1.0 / (h as f64).sqrt(), &mut rng),
                w_kt: randn(cfg.text_dim, d, 1.0 / (cfg.text_dim as f64).sqrt(), &mut rng),
                w_vt: randn(cfg.text_dim, d, cfg.text_value_scale / (cfg.text_dim as f64).sqrt(), &mut rng),
                w_o: orthonormal(d, h, &mut rng),
            })
            .collect();
        Ok(Self {
            positions: sincos_2d(grid.0, grid.1, h),
            w_in: randn(channels, h, 1.0 / (channels as f64).sqrt(), &mut rng),
            w_out: orthonormal(h, channels, &mut rng),
            sites,
            spec,
            grid,
            channels,
            prior: 1.0,
            cfg,
        })
    }

    pub fn spec(&self) -> &UnetSpec {
        &self.spec
    }

    pub fn spec_mut(&mut self) -> &mut UnetSpec {
        &mut self.spec
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    pub fn site_ids(&self) -> &[SiteId] {
        self.spec.sites()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (self.grid.0 * self.grid.1, self.channels)
    }

    pub fn param_digest(&self) -> [u8; 32] {
        let mut mats = vec![&self.positions, &self.w_in, &self.w_out];
        for s in &self.sites {
            mats.extend([&s.w_q, &s.w_kt, &s.w_vt, &s.w_o]);
        }
        digest_mats(mats)
    }

    fn time_embedding(&self, t: usize) -> Array1<f64> {
        let h = self.cfg.hidden;
        Array1::from_shape_fn(h, |i| {
            let freq = 1.0 / 10f64.powf((i / 2) as f64 / (h / 2).max(1) as f64);
            let v = t as f64 * freq;
            self.cfg.time_scale * if i % 2 == 0 { v.sin() } else { v.cos() }
        })
    }

    pub fn forward(
        &self,
        x_t: &Mat,
        t: usize,
        schedule: &NoiseSchedule,
        text: &Mat,
        control: &ControlResidual,
        inj: &Injection<'_>,
    ) -> Result<(DenoiserOutput, UnetCache)> {
        if x_t.dim() != self.latent_shape() {
            return Err(shape_err(format!("latent {:?}, denoiser expects {:?}", x_t.dim(), self.latent_shape())));
        }
        if text.ncols() != self.cfg.text_dim {
            return Err(shape_err(format!("text width {} vs {}", text.ncols(), self.cfg.text_dim)));
        }
        let n_sites = self.sites.len();
        if inj.projections.len() != n_sites || control.sites.len() != n_sites {
            return Err(shape_err("per-site inputs do not match the denoiser sites"));
        }
        let mut h = &self.positions + &self.time_embedding(t).insert_axis(Axis(0));
        h.scaled_add(self.cfg.input_scale, &x_t.dot(&self.w_in));
        if let Some(r) = &control.input {
            h += r;
        }
        let h0 = h.clone();
        let mut caches = Vec::with_capacity(n_sites);
        for (s, w) in self.sites.iter().enumerate() {
            if let Some(r) = &control.sites[s] {
                h += r;
            }
            let q = h.dot(&w.w_q);
            let text_keys = text.dot(&w.w_kt);
            let text_values = text.dot(&w.w_vt);
            let (mut z, text_cache) =
                branch_forward(&q, &text_keys, &text_values, None, MaskMode::InferMultiplicative, 0.0, false);
            let mut refs = Vec::with_capacity(inj.refs.len());
            for r in &inj.refs {
                let Some((w_k, w_v)) = inj.projections[s].filter(|_| r.scale != 0.0) else {
                    refs.push(None);
                    continue;
                };
                let keys = r.tokens.dot(w_k);
                let values = r.tokens.dot(w_v);
                let (out, branch) = branch_forward(&q, &keys, &values, r.mask, inj.mode, inj.neg_bias, inj.renormalize);
                z.scaled_add(r.scale, &out);
                refs.push(Some(RefCache { keys, values, branch }));
            }
            h += &z.dot(&w.w_o);
            caches.push(SiteCache { q, text_keys, text_values, text: text_cache, refs });
        }
        let x0_hat = (&h - &h0).dot(&self.w_out) + self.prior;
        let eps_hat = predict_eps(x_t, &x0_hat, t, schedule);
        Ok((DenoiserOutput { eps_hat, x0_hat }, UnetCache { sites: caches }))
    }

    /// Backpropagates `dL/dx̂0` to the references and the image projections.
    pub fn backward(&self, cache: &UnetCache, inj: &Injection<'_>, d_x0: &Mat) -> UnetGrads {
        let mut grads = UnetGrads {
            d_refs: inj.refs.iter().map(|r| Mat::zeros(r.tokens.raw_dim())).collect(),
            d_w_k: inj.projections.iter().map(|p| p.map(|(k, _)| Mat::zeros(k.raw_dim()))).collect(),
            d_w_v: inj.projections.iter().map(|p| p.map(|(_, v)| Mat::zeros(v.raw_dim()))).collect(),
        };
        let mut dh = d_x0.dot(&self.w_out.t());
        for (s, (w, c)) in self.sites.iter().zip(&cache.sites).enumerate().rev() {
            let dz = dh.dot(&w.w_o.t());
            let (mut dq, _, _) = branch_backward(&c.q, &c.text_keys, &c.text_values, &c.text, &dz);
            for (r, (rc, inj_ref)) in c.refs.iter().zip(&inj.refs).enumerate() {
                let Some(rc) = rc else { continue };
                let (w_k, w_v) = inj.projections[s].expect("cached branch implies projections");
                let d_out = &dz * inj_ref.scale;
                let (dq_r, d_keys, d_values) = branch_backward(&c.q, &rc.keys, &rc.values, &rc.branch, &d_out);
                dq += &dq_r;
                let it = inj_ref.tokens.t();
                *grads.d_w_k[s].as_mut().expect("attached") += &it.dot(&d_keys);
                *grads.d_w_v[s].as_mut().expect("attached") += &it.dot(&d_values);
                grads.d_refs[r] += &(d_keys.dot(&w_k.t()) + d_values.dot(&w_v.t()));
            }
            dh += &dq.dot(&w.w_q.t());
        }
        grads
    }
}
