//! CLIP-style vision tower loaded from Hugging Face safetensors weights and
//! run in `f64` on ndarray. Only the vision tower is supported.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array1, Axis};
use safetensors::{Dtype, SafeTensors};
use serde::Deserialize;

use crate::encoder::{EncoderSpec, VisionEncoder};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::linalg::{digest_mats, softmax_rows, LayerNorm, Mat};

const MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
const STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    QuickGelu,
    Gelu,
}

/// The subset of a Hugging Face `config.json` (vision section) we need.
#[derive(Debug, Clone, Deserialize)]
pub struct ClipVisionConfig {
    pub num_attention_heads: usize,
    #[serde(default = "default_act")]
    pub hidden_act: Activation,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    pub image_size: usize,
    pub patch_size: usize,
}

fn default_act() -> Activation {
    Activation::QuickGelu
}

fn default_eps() -> f64 {
    1e-5
}

impl ClipVisionConfig {
    /// Accepts either a bare vision config or a full model config with a
    /// `vision_config` section.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Data(format!("config.json: {e}")))?;
        let section = v.get("vision_config").cloned().unwrap_or(v);
        serde_json::from_value(section).map_err(|e| Error::Data(format!("config.json: {e}")))
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Mat,
    b: Array1<f64>,
}

impl Linear {
    fn apply(&self, x: &Mat) -> Mat {
        x.dot(&self.w.t()) + &self.b
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct ClipVisionEncoder {
    cfg: ClipVisionConfig,
    spec: EncoderSpec,
    patch_embed: Mat,
    class_embedding: Array1<f64>,
    positions: Mat,
    pre_norm: LayerNorm,
    blocks: Vec<Block>,
}

struct Tensors<'a> {
    st: SafeTensors<'a>,
    prefix: String,
}

impl Tensors<'_> {
    fn get(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let full = format!("{}{name}", self.prefix);
        let view = self.st.tensor(&full).map_err(|e| Error::Data(format!("{full}: {e}")))?;
        let bytes = view.data();
        let data = match view.dtype() {
            Dtype::F32 => bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|b| f32::from_bits((u16::from_le_bytes([b[0], b[1]]) as u32) << 16) as f64)
                .collect(),
            other => return Err(Error::Data(format!("{full}: unsupported dtype {other:?}"))),
        };
        Ok((view.shape().to_vec(), data))
    }

    fn mat(&self, name: &str) -> Result<Mat> {
        let (shape, data) = self.get(name)?;
        let cols = shape.iter().skip(1).product::<usize>().max(1);
        Mat::from_shape_vec((shape[0], cols), data).map_err(|e| Error::Data(format!("{name}: {e}")))
    }

    fn vec(&self, name: &str) -> Result<Array1<f64>> {
        Ok(Array1::from(self.get(name)?.1))
    }

    fn linear(&self, name: &str) -> Result<Linear> {
        Ok(Linear { w: self.mat(&format!("{name}.weight"))?, b: self.vec(&format!("{name}.bias"))? })
    }

    fn norm(&self, name: &str, eps: f64) -> Result<LayerNorm> {
        Ok(LayerNorm { gain: self.vec(&format!("{name}.weight"))?, bias: self.vec(&format!("{name}.bias"))?, eps })
    }
}

impl ClipVisionEncoder {
    /// Loads `model.safetensors`; the config is read from `config.json` beside
    /// it unless given.
    pub fn load(weights: &Path, cfg: Option<ClipVisionConfig>, k: usize, target_dim: usize) -> Result<Self> {
        let cfg = match cfg {
            Some(c) => c,
            None => {
                let path = weights.with_file_name("config.json");
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                ClipVisionConfig::from_json(&text)?
            }
        };
        let bytes = std::fs::read(weights).map_err(|e| Error::io(weights, e))?;
        Self::from_bytes(&bytes, cfg, k, target_dim)
    }

    pub fn from_bytes(bytes: &[u8], cfg: ClipVisionConfig, k: usize, target_dim: usize) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Data(format!("safetensors: {e}")))?;
        let prefix = if st.names().iter().any(|n| n.starts_with("vision_model.")) { "vision_model." } else { "" };
        let t = Tensors { st, prefix: prefix.into() };
        let patch_embed = t.mat("embeddings.patch_embedding.weight")?;
        let hidden = patch_embed.nrows();
        let mut layers = 0;
        while t.st.tensor(&format!("{prefix}encoder.layers.{layers}.layer_norm1.weight")).is_ok() {
            layers += 1;
        }
        let eps = cfg.layer_norm_eps;
        let blocks = (0..layers)
            .map(|i| {
                let p = format!("encoder.layers.{i}");
                Ok(Block {
                    ln1: t.norm(&format!("{p}.layer_norm1"), eps)?,
                    q: t.linear(&format!("{p}.self_attn.q_proj"))?,
                    k: t.linear(&format!("{p}.self_attn.k_proj"))?,
                    v: t.linear(&format!("{p}.self_attn.v_proj"))?,
                    out: t.linear(&format!("{p}.self_attn.out_proj"))?,
                    ln2: t.norm(&format!("{p}.layer_norm2"), eps)?,
                    fc1: t.linear(&format!("{p}.mlp.fc1"))?,
                    fc2: t.linear(&format!("{p}.mlp.fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = EncoderSpec {
            height: cfg.image_size,
            width: cfg.image_size,
            patch: cfg.patch_size,
            hidden,
            layers,
            k,
            target_dim,
        };
        spec.validate()?;
        if hidden % cfg.num_attention_heads != 0 {
            return Err(Error::Data("hidden width not divisible by head count".into()));
        }
        let positions = t.mat("embeddings.position_embedding.weight")?;
        if positions.nrows() != crate::encoder::patch_token_count(&spec)? {
            return Err(Error::Data("position table does not match image and patch size".into()));
        }
        Ok(Self {
            class_embedding: t.vec("embeddings.class_embedding")?,
            pre_norm: t.norm("pre_layrnorm", eps)?,
            positions,
            patch_embed,
            blocks,
            spec,
            cfg,
        })
    }

    fn attention(&self, b: &Block, x: &Mat) -> Mat {
        let heads = self.cfg.num_attention_heads;
        let hd = self.spec.hidden / heads;
        let q = b.q.apply(x) * (hd as f64).powf(-0.5);
        let k = b.k.apply(x);
        let v = b.v.apply(x);
        let mut out = Mat::zeros(x.raw_dim());
        for h in 0..heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let p = softmax_rows(&q.slice(cols).dot(&k.slice(cols).t()));
            out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        }
        b.out.apply(&out)
    }

    fn activation(&self, x: Mat) -> Mat {
        match self.cfg.hidden_act {
            Activation::QuickGelu => x.mapv(|v| v / (1.0 + (-1.702 * v).exp())),
            Activation::Gelu => x.mapv(|v| 0.5 * v * (1.0 + erf(v / std::f64::consts::SQRT_2))),
        }
    }
}

/// Abramowitz–Stegun 7.1.26 is too coarse for oracle comparisons; this uses
/// the series/continued-fraction split instead.
fn erf(x: f64) -> f64 {
    if x.abs() < 2.0 {
        let mut sum = x;
        let mut term = x;
        let x2 = x * x;
        for n in 1..200 {
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 {
                break;
            }
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        let ax = x.abs();
        let mut f = 0.0;
        for n in (1..120).rev() {
            f = n as f64 / 2.0 / (ax + f);
        }
        let erfc = (-ax * ax).exp() / std::f64::consts::PI.sqrt() / (ax + f);
        x.signum() * (1.0 - erfc)
    }
}

impl VisionEncoder for ClipVisionEncoder {
    fn spec(&self) -> EncoderSpec {
        self.spec
    }

    fn layer_outputs(&self, image: &RgbImage) -> Result<Vec<Mat>> {
        let p = self.spec.patch;
        let (gw, gh) = self.spec.grid();
        // Patch vectors laid out channel-major to match the conv kernel.
        let mut patches = Mat::zeros((gw * gh, 3 * p * p));
        for gy in 0..gh {
            for gx in 0..gw {
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            let v = image.get(gx * p + dx, gy * p + dy)[c];
                            patches[[gy * gw + gx, (c * p + dy) * p + dx]] = (v - MEAN[c]) / STD[c];
                        }
                    }
                }
            }
        }
        let mut x = Mat::zeros((gw * gh + 1, self.spec.hidden));
        x.row_mut(0).assign(&self.class_embedding);
        x.slice_mut(s![1.., ..]).assign(&patches.dot(&self.patch_embed.t()));
        x += &self.positions;
        let mut x = self.pre_norm.forward(&x).0;
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = &x + &self.attention(b, &b.ln1.forward(&x).0);
            let hidden = self.activation(b.fc1.apply(&b.ln2.forward(&x).0));
            x = &x + &b.fc2.apply(&hidden);
            outputs.push(x.clone());
        }
        Ok(outputs)
    }

    fn param_digest(&self) -> [u8; 32] {
        let cls = self.class_embedding.clone().insert_axis(Axis(0));
        let mut mats = vec![&self.patch_embed, &cls, &self.positions];
        for b in &self.blocks {
            mats.extend([&b.q.w, &b.k.w, &b.v.w, &b.out.w, &b.fc1.w, &b.fc2.w]);
        }
        digest_mats(mats)
    }
}

/// Named `f32` tensors, for writing test weights.
pub fn write_safetensors(tensors: &HashMap<String, (Vec<usize>, Vec<f32>)>) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(n, (shape, data))| (n.clone(), shape.clone(), data.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, shape, data)| {
            safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Data(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, None).map_err(|e| Error::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        for (x, want) in [(0.0, 0.0), (0.5, 0.5204998778130465), (1.0, 0.8427007929497149), (3.0, 0.9999779095030014), (-2.0, -0.9953222650189527)] {
            assert!((erf(x) - want).abs() < 1e-14, "{x}");
        }
    }

    #[test]
    fn config_accepts_nested_section() {
        let c = ClipVisionConfig::from_json(r#"{"vision_config": {"num_attention_heads": 2, "image_size": 8, "patch_size": 4}}"#).unwrap();
        assert_eq!(c.num_attention_heads, 2);
        assert_eq!(c.hidden_act, Activation::QuickGelu);
    }
}
