//! Multi-layer reference features and their layer-scale aggregation into
//! injection-ready tokens.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::RgbImage;
use crate::injection::TokenMask;
use crate::linalg::{orthonormal, LayerNorm, LayerNormCache, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Encoder hidden width `D`.
    pub hidden: usize,
    pub layers: usize,
    /// Number of tail layers aggregated.
    pub k: usize,
    /// Cross-attention width `D′`.
    pub target_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { height: 16, width: 16, patch: 4, hidden: 48, layers: 6, k: 4, target_dim: 48 }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        patch_token_count(self)?;
        if self.k == 0 || self.k > self.layers {
            return Err(Error::Config(format!("k = {} must lie in 1..={}", self.k, self.layers)));
        }
        if self.hidden == 0 || self.target_dim == 0 {
            return Err(Error::Config("zero feature width".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.width / self.patch, self.height / self.patch)
    }
}

/// `1 + HW/p²`: one class token plus one token per patch.
pub fn patch_token_count(spec: &EncoderSpec) -> Result<usize> {
    let p = spec.patch;
    if p == 0 || spec.height == 0 || spec.width == 0 || spec.height % p != 0 || spec.width % p != 0 {
        return Err(Error::Config(format!(
            "{}x{} image is not divisible into {p}px patches",
            spec.height, spec.width
        )));
    }
    Ok(1 + spec.height * spec.width / (p * p))
}

/// A frozen vision transformer exposing every block's token output.
pub trait VisionEncoder {
    fn spec(&self) -> EncoderSpec;

    /// Outputs of blocks `1..=L` in order, each `N × D` with the class token in row 0.
    fn layer_outputs(&self, image: &RgbImage) -> Result<Vec<Mat>>;

    /// Digest of all weights, for freeze audits.
    fn param_digest(&self) -> [u8; 32];
}

/// Tail layers, newest first: `z[0] = z_L`, `z[1] = z_{L-1}`, ….
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub z: Vec<Mat>,
}

impl LayerStack {
    pub fn new(z: Vec<Mat>) -> Result<Self> {
        let first = z.first().ok_or_else(|| shape_err("empty layer stack"))?;
        let dim = first.dim();
        if z.iter().any(|m| m.dim() != dim) {
            return Err(shape_err("layers disagree on token count or width"));
        }
        if z.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data("non-finite encoder features".into()));
        }
        Ok(Self { z })
    }

    pub fn k(&self) -> usize {
        self.z.len()
    }

    pub fn tokens(&self) -> usize {
        self.z[0].nrows()
    }

    pub fn hidden(&self) -> usize {
        self.z[0].ncols()
    }
}

pub fn encode_layers(image: &RgbImage, backend: &dyn VisionEncoder, k: usize) -> Result<LayerStack> {
    let spec = backend.spec();
    if image.width() != spec.width || image.height() != spec.height {
        return Err(shape_err(format!(
            "encoder expects {}x{}, got {}x{}",
            spec.width,
            spec.height,
            image.width(),
            image.height()
        )));
    }
    let outputs = backend
        .layer_outputs(image)
        .map_err(|e| Error::Backend(format!("vision encoder: {e}")))?;
    if k == 0 || k > outputs.len() {
        return Err(Error::Config(format!("k = {k} with {} encoder layers", outputs.len())));
    }
    LayerStack::new(outputs.into_iter().rev().take(k).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    pub alphas: Array1<f64>,
    /// `W_i`, each `D × D′`, paired with `z[i]`.
    pub projections: Vec<Mat>,
    pub norm: LayerNorm,
    /// Skip the normalization entirely (oracle and linearity tests).
    pub bypass_norm: bool,
}

impl AggregatorParams {
    /// `α_i = 1/k`, `W_i` random orthonormal columns so the initial output
    /// stays at encoder scale.
    pub fn init(spec: &EncoderSpec, rng: &mut impl Rng) -> Self {
        let k = spec.k;
        Self {
            alphas: Array1::from_elem(k, 1.0 / k as f64),
            projections: (0..k).map(|_| orthonormal(spec.hidden, spec.target_dim, rng)).collect(),
            norm: LayerNorm::new(spec.target_dim),
            bypass_norm: false,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            alphas: Array1::zeros(self.alphas.len()),
            projections: self.projections.iter().map(|w| Mat::zeros(w.raw_dim())).collect(),
            norm: LayerNorm {
                gain: Array1::zeros(self.norm.gain.len()),
                bias: Array1::zeros(self.norm.bias.len()),
                eps: self.norm.eps,
            },
            bypass_norm: self.bypass_norm,
        }
    }

    pub fn k(&self) -> usize {
        self.alphas.len()
    }

    pub fn target_dim(&self) -> usize {
        self.norm.gain.len()
    }
}

/// Injection-ready tokens `I` (`N × D′`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTokens {
    pub tokens: Mat,
    pub source: String,
    pub mask: Option<TokenMask>,
}

impl ReferenceTokens {
    pub fn new(tokens: Mat, source: impl Into<String>) -> Self {
        Self { tokens, source: source.into(), mask: None }
    }

    pub fn with_mask(mut self, mask: TokenMask) -> Result<Self> {
        if mask.len() != self.tokens.nrows() {
            return Err(shape_err(format!("mask of {} for {} tokens", mask.len(), self.tokens.nrows())));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn zeros_like(&self) -> Self {
        Self { tokens: Mat::zeros(self.tokens.raw_dim()), source: self.source.clone(), mask: self.mask.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct AggregateCache {
    z: Vec<Mat>,
    projected: Vec<Mat>,
    norm: Option<LayerNormCache>,
}

pub fn aggregate(stack: &LayerStack, params: &AggregatorParams) -> Result<ReferenceTokens> {
    Ok(aggregate_with_cache(stack, params)?.0)
}

/// `LN(Σ_i α_i z_{L−i} W_i)`, row by row.
pub fn aggregate_with_cache(
    stack: &LayerStack,
    params: &AggregatorParams,
) -> Result<(ReferenceTokens, AggregateCache)> {
    if stack.k() != params.k() {
        return Err(shape_err(format!("stack has {} layers, params expect {}", stack.k(), params.k())));
    }
    let mut sum = Mat::zeros((stack.tokens(), params.target_dim()));
    let mut projected = Vec::with_capacity(stack.k());
    for ((z, w), &alpha) in stack.z.iter().zip(&params.projections).zip(&params.alphas) {
        if z.ncols() != w.nrows() || w.ncols() != params.target_dim() {
            return Err(shape_err(format!("z {:?} against W {:?}", z.dim(), w.dim())));
        }
        let zw = z.dot(w);
        sum.scaled_add(alpha, &zw);
        projected.push(zw);
    }
    let (tokens, norm) = if params.bypass_norm {
        (sum, None)
    } else {
        let (out, cache) = params.norm.forward(&sum);
        (out, Some(cache))
    };
    let cache = AggregateCache { z: stack.z.clone(), projected, norm };
    Ok((ReferenceTokens::new(tokens, ""), cache))
}

/// Accumulates `dL/dparams` into `grads` given `dL/dI`.
pub fn aggregate_backward(
    params: &AggregatorParams,
    cache: &AggregateCache,
    d_tokens: &Mat,
    grads: &mut AggregatorParams,
) {
    let d_sum = match &cache.norm {
        Some(norm_cache) => {
            let (d_sum, d_gain, d_bias) = params.norm.backward(norm_cache, d_tokens);
            grads.norm.gain += &d_gain;
            grads.norm.bias += &d_bias;
            d_sum
        }
        None => d_tokens.clone(),
    };
    for i in 0..params.k() {
        grads.alphas[i] += (&d_sum * &cache.projected[i]).sum();
        grads.projections[i].scaled_add(params.alphas[i], &cache.z[i].t().dot(&d_sum));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs_diff, randn};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(h: usize, w: usize, p: usize) -> EncoderSpec {
        EncoderSpec { height: h, width: w, patch: p, hidden: 8, layers: 3, k: 2, target_dim: 8 }
    }

    #[test]
    fn token_count_examples() {
        assert_eq!(patch_token_count(&spec(224, 224, 14)).unwrap(), 257);
        assert_eq!(patch_token_count(&spec(14, 14, 14)).unwrap(), 2);
        assert!(patch_token_count(&spec(224, 225, 14)).is_err());
    }

    #[test]
    fn identity_configuration_returns_last_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = randn(5, 4, 1.0, &mut rng);
        let stack = LayerStack::new(vec![z.clone()]).unwrap();
        let params = AggregatorParams {
            alphas: array![1.0],
            projections: vec![Mat::eye(4)],
            norm: LayerNorm::new(4),
            bypass_norm: true,
        };
        assert_eq!(aggregate(&stack, &params).unwrap().tokens, z);
    }

    #[test]
    fn zero_alphas_give_zero_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = LayerStack::new(vec![randn(3, 4, 1.0, &mut rng), randn(3, 4, 1.0, &mut rng)]).unwrap();
        let s = EncoderSpec { height: 4, width: 4, patch: 2, hidden: 4, layers: 2, k: 2, target_dim: 5 };
        let mut params = AggregatorParams::init(&s, &mut rng);
        params.alphas.fill(0.0);
        params.bypass_norm = true;
        let out = aggregate(&stack, &params).unwrap();
        assert!(out.tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_two_layer_case() {
        let z_last = array![[1.0, 2.0, 0.0], [0.0, -1.0, 3.0]];
        let z_prev = array![[2.0, 0.0, 1.0], [1.0, 1.0, -2.0]];
        let w0 = array![[1.0, 0.0, 2.0], [0.0, 1.0, 0.0], [1.0, -1.0, 0.0]];
        let w1 = array![[0.0, 1.0, 0.0], [2.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        let params = AggregatorParams {
            alphas: array![0.5, 2.0],
            projections: vec![w0, w1],
            norm: LayerNorm::new(3),
            bypass_norm: true,
        };
        // 0.5·z_last·W0 = 0.5·[[1,2,2],[3,-4,0]], 2·z_prev·W1 = 2·[[0,2,1],[2,1,-1]]
        let expected = array![[0.5, 5.0, 3.0], [5.5, 0.0, -2.0]];
        let stack = LayerStack::new(vec![z_last, z_prev]).unwrap();
        let out = aggregate(&stack, &params).unwrap();
        assert!(max_abs_diff(&out.tokens, &expected) < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = EncoderSpec { height: 4, width: 4, patch: 2, hidden: 4, layers: 3, k: 3, target_dim: 4 };
        let params = AggregatorParams::init(&s, &mut rng);
        let stack = LayerStack::new(vec![randn(3, 4, 1.0, &mut rng)]).unwrap();
        assert!(matches!(aggregate(&stack, &params), Err(Error::Shape(_))));
        assert!(LayerStack::new(vec![randn(3, 4, 1.0, &mut rng), randn(2, 4, 1.0, &mut rng)]).is_err());
    }
}
