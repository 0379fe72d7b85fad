//! Decoupled cross-attention with token-masked reference branches.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{patch_token_count, EncoderSpec, ReferenceTokens};
use crate::error::{shape_err, Error, Result};
use crate::image::Mask;
use crate::linalg::{softmax_rows, softmax_rows_backward, Mat};

/// Per-token foreground indicator; entry 0 is the class token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    bits: Vec<bool>,
    pub origin: String,
}

impl TokenMask {
    pub fn new(bits: Vec<bool>, origin: impl Into<String>) -> Self {
        Self { bits, origin: origin.into() }
    }

    pub fn ones(n: usize) -> Self {
        Self::new(vec![true; n], "all-ones")
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![false; n], "all-zeros")
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn weights(&self) -> Array1<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Background logits shifted by `−B` before the softmax.
    TrainBias,
    /// Background weights zeroed after the softmax.
    InferMultiplicative,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::TrainBias => "train_bias",
            MaskMode::InferMultiplicative => "infer_multiplicative",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_bias" | "train" => Ok(MaskMode::TrainBias),
            "infer_multiplicative" | "infer" => Ok(MaskMode::InferMultiplicative),
            other => Err(Error::Config(format!("unknown mask mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    FullBlocks,
    UpBlocks,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::FullBlocks => "full_blocks",
            Scope::UpBlocks => "up_blocks",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_blocks" | "full" => Ok(Scope::FullBlocks),
            "up_blocks" | "up" => Ok(Scope::UpBlocks),
            other => Err(Error::Config(format!("unknown injection scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    /// Single-reference scale `γ`.
    pub gamma: f64,
    /// Per-reference scales `γ′_i`; missing entries fall back to `gamma`.
    pub ref_scales: Vec<f64>,
    pub neg_bias: f64,
    pub mode: MaskMode,
    pub scope: Scope,
    pub renormalize: bool,
    pub class_token_foreground: bool,
    /// Foreground-pixel fraction at which a patch counts as foreground.
    pub token_threshold: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            ref_scales: Vec::new(),
            neg_bias: 1e4,
            mode: MaskMode::InferMultiplicative,
            scope: Scope::FullBlocks,
            renormalize: false,
            class_token_foreground: true,
            token_threshold: 0.5,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || self.ref_scales.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("injection scales must be non-negative".into()));
        }
        if !(self.neg_bias > 0.0) {
            return Err(Error::Config("neg_bias must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.token_threshold) {
            return Err(Error::Config("token_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn ref_scale(&self, i: usize) -> f64 {
        self.ref_scales.get(i).copied().unwrap_or(self.gamma)
    }
}

/// Queries, text keys/values and one site's image projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionIO {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
}

impl AttentionIO {
    fn check(&self, tokens: &Mat) -> Result<()> {
        let d = self.q.ncols();
        if self.k.ncols() != d || self.k.nrows() != self.v.nrows() {
            return Err(shape_err(format!("Q {:?}, K {:?}, V {:?}", self.q.dim(), self.k.dim(), self.v.dim())));
        }
        if self.w_k.ncols() != d || self.w_k.nrows() != tokens.ncols() || self.w_v.nrows() != tokens.ncols() {
            return Err(shape_err(format!(
                "I {:?} against W_K′ {:?}, W_V′ {:?}",
                tokens.dim(),
                self.w_k.dim(),
                self.w_v.dim()
            )));
        }
        if self.w_v.ncols() != self.v.ncols() {
            return Err(shape_err("image and text value widths differ"));
        }
        Ok(())
    }
}

/// Saved activations of one attention branch.
#[derive(Debug, Clone)]
pub struct BranchCache {
    probs: Mat,
    weights: Mat,
    mask: Option<Array1<f64>>,
    renorm: Option<Array1<f64>>,
}

impl BranchCache {
    /// Weights actually applied to the value rows.
    pub fn weights(&self) -> &Mat {
        &self.weights
    }
}

fn logits(q: &Mat, keys: &Mat) -> Mat {
    q.dot(&keys.t()) / (q.ncols() as f64).sqrt()
}

/// Scaled dot-product attention with row softmax.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    softmax_rows(&logits(q, k)).dot(v)
}

/// One attention branch with an optional token mask applied per `mode`.
pub fn branch_forward(
    q: &Mat,
    keys: &Mat,
    values: &Mat,
    mask: Option<&TokenMask>,
    mode: MaskMode,
    neg_bias: f64,
    renormalize: bool,
) -> (Mat, BranchCache) {
    let mut s = logits(q, keys);
    let m = mask.map(TokenMask::weights);
    if let (Some(m), MaskMode::TrainBias) = (&m, mode) {
        if m.iter().all(|&w| w == 0.0) {
            log::warn!("all-background token mask in train mode; attention falls back to the unmasked pattern");
        }
        for mut row in s.rows_mut() {
            row.zip_mut_with(m, |x, &w| *x -= neg_bias * (1.0 - w));
        }
    }
    let probs = softmax_rows(&s);
    let mut weights = probs.clone();
    let mut renorm = None;
    if let (Some(m), MaskMode::InferMultiplicative) = (&m, mode) {
        for mut row in weights.rows_mut() {
            row *= m;
        }
        if renormalize {
            let sums = weights.sum_axis(Axis(1));
            for (mut row, &s) in weights.rows_mut().into_iter().zip(&sums) {
                if s > 0.0 {
                    row /= s;
                }
            }
            renorm = Some(sums);
        }
    }
    let out = weights.dot(values);
    let mask = if mode == MaskMode::InferMultiplicative { m } else { None };
    (out, BranchCache { probs, weights, mask, renorm })
}

/// Returns `(dQ, dKeys, dValues)`.
pub fn branch_backward(q: &Mat, keys: &Mat, values: &Mat, cache: &BranchCache, d_out: &Mat) -> (Mat, Mat, Mat) {
    let d_values = cache.weights.t().dot(d_out);
    let mut d_w = d_out.dot(&values.t());
    if let Some(sums) = &cache.renorm {
        for ((mut dr, r), &s) in d_w.rows_mut().into_iter().zip(cache.weights.rows()).zip(sums) {
            if s > 0.0 {
                let dot = dr.dot(&r);
                dr.mapv_inplace(|g| (g - dot) / s);
            }
        }
    }
    if let Some(m) = &cache.mask {
        for mut row in d_w.rows_mut() {
            row *= m;
        }
    }
    let d_s = softmax_rows_backward(&cache.probs, &d_w) / (q.ncols() as f64).sqrt();
    (d_s.dot(keys), d_s.t().dot(q), d_values)
}

/// `Attn(Q,K,V) + γ·Attn(Q, I·W_K′, I·W_V′)`; the image branch is skipped
/// outright when `γ = 0`.
pub fn decoupled_attention(io: &AttentionIO, refs: &ReferenceTokens, cfg: &InjectionConfig) -> Result<Mat> {
    io.check(&refs.tokens)?;
    let mut z = attention(&io.q, &io.k, &io.v);
    if cfg.gamma != 0.0 {
        let img = attention(&io.q, &refs.tokens.dot(&io.w_k), &refs.tokens.dot(&io.w_v));
        z.scaled_add(cfg.gamma, &img);
    }
    Ok(z)
}

/// `Attn(Q,K,V) + Σ_i γ′_i·MaskedAttn_i`, masking per `cfg.mode`.
pub fn masked_multi_reference_attention(
    io: &AttentionIO,
    refs: &[(&ReferenceTokens, &TokenMask, f64)],
    cfg: &InjectionConfig,
) -> Result<Mat> {
    let mut z = attention(&io.q, &io.k, &io.v);
    for (i, (tokens, mask, scale)) in refs.iter().enumerate() {
        io.check(&tokens.tokens)?;
        if mask.len() != tokens.tokens.nrows() {
            return Err(shape_err(format!(
                "reference {i}: mask of {} for {} tokens",
                mask.len(),
                tokens.tokens.nrows()
            )));
        }
        if *scale == 0.0 {
            continue;
        }
        let (out, _) = branch_forward(
            &io.q,
            &tokens.tokens.dot(&io.w_k),
            &tokens.tokens.dot(&io.w_v),
            Some(mask),
            cfg.mode,
            cfg.neg_bias,
            cfg.renormalize,
        );
        z.scaled_add(*scale, &out);
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Down,
    Mid,
    Up,
}

/// A cross-attention site, written `down.0`, `mid.0`, `up.1`, ….
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteId {
    pub kind: BlockKind,
    pub index: usize,
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            BlockKind::Down => "down",
            BlockKind::Mid => "mid",
            BlockKind::Up => "up",
        };
        write!(f, "{kind}.{}", self.index)
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("bad site id `{s}`"));
        let (kind, index) = s.split_once('.').ok_or_else(bad)?;
        let kind = match kind {
            "down" => BlockKind::Down,
            "mid" => BlockKind::Mid,
            "up" => BlockKind::Up,
            _ => return Err(bad()),
        };
        Ok(Self { kind, index: index.parse().map_err(|_| bad())? })
    }
}

/// The denoiser's cross-attention sites in execution order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnetSpec {
    sites: Vec<SiteId>,
    attached: Option<Scope>,
}

impl UnetSpec {
    pub fn new(down: usize, mid: usize, up: usize) -> Self {
        let mk = |kind, n| (0..n).map(move |index| SiteId { kind, index });
        let sites = mk(BlockKind::Down, down).chain(mk(BlockKind::Mid, mid)).chain(mk(BlockKind::Up, up)).collect();
        Self { sites, attached: None }
    }

    pub fn sites(&self) -> &[SiteId] {
        &self.sites
    }

    pub fn attached(&self) -> Option<Scope> {
        self.attached
    }

    pub fn sites_in_scope(&self, scope: Scope) -> Vec<SiteId> {
        self.sites
            .iter()
            .copied()
            .filter(|s| scope == Scope::FullBlocks || s.kind == BlockKind::Up)
            .collect()
    }
}

/// Marks the sites receiving injection; a second attach is rejected.
pub fn attach(spec: &mut UnetSpec, scope: Scope) -> Result<Vec<SiteId>> {
    if spec.attached.is_some() {
        return Err(Error::AlreadyAttached);
    }
    spec.attached = Some(scope);
    Ok(spec.sites_in_scope(scope))
}

/// A patch is foreground when its foreground-pixel fraction reaches `threshold`.
pub fn pixel_mask_to_token_mask(
    mask: &Mask,
    spec: &EncoderSpec,
    threshold: f64,
    class_token_foreground: bool,
) -> Result<TokenMask> {
    let n = patch_token_count(spec)?;
    if mask.width() != spec.width || mask.height() != spec.height {
        return Err(shape_err(format!(
            "{}x{} mask for a {}x{} encoder",
            mask.width(),
            mask.height(),
            spec.width,
            spec.height
        )));
    }
    let p = spec.patch;
    let (gw, gh) = spec.grid();
    let mut bits = Vec::with_capacity(n);
    bits.push(class_token_foreground);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut fg = 0;
            for y in gy * p..(gy + 1) * p {
                for x in gx * p..(gx + 1) * p {
                    fg += mask.get(x, y) as usize;
                }
            }
            bits.push(fg as f64 / (p * p) as f64 >= threshold);
        }
    }
    Ok(TokenMask::new(bits, "pixel-mask"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs_diff, randn};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Materializes every logit, exponential and weighted sum with scalar loops.
    fn dense_attention(q: &Mat, k: &Mat, v: &Mat, bias: &[f64], gate: &[f64]) -> Mat {
        let d = q.ncols() as f64;
        let mut out = Mat::zeros((q.nrows(), v.ncols()));
        for i in 0..q.nrows() {
            let mut s = vec![0.0; k.nrows()];
            for j in 0..k.nrows() {
                for c in 0..q.ncols() {
                    s[j] += q[[i, c]] * k[[j, c]];
                }
                s[j] = s[j] / d.sqrt() + bias[j];
            }
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for j in 0..k.nrows() {
                for c in 0..v.ncols() {
                    out[[i, c]] += e[j] / total * gate[j] * v[[j, c]];
                }
            }
        }
        out
    }

    fn io(rng: &mut ChaCha8Rng, m: usize, t: usize, dp: usize, d: usize) -> AttentionIO {
        AttentionIO {
            q: randn(m, d, 1.0, rng),
            k: randn(t, d, 1.0, rng),
            v: randn(t, d, 1.0, rng),
            w_k: randn(dp, d, 1.0, rng),
            w_v: randn(dp, d, 1.0, rng),
        }
    }

    #[test]
    fn gamma_zero_is_bitwise_base_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let io = io(&mut rng, 2, 3, 4, 2);
        let refs = ReferenceTokens::new(randn(3, 4, 1.0, &mut rng), "r");
        let cfg = InjectionConfig { gamma: 0.0, ..Default::default() };
        assert_eq!(decoupled_attention(&io, &refs, &cfg).unwrap(), attention(&io.q, &io.k, &io.v));
    }

    #[test]
    fn zero_reference_tokens_contribute_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let io = io(&mut rng, 2, 3, 4, 2);
        let refs = ReferenceTokens::new(Mat::zeros((3, 4)), "r");
        let z = decoupled_attention(&io, &refs, &InjectionConfig::default()).unwrap();
        assert_eq!(z, attention(&io.q, &io.k, &io.v));
    }

    #[test]
    fn small_hand_set_case_matches_dense_oracle() {
        let io = AttentionIO {
            q: array![[1.0, 0.0], [0.5, -1.0]],
            k: array![[1.0, 1.0], [0.0, 2.0]],
            v: array![[1.0, 0.0], [0.0, 1.0]],
            w_k: array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            w_v: array![[2.0, 0.0], [0.0, -1.0], [1.0, 0.5]],
        };
        let i = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let cfg = InjectionConfig { gamma: 0.7, ..Default::default() };
        let z = decoupled_attention(&io, &ReferenceTokens::new(i.clone(), "r"), &cfg).unwrap();
        let base = dense_attention(&io.q, &io.k, &io.v, &[0.0; 2], &[1.0; 2]);
        let img = dense_attention(&io.q, &i.dot(&io.w_k), &i.dot(&io.w_v), &[0.0; 3], &[1.0; 3]);
        assert!(max_abs_diff(&z, &(base + img * 0.7)) < 1e-10);
    }

    #[test]
    fn complementary_masks_match_per_reference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let io = io(&mut rng, 3, 2, 3, 2);
        let r1 = ReferenceTokens::new(randn(3, 3, 1.0, &mut rng), "a");
        let r2 = ReferenceTokens::new(randn(3, 3, 1.0, &mut rng), "b");
        let m1 = TokenMask::new(vec![true, true, false], "m1");
        let m2 = TokenMask::new(vec![false, false, true], "m2");
        for mode in [MaskMode::TrainBias, MaskMode::InferMultiplicative] {
            let cfg = InjectionConfig { mode, ..Default::default() };
            let z = masked_multi_reference_attention(&io, &[(&r1, &m1, 0.6), (&r2, &m2, 1.3)], &cfg).unwrap();
            let mut expected = dense_attention(&io.q, &io.k, &io.v, &[0.0; 2], &[1.0; 2]);
            for (r, m, g) in [(&r1, &m1, 0.6), (&r2, &m2, 1.3)] {
                let w: Vec<f64> = m.bits().iter().map(|&b| b as u8 as f64).collect();
                let (bias, gate) = match mode {
                    MaskMode::TrainBias => (w.iter().map(|x| -1e4 * (1.0 - x)).collect(), vec![1.0; 3]),
                    MaskMode::InferMultiplicative => (vec![0.0; 3], w.clone()),
                };
                let keys = r.tokens.dot(&io.w_k);
                let vals = r.tokens.dot(&io.w_v);
                expected = expected + dense_attention(&io.q, &keys, &vals, &bias, &gate) * g;
            }
            assert!(max_abs_diff(&z, &expected) < 1e-10);
        }
    }

    #[test]
    fn zero_mask_in_infer_mode_drops_the_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let io = io(&mut rng, 2, 3, 4, 2);
        let r = ReferenceTokens::new(randn(3, 4, 1.0, &mut rng), "r");
        let cfg = InjectionConfig::default();
        let z = masked_multi_reference_attention(&io, &[(&r, &TokenMask::zeros(3), 1.0)], &cfg).unwrap();
        assert_eq!(z, attention(&io.q, &io.k, &io.v));
        assert_eq!(masked_multi_reference_attention(&io, &[], &cfg).unwrap(), z);
    }

    #[test]
    fn branch_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = randn(3, 2, 1.0, &mut rng);
        let keys = randn(4, 2, 1.0, &mut rng);
        let vals = randn(4, 3, 1.0, &mut rng);
        let g = randn(3, 3, 1.0, &mut rng);
        let mask = TokenMask::new(vec![true, false, true, true], "m");
        for (mode, renorm) in [(MaskMode::TrainBias, false), (MaskMode::InferMultiplicative, false), (MaskMode::InferMultiplicative, true)] {
            let f = |q: &Mat, k: &Mat, v: &Mat| (&branch_forward(q, k, v, Some(&mask), mode, 3.0, renorm).0 * &g).sum();
            let (_, cache) = branch_forward(&q, &keys, &vals, Some(&mask), mode, 3.0, renorm);
            let (dq, dk, dv) = branch_backward(&q, &keys, &vals, &cache, &g);
            let h = 1e-6;
            let fd = |which: usize, idx: (usize, usize)| {
                let mut args = [q.clone(), keys.clone(), vals.clone()];
                args[which][idx] += h;
                let up = f(&args[0], &args[1], &args[2]);
                args[which][idx] -= 2.0 * h;
                (up - f(&args[0], &args[1], &args[2])) / (2.0 * h)
            };
            for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
                for ((i, j), &a) in grad.indexed_iter() {
                    assert!((fd(which, (i, j)) - a).abs() < 1e-7, "{mode:?} {which} {i},{j}");
                }
            }
        }
    }

    #[test]
    fn attach_scopes_and_double_attach() {
        let mut spec = UnetSpec::new(2, 1, 2);
        let up = attach(&mut spec, Scope::UpBlocks).unwrap();
        assert_eq!(up.len(), 2);
        assert!(up.iter().all(|s| s.kind == BlockKind::Up));
        assert!(matches!(attach(&mut spec, Scope::UpBlocks), Err(Error::AlreadyAttached)));
        assert_eq!(attach(&mut UnetSpec::new(2, 1, 2), Scope::FullBlocks).unwrap().len(), 5);
        assert!("sideways".parse::<Scope>().is_err());
        assert_eq!("mid.0".parse::<SiteId>().unwrap().to_string(), "mid.0");
    }

    #[test]
    fn pixel_mask_examples() {
        let spec = EncoderSpec { height: 28, width: 28, patch: 14, hidden: 4, layers: 1, k: 1, target_dim: 4 };
        let white = Mask::new(28, 28, true);
        assert_eq!(pixel_mask_to_token_mask(&white, &spec, 0.5, true).unwrap().bits(), &[true; 5]);
        let black = Mask::new(28, 28, false);
        assert_eq!(pixel_mask_to_token_mask(&black, &spec, 0.5, true).unwrap().bits(), &[true, false, false, false, false]);
        // 118 of the top-left patch's 196 pixels (≈60%).
        let partial = Mask::from_fn(28, 28, |x, y| x < 14 && y < 14 && y * 14 + x < 118);
        let tm = pixel_mask_to_token_mask(&partial, &spec, 0.5, true).unwrap();
        assert_eq!(tm.bits(), &[true, true, false, false, false]);
        assert!(pixel_mask_to_token_mask(&Mask::new(27, 28, true), &spec, 0.5, true).is_err());
    }
}
