//! Dense `f64` matrix helpers shared by the encoder, attention and trainer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type Mat = Array2<f64>;

/// Matrix with i.i.d. `N(0, scale²)` entries.
pub fn randn(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random matrix with orthonormal columns (`rows >= cols`) or orthonormal
/// rows (`rows < cols`), via Gram-Schmidt on a Gaussian draw.
pub fn orthonormal(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    if rows < cols {
        return orthonormal(cols, rows, rng).t().as_standard_layout().into_owned();
    }
    let mut m = randn(rows, cols, 1.0, rng);
    for j in 0..cols {
        for i in 0..j {
            let proj = m.column(i).dot(&m.column(j));
            let ci = m.column(i).to_owned();
            m.column_mut(j).scaled_add(-proj, &ci);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|x| x / norm);
    }
    m
}

/// Fixed 2D sine-cosine features for a `gw × gh` grid, one row per cell in
/// row-major order. Half the columns encode x, half encode y.
pub fn sincos_2d(gw: usize, gh: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let pairs = half / 2;
    let mut out = Mat::zeros((gw * gh, dim));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for (offset, coord) in [(0, gx as f64), (half, gy as f64)] {
                for i in 0..pairs {
                    let freq = 1.0 / 10f64.powf(i as f64 / pairs.max(1) as f64);
                    out[[row, offset + 2 * i]] = (coord * freq).sin();
                    out[[row, offset + 2 * i + 1]] = (coord * freq).cos();
                }
            }
        }
    }
    out
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Backward pass of a row softmax: given probabilities `p` and `dL/dp`,
/// returns `dL/dlogits`.
pub fn softmax_rows_backward(p: &Mat, d_p: &Mat) -> Mat {
    let dot = (p * d_p).sum_axis(Axis(1)).insert_axis(Axis(1));
    p * &(d_p - &dot)
}

/// Per-row normalization with a learnable affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Mat,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gain: Array1::ones(dim), bias: Array1::zeros(dim), eps: 1e-5 }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (r, mut row) in normalized.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std[r] = inv;
        }
        let out = &normalized * &self.gain + &self.bias;
        (out, LayerNormCache { normalized, inv_std })
    }

    /// Returns `(dL/dx, dL/dgain, dL/dbias)`.
    pub fn backward(&self, cache: &LayerNormCache, d_out: &Mat) -> (Mat, Array1<f64>, Array1<f64>) {
        let d_gain = (d_out * &cache.normalized).sum_axis(Axis(0));
        let d_bias = d_out.sum_axis(Axis(0));
        let d_norm = d_out * &self.gain;
        let n = d_out.ncols() as f64;
        let mut d_x = Mat::zeros(d_out.raw_dim());
        for r in 0..d_out.nrows() {
            let dn = d_norm.row(r);
            let xh = cache.normalized.row(r);
            let mean_dn = dn.sum() / n;
            let mean_dn_xh = dn.dot(&xh) / n;
            let inv = cache.inv_std[r];
            for c in 0..d_out.ncols() {
                d_x[[r, c]] = inv * (dn[c] - mean_dn - xh[c] * mean_dn_xh);
            }
        }
        (d_x, d_gain, d_bias)
    }
}

/// SHA-256 over the little-endian bytes of every matrix, in order, with
/// shapes mixed in.
pub fn digest_mats<'a>(mats: impl IntoIterator<Item = &'a Mat>) -> [u8; 32] {
    let mut h = Sha256::new();
    for m in mats {
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
