//! Seeded surrogate text encoder: each tag hashes to a fixed embedding, and a
//! begin token is always present so an empty prompt still has one key.

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::linalg::{randn, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateText {
    dim: usize,
    seed: u64,
}

pub trait TextEncoder {
    fn dim(&self) -> usize;
    /// Token matrix, one row per token including the begin token.
    fn encode(&self, tags: &[String]) -> Mat;
    fn param_digest(&self) -> [u8; 32];

    fn pooled(&self, tags: &[String]) -> Array1<f64> {
        self.encode(tags).mean_axis(Axis(0)).expect("begin token is always present")
    }
}

impl SurrogateText {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn embed(&self, token: &str) -> Array1<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        randn(1, self.dim, 1.0, &mut rng).row(0).to_owned()
    }
}

impl TextEncoder for SurrogateText {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tags: &[String]) -> Mat {
        let mut out = Mat::zeros((tags.len() + 1, self.dim));
        out.row_mut(0).assign(&self.embed("<bos>"));
        for (i, tag) in tags.iter().enumerate() {
            out.row_mut(i + 1).assign(&self.embed(&format!("tag:{tag}")));
        }
        out
    }

    fn param_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_embed_deterministically() {
        let enc = SurrogateText::new(6, 1);
        let tags = vec!["1girl".to_string(), "solo".to_string()];
        assert_eq!(enc.encode(&tags), enc.encode(&tags));
        assert_eq!(enc.encode(&tags).nrows(), 3);
        assert_eq!(enc.encode(&[]).nrows(), 1);
        assert_ne!(enc.encode(&tags).row(1), enc.encode(&tags).row(2));
    }
}
