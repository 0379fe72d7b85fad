//! Seeded surrogate vision transformer: patch embedding, class token, 2D
//! sine-cosine positions and residual token-wise blocks. The class token
//! additionally pools the patch tokens so it summarizes the whole image.

use ndarray::{s, Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderSpec, VisionEncoder};
use crate::error::Result;
use crate::image::{image_to_latent, RgbImage};
use crate::linalg::{digest_mats, randn, sincos_2d, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateVit {
    spec: EncoderSpec,
    patch_embed: Mat,
    class_token: Array1<f64>,
    positions: Mat,
    blocks: Vec<Mat>,
}

impl SurrogateVit {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.hidden;
        let patch_dim = 3 * spec.patch * spec.patch;
        let (gw, gh) = spec.grid();
        Ok(Self {
            spec,
            patch_embed: randn(patch_dim, d, 1.0 / (patch_dim as f64).sqrt(), &mut rng),
            class_token: randn(1, d, 1.0, &mut rng).row(0).to_owned(),
            positions: sincos_2d(gw, gh, d),
            blocks: (0..spec.layers).map(|_| randn(d, d, 1.0 / (d as f64).sqrt(), &mut rng)).collect(),
        })
    }

    /// Raw weights, exposed so tests can tamper with a copy.
    pub fn blocks_mut(&mut self) -> &mut [Mat] {
        &mut self.blocks
    }
}

impl VisionEncoder for SurrogateVit {
    fn spec(&self) -> EncoderSpec {
        self.spec
    }

    fn layer_outputs(&self, image: &RgbImage) -> Result<Vec<Mat>> {
        let patches = image_to_latent(image, self.spec.patch)?;
        let n = patches.nrows() + 1;
        let mut z = Mat::zeros((n, self.spec.hidden));
        z.row_mut(0).assign(&self.class_token);
        z.slice_mut(s![1.., ..]).assign(&(patches.dot(&self.patch_embed) + &self.positions));
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for a in &self.blocks {
            z = &z + &(z.dot(a).mapv(f64::tanh) * 0.5);
            let pooled = (&z.slice(s![1.., ..]) - &self.positions).mean_axis(Axis(0)).expect("patch tokens");
            let cls = z.row(0).to_owned() * 0.5 + pooled * 0.5;
            z.row_mut(0).assign(&cls);
            outputs.push(z.clone());
        }
        Ok(outputs)
    }

    fn param_digest(&self) -> [u8; 32] {
        let cls = self.class_token.clone().insert_axis(Axis(0));
        digest_mats([&self.patch_embed, &cls, &self.positions].into_iter().chain(&self.blocks))
    }
}
