//! Frozen pose controllers turning a skeleton into denoiser residuals.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pose::{PoseSkeleton, JOINT_COUNT};
use crate::error::{Error, Result};
use crate::injection::{BlockKind, SiteId};
use crate::linalg::{digest_mats, randn, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    /// One residual added to the denoiser input features.
    T2iAdapter,
    /// Residuals added at every down and mid site.
    Controlnet,
    None,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::T2iAdapter => "t2i_adapter",
            ControllerKind::Controlnet => "controlnet",
            ControllerKind::None => "none",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2i" | "t2i_adapter" | "t2i-adapter" => Ok(Self::T2iAdapter),
            "controlnet" => Ok(Self::Controlnet),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown controller `{other}`"))),
        }
    }
}

/// Residuals for one denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlResidual {
    pub input: Option<Mat>,
    pub sites: Vec<Option<Mat>>,
}

impl ControlResidual {
    pub fn none(sites: usize) -> Self {
        Self { input: None, sites: vec![None; sites] }
    }
}

/// A frozen controller: Gaussian joint heatmaps on the latent grid, each
/// joint carrying a fixed feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerHandle {
    kind: ControllerKind,
    grid: (usize, usize),
    sigma: f64,
    strength: f64,
    joint_vectors: Mat,
    site_maps: Vec<Option<Mat>>,
}

impl ControllerHandle {
    pub fn new(
        kind: ControllerKind,
        hidden: usize,
        grid: (usize, usize),
        sites: &[SiteId],
        strength: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let joint_vectors = randn(JOINT_COUNT, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng);
        let site_maps = sites
            .iter()
            .map(|s| {
                let m = randn(hidden, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng);
                (kind == ControllerKind::Controlnet && s.kind != BlockKind::Up).then_some(m)
            })
            .collect();
        Self { kind, grid, sigma: 0.75, strength, joint_vectors, site_maps }
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    /// Always true: controllers are never trained here.
    pub fn frozen(&self) -> bool {
        true
    }

    /// Joint heatmaps (in latent-grid cells) mixed through the joint vectors.
    fn features(&self, skeleton: &PoseSkeleton) -> Mat {
        let (gw, gh) = self.grid;
        let mut f = Mat::zeros((gw * gh, self.joint_vectors.ncols()));
        for (j, joint) in skeleton.joints.iter().enumerate() {
            if !joint.detected {
                continue;
            }
            let (jx, jy) = (joint.x * gw as f64 - 0.5, joint.y * gh as f64 - 0.5);
            for gy in 0..gh {
                for gx in 0..gw {
                    let d2 = (gx as f64 - jx).powi(2) + (gy as f64 - jy).powi(2);
                    let w = joint.confidence * (-d2 / (2.0 * self.sigma * self.sigma)).exp();
                    f.row_mut(gy * gw + gx).scaled_add(w, &self.joint_vectors.row(j));
                }
            }
        }
        f * self.strength
    }

    pub fn residuals(&self, skeleton: Option<&PoseSkeleton>) -> ControlResidual {
        let n = self.site_maps.len();
        let Some(skeleton) = skeleton else {
            return ControlResidual::none(n);
        };
        match self.kind {
            ControllerKind::None => ControlResidual::none(n),
            ControllerKind::T2iAdapter => {
                ControlResidual { input: Some(self.features(skeleton)), sites: vec![None; n] }
            }
            ControllerKind::Controlnet => {
                let f = self.features(skeleton);
                ControlResidual { input: None, sites: self.site_maps.iter().map(|m| m.as_ref().map(|m| f.dot(m))).collect() }
            }
        }
    }

    pub fn param_digest(&self) -> [u8; 32] {
        digest_mats(std::iter::once(&self.joint_vectors).chain(self.site_maps.iter().flatten()))
    }

    /// Direct weight access, used only to prove the freeze audit bites.
    pub fn joint_vectors_mut(&mut self) -> &mut Mat {
        &mut self.joint_vectors
    }
}
