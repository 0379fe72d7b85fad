//! 18-joint skeletons, their text format, and pose-extraction doubles.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const JOINT_COUNT: usize = 18;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist", "r_hip",
    "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
];

/// Joint pairs joined by a limb.
pub const LIMBS: [(usize, usize); 17] = [
    (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7), (1, 8), (8, 9), (9, 10),
    (1, 11), (11, 12), (12, 13), (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub detected: bool,
}

impl Joint {
    pub const MISSING: Joint = Joint { x: 0.0, y: 0.0, confidence: 0.0, detected: false };

    pub fn at(x: f64, y: f64) -> Self {
        Self { x, y, confidence: 1.0, detected: true }
    }
}

/// Joint coordinates normalized to `[0,1]`, origin top-left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSkeleton {
    pub joints: [Joint; JOINT_COUNT],
}

impl PoseSkeleton {
    pub fn undetected() -> Self {
        Self { joints: [Joint::MISSING; JOINT_COUNT] }
    }

    pub fn detected_count(&self) -> usize {
        self.joints.iter().filter(|j| j.detected).count()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, j) in self.joints.iter().enumerate() {
            let in_unit = |v: f64| (0.0..=1.0).contains(&v);
            if !in_unit(j.confidence) || (j.detected && !(in_unit(j.x) && in_unit(j.y))) {
                return Err(Error::Data(format!("joint {i} outside the unit square")));
            }
        }
        Ok(())
    }

    /// One `id x y confidence detected` line per joint.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, j) in self.joints.iter().enumerate() {
            let _ = writeln!(s, "{i} {:.9} {:.9} {:.6} {}", j.x, j.y, j.confidence, j.detected as u8);
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut skel = Self::undetected();
        let mut seen = [false; JOINT_COUNT];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Data(format!("skeleton line {}: {what}", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let id: usize = f[0].parse().map_err(|_| bad("joint id"))?;
            if id >= JOINT_COUNT || seen[id] {
                return Err(bad("joint id out of range or repeated"));
            }
            seen[id] = true;
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("number"));
            skel.joints[id] = Joint {
                x: num(f[1])?,
                y: num(f[2])?,
                confidence: num(f[3])?,
                detected: match f[4] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad("detected flag must be 0 or 1")),
                },
            };
        }
        skel.validate()?;
        Ok(skel)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub struct PoseRequest<'a> {
    pub id: &'a str,
    pub image: &'a RgbImage,
}

pub trait PoseExtractor {
    /// No person found is not an error: every joint comes back undetected.
    fn extract_pose(&self, req: &PoseRequest<'_>) -> Result<PoseSkeleton>;
}

/// Returns stored skeletons keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct StoredPoseOracle {
    skeletons: HashMap<String, PoseSkeleton>,
}

impl StoredPoseOracle {
    pub fn insert(&mut self, id: impl Into<String>, skeleton: PoseSkeleton) {
        self.skeletons.insert(id.into(), skeleton);
    }
}

impl PoseExtractor for StoredPoseOracle {
    fn extract_pose(&self, req: &PoseRequest<'_>) -> Result<PoseSkeleton> {
        self.skeletons
            .get(req.id)
            .cloned()
            .ok_or_else(|| Error::Backend(format!("no stored skeleton for `{}`", req.id)))
    }
}

/// Saturated marker colour for each joint; figure colours stay desaturated
/// so they never collide with these.
pub fn marker_color(joint: usize) -> [f64; 3] {
    let h = joint as f64 / JOINT_COUNT as f64 * 6.0;
    let sector = h.floor() as usize;
    let f = h - h.floor();
    match sector % 6 {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

/// Finds joint markers by exact colour (within `tolerance` per channel) and
/// reports their centroids.
#[derive(Debug, Clone, Copy)]
pub struct StickFigureDetector {
    pub tolerance: f64,
}

impl Default for StickFigureDetector {
    fn default() -> Self {
        Self { tolerance: 0.02 }
    }
}

impl StickFigureDetector {
    pub fn detect(&self, image: &RgbImage) -> PoseSkeleton {
        let colors: Vec<[f64; 3]> = (0..JOINT_COUNT).map(marker_color).collect();
        let mut acc = [(0.0, 0.0, 0usize); JOINT_COUNT];
        for y in 0..image.height() {
            for x in 0..image.width() {
                let px = image.get(x, y);
                let hit = colors
                    .iter()
                    .position(|c| c.iter().zip(&px).all(|(a, b)| (a - b).abs() <= self.tolerance));
                if let Some(j) = hit {
                    acc[j].0 += x as f64;
                    acc[j].1 += y as f64;
                    acc[j].2 += 1;
                }
            }
        }
        let mut skel = PoseSkeleton::undetected();
        for (j, &(sx, sy, n)) in acc.iter().enumerate() {
            if n > 0 {
                let n = n as f64;
                skel.joints[j] =
                    Joint::at((sx / n + 0.5) / image.width() as f64, (sy / n + 0.5) / image.height() as f64);
            }
        }
        skel
    }
}

impl PoseExtractor for StickFigureDetector {
    fn extract_pose(&self, req: &PoseRequest<'_>) -> Result<PoseSkeleton> {
        Ok(self.detect(req.image))
    }
}
