//! Prompt-driven subject segmentation contract and its doubles.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};

pub struct SegmenterRequest<'a> {
    pub id: &'a str,
    pub image: &'a RgbImage,
    pub prompt: &'a str,
}

pub trait Segmenter {
    fn segment(&self, req: &SegmenterRequest<'_>) -> Result<Mask>;
}

fn check_prompt(req: &SegmenterRequest<'_>) -> Result<()> {
    if req.prompt.trim().is_empty() {
        return Err(Error::Data(format!("empty segmentation prompt for `{}`", req.id)));
    }
    Ok(())
}

/// Returns stored ground-truth masks keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct OracleSegmenter {
    masks: HashMap<String, Mask>,
}

impl OracleSegmenter {
    pub fn insert(&mut self, id: impl Into<String>, mask: Mask) {
        self.masks.insert(id.into(), mask);
    }
}

impl Segmenter for OracleSegmenter {
    fn segment(&self, req: &SegmenterRequest<'_>) -> Result<Mask> {
        check_prompt(req)?;
        self.masks
            .get(req.id)
            .cloned()
            .ok_or_else(|| Error::Backend(format!("no stored mask for `{}`", req.id)))
    }
}

/// Foreground = any channel farther than `tolerance` from the background colour.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdSegmenter {
    pub background: [f64; 3],
    pub tolerance: f64,
}

impl Default for ThresholdSegmenter {
    fn default() -> Self {
        Self { background: [1.0; 3], tolerance: 0.02 }
    }
}

impl ThresholdSegmenter {
    pub fn mask(&self, image: &RgbImage) -> Mask {
        Mask::from_fn(image.width(), image.height(), |x, y| {
            image.get(x, y).iter().zip(&self.background).any(|(a, b)| (a - b).abs() > self.tolerance)
        })
    }
}

impl Segmenter for ThresholdSegmenter {
    fn segment(&self, req: &SegmenterRequest<'_>) -> Result<Mask> {
        check_prompt(req)?;
        Ok(self.mask(req.image))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_is_bit_exact_and_rejects_unknown_ids() {
        let mask = Mask::from_fn(5, 4, |x, y| x > y);
        let mut seg = OracleSegmenter::default();
        seg.insert("a", mask.clone());
        let img = RgbImage::white(5, 4);
        let req = |id| SegmenterRequest { id, image: &img, prompt: "1girl" };
        assert_eq!(seg.segment(&req("a")).unwrap(), mask);
        assert!(matches!(seg.segment(&req("b")), Err(Error::Backend(_))));
    }

    #[test]
    fn white_square_on_black() {
        let mut img = RgbImage::filled(10, 10, [0.0; 3]);
        for y in 3..7 {
            for x in 3..7 {
                img.set(x, y, [1.0; 3]);
            }
        }
        let seg = ThresholdSegmenter { background: [0.0; 3], tolerance: 0.5 };
        let got = seg.segment(&SegmenterRequest { id: "sq", image: &img, prompt: "square" }).unwrap();
        assert_eq!(got, Mask::from_fn(10, 10, |x, y| (3..7).contains(&x) && (3..7).contains(&y)));
        assert!(seg.segment(&SegmenterRequest { id: "sq", image: &img, prompt: " " }).is_err());
    }
}
