//! Toy reference renderer: a stick figure on white, coloured from tags,
//! posed from a small template set and framed per reference kind. Joint
//! markers are drawn last in their reserved colours so the stick-figure
//! detector can read the pose back.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::pose::{marker_color, Joint, PoseSkeleton, JOINT_COUNT, LIMBS};
use crate::image::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framing {
    Orig,
    Full,
    Upper,
    Portrait,
}

const PALETTE: [(&str, [f64; 3]); 13] = [
    ("black", [0.25, 0.25, 0.28]),
    ("white", [0.9, 0.9, 0.86]),
    ("blonde", [0.85, 0.75, 0.45]),
    ("yellow", [0.85, 0.8, 0.4]),
    ("brown", [0.5, 0.35, 0.25]),
    ("red", [0.75, 0.35, 0.35]),
    ("blue", [0.4, 0.5, 0.75]),
    ("green", [0.45, 0.65, 0.45]),
    ("pink", [0.85, 0.6, 0.7]),
    ("purple", [0.6, 0.45, 0.7]),
    ("grey", [0.6, 0.6, 0.64]),
    ("orange", [0.85, 0.6, 0.4]),
    ("aqua", [0.45, 0.7, 0.7]),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FigureStyle {
    pub hair: [f64; 3],
    pub top: [f64; 3],
    pub bottom: [f64; 3],
    pub skin: [f64; 3],
}

impl Default for FigureStyle {
    fn default() -> Self {
        Self { hair: PALETTE[4].1, top: PALETTE[6].1, bottom: PALETTE[0].1, skin: [0.95, 0.82, 0.72] }
    }
}

fn color_word(tag: &str) -> Option<[f64; 3]> {
    let first = tag.split_whitespace().next()?;
    let first = if first == "silver" || first == "gray" { "grey" } else { first };
    PALETTE.iter().find(|(w, _)| *w == first).map(|(_, c)| *c)
}

impl FigureStyle {
    /// Picks colours from tags such as `blonde hair`, `white shirt`, `purple skirt`.
    pub fn from_tags(tags: &[String]) -> Self {
        let mut style = Self::default();
        let ends = |t: &str, words: &[&str]| words.iter().any(|w| t.ends_with(w));
        for tag in tags {
            let Some(c) = color_word(tag) else { continue };
            if tag.ends_with(" hair") {
                style.hair = c;
            } else if ends(tag, &[" shirt", " dress", " jacket", " sweater", " blouse", " vest", " kimono"]) {
                style.top = c;
            } else if ends(tag, &[" skirt", " shorts", " pants", " legwear", " thighhighs"]) {
                style.bottom = c;
            }
        }
        style
    }

    /// A distinct style per index, for synthetic sets.
    pub fn indexed(i: usize) -> Self {
        Self {
            hair: PALETTE[(i * 5 + 2) % PALETTE.len()].1,
            top: PALETTE[(i * 3 + 6) % PALETTE.len()].1,
            bottom: PALETTE[(i * 7 + 9) % PALETTE.len()].1,
            ..Self::default()
        }
    }
}

type Template = [(f64, f64); JOINT_COUNT];

const HEAD: [(f64, f64); 5] = [(0.5, 0.1), (0.47, 0.08), (0.53, 0.08), (0.44, 0.1), (0.56, 0.1)];

fn template(arms: [(f64, f64); 6], legs: [(f64, f64); 6]) -> Template {
    let [ns, re, le, rr, lr] = HEAD;
    [
        ns, (0.5, 0.2), arms[0], arms[1], arms[2], arms[3], arms[4], arms[5],
        legs[0], legs[1], legs[2], legs[3], legs[4], legs[5], re, le, rr, lr,
    ]
}

/// Standing, arms up, arms out, sitting, stepping.
pub fn pose_templates() -> Vec<Template> {
    let arms_down = [(0.4, 0.22), (0.36, 0.36), (0.34, 0.5), (0.6, 0.22), (0.64, 0.36), (0.66, 0.5)];
    let arms_up = [(0.4, 0.22), (0.34, 0.12), (0.32, 0.02), (0.6, 0.22), (0.66, 0.12), (0.68, 0.02)];
    let arms_out = [(0.4, 0.22), (0.27, 0.24), (0.14, 0.25), (0.6, 0.22), (0.73, 0.24), (0.86, 0.25)];
    let legs_straight = [(0.44, 0.52), (0.43, 0.7), (0.42, 0.9), (0.56, 0.52), (0.57, 0.7), (0.58, 0.9)];
    let legs_sitting = [(0.44, 0.52), (0.3, 0.56), (0.3, 0.76), (0.56, 0.52), (0.7, 0.56), (0.7, 0.76)];
    let legs_step = [(0.44, 0.52), (0.36, 0.69), (0.3, 0.86), (0.56, 0.52), (0.62, 0.7), (0.7, 0.88)];
    vec![
        template(arms_down, legs_straight),
        template(arms_up, legs_straight),
        template(arms_out, legs_straight),
        template(arms_down, legs_sitting),
        template(arms_out, legs_step),
    ]
}

/// Template chosen by hashing the posture tags; none means standing.
pub fn pose_for_tags(posture_tags: &[String]) -> usize {
    if posture_tags.is_empty() {
        return 0;
    }
    let mut h = Sha256::new();
    for t in posture_tags {
        h.update(t.as_bytes());
        h.update([0]);
    }
    let d = h.finalize();
    d[0] as usize % pose_templates().len()
}

/// Maps template coordinates into the image for a framing; joints that leave
/// the frame are undetected.
pub fn frame_pose(template: &Template, framing: Framing) -> PoseSkeleton {
    let (scale, top, dx) = match framing {
        Framing::Full => (0.9, 0.05, 0.0),
        Framing::Orig => (0.8, 0.12, 0.06),
        Framing::Upper => (0.9 / 0.55, 0.05, 0.0),
        Framing::Portrait => (0.9 / 0.22, 0.05, 0.0),
    };
    let mut skel = PoseSkeleton::undetected();
    for (j, &(x, y)) in template.iter().enumerate() {
        let (ix, iy) = (0.5 + dx + scale * (x - 0.5), top + scale * y);
        if (0.0..1.0).contains(&ix) && (0.0..1.0).contains(&iy) {
            skel.joints[j] = Joint::at(ix, iy);
        }
    }
    skel
}

fn paint_disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, rgb: [f64; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if (px - cx * w).powi(2) + (py - cy * h).powi(2) <= r * r {
                img.set(x, y, rgb);
            }
        }
    }
}

fn paint_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), half_width: f64, rgb: [f64; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (ax, ay, bx, by) = (a.0 * w, a.1 * h, b.0 * w, b.1 * h);
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = (vx * vx + vy * vy).max(1e-12);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (ax + t * vx, ay + t * vy);
            if (px - qx).powi(2) + (py - qy).powi(2) <= half_width * half_width {
                img.set(x, y, rgb);
            }
        }
    }
}

/// Paints one-pixel joint markers for every detected joint.
pub fn paint_markers(img: &mut RgbImage, skel: &PoseSkeleton) {
    for (j, joint) in skel.joints.iter().enumerate() {
        if joint.detected {
            let x = ((joint.x * img.width() as f64).floor() as usize).min(img.width() - 1);
            let y = ((joint.y * img.height() as f64).floor() as usize).min(img.height() - 1);
            img.set(x, y, marker_color(j));
        }
    }
}

/// A figure in image coordinates; limbs whose endpoints both left the frame
/// are skipped.
pub fn render_figure(skel: &PoseSkeleton, style: &FigureStyle, size: usize, head_radius: f64) -> RgbImage {
    let mut img = RgbImage::white(size, size);
    let width = (size as f64 / 20.0).max(0.6);
    let (neck, rh, lh) = (skel.joints[1], skel.joints[8], skel.joints[11]);
    if neck.detected && rh.detected && lh.detected {
        let hips = ((rh.x + lh.x) / 2.0, (rh.y + lh.y) / 2.0);
        let half = ((rh.x - lh.x).abs() * size as f64 / 2.0).max(width);
        paint_segment(&mut img, (neck.x, neck.y), hips, half, style.top);
    }
    for &(a, b) in &LIMBS {
        let (ja, jb) = (skel.joints[a], skel.joints[b]);
        if !ja.detected && !jb.detected {
            continue;
        }
        let color = match b {
            9 | 10 | 12 | 13 => style.bottom,
            0 | 14..=17 => style.skin,
            _ => style.top,
        };
        paint_segment(&mut img, (ja.x, ja.y), (jb.x, jb.y), width, color);
    }
    let nose = skel.joints[0];
    if nose.detected {
        paint_disc(&mut img, nose.x, nose.y, head_radius * size as f64, style.hair);
        paint_disc(&mut img, nose.x, nose.y + 0.3 * head_radius, 0.6 * head_radius * size as f64, style.skin);
    }
    paint_markers(&mut img, skel);
    img
}

/// A bare stick figure at known joint positions.
pub fn render_stick_figure(skel: &PoseSkeleton, size: usize) -> RgbImage {
    render_figure(skel, &FigureStyle::default(), size, 0.0)
}

/// Reference image plus its ground-truth pose for a tag set and framing.
pub fn render_reference(posture_tags: &[String], attribute_tags: &[String], framing: Framing, size: usize) -> (RgbImage, PoseSkeleton) {
    let template = pose_templates()[pose_for_tags(posture_tags)];
    let skel = frame_pose(&template, framing);
    let scale = match framing {
        Framing::Full => 0.9,
        Framing::Orig => 0.8,
        Framing::Upper => 0.9 / 0.55,
        Framing::Portrait => 0.9 / 0.22,
    };
    let img = render_figure(&skel, &FigureStyle::from_tags(attribute_tags), size, 0.07 * scale);
    let mut visible = skel.clone();
    let markers = crate::backends::StickFigureDetector::default().detect(&img);
    for (j, joint) in visible.joints.iter_mut().enumerate() {
        joint.detected &= markers.joints[j].detected;
    }
    (img, visible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::StickFigureDetector;

    #[test]
    fn tags_drive_colours() {
        let tags: Vec<String> = ["blonde hair", "white shirt", "purple skirt"].iter().map(|s| s.to_string()).collect();
        let s = FigureStyle::from_tags(&tags);
        assert_eq!(s.hair, PALETTE[2].1);
        assert_eq!(s.top, PALETTE[1].1);
        assert_eq!(s.bottom, PALETTE[9].1);
    }

    #[test]
    fn framings_crop_the_lower_body() {
        let t = pose_templates()[0];
        assert_eq!(frame_pose(&t, Framing::Full).detected_count(), 18);
        let upper = frame_pose(&t, Framing::Upper);
        assert!(!upper.joints[10].detected && upper.joints[1].detected);
        assert!(frame_pose(&t, Framing::Portrait).detected_count() < upper.detected_count());
    }

    #[test]
    fn rendered_reference_reads_back() {
        let (img, skel) = render_reference(&[], &[], Framing::Full, 64);
        let found = StickFigureDetector::default().detect(&img);
        assert_eq!(found.detected_count(), skel.detected_count());
        assert_eq!(skel.detected_count(), 18);
        for (a, b) in found.joints.iter().zip(&skel.joints) {
            assert!((a.x - b.x).abs() * 64.0 <= 1.0 && (a.y - b.y).abs() * 64.0 <= 1.0);
        }
    }
}
