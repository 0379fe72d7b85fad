use std::collections::HashSet;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{classify_tag, Cluster, PromptError, SemanticClusters, TagKind, Taxonomy};

fn lines(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_owned).collect()
}

/// Fixed vocabulary shared by every prompt: quality suffix, neutral viewpoint
/// tokens, framing tokens and the scene-description pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConstants {
    pub quality: Vec<String>,
    pub neutral_view: Vec<String>,
    pub scenes: Vec<String>,
    /// C4 regions whose motion tags count as facial expressions.
    pub expression_regions: Vec<String>,
    pub full_body: String,
    pub upper_body: String,
    pub portrait: String,
}

impl Default for PromptConstants {
    fn default() -> Self {
        Self {
            quality: lines(include_str!("../data/quality.txt")),
            neutral_view: lines(include_str!("../data/neutral_view.txt")),
            scenes: lines(include_str!("../data/scenes.txt")),
            expression_regions: ["eyes", "mouth", "eyebrows", "face"].map(String::from).to_vec(),
            full_body: "full-body".into(),
            upper_body: "upper-body".into(),
            portrait: "portrait".into(),
        }
    }
}

impl PromptConstants {
    /// Replaces the scene pool with the non-comment lines of `text`.
    pub fn with_scenes(mut self, text: &str) -> Self {
        self.scenes = lines(text);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Orig,
    Full,
    Upper,
    Portrait,
}

impl ReferenceKind {
    pub const ALL: [ReferenceKind; 4] = [Self::Orig, Self::Full, Self::Upper, Self::Portrait];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Orig => "orig",
            Self::Full => "full",
            Self::Upper => "upper",
            Self::Portrait => "portrait",
        }
    }
}

impl fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditTask {
    BodyMotion,
    PostureView,
    Expression,
    Scene,
    PoseCond,
}

impl EditTask {
    pub const ALL: [EditTask; 5] = [Self::BodyMotion, Self::PostureView, Self::Expression, Self::Scene, Self::PoseCond];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BodyMotion => "body_motion",
            Self::PostureView => "posture_view",
            Self::Expression => "expression",
            Self::Scene => "scene",
            Self::PoseCond => "pose_cond",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for EditTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Explicit picks that bypass seeded sampling in [`build_edit_prompt`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EditOverrides {
    pub new_pose: Option<String>,
    pub new_expression: Option<String>,
    pub scene: Option<String>,
    /// `Full` or `Upper`, for the posture/viewpoint task.
    pub framing: Option<ReferenceKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPrompt {
    pub task: EditTask,
    /// Which reference image the edit is evaluated against.
    pub reference: ReferenceKind,
    pub tags: Vec<String>,
    /// Generation additionally takes the reference skeleton as a condition.
    pub requires_pose: bool,
}

/// Every prompt built for one metadata entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub ref_orig: Vec<String>,
    pub ref_full: Vec<String>,
    pub ref_upper: Vec<String>,
    pub ref_portrait: Vec<String>,
    pub training: Vec<String>,
    pub edits: Vec<EditPrompt>,
}

impl PromptBundle {
    pub fn build(
        clusters: &SemanticClusters,
        seed: u64,
        tasks: &[EditTask],
        taxonomy: &Taxonomy,
        constants: &PromptConstants,
    ) -> Result<Self, PromptError> {
        let reference = |kind| build_reference_prompt(clusters, kind, constants);
        let edits = tasks
            .iter()
            .map(|&task| {
                build_edit_prompt(clusters, task, task_seed(seed, task), taxonomy, constants, &EditOverrides::default())
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            ref_orig: reference(ReferenceKind::Orig)?,
            ref_full: reference(ReferenceKind::Full)?,
            ref_upper: reference(ReferenceKind::Upper)?,
            ref_portrait: reference(ReferenceKind::Portrait)?,
            training: build_training_prompt(clusters),
            edits,
        })
    }

    pub fn reference(&self, kind: ReferenceKind) -> &[String] {
        match kind {
            ReferenceKind::Orig => &self.ref_orig,
            ReferenceKind::Full => &self.ref_full,
            ReferenceKind::Upper => &self.ref_upper,
            ReferenceKind::Portrait => &self.ref_portrait,
        }
    }
}

/// Per-task seed so that adding or removing one task leaves the others unchanged.
fn task_seed(seed: u64, task: EditTask) -> u64 {
    seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(task as u64 + 1))
}

/// Joins a tag sequence the way it is fed to a text encoder.
pub fn render_prompt(tags: &[String]) -> String {
    tags.join(", ")
}

fn require_c0(clusters: &SemanticClusters) -> Result<(), PromptError> {
    if clusters.c0.is_empty() {
        return Err(PromptError::MissingCluster("C0"));
    }
    Ok(())
}

/// Reference-image prompt of the given kind. Quality tokens always close the
/// sequence; the original kind alone carries the rating, posture and body-part
/// clusters.
pub fn build_reference_prompt(
    clusters: &SemanticClusters,
    kind: ReferenceKind,
    constants: &PromptConstants,
) -> Result<Vec<String>, PromptError> {
    require_c0(clusters)?;
    let mut out: Vec<String> = clusters.c0.iter().chain(&clusters.char_name).cloned().collect();
    match kind {
        ReferenceKind::Orig => {
            out.push(clusters.rating.as_str().to_owned());
            for c in [&clusters.c1, &clusters.c2, &clusters.c3, &clusters.c4] {
                out.extend(c.iter().cloned());
            }
        }
        ReferenceKind::Full | ReferenceKind::Upper => {
            let framing = if kind == ReferenceKind::Full { &constants.full_body } else { &constants.upper_body };
            out.push(framing.clone());
            out.extend(constants.neutral_view.iter().cloned());
            out.extend(clusters.c2.iter().cloned());
        }
        ReferenceKind::Portrait => {
            out.push(constants.portrait.clone());
            out.extend(clusters.c2.iter().cloned());
        }
    }
    out.extend(constants.quality.iter().cloned());
    Ok(out)
}

/// C1 through C5, without character names or the rating.
pub fn build_training_prompt(clusters: &SemanticClusters) -> Vec<String> {
    let rating = clusters.rating.as_str();
    [&clusters.c1, &clusters.c2, &clusters.c3, &clusters.c4, &clusters.c5]
        .into_iter()
        .flatten()
        .filter(|t| t.as_str() != rating && !clusters.char_name.contains(t))
        .cloned()
        .collect()
}

/// Replaces each motion-kind C4 tag with another motion tag of the same
/// sub-group, drawn uniformly with a generator seeded by `seed`. Attribute tags
/// and tags without an eligible alternative pass through unchanged.
pub fn substitute_motion_tags(c4: &[String], seed: u64, taxonomy: &Taxonomy) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let present: HashSet<&str> = c4.iter().map(String::as_str).collect();
    let mut taken: HashSet<String> = HashSet::new();
    c4.iter()
        .map(|tag| {
            let class = classify_tag(tag, taxonomy);
            let Some(group) = class.sub_group.filter(|g| g.kind == TagKind::Motion) else {
                return tag.clone();
            };
            let candidates: Vec<&str> = taxonomy
                .motion_tags(&group.region)
                .filter(|c| *c != tag && !present.contains(c) && !taken.contains(*c))
                .collect();
            match candidates.choose(&mut rng) {
                Some(pick) => {
                    taken.insert((*pick).to_owned());
                    (*pick).to_owned()
                }
                None => {
                    log::warn!("no alternative motion tag for `{tag}` in region `{}`", group.region);
                    tag.clone()
                }
            }
        })
        .collect()
}

fn pick<'a>(pool: &[&'a str], rng: &mut ChaCha8Rng, what: &'static str) -> Result<&'a str, PromptError> {
    pool.choose(rng).copied().ok_or(PromptError::EmptyPool(what))
}

/// Editing prompt for one evaluation task.
///
/// `new_pose` candidates are C3 tags the entry does not already carry;
/// `new_expression` candidates are facial motion tags absent from its C4.
pub fn build_edit_prompt(
    clusters: &SemanticClusters,
    task: EditTask,
    seed: u64,
    taxonomy: &Taxonomy,
    constants: &PromptConstants,
    overrides: &EditOverrides,
) -> Result<EditPrompt, PromptError> {
    require_c0(clusters)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = clusters.c0.clone();
    let quality = constants.quality.iter().cloned();

    let new_pose = |rng: &mut ChaCha8Rng| -> Result<String, PromptError> {
        if let Some(p) = &overrides.new_pose {
            return Ok(p.clone());
        }
        let pool: Vec<&str> = taxonomy.tags_in(Cluster::C3).filter(|t| !clusters.c3.iter().any(|c| c == t)).collect();
        pick(&pool, rng, "new_pose").map(str::to_owned)
    };

    let (reference, requires_pose) = match task {
        EditTask::BodyMotion => {
            tags.extend(substitute_motion_tags(&clusters.c4, seed, taxonomy));
            tags.extend(quality);
            (ReferenceKind::Orig, false)
        }
        EditTask::PostureView | EditTask::PoseCond => {
            let framing = match (task, overrides.framing) {
                (EditTask::PoseCond, _) => ReferenceKind::Full,
                (_, Some(f @ (ReferenceKind::Full | ReferenceKind::Upper))) => f,
                _ => *[ReferenceKind::Full, ReferenceKind::Upper].choose(&mut rng).expect("non-empty"),
            };
            tags.push(if framing == ReferenceKind::Full { constants.full_body.clone() } else { constants.upper_body.clone() });
            tags.extend(clusters.c1.iter().cloned());
            tags.push(new_pose(&mut rng)?);
            tags.extend(quality);
            (framing, task == EditTask::PoseCond)
        }
        EditTask::Expression => {
            let expression = match &overrides.new_expression {
                Some(e) => e.clone(),
                None => {
                    let pool: Vec<&str> = taxonomy
                        .entries()
                        .iter()
                        .filter(|e| e.cluster == Cluster::C4 && e.kind == Some(TagKind::Motion))
                        .filter(|e| e.region.as_ref().is_some_and(|r| constants.expression_regions.contains(r)))
                        .map(|e| e.tag.as_str())
                        .filter(|t| !clusters.c4.iter().any(|c| c == t))
                        .collect();
                    pick(&pool, &mut rng, "new_expression")?.to_owned()
                }
            };
            tags.push(constants.portrait.clone());
            tags.push(expression);
            tags.extend(quality);
            (ReferenceKind::Portrait, false)
        }
        EditTask::Scene => {
            let scene = match &overrides.scene {
                Some(s) => s.clone(),
                None => {
                    let pool: Vec<&str> = constants.scenes.iter().map(String::as_str).collect();
                    pick(&pool, &mut rng, "scene_description")?.to_owned()
                }
            };
            tags.push(scene);
            (ReferenceKind::Full, false)
        }
    };
    Ok(EditPrompt { task, reference, tags, requires_pose })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{extract_clusters, Rating, TagRecord};

    fn clusters(general: &str) -> SemanticClusters {
        let rec = TagRecord::new("x", general, "hero (series)", "", Rating::General);
        extract_clusters(&rec, &Taxonomy::shipped()).unwrap()
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn full_body_reference_order() {
        let c = clusters("1girl, solo, abstract, blonde hair, from below");
        let p = build_reference_prompt(&c, ReferenceKind::Full, &PromptConstants::default()).unwrap();
        assert_eq!(
            p,
            s(&[
                "1girl", "solo", "hero (series)", "full-body", "straight-on", "looking at viewer", "abstract",
                "masterpiece", "great score", "high score", "absurdres"
            ])
        );
    }

    #[test]
    fn portrait_with_empty_style_cluster() {
        let c = clusters("1girl, blonde hair");
        let p = build_reference_prompt(&c, ReferenceKind::Portrait, &PromptConstants::default()).unwrap();
        assert_eq!(
            p,
            s(&["1girl", "hero (series)", "portrait", "masterpiece", "great score", "high score", "absurdres"])
        );
    }

    #[test]
    fn orig_reference_carries_rating() {
        let c = clusters("1girl, standing, blonde hair, striped");
        let p = build_reference_prompt(&c, ReferenceKind::Orig, &PromptConstants::default()).unwrap();
        assert_eq!(p[..4], s(&["1girl", "hero (series)", "general", "standing"]));
        assert!(!p.contains(&"striped".to_string()), "C5 is not part of the original reference");
    }

    #[test]
    fn missing_identity_cluster_is_named() {
        let mut c = clusters("1girl");
        c.c0.clear();
        assert_eq!(
            build_reference_prompt(&c, ReferenceKind::Full, &PromptConstants::default()),
            Err(PromptError::MissingCluster("C0"))
        );
    }

    #[test]
    fn training_prompt_with_only_identity_is_empty() {
        assert!(build_training_prompt(&clusters("1girl, solo")).is_empty());
    }

    #[test]
    fn substitution_without_motion_tags_is_identity() {
        let tax = Taxonomy::shipped();
        let c4 = s(&["blonde hair", "blue eyes", "skirt"]);
        assert_eq!(substitute_motion_tags(&c4, 7, &tax), c4);
    }

    #[test]
    fn substitution_is_seed_deterministic() {
        let tax = Taxonomy::shipped();
        let c4 = s(&["hair flip", "eye pop", "smile", "blonde hair"]);
        assert_eq!(substitute_motion_tags(&c4, 11, &tax), substitute_motion_tags(&c4, 11, &tax));
    }

    #[test]
    fn lone_motion_tag_passes_through() {
        let tax = Taxonomy::parse("1girl\tC0\t-\tsingle\nwiggle\tC4\ttail\tmotion\n").unwrap();
        assert_eq!(substitute_motion_tags(&s(&["wiggle"]), 1, &tax), s(&["wiggle"]));
    }

    #[test]
    fn scene_edit_uses_identity_and_scene_only() {
        let c = clusters("1girl, solo, blonde hair");
        let o = EditOverrides { scene: Some("in the kitchen".into()), ..Default::default() };
        let e = build_edit_prompt(&c, EditTask::Scene, 3, &Taxonomy::shipped(), &PromptConstants::default(), &o).unwrap();
        assert_eq!(e.tags, s(&["1girl", "solo", "in the kitchen"]));
        assert_eq!(e.reference, ReferenceKind::Full);
    }

    #[test]
    fn expression_edit() {
        let c = clusters("1girl, blonde hair");
        let o = EditOverrides { new_expression: Some("furrowed brow".into()), ..Default::default() };
        let e = build_edit_prompt(&c, EditTask::Expression, 3, &Taxonomy::shipped(), &PromptConstants::default(), &o)
            .unwrap();
        assert_eq!(
            e.tags,
            s(&["1girl", "portrait", "furrowed brow", "masterpiece", "great score", "high score", "absurdres"])
        );
    }

    #[test]
    fn posture_edit_contains_new_pose() {
        let c = clusters("1girl, from behind");
        let o = EditOverrides { new_pose: Some("wing hug".into()), ..Default::default() };
        let e = build_edit_prompt(&c, EditTask::PostureView, 3, &Taxonomy::shipped(), &PromptConstants::default(), &o)
            .unwrap();
        assert!(e.tags.contains(&"wing hug".to_string()));
        assert!(e.tags.contains(&"from behind".to_string()));
        assert!(!e.requires_pose);
    }

    #[test]
    fn pose_conditioned_edit_requires_skeleton() {
        let c = clusters("1girl, standing");
        let e = build_edit_prompt(&c, EditTask::PoseCond, 5, &Taxonomy::shipped(), &PromptConstants::default(), &EditOverrides::default())
            .unwrap();
        assert!(e.requires_pose);
        assert_eq!(e.tags[1], "full-body");
        assert!(!e.tags.contains(&"standing".to_string()), "new pose differs from the entry's posture");
    }

    #[test]
    fn empty_pools_error() {
        let tax = Taxonomy::parse("1girl\tC0\t-\tsingle\n").unwrap();
        let c = clusters("1girl");
        let consts = PromptConstants::default().with_scenes("");
        let none = EditOverrides::default();
        assert_eq!(
            build_edit_prompt(&c, EditTask::PoseCond, 1, &tax, &consts, &none),
            Err(PromptError::EmptyPool("new_pose"))
        );
        assert_eq!(
            build_edit_prompt(&c, EditTask::Expression, 1, &tax, &consts, &none),
            Err(PromptError::EmptyPool("new_expression"))
        );
        assert_eq!(
            build_edit_prompt(&c, EditTask::Scene, 1, &tax, &consts, &none),
            Err(PromptError::EmptyPool("scene_description"))
        );
    }
}
