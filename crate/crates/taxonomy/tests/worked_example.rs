use std::collections::BTreeSet;
use std::path::Path;

use anime_taxonomy::*;
use serde_json::Value;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_owned()).collect()
}

fn set(v: &[String]) -> BTreeSet<&str> {
    v.iter().map(String::as_str).collect()
}

fn load() -> (SemanticClusters, Value) {
    let rec = parse_metadata_line(fixture("yuugumo.jsonl").trim(), "x").unwrap();
    let outcome = filter_entry(&rec, &Taxonomy::shipped(), &DenyPairs::shipped());
    let FilterOutcome::Accept(clusters) = outcome else { panic!("worked example rejected: {outcome:?}") };
    (clusters, serde_json::from_str(&fixture("yuugumo_clusters.json")).unwrap())
}

#[test]
fn every_listed_tag_lands_in_its_cluster() {
    let (c, exp) = load();
    assert_eq!(c.char_name, strings(&exp["char_name"]));
    for (name, got) in [("c0", &c.c0), ("c1", &c.c1), ("c2", &c.c2), ("c3", &c.c3), ("c4", &c.c4)] {
        assert_eq!(set(got), set(&strings(&exp[name])), "{name}");
    }
    assert!(c.c5.is_empty());
    assert!(c.c2.contains(&"Channel (Caststation)".to_string()));
}

#[test]
fn classify_documented_tags() {
    let tax = Taxonomy::shipped();
    assert_eq!(classify_tag("from behind", &tax).cluster, Cluster::C1);
    assert_eq!(classify_tag("1girl", &tax).cluster, Cluster::C0);
    let c = classify_tag("hair flip", &tax);
    assert_eq!((c.cluster, c.sub_group.unwrap().region.as_str()), (Cluster::C4, "hair"));
}

#[test]
fn reference_prompts_match_fixtures_byte_for_byte() {
    let (c, _) = load();
    let consts = PromptConstants::default();
    let full = render_prompt(&build_reference_prompt(&c, ReferenceKind::Full, &consts).unwrap());
    let portrait = render_prompt(&build_reference_prompt(&c, ReferenceKind::Portrait, &consts).unwrap());
    assert_eq!(full, fixture("yuugumo_ref_full.txt").trim_end());
    assert_eq!(portrait, fixture("yuugumo_ref_portrait.txt").trim_end());
}

#[test]
fn original_reference_ends_with_quality_block() {
    let (c, exp) = load();
    let orig = build_reference_prompt(&c, ReferenceKind::Orig, &PromptConstants::default()).unwrap();
    let quality = strings(&exp["quality"]);
    assert_eq!(orig[orig.len() - quality.len()..], quality[..]);
    assert_eq!(render_prompt(&quality), "masterpiece, great score, high score, absurdres");
}

#[test]
fn substitution_replaces_exactly_the_motion_tags() {
    let (c, exp) = load();
    let seed = exp["substitution_seed"].as_u64().unwrap();
    let tax = Taxonomy::shipped();
    let sub = substitute_motion_tags(&c.c4, seed, &tax);
    assert_eq!(render_prompt(&sub), fixture("yuugumo_substituted_c4.txt").trim_end());
    assert_eq!(set(&sub), set(&strings(&exp["substituted_c4"])));

    let replaced: BTreeSet<&str> =
        c.c4.iter().zip(&sub).filter(|(a, b)| a != b).map(|(a, _)| a.as_str()).collect();
    assert_eq!(replaced, set(&strings(&exp["replaced"])));
    for (a, b) in c.c4.iter().zip(&sub).filter(|(a, b)| a != b) {
        assert_eq!(classify_tag(a, &tax).sub_group, classify_tag(b, &tax).sub_group);
    }
}

#[test]
fn training_prompt_drops_character_names() {
    let (c, _) = load();
    let p = build_training_prompt(&c);
    assert!(p.iter().all(|t| !t.contains("(kancolle)")));
    assert!(!p.contains(&"general".to_string()));
}

#[test]
fn documented_edit_components() {
    let (c, exp) = load();
    let tax = Taxonomy::shipped();
    let consts = PromptConstants::default();
    let o = EditOverrides {
        new_pose: Some(exp["new_pose"].as_str().unwrap().into()),
        new_expression: Some(exp["new_expression"].as_str().unwrap().into()),
        scene: Some(exp["scene_description"].as_str().unwrap().into()),
        framing: None,
    };
    let scene = build_edit_prompt(&c, EditTask::Scene, 0, &tax, &consts, &o).unwrap();
    assert_eq!(render_prompt(&scene.tags), "1girl, solo, in the kitchen");
    let expr = build_edit_prompt(&c, EditTask::Expression, 0, &tax, &consts, &o).unwrap();
    assert_eq!(
        render_prompt(&expr.tags),
        "1girl, solo, portrait, furrowed brow, masterpiece, great score, high score, absurdres"
    );
    let pose = build_edit_prompt(&c, EditTask::PostureView, 0, &tax, &consts, &o).unwrap();
    assert!(pose.tags.contains(&"wing hug".to_string()));
    let motion = build_edit_prompt(&c, EditTask::BodyMotion, 12, &tax, &consts, &o).unwrap();
    assert_eq!(motion.tags[..2], ["1girl".to_string(), "solo".to_string()]);
    assert!(motion.tags.contains(&"eating hair".to_string()));
}

#[test]
fn manifest_round_trip() {
    let (c, _) = load();
    let tax = Taxonomy::shipped();
    let bundle = PromptBundle::build(&c, 3, &EditTask::ALL, &tax, &PromptConstants::default()).unwrap();
    let entry = ManifestEntry {
        id: "yuugumo".into(),
        image_path: "images/yuugumo_orig.png".into(),
        mask_path: "masks/yuugumo_orig.png".into(),
        pose_path: "poses/yuugumo_orig.txt".into(),
        clusters: c,
        prompts: ReferencePrompts::from(&bundle),
        edits: bundle.edits.clone(),
        references: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    emit_manifest(std::slice::from_ref(&entry), &path).unwrap();
    assert_eq!(parse_manifest(&path).unwrap(), vec![entry]);
}
