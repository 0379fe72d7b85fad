use std::collections::HashSet;

use anime_taxonomy::*;
use proptest::prelude::*;

fn vocabulary() -> Vec<String> {
    let tax = Taxonomy::shipped();
    let mut v: Vec<String> = tax.entries().iter().map(|e| e.tag.clone()).collect();
    v.extend(["cosplay", "unlisted tag", "looking at viewer"].map(String::from));
    v
}

fn record_strategy() -> impl Strategy<Value = TagRecord> {
    let vocab = vocabulary();
    let n = vocab.len();
    (
        proptest::collection::vec(0..n, 0..40),
        proptest::collection::vec("[a-z]{3,8} \\([a-z]{3,6}\\)", 0..3),
        prop_oneof![Just(Rating::General), Just(Rating::Sensitive)],
    )
        .prop_map(move |(idx, chars, rating)| {
            let mut general: Vec<&str> = vec!["1girl"];
            general.extend(idx.iter().map(|&i| vocab[i].as_str()));
            TagRecord::new("p", &general.join(", "), &chars.join(", "), "Some Artist", rating)
        })
}

proptest! {
    #[test]
    fn clusters_partition_classified_tags(rec in record_strategy()) {
        let tax = Taxonomy::shipped();
        let c = extract_clusters(&rec, &tax).unwrap();
        let mut seen = HashSet::new();
        for cl in Cluster::CLASSIFIED {
            for t in c.cluster(cl) {
                prop_assert!(seen.insert(t.clone()), "{t} placed twice");
            }
        }
        for t in &c.char_name {
            prop_assert!(seen.insert(t.clone()));
        }
        for t in &rec.general_tags {
            let known = classify_tag(t, &tax).cluster != Cluster::Unknown;
            prop_assert_eq!(known, c.cluster_of(t).is_some(), "{}", t);
        }
        for t in c.c4.iter() {
            prop_assert!(c.sub_group.contains_key(t));
        }
    }

    #[test]
    fn slices_keep_input_order(rec in record_strategy()) {
        let tax = Taxonomy::shipped();
        let c = extract_clusters(&rec, &tax).unwrap();
        for cl in Cluster::CLASSIFIED {
            let positions: Vec<usize> = c.cluster(cl)
                .iter()
                .filter_map(|t| rec.general_tags.iter().position(|g| g == t))
                .collect();
            prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        }
        let train = build_training_prompt(&c);
        let expected: Vec<String> = [&c.c1, &c.c2, &c.c3, &c.c4, &c.c5].into_iter().flatten().cloned().collect();
        prop_assert_eq!(train, expected);
    }

    #[test]
    fn training_prompt_excludes_identity_and_rating(rec in record_strategy()) {
        let c = extract_clusters(&rec, &Taxonomy::shipped()).unwrap();
        let p = build_training_prompt(&c);
        prop_assert!(p.iter().all(|t| !c.char_name.contains(t)));
        prop_assert!(!p.iter().any(|t| t == c.rating.as_str()));
    }

    #[test]
    fn substitution_stays_in_sub_group(rec in record_strategy(), seed in any::<u64>()) {
        let tax = Taxonomy::shipped();
        let c = extract_clusters(&rec, &tax).unwrap();
        let out = substitute_motion_tags(&c.c4, seed, &tax);
        prop_assert_eq!(out.len(), c.c4.len());
        for (a, b) in c.c4.iter().zip(&out) {
            let ga = classify_tag(a, &tax).sub_group.unwrap();
            if ga.kind == TagKind::Attribute {
                prop_assert_eq!(a, b);
            } else {
                prop_assert_eq!(Some(ga), classify_tag(b, &tax).sub_group);
            }
        }
        prop_assert_eq!(out, substitute_motion_tags(&c.c4, seed, &tax));
    }

    #[test]
    fn bundles_are_pure_functions_of_seed(rec in record_strategy(), seed in any::<u64>()) {
        let tax = Taxonomy::shipped();
        let c = extract_clusters(&rec, &tax).unwrap();
        let consts = PromptConstants::default();
        let a = PromptBundle::build(&c, seed, &EditTask::ALL, &tax, &consts).unwrap();
        let b = PromptBundle::build(&c, seed, &EditTask::ALL, &tax, &consts).unwrap();
        prop_assert_eq!(a, b);
    }
}
