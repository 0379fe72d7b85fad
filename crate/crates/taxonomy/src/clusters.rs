use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::{classify_tag, Cluster, Rating, SubGroup, TagRecord, Taxonomy, TaxonomyError};

/// A metadata entry's tags partitioned into clusters C0–C5, plus the character
/// identity tags and the rating. Within each slice tags keep input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticClusters {
    pub c0: Vec<String>,
    pub c1: Vec<String>,
    pub c2: Vec<String>,
    pub c3: Vec<String>,
    pub c4: Vec<String>,
    pub c5: Vec<String>,
    pub char_name: Vec<String>,
    pub rating: Rating,
    /// Sub-group of every C4 member.
    pub sub_group: BTreeMap<String, SubGroup>,
}

impl SemanticClusters {
    pub fn empty(rating: Rating) -> Self {
        Self {
            c0: Vec::new(),
            c1: Vec::new(),
            c2: Vec::new(),
            c3: Vec::new(),
            c4: Vec::new(),
            c5: Vec::new(),
            char_name: Vec::new(),
            rating,
            sub_group: BTreeMap::new(),
        }
    }

    pub fn cluster(&self, cluster: Cluster) -> &[String] {
        match cluster {
            Cluster::C0 => &self.c0,
            Cluster::C1 => &self.c1,
            Cluster::C2 => &self.c2,
            Cluster::C3 => &self.c3,
            Cluster::C4 => &self.c4,
            Cluster::C5 => &self.c5,
            Cluster::Unknown => &[],
        }
    }

    pub fn cluster_mut(&mut self, cluster: Cluster) -> Option<&mut Vec<String>> {
        Some(match cluster {
            Cluster::C0 => &mut self.c0,
            Cluster::C1 => &mut self.c1,
            Cluster::C2 => &mut self.c2,
            Cluster::C3 => &mut self.c3,
            Cluster::C4 => &mut self.c4,
            Cluster::C5 => &mut self.c5,
            Cluster::Unknown => return None,
        })
    }

    /// Which cluster holds `tag`, if any.
    pub fn cluster_of(&self, tag: &str) -> Option<Cluster> {
        Cluster::CLASSIFIED.into_iter().find(|&c| self.cluster(c).iter().any(|t| t == tag))
    }
}

/// Partitions `record` into semantic clusters.
///
/// Character tags become `char_name`; artist tags join C2 after the general
/// C2 tags; general tags go to their table cluster, and unknown tags are
/// dropped. An entry without any C0 tag is rejected.
pub fn extract_clusters(record: &TagRecord, taxonomy: &Taxonomy) -> Result<SemanticClusters, TaxonomyError> {
    let mut out = SemanticClusters::empty(record.rating);
    let mut placed: HashSet<String> = HashSet::new();

    for tag in &record.character_tags {
        if placed.insert(tag.clone()) {
            out.char_name.push(tag.clone());
        }
    }
    for tag in &record.general_tags {
        let class = classify_tag(tag, taxonomy);
        let Some(slot) = out.cluster_mut(class.cluster) else {
            log::debug!("dropping unknown tag `{tag}`");
            continue;
        };
        if !placed.insert(tag.clone()) {
            continue;
        }
        slot.push(tag.clone());
        if let Some(group) = class.sub_group {
            out.sub_group.insert(tag.clone(), group);
        }
    }
    for tag in &record.artist_tags {
        if placed.insert(tag.clone()) {
            out.c2.push(tag.clone());
        }
    }

    if out.c0.is_empty() {
        return Err(TaxonomyError::EmptyIdentityCluster);
    }
    Ok(out)
}
