use std::fmt;
use std::path::Path;

use crate::{extract_clusters, Rating, SemanticClusters, TagKind, TagRecord, Taxonomy, TaxonomyError};

const SHIPPED_DENY_PAIRS: &str = include_str!("../data/deny_pairs.tsv");

/// Framing tokens paired with C2 tags that contradict them. An entry whose C2
/// holds the right-hand tag of any pair cannot get a consistent full-body or
/// upper-body reference and is dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenyPairs(Vec<(String, String)>);

impl DenyPairs {
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_DENY_PAIRS).expect("shipped deny pairs are valid")
    }

    pub fn none() -> Self {
        Self(Vec::new())
    }

    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self(pairs.into_iter().collect())
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TaxonomyError::Io { path: path.to_owned(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (framing, tag) = line.split_once('\t').ok_or_else(|| TaxonomyError::Table {
                line: i + 1,
                message: "deny pair needs two tab-separated columns".into(),
            })?;
            pairs.push((framing.trim().to_owned(), crate::normalize_tag(tag)));
        }
        Ok(Self(pairs))
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.0
    }

    /// First pair conflicting with `c2`, as `(framing, c2 tag)`.
    pub fn conflict(&self, c2: &[String]) -> Option<(&str, &str)> {
        self.0
            .iter()
            .find(|(_, tag)| c2.iter().any(|t| t.to_lowercase() == *tag))
            .map(|(f, t)| (f.as_str(), t.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    Rating(Rating),
    EmptyIdentityCluster,
    NoSingleCountTag,
    MultipleCharacters(String),
    FramingConflict { framing: String, tag: String },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rating(r) => write!(f, "rating {r} is not general"),
            Self::EmptyIdentityCluster => f.write_str("no identity/count tags"),
            Self::NoSingleCountTag => f.write_str("no single-character count tag"),
            Self::MultipleCharacters(t) => write!(f, "multi-character count tag `{t}`"),
            Self::FramingConflict { framing, tag } => write!(f, "framing `{framing}` conflicts with C2 tag `{tag}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterOutcome {
    Accept(SemanticClusters),
    Reject(RejectReason),
}

impl FilterOutcome {
    pub fn is_accept(&self) -> bool {
        matches!(self, Self::Accept(_))
    }
}

/// Keeps general-rated, single-character entries whose framing references can
/// be built without contradicting their style tags.
///
/// The character count comes from C0 count tokens rather than from the number
/// of character tags, since one identity is often tagged under several names.
pub fn filter_entry(record: &TagRecord, taxonomy: &Taxonomy, deny: &DenyPairs) -> FilterOutcome {
    if record.rating != Rating::General {
        return FilterOutcome::Reject(RejectReason::Rating(record.rating));
    }
    let clusters = match extract_clusters(record, taxonomy) {
        Ok(c) => c,
        Err(_) => return FilterOutcome::Reject(RejectReason::EmptyIdentityCluster),
    };
    let kind_of = |t: &str| taxonomy.get(t).and_then(|e| e.kind);
    if let Some(multi) = clusters.c0.iter().find(|t| kind_of(t) == Some(TagKind::Multiple)) {
        return FilterOutcome::Reject(RejectReason::MultipleCharacters(multi.clone()));
    }
    if !clusters.c0.iter().any(|t| kind_of(t) == Some(TagKind::Single)) {
        return FilterOutcome::Reject(RejectReason::NoSingleCountTag);
    }
    if let Some((framing, tag)) = deny.conflict(&clusters.c2) {
        return FilterOutcome::Reject(RejectReason::FramingConflict { framing: framing.into(), tag: tag.into() });
    }
    FilterOutcome::Accept(clusters)
}
