use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::TaxonomyError;

const SHIPPED_TABLE: &str = include_str!("../data/taxonomy.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cluster {
    C0,
    C1,
    C2,
    C3,
    C4,
    C5,
    Unknown,
}

impl Cluster {
    pub const CLASSIFIED: [Cluster; 6] = [Self::C0, Self::C1, Self::C2, Self::C3, Self::C4, Self::C5];

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "C0" => Self::C0,
            "C1" => Self::C1,
            "C2" => Self::C2,
            "C3" => Self::C3,
            "C4" => Self::C4,
            "C5" => Self::C5,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::C0 => "C0",
            Self::C1 => "C1",
            Self::C2 => "C2",
            Self::C3 => "C3",
            Self::C4 => "C4",
            Self::C5 => "C5",
            Self::Unknown => "UNKNOWN",
        }
    }
}

impl fmt::Display for Cluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagKind {
    /// C0 count token naming exactly one character (`solo`, `1girl`).
    Single,
    /// C0 count token naming several characters.
    Multiple,
    /// C4 static visual property.
    Attribute,
    /// C4 localized action or dynamic state.
    Motion,
}

impl TagKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "single" => Self::Single,
            "multiple" => Self::Multiple,
            "attribute" => Self::Attribute,
            "motion" => Self::Motion,
            _ => return None,
        })
    }
}

/// Anatomical region plus attribute/motion kind of a C4 tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubGroup {
    pub region: String,
    pub kind: TagKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyEntry {
    pub tag: String,
    pub cluster: Cluster,
    pub region: Option<String>,
    pub kind: Option<TagKind>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub cluster: Cluster,
    pub sub_group: Option<SubGroup>,
    pub kind: Option<TagKind>,
}

impl Classification {
    const UNKNOWN: Classification = Classification { cluster: Cluster::Unknown, sub_group: None, kind: None };
}

/// Tag → cluster lookup table, loaded from tab-separated text
/// (`tag  cluster  region  kind`, `-` for empty columns, `#` comments).
///
/// Entries keep file order so that every pool drawn from the table iterates
/// deterministically.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    entries: Vec<TaxonomyEntry>,
    index: HashMap<String, usize>,
    version: Option<String>,
}

impl Taxonomy {
    /// The demonstrative table shipped with the crate.
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_TABLE).expect("shipped taxonomy table is valid")
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TaxonomyError::Io { path: path.to_owned(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        let mut version = None;
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let trimmed = line.trim();
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("taxonomy-version:") {
                    version = Some(v.trim().to_owned());
                }
                continue;
            }
            if trimmed.is_empty() {
                continue;
            }
            let err = |message: String| TaxonomyError::Table { line: line_no, message };
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(err(format!("expected 4 tab-separated columns, found {}", cols.len())));
            }
            let tag = crate::normalize_tag(cols[0]);
            if tag.is_empty() {
                return Err(err("empty tag".into()));
            }
            let cluster = Cluster::parse(cols[1]).ok_or_else(|| err(format!("unknown cluster `{}`", cols[1])))?;
            let region = (cols[2] != "-").then(|| cols[2].to_owned());
            let kind = match cols[3] {
                "-" => None,
                k => Some(TagKind::parse(k).ok_or_else(|| err(format!("unknown kind `{k}`")))?),
            };
            match cluster {
                Cluster::C4 => {
                    if region.is_none() || !matches!(kind, Some(TagKind::Attribute | TagKind::Motion)) {
                        return Err(err(format!("C4 tag `{tag}` needs a region and attribute|motion kind")));
                    }
                }
                Cluster::C0 => {
                    if matches!(kind, Some(TagKind::Attribute | TagKind::Motion)) {
                        return Err(err(format!("C0 tag `{tag}` kind must be single|multiple")));
                    }
                }
                _ => {
                    if kind.is_some() {
                        return Err(err(format!("{cluster} tag `{tag}` must not carry a kind")));
                    }
                }
            }
            if index.insert(tag.clone(), entries.len()).is_some() {
                return Err(TaxonomyError::DuplicateTag(tag));
            }
            entries.push(TaxonomyEntry { tag, cluster, region, kind });
        }
        Ok(Self { entries, index, version })
    }

    pub fn version(&self) -> Option<&str> {
        self.version.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, tag: &str) -> Option<&TaxonomyEntry> {
        self.index.get(tag).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[TaxonomyEntry] {
        &self.entries
    }

    /// All tags of `cluster`, in table order.
    pub fn tags_in(&self, cluster: Cluster) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(move |e| e.cluster == cluster).map(|e| e.tag.as_str())
    }

    /// C4 motion tags sharing `region`, in table order.
    pub fn motion_tags<'a>(&'a self, region: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |e| {
                e.cluster == Cluster::C4 && e.kind == Some(TagKind::Motion) && e.region.as_deref() == Some(region)
            })
            .map(|e| e.tag.as_str())
    }
}

/// Looks up the cluster of `tag`. Tags absent from the table are
/// [`Cluster::Unknown`].
pub fn classify_tag(tag: &str, taxonomy: &Taxonomy) -> Classification {
    let Some(entry) = taxonomy.get(&crate::normalize_tag(tag)) else {
        return Classification::UNKNOWN;
    };
    let sub_group = match (entry.cluster, &entry.region, entry.kind) {
        (Cluster::C4, Some(region), Some(kind)) => Some(SubGroup { region: region.clone(), kind }),
        _ => None,
    };
    Classification { cluster: entry.cluster, sub_group, kind: entry.kind }
}
