use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{EditPrompt, ManifestError, PromptBundle, ReferenceKind, SemanticClusters};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePrompts {
    pub ref_orig: Vec<String>,
    pub ref_full: Vec<String>,
    pub ref_upper: Vec<String>,
    pub ref_portrait: Vec<String>,
    pub training: Vec<String>,
}

impl From<&PromptBundle> for ReferencePrompts {
    fn from(b: &PromptBundle) -> Self {
        Self {
            ref_orig: b.ref_orig.clone(),
            ref_full: b.ref_full.clone(),
            ref_upper: b.ref_upper.clone(),
            ref_portrait: b.ref_portrait.clone(),
            training: b.training.clone(),
        }
    }
}

/// Image, mask and skeleton files of one task-specific reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceAssets {
    pub kind: ReferenceKind,
    pub image_path: String,
    pub mask_path: String,
    pub pose_path: String,
}

/// One dataset record. `image_path`, `mask_path` and `pose_path` point at the
/// original-appearance reference used for training; `references` lists every
/// task-specific reference rendered for evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub pose_path: String,
    pub clusters: SemanticClusters,
    pub prompts: ReferencePrompts,
    pub edits: Vec<EditPrompt>,
    #[serde(default)]
    pub references: Vec<ReferenceAssets>,
}

impl ManifestEntry {
    pub fn reference(&self, kind: ReferenceKind) -> Option<&ReferenceAssets> {
        self.references.iter().find(|r| r.kind == kind)
    }
}

/// Writes one JSON object per line. Ids must be unique; nothing is written
/// when they are not.
pub fn emit_manifest(entries: &[ManifestEntry], out_path: &Path) -> Result<(), ManifestError> {
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.id.as_str()) {
            return Err(ManifestError::DuplicateId(e.id.clone()));
        }
    }
    let write_err = |source| ManifestError::Write { path: out_path.to_owned(), source };
    let file = std::fs::File::create(out_path).map_err(write_err)?;
    let mut w = BufWriter::new(file);
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(w, "{line}").map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    let read_err = |source| ManifestError::Read { path: path.to_owned(), source };
    let file = std::fs::File::open(path).map_err(read_err)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(read_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| ManifestError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Rating, SemanticClusters};

    fn entry(id: &str) -> ManifestEntry {
        let mut clusters = SemanticClusters::empty(Rating::General);
        clusters.c0.push("1girl".into());
        ManifestEntry {
            id: id.into(),
            image_path: format!("images/{id}.png"),
            mask_path: format!("masks/{id}.png"),
            pose_path: format!("poses/{id}.txt"),
            clusters,
            prompts: ReferencePrompts {
                ref_orig: vec![],
                ref_full: vec![],
                ref_upper: vec![],
                ref_portrait: vec![],
                training: vec![],
            },
            edits: vec![],
            references: vec![],
        }
    }

    #[test]
    fn empty_manifest_is_an_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        emit_manifest(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "");
        assert!(parse_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let err = emit_manifest(&[entry("a"), entry("a")], &p).unwrap_err();
        assert!(matches!(err, ManifestError::DuplicateId(id) if id == "a"));
        assert!(!p.exists());
    }

    #[test]
    fn unwritable_path_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("m.jsonl");
        assert!(matches!(emit_manifest(&[entry("a")], &p), Err(ManifestError::Write { .. })));
    }

    #[test]
    fn field_order_is_stable() {
        let line = serde_json::to_string(&entry("a")).unwrap();
        let keys = ["\"id\"", "\"image_path\"", "\"mask_path\"", "\"pose_path\"", "\"clusters\"", "\"prompts\"", "\"edits\""];
        let pos: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{line}");
    }
}
