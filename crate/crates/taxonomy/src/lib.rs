//! Danbooru-style metadata parsing, the six-cluster tag taxonomy, entry
//! filtering and deterministic construction of reference, training and
//! editing prompts.

mod clusters;
mod error;
mod filter;
mod manifest;
mod prompt;
mod record;
mod table;

pub use clusters::{extract_clusters, SemanticClusters};
pub use error::{ManifestError, PromptError, TaxonomyError};
pub use filter::{filter_entry, DenyPairs, FilterOutcome, RejectReason};
pub use manifest::{emit_manifest, parse_manifest, ManifestEntry, ReferenceAssets, ReferencePrompts};
pub use prompt::{
    build_edit_prompt, build_reference_prompt, build_training_prompt, render_prompt,
    substitute_motion_tags, EditOverrides, EditPrompt, EditTask, PromptBundle, PromptConstants,
    ReferenceKind,
};
pub use record::{normalize_tag, parse_metadata_line, Rating, TagRecord};
pub use table::{classify_tag, Classification, Cluster, SubGroup, TagKind, Taxonomy, TaxonomyEntry};
