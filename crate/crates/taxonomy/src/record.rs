use std::fmt;

use serde::{Deserialize, Serialize};

use crate::TaxonomyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rating {
    General,
    Sensitive,
    Questionable,
    Explicit,
}

impl Rating {
    pub fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "g" | "general" => Some(Self::General),
            "s" | "sensitive" => Some(Self::Sensitive),
            "q" | "questionable" => Some(Self::Questionable),
            "e" | "explicit" => Some(Self::Explicit),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::General => "general",
            Self::Sensitive => "sensitive",
            Self::Questionable => "questionable",
            Self::Explicit => "explicit",
        }
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One metadata entry with its four tag categories.
///
/// General and character tags are lowercased; artist tags keep their case
/// since they are proper names. All lists are deduplicated in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRecord {
    pub id: String,
    pub general_tags: Vec<String>,
    pub character_tags: Vec<String>,
    pub artist_tags: Vec<String>,
    pub rating: Rating,
}

/// Canonical spelling of a tag: underscores become spaces, runs of
/// whitespace collapse, and the result is lowercased.
pub fn normalize_tag(raw: &str) -> String {
    normalize_spacing(raw).to_lowercase()
}

fn normalize_spacing(raw: &str) -> String {
    raw.replace('_', " ").split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits a Danbooru tag string, either comma-separated or in the native
/// space-separated, underscore-joined form.
fn split_tag_string(raw: &str, comma_separated: bool) -> Vec<String> {
    if comma_separated {
        raw.split(',').map(str::to_owned).collect()
    } else {
        raw.split_whitespace().map(str::to_owned).collect()
    }
}

fn dedup_by_key(tags: Vec<String>, key: impl Fn(&str) -> String) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    tags.into_iter()
        .filter(|t| !t.is_empty())
        .filter(|t| seen.insert(key(t)))
        .collect()
}

impl TagRecord {
    pub fn new(
        id: impl Into<String>,
        general: &str,
        character: &str,
        artist: &str,
        rating: Rating,
    ) -> Self {
        // One record uses one convention; a comma anywhere selects the comma form.
        let commas = [general, character, artist].iter().any(|s| s.contains(','));
        let lower = |s: &str| -> Vec<String> {
            dedup_by_key(
                split_tag_string(s, commas).iter().map(|t| normalize_tag(t)).collect(),
                str::to_owned,
            )
        };
        let artist_tags = dedup_by_key(
            split_tag_string(artist, commas).iter().map(|t| normalize_spacing(t)).collect(),
            str::to_lowercase,
        );
        Self {
            id: id.into(),
            general_tags: lower(general),
            character_tags: lower(character),
            artist_tags,
            rating,
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    #[serde(default)]
    tag_string_general: String,
    #[serde(default)]
    tag_string_character: String,
    #[serde(default)]
    tag_string_artist: String,
    rating: String,
}

/// Parses one line of line-delimited Danbooru metadata. `fallback_id` is used
/// when the record carries no `id` field.
pub fn parse_metadata_line(line: &str, fallback_id: &str) -> Result<TagRecord, TaxonomyError> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| TaxonomyError::Record(e.to_string()))?;
    let rating = Rating::parse(&raw.rating)
        .ok_or_else(|| TaxonomyError::Record(format!("unknown rating `{}`", raw.rating)))?;
    let id = match raw.id {
        Some(serde_json::Value::String(s)) => s,
        Some(serde_json::Value::Number(n)) => n.to_string(),
        _ => fallback_id.to_owned(),
    };
    Ok(TagRecord::new(
        id,
        &raw.tag_string_general,
        &raw.tag_string_character,
        &raw.tag_string_artist,
        rating,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn native_danbooru_form_is_normalized() {
        let r = TagRecord::new("1", "1girl solo blonde_hair >_<", "yuugumo_(kancolle)", "", Rating::General);
        assert_eq!(r.general_tags, ["1girl", "solo", "blonde hair", "> <"]);
        assert_eq!(r.character_tags, ["yuugumo (kancolle)"]);
    }

    #[test]
    fn comma_form_keeps_artist_case_and_dedups() {
        let r = TagRecord::new(
            "1",
            "1girl, Solo, solo, Blonde Hair",
            "",
            "Channel (Caststation), channel (caststation)",
            Rating::General,
        );
        assert_eq!(r.general_tags, ["1girl", "solo", "blonde hair"]);
        assert_eq!(r.artist_tags, ["Channel (Caststation)"]);
    }

    #[test]
    fn metadata_line_parses_numeric_id_and_short_rating() {
        let line = r#"{"id": 42, "tag_string_general": "1girl solo", "tag_string_character": "", "tag_string_artist": "", "rating": "g"}"#;
        let r = parse_metadata_line(line, "x").unwrap();
        assert_eq!(r.id, "42");
        assert_eq!(r.rating, Rating::General);
    }

    #[test]
    fn unknown_rating_is_an_error() {
        let line = r#"{"tag_string_general": "1girl", "rating": "nope"}"#;
        assert!(parse_metadata_line(line, "x").is_err());
    }
}
