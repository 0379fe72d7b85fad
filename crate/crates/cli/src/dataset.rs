use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use anime_adapter::backends::{PoseSkeleton, Segmenter, SegmenterRequest, ThresholdSegmenter};
use anime_adapter::eval::EvalCase;
use anime_adapter::image::{Mask, RgbImage};
use anime_adapter::injection::{InjectionConfig, TokenMask};
use anime_adapter::model::SurrogateStack;
use anime_adapter::render::{render_reference, Framing};
use anime_adapter::trainer::TrainingSample;
use anime_taxonomy::{
    emit_manifest, filter_entry, parse_manifest, parse_metadata_line, DenyPairs, EditTask, FilterOutcome, ManifestEntry,
    PromptBundle, PromptConstants, ReferenceAssets, ReferenceKind, ReferencePrompts, Taxonomy,
};

use crate::args::BuildDatasetArgs;
use crate::exit::UsageError;

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    pub accepted: Vec<String>,
    pub rejected: Vec<(String, String)>,
    pub tasks: Vec<String>,
}

pub fn parse_tasks(spec: &str) -> Result<Vec<EditTask>> {
    if spec.trim() == "all" {
        return Ok(EditTask::ALL.to_vec());
    }
    spec.split(',')
        .map(|t| EditTask::parse(t.trim()).ok_or_else(|| UsageError(format!("unknown task `{}`", t.trim())).into()))
        .collect()
}

fn framing(kind: ReferenceKind) -> Framing {
    match kind {
        ReferenceKind::Orig => Framing::Orig,
        ReferenceKind::Full => Framing::Full,
        ReferenceKind::Upper => Framing::Upper,
        ReferenceKind::Portrait => Framing::Portrait,
    }
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Filters the metadata, builds every prompt, renders one reference per kind
/// (image, subject mask, skeleton) and writes `manifest.jsonl`.
pub fn build_dataset(args: &BuildDatasetArgs, seed: u64, render_size: usize) -> Result<DatasetSummary> {
    let taxonomy = match &args.taxonomy {
        Some(p) => Taxonomy::load(p).with_context(|| format!("loading taxonomy {}", p.display()))?,
        None => Taxonomy::shipped(),
    };
    let deny = match &args.deny {
        Some(p) => DenyPairs::load(p)?,
        None => DenyPairs::shipped(),
    };
    let tasks = parse_tasks(&args.tasks)?;
    let constants = PromptConstants::default();
    let text = std::fs::read_to_string(&args.metadata).with_context(|| format!("reading {}", args.metadata.display()))?;
    let refs_dir = args.out.join("refs");
    std::fs::create_dir_all(&refs_dir).with_context(|| format!("creating {}", refs_dir.display()))?;
    let segmenter = ThresholdSegmenter::default();
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let record = match parse_metadata_line(line, &format!("line{}", i + 1)) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("line {}: {e}", i + 1);
                rejected.push((format!("line{}", i + 1), e.to_string()));
                continue;
            }
        };
        let clusters = match filter_entry(&record, &taxonomy, &deny) {
            FilterOutcome::Accept(c) => c,
            FilterOutcome::Reject(reason) => {
                log::info!("rejected {}: {reason}", record.id);
                rejected.push((record.id.clone(), reason.to_string()));
                continue;
            }
        };
        let bundle = PromptBundle::build(&clusters, seed.wrapping_add(i as u64), &tasks, &taxonomy, &constants)
            .with_context(|| format!("building prompts for {}", record.id))?;
        let stem = file_stem(&record.id);
        let subject = clusters.c0.iter().chain(&clusters.char_name).cloned().collect::<Vec<_>>().join(", ");
        let mut references = Vec::new();
        for kind in ReferenceKind::ALL {
            let posture: &[String] = if kind == ReferenceKind::Orig { &clusters.c3 } else { &[] };
            let (image, skeleton) = render_reference(posture, &clusters.c4, framing(kind), render_size);
            let mask = segmenter.segment(&SegmenterRequest { id: &record.id, image: &image, prompt: &subject })?;
            let name = |suffix: &str| format!("refs/{stem}_{kind}{suffix}");
            let asset = ReferenceAssets { kind, image_path: name(".png"), mask_path: name("_mask.png"), pose_path: name(".pose") };
            image.save_png(&args.out.join(&asset.image_path))?;
            mask.save_png(&args.out.join(&asset.mask_path))?;
            skeleton.save(&args.out.join(&asset.pose_path))?;
            references.push(asset);
        }
        let orig = references[0].clone();
        entries.push(ManifestEntry {
            id: record.id.clone(),
            image_path: orig.image_path,
            mask_path: orig.mask_path,
            pose_path: orig.pose_path,
            clusters,
            prompts: ReferencePrompts::from(&bundle),
            edits: bundle.edits,
            references,
        });
    }
    let manifest = args.out.join("manifest.jsonl");
    emit_manifest(&entries, &manifest)?;
    let mut log = String::from("id\treason\n");
    for (id, reason) in &rejected {
        log.push_str(&format!("{id}\t{reason}\n"));
    }
    std::fs::write(args.out.join("rejected.tsv"), log)?;
    Ok(DatasetSummary {
        manifest,
        accepted: entries.iter().map(|e| e.id.clone()).collect(),
        rejected,
        tasks: tasks.iter().map(|t| t.to_string()).collect(),
    })
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn read_manifest(manifest: &Path) -> Result<Vec<ManifestEntry>> {
    let entries = parse_manifest(manifest)?;
    if entries.is_empty() {
        bail!(anime_adapter::Error::Data(format!("manifest {} has no entries", manifest.display())));
    }
    Ok(entries)
}

/// Training samples from each entry's original reference.
pub fn load_training_samples(manifest: &Path, stack: &SurrogateStack, injection: &InjectionConfig, use_mask: bool) -> Result<Vec<TrainingSample>> {
    let dir = base_dir(manifest);
    let mut out = Vec::new();
    for e in read_manifest(manifest)? {
        let image = RgbImage::load_png(&dir.join(&e.image_path))?;
        let mask = Mask::load_png(&dir.join(&e.mask_path))?;
        let skeleton = PoseSkeleton::load(&dir.join(&e.pose_path))?;
        let mut sample = TrainingSample::prepare(e.id.clone(), &image, &mask, skeleton, e.prompts.training.clone(), stack, injection)?;
        if !use_mask {
            sample.mask = TokenMask::ones(sample.mask.len());
        }
        out.push(sample);
    }
    Ok(out)
}

/// One case per (entry, edit) whose task is selected, in manifest order.
pub fn load_eval_cases(manifest: &Path, tasks: &[EditTask]) -> Result<Vec<EvalCase>> {
    let dir = base_dir(manifest);
    let mut cases = Vec::new();
    for e in read_manifest(manifest)? {
        for edit in e.edits.iter().filter(|ed| tasks.contains(&ed.task)) {
            let (image, mask, pose) = match e.reference(edit.reference) {
                Some(a) => (&a.image_path, &a.mask_path, &a.pose_path),
                None => (&e.image_path, &e.mask_path, &e.pose_path),
            };
            cases.push(EvalCase {
                id: format!("{}:{}", e.id, edit.task),
                task: edit.task.to_string(),
                reference: RgbImage::load_png(&dir.join(image))?,
                mask: Mask::load_png(&dir.join(mask))?,
                prompt: edit.tags.clone(),
                pose: if edit.requires_pose { Some(PoseSkeleton::load(&dir.join(pose))?) } else { None },
            });
        }
    }
    Ok(cases)
}
