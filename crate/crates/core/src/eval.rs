//! Evaluation metrics and the per-task report driver.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{PoseExtractor, PoseRequest, PoseSkeleton, Segmenter, SegmenterRequest, SurrogateText, TextEncoder};
use crate::encoder::VisionEncoder;
use crate::error::{Error, Result};
use crate::generate::{GenerateRequest, Pipeline, RefInput};
use crate::image::{Mask, RgbImage};
use crate::injection::pixel_mask_to_token_mask;
use crate::linalg::{randn, Mat};

/// Samples generated per evaluation case.
pub const SAMPLES_PER_CASE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AkdUnits {
    #[default]
    Normalized,
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// A generated sample with fewer detected joints counts as a failure.
    pub failure_min_joints: usize,
    pub akd_units: AkdUnits,
    /// Diagonal jitter added to FID covariances.
    pub fid_jitter: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { failure_min_joints: 4, akd_units: AkdUnits::Normalized, fid_jitter: 1e-6 }
    }
}

/// Embedding backend shared by every similarity metric.
pub trait EvalEncoder {
    /// Global image embedding (CLIP-I, FID features).
    fn image_embedding(&self, img: &RgbImage) -> Result<Array1<f64>>;
    /// Image embedding in the joint image–text space (CLIP-T).
    fn joint_image_embedding(&self, img: &RgbImage) -> Result<Array1<f64>>;
    fn text_embedding(&self, tags: &[String]) -> Result<Array1<f64>>;
    /// Per-layer spatial features (rows = locations) for the perceptual distance.
    fn layer_features(&self, img: &RgbImage) -> Result<Vec<Mat>>;
}

/// Eval embeddings from a frozen vision encoder and the surrogate text model.
pub struct SurrogateEvalEncoder<'a> {
    vision: &'a dyn VisionEncoder,
    text: SurrogateText,
    projection: Mat,
}

impl<'a> SurrogateEvalEncoder<'a> {
    pub fn new(vision: &'a dyn VisionEncoder, text: SurrogateText, seed: u64) -> Self {
        let hidden = vision.spec().hidden;
        let projection = randn(hidden, text.dim(), 1.0 / (hidden as f64).sqrt(), &mut ChaCha8Rng::seed_from_u64(seed));
        Self { vision, text, projection }
    }

    fn fit(&self, img: &RgbImage) -> Result<RgbImage> {
        let spec = self.vision.spec();
        img.fit_to(spec.width, spec.height)
    }
}

impl EvalEncoder for SurrogateEvalEncoder<'_> {
    fn image_embedding(&self, img: &RgbImage) -> Result<Array1<f64>> {
        let layers = self.vision.layer_outputs(&self.fit(img)?)?;
        Ok(layers.last().expect("at least one layer").row(0).to_owned())
    }

    fn joint_image_embedding(&self, img: &RgbImage) -> Result<Array1<f64>> {
        Ok(self.image_embedding(img)?.dot(&self.projection))
    }

    fn text_embedding(&self, tags: &[String]) -> Result<Array1<f64>> {
        Ok(self.text.pooled(tags))
    }

    fn layer_features(&self, img: &RgbImage) -> Result<Vec<Mat>> {
        Ok(self.vision.layer_outputs(&self.fit(img)?)?.into_iter().map(|z| z.slice(s![1.., ..]).to_owned()).collect())
    }
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("embedding widths {} and {}", a.len(), b.len())));
    }
    let denom = a.dot(a).sqrt() * b.dot(b).sqrt();
    if denom == 0.0 {
        return Err(Error::Data("cosine of a zero embedding".into()));
    }
    Ok(a.dot(b) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskedScore {
    pub value: f64,
    /// A mask was empty, so that side was scored as an all-white image.
    pub empty_mask: bool,
}

/// Cosine of global embeddings after whitening the background of both images.
pub fn masked_clip_i(gen: &RgbImage, reference: &RgbImage, gen_mask: &Mask, ref_mask: &Mask, encoder: &dyn EvalEncoder) -> Result<MaskedScore> {
    let a = encoder.image_embedding(&gen.composite_white(gen_mask)?)?;
    let b = encoder.image_embedding(&reference.composite_white(ref_mask)?)?;
    Ok(MaskedScore { value: cosine(&a, &b)?, empty_mask: gen_mask.count() == 0 || ref_mask.count() == 0 })
}

pub fn clip_t(gen: &RgbImage, prompt: &[String], encoder: &dyn EvalEncoder) -> Result<f64> {
    if prompt.iter().all(|t| t.trim().is_empty()) {
        return Err(Error::Data("empty prompt".into()));
    }
    cosine(&encoder.joint_image_embedding(gen)?, &encoder.text_embedding(prompt)?)
}

/// Mean squared distance between channel-normalized features, averaged over
/// locations and layers.
pub fn perceptual_distance(a: &RgbImage, b: &RgbImage, encoder: &dyn EvalEncoder) -> Result<f64> {
    let (fa, fb) = (encoder.layer_features(a)?, encoder.layer_features(b)?);
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let mut layer = 0.0;
        for (rx, ry) in x.rows().into_iter().zip(y.rows()) {
            let (nx, ny) = (rx.dot(&rx).sqrt().max(1e-12), ry.dot(&ry).sqrt().max(1e-12));
            layer += rx.iter().zip(ry.iter()).map(|(p, q)| (p / nx - q / ny).powi(2)).sum::<f64>();
        }
        total += layer / x.nrows() as f64;
    }
    Ok(total / fa.len() as f64)
}

/// Mean distance over all unordered pairs of the samples of one case.
pub fn diversity<T>(samples: &[T], dist: impl Fn(&T, &T) -> Result<f64>) -> Result<f64> {
    if samples.len() != SAMPLES_PER_CASE {
        return Err(Error::Data(format!("diversity needs {SAMPLES_PER_CASE} samples, got {}", samples.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += dist(&samples[i], &samples[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub const PSNR_CAP: f64 = 100.0;

/// PSNR in dB over foreground pixels, peak value 1.
pub fn psnr(gen: &RgbImage, reference: &RgbImage, mask: &Mask) -> Result<f64> {
    if (gen.width(), gen.height()) != (reference.width(), reference.height())
        || (mask.width(), mask.height()) != (gen.width(), gen.height())
    {
        return Err(Error::Shape("psnr inputs differ in size".into()));
    }
    if mask.count() == 0 {
        return Err(Error::Data("psnr over an empty foreground".into()));
    }
    let mut sum = 0.0;
    for y in 0..gen.height() {
        for x in 0..gen.width() {
            if mask.get(x, y) {
                let (a, b) = (gen.get(x, y), reference.get(x, y));
                sum += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
            }
        }
    }
    let mse = sum / (3 * mask.count()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn covariance(x: &[Array1<f64>], mean: &Array1<f64>, jitter: f64) -> DMatrix<f64> {
    let d = mean.len();
    let mut c = DMatrix::zeros(d, d);
    for v in x {
        let dv = nalgebra::DVector::from_iterator(d, (v - mean).into_iter());
        c += &dv * dv.transpose();
    }
    c /= (x.len() - 1) as f64;
    for i in 0..d {
        c[(i, i)] += jitter;
    }
    c
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &[Array1<f64>], b: &[Array1<f64>], jitter: f64) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Data("FID needs at least two items per set".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Shape("FID features differ in width".into()));
    }
    let mean = |x: &[Array1<f64>]| x.iter().fold(Array1::zeros(d), |acc, v| acc + v) / x.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (ca, cb) = (covariance(a, &ma, jitter), covariance(b, &mb, jitter));
    // Tr((ΣaΣb)^{1/2}) = Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2}), which stays symmetric.
    let ra = psd_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = &ma - &mb;
    Ok((diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KeypointScore {
    /// Mean distance over joints detected in both; `None` when none are.
    pub akd: Option<f64>,
    /// Fraction of condition joints missing from the generation.
    pub mkr: f64,
}

/// `None` when the condition has no detected joint.
pub fn akd_mkr(gen: &PoseSkeleton, cond: &PoseSkeleton, units: AkdUnits, size: (usize, usize)) -> Option<KeypointScore> {
    let (sx, sy) = match units {
        AkdUnits::Normalized => (1.0, 1.0),
        AkdUnits::Pixels => (size.0 as f64, size.1 as f64),
    };
    let cond_n = cond.detected_count();
    if cond_n == 0 {
        return None;
    }
    let mut dist = 0.0;
    let mut both = 0;
    let mut missing = 0;
    for (g, c) in gen.joints.iter().zip(&cond.joints) {
        match (g.detected, c.detected) {
            (true, true) => {
                dist += ((g.x - c.x) * sx).hypot((g.y - c.y) * sy);
                both += 1;
            }
            (false, true) => missing += 1,
            _ => {}
        }
    }
    Some(KeypointScore { akd: (both > 0).then(|| dist / both as f64), mkr: missing as f64 / cond_n as f64 })
}

/// Fraction of skeletons with fewer than `min_joints` detected joints.
pub fn failure_rate(skeletons: &[PoseSkeleton], min_joints: usize) -> f64 {
    if skeletons.is_empty() {
        return 0.0;
    }
    skeletons.iter().filter(|s| s.detected_count() < min_joints).count() as f64 / skeletons.len() as f64
}

/// One reference/edit pair to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub id: String,
    pub task: String,
    pub reference: RgbImage,
    pub mask: Mask,
    pub prompt: Vec<String>,
    /// Present for pose-conditioned tasks.
    pub pose: Option<PoseSkeleton>,
}

pub trait CaseGenerator {
    fn name(&self) -> &str;
    fn generate(&self, case: &EvalCase, samples: usize, seed: u64) -> Result<Vec<RgbImage>>;
}

/// Returns the reference unchanged.
pub struct IdentityGenerator;

impl CaseGenerator for IdentityGenerator {
    fn name(&self) -> &str {
        "identity"
    }

    fn generate(&self, case: &EvalCase, samples: usize, _seed: u64) -> Result<Vec<RgbImage>> {
        Ok(vec![case.reference.clone(); samples])
    }
}

/// Precomputed outputs keyed by case id.
#[derive(Default)]
pub struct StubGenerator {
    pub outputs: BTreeMap<String, Vec<RgbImage>>,
}

impl CaseGenerator for StubGenerator {
    fn name(&self) -> &str {
        "stub"
    }

    fn generate(&self, case: &EvalCase, samples: usize, _seed: u64) -> Result<Vec<RgbImage>> {
        let out = self.outputs.get(&case.id).ok_or_else(|| Error::Backend(format!("no stub output for `{}`", case.id)))?;
        if out.len() != samples {
            return Err(Error::Data(format!("stub has {} outputs for `{}`", out.len(), case.id)));
        }
        Ok(out.clone())
    }
}

/// Generates with the adapter pipeline at model resolution and upsamples to
/// the reference size.
pub struct AdapterGenerator<'a> {
    pub pipeline: Pipeline<'a>,
    /// Pass the reference token mask; off gives unmasked injection.
    pub use_mask: bool,
}

impl CaseGenerator for AdapterGenerator<'_> {
    fn name(&self) -> &str {
        if self.pipeline.adapter.is_some() {
            "adapter"
        } else {
            "base"
        }
    }

    fn generate(&self, case: &EvalCase, samples: usize, seed: u64) -> Result<Vec<RgbImage>> {
        let stack = self.pipeline.stack;
        let (w, h) = stack.image_size();
        let image = case.reference.fit_to(w, h)?;
        let mask = if self.use_mask {
            Some(pixel_mask_to_token_mask(
                &case.mask.resize_nearest(w, h),
                &stack.encoder_spec(),
                self.pipeline.injection.token_threshold,
                self.pipeline.injection.class_token_foreground,
            )?)
        } else {
            None
        };
        let req = GenerateRequest {
            refs: vec![RefInput { image, mask, scale: None, source: case.id.clone() }],
            prompt: case.prompt.clone(),
            pose: case.pose.clone(),
            samples,
            seed,
        };
        let out = self.pipeline.generate(&req)?;
        Ok(out.images.iter().map(|im| im.resize_nearest(case.reference.width(), case.reference.height())).collect())
    }
}

/// One line of the per-case record stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Per-case metric values, averaged over its samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub task: String,
    pub clip_t: f64,
    pub clip_i: f64,
    pub lpips: f64,
    pub lpips_div: f64,
    pub psnr: f64,
    pub akd: Option<f64>,
    pub mkr: Option<f64>,
    pub failure: Option<f64>,
    pub empty_mask: bool,
}

impl CaseMetrics {
    pub fn rows(&self) -> Vec<CaseRow> {
        let mut named = vec![
            ("clip_t", Some(self.clip_t)),
            ("clip_i", Some(self.clip_i)),
            ("lpips", Some(self.lpips)),
            ("lpips_div", Some(self.lpips_div)),
            ("psnr", Some(self.psnr)),
            ("akd", self.akd),
            ("mkr", self.mkr),
            ("failure", self.failure),
        ];
        named.retain(|(_, v)| v.is_some());
        named
            .into_iter()
            .map(|(m, v)| CaseRow { case_id: self.id.clone(), task: self.task.clone(), metric: m.into(), value: v.unwrap() })
            .collect()
    }
}

/// Averages for one task, columns in report order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub cases: usize,
    pub samples: usize,
    pub skipped: usize,
    pub clip_t: f64,
    pub clip_i: f64,
    pub lpips: f64,
    pub lpips_div: f64,
    pub psnr: f64,
    pub fid: Option<f64>,
    pub akd: Option<f64>,
    pub mkr: Option<f64>,
    pub failure: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub generator: String,
    pub failure_min_joints: usize,
    pub akd_units: AkdUnits,
    pub tasks: Vec<TaskMetrics>,
    pub skipped: Vec<(String, String)>,
}

pub const COLUMNS: [&str; 9] = ["clip_t", "clip_i", "lpips", "lpips_div", "psnr", "fid", "akd", "mkr", "failure"];

impl MetricsReport {
    pub fn task(&self, name: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Plain-text table, one row per task.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "# generator={} failure_min_joints={} akd_units={:?}\n{:<14}{:>6}",
            self.generator, self.failure_min_joints, self.akd_units, "task", "cases"
        );
        for c in COLUMNS {
            out.push_str(&format!("{c:>11}"));
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or_else(|| format!("{:>11}", "-"), |v| format!("{v:>11.4}"));
        for t in &self.tasks {
            out.push_str(&format!("{:<14}{:>6}", t.task, t.cases));
            for v in [Some(t.clip_t), Some(t.clip_i), Some(t.lpips), Some(t.lpips_div), Some(t.psnr), t.fid, t.akd, t.mkr, t.failure] {
                out.push_str(&cell(v));
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_case_rows(path: &Path, rows: &[CaseRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r).expect("row serializes")).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in v {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Scores one case's samples. Pose metrics are computed only when the case
/// carries a pose condition.
pub fn score_case(
    case: &EvalCase,
    samples: &[RgbImage],
    encoder: &dyn EvalEncoder,
    segmenter: &dyn Segmenter,
    pose: &dyn PoseExtractor,
    cfg: &EvalConfig,
) -> Result<CaseMetrics> {
    let masked_ref = case.reference.composite_white(&case.mask)?;
    let prompt = case.prompt.join(", ");
    let mut clip_t_v = Vec::new();
    let mut clip_i_v = Vec::new();
    let mut lpips_v = Vec::new();
    let mut psnr_v = Vec::new();
    let mut skeletons = Vec::new();
    let mut empty_mask = false;
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{}#{i}", case.id);
        let gen_mask = segmenter.segment(&SegmenterRequest { id: &id, image: s, prompt: if prompt.is_empty() { "character" } else { &prompt } })?;
        clip_t_v.push(clip_t(s, &case.prompt, encoder)?);
        let ci = masked_clip_i(s, &case.reference, &gen_mask, &case.mask, encoder)?;
        empty_mask |= ci.empty_mask;
        clip_i_v.push(ci.value);
        lpips_v.push(perceptual_distance(&s.composite_white(&gen_mask)?, &masked_ref, encoder)?);
        psnr_v.push(psnr(s, &case.reference, &case.mask)?);
        if case.pose.is_some() {
            skeletons.push(pose.extract_pose(&PoseRequest { id: &id, image: s })?);
        }
    }
    let lpips_div = diversity(samples, |a, b| perceptual_distance(a, b, encoder))?;
    let (mut akd, mut mkr, mut failure) = (None, None, None);
    if let Some(cond) = &case.pose {
        let size = (case.reference.width(), case.reference.height());
        let scores: Vec<KeypointScore> = skeletons.iter().filter_map(|g| akd_mkr(g, cond, cfg.akd_units, size)).collect();
        akd = mean(scores.iter().filter_map(|k| k.akd));
        mkr = mean(scores.iter().map(|k| k.mkr));
        failure = Some(failure_rate(&skeletons, cfg.failure_min_joints));
    }
    Ok(CaseMetrics {
        id: case.id.clone(),
        task: case.task.clone(),
        clip_t: mean(clip_t_v).expect("samples"),
        clip_i: mean(clip_i_v).expect("samples"),
        lpips: mean(lpips_v).expect("samples"),
        lpips_div,
        psnr: mean(psnr_v).expect("samples"),
        akd,
        mkr,
        failure,
        empty_mask,
    })
}

/// Arithmetic mean of per-case values for one task.
pub fn aggregate_task(task: &str, cases: &[CaseMetrics], skipped: usize, fid: Option<f64>) -> TaskMetrics {
    let col = |f: fn(&CaseMetrics) -> f64| mean(cases.iter().map(f)).unwrap_or(0.0);
    TaskMetrics {
        task: task.to_owned(),
        cases: cases.len(),
        samples: cases.len() * SAMPLES_PER_CASE,
        skipped,
        clip_t: col(|c| c.clip_t),
        clip_i: col(|c| c.clip_i),
        lpips: col(|c| c.lpips),
        lpips_div: col(|c| c.lpips_div),
        psnr: col(|c| c.psnr),
        fid,
        akd: mean(cases.iter().filter_map(|c| c.akd)),
        mkr: mean(cases.iter().filter_map(|c| c.mkr)),
        failure: mean(cases.iter().filter_map(|c| c.failure)),
    }
}

pub struct EvalBackends<'a> {
    pub encoder: &'a dyn EvalEncoder,
    pub segmenter: &'a dyn Segmenter,
    pub pose: &'a dyn PoseExtractor,
}

/// Generates and scores every case; tasks appear in first-seen order.
/// Generator failures skip the case and are listed in the report.
pub fn run_eval(
    cases: &[EvalCase],
    generator: &dyn CaseGenerator,
    backends: &EvalBackends<'_>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(MetricsReport, Vec<CaseMetrics>)> {
    let mut order: Vec<String> = Vec::new();
    let mut per_task: BTreeMap<String, (Vec<CaseMetrics>, usize, Vec<Array1<f64>>, Vec<Array1<f64>>)> = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut all = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        if !order.contains(&case.task) {
            order.push(case.task.clone());
        }
        let entry = per_task.entry(case.task.clone()).or_default();
        let samples = match generator.generate(case, SAMPLES_PER_CASE, seed.wrapping_add(i as u64)) {
            Ok(s) if s.len() == SAMPLES_PER_CASE => s,
            Ok(s) => {
                skipped.push((case.id.clone(), format!("generator returned {} samples", s.len())));
                entry.1 += 1;
                continue;
            }
            Err(e) => {
                log::warn!("case {} skipped: {e}", case.id);
                skipped.push((case.id.clone(), e.to_string()));
                entry.1 += 1;
                continue;
            }
        };
        let metrics = score_case(case, &samples, backends.encoder, backends.segmenter, backends.pose, cfg)?;
        let ref_features = backends.encoder.image_embedding(&case.reference.composite_white(&case.mask)?)?;
        for (j, s) in samples.iter().enumerate() {
            let id = format!("{}#{j}", case.id);
            let m = backends.segmenter.segment(&SegmenterRequest { id: &id, image: s, prompt: "character" })?;
            entry.2.push(backends.encoder.image_embedding(&s.composite_white(&m)?)?);
            entry.3.push(ref_features.clone());
        }
        entry.0.push(metrics.clone());
        all.push(metrics);
    }
    let mut tasks = Vec::new();
    for name in order {
        let (metrics, skip, gen_f, ref_f) = &per_task[&name];
        let fid_v = if gen_f.len() >= 2 { Some(fid(gen_f, ref_f, cfg.fid_jitter)?) } else { None };
        tasks.push(aggregate_task(&name, metrics, *skip, fid_v));
    }
    Ok((
        MetricsReport {
            generator: generator.name().to_owned(),
            failure_min_joints: cfg.failure_min_joints,
            akd_units: cfg.akd_units,
            tasks,
            skipped,
        },
        all,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Joint, StickFigureDetector, SurrogateVit, ThresholdSegmenter};
    use crate::encoder::EncoderSpec;
    use rand_distr::{Distribution, Normal};

    fn vit() -> SurrogateVit {
        SurrogateVit::new(EncoderSpec::default(), 5).unwrap()
    }

    fn toy(shade: f64, x0: usize) -> RgbImage {
        let mut img = RgbImage::white(16, 16);
        for y in 3..13 {
            for x in x0..x0 + 5 {
                img.set(x, y, [shade, 0.3, 1.0 - shade]);
            }
        }
        img
    }

    #[test]
    fn clip_i_identity_symmetry_and_oracle() {
        let v = vit();
        let enc = SurrogateEvalEncoder::new(&v, SurrogateText::new(32, 1), 2);
        let (a, b) = (toy(0.2, 3), toy(0.8, 7));
        let m = Mask::new(16, 16, true);
        assert!((masked_clip_i(&a, &a, &m, &m, &enc).unwrap().value - 1.0).abs() < 1e-6);
        let ab = masked_clip_i(&a, &b, &m, &m, &enc).unwrap().value;
        assert_eq!(ab, masked_clip_i(&b, &a, &m, &m, &enc).unwrap().value);
        let (ea, eb) = (enc.image_embedding(&a).unwrap(), enc.image_embedding(&b).unwrap());
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..ea.len() {
            dot += ea[i] * eb[i];
            na += ea[i] * ea[i];
            nb += eb[i] * eb[i];
        }
        assert!((ab - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-10);
        let empty = Mask::new(16, 16, false);
        assert!(masked_clip_i(&a, &b, &empty, &m, &enc).unwrap().empty_mask);
    }

    #[test]
    fn clip_t_stub_vectors() {
        let a = Array1::from(vec![1.0, 2.0, 2.0]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&Array1::from(vec![1.0, 0.0]), &Array1::from(vec![0.0, 3.0])).unwrap(), 0.0);
        let b = Array1::from(vec![3.0, 0.0, 4.0]);
        assert!((cosine(&a, &b).unwrap() - 11.0 / 15.0).abs() < 1e-15);
        let v = vit();
        let enc = SurrogateEvalEncoder::new(&v, SurrogateText::new(32, 1), 2);
        assert!(clip_t(&toy(0.5, 4), &[], &enc).is_err());
        assert!(clip_t(&toy(0.5, 4), &["smile".into()], &enc).unwrap().abs() <= 1.0);
    }

    #[test]
    fn diversity_examples() {
        let idx = [0usize, 1, 2, 3];
        let d = diversity(&idx, |a, b| Ok((*a as f64 - *b as f64).abs())).unwrap();
        assert!((d - 5.0 / 3.0).abs() < 1e-15);
        let same = [7usize; 4];
        assert_eq!(diversity(&same, |a, b| Ok((*a as f64 - *b as f64).abs())).unwrap(), 0.0);
        assert!(diversity(&idx[..3], |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn psnr_examples() {
        let m = Mask::new(4, 4, true);
        let black = RgbImage::filled(4, 4, [0.0; 3]);
        assert_eq!(psnr(&black, &black, &m).unwrap(), PSNR_CAP);
        assert_eq!(psnr(&black, &RgbImage::filled(4, 4, [1.0; 3]), &m).unwrap(), 0.0);
        // Checkerboard difference on a half mask against a scalar loop.
        let mut gen = black.clone();
        let mask = Mask::from_fn(4, 4, |x, _| x < 2);
        let mut oracle = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let v = if (x + y) % 2 == 0 { 0.25 } else { 0.5 };
                gen.set(x, y, [v, v, v]);
                if x < 2 {
                    oracle += 3.0 * v * v;
                }
            }
        }
        let expected = -10.0 * (oracle / 24.0f64).log10();
        assert!((psnr(&gen, &black, &mask).unwrap() - expected).abs() < 1e-12);
        assert!(psnr(&gen, &black, &Mask::new(4, 4, false)).is_err());
    }

    #[test]
    fn fid_examples() {
        let set: Vec<Array1<f64>> = (0..10).map(|i| Array1::from(vec![i as f64, (i * i) as f64 * 0.1])).collect();
        assert!(fid(&set, &set, 1e-6).unwrap().abs() < 1e-6);
        let a = vec![Array1::from(vec![1.0, 2.0]); 3];
        let b = vec![Array1::from(vec![4.0, -2.0]); 3];
        assert!((fid(&a, &b, 1e-6).unwrap() - 25.0).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (na, nb) = (Normal::new(0.0, 1.0).unwrap(), Normal::new(1.0, 2.0).unwrap());
        let x: Vec<_> = (0..10_000).map(|_| Array1::from(vec![na.sample(&mut rng)])).collect();
        let y: Vec<_> = (0..10_000).map(|_| Array1::from(vec![nb.sample(&mut rng)])).collect();
        assert!((fid(&x, &y, 1e-6).unwrap() - 2.0).abs() < 0.1);
        assert!(fid(&a[..1], &b, 1e-6).is_err());
    }

    fn skeleton() -> PoseSkeleton {
        let mut s = PoseSkeleton::undetected();
        for (j, joint) in s.joints.iter_mut().enumerate() {
            *joint = Joint::at(0.1 + 0.04 * j as f64, 0.2 + 0.03 * j as f64);
        }
        s
    }

    #[test]
    fn akd_mkr_examples() {
        let cond = skeleton();
        let score = akd_mkr(&cond, &cond, AkdUnits::Normalized, (64, 64)).unwrap();
        assert_eq!((score.akd, score.mkr), (Some(0.0), 0.0));
        let mut shifted = cond.clone();
        shifted.joints.iter_mut().for_each(|j| j.x += 0.1);
        let score = akd_mkr(&shifted, &cond, AkdUnits::Normalized, (64, 64)).unwrap();
        assert!((score.akd.unwrap() - 0.1).abs() < 1e-12 && score.mkr == 0.0);
        let px = akd_mkr(&shifted, &cond, AkdUnits::Pixels, (64, 64)).unwrap();
        assert!((px.akd.unwrap() - 6.4).abs() < 1e-9);
        let mut missing = cond.clone();
        for j in [2, 5, 11] {
            missing.joints[j] = Joint::MISSING;
        }
        let score = akd_mkr(&missing, &cond, AkdUnits::Normalized, (64, 64)).unwrap();
        assert_eq!(score.akd, Some(0.0));
        assert!((score.mkr - 3.0 / 18.0).abs() < 1e-15);
        assert!(akd_mkr(&cond, &PoseSkeleton::undetected(), AkdUnits::Normalized, (64, 64)).is_none());
    }

    #[test]
    fn failure_rate_examples() {
        let ok = skeleton();
        let blank = PoseSkeleton::undetected();
        assert_eq!(failure_rate(&vec![ok.clone(); 12], 4), 0.0);
        assert_eq!(failure_rate(&vec![blank.clone(); 12], 4), 1.0);
        let mut mix = vec![ok; 9];
        mix.extend(vec![blank; 3]);
        assert_eq!(failure_rate(&mix, 4), 0.25);
    }

    fn case(id: &str, task: &str, shade: f64, pose: bool) -> EvalCase {
        let reference = toy(shade, 5);
        let mask = ThresholdSegmenter::default().mask(&reference);
        EvalCase { id: id.into(), task: task.into(), reference, mask, prompt: vec!["smile".into()], pose: pose.then(skeleton) }
    }

    #[test]
    fn empty_and_identity_runs() {
        let v = vit();
        let enc = SurrogateEvalEncoder::new(&v, SurrogateText::new(32, 1), 2);
        let seg = ThresholdSegmenter::default();
        let det = StickFigureDetector::default();
        let backends = EvalBackends { encoder: &enc, segmenter: &seg, pose: &det };
        let (report, rows) = run_eval(&[], &IdentityGenerator, &backends, &EvalConfig::default(), 0).unwrap();
        assert!(report.tasks.is_empty() && rows.is_empty());
        let cases = [case("a", "expression", 0.2, false), case("b", "pose_cond", 0.7, true)];
        let (report, _) = run_eval(&cases, &IdentityGenerator, &backends, &EvalConfig::default(), 0).unwrap();
        for t in &report.tasks {
            assert!((t.clip_i - 1.0).abs() < 1e-12);
            assert_eq!(t.lpips, 0.0);
            assert_eq!(t.lpips_div, 0.0);
            assert_eq!(t.psnr, PSNR_CAP);
        }
        assert!(report.task("expression").unwrap().akd.is_none());
        // A plain block has no joint markers: every sample fails.
        assert_eq!(report.task("pose_cond").unwrap().failure, Some(1.0));
        assert!(report.to_table().lines().nth(1).unwrap().contains("lpips_div"));
    }

    #[test]
    fn stub_generator_matches_hand_assembled_table() {
        let v = vit();
        let enc = SurrogateEvalEncoder::new(&v, SurrogateText::new(32, 1), 2);
        let seg = ThresholdSegmenter::default();
        let det = StickFigureDetector::default();
        let backends = EvalBackends { encoder: &enc, segmenter: &seg, pose: &det };
        let cases = [case("a", "scene", 0.2, false), case("b", "scene", 0.6, false), case("c", "scene", 0.9, false)];
        let mut stub = StubGenerator::default();
        for (i, c) in cases.iter().enumerate() {
            stub.outputs.insert(c.id.clone(), (0..4).map(|j| toy(0.1 * (i + j) as f64, 2 + j)).collect());
        }
        stub.outputs.remove("c");
        let (report, per_case) = run_eval(&cases, &stub, &backends, &EvalConfig::default(), 0).unwrap();
        let t = report.task("scene").unwrap();
        assert_eq!((t.cases, t.skipped), (2, 1));
        let expected: Vec<CaseMetrics> = cases[..2]
            .iter()
            .map(|c| score_case(c, &stub.outputs[&c.id], &enc, &seg, &det, &EvalConfig::default()).unwrap())
            .collect();
        assert_eq!(per_case, expected);
        let psnr_mean = (expected[0].psnr + expected[1].psnr) / 2.0;
        assert_eq!(t.psnr, psnr_mean);
        assert_eq!(report.skipped.len(), 1);
    }
}
