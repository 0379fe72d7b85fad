use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use anime_adapter::backends::{PoseSkeleton, StickFigureDetector, ThresholdSegmenter};
use anime_adapter::checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use anime_adapter::config::VisionBackend;
use anime_adapter::eval::{
    run_eval, write_case_rows, AdapterGenerator, CaseGenerator, EvalBackends, IdentityGenerator, MetricsReport,
    SurrogateEvalEncoder,
};
use anime_adapter::generate::{GenerateRequest, Generated, Pipeline, RefInput};
use anime_adapter::image::{Mask, RgbImage};
use anime_adapter::injection::{pixel_mask_to_token_mask, Scope};
use anime_adapter::model::SurrogateStack;
use anime_adapter::trainer::{FreezeReport, Trainer};
use anime_adapter::AppConfig;
use anime_adapter::backends::ControllerKind;

use crate::args::{AblateArgs, Cli, Command, EvaluateArgs, GenerateArgs, TrainArgs};
use crate::dataset::{build_dataset, load_eval_cases, load_training_samples, parse_tasks};
use crate::exit::UsageError;

/// Environment variable naming the directory that holds real-backend weights.
pub const CACHE_ENV: &str = "ANIMEADAPTER_CACHE";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Config from `--config` (or `fallback`), then the global flag overrides.
fn resolve_config(cli: &Cli, fallback: Option<&str>) -> Result<AppConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => AppConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        (None, Some(text)) => AppConfig::from_toml(text).context("config embedded in checkpoint")?,
        (None, None) => AppConfig::surrogate(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = &cli.clip_weights {
        let weights = match std::env::var_os(CACHE_ENV) {
            Some(dir) if w.is_relative() => PathBuf::from(dir).join(w),
            _ => w.clone(),
        };
        cfg.backends.vision = VisionBackend::Clip { weights, config: None };
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunLog<'a> {
    subcommand: &'a str,
    seed: u64,
    version: &'a str,
}

/// Every output directory records the resolved config and seed.
fn write_run_log(dir: &Path, subcommand: &str, cfg: &AppConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("resolved_config.toml"), cfg.to_toml())?;
    let log = RunLog { subcommand, seed: cfg.seed, version: env!("CARGO_PKG_VERSION") };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&log)?)?;
    log::info!("{subcommand}: seed {} config written to {}", cfg.seed, dir.join("resolved_config.toml").display());
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::BuildDataset(args) => {
            let cfg = resolve_config(&cli, None)?;
            write_run_log(&args.out, "build-dataset", &cfg)?;
            let summary = build_dataset(args, cfg.seed, cfg.backends.render_size)?;
            write_json(&args.out.join("dataset_summary.json"), &summary)?;
            println!("{} accepted, {} rejected -> {}", summary.accepted.len(), summary.rejected.len(), summary.manifest.display());
        }
        Command::Train(args) => {
            let cfg = resolve_config(&cli, None)?;
            let s = train(args, cfg)?;
            println!(
                "trained {} steps in {:.1}s: eval loss {:.5} -> {:.5}; checkpoint {}",
                s.steps, s.seconds, s.initial_eval_loss, s.final_eval_loss, s.checkpoint.display()
            );
        }
        Command::Generate(args) => {
            let ck = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let cfg = resolve_config(&cli, ck.as_ref().map(|c| c.config_toml.as_str()))?;
            let out = generate(args, cfg, ck)?;
            println!("{} images -> {}", out.images.len(), args.out.display());
        }
        Command::Evaluate(args) => {
            let ck = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let cfg = resolve_config(&cli, ck.as_ref().map(|c| c.config_toml.as_str()))?;
            let report = evaluate(args, cfg, ck)?;
            print!("{}", report.to_table());
        }
        Command::Ablate(args) => {
            let cfg = resolve_config(&cli, None)?;
            let rows = ablate(args, cfg)?;
            print!("{}", ablation_table(&rows));
        }
        Command::InspectCheckpoint(args) => print!("{}", inspect(&args.path)?),
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub samples: u64,
    pub pose_fed_fraction: f64,
    pub image_dropped: u64,
    pub text_dropped: u64,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub seconds: f64,
    pub checkpoint: PathBuf,
    pub freeze: FreezeReport,
}

fn train_inner(args: &TrainArgs, cfg: &AppConfig, use_mask: bool, out: Option<&Path>) -> Result<(Trainer, TrainSummary)> {
    let mut stack = SurrogateStack::build(cfg)?;
    let data = load_training_samples(&args.manifest, &stack, &cfg.injection, use_mask)?;
    let resumed: Option<Checkpoint> = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let adapter = match &resumed {
        Some(ck) => {
            stack.attach_existing(&ck.adapter)?;
            ck.adapter.clone()
        }
        None => stack.attach_new(cfg.injection.scope, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
    };
    let mut trainer = Trainer::new(stack, adapter, cfg.trainer.clone(), cfg.injection.clone(), cfg.seed)?;
    if let Some(ck) = resumed {
        if let Some(opt) = ck.optimizer {
            trainer.opt = opt;
        }
        trainer.stats.steps = ck.header.step;
    }
    let config_toml = cfg.to_toml();
    let start = Instant::now();
    let initial_eval_loss = trainer.eval_loss(&data, cfg.seed)?;
    let every = cfg.trainer.checkpoint_every;
    let ckpt_dir = out.map(|o| o.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        std::fs::create_dir_all(d)?;
    }
    let steps = cfg.trainer.steps;
    trainer.fit(&data, steps, |tr, loss| {
        let step = tr.step();
        if step % 100 == 0 {
            log::info!("step {step} loss {loss:.5}");
        }
        if let Some(d) = &ckpt_dir {
            if every > 0 && step % every == 0 {
                save_checkpoint(&d.join(format!("step_{step:06}.ckpt")), &tr.adapter, Some(&tr.opt), step, &config_toml)?;
            }
        }
        Ok(())
    })?;
    let final_eval_loss = trainer.eval_loss(&data, cfg.seed)?;
    let freeze = trainer.freeze_audit()?;
    let checkpoint = out.map(|o| o.join("adapter.ckpt")).unwrap_or_default();
    if let Some(o) = out {
        save_checkpoint(&checkpoint, &trainer.adapter, Some(&trainer.opt), trainer.step(), &config_toml)?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in trainer.stats.losses.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", i + 1));
        }
        std::fs::write(o.join("losses.csv"), csv)?;
    }
    let st = &trainer.stats;
    let summary = TrainSummary {
        steps: st.steps,
        samples: st.samples,
        pose_fed_fraction: st.pose_fed as f64 / st.samples.max(1) as f64,
        image_dropped: st.image_dropped,
        text_dropped: st.text_dropped,
        initial_eval_loss,
        final_eval_loss,
        seconds: start.elapsed().as_secs_f64(),
        checkpoint,
        freeze,
    };
    Ok((trainer, summary))
}

fn apply_train_flags(args: &TrainArgs, cfg: &mut AppConfig) {
    if let Some(c) = args.controller {
        cfg.trainer.controller = c;
    }
    if let Some(s) = args.steps {
        cfg.trainer.steps = s;
    }
    if let Some(s) = args.scope {
        cfg.injection.scope = s;
    }
}

pub fn train(args: &TrainArgs, mut cfg: AppConfig) -> Result<TrainSummary> {
    apply_train_flags(args, &mut cfg);
    write_run_log(&args.out, "train", &cfg)?;
    let (_, summary) = train_inner(args, &cfg, !args.no_mask, Some(&args.out))?;
    write_json(&args.out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

fn split_tags(prompt: &str) -> Vec<String> {
    prompt.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

pub fn generate(args: &GenerateArgs, mut cfg: AppConfig, ck: Option<Checkpoint>) -> Result<Generated> {
    match (&ck, args.base) {
        (Some(_), true) => return Err(usage("--base and --checkpoint are mutually exclusive")),
        (None, false) => return Err(usage("--checkpoint is required unless --base is given")),
        _ => {}
    }
    if let (Some(ck), Some(scope)) = (&ck, args.scope) {
        if ck.adapter.scope != scope {
            return Err(usage(format!("checkpoint was trained with scope {} but --scope {scope} was given", ck.adapter.scope)));
        }
    }
    if !args.masks.is_empty() && args.masks.len() != args.refs.len() {
        return Err(usage(format!("{} masks for {} references", args.masks.len(), args.refs.len())));
    }
    if !args.scales.is_empty() && args.scales.len() != args.refs.len() {
        return Err(usage(format!("{} scales for {} references", args.scales.len(), args.refs.len())));
    }
    if let Some(c) = args.controller {
        cfg.trainer.controller = c;
    }
    if let Some(g) = args.gamma {
        cfg.injection.gamma = g;
    }
    if let Some(m) = args.mode {
        cfg.injection.mode = m;
    }
    if let Some(g) = args.guidance {
        cfg.diffusion.guidance = g;
    }
    cfg.validate()?;
    write_run_log(&args.out, "generate", &cfg)?;
    let mut stack = SurrogateStack::build(&cfg)?;
    if let Some(ck) = &ck {
        stack.attach_existing(&ck.adapter)?;
    }
    let (w, h) = stack.image_size();
    let mut refs = Vec::new();
    for (i, path) in args.refs.iter().enumerate() {
        let image = RgbImage::load_png(path)?.fit_to(w, h)?;
        let mask = match args.masks.get(i) {
            Some(m) => Some(pixel_mask_to_token_mask(
                &Mask::load_png(m)?.resize_nearest(w, h),
                &stack.encoder_spec(),
                cfg.injection.token_threshold,
                cfg.injection.class_token_foreground,
            )?),
            None => None,
        };
        refs.push(RefInput { image, mask, scale: args.scales.get(i).copied(), source: path.display().to_string() });
    }
    let pose = args.pose.as_deref().map(PoseSkeleton::load).transpose()?;
    let mut pipeline = Pipeline::new(&stack, ck.as_ref().map(|c| &c.adapter), cfg.injection.clone(), cfg.diffusion.guidance);
    pipeline.clip_x0 = cfg.diffusion.clip_x0;
    let req = GenerateRequest { refs, prompt: split_tags(&args.prompt), pose, samples: args.samples, seed: cfg.seed };
    let out = pipeline.generate(&req)?;
    for (i, img) in out.images.iter().enumerate() {
        img.save_png(&args.out.join(format!("sample_{i}.png")))?;
    }
    write_json(&args.out.join("provenance.json"), &out.provenance)?;
    Ok(out)
}

fn eval_with(
    cfg: &AppConfig,
    stack: &SurrogateStack,
    cases: &[anime_adapter::eval::EvalCase],
    generator: &dyn CaseGenerator,
) -> Result<(MetricsReport, Vec<anime_adapter::eval::CaseMetrics>)> {
    let encoder = SurrogateEvalEncoder::new(stack.encoder.as_ref(), stack.text.clone(), cfg.backends.backbone_seed.wrapping_add(4));
    let segmenter = ThresholdSegmenter::default();
    let pose = StickFigureDetector::default();
    let backends = EvalBackends { encoder: &encoder, segmenter: &segmenter, pose: &pose };
    Ok(run_eval(cases, generator, &backends, &cfg.eval, cfg.seed)?)
}

pub fn evaluate(args: &EvaluateArgs, cfg: AppConfig, ck: Option<Checkpoint>) -> Result<MetricsReport> {
    let tasks = parse_tasks(&args.task)?;
    write_run_log(&args.out, "evaluate", &cfg)?;
    let cases = load_eval_cases(&args.manifest, &tasks)?;
    let mut stack = SurrogateStack::build(&cfg)?;
    let (report, per_case) = match args.generator.as_str() {
        "identity" => eval_with(&cfg, &stack, &cases, &IdentityGenerator)?,
        "base" => {
            let generator = AdapterGenerator { pipeline: Pipeline::new(&stack, None, cfg.injection.clone(), cfg.diffusion.guidance), use_mask: true };
            eval_with(&cfg, &stack, &cases, &generator)?
        }
        "adapter" => {
            let ck = ck.ok_or_else(|| usage("--generator adapter needs --checkpoint"))?;
            stack.attach_existing(&ck.adapter)?;
            let generator = AdapterGenerator {
                pipeline: Pipeline::new(&stack, Some(&ck.adapter), cfg.injection.clone(), cfg.diffusion.guidance),
                use_mask: true,
            };
            eval_with(&cfg, &stack, &cases, &generator)?
        }
        other => return Err(usage(format!("unknown generator `{other}` (identity, base, adapter)"))),
    };
    write_json(&args.out.join("report.json"), &report)?;
    std::fs::write(args.out.join("report.txt"), report.to_table())?;
    let rows: Vec<_> = per_case.iter().flat_map(|c| c.rows()).collect();
    write_case_rows(&args.out.join("cases.jsonl"), &rows)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub scope: Scope,
    pub mask: bool,
    pub controller: ControllerKind,
    pub final_eval_loss: f64,
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

fn parse_axes(grid: &str) -> Result<(bool, bool, bool)> {
    let mut axes = (false, false, false);
    for a in grid.split(['×', 'x', ',', '*']).map(str::trim).filter(|a| !a.is_empty()) {
        match a {
            "scope" => axes.0 = true,
            "mask" => axes.1 = true,
            "controller" => axes.2 = true,
            other => return Err(usage(format!("unknown ablation axis `{other}` (scope, mask, controller)"))),
        }
    }
    Ok(axes)
}

fn mean_over_tasks(report: &MetricsReport, f: impl Fn(&anime_adapter::eval::TaskMetrics) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = report.tasks.iter().filter_map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains from scratch at every grid point and evaluates the result.
pub fn ablate(args: &AblateArgs, cfg: AppConfig) -> Result<Vec<AblationRow>> {
    let (vary_scope, vary_mask, vary_controller) = parse_axes(&args.grid)?;
    let tasks = parse_tasks(&args.task)?;
    write_run_log(&args.out, "ablate", &cfg)?;
    let scopes = if vary_scope { vec![Scope::FullBlocks, Scope::UpBlocks] } else { vec![cfg.injection.scope] };
    let masks = if vary_mask { vec![true, false] } else { vec![true] };
    let controllers = if vary_controller {
        vec![ControllerKind::T2iAdapter, ControllerKind::Controlnet, ControllerKind::None]
    } else {
        vec![cfg.trainer.controller]
    };
    let cases = load_eval_cases(&args.manifest, &tasks)?;
    let mut rows = Vec::new();
    for &scope in &scopes {
        for &mask in &masks {
            for &controller in &controllers {
                let mut point = cfg.clone();
                point.injection.scope = scope;
                point.trainer.controller = controller;
                point.trainer.steps = args.steps;
                let train_args = TrainArgs {
                    manifest: args.manifest.clone(),
                    out: args.out.clone(),
                    controller: None,
                    steps: None,
                    scope: None,
                    resume: None,
                    no_mask: !mask,
                };
                let (trainer, summary) = train_inner(&train_args, &point, mask, None)?;
                let generator = AdapterGenerator {
                    pipeline: Pipeline::new(&trainer.stack, Some(&trainer.adapter), point.injection.clone(), point.diffusion.guidance),
                    use_mask: mask,
                };
                let (report, _) = eval_with(&point, &trainer.stack, &cases, &generator)?;
                log::info!("ablation {scope} mask={mask} {controller}: eval loss {:.5}", summary.final_eval_loss);
                rows.push(AblationRow {
                    scope,
                    mask,
                    controller,
                    final_eval_loss: summary.final_eval_loss,
                    clip_t: mean_over_tasks(&report, |t| Some(t.clip_t)).unwrap_or(0.0),
                    clip_i: mean_over_tasks(&report, |t| Some(t.clip_i)).unwrap_or(0.0),
                    lpips: mean_over_tasks(&report, |t| Some(t.lpips)).unwrap_or(0.0),
                    lpips_div: mean_over_tasks(&report, |t| Some(t.lpips_div)).unwrap_or(0.0),
                    psnr: mean_over_tasks(&report, |t| Some(t.psnr)).unwrap_or(0.0),
                    fid: mean_over_tasks(&report, |t| t.fid),
                    akd: mean_over_tasks(&report, |t| t.akd),
                    mkr: mean_over_tasks(&report, |t| t.mkr),
                    failure: mean_over_tasks(&report, |t| t.failure),
                });
            }
        }
    }
    write_json(&args.out.join("ablation.json"), &rows)?;
    std::fs::write(args.out.join("ablation.txt"), ablation_table(&rows))?;
    Ok(rows)
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<12}{:<7}{:<12}{:>10}", "scope", "mask", "controller", "loss");
    for c in anime_adapter::eval::COLUMNS {
        out.push_str(&format!("{c:>11}"));
    }
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or_else(|| format!("{:>11}", "-"), |v| format!("{v:>11.4}"));
    for r in rows {
        out.push_str(&format!("{:<12}{:<7}{:<12}{:>10.5}", r.scope.as_str(), if r.mask { "yes" } else { "no" }, r.controller.as_str(), r.final_eval_loss));
        for v in [Some(r.clip_t), Some(r.clip_i), Some(r.lpips), Some(r.lpips_div), Some(r.psnr), r.fid, r.akd, r.mkr, r.failure] {
            out.push_str(&cell(v));
        }
        out.push('\n');
    }
    out
}

pub fn inspect(path: &Path) -> Result<String> {
    Ok(inspect_checkpoint(path).with_context(|| format!("inspecting {}", path.display()))?.render())
}
