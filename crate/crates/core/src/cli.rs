//! The `poseedit` command line.
//!
//! Exit codes: 0 success, 1 internal error, 2 bad input or usage,
//! 3 captioner unavailable, 4 non-finite training loss, 5 checkpoint variant
//! does not accept the supplied modalities, 6 malformed ratings file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::caption::{
    attach_captions, caption_records, read_caption_records, write_caption_records, CaptionClient, CaptionError,
    StubCaptioner,
};
use crate::conditioning::{neutral_skeleton, ConditioningError, Conditioner, Variant};
use crate::config::RunConfig;
use crate::dataset::{
    build_dataset, read_manifest, validate_manifest, write_manifest, BBox, DatasetError, ManifestRecord,
    ASSET_DIR, MANIFEST_FILE, STATS_FILE,
};
use crate::diffusion::train::TrainSettings;
use crate::diffusion::{
    load_checkpoint, sample_edit, save_checkpoint, Checkpoint, DiffusionError, NoiseModel, Trainer, UNetDenoiser,
};
use crate::eval::{evaluate_directories, read_ratings, EvalReport, RandomProjectionExtractor, RatingRecord};
use crate::pose::PoseSkeleton;
use crate::synthetic::{scripted_videos, table_ratings_fixture, training_pairs, write_video_fixture};
use crate::training_data::{build_example, examples_from_manifest, scale_pose, PairView};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("captioner unavailable: {0}")]
    Captioner(String),
    #[error("training loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("{0}")]
    Modality(String),
    #[error("{0}")]
    Ratings(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Input(_) => 2,
            CliError::Captioner(_) => 3,
            CliError::NonFiniteLoss { .. } => 4,
            CliError::Modality(_) => 5,
            CliError::Ratings(_) => 6,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ConditioningError> for CliError {
    fn from(e: ConditioningError) -> Self {
        match e {
            ConditioningError::ModalityMismatch { .. } => CliError::Modality(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::NonFiniteLoss { batch_index } => CliError::NonFiniteLoss { step: batch_index },
            DiffusionError::Io(_) | DiffusionError::Checkpoint(_) => CliError::Input(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "poseedit", version, about = "Pose- and text-controllable person inpainting")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset curation.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Caption every pair of a manifest.
    Caption(CaptionArgs),
    /// Train a denoiser for one conditioning variant.
    Train(TrainArgs),
    /// Insert a person into a scene with a trained checkpoint.
    Edit(EditArgs),
    /// FID, PCKh and rating aggregation.
    Eval(EvalArgs),
    /// Write synthetic fixtures.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Frames + poses -> keyframe pairs, assets and manifest.
    Build(BuildArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Videos processed in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Replace an existing manifest.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Use the offline deterministic captioner.
    #[arg(long)]
    pub stub: bool,
    /// Keep captions that are already present.
    #[arg(long)]
    pub no_overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Train on this many generated stick-figure pairs instead of a manifest.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Final checkpoint path; defaults to `<checkpoints>/final.ckpt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Scene to insert the person into.
    #[arg(long)]
    pub scene: PathBuf,
    /// Region to fill, `x0,y0,x1,y1` with exclusive ends.
    #[arg(long, value_parser = parse_bbox)]
    pub mask_bbox: BBox,
    /// Image of the person to insert.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub caption: Option<String>,
    /// JSON array of 17 `[x, y, confidence]` triples in scene pixels.
    #[arg(long)]
    pub target_pose: Option<PathBuf>,
    /// Pose of the person in the reference image, same format.
    #[arg(long)]
    pub reference_pose: Option<PathBuf>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the target skeleton drawn over the result.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of reference images.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Generated images as `label=dir` or `dir`; repeatable.
    #[arg(long)]
    pub generated: Vec<String>,
    /// Ratings CSV with header `scene_id,config,question,rater_id,score`.
    #[arg(long)]
    pub ratings: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Scripted stick-figure videos with known keyframes.
    Videos {
        #[arg(long)]
        out: PathBuf,
    },
    /// Ratings CSV reproducing a reference percentage table.
    Ratings {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

/// `x0,y0,x1,y1`; rejects empty boxes.
pub fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    let [x0, y0, x1, y1] = v[..] else {
        return Err(format!("expected 4 comma-separated integers, got {}", v.len()));
    };
    let b = BBox::new(x0, y0, x1, y1);
    if x1 <= x0 || y1 <= y0 {
        return Err(format!("box {s} has zero area"));
    }
    Ok(b)
}

pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Input(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Dataset(DatasetCommand::Build(a)) => cmd_dataset_build(&cfg, &a).map(|_| ()),
        Command::Caption(a) => {
            let client = make_captioner(&cfg, a.stub)?;
            let manifest = a.manifest.clone().unwrap_or_else(|| cfg.paths.manifest_path());
            let s = cmd_caption(&cfg, &manifest, client.as_ref(), a.no_overwrite)?;
            println!("captioned {} of {} pairs ({} failed, {} kept)", s.captioned, s.total, s.failed.len(), s.kept);
            for (id, e) in &s.failed {
                println!("  failed {id}: {e}");
            }
            Ok(())
        }
        Command::Train(a) => cmd_train(&cfg, &a).map(|_| ()),
        Command::Edit(a) => cmd_edit(&cfg, &a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&cfg, &a).map(|_| ()),
        Command::Synth(SynthCommand::Videos { out }) => {
            write_video_fixture(&out, &scripted_videos()).map_err(|e| input_err(&out, e))?;
            println!("wrote scripted videos to {}", out.display());
            Ok(())
        }
        Command::Synth(SynthCommand::Ratings { out }) => {
            write_ratings_csv(&out, &table_ratings_fixture())?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

pub fn cmd_dataset_build(cfg: &RunConfig, a: &BuildArgs) -> Result<crate::dataset::BuildReport, CliError> {
    let input = a.input.clone().unwrap_or_else(|| cfg.paths.frames.clone());
    let output = a.output.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    if !input.is_dir() {
        return Err(CliError::Input(format!("{}: not a directory", input.display())));
    }
    let existed = output.join(MANIFEST_FILE).exists();
    match build_dataset(&input, &output, &cfg.pipeline, cfg.seed, a.jobs, a.overwrite) {
        Ok(report) => {
            let name = input.file_name().and_then(|n| n.to_str()).unwrap_or("dataset");
            print!("{}", report.stats.to_table(name));
            for (id, v) in &report.videos {
                println!("{id}: {} frames, {} pass, keyframes {:?}, {} pairs", v.frames, v.frames_passing_filter, v.keyframes, v.pairs);
            }
            Ok(report)
        }
        Err(e) => {
            if !existed || a.overwrite {
                for p in [output.join(MANIFEST_FILE), output.join(STATS_FILE)] {
                    let _ = fs::remove_file(p);
                }
                let _ = fs::remove_dir_all(output.join(ASSET_DIR));
            }
            Err(e.into())
        }
    }
}

pub fn make_captioner(cfg: &RunConfig, stub: bool) -> Result<Box<dyn CaptionClient>, CliError> {
    if stub {
        return Ok(Box::new(StubCaptioner));
    }
    #[cfg(feature = "http")]
    {
        use crate::caption::{HttpCaptioner, API_KEY_ENV};
        let timeout = Duration::from_secs(cfg.caption.timeout_secs);
        if let Some(endpoint) = &cfg.caption.endpoint {
            return Ok(Box::new(HttpCaptioner::new(endpoint.clone(), std::env::var(API_KEY_ENV).ok(), timeout)));
        }
        if let Some(c) = HttpCaptioner::from_env(timeout) {
            return Ok(Box::new(c));
        }
    }
    let _ = (cfg, Duration::ZERO);
    Err(CliError::Captioner(format!(
        "no endpoint configured; set {} or caption.endpoint, or pass --stub",
        crate::caption::ENDPOINT_ENV
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaptionSummary {
    pub total: usize,
    pub captioned: usize,
    pub kept: usize,
    pub failed: Vec<(String, String)>,
}

/// Captions the manifest in place. Per-pair failures are logged and listed;
/// if every request failed because the captioner could not be reached the
/// manifest is left untouched and the error is returned.
pub fn cmd_caption(
    cfg: &RunConfig,
    manifest_path: &Path,
    client: &dyn CaptionClient,
    no_overwrite: bool,
) -> Result<CaptionSummary, CliError> {
    let records = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let todo: Vec<ManifestRecord> =
        records.iter().filter(|r| !(no_overwrite && r.caption.is_some())).cloned().collect();
    let kept = records.len() - todo.len();
    let results =
        caption_records(&todo, root, client, &cfg.caption.retry, &cfg.caption.prompt, cfg.caption.max_in_flight);

    let mut ok = Vec::new();
    let mut failed = Vec::new();
    let mut unreachable = 0;
    for (rec, r) in todo.iter().zip(results) {
        match r {
            Ok(c) => ok.push(c),
            Err(e) => {
                if matches!(e, CaptionError::Unavailable { .. }) {
                    unreachable += 1;
                }
                log::warn!("{}: {e}", rec.pair_id);
                failed.push((rec.pair_id.clone(), e.to_string()));
            }
        }
    }
    if !todo.is_empty() && unreachable == todo.len() {
        return Err(CliError::Captioner(failed[0].1.clone()));
    }

    let log_path = root.join("captions.jsonl");
    let mut history = if log_path.is_file() {
        read_caption_records(&log_path).map_err(|e| input_err(&log_path, e))?
    } else {
        Vec::new()
    };
    history.extend(ok.iter().cloned());
    write_caption_records(&log_path, &history).map_err(|e| input_err(&log_path, e))?;
    let updated = attach_captions(records, &ok).map_err(|e| CliError::Internal(e.to_string()))?;
    let tmp = manifest_path.with_extension("jsonl.tmp");
    write_manifest(&tmp, &updated)?;
    fs::rename(&tmp, manifest_path).map_err(|e| input_err(manifest_path, e))?;
    Ok(CaptionSummary { total: updated.len(), captioned: ok.len(), kept, failed })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub variant: Variant,
    pub examples: usize,
    pub epochs_completed: usize,
    pub final_epoch_loss: Option<f64>,
    pub aborted_at: Option<usize>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

fn conditioner_for(cfg: &RunConfig, variant: Variant) -> Conditioner {
    let r = cfg.model.resolution as f64;
    Conditioner::toy(variant, cfg.conditioning.pose_mode, neutral_skeleton(r, r), cfg.conditioning.encoder_seed)
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<TrainSummary, CliError> {
    let mut cfg = cfg.clone();
    if let Some(v) = a.variant {
        cfg.conditioning.variant = v;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let variant = cfg.conditioning.variant;
    let schedule = cfg.diffusion.schedule().map_err(|e| CliError::Input(e.to_string()))?;
    let conditioner = conditioner_for(&cfg, variant);
    let res = cfg.model.resolution as u32;
    let fill = cfg.pipeline.fill_value;

    let examples = match a.synthetic {
        Some(n) => training_pairs(n, res, cfg.seed)
            .iter()
            .map(|p| {
                let view = PairView {
                    target: &p.target,
                    mask: &p.mask,
                    reference_crop: &p.reference_crop,
                    caption: p.pair.caption.as_deref(),
                    target_pose: &p.pair.target_pose,
                    reference_pose: &p.pair.reference_pose,
                };
                build_example(&conditioner, view, res, fill)
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => {
            let path = a.manifest.clone().unwrap_or_else(|| cfg.paths.manifest_path());
            let records = read_manifest(&path)?;
            let root = path.parent().unwrap_or(Path::new("."));
            validate_manifest(&records, root)?;
            examples_from_manifest(&conditioner, &records, root, res, fill).map_err(|e| CliError::Input(e.to_string()))?
        }
    };
    if examples.is_empty() && cfg.train.epochs > 0 {
        return Err(CliError::Input("no training pairs".into()));
    }

    let dir = cfg.paths.checkpoints.clone();
    fs::create_dir_all(&dir).map_err(|e| input_err(&dir, e))?;
    let run_config = serde_json::to_value(&cfg).expect("config serializes");
    let checkpoint = |epoch: usize, m: &UNetDenoiser, pose: Option<&crate::conditioning::ProjectionLayer>| Checkpoint {
        epoch,
        variant,
        pose_mode: cfg.conditioning.pose_mode,
        denoiser: cfg.model.clone(),
        schedule: schedule.clone(),
        run_config: run_config.clone(),
        params: m.params().clone(),
        image_projection: conditioner.image_projection.clone(),
        pose_projection: pose.cloned().unwrap_or_else(|| conditioner.pose_projection.clone()),
    };

    let mut model = UNetDenoiser::new(cfg.model.clone(), &schedule, cfg.seed);
    let mut pose = conditioner.pose_projection.clone();
    let train_pose = variant.uses_pose();
    let mut trainer = Trainer::new(TrainSettings { ..cfg.train.clone() }, cfg.seed);
    let outcome = {
        let mut hook = |epoch: usize, m: &UNetDenoiser, p: Option<&crate::conditioning::ProjectionLayer>| {
            save_checkpoint(&checkpoint(epoch, m, p), &dir.join(format!("epoch_{epoch:04}.ckpt")))
        };
        trainer.run(&mut model, train_pose.then_some(&mut pose), &examples, &schedule, &mut hook)?
    };

    let final_path = a.out.clone().unwrap_or_else(|| dir.join("final.ckpt"));
    if let Some(parent) = final_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| input_err(parent, e))?;
    }
    save_checkpoint(&checkpoint(outcome.epochs_completed, &model, Some(&pose)), &final_path)?;
    let loss_log = dir.join("loss.csv");
    fs::write(&loss_log, outcome.to_csv()).map_err(|e| input_err(&loss_log, e))?;
    let summary = TrainSummary {
        seed: cfg.seed,
        variant,
        examples: examples.len(),
        epochs_completed: outcome.epochs_completed,
        final_epoch_loss: outcome.final_epoch_loss(),
        aborted_at: outcome.aborted_at,
        checkpoint: final_path,
        loss_log,
    };
    let summary_path = dir.join("train_summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")
        .map_err(|e| input_err(&summary_path, e))?;
    println!(
        "{variant}: {} examples, {} epochs, final epoch loss {}",
        summary.examples,
        summary.epochs_completed,
        summary.final_epoch_loss.map_or("-".into(), |l| format!("{l:.5}"))
    );
    if let Some(step) = outcome.aborted_at {
        return Err(CliError::NonFiniteLoss { step });
    }
    Ok(summary)
}

fn read_pose_file(path: &Path) -> Result<PoseSkeleton, CliError> {
    let text = fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| input_err(path, e))
}

fn open_rgb(path: &Path) -> Result<RgbImage, CliError> {
    Ok(image::open(path).map_err(|e| input_err(path, e))?.to_rgb8())
}

/// Output paths of an edit: the image and, with `--overlay`, the skeleton view.
#[derive(Debug, Clone)]
pub struct EditOutput {
    pub image: PathBuf,
    pub overlay: Option<PathBuf>,
}

pub fn cmd_edit(cfg: &RunConfig, a: &EditArgs) -> Result<EditOutput, CliError> {
    let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoints.join("final.ckpt"));
    let ckpt = load_checkpoint(&ckpt_path)?;
    let variant = ckpt.variant;
    if a.caption.is_some() && !variant.uses_text() {
        return Err(CliError::Modality(format!("checkpoint variant {variant} has no text slot; drop --caption")));
    }
    if a.target_pose.is_some() && !variant.uses_pose() {
        return Err(CliError::Modality(format!("checkpoint variant {variant} has no pose slot; drop --target-pose")));
    }
    if a.target_pose.is_none() && variant.uses_pose() {
        return Err(CliError::Modality(format!("checkpoint variant {variant} needs --target-pose")));
    }

    let scene = open_rgb(&a.scene)?;
    let reference = open_rgb(&a.reference)?;
    let (w, h) = scene.dimensions();
    if !a.mask_bbox.is_valid_for(w, h) {
        return Err(CliError::Input(format!("mask bbox {:?} outside the {w}x{h} scene", a.mask_bbox)));
    }
    let target_pose = a.target_pose.as_deref().map(read_pose_file).transpose()?;
    let reference_pose = a.reference_pose.as_deref().map(read_pose_file).transpose()?;

    let run_cfg: RunConfig = serde_json::from_value(ckpt.run_config.clone()).unwrap_or_else(|_| cfg.clone());
    let res = ckpt.denoiser.resolution;
    let mut conditioner = Conditioner::toy(
        variant,
        ckpt.pose_mode,
        neutral_skeleton(res as f64, res as f64),
        run_cfg.conditioning.encoder_seed,
    );
    conditioner.image_projection = ckpt.image_projection.clone();
    conditioner.pose_projection = ckpt.pose_projection.clone();
    let model = UNetDenoiser::from_params(ckpt.denoiser.clone(), &ckpt.schedule, ckpt.params.clone())
        .map_err(|e| CliError::Input(format!("{}: {e}", ckpt_path.display())))?;

    let (sx, sy) = (res as f64 / w as f64, res as f64 / h as f64);
    let model_target = target_pose.as_ref().map(|p| scale_pose(p, sx, sy));
    let model_reference = reference_pose.as_ref().map(|p| scale_pose(p, sx, sy));
    let rr = cfg.pipeline.reference_resolution;
    let reference_crop = imageops::resize(&reference, rr, rr, FilterType::Triangle);
    let bundle =
        conditioner.bundle(&reference_crop, a.caption.as_deref(), model_target.as_ref(), model_reference.as_ref())?;

    let b = a.mask_bbox;
    let mask = GrayImage::from_fn(w, h, |x, y| Luma([if b.contains(x, y) { 255 } else { 0 }]));
    let fill = Rgb([cfg.pipeline.fill_value; 3]);
    let masked = RgbImage::from_fn(w, h, |x, y| if b.contains(x, y) { fill } else { *scene.get_pixel(x, y) });
    let mut options = cfg.diffusion.sampling.clone();
    if let Some(g) = a.guidance {
        options.guidance_weight = g;
    }
    if let Some(s) = a.steps {
        options.steps = s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = sample_edit(&model, res, &masked, &mask, &bundle, &ckpt.schedule, &options, &mut rng)?;

    let out_path = a.out.clone().unwrap_or_else(|| cfg.paths.reports.join("edit.png"));
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| input_err(parent, e))?;
    }
    out.save(&out_path).map_err(|e| input_err(&out_path, e))?;
    let overlay = if a.overlay {
        let skeleton = target_pose.unwrap_or_else(PoseSkeleton::zeros);
        let p = out_path.with_file_name(format!(
            "{}_overlay.png",
            out_path.file_stem().and_then(|s| s.to_str()).unwrap_or("edit")
        ));
        crate::eval::pose_overlay(&out, &skeleton).save(&p).map_err(|e| input_err(&p, e))?;
        Some(p)
    } else {
        None
    };
    println!("wrote {}", out_path.display());
    Ok(EditOutput { image: out_path, overlay })
}

fn parse_generated(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, dir)) if !label.is_empty() => (label.to_string(), PathBuf::from(dir)),
        _ => {
            let dir = PathBuf::from(spec);
            let label = dir.file_name().and_then(|n| n.to_str()).unwrap_or(spec).to_string();
            (label, dir)
        }
    }
}

pub fn read_ratings_file(path: &Path) -> Result<Vec<RatingRecord>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Ratings(format!("{}: {e}", path.display())))?;
    read_ratings(file).map_err(|e| CliError::Ratings(format!("{}: {e}", path.display())))
}

pub fn write_ratings_csv(path: &Path, records: &[RatingRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| input_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| input_err(path, e))?;
    }
    w.flush().map_err(|e| input_err(path, e))
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<EvalReport, CliError> {
    let ratings = a.ratings.as_deref().map(read_ratings_file).transpose()?;
    let generated: Vec<(String, PathBuf)> = a.generated.iter().map(|s| parse_generated(s)).collect();
    let e = &cfg.eval;
    let extractor = RandomProjectionExtractor::new(e.feature_resolution, e.feature_dim, e.feature_seed);
    let report = match &a.reference {
        Some(reference) => {
            evaluate_directories(reference, &generated, &extractor, e.pckh_alpha, ratings.as_deref(), cfg.seed)
                .map_err(|err| CliError::Input(err.to_string()))?
        }
        None if generated.is_empty() => EvalReport {
            seed: cfg.seed,
            feature_dim: e.feature_dim,
            reference_images: 0,
            configs: Default::default(),
            ratings: ratings.as_deref().map(crate::eval::aggregate_ratings),
            warnings: Vec::new(),
        },
        None => return Err(CliError::Input("--generated needs --reference".into())),
    };

    let out = a.out.clone().unwrap_or_else(|| cfg.paths.reports.join("eval.json"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| input_err(parent, e))?;
    }
    fs::write(&out, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")
        .map_err(|e| input_err(&out, e))?;
    for (label, m) in &report.configs {
        let pckh = m.pckh.map_or("n/a".to_string(), |p| format!("{:.4} ({} skipped)", p.mean, p.skipped));
        println!("{label}: FID {:.4}, PCKh {pckh}, {} images", m.fid, m.images);
    }
    if let Some(t) = &report.ratings {
        print!("{}", t.to_markdown());
    }
    println!("wrote {}", out.display());
    Ok(report)
}
