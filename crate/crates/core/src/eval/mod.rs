//! Metrics over generated sets: FID, PCKh, and rater-study aggregation.

mod features;
mod fid;
mod overlay;
mod ratings;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::pose::{pckh, PoseError, PoseSkeleton};

pub use features::{FeatureExtractor, RandomProjectionExtractor};
pub use fid::{fid, fid_from_stats, FeatureSet, GaussianStats, EIGEN_CLAMP_TOLERANCE, SQRT_RESIDUAL_TOLERANCE};
pub use overlay::{limb_color, pose_overlay, MARKER_RADIUS};
pub use ratings::{
    aggregate_ratings, read_ratings, Percentage, Question, RatingCell, RatingRecord, RatingTable, RatingsError,
    RATINGS_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("at least 2 samples are needed, found {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error("{path}: {message}")]
    Input { path: String, message: String },
}

impl EvalError {
    fn input(path: &Path, message: impl ToString) -> Self {
        EvalError::Input { path: path.display().to_string(), message: message.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckhSummary {
    pub alpha: f64,
    pub mean: f64,
    pub evaluated: usize,
    /// Pairs whose ground truth lacks the head or shoulder joints.
    pub skipped: usize,
}

/// Mean per-pair PCKh over aligned lists. Pairs whose ground truth has no
/// usable head-to-shoulder length are skipped and counted.
pub fn pckh_over_set(
    predicted: &[PoseSkeleton],
    ground_truth: &[PoseSkeleton],
    alpha: f64,
) -> Result<PckhSummary, EvalError> {
    if predicted.len() != ground_truth.len() {
        return Err(EvalError::DimensionMismatch { left: predicted.len(), right: ground_truth.len() });
    }
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for (p, g) in predicted.iter().zip(ground_truth) {
        match pckh(p, g, alpha) {
            Ok(v) => {
                total += v;
                evaluated += 1;
            }
            Err(PoseError::MissingJoints(_)) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if evaluated == 0 {
        return Err(EvalError::EmptyInput);
    }
    Ok(PckhSummary { alpha, mean: total / evaluated as f64, evaluated, skipped })
}

/// Pose annotations of a directory of images, one JSON object per line.
pub const IMAGE_POSE_FILE: &str = "image_poses.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePoseRecord {
    pub image: String,
    pub keypoints: PoseSkeleton,
}

pub fn read_image_poses(path: &Path) -> Result<BTreeMap<String, PoseSkeleton>, EvalError> {
    let file = fs::File::open(path).map_err(|e| EvalError::input(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EvalError::input(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ImagePoseRecord =
            serde_json::from_str(&line).map_err(|e| EvalError::input(path, format!("line {}: {e}", i + 1)))?;
        out.insert(r.image, r.keypoints);
    }
    Ok(out)
}

/// Sorted `.png`/`.jpg` file names of a directory with their images.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, RgbImage)>, EvalError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| EvalError::input(dir, e))? {
        let path = entry.map_err(|e| EvalError::input(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            names.push(path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string());
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let p = dir.join(&n);
            let img = image::open(&p).map_err(|e| EvalError::input(&p, e))?.to_rgb8();
            Ok((n, img))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigMetrics {
    pub images: usize,
    pub fid: f64,
    pub pckh: Option<PckhSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub feature_dim: usize,
    pub reference_images: usize,
    pub configs: BTreeMap<String, ConfigMetrics>,
    pub ratings: Option<RatingTable>,
    pub warnings: Vec<String>,
}

/// Metrics of each labelled generated directory against `reference`.
/// PCKh needs [`IMAGE_POSE_FILE`] in both directories; without it the
/// metric is left out and a warning recorded.
pub fn evaluate_directories(
    reference: &Path,
    generated: &[(String, PathBuf)],
    extractor: &dyn FeatureExtractor,
    alpha: f64,
    ratings: Option<&[RatingRecord]>,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let refs = load_image_dir(reference)?;
    let ref_images: Vec<RgbImage> = refs.iter().map(|(_, i)| i.clone()).collect();
    let ref_features = extractor.extract_set(&ref_images)?;
    let ref_poses_path = reference.join(IMAGE_POSE_FILE);
    let ref_poses = ref_poses_path.is_file().then(|| read_image_poses(&ref_poses_path)).transpose()?;
    let mut warnings = Vec::new();
    if ref_poses.is_none() {
        warnings.push(format!("{} missing; PCKh omitted", ref_poses_path.display()));
    }

    let mut configs = BTreeMap::new();
    for (label, dir) in generated {
        let gen = load_image_dir(dir)?;
        let images: Vec<RgbImage> = gen.iter().map(|(_, i)| i.clone()).collect();
        let fid = fid(&extractor.extract_set(&images)?, &ref_features)?;
        let pose_path = dir.join(IMAGE_POSE_FILE);
        let pckh = match (&ref_poses, pose_path.is_file()) {
            (Some(truth), true) => {
                let predicted = read_image_poses(&pose_path)?;
                let (p, g): (Vec<_>, Vec<_>) =
                    predicted.iter().filter_map(|(name, p)| truth.get(name).map(|g| (*p, *g))).unzip();
                match pckh_over_set(&p, &g, alpha) {
                    Ok(s) => Some(s),
                    Err(EvalError::EmptyInput) => {
                        warnings.push(format!("{label}: no evaluable pose pairs; PCKh omitted"));
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
            (Some(_), false) => {
                warnings.push(format!("{} missing; PCKh omitted for {label}", pose_path.display()));
                None
            }
            (None, _) => None,
        };
        configs.insert(label.clone(), ConfigMetrics { images: images.len(), fid, pckh });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(EvalReport {
        seed,
        feature_dim: extractor.dim(),
        reference_images: refs.len(),
        configs,
        ratings: ratings.map(aggregate_ratings),
        warnings,
    })
}
