//! Video-to-pair curation: frame filtering, keyframe sampling, pair
//! construction, asset rendering and the JSONL manifest.

pub mod build;
mod manifest;

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{
    pose_distance, shoulder_head_length_with, visible_joint_count, PoseError, PoseSkeleton, DEFAULT_MAJORITY,
    DEFAULT_VISIBILITY,
};

pub use build::{build_dataset, load_video, scan_videos, BuildReport, VideoSummary, ASSET_DIR, MANIFEST_FILE, POSE_FILE, STATS_FILE};
pub use manifest::{
    manifest_stats, read_manifest, validate_manifest, write_manifest, ManifestRecord, ManifestStats,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error("{path}: {source}")]
    Pose { path: String, source: PoseError },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl DatasetError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<[u32; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [u32; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    /// Non-empty and inside a `width x height` image.
    pub fn is_valid_for(&self, width: u32, height: u32) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }
}

/// One decoded frame with every person detected in it.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: u64,
    pub image: RgbImage,
    pub poses: Vec<PoseSkeleton>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePair {
    pub video_id: String,
    pub target_frame_index: u64,
    pub reference_frame_index: u64,
    pub mask_bbox: BBox,
    pub reference_crop_bbox: BBox,
    pub target_pose: PoseSkeleton,
    pub reference_pose: PoseSkeleton,
    pub caption: Option<String>,
}

impl FramePair {
    pub fn pair_id(&self) -> String {
        format!("{}/{:06}-{:06}", self.video_id, self.target_frame_index, self.reference_frame_index)
    }
}

/// Curation thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSettings {
    pub visibility_threshold: f64,
    pub majority_count: usize,
    /// Keyframe spacing in units of the last keyframe's shoulder-to-head length.
    pub min_pose_dist_factor: f64,
    pub sim_min: f64,
    pub sim_max: f64,
    pub max_keyframes: usize,
    pub histogram_bins: usize,
    /// Padding on each side, as a fraction of the pose bbox diagonal.
    pub mask_dilation: f64,
    pub fill_value: u8,
    /// Side of the square reference crop.
    pub reference_resolution: u32,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            visibility_threshold: DEFAULT_VISIBILITY,
            majority_count: DEFAULT_MAJORITY,
            min_pose_dist_factor: 1.0,
            sim_min: 0.35,
            sim_max: 0.98,
            max_keyframes: 5,
            histogram_bins: 64,
            mask_dilation: 0.1,
            fill_value: 128,
            reference_resolution: 32,
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Invalid(m.into()));
        if !(0.0..=1.0).contains(&self.visibility_threshold) {
            return bad("visibility_threshold must be in [0, 1]");
        }
        if !(0.0 <= self.sim_min && self.sim_min <= self.sim_max && self.sim_max <= 1.0) {
            return bad("need 0 <= sim_min <= sim_max <= 1");
        }
        if self.max_keyframes < 2 {
            return bad("max_keyframes must be at least 2");
        }
        if self.histogram_bins == 0 || self.histogram_bins > 256 {
            return bad("histogram_bins must be in 1..=256");
        }
        if self.mask_dilation < 0.0 || self.min_pose_dist_factor < 0.0 {
            return bad("dilation and distance factor must be non-negative");
        }
        if self.reference_resolution == 0 {
            return bad("reference_resolution must be positive");
        }
        Ok(())
    }
}

/// Exactly one person, with at least `majority_count` visible joints.
pub fn frame_filter(record: &FrameRecord, visibility_threshold: f64, majority_count: usize) -> bool {
    match record.poses.as_slice() {
        [only] => visible_joint_count(only, visibility_threshold) >= majority_count,
        _ => false,
    }
}

fn channel_histograms(image: &RgbImage, bins: usize) -> [Vec<f64>; 3] {
    let mut h = [vec![0.0; bins], vec![0.0; bins], vec![0.0; bins]];
    for p in image.pixels() {
        for c in 0..3 {
            h[c][p[c] as usize * bins / 256] += 1.0;
        }
    }
    let n = (image.width() * image.height()) as f64;
    for ch in &mut h {
        ch.iter_mut().for_each(|v| *v /= n);
    }
    h
}

/// Mean over RGB of the intersection of normalised 64-bin histograms.
pub fn histogram_similarity(a: &RgbImage, b: &RgbImage) -> f64 {
    histogram_similarity_bins(a, b, 64)
}

pub fn histogram_similarity_bins(a: &RgbImage, b: &RgbImage, bins: usize) -> f64 {
    assert!(a.width() * a.height() > 0 && b.width() * b.height() > 0, "empty image");
    let (ha, hb) = (channel_histograms(a, bins), channel_histograms(b, bins));
    let total: f64 = ha
        .iter()
        .zip(&hb)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p.min(*q)).sum::<f64>())
        .sum();
    (total / 3.0).clamp(0.0, 1.0)
}

/// Greedy forward scan; returns indices into `frames` of the kept keyframes,
/// or nothing when fewer than two survive.
///
/// Frames whose shoulder-to-head length is undefined never become keyframes,
/// since the spacing threshold could not be measured from them.
pub fn select_keyframes(frames: &[FrameRecord], settings: &PipelineSettings) -> Vec<usize> {
    let thr = settings.visibility_threshold;
    let pose = |f: &FrameRecord| f.poses.first().cloned();
    let mut kept: Vec<usize> = Vec::new();
    let mut last_len = 0.0;
    for (i, frame) in frames.iter().enumerate() {
        if kept.len() == settings.max_keyframes {
            break;
        }
        let Some(p) = pose(frame) else { continue };
        let Ok(len) = shoulder_head_length_with(&p, thr) else { continue };
        let accept = match kept.last() {
            None => true,
            Some(&j) => {
                let last = &frames[j];
                let far = pose_distance(&p, &last.poses[0], thr)
                    .map(|d| d >= settings.min_pose_dist_factor * last_len)
                    .unwrap_or(false);
                far && {
                    let s = histogram_similarity_bins(&frame.image, &last.image, settings.histogram_bins);
                    settings.sim_min <= s && s <= settings.sim_max
                }
            }
        };
        if accept {
            kept.push(i);
            last_len = len;
        }
    }
    if kept.len() < 2 {
        kept.clear();
    }
    kept
}

/// Visible-joint bounding box padded by `dilation` times its diagonal on
/// every side, rounded outwards and clamped to the image.
pub fn pose_bbox(pose: &PoseSkeleton, threshold: f64, dilation: f64, width: u32, height: u32) -> Option<BBox> {
    let (minx, miny, maxx, maxy) = pose.visible_bounds(threshold)?;
    let pad = dilation * (maxx - minx).hypot(maxy - miny);
    let clamp = |v: f64, hi: u32| v.max(0.0).min(hi as f64) as u32;
    let x0 = clamp((minx - pad).floor(), width - 1);
    let y0 = clamp((miny - pad).floor(), height - 1);
    let x1 = clamp((maxx + pad).ceil(), width).max(x0 + 1);
    let y1 = clamp((maxy + pad).ceil(), height).max(y0 + 1);
    Some(BBox { x0, y0, x1, y1 })
}

/// All ordered `(target, reference)` pairs of distinct keyframes.
pub fn make_pairs(keyframes: &[&FrameRecord], settings: &PipelineSettings) -> Vec<FramePair> {
    let mut pairs = Vec::new();
    for t in keyframes {
        for r in keyframes {
            if t.frame_index == r.frame_index {
                continue;
            }
            let (tp, rp) = (&t.poses[0], &r.poses[0]);
            let bbox = |f: &FrameRecord, p| {
                pose_bbox(p, settings.visibility_threshold, settings.mask_dilation, f.image.width(), f.image.height())
                    .expect("keyframes have visible joints")
            };
            pairs.push(FramePair {
                video_id: t.video_id.clone(),
                target_frame_index: t.frame_index,
                reference_frame_index: r.frame_index,
                mask_bbox: bbox(t, tp),
                reference_crop_bbox: bbox(r, rp),
                target_pose: tp.clone(),
                reference_pose: rp.clone(),
                caption: None,
            });
        }
    }
    pairs
}

/// Images derived from one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAssets {
    pub masked_target: RgbImage,
    /// 255 inside the mask bbox, 0 outside.
    pub mask: GrayImage,
    pub reference_crop: RgbImage,
}

pub fn mask_image(width: u32, height: u32, bbox: BBox) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| Luma([if bbox.contains(x, y) { 255 } else { 0 }]))
}

pub fn render_pair_assets(
    pair: &FramePair,
    target: &RgbImage,
    reference: &RgbImage,
    settings: &PipelineSettings,
) -> Result<PairAssets, DatasetError> {
    let (w, h) = target.dimensions();
    if !pair.mask_bbox.is_valid_for(w, h) {
        return Err(DatasetError::Invalid(format!("mask bbox {:?} outside {w}x{h}", pair.mask_bbox)));
    }
    let (rw, rh) = reference.dimensions();
    let rb = pair.reference_crop_bbox;
    if !rb.is_valid_for(rw, rh) {
        return Err(DatasetError::Invalid(format!("reference bbox {rb:?} outside {rw}x{rh}")));
    }
    let mask = mask_image(w, h, pair.mask_bbox);
    let fill = Rgb([settings.fill_value; 3]);
    let masked_target = RgbImage::from_fn(w, h, |x, y| {
        if pair.mask_bbox.contains(x, y) {
            fill
        } else {
            *target.get_pixel(x, y)
        }
    });
    let crop = imageops::crop_imm(reference, rb.x0, rb.y0, rb.width(), rb.height()).to_image();
    let side = settings.reference_resolution;
    let reference_crop = imageops::resize(&crop, side, side, FilterType::Triangle);
    Ok(PairAssets { masked_target, mask, reference_crop })
}
