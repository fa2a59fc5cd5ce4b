use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BBox, DatasetError, FramePair};
use crate::pose::PoseSkeleton;

/// One line of the manifest. Field order is the serialized key order.
/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub pair_id: String,
    pub video_id: String,
    pub target_frame_index: u64,
    pub reference_frame_index: u64,
    pub frame_width: u32,
    pub frame_height: u32,
    pub mask_bbox: BBox,
    pub reference_crop_bbox: BBox,
    pub target_pose: PoseSkeleton,
    pub reference_pose: PoseSkeleton,
    pub caption: Option<String>,
    pub target_path: String,
    pub reference_path: String,
    pub masked_target_path: String,
    pub mask_path: String,
    pub reference_crop_path: String,
}

impl ManifestRecord {
    pub fn pair(&self) -> FramePair {
        FramePair {
            video_id: self.video_id.clone(),
            target_frame_index: self.target_frame_index,
            reference_frame_index: self.reference_frame_index,
            mask_bbox: self.mask_bbox,
            reference_crop_bbox: self.reference_crop_bbox,
            target_pose: self.target_pose.clone(),
            reference_pose: self.reference_pose.clone(),
            caption: self.caption.clone(),
        }
    }

    pub fn paths(&self) -> [&str; 5] {
        [&self.target_path, &self.reference_path, &self.masked_target_path, &self.mask_path, &self.reference_crop_path]
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DatasetError> {
    let file = fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DatasetError::Manifest { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("manifest records serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
    f.write_all(&buf).map_err(|e| DatasetError::io(path, e))
}

/// Checks that every referenced asset exists and bboxes fit their frames.
pub fn validate_manifest(records: &[ManifestRecord], root: &Path) -> Result<(), DatasetError> {
    for (i, r) in records.iter().enumerate() {
        let fail = |message: String| DatasetError::Manifest { line: i + 1, message };
        for p in r.paths() {
            if !root.join(p).is_file() {
                return Err(fail(format!("missing file {p}")));
            }
        }
        if !r.mask_bbox.is_valid_for(r.frame_width, r.frame_height) {
            return Err(fail(format!("mask bbox {:?} outside the frame", r.mask_bbox)));
        }
        if r.target_frame_index == r.reference_frame_index {
            return Err(fail("target and reference are the same frame".into()));
        }
    }
    Ok(())
}

/// Dataset summary in the layout of a per-dataset statistics table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    /// Input videos before curation, when known.
    pub source_videos: Option<usize>,
    pub videos: usize,
    pub frames: usize,
    pub pairs: usize,
    pub captions: usize,
    pub mean_caption_length: f64,
}

pub fn manifest_stats(records: &[ManifestRecord]) -> ManifestStats {
    let videos: BTreeSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    let frames: BTreeSet<(&str, u64)> = records
        .iter()
        .flat_map(|r| [(r.video_id.as_str(), r.target_frame_index), (r.video_id.as_str(), r.reference_frame_index)])
        .collect();
    let lengths: Vec<usize> = records.iter().filter_map(|r| r.caption.as_ref()).map(|c| c.chars().count()).collect();
    let mean = if lengths.is_empty() { 0.0 } else { lengths.iter().sum::<usize>() as f64 / lengths.len() as f64 };
    ManifestStats {
        source_videos: None,
        videos: videos.len(),
        frames: frames.len(),
        pairs: records.len(),
        captions: lengths.len(),
        mean_caption_length: mean,
    }
}

impl ManifestStats {
    /// Markdown table row set.
    pub fn to_table(&self, dataset: &str) -> String {
        let orig = self.source_videos.map_or_else(|| "-".to_string(), |v| v.to_string());
        format!(
            "| Dataset | Orig Videos | Videos | Frames | Pairs | Captions | Caption Length |\n\
             |---|---|---|---|---|---|---|\n\
             | {dataset} | {orig} | {} | {} | {} | {} | {:.1} |\n",
            self.videos, self.frames, self.pairs, self.captions, self.mean_caption_length
        )
    }
}
