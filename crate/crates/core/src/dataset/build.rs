//! Directory-level pipeline: `<input>/<video_id>/{<frame>.png|jpg, poses.jsonl}`
//! in, `manifest.jsonl` plus rendered assets out.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::manifest::{manifest_stats, write_manifest, ManifestRecord, ManifestStats};
use super::{frame_filter, make_pairs, render_pair_assets, select_keyframes, DatasetError, FrameRecord, PipelineSettings};
use crate::pose::{read_pose_jsonl, PoseSkeleton};

pub const POSE_FILE: &str = "poses.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const ASSET_DIR: &str = "assets";

fn is_frame_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Trailing decimal digits of the file stem, e.g. `frame_0012` -> 12.
fn frame_index_of(p: &Path) -> Option<u64> {
    let stem = p.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect::<Vec<_>>().into_iter().rev().collect();
    digits.parse().ok()
}

/// Sorted video directory names under `input`.
pub fn scan_videos(input: &Path) -> Result<Vec<String>, DatasetError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(input).map_err(|e| DatasetError::io(input, e))? {
        let entry = entry.map_err(|e| DatasetError::io(input, e))?;
        if entry.path().is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                ids.push(name.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every frame of one video in frame-index order. Several pose lines
/// with the same `frame_index` are several detections in that frame.
pub fn load_video(input: &Path, video_id: &str) -> Result<Vec<FrameRecord>, DatasetError> {
    let dir = input.join(video_id);
    let pose_path = dir.join(POSE_FILE);
    let file = fs::File::open(&pose_path).map_err(|e| DatasetError::io(&pose_path, e))?;
    let records = read_pose_jsonl(BufReader::new(file))
        .map_err(|source| DatasetError::Pose { path: pose_path.display().to_string(), source })?;
    let mut detections: HashMap<u64, Vec<PoseSkeleton>> = HashMap::new();
    for r in records {
        detections.entry(r.frame_index).or_default().push(r.keypoints);
    }

    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| DatasetError::io(&dir, e))? {
        let path = entry.map_err(|e| DatasetError::io(&dir, e))?.path();
        if !is_frame_file(&path) {
            continue;
        }
        let idx = frame_index_of(&path)
            .ok_or_else(|| DatasetError::Invalid(format!("{}: no frame number in file name", path.display())))?;
        files.push((idx, path));
    }
    files.sort();
    if let Some(w) = files.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(DatasetError::Invalid(format!("{video_id}: frame {} appears twice", w[0].0)));
    }

    files
        .into_iter()
        .map(|(frame_index, path)| {
            let image = image::open(&path)
                .map_err(|source| DatasetError::Image { path: path.display().to_string(), source })?
                .to_rgb8();
            if image.width() == 0 || image.height() == 0 {
                return Err(DatasetError::Invalid(format!("{}: empty image", path.display())));
            }
            Ok(FrameRecord {
                video_id: video_id.to_string(),
                frame_index,
                image,
                poses: detections.remove(&frame_index).unwrap_or_default(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VideoSummary {
    pub frames: usize,
    pub frames_passing_filter: usize,
    pub keyframes: Vec<u64>,
    pub pairs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildReport {
    pub seed: u64,
    pub settings: PipelineSettings,
    pub stats: ManifestStats,
    pub videos: BTreeMap<String, VideoSummary>,
}

fn write_png(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<(), DatasetError> {
    save(path).map_err(|source| DatasetError::Image { path: path.display().to_string(), source })
}

fn process_video(
    input: &Path,
    output: &Path,
    video_id: &str,
    settings: &PipelineSettings,
) -> Result<(VideoSummary, Vec<ManifestRecord>), DatasetError> {
    let frames = load_video(input, video_id)?;
    let passing: Vec<FrameRecord> = frames
        .iter()
        .filter(|f| frame_filter(f, settings.visibility_threshold, settings.majority_count))
        .cloned()
        .collect();
    let kept = select_keyframes(&passing, settings);
    let keyframes: Vec<&FrameRecord> = kept.iter().map(|&i| &passing[i]).collect();
    let pairs = make_pairs(&keyframes, settings);
    let summary = VideoSummary {
        frames: frames.len(),
        frames_passing_filter: passing.len(),
        keyframes: keyframes.iter().map(|f| f.frame_index).collect(),
        pairs: pairs.len(),
    };
    if pairs.is_empty() {
        return Ok((summary, Vec::new()));
    }

    let rel_dir = format!("{ASSET_DIR}/{video_id}");
    let abs_dir = output.join(&rel_dir);
    fs::create_dir_all(&abs_dir).map_err(|e| DatasetError::io(&abs_dir, e))?;
    let by_index: HashMap<u64, &FrameRecord> = keyframes.iter().map(|f| (f.frame_index, *f)).collect();
    for f in &keyframes {
        let p = abs_dir.join(format!("frame_{:06}.png", f.frame_index));
        write_png(&p, |p| f.image.save(p))?;
    }

    let mut records = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let target = by_index[&pair.target_frame_index];
        let reference = by_index[&pair.reference_frame_index];
        let assets = render_pair_assets(&pair, &target.image, &reference.image, settings)?;
        let stem = format!("{:06}_{:06}", pair.target_frame_index, pair.reference_frame_index);
        let masked = format!("{rel_dir}/{stem}_masked.png");
        let mask = format!("{rel_dir}/{stem}_mask.png");
        let crop = format!("{rel_dir}/{stem}_reference.png");
        write_png(&output.join(&masked), |p| assets.masked_target.save(p))?;
        write_png(&output.join(&mask), |p| assets.mask.save(p))?;
        write_png(&output.join(&crop), |p| assets.reference_crop.save(p))?;
        records.push(ManifestRecord {
            pair_id: pair.pair_id(),
            video_id: pair.video_id,
            target_frame_index: pair.target_frame_index,
            reference_frame_index: pair.reference_frame_index,
            frame_width: target.image.width(),
            frame_height: target.image.height(),
            mask_bbox: pair.mask_bbox,
            reference_crop_bbox: pair.reference_crop_bbox,
            target_pose: pair.target_pose,
            reference_pose: pair.reference_pose,
            caption: None,
            target_path: format!("{rel_dir}/frame_{:06}.png", pair.target_frame_index),
            reference_path: format!("{rel_dir}/frame_{:06}.png", pair.reference_frame_index),
            masked_target_path: masked,
            mask_path: mask,
            reference_crop_path: crop,
        });
    }
    Ok((summary, records))
}

/// Runs the whole curation pipeline. Videos are processed on up to `jobs`
/// threads; the manifest is merged in video-id order so output is identical
/// for any `jobs`.
pub fn build_dataset(
    input: &Path,
    output: &Path,
    settings: &PipelineSettings,
    seed: u64,
    jobs: usize,
    overwrite: bool,
) -> Result<BuildReport, DatasetError> {
    settings.validate()?;
    let manifest_path = output.join(MANIFEST_FILE);
    if manifest_path.exists() && !overwrite {
        return Err(DatasetError::Invalid(format!("{} exists; pass overwrite to replace it", manifest_path.display())));
    }
    let videos = scan_videos(input)?;
    fs::create_dir_all(output).map_err(|e| DatasetError::io(output, e))?;
    let assets = output.join(ASSET_DIR);
    if assets.exists() {
        fs::remove_dir_all(&assets).map_err(|e| DatasetError::io(&assets, e))?;
    }

    let jobs = jobs.max(1).min(videos.len().max(1));
    let mut results: Vec<Option<Result<_, DatasetError>>> = (0..videos.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<usize>> = (0..jobs).map(|j| (j..videos.len()).step_by(jobs).collect()).collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|idx| {
                let videos = &videos;
                scope.spawn(move || {
                    idx.into_iter()
                        .map(|i| (i, process_video(input, output, &videos[i], settings)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("video worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    let mut all = Vec::new();
    let mut per_video = BTreeMap::new();
    for (id, r) in videos.iter().zip(results) {
        let (summary, records) = r.expect("every video processed")?;
        log::info!("{id}: {} frames, keyframes {:?}, {} pairs", summary.frames, summary.keyframes, summary.pairs);
        all.extend(records);
        per_video.insert(id.clone(), summary);
    }
    write_manifest(&manifest_path, &all)?;

    let mut stats = manifest_stats(&all);
    stats.source_videos = Some(videos.len());
    let report = BuildReport { seed, settings: settings.clone(), stats, videos: per_video };
    let stats_path = output.join(STATS_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&stats_path, json + "\n").map_err(|e| DatasetError::io(&stats_path, e))?;
    Ok(report)
}
