//! Turns rendered pairs into [`TrainingExample`]s for a given conditioner.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};

use crate::conditioning::{ConditioningError, Conditioner, EmbeddingMatrix};
use crate::dataset::{DatasetError, ManifestRecord};
use crate::diffusion::{LatentGrid, TrainingExample};
use crate::pose::PoseSkeleton;

/// The images and annotations of one pair, at any resolution.
#[derive(Debug, Clone, Copy)]
pub struct PairView<'a> {
    pub target: &'a RgbImage,
    pub mask: &'a GrayImage,
    pub reference_crop: &'a RgbImage,
    pub caption: Option<&'a str>,
    pub target_pose: &'a PoseSkeleton,
    pub reference_pose: &'a PoseSkeleton,
}

/// Resizes to `resolution` and encodes the conditioning. The masked target
/// is rebuilt from the resized target and mask so that it agrees with the
/// target exactly outside the mask. Poses are rescaled from target-frame
/// pixels to model pixels.
pub fn build_example(
    conditioner: &Conditioner,
    pair: PairView<'_>,
    resolution: u32,
    fill_value: u8,
) -> Result<TrainingExample, ConditioningError> {
    let r = resolution;
    let (sx, sy) = (r as f64 / pair.target.width() as f64, r as f64 / pair.target.height() as f64);
    let target_pose = scale_pose(pair.target_pose, sx, sy);
    let reference_pose = scale_pose(pair.reference_pose, sx, sy);
    let target = if pair.target.dimensions() == (r, r) {
        pair.target.clone()
    } else {
        imageops::resize(pair.target, r, r, FilterType::Triangle)
    };
    let mask = if pair.mask.dimensions() == (r, r) {
        pair.mask.clone()
    } else {
        imageops::resize(pair.mask, r, r, FilterType::Nearest)
    };
    let masked = RgbImage::from_fn(r, r, |x, y| {
        if mask.get_pixel(x, y)[0] > 0 {
            image::Rgb([fill_value; 3])
        } else {
            *target.get_pixel(x, y)
        }
    });

    let image = conditioner.encode_image(pair.reference_crop)?;
    let text = conditioner.variant.uses_text().then(|| conditioner.encode_text(pair.caption)).transpose()?;
    let uncond = conditioner.unconditional_context()?;
    let prefix_rows = image.rows() + text.as_ref().map_or(0, EmbeddingMatrix::rows);
    let mut prefix_parts = vec![&image];
    if let Some(t) = &text {
        prefix_parts.push(t);
    }
    let uncond_prefix = EmbeddingMatrix::new(prefix_rows, uncond.values()[..prefix_rows * uncond.dim()].to_vec())?;
    let uses_pose = conditioner.variant.uses_pose();

    Ok(TrainingExample {
        x0: LatentGrid::from_rgb(&target),
        mask: LatentGrid::from_mask(&mask),
        masked_target: LatentGrid::from_rgb(&masked),
        context_prefix: EmbeddingMatrix::concat(&prefix_parts),
        uncond_prefix,
        pose_input: uses_pose.then(|| conditioner.pose_input(&target_pose, &reference_pose)),
        uncond_pose_input: uses_pose.then(|| conditioner.neutral_pose_input()),
    })
}

/// Multiplies every coordinate; confidences are unchanged.
pub fn scale_pose(pose: &PoseSkeleton, sx: f64, sy: f64) -> PoseSkeleton {
    pose.map_coords(|x, y| (x * sx, y * sy)).expect("scaling keeps coordinates finite")
}

#[derive(Debug, thiserror::Error)]
pub enum ExampleError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
}

fn open_rgb(path: &Path) -> Result<RgbImage, DatasetError> {
    Ok(image::open(path).map_err(|source| DatasetError::Image { path: path.display().to_string(), source })?.to_rgb8())
}

fn open_gray(path: &Path) -> Result<GrayImage, DatasetError> {
    Ok(image::open(path).map_err(|source| DatasetError::Image { path: path.display().to_string(), source })?.to_luma8())
}

/// Loads every manifest record's assets relative to `root`.
pub fn examples_from_manifest(
    conditioner: &Conditioner,
    records: &[ManifestRecord],
    root: &Path,
    resolution: u32,
    fill_value: u8,
) -> Result<Vec<TrainingExample>, ExampleError> {
    records
        .iter()
        .map(|r| {
            let target = open_rgb(&root.join(&r.target_path))?;
            let mask = open_gray(&root.join(&r.mask_path))?;
            let reference = open_rgb(&root.join(&r.reference_crop_path))?;
            let view = PairView {
                target: &target,
                mask: &mask,
                reference_crop: &reference,
                caption: r.caption.as_deref(),
                target_pose: &r.target_pose,
                reference_pose: &r.reference_pose,
            };
            Ok(build_example(conditioner, view, resolution, fill_value)?)
        })
        .collect()
}
