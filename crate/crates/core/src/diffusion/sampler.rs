use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{gaussian_like, DiffusionSchedule};
use super::{DenoiserInput, DiffusionError, LatentGrid, NoiseModel};
use crate::conditioning::{ConditioningBundle, EmbeddingMatrix};

/// `eps_u + w (eps_c - eps_u)`.
///
/// `w == 0` and `w == 1` return the corresponding branch unchanged rather
/// than going through the arithmetic, so they are bit-exact.
pub fn cfg_epsilon(
    model: &dyn NoiseModel,
    input: &DenoiserInput<'_>,
    cond_context: &EmbeddingMatrix,
    uncond_context: &EmbeddingMatrix,
    w: f64,
) -> Result<LatentGrid, DiffusionError> {
    if cond_context.shape() != uncond_context.shape() {
        return Err(DiffusionError::Shape(format!(
            "conditional context {:?} vs unconditional {:?}",
            cond_context.shape(),
            uncond_context.shape()
        )));
    }
    let with = |context| model.predict(&DenoiserInput { context, ..*input });
    if w == 0.0 {
        return Ok(with(uncond_context));
    }
    let cond = with(cond_context);
    if w == 1.0 {
        return Ok(cond);
    }
    let uncond = with(uncond_context);
    Ok(combine_guidance(&cond, &uncond, w))
}

pub fn combine_guidance(cond: &LatentGrid, uncond: &LatentGrid, w: f64) -> LatentGrid {
    uncond.zip_map(cond, |u, c| u + w * (c - u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    pub guidance_weight: f64,
    /// Number of denoising steps; clamped to `1..=T`.
    pub steps: usize,
    pub clip_x0: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { guidance_weight: 3.0, steps: 100, clip_x0: true }
    }
}

/// Fills the masked region of `masked_target` by ancestral sampling.
///
/// Inputs of any size are resized to the model resolution for generation; the
/// result is resized back and composited in 8-bit space, so pixels where
/// `mask == 0` are copied from `masked_target` unchanged.
#[allow(clippy::too_many_arguments)]
pub fn sample_edit(
    model: &dyn NoiseModel,
    resolution: usize,
    masked_target: &RgbImage,
    mask: &GrayImage,
    bundle: &ConditioningBundle,
    schedule: &DiffusionSchedule,
    options: &SampleOptions,
    rng: &mut impl Rng,
) -> Result<RgbImage, DiffusionError> {
    let (w, h) = masked_target.dimensions();
    if mask.dimensions() != (w, h) {
        return Err(DiffusionError::Shape(format!("mask {:?} vs image {:?}", mask.dimensions(), (w, h))));
    }
    if mask.pixels().all(|p| p[0] == 0) {
        return Ok(masked_target.clone());
    }
    let r = resolution as u32;
    let (small_target, small_mask) = if (w, h) == (r, r) {
        (masked_target.clone(), mask.clone())
    } else {
        (imageops::resize(masked_target, r, r, FilterType::Triangle), imageops::resize(mask, r, r, FilterType::Nearest))
    };
    let cond_target = LatentGrid::from_rgb(&small_target);
    let cond_mask = LatentGrid::from_mask(&small_mask);

    let ts = schedule.sampling_timesteps(options.steps);
    let mut x = gaussian_like(&cond_target, rng);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let input = DenoiserInput { noisy: &x, mask: &cond_mask, masked_target: &cond_target, t, context: &bundle.context };
        input.validate()?;
        let eps = cfg_epsilon(model, &input, &bundle.context, &bundle.uncond_context, options.guidance_weight)?;

        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let mut x0 = x.zip_map(&eps, |xv, e| (xv - (1.0 - ab).sqrt() * e) / ab.sqrt());
        if options.clip_x0 {
            x0 = x0.map(|v| v.clamp(-1.0, 1.0));
        }
        if t_prev == 0 {
            x = x0;
            break;
        }
        // posterior q(x_prev | x_t, x0) for a possibly strided step
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        let noise = gaussian_like(&x, rng);
        let mean = x0.zip_map(&x, |a, b| c0 * a + ct * b);
        x = mean.zip_map(&noise, |m, n| m + sigma * n);
    }
    if !x.is_finite() {
        return Err(DiffusionError::Shape("sampler produced non-finite values".into()));
    }

    let generated = x.to_rgb();
    let generated = if (w, h) == (r, r) { generated } else { imageops::resize(&generated, w, h, FilterType::Triangle) };
    Ok(composite(&generated, masked_target, mask))
}

/// `mask ? generated : target`, per pixel.
pub fn composite(generated: &RgbImage, target: &RgbImage, mask: &GrayImage) -> RgbImage {
    RgbImage::from_fn(target.width(), target.height(), |x, y| {
        if mask.get_pixel(x, y)[0] > 0 {
            *generated.get_pixel(x, y)
        } else {
            *target.get_pixel(x, y)
        }
    })
}
