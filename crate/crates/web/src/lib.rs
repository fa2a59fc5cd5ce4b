//! WebAssembly bindings for the demo page: forward noising, PCKh with a
//! skeleton overlay, and keyframe selection on a scripted clip.

use image::{Rgba, RgbImage, RgbaImage};
use poseedit::dataset::{frame_filter, select_keyframes, FrameRecord, PipelineSettings};
use poseedit::diffusion::{gaussian_like, make_schedule, q_sample, LatentGrid};
use poseedit::eval::pose_overlay;
use poseedit::pose::{pckh_count, Keypoint, PoseSkeleton, DEFAULT_VISIBILITY, NUM_KEYPOINTS};
use poseedit::synthetic::{draw_figure, render_scene, scripted_videos, Backdrop, FigureSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const SIZE: u32 = 64;
const BACKDROP: Backdrop = Backdrop { top: [40, 60, 110], bottom: [160, 130, 200], brightness: 0 };

fn rgba(img: &RgbImage) -> Vec<u8> {
    let mut out = RgbaImage::new(img.width(), img.height());
    for (x, y, p) in img.enumerate_pixels() {
        out.put_pixel(x, y, Rgba([p[0], p[1], p[2], 255]));
    }
    out.into_raw()
}

fn figure() -> PoseSkeleton {
    FigureSpec { left_arm: 2.4, ..FigureSpec::standing(32.0, 8.0, 50.0) }.skeleton()
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Number of diffusion steps in the default schedule.
#[wasm_bindgen]
pub fn timesteps() -> usize {
    100
}

#[wasm_bindgen]
pub fn alpha_bar(t: usize) -> Result<f64, JsError> {
    let s = make_schedule(timesteps(), 1e-4, 0.02).map_err(js)?;
    if t == 0 {
        return Ok(1.0);
    }
    if t > s.timesteps() {
        return Err(js(format!("t must be at most {}", s.timesteps())));
    }
    Ok(s.alpha_bar(t))
}

/// RGBA pixels of the test scene after `t` forward steps (`t = 0` is clean).
#[wasm_bindgen]
pub fn noised_scene(t: usize, seed: u64) -> Result<Vec<u8>, JsError> {
    let clean = render_scene(SIZE, SIZE, &BACKDROP, &[(figure(), [250, 220, 40])]);
    if t == 0 {
        return Ok(rgba(&clean));
    }
    let s = make_schedule(timesteps(), 1e-4, 0.02).map_err(js)?;
    if t > s.timesteps() {
        return Err(js(format!("t must be at most {}", s.timesteps())));
    }
    let x0 = LatentGrid::from_rgb(&clean);
    let eps = gaussian_like(&x0, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(rgba(&q_sample(&x0, t, &eps, &s).to_rgb()))
}

#[wasm_bindgen]
pub struct PckhView {
    pixels: Vec<u8>,
    correct: usize,
    visible: usize,
}

#[wasm_bindgen]
impl PckhView {
    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }

    pub fn correct(&self) -> usize {
        self.correct
    }

    pub fn visible(&self) -> usize {
        self.visible
    }

    pub fn score(&self) -> f64 {
        if self.visible == 0 {
            0.0
        } else {
            self.correct as f64 / self.visible as f64
        }
    }
}

/// Perturbs the ground-truth figure's joints by Gaussian noise of `jitter`
/// pixels, scores the result and draws it over the ground truth.
#[wasm_bindgen]
pub fn pckh_view(jitter: f64, alpha: f64, seed: u64) -> Result<PckhView, JsError> {
    if !(jitter >= 0.0 && alpha >= 0.0) {
        return Err(js("jitter and alpha must be non-negative"));
    }
    let truth = figure();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kps = [Keypoint::default(); NUM_KEYPOINTS];
    for (k, g) in kps.iter_mut().zip(truth.keypoints()) {
        let (u1, u2): (f64, f64) = (rng.random_range(f64::EPSILON..1.0), rng.random());
        let r = (-2.0 * u1.ln()).sqrt() * jitter;
        let a = std::f64::consts::TAU * u2;
        *k = Keypoint::new(g.x + r * a.cos(), g.y + r * a.sin(), 1.0);
    }
    let predicted = PoseSkeleton::new(kps).map_err(js)?;
    let count = pckh_count(&predicted, &truth, alpha, DEFAULT_VISIBILITY).map_err(js)?;
    let mut scene = BACKDROP.render(SIZE, SIZE);
    draw_figure(&mut scene, &truth, [90, 90, 90], 2.0);
    let shown = pose_overlay(&scene, &predicted);
    Ok(PckhView { pixels: rgba(&shown), correct: count.correct, visible: count.visible })
}

/// Frames of the scripted demo clip side by side, RGBA, `SIZE` high.
#[wasm_bindgen]
pub fn clip_strip() -> Vec<u8> {
    let clip = &scripted_videos()[0];
    let mut strip = RgbImage::new(SIZE * clip.frames.len() as u32, SIZE);
    for (i, f) in clip.frames.iter().enumerate() {
        image::imageops::replace(&mut strip, &f.image, (i as u32 * SIZE) as i64, 0);
    }
    rgba(&strip)
}

#[wasm_bindgen]
pub fn clip_length() -> usize {
    scripted_videos()[0].frames.len()
}

/// Frame indices kept by filtering and greedy keyframe selection.
#[wasm_bindgen]
pub fn keyframes(sim_min: f64, sim_max: f64, dist_factor: f64, max_keyframes: usize) -> Result<Vec<u32>, JsError> {
    let settings = PipelineSettings { sim_min, sim_max, min_pose_dist_factor: dist_factor, max_keyframes, ..Default::default() };
    settings.validate().map_err(js)?;
    let clip = &scripted_videos()[0];
    let frames: Vec<FrameRecord> = clip
        .frames
        .iter()
        .map(|f| FrameRecord {
            video_id: clip.video_id.clone(),
            frame_index: f.frame_index,
            image: f.image.clone(),
            poses: f.poses.clone(),
        })
        .filter(|f| frame_filter(f, settings.visibility_threshold, settings.majority_count))
        .collect();
    Ok(select_keyframes(&frames, &settings).into_iter().map(|i| frames[i].frame_index as u32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_view_sizes_and_endpoints() {
        let clean = noised_scene(0, 1).unwrap();
        assert_eq!(clean.len(), (SIZE * SIZE * 4) as usize);
        assert_ne!(noised_scene(50, 1).unwrap(), clean);
        assert_eq!(noised_scene(50, 1).unwrap(), noised_scene(50, 1).unwrap());
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let v = pckh_view(0.0, 0.5, 3).unwrap();
        assert_eq!(v.score(), 1.0);
        assert_eq!(v.visible(), NUM_KEYPOINTS);
        assert!(pckh_view(30.0, 0.5, 3).unwrap().score() < 1.0);
    }

    #[test]
    fn default_keyframes_match_the_script() {
        assert_eq!(keyframes(0.35, 0.98, 1.0, 5).unwrap(), vec![0, 7, 15]);
        assert_eq!(clip_strip().len(), (SIZE * SIZE * 4) as usize * clip_length());
    }
}
