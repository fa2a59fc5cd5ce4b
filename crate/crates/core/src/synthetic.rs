//! Procedural stick-figure scenes: scripted video fixtures with a known
//! keyframe sequence, and ready-made training pairs.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::Variant;
use crate::dataset::{pose_bbox, render_pair_assets, FramePair, PipelineSettings};
use crate::eval::{Question, RatingRecord};
use crate::pose::{joint, write_pose_jsonl, Keypoint, PoseRecord, PoseSkeleton, COCO_LIMBS, NUM_KEYPOINTS};

/// Vertical colour gradient plus a uniform brightness offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backdrop {
    pub top: [u8; 3],
    pub bottom: [u8; 3],
    pub brightness: i32,
}

impl Backdrop {
    pub fn render(&self, width: u32, height: u32) -> RgbImage {
        RgbImage::from_fn(width, height, |_, y| {
            let t = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
            Rgb(std::array::from_fn(|c| {
                let v = self.top[c] as f64 + (self.bottom[c] as f64 - self.top[c] as f64) * t;
                (v.round() as i32 + self.brightness).clamp(0, 255) as u8
            }))
        })
    }
}

/// Parameters of a front-facing figure whose head top is at `(cx, top)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FigureSpec {
    pub cx: f64,
    pub top: f64,
    pub height: f64,
    /// Arm angle from hanging straight down, radians; `PI` is straight up.
    pub left_arm: f64,
    pub right_arm: f64,
    /// Horizontal knee/ankle offset as a fraction of height.
    pub stance: f64,
}

impl FigureSpec {
    pub fn standing(cx: f64, top: f64, height: f64) -> Self {
        Self { cx, top, height, left_arm: 0.15, right_arm: 0.15, stance: 0.02 }
    }

    pub fn skeleton(&self) -> PoseSkeleton {
        let h = self.height;
        let at = |dx: f64, dy: f64| (self.cx + dx * h, self.top + dy * h);
        let mut p = [(0.0, 0.0); NUM_KEYPOINTS];
        p[joint::NOSE] = at(0.0, 0.08);
        p[joint::LEFT_EYE] = at(0.03, 0.06);
        p[joint::RIGHT_EYE] = at(-0.03, 0.06);
        p[joint::LEFT_EAR] = at(0.06, 0.07);
        p[joint::RIGHT_EAR] = at(-0.06, 0.07);
        p[joint::LEFT_SHOULDER] = at(0.14, 0.2);
        p[joint::RIGHT_SHOULDER] = at(-0.14, 0.2);
        for (side, shoulder, elbow, wrist, angle) in [
            (1.0, joint::LEFT_SHOULDER, joint::LEFT_ELBOW, joint::LEFT_WRIST, self.left_arm),
            (-1.0, joint::RIGHT_SHOULDER, joint::RIGHT_ELBOW, joint::RIGHT_WRIST, self.right_arm),
        ] {
            let (sx, sy) = p[shoulder];
            let (dx, dy) = (side * angle.sin(), angle.cos());
            p[elbow] = (sx + dx * 0.17 * h, sy + dy * 0.17 * h);
            p[wrist] = (sx + dx * 0.33 * h, sy + dy * 0.33 * h);
        }
        p[joint::LEFT_HIP] = at(0.08, 0.55);
        p[joint::RIGHT_HIP] = at(-0.08, 0.55);
        p[joint::LEFT_KNEE] = at(0.08 + self.stance, 0.77);
        p[joint::RIGHT_KNEE] = at(-0.08 - self.stance, 0.77);
        p[joint::LEFT_ANKLE] = at(0.08 + 2.0 * self.stance, 0.99);
        p[joint::RIGHT_ANKLE] = at(-0.08 - 2.0 * self.stance, 0.99);
        PoseSkeleton::new(p.map(|(x, y)| Keypoint::new(x, y, 1.0))).expect("figure joints are finite")
    }
}

fn stamp(img: &mut RgbImage, x: f64, y: f64, radius: f64, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let r = radius.ceil() as i64;
    let (cx, cy) = (x.floor() as i64, y.floor() as i64);
    for py in cy - r..=cy + r {
        for px in cx - r..=cx + r {
            if px < 0 || py < 0 || px >= w || py >= h {
                continue;
            }
            let (dx, dy) = (px as f64 + 0.5 - x, py as f64 + 0.5 - y);
            if dx * dx + dy * dy <= radius * radius {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Draws limbs as thick segments and the head as a disc around the nose.
pub fn draw_figure(img: &mut RgbImage, pose: &PoseSkeleton, color: [u8; 3], thickness: f64) {
    let color = Rgb(color);
    let r = (thickness / 2.0).max(0.5);
    for &(a, b) in COCO_LIMBS.iter() {
        let (p, q) = (pose.keypoint(a), pose.keypoint(b));
        let steps = (p.distance(q) * 4.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            stamp(img, p.x + (q.x - p.x) * t, p.y + (q.y - p.y) * t, r, color);
        }
    }
    let nose = pose.keypoint(joint::NOSE);
    let shoulders = pose.keypoint(joint::LEFT_SHOULDER).distance(pose.keypoint(joint::RIGHT_SHOULDER));
    stamp(img, nose.x, nose.y, (shoulders * 0.3).max(r), color);
}

pub fn render_scene(width: u32, height: u32, backdrop: &Backdrop, people: &[(PoseSkeleton, [u8; 3])]) -> RgbImage {
    let mut img = backdrop.render(width, height);
    let thickness = (height as f64 / 32.0).max(1.0);
    for (pose, color) in people {
        draw_figure(&mut img, pose, *color, thickness);
    }
    img
}

/// One frame of a scripted clip.
#[derive(Debug, Clone)]
pub struct ScriptedFrame {
    pub frame_index: u64,
    pub image: RgbImage,
    pub poses: Vec<PoseSkeleton>,
}

#[derive(Debug, Clone)]
pub struct ScriptedVideo {
    pub video_id: String,
    pub frames: Vec<ScriptedFrame>,
    /// Keyframes the greedy rule must select under default settings.
    pub expected_keyframes: Vec<u64>,
}

const FIXTURE_SIZE: u32 = 64;
const FIGURE_COLOR: [u8; 3] = [230, 60, 40];
const INDOOR: Backdrop = Backdrop { top: [40, 60, 110], bottom: [160, 130, 200], brightness: 0 };
const OUTDOOR: Backdrop = Backdrop { top: [200, 40, 20], bottom: [90, 160, 60], brightness: 0 };
const SCENE_CUT: Backdrop = Backdrop { top: [0, 200, 0], bottom: [20, 255, 30], brightness: 0 };

fn dimmed(mut pose: PoseSkeleton, keep: usize) -> PoseSkeleton {
    let mut kps = *pose.keypoints();
    for kp in kps.iter_mut().skip(keep) {
        kp.confidence = 0.05;
    }
    pose = PoseSkeleton::new(kps).expect("valid keypoints");
    pose
}

/// Clip with a drifting figure. Its shoulder-to-head length is 0.12 of the
/// figure height (4.8 px), and translation moves every joint equally, so the
/// pose distance between two frames is their horizontal offset difference.
fn drifting_clip() -> ScriptedVideo {
    let offset = |i: u64| -> f64 {
        match i {
            0..=7 => 0.7 * i as f64,
            _ => 4.9 + 0.62 * (i - 7) as f64,
        }
    };
    let frames = (0..20u64)
        .map(|i| {
            let mut backdrop = Backdrop { brightness: 3 * i as i32 - 30, ..INDOOR };
            let mut spec = FigureSpec::standing(22.0 + offset(i), 12.0, 40.0);
            if i == 11 {
                // far jump into a different scene: passes the distance test,
                // fails the lower similarity bound
                backdrop = SCENE_CUT;
                spec.cx += 12.0;
            }
            let pose = spec.skeleton();
            let mut people = vec![(pose.clone(), FIGURE_COLOR)];
            let mut poses = vec![pose.clone()];
            if i == 3 {
                let other = FigureSpec::standing(50.0, 14.0, 36.0).skeleton();
                people.push((other.clone(), [20, 20, 20]));
                poses.push(other);
            }
            if i == 9 {
                poses = vec![dimmed(pose, 5)];
            }
            ScriptedFrame { frame_index: i, image: render_scene(FIXTURE_SIZE, FIXTURE_SIZE, &backdrop, &people), poses }
        })
        .collect();
    ScriptedVideo { video_id: "clip_a".into(), frames, expected_keyframes: vec![0, 7, 15] }
}

fn static_clip() -> ScriptedVideo {
    let pose = FigureSpec::standing(30.0, 10.0, 44.0).skeleton();
    let image = render_scene(FIXTURE_SIZE, FIXTURE_SIZE, &OUTDOOR, &[(pose.clone(), FIGURE_COLOR)]);
    let frames =
        (0..8).map(|i| ScriptedFrame { frame_index: i, image: image.clone(), poses: vec![pose.clone()] }).collect();
    ScriptedVideo { video_id: "clip_b".into(), frames, expected_keyframes: vec![] }
}

fn crowded_clip() -> ScriptedVideo {
    let frames = (0..6u64)
        .map(|i| {
            let a = FigureSpec::standing(18.0 + 3.0 * i as f64, 12.0, 40.0).skeleton();
            let b = FigureSpec::standing(46.0, 12.0, 40.0).skeleton();
            let backdrop = Backdrop { brightness: 4 * i as i32, ..OUTDOOR };
            let image = render_scene(FIXTURE_SIZE, FIXTURE_SIZE, &backdrop, &[(a.clone(), FIGURE_COLOR), (b.clone(), [10, 10, 200])]);
            ScriptedFrame { frame_index: i, image, poses: vec![a, b] }
        })
        .collect();
    ScriptedVideo { video_id: "clip_c".into(), frames, expected_keyframes: vec![] }
}

fn waving_clip() -> ScriptedVideo {
    let frames = (0..6u64)
        .map(|i| {
            let spec = FigureSpec { left_arm: 0.15 + 0.45 * i as f64, ..FigureSpec::standing(20.0 + 3.0 * i as f64, 10.0, 42.0) };
            let pose = spec.skeleton();
            let backdrop = Backdrop { brightness: 5 * i as i32 - 10, ..OUTDOOR };
            let image = render_scene(FIXTURE_SIZE, FIXTURE_SIZE, &backdrop, &[(pose.clone(), [250, 250, 90])]);
            ScriptedFrame { frame_index: i * 2, image, poses: vec![pose] }
        })
        .collect();
    ScriptedVideo { video_id: "clip_d".into(), frames, expected_keyframes: vec![0, 4, 8] }
}

/// The scripted fixture: one clip with known keyframes 0, 7 and 15 (plus a
/// two-person frame, a low-visibility frame and a scene cut that must all be
/// skipped), a static clip, a two-person clip and a second accepted clip.
pub fn scripted_videos() -> Vec<ScriptedVideo> {
    vec![drifting_clip(), static_clip(), crowded_clip(), waving_clip()]
}

/// Writes videos in the pipeline's input layout.
pub fn write_video_fixture(dir: &Path, videos: &[ScriptedVideo]) -> std::io::Result<()> {
    for v in videos {
        let vdir = dir.join(&v.video_id);
        fs::create_dir_all(&vdir)?;
        let mut records = Vec::new();
        for f in &v.frames {
            f.image
                .save(vdir.join(format!("frame_{:04}.png", f.frame_index)))
                .map_err(std::io::Error::other)?;
            records.extend(f.poses.iter().map(|p| PoseRecord { frame_index: f.frame_index, keypoints: p.clone() }));
        }
        let file = fs::File::create(vdir.join("poses.jsonl"))?;
        write_pose_jsonl(std::io::BufWriter::new(file), &records).map_err(std::io::Error::other)?;
    }
    Ok(())
}

/// A rendered training pair at a fixed square resolution.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub pair: FramePair,
    pub target: RgbImage,
    pub masked_target: RgbImage,
    pub mask: image::GrayImage,
    pub reference_crop: RgbImage,
}

const CAPTIONS: [&str; 4] = [
    "The person lifts the left arm up and out to the side.",
    "The person lowers both arms back down to their sides.",
    "The person raises the right arm while stepping outward.",
    "The person spreads both arms wide and widens their stance.",
];

/// `count` pairs drawn from `count / 2` two-frame clips (both orderings).
pub fn training_pairs(count: usize, resolution: u32, seed: u64) -> Vec<SyntheticPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = PipelineSettings { reference_resolution: resolution, ..Default::default() };
    let s = resolution as f64;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let backdrop = Backdrop {
            top: std::array::from_fn(|_| rng.random_range(20..120)),
            bottom: std::array::from_fn(|_| rng.random_range(120..230)),
            brightness: 0,
        };
        let color: [u8; 3] = std::array::from_fn(|_| if rng.random_bool(0.5) { rng.random_range(0..50) } else { rng.random_range(200..=255) });
        let mut spec = || FigureSpec {
            cx: s * rng.random_range(0.4..0.6),
            top: s * rng.random_range(0.15..0.3),
            height: s * rng.random_range(0.5..0.58),
            left_arm: rng.random_range(0.1..2.8),
            right_arm: rng.random_range(0.1..2.8),
            stance: rng.random_range(0.0..0.06),
        };
        let (a, b) = (spec(), spec());
        let frames = [(a.skeleton(), 0u64), (b.skeleton(), 1u64)];
        let images = frames.clone().map(|(p, _)| render_scene(resolution, resolution, &backdrop, &[(p, color)]));
        let clip = out.len() / 2;
        for (t, r) in [(0, 1), (1, 0)] {
            if out.len() == count {
                break;
            }
            let bbox = |p: &PoseSkeleton| pose_bbox(p, settings.visibility_threshold, settings.mask_dilation, resolution, resolution).expect("visible figure");
            let pair = FramePair {
                video_id: format!("synthetic_{clip:03}"),
                target_frame_index: frames[t].1,
                reference_frame_index: frames[r].1,
                mask_bbox: bbox(&frames[t].0),
                reference_crop_bbox: bbox(&frames[r].0),
                target_pose: frames[t].0.clone(),
                reference_pose: frames[r].0.clone(),
                caption: Some(CAPTIONS[(clip * 2 + t) % CAPTIONS.len()].to_string()),
            };
            let assets = render_pair_assets(&pair, &images[t], &images[r], &settings).expect("bboxes fit the frame");
            out.push(SyntheticPair {
                pair,
                target: images[t].clone(),
                masked_target: assets.masked_target,
                mask: assets.mask,
                reference_crop: assets.reference_crop,
            });
        }
    }
    out
}

/// Reference identity and control percentages per variant for scenes
/// without object interactions; `None` marks an unasked question.
pub const RATING_TABLE: [(Variant, f64, Option<f64>); 4] = [
    (Variant::Img, 61.0, None),
    (Variant::ImgText, 55.0, Some(39.0)),
    (Variant::ImgPose, 63.5, Some(57.5)),
    (Variant::ImgPoseText, 68.5, Some(51.0)),
];

/// 8 raters x 25 scenes per (config, question), so every cell has 200
/// binary answers and any multiple of 0.5% is reachable. The ones are spread
/// over raters and scenes by a fixed stride.
pub fn table_ratings_fixture() -> Vec<RatingRecord> {
    const RATERS: usize = 8;
    const SCENES: usize = 25;
    let n = RATERS * SCENES;
    let mut out = Vec::new();
    for (config, identity, control) in RATING_TABLE {
        for (question, pct) in [(Question::Identity, Some(identity)), (Question::Control, control)] {
            let Some(pct) = pct else { continue };
            let ones = (pct / 100.0 * n as f64).round() as usize;
            for k in 0..n {
                // 7 is coprime with 200, so k -> 7k mod 200 is a permutation
                let slot = (7 * k) % n;
                out.push(RatingRecord {
                    scene_id: format!("{}_scene{:02}", config.code(), slot % SCENES),
                    config,
                    question,
                    rater_id: format!("rater{}", slot / SCENES + 1),
                    score: u8::from(k < ones),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::shoulder_head_length;

    #[test]
    fn figure_geometry() {
        let p = FigureSpec::standing(22.0, 12.0, 40.0).skeleton();
        assert!((shoulder_head_length(&p).unwrap() - 4.8).abs() < 1e-9);
        let img = render_scene(64, 64, &INDOOR, &[(p, FIGURE_COLOR)]);
        assert!(img.pixels().any(|px| px.0 == FIGURE_COLOR));
    }

    #[test]
    fn training_pairs_are_deterministic() {
        let a = training_pairs(4, 32, 9);
        let b = training_pairs(4, 32, 9);
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.target, y.target);
            assert_eq!(x.pair, y.pair);
        }
        assert_eq!(a[0].pair.video_id, a[1].pair.video_id);
        assert_eq!(a[0].pair.target_pose, a[1].pair.reference_pose);
    }
}
