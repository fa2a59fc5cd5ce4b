use image::{Rgb, RgbImage};

use crate::pose::{PoseSkeleton, COCO_LIMBS, DEFAULT_VISIBILITY};

pub const MARKER_RADIUS: f64 = 2.0;
pub const LIMB_RADIUS: f64 = 0.75;
pub const MARKER_COLOR: [u8; 3] = [255, 255, 255];

const LIMB_COLORS: [[u8; 3]; 16] = [
    [255, 0, 0],
    [255, 85, 0],
    [255, 170, 0],
    [255, 255, 0],
    [170, 255, 0],
    [85, 255, 0],
    [0, 255, 0],
    [0, 255, 85],
    [0, 255, 170],
    [0, 255, 255],
    [0, 170, 255],
    [0, 85, 255],
    [0, 0, 255],
    [85, 0, 255],
    [170, 0, 255],
    [255, 0, 255],
];

/// Colour of limb `i` in [`COCO_LIMBS`] order.
pub fn limb_color(i: usize) -> [u8; 3] {
    LIMB_COLORS[i % LIMB_COLORS.len()]
}

fn disc(img: &mut RgbImage, x: f64, y: f64, radius: f64, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let r = radius.ceil() as i64 + 1;
    let (cx, cy) = (x.floor() as i64, y.floor() as i64);
    for py in (cy - r).max(0)..=(cy + r).min(h - 1) {
        for px in (cx - r).max(0)..=(cx + r).min(w - 1) {
            let (dx, dy) = (px as f64 + 0.5 - x, py as f64 + 0.5 - y);
            if dx * dx + dy * dy <= radius * radius {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Draws visible limbs, then visible keypoints, over a copy of `image`.
/// Coordinates are clamped into the image.
pub fn pose_overlay(image: &RgbImage, skeleton: &PoseSkeleton) -> RgbImage {
    let mut out = image.clone();
    if out.width() == 0 || out.height() == 0 {
        return out;
    }
    let (w, h) = (out.width() as f64, out.height() as f64);
    let clamp = |x: f64, y: f64| (x.clamp(0.0, w - 1e-9), y.clamp(0.0, h - 1e-9));
    let kps = skeleton.keypoints();
    for (i, &(a, b)) in COCO_LIMBS.iter().enumerate() {
        if !kps[a].is_visible(DEFAULT_VISIBILITY) || !kps[b].is_visible(DEFAULT_VISIBILITY) {
            continue;
        }
        let (ax, ay) = clamp(kps[a].x, kps[a].y);
        let (bx, by) = clamp(kps[b].x, kps[b].y);
        let steps = ((bx - ax).hypot(by - ay) * 2.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            disc(&mut out, ax + (bx - ax) * t, ay + (by - ay) * t, LIMB_RADIUS, Rgb(limb_color(i)));
        }
    }
    for kp in kps.iter().filter(|k| k.is_visible(DEFAULT_VISIBILITY)) {
        let (x, y) = clamp(kp.x, kp.y);
        disc(&mut out, x, y, MARKER_RADIUS, Rgb(MARKER_COLOR));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{Keypoint, NUM_KEYPOINTS};

    fn gray() -> RgbImage {
        RgbImage::from_pixel(32, 32, Rgb([40, 40, 40]))
    }

    #[test]
    fn invisible_skeleton_leaves_image_unchanged() {
        assert_eq!(pose_overlay(&gray(), &PoseSkeleton::zeros()), gray());
    }

    #[test]
    fn single_keypoint_is_local() {
        let mut kps = [Keypoint::default(); NUM_KEYPOINTS];
        kps[0] = Keypoint::new(10.0, 10.0, 1.0);
        let out = pose_overlay(&gray(), &PoseSkeleton::new(kps).unwrap());
        let mut changed = 0;
        for (x, y, px) in out.enumerate_pixels() {
            if px != gray().get_pixel(x, y) {
                changed += 1;
                assert!((x as f64 + 0.5 - 10.0).hypot(y as f64 + 0.5 - 10.0) <= MARKER_RADIUS);
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn out_of_bounds_points_are_clamped() {
        let mut kps = [Keypoint::default(); NUM_KEYPOINTS];
        kps[0] = Keypoint::new(-50.0, 500.0, 1.0);
        let out = pose_overlay(&gray(), &PoseSkeleton::new(kps).unwrap());
        assert_eq!(out.get_pixel(0, 31).0, MARKER_COLOR);
    }
}
