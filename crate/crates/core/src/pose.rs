//! COCO-17 pose skeletons: flattening, distances, visibility and PCKh.
//!
//! Every operation here is a pure function over immutable values. The
//! skeleton is the shared currency of the curation pipeline (filtering and
//! keyframe spacing), the conditioning stack (the pose token) and evaluation
//! (PCKh).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of keypoints in a COCO skeleton.
pub const NUM_KEYPOINTS: usize = 17;
/// Length of a flattened skeleton, `(x, y, confidence)` per keypoint.
pub const FLAT_POSE_LEN: usize = NUM_KEYPOINTS * 3;
/// Confidence at or above which a keypoint counts as visible.
pub const DEFAULT_VISIBILITY: f64 = 0.3;
/// Literal majority of 17 joints.
pub const DEFAULT_MAJORITY: usize = 9;
/// Default PCKh radius as a fraction of the shoulder-to-head length.
pub const DEFAULT_PCKH_ALPHA: f64 = 0.5;

/// COCO keypoint indices.
pub mod joint {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
}

/// Limb segments of the COCO skeleton as keypoint index pairs.
pub const COCO_LIMBS: [(usize, usize); 16] = [
    (joint::LEFT_ANKLE, joint::LEFT_KNEE),
    (joint::LEFT_KNEE, joint::LEFT_HIP),
    (joint::RIGHT_ANKLE, joint::RIGHT_KNEE),
    (joint::RIGHT_KNEE, joint::RIGHT_HIP),
    (joint::LEFT_HIP, joint::RIGHT_HIP),
    (joint::LEFT_SHOULDER, joint::LEFT_HIP),
    (joint::RIGHT_SHOULDER, joint::RIGHT_HIP),
    (joint::LEFT_SHOULDER, joint::RIGHT_SHOULDER),
    (joint::LEFT_SHOULDER, joint::LEFT_ELBOW),
    (joint::RIGHT_SHOULDER, joint::RIGHT_ELBOW),
    (joint::LEFT_ELBOW, joint::LEFT_WRIST),
    (joint::RIGHT_ELBOW, joint::RIGHT_WRIST),
    (joint::LEFT_EYE, joint::RIGHT_EYE),
    (joint::NOSE, joint::LEFT_EYE),
    (joint::LEFT_EYE, joint::LEFT_EAR),
    (joint::RIGHT_EYE, joint::RIGHT_EAR),
];

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("required joints are below the visibility threshold: {0:?}")]
    MissingJoints(Vec<usize>),
    #[error("no joint is visible in both skeletons")]
    NoCommonJoints,
    #[error("invalid keypoint {index}: {reason}")]
    InvalidKeypoint { index: usize, reason: &'static str },
    #[error("expected {expected} values, found {found}")]
    WrongLength { expected: usize, found: usize },
    #[error("pose file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn is_visible(&self, threshold: f64) -> bool {
        self.confidence >= threshold
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn validate(&self, index: usize) -> Result<(), PoseError> {
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(PoseError::InvalidKeypoint { index, reason: "non-finite coordinate" });
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(PoseError::InvalidKeypoint { index, reason: "confidence outside [0, 1]" });
        }
        Ok(())
    }
}

/// A single-person 2D skeleton with exactly 17 keypoints in COCO order.
///
/// Serialized as a `[[x, y, confidence]; 17]` array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 3]>", into = "Vec<[f64; 3]>")]
pub struct PoseSkeleton {
    keypoints: [Keypoint; NUM_KEYPOINTS],
}

impl PoseSkeleton {
    pub fn new(keypoints: [Keypoint; NUM_KEYPOINTS]) -> Result<Self, PoseError> {
        for (i, kp) in keypoints.iter().enumerate() {
            kp.validate(i)?;
        }
        Ok(Self { keypoints })
    }

    pub fn zeros() -> Self {
        Self { keypoints: [Keypoint::default(); NUM_KEYPOINTS] }
    }

    /// Inverse of [`flatten_pose`].
    pub fn from_flat(values: &[f64]) -> Result<Self, PoseError> {
        if values.len() != FLAT_POSE_LEN {
            return Err(PoseError::WrongLength { expected: FLAT_POSE_LEN, found: values.len() });
        }
        let mut keypoints = [Keypoint::default(); NUM_KEYPOINTS];
        for (kp, chunk) in keypoints.iter_mut().zip(values.chunks_exact(3)) {
            *kp = Keypoint::new(chunk[0], chunk[1], chunk[2]);
        }
        Self::new(keypoints)
    }

    pub fn keypoints(&self) -> &[Keypoint; NUM_KEYPOINTS] {
        &self.keypoints
    }

    pub fn keypoint(&self, index: usize) -> &Keypoint {
        &self.keypoints[index]
    }

    /// Applies `f` to every coordinate pair, keeping confidences.
    pub fn map_coords(&self, mut f: impl FnMut(f64, f64) -> (f64, f64)) -> Result<Self, PoseError> {
        let mut keypoints = self.keypoints;
        for kp in keypoints.iter_mut() {
            let (x, y) = f(kp.x, kp.y);
            kp.x = x;
            kp.y = y;
        }
        Self::new(keypoints)
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)` of visible joints.
    pub fn visible_bounds(&self, threshold: f64) -> Option<(f64, f64, f64, f64)> {
        self.keypoints
            .iter()
            .filter(|kp| kp.is_visible(threshold))
            .fold(None, |acc, kp| {
                Some(match acc {
                    None => (kp.x, kp.y, kp.x, kp.y),
                    Some((x0, y0, x1, y1)) => (x0.min(kp.x), y0.min(kp.y), x1.max(kp.x), y1.max(kp.y)),
                })
            })
    }
}

impl TryFrom<Vec<[f64; 3]>> for PoseSkeleton {
    type Error = PoseError;

    fn try_from(rows: Vec<[f64; 3]>) -> Result<Self, Self::Error> {
        if rows.len() != NUM_KEYPOINTS {
            return Err(PoseError::WrongLength { expected: NUM_KEYPOINTS, found: rows.len() });
        }
        let mut keypoints = [Keypoint::default(); NUM_KEYPOINTS];
        for (kp, row) in keypoints.iter_mut().zip(rows) {
            *kp = Keypoint::new(row[0], row[1], row[2]);
        }
        Self::new(keypoints)
    }
}

impl From<PoseSkeleton> for Vec<[f64; 3]> {
    fn from(pose: PoseSkeleton) -> Self {
        pose.keypoints.iter().map(|kp| [kp.x, kp.y, kp.confidence]).collect()
    }
}

/// Flattens a skeleton to `[x0, y0, c0, x1, y1, c1, ...]`.
pub fn flatten_pose(skeleton: &PoseSkeleton) -> [f64; FLAT_POSE_LEN] {
    let mut out = [0.0; FLAT_POSE_LEN];
    for (chunk, kp) in out.chunks_exact_mut(3).zip(skeleton.keypoints.iter()) {
        chunk.copy_from_slice(&[kp.x, kp.y, kp.confidence]);
    }
    out
}

/// Distance from the nose to the midpoint of the shoulders, using the
/// default visibility threshold.
pub fn shoulder_head_length(skeleton: &PoseSkeleton) -> Result<f64, PoseError> {
    shoulder_head_length_with(skeleton, DEFAULT_VISIBILITY)
}

pub fn shoulder_head_length_with(skeleton: &PoseSkeleton, threshold: f64) -> Result<f64, PoseError> {
    let required = [joint::NOSE, joint::LEFT_SHOULDER, joint::RIGHT_SHOULDER];
    let missing: Vec<usize> =
        required.into_iter().filter(|&j| !skeleton.keypoints[j].is_visible(threshold)).collect();
    if !missing.is_empty() {
        return Err(PoseError::MissingJoints(missing));
    }
    let nose = skeleton.keypoints[joint::NOSE];
    let l = skeleton.keypoints[joint::LEFT_SHOULDER];
    let r = skeleton.keypoints[joint::RIGHT_SHOULDER];
    let mid = Keypoint::new((l.x + r.x) / 2.0, (l.y + r.y) / 2.0, 1.0);
    Ok(nose.distance(&mid))
}

/// Mean displacement over joints visible in both skeletons.
pub fn pose_distance(a: &PoseSkeleton, b: &PoseSkeleton, visibility_threshold: f64) -> Result<f64, PoseError> {
    let (sum, count) = a
        .keypoints
        .iter()
        .zip(b.keypoints.iter())
        .filter(|(ka, kb)| ka.is_visible(visibility_threshold) && kb.is_visible(visibility_threshold))
        .fold((0.0, 0usize), |(s, n), (ka, kb)| (s + ka.distance(kb), n + 1));
    if count == 0 {
        return Err(PoseError::NoCommonJoints);
    }
    Ok(sum / count as f64)
}

pub fn visible_joint_count(skeleton: &PoseSkeleton, threshold: f64) -> usize {
    skeleton.keypoints.iter().filter(|kp| kp.is_visible(threshold)).count()
}

/// Outcome of a PCKh evaluation: `correct` out of `visible` ground-truth joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PckhCount {
    pub correct: usize,
    pub visible: usize,
}

impl PckhCount {
    pub fn ratio(&self) -> f64 {
        if self.visible == 0 {
            0.0
        } else {
            self.correct as f64 / self.visible as f64
        }
    }
}

/// PCKh with the default visibility threshold.
pub fn pckh(predicted: &PoseSkeleton, ground_truth: &PoseSkeleton, alpha: f64) -> Result<f64, PoseError> {
    pckh_count(predicted, ground_truth, alpha, DEFAULT_VISIBILITY).map(|c| c.ratio())
}

/// Counts ground-truth-visible joints whose prediction lies within
/// `alpha * shoulder_head_length(ground_truth)` (inclusive).
pub fn pckh_count(
    predicted: &PoseSkeleton,
    ground_truth: &PoseSkeleton,
    alpha: f64,
    visibility_threshold: f64,
) -> Result<PckhCount, PoseError> {
    let radius = alpha * shoulder_head_length_with(ground_truth, visibility_threshold)?;
    let mut count = PckhCount { correct: 0, visible: 0 };
    for (p, g) in predicted.keypoints.iter().zip(ground_truth.keypoints.iter()) {
        if !g.is_visible(visibility_threshold) {
            continue;
        }
        count.visible += 1;
        if p.distance(g) <= radius {
            count.correct += 1;
        }
    }
    Ok(count)
}

/// One line of a pose JSONL file. Several lines may share a `frame_index`
/// when more than one person was detected in that frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame_index: u64,
    pub keypoints: PoseSkeleton,
}

pub fn read_pose_jsonl(reader: impl BufRead) -> Result<Vec<PoseRecord>, PoseError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PoseRecord = serde_json::from_str(&line)
            .map_err(|e| PoseError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_pose_jsonl(mut writer: impl Write, records: &[PoseRecord]) -> Result<(), PoseError> {
    for record in records {
        let line = serde_json::to_string(record).expect("pose records always serialize");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}
