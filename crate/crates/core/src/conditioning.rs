//! Cross-attention context construction.
//!
//! The context is a row-stack of 768-wide tokens: 257 image tokens from the
//! reference crop, then (variant permitting) 77 text tokens from the
//! scene-difference caption, then one pose token from the flattened target
//! skeleton. Each variant also has an unconditional context of identical
//! shape used by classifier-free guidance.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{Tape, Tensor, Var};
use crate::pose::{flatten_pose, Keypoint, PoseSkeleton, FLAT_POSE_LEN, NUM_KEYPOINTS};

pub const EMBED_DIM: usize = 768;
pub const IMAGE_TOKENS: usize = 257;
pub const IMAGE_HIDDEN_DIM: usize = 1024;
pub const TEXT_TOKENS: usize = 77;
pub const POSE_TOKENS: usize = 1;

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error("encoder adapter unavailable: {0}")]
    AdapterUnavailable(String),
    #[error("variant {variant} expects {expected}, got {got}")]
    ModalityMismatch { variant: Variant, expected: String, got: String },
    #[error("embedding has shape {rows}x{dim}, expected {expected_rows}x{EMBED_DIM}")]
    Shape { rows: usize, dim: usize, expected_rows: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("unknown conditioning variant '{0}' (expected c1, c2, c3 or c4)")]
    UnknownVariant(String),
}

/// A `rows x 768` matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, values: Vec<f64>) -> Result<Self, ConditioningError> {
        if values.len() != rows * EMBED_DIM {
            return Err(ConditioningError::Shape { rows, dim: values.len() / rows.max(1), expected_rows: rows });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ConditioningError::NonFinite);
        }
        Ok(Self { rows, values })
    }

    pub fn from_tensor(t: Tensor) -> Result<Self, ConditioningError> {
        let shape = t.shape().to_vec();
        if shape.len() != 2 || shape[1] != EMBED_DIM {
            return Err(ConditioningError::Shape {
                rows: shape.first().copied().unwrap_or(0),
                dim: shape.get(1).copied().unwrap_or(0),
                expected_rows: shape.first().copied().unwrap_or(0),
            });
        }
        Self::new(shape[0], t.into_data())
    }

    pub fn zeros(rows: usize) -> Self {
        Self { rows, values: vec![0.0; rows * EMBED_DIM] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        EMBED_DIM
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, EMBED_DIM)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * EMBED_DIM..(r + 1) * EMBED_DIM]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, EMBED_DIM], self.values.clone())
    }

    pub fn concat(parts: &[&EmbeddingMatrix]) -> EmbeddingMatrix {
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut values = Vec::with_capacity(rows * EMBED_DIM);
        for p in parts {
            values.extend_from_slice(&p.values);
        }
        EmbeddingMatrix { rows, values }
    }
}

/// The four conditioning configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "c1")]
    Img,
    #[serde(rename = "c2")]
    ImgPose,
    #[serde(rename = "c3")]
    ImgText,
    #[serde(rename = "c4")]
    ImgPoseText,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Img, Variant::ImgPose, Variant::ImgText, Variant::ImgPoseText];

    pub fn uses_text(self) -> bool {
        matches!(self, Variant::ImgText | Variant::ImgPoseText)
    }

    pub fn uses_pose(self) -> bool {
        matches!(self, Variant::ImgPose | Variant::ImgPoseText)
    }

    pub fn context_rows(self) -> usize {
        IMAGE_TOKENS
            + if self.uses_text() { TEXT_TOKENS } else { 0 }
            + if self.uses_pose() { POSE_TOKENS } else { 0 }
    }

    pub fn code(self) -> &'static str {
        match self {
            Variant::Img => "c1",
            Variant::ImgPose => "c2",
            Variant::ImgText => "c3",
            Variant::ImgPoseText => "c4",
        }
    }

    /// Row label used in rating tables.
    pub fn table_label(self) -> &'static str {
        match self {
            Variant::Img => "Img-Only",
            Variant::ImgPose => "Img, Pose",
            Variant::ImgText => "Img, Text",
            Variant::ImgPoseText => "Img, Pose, Text",
        }
    }

    fn modalities(self) -> &'static str {
        match self {
            Variant::Img => "image",
            Variant::ImgPose => "image+pose",
            Variant::ImgText => "image+text",
            Variant::ImgPoseText => "image+text+pose",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Variant {
    type Err = ConditioningError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.trim().to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match norm.as_str() {
            "c1" | "img" | "imgonly" | "baseline" => Ok(Variant::Img),
            "c2" | "imgpose" | "poseonly" => Ok(Variant::ImgPose),
            "c3" | "imgtext" | "textonly" => Ok(Variant::ImgText),
            "c4" | "imgposetext" | "posetext" => Ok(Variant::ImgPoseText),
            _ => Err(ConditioningError::UnknownVariant(s.to_string())),
        }
    }
}

/// Which skeletons feed the pose token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseTokenMode {
    /// The target pose flattened to 51 values.
    #[default]
    Target,
    /// Target and reference poses concatenated to 102 values, still one token.
    TargetAndReference,
}

impl PoseTokenMode {
    pub fn input_dim(self) -> usize {
        match self {
            PoseTokenMode::Target => FLAT_POSE_LEN,
            PoseTokenMode::TargetAndReference => 2 * FLAT_POSE_LEN,
        }
    }

    pub fn flatten(self, target: &PoseSkeleton, reference: &PoseSkeleton) -> Vec<f64> {
        let mut v = flatten_pose(target).to_vec();
        if self == PoseTokenMode::TargetAndReference {
            v.extend_from_slice(&flatten_pose(reference));
        }
        v
    }
}

/// Learnable affine map `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ProjectionLayer {
    /// Weights uniform in `±1/sqrt(in_dim)`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self { weights: Tensor::new(vec![in_dim, out_dim], w), bias: Tensor::zeros(&[out_dim]) }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weights: Tensor::zeros(&[in_dim, out_dim]), bias: Tensor::zeros(&[out_dim]) }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Applies the layer to `[n, in_dim]` rows.
    pub fn forward(&self, input: &Tensor) -> Tensor {
        let mut out = input.matmul(&self.weights);
        let d = self.out_dim();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        out
    }

    /// Records the layer on a tape with its weights bound as `weights`, `bias`.
    pub fn forward_on_tape(tape: &mut Tape, input: Var, weights: Var, bias: Var) -> Var {
        let y = tape.matmul(input, weights);
        tape.add_row_bias(y, bias)
    }
}

/// Produces the `257 x 1024` last hidden state for a reference image.
pub trait ImageEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn hidden_states(&self, image: &RgbImage) -> Result<Tensor, ConditioningError>;
    /// Hidden state standing in for an all-zeros conditioning image.
    fn zero_hidden_states(&self) -> Tensor {
        Tensor::zeros(&[IMAGE_TOKENS, IMAGE_HIDDEN_DIM])
    }
}

/// Produces the `77 x 768` last hidden state for a caption.
pub trait TextEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn encode(&self, caption: &str) -> Result<EmbeddingMatrix, ConditioningError>;
}

fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Weight-free stand-in for a vision encoder.
///
/// Row 0 carries an 8x8 RGB thumbnail of the image (192 values in [-1, 1]);
/// the remaining entries are Gaussian noise seeded by a hash of the pixels.
/// An all-black image maps to the zero hidden state.
#[derive(Debug, Clone, Default)]
pub struct ToyImageEncoder {
    pub seed: u64,
}

impl ImageEncoder for ToyImageEncoder {
    fn id(&self) -> &str {
        "toy-image-v1"
    }

    fn hidden_states(&self, image: &RgbImage) -> Result<Tensor, ConditioningError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(ConditioningError::AdapterUnavailable("empty image".into()));
        }
        if image.as_raw().iter().all(|&p| p == 0) {
            return Ok(self.zero_hidden_states());
        }
        let dims = [image.width().to_le_bytes(), image.height().to_le_bytes()].concat();
        let mut rng = seeded_rng(&[&self.seed.to_le_bytes(), &dims, image.as_raw()]);
        let mut values: Vec<f64> =
            (0..IMAGE_TOKENS * IMAGE_HIDDEN_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let thumb = image::imageops::resize(image, 8, 8, image::imageops::FilterType::Triangle);
        for (v, &p) in values.iter_mut().zip(thumb.as_raw().iter()) {
            *v = p as f64 / 127.5 - 1.0;
        }
        Ok(Tensor::new(vec![IMAGE_TOKENS, IMAGE_HIDDEN_DIM], values))
    }
}

/// Weight-free stand-in for a text encoder: one hashed vector per
/// (token, position), bracketed by start/end tokens and padded to 77 rows.
#[derive(Debug, Clone, Default)]
pub struct ToyTextEncoder {
    pub seed: u64,
}

impl ToyTextEncoder {
    fn token_row(&self, token: &str, position: usize) -> impl Iterator<Item = f64> {
        let mut rng = seeded_rng(&[&self.seed.to_le_bytes(), token.as_bytes(), &(position as u64).to_le_bytes()]);
        (0..EMBED_DIM).map(move |_| rng.sample::<f64, _>(StandardNormal))
    }
}

impl TextEncoder for ToyTextEncoder {
    fn id(&self) -> &str {
        "toy-text-v1"
    }

    fn encode(&self, caption: &str) -> Result<EmbeddingMatrix, ConditioningError> {
        let lower = caption.to_lowercase();
        let words: Vec<&str> =
            lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).take(TEXT_TOKENS - 2).collect();
        let mut values = Vec::with_capacity(TEXT_TOKENS * EMBED_DIM);
        values.extend(self.token_row("<|startoftext|>", 0));
        for (i, w) in words.iter().enumerate() {
            values.extend(self.token_row(w, i + 1));
        }
        values.extend(self.token_row("<|endoftext|>", words.len() + 1));
        for pos in words.len() + 2..TEXT_TOKENS {
            values.extend(self.token_row("<|pad|>", pos));
        }
        EmbeddingMatrix::new(TEXT_TOKENS, values)
    }
}

/// Projects an image's hidden state into the 768-wide context space.
pub fn encode_image(
    encoder: &dyn ImageEncoder,
    projection: &ProjectionLayer,
    image: &RgbImage,
) -> Result<EmbeddingMatrix, ConditioningError> {
    let hidden = encoder.hidden_states(image)?;
    EmbeddingMatrix::from_tensor(projection.forward(&hidden))
}

/// Encodes a caption; `None` and blank strings use the null caption.
pub fn encode_text(encoder: &dyn TextEncoder, caption: Option<&str>) -> Result<EmbeddingMatrix, ConditioningError> {
    let text = caption.map(str::trim).unwrap_or("");
    let m = encoder.encode(text)?;
    if m.rows() != TEXT_TOKENS {
        return Err(ConditioningError::Shape { rows: m.rows(), dim: EMBED_DIM, expected_rows: TEXT_TOKENS });
    }
    Ok(m)
}

/// Flattens the target skeleton and maps it to a single context row.
pub fn embed_pose(target: &PoseSkeleton, projection: &ProjectionLayer) -> EmbeddingMatrix {
    embed_pose_values(&flatten_pose(target), projection)
}

pub fn embed_pose_values(flat: &[f64], projection: &ProjectionLayer) -> EmbeddingMatrix {
    assert_eq!(flat.len(), projection.in_dim(), "pose projection input width");
    let row = projection.forward(&Tensor::new(vec![1, flat.len()], flat.to_vec()));
    EmbeddingMatrix::from_tensor(row).expect("projection output is 1 x 768")
}

/// A conditional context and its matching unconditional context.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub variant: Variant,
    pub context: EmbeddingMatrix,
    pub uncond_context: EmbeddingMatrix,
}

/// Row-concatenates `[image; text?; pose?]` for `variant`.
pub fn assemble_context(
    variant: Variant,
    image: &EmbeddingMatrix,
    text: Option<&EmbeddingMatrix>,
    pose: Option<&EmbeddingMatrix>,
) -> Result<EmbeddingMatrix, ConditioningError> {
    let got = match (text.is_some(), pose.is_some()) {
        (false, false) => "image",
        (false, true) => "image+pose",
        (true, false) => "image+text",
        (true, true) => "image+text+pose",
    };
    if text.is_some() != variant.uses_text() || pose.is_some() != variant.uses_pose() {
        return Err(ConditioningError::ModalityMismatch {
            variant,
            expected: variant.modalities().into(),
            got: got.into(),
        });
    }
    let check = |m: &EmbeddingMatrix, rows: usize| {
        if m.rows() == rows {
            Ok(())
        } else {
            Err(ConditioningError::Shape { rows: m.rows(), dim: EMBED_DIM, expected_rows: rows })
        }
    };
    check(image, IMAGE_TOKENS)?;
    let mut parts = vec![image];
    if let Some(t) = text {
        check(t, TEXT_TOKENS)?;
        parts.push(t);
    }
    if let Some(p) = pose {
        check(p, POSE_TOKENS)?;
        parts.push(p);
    }
    Ok(EmbeddingMatrix::concat(&parts))
}

pub fn assemble_bundle(
    variant: Variant,
    image: &EmbeddingMatrix,
    text: Option<&EmbeddingMatrix>,
    pose: Option<&EmbeddingMatrix>,
    uncond_context: EmbeddingMatrix,
) -> Result<ConditioningBundle, ConditioningError> {
    let context = assemble_context(variant, image, text, pose)?;
    if uncond_context.rows() != context.rows() {
        return Err(ConditioningError::Shape {
            rows: uncond_context.rows(),
            dim: EMBED_DIM,
            expected_rows: context.rows(),
        });
    }
    Ok(ConditioningBundle { variant, context, uncond_context })
}

/// Upright figure centred in a `width x height` frame, arms at its sides,
/// every joint fully confident.
pub fn neutral_skeleton(width: f64, height: f64) -> PoseSkeleton {
    let (cx, cy) = (width / 2.0, height / 2.0);
    let s = height * 0.8;
    // (dx, dy) in units of figure height, origin at the frame centre
    let offsets: [(f64, f64); NUM_KEYPOINTS] = [
        (0.0, -0.42),   // nose
        (-0.02, -0.44), // eyes
        (0.02, -0.44),
        (-0.04, -0.43), // ears
        (0.04, -0.43),
        (-0.10, -0.32), // shoulders
        (0.10, -0.32),
        (-0.12, -0.15), // elbows
        (0.12, -0.15),
        (-0.13, 0.0), // wrists
        (0.13, 0.0),
        (-0.06, 0.02), // hips
        (0.06, 0.02),
        (-0.06, 0.25), // knees
        (0.06, 0.25),
        (-0.06, 0.48), // ankles
        (0.06, 0.48),
    ];
    let kps = offsets.map(|(dx, dy)| Keypoint::new(cx + dx * s, cy + dy * s, 1.0));
    PoseSkeleton::new(kps).expect("neutral skeleton is valid")
}

/// Encoders, projections and constants needed to condition one variant.
pub struct Conditioner {
    pub variant: Variant,
    pub pose_mode: PoseTokenMode,
    pub image_encoder: Box<dyn ImageEncoder>,
    pub text_encoder: Box<dyn TextEncoder>,
    pub image_projection: ProjectionLayer,
    pub pose_projection: ProjectionLayer,
    pub neutral_pose: PoseSkeleton,
}

impl Conditioner {
    /// Toy encoders with freshly initialised projections.
    pub fn toy(variant: Variant, pose_mode: PoseTokenMode, neutral_pose: PoseSkeleton, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_projection = ProjectionLayer::init(IMAGE_HIDDEN_DIM, EMBED_DIM, &mut rng);
        let pose_projection = ProjectionLayer::init(pose_mode.input_dim(), EMBED_DIM, &mut rng);
        Self {
            variant,
            pose_mode,
            image_encoder: Box::new(ToyImageEncoder { seed }),
            text_encoder: Box::new(ToyTextEncoder { seed }),
            image_projection,
            pose_projection,
            neutral_pose,
        }
    }

    pub fn encode_image(&self, image: &RgbImage) -> Result<EmbeddingMatrix, ConditioningError> {
        encode_image(self.image_encoder.as_ref(), &self.image_projection, image)
    }

    pub fn encode_text(&self, caption: Option<&str>) -> Result<EmbeddingMatrix, ConditioningError> {
        encode_text(self.text_encoder.as_ref(), caption)
    }

    pub fn pose_input(&self, target: &PoseSkeleton, reference: &PoseSkeleton) -> Vec<f64> {
        self.pose_mode.flatten(target, reference)
    }

    pub fn embed_pose(&self, target: &PoseSkeleton, reference: &PoseSkeleton) -> EmbeddingMatrix {
        embed_pose_values(&self.pose_input(target, reference), &self.pose_projection)
    }

    /// Flattened neutral skeleton in the layout the pose projection expects.
    pub fn neutral_pose_input(&self) -> Vec<f64> {
        self.pose_mode.flatten(&self.neutral_pose, &self.neutral_pose)
    }

    /// Image slot from the zero hidden state, text slot from the null caption,
    /// pose slot from the neutral skeleton.
    pub fn unconditional_context(&self) -> Result<EmbeddingMatrix, ConditioningError> {
        let image = EmbeddingMatrix::from_tensor(self.image_projection.forward(&self.image_encoder.zero_hidden_states()))?;
        let text = if self.variant.uses_text() { Some(self.encode_text(None)?) } else { None };
        let pose = self
            .variant
            .uses_pose()
            .then(|| embed_pose_values(&self.neutral_pose_input(), &self.pose_projection));
        assemble_context(self.variant, &image, text.as_ref(), pose.as_ref())
    }

    /// Full bundle for one edit. Modalities the variant does not use are
    /// ignored; missing required ones are a [`ConditioningError::ModalityMismatch`].
    pub fn bundle(
        &self,
        reference_image: &RgbImage,
        caption: Option<&str>,
        target_pose: Option<&PoseSkeleton>,
        reference_pose: Option<&PoseSkeleton>,
    ) -> Result<ConditioningBundle, ConditioningError> {
        let image = self.encode_image(reference_image)?;
        let text = if self.variant.uses_text() { Some(self.encode_text(caption)?) } else { None };
        let pose = match (self.variant.uses_pose(), target_pose) {
            (true, Some(t)) => Some(self.embed_pose(t, reference_pose.unwrap_or(t))),
            (true, None) => {
                return Err(ConditioningError::ModalityMismatch {
                    variant: self.variant,
                    expected: self.variant.modalities().into(),
                    got: "no target pose".into(),
                })
            }
            (false, _) => None,
        };
        assemble_bundle(self.variant, &image, text.as_ref(), pose.as_ref(), self.unconditional_context()?)
    }
}
