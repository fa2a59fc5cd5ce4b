//! Pixel-space inpainting diffusion at toy scale.
//!
//! The denoiser sees the noisy image, the binary mask and the masked target
//! stacked along channels (`2 * C + 1` inputs) and attends over a
//! conditioning context. Training minimises the mean squared error between
//! the injected and predicted noise; sampling is ancestral DDPM with
//! classifier-free guidance.

pub mod checkpoint;
pub mod denoiser;
pub mod sampler;
pub mod schedule;
pub mod train;

use image::{GrayImage, RgbImage};
use thiserror::Error;

use crate::autograd::{Tape, Tensor, Var};
use crate::conditioning::EmbeddingMatrix;
use crate::nn::{Bound, ParamStore};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use denoiser::{DenoiserConfig, UNetDenoiser};
pub use sampler::{cfg_epsilon, sample_edit, SampleOptions};
pub use schedule::{gaussian_like, make_schedule, q_sample, DiffusionSchedule};
pub use train::{training_loss, LossSample, TrainOutcome, Trainer, TrainingExample};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("non-finite loss at batch {batch_index}")]
    NonFiniteLoss { batch_index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A `[channels, height, width]` grid of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid(Tensor);

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Self {
        Self(Tensor::new(vec![channels, height, width], values))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self(Tensor::full(&[channels, height, width], value))
    }

    pub fn from_tensor(t: Tensor) -> Self {
        assert_eq!(t.shape().len(), 3, "latent grids are [C, H, W]");
        Self(t)
    }

    /// Maps 8-bit RGB to `[-1, 1]`.
    pub fn from_rgb(image: &RgbImage) -> Self {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut values = vec![0.0; 3 * h * w];
        for (x, y, p) in image.enumerate_pixels() {
            for c in 0..3 {
                values[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 127.5 - 1.0;
            }
        }
        Self::new(3, h, w, values)
    }

    /// Single-channel `{0, 1}` grid; any non-zero pixel is inside the mask.
    pub fn from_mask(mask: &GrayImage) -> Self {
        let (w, h) = (mask.width() as usize, mask.height() as usize);
        let values = mask.as_raw().iter().map(|&p| if p > 0 { 1.0 } else { 0.0 }).collect();
        Self::new(1, h, w, values)
    }

    /// Inverse of [`LatentGrid::from_rgb`], clamping to `[-1, 1]`.
    pub fn to_rgb(&self) -> RgbImage {
        let (c, h, w) = self.dims();
        assert_eq!(c, 3, "to_rgb needs 3 channels");
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|ch| {
                let v = self.0.data()[(ch * h + y as usize) * w + x as usize];
                ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
            }))
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn map(&self, f: impl FnMut(f64) -> f64) -> Self {
        let mut f = f;
        Self(Tensor::new(self.0.shape().to_vec(), self.0.data().iter().map(|&v| f(v)).collect()))
    }

    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        Self(self.0.zip_map(&other.0, f))
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    /// Mirrors along the width axis.
    pub fn flip_horizontal(&self) -> Self {
        let (c, h, w) = self.dims();
        let src = self.values();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
                }
            }
        }
        Self::new(c, h, w, out)
    }
}

/// Everything the denoiser consumes for one prediction.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub noisy: &'a LatentGrid,
    pub mask: &'a LatentGrid,
    pub masked_target: &'a LatentGrid,
    pub t: usize,
    pub context: &'a EmbeddingMatrix,
}

impl DenoiserInput<'_> {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let (c, h, w) = self.noisy.dims();
        if self.masked_target.dims() != (c, h, w) {
            return Err(DiffusionError::Shape(format!(
                "masked target {:?} vs noisy {:?}",
                self.masked_target.shape(),
                self.noisy.shape()
            )));
        }
        if self.mask.dims() != (1, h, w) {
            return Err(DiffusionError::Shape(format!("mask {:?} vs noisy {:?}", self.mask.shape(), self.noisy.shape())));
        }
        Ok(())
    }
}

/// Handles of one denoiser input on a tape.
#[derive(Debug, Clone, Copy)]
pub struct InputVars {
    pub noisy: Var,
    pub mask: Var,
    pub masked_target: Var,
    pub context: Var,
    pub t: usize,
}

/// A noise predictor `eps_theta(x_t, t, mask, masked_target, context)`.
pub trait NoiseModel {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Records the prediction on `tape` using parameters bound as `bound`.
    fn predict_on_tape(&self, tape: &mut Tape, bound: &Bound, input: InputVars) -> Var;

    /// Inference without gradients.
    fn predict(&self, input: &DenoiserInput<'_>) -> LatentGrid {
        let mut tape = Tape::new();
        let bound = self.params().bind_frozen(&mut tape);
        let vars = InputVars {
            noisy: tape.constant(input.noisy.tensor().clone()),
            mask: tape.constant(input.mask.tensor().clone()),
            masked_target: tape.constant(input.masked_target.tensor().clone()),
            context: tape.constant(input.context.to_tensor()),
            t: input.t,
        };
        let out = self.predict_on_tape(&mut tape, &bound, vars);
        LatentGrid::from_tensor(tape.value(out).clone())
    }
}
