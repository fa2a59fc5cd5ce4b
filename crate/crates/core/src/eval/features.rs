use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EvalError, FeatureSet};

pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> Vec<f64>;

    fn extract_set(&self, images: &[RgbImage]) -> Result<FeatureSet, EvalError> {
        let rows: Vec<Vec<f64>> = images.iter().map(|i| self.extract(i)).collect();
        FeatureSet::from_rows(&rows)
    }
}

/// Fixed random projection of a downsampled image followed by `tanh`.
/// Deterministic for a given seed, so distances are comparable within a run
/// but carry no perceptual meaning.
#[derive(Debug, Clone)]
pub struct RandomProjectionExtractor {
    input_resolution: u32,
    dim: usize,
    /// `[dim, 3 * input_resolution^2]`, row-major.
    weights: Vec<f64>,
}

impl RandomProjectionExtractor {
    pub const DEFAULT_SEED: u64 = 0x5eed_f1d;

    pub fn new(input_resolution: u32, dim: usize, seed: u64) -> Self {
        let n_in = 3 * (input_resolution as usize).pow(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n_in as f64).sqrt();
        let weights = (0..dim * n_in).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        }).collect();
        Self { input_resolution, dim, weights }
    }
}

impl Default for RandomProjectionExtractor {
    fn default() -> Self {
        Self::new(16, 16, Self::DEFAULT_SEED)
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &RgbImage) -> Vec<f64> {
        let r = self.input_resolution;
        let small = imageops::resize(image, r, r, FilterType::Triangle);
        let x: Vec<f64> = small.as_raw().iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
        self.weights.chunks(x.len()).map(|w| w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().tanh()).collect()
    }
}
