use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DiffusionError, LatentGrid};

/// Linear beta schedule and its cumulative products. Timesteps are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Builds a schedule from explicit, non-decreasing betas in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule("at least one timestep is required".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(DiffusionError::InvalidSchedule("betas must be non-decreasing".into()));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.betas.iter().map(|b| 1.0 - b).collect()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product at timestep `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Up to `steps` timesteps, evenly spaced over `1..=T`, descending.
    pub fn sampling_timesteps(&self, steps: usize) -> Vec<usize> {
        let t_max = self.timesteps();
        let steps = steps.clamp(1, t_max);
        if steps == 1 {
            return vec![t_max];
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| 1 + ((t_max - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        ts
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end`.
pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule, DiffusionError> {
    if timesteps == 0 {
        return Err(DiffusionError::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas = if timesteps == 1 {
        vec![beta_start]
    } else {
        (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect()
    };
    DiffusionSchedule::from_betas(betas)
}

/// Forward marginal `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &LatentGrid, t: usize, epsilon: &LatentGrid, schedule: &DiffusionSchedule) -> LatentGrid {
    assert!((1..=schedule.timesteps()).contains(&t), "timestep {t} outside 1..={}", schedule.timesteps());
    assert_eq!(x0.shape(), epsilon.shape(), "noise shape must match x0");
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(epsilon, |x, e| a * x + b * e)
}

/// Standard normal noise shaped like `like`.
pub fn gaussian_like(like: &LatentGrid, rng: &mut impl Rng) -> LatentGrid {
    like.map(|_| rng.sample(StandardNormal))
}
