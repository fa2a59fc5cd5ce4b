use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::EvalError;

/// Relative tolerance below which negative eigenvalues are treated as zero.
pub const EIGEN_CLAMP_TOLERANCE: f64 = 1e-10;
/// Relative Frobenius residual allowed for the matrix square root.
pub const SQRT_RESIDUAL_TOLERANCE: f64 = 1e-6;

/// `n` feature vectors of dimension `d`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(features: DMatrix<f64>) -> Result<Self, EvalError> {
        if features.nrows() < 2 {
            return Err(EvalError::TooFewSamples(features.nrows()));
        }
        if features.ncols() == 0 {
            return Err(EvalError::EmptyInput);
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok(Self { features })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EvalError> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(EvalError::DimensionMismatch { left: d, right: bad.len() });
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// Sample mean and unbiased covariance.
    pub fn stats(&self) -> GaussianStats {
        let n = self.n() as f64;
        let mean: DVector<f64> = self.features.row_mean().transpose();
        let mut centered = self.features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1.0);
        GaussianStats { mean, cov }
    }
}

/// Mean and covariance of a Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, EvalError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(EvalError::DimensionMismatch { left: mean.len(), right: cov.nrows() });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric positive semi-definite matrix. Eigenvalues
/// slightly below zero are clamped; clearly negative ones are an error.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, EvalError> {
    let eig = SymmetricEigen::new(symmetric(m));
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -EIGEN_CLAMP_TOLERANCE * scale {
            return Err(EvalError::NumericalFailure(format!("eigenvalue {v:e} is negative")));
        }
        *v = v.max(0.0).sqrt();
    }
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    let residual = (&root * &root - symmetric(m)).norm();
    if !residual.is_finite() || residual > SQRT_RESIDUAL_TOLERANCE * m.norm().max(1.0) {
        return Err(EvalError::NumericalFailure(format!("square root residual {residual:e}")));
    }
    Ok(root)
}

/// Fréchet distance between two Gaussians. The cross term uses
/// `tr sqrt(Sa^1/2 Sb Sa^1/2)`, which equals `tr sqrt(Sa Sb)`.
pub fn fid_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    let root_a = psd_sqrt(&a.cov)?;
    let product = &root_a * &b.cov * &root_a;
    let cross = psd_sqrt(&product)?.trace();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let value = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(EvalError::NumericalFailure("non-finite distance".into()));
    }
    Ok(value.max(0.0))
}

pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64, EvalError> {
    if a.d() != b.d() {
        return Err(EvalError::DimensionMismatch { left: a.d(), right: b.d() });
    }
    fid_from_stats(&a.stats(), &b.stats())
}
