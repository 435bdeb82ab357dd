//! Calibration sample selection by Mahalanobis distance from the candidate
//! pool's own distribution ("distributional entropy"). Samples far from the
//! pool centre carry more distribution information than near-duplicates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};
use crate::tensorio::Tensor;

pub const DEFAULT_RIDGE_SCALE: f64 = 1e-6;
pub const DEFAULT_FRACTION: f64 = 0.5;

/// One candidate sample summarized as `d` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(PtqError::Shape("feature vector must not be empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PtqError::NonFinite {
                context: Some("feature vector".into()),
            });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureReduce {
    /// Per-channel mean over tokens.
    Mean,
    /// Per-channel means followed by per-channel standard deviations.
    MeanStd,
}

/// Mean and regularized covariance of a sample set.
#[derive(Debug, Clone)]
pub struct CalibStats {
    pub mean: DVector<f64>,
    /// Unbiased sample covariance, before regularization.
    pub cov: DMatrix<f64>,
    pub lambda: f64,
    chol: Cholesky<f64, Dyn>,
}

impl CalibStats {
    /// Statistics from a known mean and covariance.
    pub fn from_parts(mean: Vec<f64>, cov: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(PtqError::Shape(format!("covariance {:?} does not match mean of {d}", cov.shape())));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(PtqError::Config(format!("ridge must be >= 0, got {lambda}")));
        }
        let regularized = &cov + DMatrix::<f64>::identity(d, d) * lambda;
        let chol = Cholesky::new(regularized).ok_or_else(|| {
            PtqError::Numeric(format!(
                "covariance is not positive definite (lambda = {lambda:e}); use a positive ridge scale"
            ))
        })?;
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            lambda,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fits mean, covariance and the ridge `lambda = ridge_scale * trace(S) / d`.
/// When the samples are all identical the ridge falls back to 1 so that the
/// regularized covariance stays invertible.
pub fn fit_set_stats(features: &[FeatureVector], ridge_scale: f64) -> Result<CalibStats> {
    let n = features.len();
    if n < 2 {
        return Err(PtqError::Config(format!("need at least 2 samples to fit statistics, got {n}")));
    }
    if !(ridge_scale.is_finite() && ridge_scale >= 0.0) {
        return Err(PtqError::Config(format!("ridge scale must be >= 0, got {ridge_scale}")));
    }
    let d = features[0].dim();
    if let Some(f) = features.iter().find(|f| f.dim() != d) {
        return Err(PtqError::Shape(format!("feature dims differ: {d} vs {}", f.dim())));
    }

    let mut mean = DVector::<f64>::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(&f.0);
    }
    mean /= n as f64;

    let mut cov = DMatrix::<f64>::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(&f.0) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;

    let trace = cov.trace();
    let lambda = if trace > 0.0 {
        ridge_scale * trace / d as f64
    } else {
        1.0
    };
    CalibStats::from_parts(mean.as_slice().to_vec(), cov, lambda)
}

/// `sqrt((x - u)^T (S + lambda I)^-1 (x - u))`.
pub fn mahalanobis_entropy(x: &FeatureVector, stats: &CalibStats) -> Result<f64> {
    if x.dim() != stats.dim() {
        return Err(PtqError::Shape(format!(
            "feature has {} dims, statistics have {}",
            x.dim(),
            stats.dim()
        )));
    }
    let centred = DVector::from_column_slice(&x.0) - &stats.mean;
    let z = stats
        .chol
        .l_dirty()
        .solve_lower_triangular(&centred)
        .ok_or_else(|| PtqError::Numeric("singular Cholesky factor".into()))?;
    Ok(z.norm())
}

pub fn entropies(features: &[FeatureVector], stats: &CalibStats) -> Result<Vec<f64>> {
    features
        .par_iter()
        .map(|f| mahalanobis_entropy(f, stats))
        .collect()
}

/// How many samples a fraction keeps: `ceil(fraction * n)`, at least one.
pub fn selection_size(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PtqError::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    // The small slack keeps e.g. 0.3 * 10 from rounding up to 4.
    let k = (fraction * n as f64 - 1e-9).ceil() as usize;
    Ok(k.clamp(1, n.max(1)).min(n))
}

/// Indices of the samples with the largest entropy, ascending. Ties keep the
/// lower index.
pub fn select_by_entropy(rho: &[f64], fraction: f64) -> Result<Vec<usize>> {
    let k = selection_size(fraction, rho.len())?;
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn select_calibration(features: &[FeatureVector], fraction: f64, stats: &CalibStats) -> Result<Vec<usize>> {
    select_by_entropy(&entropies(features, stats)?, fraction)
}

/// One feature vector per sample of an `[S x T x n]` (or `[T x n]`) tensor.
/// Standard deviations are population values over tokens.
pub fn extract_features(x: &Tensor, reduce: FeatureReduce) -> Result<Vec<FeatureVector>> {
    let parts = match x.rank() {
        3 => x.samples()?,
        2 => vec![x.clone()],
        _ => {
            return Err(PtqError::Shape(format!(
                "features need [S x T x n] or [T x n] activations, got {:?}",
                x.dims()
            )))
        }
    };
    parts
        .par_iter()
        .map(|p| {
            let (t, n) = (p.rows(), p.cols());
            let mut mean = vec![0f64; n];
            for r in 0..t {
                for (m, &v) in mean.iter_mut().zip(p.row(r)) {
                    *m += v as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= t as f64);
            if reduce == FeatureReduce::MeanStd {
                let mut var = vec![0f64; n];
                for r in 0..t {
                    for ((acc, &v), m) in var.iter_mut().zip(p.row(r)).zip(&mean) {
                        *acc += (v as f64 - m).powi(2);
                    }
                }
                mean.extend(var.into_iter().map(|v| (v / t as f64).sqrt()));
            }
            FeatureVector::new(mean)
        })
        .collect()
}

/// Interprets a rank-2 tensor as `[N x d]` features, one row per sample.
pub fn features_from_matrix(t: &Tensor) -> Result<Vec<FeatureVector>> {
    if t.rank() != 2 {
        return Err(PtqError::Shape(format!("feature matrix must be [N x d], got {:?}", t.dims())));
    }
    (0..t.rows())
        .map(|r| FeatureVector::new(t.row(r).iter().map(|&v| v as f64).collect()))
        .collect()
}
