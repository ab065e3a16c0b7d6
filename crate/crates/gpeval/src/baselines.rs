//! Baseline estimators: random sampling, surrogate-guided importance
//! sampling, and the LURE correction for sequential sampling without
//! replacement.
//!
//! The surrogate is an L2-regularized logistic regression over the same
//! features the GP sees, fitted by damped Newton iterations to a fixed
//! gradient tolerance. Its failure probabilities define acquisition
//! probabilities `q(i)` (floored away from zero so both weighted estimators
//! keep full support, which their unbiasedness requires).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gp::FeatureVector;
use crate::InputId;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("training data is empty")]
    EmptyTrainingData,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("labels must lie in [0, 1], got {0}")]
    BadLabel(f64),
    #[error("candidates are empty")]
    EmptyCandidates,
    #[error("floor {floor} outside (0, 1/{n})")]
    BadFloor { floor: f64, n: usize },
    #[error("acquisition probability for `{0}` must be positive")]
    NonPositiveProbability(InputId),
    #[error("drew {m} samples from a population of {n}")]
    TooManySamples { m: usize, n: usize },
    #[error("newton system is singular")]
    SingularSystem,
}

/// L2-regularized logistic-regression surrogate over feature vectors.
/// `weights` holds the bias last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub weights: Vec<f64>,
    pub regularization: f64,
    /// Set when training data had a single class; predictions collapse to
    /// the clamped label frequency.
    pub degenerate: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

const NEWTON_MAX_ITER: usize = 500;
const NEWTON_GRAD_TOL: f64 = 1e-6;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl SurrogateModel {
    /// Predicted failure probability, strictly inside (0, 1).
    pub fn predict(&self, features: &FeatureVector) -> Result<f64, BaselineError> {
        if let Some(p) = self.degenerate {
            return Ok(p);
        }
        let d = self.weights.len() - 1;
        if features.dim() != d {
            return Err(BaselineError::DimensionMismatch {
                expected: d,
                got: features.dim(),
            });
        }
        let z: f64 = features
            .as_slice()
            .iter()
            .zip(&self.weights[..d])
            .map(|(x, w)| x * w)
            .sum::<f64>()
            + self.weights[d];
        Ok(sigmoid(z).clamp(1e-12, 1.0 - 1e-12))
    }
}

/// Fit the logistic surrogate on (features, binary label) pairs by damped
/// Newton steps on the regularized log-loss; deterministic, converges to
/// gradient norm < 1e-6 or stops after 500 iterations. Single-class data
/// yields a flagged constant predictor.
pub fn fit_surrogate(
    data: &[(FeatureVector, f64)],
    regularization: f64,
) -> Result<SurrogateModel, BaselineError> {
    if data.is_empty() {
        return Err(BaselineError::EmptyTrainingData);
    }
    let d = data[0].0.dim();
    for (x, y) in data {
        if x.dim() != d {
            return Err(BaselineError::DimensionMismatch {
                expected: d,
                got: x.dim(),
            });
        }
        if !(0.0..=1.0).contains(y) {
            return Err(BaselineError::BadLabel(*y));
        }
    }
    let n = data.len();
    let positives = data.iter().filter(|(_, y)| *y >= 0.5).count();
    if positives == 0 || positives == n {
        let freq = (positives as f64 / n as f64).clamp(1e-6, 1.0 - 1e-6);
        return Ok(SurrogateModel {
            weights: vec![0.0; d + 1],
            regularization,
            degenerate: Some(freq),
            converged: true,
            iterations: 0,
        });
    }
    let lambda = regularization.max(1e-10);
    let p = d + 1; // weights + bias
    let mut w = DVector::zeros(p);
    let x_mat = {
        let mut m = DMatrix::zeros(n, p);
        for (i, (x, _)) in data.iter().enumerate() {
            for (j, v) in x.as_slice().iter().enumerate() {
                m[(i, j)] = *v;
            }
            m[(i, d)] = 1.0;
        }
        m
    };
    let y_vec = DVector::from_iterator(n, data.iter().map(|(_, y)| *y));
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..NEWTON_MAX_ITER {
        iterations = iter + 1;
        let z = &x_mat * &w;
        let p_hat = z.map(sigmoid);
        // gradient of mean log-loss + (lambda/2)||w||^2 (bias unpenalized)
        let mut grad = x_mat.transpose() * (&p_hat - &y_vec) / n as f64;
        for j in 0..d {
            grad[j] += lambda * w[j];
        }
        if grad.norm() < NEWTON_GRAD_TOL {
            converged = true;
            break;
        }
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let s = p_hat[i] * (1.0 - p_hat[i]);
            for a in 0..p {
                for b in 0..p {
                    hess[(a, b)] += x_mat[(i, a)] * s * x_mat[(i, b)] / n as f64;
                }
            }
        }
        for j in 0..d {
            hess[(j, j)] += lambda;
        }
        hess[(p - 1, p - 1)] += 1e-10;
        let step = hess
            .clone()
            .lu()
            .solve(&grad)
            .ok_or(BaselineError::SingularSystem)?;
        // dampen oversized steps
        let norm = step.norm();
        let scale = if norm > 10.0 { 10.0 / norm } else { 1.0 };
        w -= step * scale;
    }
    Ok(SurrogateModel {
        weights: w.iter().copied().collect(),
        regularization,
        degenerate: None,
        converged,
        iterations,
    })
}

/// Normalized acquisition probabilities with full support.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcquisitionDistribution {
    pub probabilities: BTreeMap<InputId, f64>,
}

impl AcquisitionDistribution {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.probabilities.get(id).copied()
    }

    /// Probability of `id` renormalized over the `remaining` subset (the
    /// conditional proposal used by sequential sampling without
    /// replacement).
    pub fn conditional(&self, id: &str, remaining: &[InputId]) -> Option<f64> {
        let total: f64 = remaining.iter().filter_map(|r| self.get(r)).sum();
        if total <= 0.0 {
            return None;
        }
        Some(self.get(id)? / total)
    }
}

/// q(i) proportional to max(p_failure(i), floor), normalized. The floor
/// keeps every candidate reachable.
pub fn acquisition_from_surrogate(
    model: &SurrogateModel,
    candidates: &[(InputId, FeatureVector)],
    floor: f64,
) -> Result<AcquisitionDistribution, BaselineError> {
    if candidates.is_empty() {
        return Err(BaselineError::EmptyCandidates);
    }
    if !(floor > 0.0) || floor >= 1.0 / candidates.len() as f64 {
        return Err(BaselineError::BadFloor {
            floor,
            n: candidates.len(),
        });
    }
    let mut raw = BTreeMap::new();
    for (id, features) in candidates {
        let p = model.predict(features)?.max(floor);
        raw.insert(id.clone(), p);
    }
    let total: f64 = raw.values().sum();
    let probabilities = raw.into_iter().map(|(id, p)| (id, p / total)).collect();
    Ok(AcquisitionDistribution { probabilities })
}

/// Importance-sampling estimate from i.i.d. draws: `(1/N) sum_m f_m / (n
/// q(i_m))`. Under uniform q this reduces to the plain sample mean.
pub fn is_estimate(
    samples: &[(f64, f64)],
    n_draws: usize,
    population: usize,
) -> Result<f64, BaselineError> {
    for (_, q) in samples {
        if !(*q > 0.0) {
            return Err(BaselineError::NonPositiveProbability("<sample>".into()));
        }
    }
    let acc: f64 = samples.iter().map(|(f, q)| f / (n_draws as f64 * q)).sum();
    Ok(acc / population as f64)
}

/// LURE estimate for sequential sampling without replacement. `samples` are
/// ordered `(f_m, q_m)` pairs where `q_m` is the probability assigned to the
/// drawn item among the items remaining at step m:
/// `(1/M) sum_m (1 + (N-M)/(N-m) (1/((N-m+1) q_m) - 1)) f_m`.
pub fn lure_estimate(samples: &[(f64, f64)], population: usize) -> Result<f64, BaselineError> {
    let m_total = samples.len();
    if m_total > population {
        return Err(BaselineError::TooManySamples {
            m: m_total,
            n: population,
        });
    }
    if m_total == 0 {
        return Err(BaselineError::EmptyTrainingData);
    }
    let n = population as f64;
    let m_tot = m_total as f64;
    let mut acc = 0.0;
    for (idx, (f, q)) in samples.iter().enumerate() {
        if !(*q > 0.0) {
            return Err(BaselineError::NonPositiveProbability("<sample>".into()));
        }
        let m = (idx + 1) as f64;
        let weight = if (n - m).abs() < f64::EPSILON {
            1.0 // final draw of the full population: the correction vanishes
        } else {
            1.0 + (n - m_tot) / (n - m) * (1.0 / ((n - m + 1.0) * q) - 1.0)
        };
        acc += weight * f;
    }
    Ok(acc / m_tot)
}

/// Per-step LURE weight, exposed for diagnostics.
pub fn lure_weight(m: usize, m_total: usize, population: usize, q: f64) -> f64 {
    let n = population as f64;
    let m = m as f64;
    if (n - m).abs() < f64::EPSILON {
        return 1.0;
    }
    1.0 + (n - m_total as f64) / (n - m) * (1.0 / ((n - m + 1.0) * q) - 1.0)
}
