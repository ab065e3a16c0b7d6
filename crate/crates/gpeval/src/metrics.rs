//! Evaluation metrics over trajectories and generated sets: estimation error
//! and efficiency, failure-discovery counts, and the diversity measures
//! (Gram log-determinant over embeddings, normalized topic entropy, and
//! their weighted composite).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::gp::FeatureVector;
use crate::linalg::factor_with_jitter;
use crate::quadrature::Trajectory;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("need at least {needed} embeddings, got {got}")]
    TooFewEmbeddings { needed: usize, got: usize },
    #[error("embedding {index} has zero norm and cannot be normalized")]
    ZeroNormEmbedding { index: usize },
    #[error("assignments are empty")]
    EmptyAssignments,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("input outside [0, 1]: {0}")]
    OutOfRange(f64),
    #[error("gram matrix factorization failed")]
    GramFactorization,
}

/// Absolute error of an aggregate estimate.
pub fn mae(estimate: f64, truth: f64) -> f64 {
    (estimate - truth).abs()
}

/// Smallest 1-based step whose running-estimate MAE is within `threshold`
/// of the truth; `None` when the trajectory never gets there.
pub fn samples_to_threshold(traj: &Trajectory, truth: f64, threshold: f64) -> Option<usize> {
    for step in &traj.steps {
        if let Some(est) = &step.estimate {
            if mae(est.mean, truth) <= threshold {
                return Some(step.iteration);
            }
        }
    }
    None
}

/// Failure counts over a binary-score trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureStats {
    /// Cumulative failure count after each step (skipped steps carry the
    /// previous count).
    pub cumulative: Vec<usize>,
    /// Failures over evaluated (non-skipped) steps.
    pub failure_rate: f64,
    /// 1-based index of the first failure; `None` is the infinity sentinel.
    pub samples_to_first_failure: Option<usize>,
}

pub fn failure_stats(traj: &Trajectory) -> Result<FailureStats, MetricsError> {
    if traj.steps.is_empty() {
        return Err(MetricsError::EmptyTrajectory);
    }
    let mut cumulative = Vec::with_capacity(traj.steps.len());
    let mut failures = 0usize;
    let mut evaluated = 0usize;
    let mut sff = None;
    for step in &traj.steps {
        if let Some(y) = step.observed {
            evaluated += 1;
            if y >= 0.5 {
                failures += 1;
                if sff.is_none() {
                    sff = Some(step.iteration);
                }
            }
        }
        cumulative.push(failures);
    }
    let failure_rate = if evaluated == 0 {
        0.0
    } else {
        failures as f64 / evaluated as f64
    };
    Ok(FailureStats {
        cumulative,
        failure_rate,
        samples_to_first_failure: sff,
    })
}

/// Log-determinant embedding diversity: raw `(1/n) log det(K + eps I)` over
/// the Gram of L2-normalized embeddings, and `exp(raw)` clamped to [0, 1]
/// (the geometric-mean eigenvalue; orthonormal embeddings score ~1,
/// duplicates ~0).
pub fn embedding_diversity(
    embeddings: &[FeatureVector],
    n_cap: usize,
    eps: f64,
) -> Result<(f64, f64), MetricsError> {
    if embeddings.len() < 2 {
        return Err(MetricsError::TooFewEmbeddings {
            needed: 2,
            got: embeddings.len(),
        });
    }
    // deterministic prefix subsample in trajectory order
    let used = &embeddings[..embeddings.len().min(n_cap)];
    let n = used.len();
    let mut normalized: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (index, e) in used.iter().enumerate() {
        let norm = e.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(MetricsError::ZeroNormEmbedding { index });
        }
        normalized.push(e.as_slice().iter().map(|v| v / norm).collect());
    }
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = normalized[i]
                .iter()
                .zip(&normalized[j])
                .map(|(a, b)| a * b)
                .sum();
            gram[(i, j)] = dot;
            gram[(j, i)] = dot;
        }
        gram[(i, i)] += eps;
    }
    let factor = crate::linalg::CholeskyFactor::factor(&gram, 0.0)
        .or_else(|| factor_with_jitter(&gram).map(|(f, _)| f))
        .ok_or(MetricsError::GramFactorization)?;
    let raw = factor.log_det() / n as f64;
    let normalized_score = raw.exp().clamp(0.0, 1.0);
    Ok((raw, normalized_score))
}

/// Shannon entropy of the topic distribution, normalized by log2 of the
/// number of distinct topics present; a single topic scores 0.
pub fn topic_entropy(assignments: &[String]) -> Result<f64, MetricsError> {
    if assignments.is_empty() {
        return Err(MetricsError::EmptyAssignments);
    }
    let mut counts = std::collections::BTreeMap::new();
    for a in assignments {
        *counts.entry(a.clone()).or_insert(0usize) += 1;
    }
    let t = counts.len();
    if t == 1 {
        return Ok(0.0);
    }
    let n = assignments.len() as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    Ok(h / (t as f64).log2())
}

/// Composite diversity `w1 * H + w2 * min(D/2, 1)` over the normalized
/// topic entropy and normalized embedding diversity.
pub fn overall_diversity(
    h_norm: f64,
    d_emb_normalized: f64,
    w1: f64,
    w2: f64,
) -> Result<f64, MetricsError> {
    for v in [h_norm, d_emb_normalized] {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricsError::OutOfRange(v));
        }
    }
    Ok(w1 * h_norm + w2 * (d_emb_normalized / 2.0).min(1.0))
}

/// Full diversity report for a discovery run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub topic_entropy: f64,
    pub embedding_diversity_raw: f64,
    pub embedding_diversity: f64,
    pub overall: f64,
    pub n_used: usize,
    pub w1: f64,
    pub w2: f64,
}

/// Compute the report from embeddings and topic assignments with the
/// default n = 100 cap and eps = 1e-6.
pub fn diversity_report(
    embeddings: &[FeatureVector],
    assignments: &[String],
    w1: f64,
    w2: f64,
) -> Result<DiversityReport, MetricsError> {
    let (raw, normalized) = embedding_diversity(embeddings, 100, 1e-6)?;
    let h = topic_entropy(assignments)?;
    let overall = overall_diversity(h, normalized, w1, w2)?;
    Ok(DiversityReport {
        topic_entropy: h,
        embedding_diversity_raw: raw,
        embedding_diversity: normalized,
        overall,
        n_used: embeddings.len().min(100),
        w1,
        w2,
    })
}
