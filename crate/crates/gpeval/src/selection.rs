//! Source-model selection with abstention.
//!
//! Before building a transfer prior, the caller must decide which historical
//! models are compatible with the target. The strategies here range from
//! "use everything except the target" to GMM clustering over PCA-reduced
//! behavior profiles with a minimum-cluster-size abstention rule, plus
//! correlation, distance, likelihood, and normality-test heuristics. The
//! target model is never part of the returned source set.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::gp::FeatureVector;
use crate::linalg::{factor_with_jitter, sym_inverse};
use crate::ModelId;

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("need at least {needed} profiles, got {got}")]
    TooFewProfiles { needed: usize, got: usize },
    #[error("target `{0}` not found among profiles")]
    TargetMissing(ModelId),
    #[error("profiles have inconsistent dimensions: {expected} vs {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sequences must have equal length >= 2")]
    BadSequenceLength,
    #[error("k range {lo}..={hi} invalid for {n} profiles")]
    BadKRange { lo: usize, hi: usize, n: usize },
    #[error("covariance singular after regularization")]
    SingularCovariance,
    #[error("top-k = {k} exceeds the {n} available candidates")]
    NotEnoughCandidates { k: usize, n: usize },
    #[error("raw score vectors required for correlation strategies")]
    MissingRawScores,
    #[error("invalid threshold {0}; must lie in (0, 1)")]
    BadThreshold(f64),
}

/// Behavior profile of one model: PCA-reduced per-question predictions on
/// the reference benchmarks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: ModelId,
    pub features: FeatureVector,
}

/// Correlation flavor for [`SelectionStrategy::Correlation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationKind {
    Spearman,
    Pearson,
}

/// Inclusion rule for correlation selection: keep the k best or everything
/// above a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationRule {
    TopK(usize),
    Threshold(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "strategy")]
pub enum SelectionStrategy {
    /// All models except the target, optionally abstaining when the best
    /// Spearman correlation with the target falls below the threshold.
    LooPrior { spearman_threshold: Option<f64> },
    /// GMM clustering over profiles; keep the target's cluster (minus the
    /// target), abstain when fewer than `min_sources` remain.
    Gmm {
        min_sources: usize,
        k_min: usize,
        k_max: usize,
        seed: u64,
    },
    /// Rank or product-moment correlation of raw score vectors.
    Correlation {
        kind: CorrelationKind,
        rule: CorrelationRule,
    },
    /// Nearest candidates under the Mahalanobis distance on profiles;
    /// optional chi-square out-of-distribution abstention.
    Mahalanobis {
        top_k: usize,
        ood_alpha: Option<f64>,
    },
    /// Highest leave-one-out Gaussian log-likelihood.
    LooLikelihood { top_k: usize },
    /// Keep candidates whose Hotelling-style T^2 p-value exceeds alpha.
    HotellingTest { alpha: f64 },
    /// Top-k by Fisher-combined Mardia skewness/kurtosis p-value.
    MardiaTest { top_k: usize },
}

/// Outcome of a selection run. When `abstain` is set the caller must not use
/// `selected` for prior construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<ModelId>,
    pub abstain: bool,
    /// Per-candidate diagnostic score (rho, distance, log-likelihood,
    /// p-value... depending on the strategy).
    pub per_candidate: BTreeMap<ModelId, f64>,
    /// Strategy-level diagnostics (chosen K, BIC, max rho, ...).
    pub extras: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl SelectionResult {
    fn new() -> Self {
        Self {
            selected: Vec::new(),
            abstain: false,
            per_candidate: BTreeMap::new(),
            extras: BTreeMap::new(),
            notes: Vec::new(),
        }
    }
}

/// Mid-rank transform with ties averaged.
fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> (f64, bool) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return (0.0, true);
    }
    (cov / (va.sqrt() * vb.sqrt()), false)
}

/// Spearman rank correlation (Pearson over mid-ranks, ties averaged).
/// Returns `(rho, degenerate)`; a zero-variance side yields rho 0 with the
/// degeneracy flag set.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<(f64, bool), SelectionError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(SelectionError::BadSequenceLength);
    }
    let ra = mid_ranks(a);
    let rb = mid_ranks(b);
    Ok(pearson(&ra, &rb))
}

/// Fitted Gaussian mixture with full covariances.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub assignments: Vec<usize>,
    pub converged: bool,
    pub restart: usize,
}

/// Free-parameter count for BIC: K-1 weights + K d means + K d(d+1)/2
/// covariance entries.
pub fn gmm_param_count(k: usize, d: usize) -> usize {
    (k - 1) + k * d + k * d * (d + 1) / 2
}

const GMM_RESTARTS: usize = 5;
const GMM_MAX_ITER: usize = 200;
const GMM_TOL: f64 = 1e-6;

fn kmeans_pp_init(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(data[rng.gen_range(0..n)].clone());
    while centers.len() < k {
        let d2: Vec<f64> = data
            .iter()
            .map(|x| {
                centers
                    .iter()
                    .map(|c| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centers.push(data[rng.gen_range(0..n)].clone());
            continue;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, w) in d2.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        centers.push(data[pick].clone());
    }
    centers
}

fn log_gaussian(x: &[f64], mean: &[f64], cov_inv: &DMatrix<f64>, log_det: f64) -> f64 {
    let d = x.len();
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += diff[i] * cov_inv[(i, j)] * diff[j];
        }
    }
    -0.5 * (quad + log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())
}

fn regularize(cov: &mut DMatrix<f64>) {
    let d = cov.nrows();
    let trace: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    regularize_with(cov, (1e-6 * trace / d as f64).max(1e-9));
}

/// Add `reg` to the diagonal. EM uses a fixed data-scale regularizer so a
/// component collapsing onto few points cannot drive the likelihood to
/// infinity.
fn regularize_with(cov: &mut DMatrix<f64>, reg: f64) {
    for i in 0..cov.nrows() {
        cov[(i, i)] += reg;
    }
}

fn data_scale_reg(data: &[Vec<f64>]) -> f64 {
    let n = data.len();
    let d = data[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n as f64)
        .collect();
    let trace: f64 = data
        .iter()
        .map(|x| {
            x.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum::<f64>()
        / (n.max(2) - 1) as f64;
    (1e-6 * trace / d as f64).max(1e-9)
}

struct GmmParams {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<DMatrix<f64>>,
}

fn em_fit(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Option<(GmmParams, f64, bool)> {
    let n = data.len();
    let d = data[0].len();
    let reg = data_scale_reg(data);
    let centers = kmeans_pp_init(data, k, rng);
    // initial hard assignment to nearest center
    let mut params = GmmParams {
        weights: vec![1.0 / k as f64; k],
        means: centers,
        covs: vec![DMatrix::identity(d, d); k],
    };
    // pooled covariance as the starting spread
    {
        let mean: Vec<f64> = (0..d)
            .map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n as f64)
            .collect();
        let mut pooled = DMatrix::zeros(d, d);
        for x in data {
            for i in 0..d {
                for j in 0..d {
                    pooled[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
                }
            }
        }
        pooled /= n.max(2) as f64 - 1.0;
        regularize_with(&mut pooled, reg);
        params.covs = vec![pooled; k];
    }
    let mut last_ll = f64::NEG_INFINITY;
    let mut converged = false;
    let mut resp = vec![vec![0.0; k]; n];
    for _ in 0..GMM_MAX_ITER {
        // E step
        let mut invs = Vec::with_capacity(k);
        for c in &params.covs {
            let (f, _) = factor_with_jitter(c)?;
            let inv = sym_inverse(c)?;
            invs.push((inv, f.log_det()));
        }
        let mut ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            let logp: Vec<f64> = (0..k)
                .map(|c| {
                    params.weights[c].max(1e-300).ln()
                        + log_gaussian(x, &params.means[c], &invs[c].0, invs[c].1)
                })
                .collect();
            let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logp.iter().map(|l| (l - max).exp()).sum();
            ll += max + sum.ln();
            for c in 0..k {
                resp[i][c] = ((logp[c] - max).exp()) / sum;
            }
        }
        if (ll - last_ll).abs() < GMM_TOL {
            last_ll = ll;
            converged = true;
            break;
        }
        last_ll = ll;
        // M step
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            // singleton components collapse onto one point and blow up the
            // likelihood; reject the restart (2-point clusters stay legal,
            // the abstention rule depends on them)
            if nk < 1.5 {
                return None;
            }
            let nk_safe = nk.max(1e-12);
            params.weights[c] = nk / n as f64;
            let mut mean = vec![0.0; d];
            for (x, r) in data.iter().zip(&resp) {
                for j in 0..d {
                    mean[j] += r[c] * x[j];
                }
            }
            for m in &mut mean {
                *m /= nk_safe;
            }
            let mut cov = DMatrix::zeros(d, d);
            for (x, r) in data.iter().zip(&resp) {
                for i in 0..d {
                    for j in 0..d {
                        cov[(i, j)] += r[c] * (x[i] - mean[i]) * (x[j] - mean[j]);
                    }
                }
            }
            cov /= nk_safe;
            regularize_with(&mut cov, reg);
            params.means[c] = mean;
            params.covs[c] = cov;
        }
    }
    Some((params, last_ll, converged))
}

/// Fit a GMM for each K in `k_min..=k_max` (5 seeded k-means++ restarts
/// each) and return the fit minimizing BIC. Deterministic given the seed;
/// ties break on (BIC, K, restart index).
pub fn fit_gmm_bic(
    profiles: &[ModelProfile],
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<GmmFit, SelectionError> {
    let n = profiles.len();
    if n < 2 {
        return Err(SelectionError::TooFewProfiles { needed: 2, got: n });
    }
    check_dims(profiles)?;
    if k_min < 1 || k_max > n || k_min > k_max {
        return Err(SelectionError::BadKRange {
            lo: k_min,
            hi: k_max,
            n,
        });
    }
    let data: Vec<Vec<f64>> = profiles
        .iter()
        .map(|p| p.features.as_slice().to_vec())
        .collect();
    let d = data[0].len();
    let mut best: Option<GmmFit> = None;
    for k in k_min..=k_max {
        for restart in 0..GMM_RESTARTS {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (k as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ restart as u64,
            );
            let Some((params, ll, converged)) = em_fit(&data, k, &mut rng) else {
                continue;
            };
            let bic = -2.0 * ll + gmm_param_count(k, d) as f64 * (n as f64).ln();
            let assignments: Vec<usize> = data
                .iter()
                .map(|x| {
                    let mut best_c = 0;
                    let mut best_lp = f64::NEG_INFINITY;
                    for c in 0..k {
                        let inv = sym_inverse(&params.covs[c]).unwrap();
                        let (f, _) = factor_with_jitter(&params.covs[c]).unwrap();
                        let lp = params.weights[c].max(1e-300).ln()
                            + log_gaussian(x, &params.means[c], &inv, f.log_det());
                        if lp > best_lp {
                            best_lp = lp;
                            best_c = c;
                        }
                    }
                    best_c
                })
                .collect();
            let fit = GmmFit {
                k,
                weights: params.weights,
                means: params.means,
                covariances: params.covs,
                log_likelihood: ll,
                bic,
                assignments,
                converged,
                restart,
            };
            let better = match &best {
                None => true,
                Some(b) => (fit.bic, fit.k, fit.restart) < (b.bic, b.k, b.restart),
            };
            if better {
                best = Some(fit);
            }
        }
    }
    best.ok_or(SelectionError::SingularCovariance)
}

fn check_dims(profiles: &[ModelProfile]) -> Result<usize, SelectionError> {
    let d = profiles[0].features.dim();
    for p in profiles {
        if p.features.dim() != d {
            return Err(SelectionError::DimensionMismatch {
                expected: d,
                got: p.features.dim(),
            });
        }
    }
    Ok(d)
}

fn pooled_covariance(profiles: &[ModelProfile]) -> DMatrix<f64> {
    let n = profiles.len();
    let d = profiles[0].features.dim();
    let mean: Vec<f64> = (0..d)
        .map(|j| {
            profiles
                .iter()
                .map(|p| p.features.as_slice()[j])
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let mut cov = DMatrix::zeros(d, d);
    for p in profiles {
        let x = p.features.as_slice();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    cov /= (n.max(2) - 1) as f64;
    regularize(&mut cov);
    cov
}

fn mahalanobis2(x: &[f64], y: &[f64], cov_inv: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for i in 0..d {
        for j in 0..d {
            q += diff[i] * cov_inv[(i, j)] * diff[j];
        }
    }
    q.max(0.0)
}

/// Mardia skewness/kurtosis statistics with Fisher-combined p-value for the
/// two-row matrix [target; candidate]. The rank-1 sample covariance is
/// diagonally regularized before inversion.
fn mardia_combined_p(target: &[f64], cand: &[f64]) -> f64 {
    let d = target.len();
    let n = 2.0;
    let mean: Vec<f64> = target
        .iter()
        .zip(cand)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let rows = [target, cand];
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    regularize(&mut cov);
    let Some(inv) = sym_inverse(&cov) else {
        return 0.0;
    };
    // g_ij = (x_i - mean)' S^{-1} (x_j - mean)
    let mut g = [[0.0; 2]; 2];
    for (a, ra) in rows.iter().enumerate() {
        for (b, rb) in rows.iter().enumerate() {
            let da: Vec<f64> = ra.iter().zip(&mean).map(|(x, m)| x - m).collect();
            let db: Vec<f64> = rb.iter().zip(&mean).map(|(x, m)| x - m).collect();
            let mut q = 0.0;
            for i in 0..d {
                for j in 0..d {
                    q += da[i] * inv[(i, j)] * db[j];
                }
            }
            g[a][b] = q;
        }
    }
    let b1 = (g[0][0].powi(3) + g[0][1].powi(3) + g[1][0].powi(3) + g[1][1].powi(3)) / (n * n);
    let b2 = (g[0][0] * g[0][0] + g[1][1] * g[1][1]) / n;
    let df_skew = d * (d + 1) * (d + 2) / 6;
    let skew_stat = (n * b1 / 6.0).max(0.0);
    let chi_skew = ChiSquared::new(df_skew as f64).expect("positive dof");
    let p_skew = (1.0 - chi_skew.cdf(skew_stat)).clamp(1e-300, 1.0);
    let dd = d as f64;
    let kurt_z = (b2 - dd * (dd + 2.0)) / (8.0 * dd * (dd + 2.0) / n).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p_kurt = (2.0 * (1.0 - normal.cdf(kurt_z.abs()))).clamp(1e-300, 1.0);
    let combined = -2.0 * (p_skew.ln() + p_kurt.ln());
    let chi4 = ChiSquared::new(4.0).expect("positive dof");
    (1.0 - chi4.cdf(combined)).clamp(0.0, 1.0)
}

fn top_k_by<F: Fn(&ModelId) -> f64>(
    candidates: &[ModelId],
    k: usize,
    score: F,
    higher_better: bool,
) -> Result<Vec<ModelId>, SelectionError> {
    if k > candidates.len() {
        return Err(SelectionError::NotEnoughCandidates {
            k,
            n: candidates.len(),
        });
    }
    let mut scored: Vec<(ModelId, f64)> =
        candidates.iter().map(|c| (c.clone(), score(c))).collect();
    scored.sort_by(|a, b| {
        let ord = a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal);
        let ord = if higher_better { ord.reverse() } else { ord };
        ord.then_with(|| a.0.cmp(&b.0))
    });
    Ok(scored.into_iter().take(k).map(|(id, _)| id).collect())
}

/// Raw per-question score vectors, needed by the correlation strategies.
pub type RawScores = BTreeMap<ModelId, Vec<f64>>;

/// Run a selection strategy. `profiles` must contain the target;
/// `raw_scores` (per-question score vectors on the reference benchmark) are
/// required for the correlation-based strategies and the LOO-prior
/// abstention rule.
pub fn select_sources(
    strategy: &SelectionStrategy,
    profiles: &[ModelProfile],
    raw_scores: Option<&RawScores>,
    target_id: &str,
) -> Result<SelectionResult, SelectionError> {
    if profiles.len() < 2 {
        return Err(SelectionError::TooFewProfiles {
            needed: 2,
            got: profiles.len(),
        });
    }
    check_dims(profiles)?;
    let target = profiles
        .iter()
        .find(|p| p.model_id == target_id)
        .ok_or_else(|| SelectionError::TargetMissing(target_id.to_string()))?;
    let candidates: Vec<ModelId> = profiles
        .iter()
        .filter(|p| p.model_id != target_id)
        .map(|p| p.model_id.clone())
        .collect();
    let feature_of = |id: &ModelId| -> &[f64] {
        profiles
            .iter()
            .find(|p| &p.model_id == id)
            .expect("candidate profile")
            .features
            .as_slice()
    };
    let mut result = SelectionResult::new();

    match strategy {
        SelectionStrategy::LooPrior { spearman_threshold } => {
            result.selected = candidates.clone();
            if let Some(tau) = spearman_threshold {
                if !(*tau > 0.0 && *tau < 1.0) {
                    return Err(SelectionError::BadThreshold(*tau));
                }
                let raw = raw_scores.ok_or(SelectionError::MissingRawScores)?;
                let ty = raw.get(target_id).ok_or(SelectionError::MissingRawScores)?;
                let mut rho_max = f64::NEG_INFINITY;
                for c in &candidates {
                    let cy = raw.get(c).ok_or(SelectionError::MissingRawScores)?;
                    let (rho, _) = spearman(ty, cy)?;
                    result.per_candidate.insert(c.clone(), rho);
                    rho_max = rho_max.max(rho);
                }
                result.extras.insert("rho_max".into(), rho_max);
                if rho_max < *tau {
                    result.abstain = true;
                    result
                        .notes
                        .push(format!("max spearman {rho_max:.4} below tau {tau}"));
                }
            }
        }
        SelectionStrategy::Gmm {
            min_sources,
            k_min,
            k_max,
            seed,
        } => {
            let fit = fit_gmm_bic(profiles, *k_min, *k_max, *seed)?;
            let target_idx = profiles
                .iter()
                .position(|p| p.model_id == target_id)
                .expect("target present");
            let target_cluster = fit.assignments[target_idx];
            for (p, assign) in profiles.iter().zip(&fit.assignments) {
                if p.model_id != target_id && *assign == target_cluster {
                    result.selected.push(p.model_id.clone());
                }
                result
                    .per_candidate
                    .insert(p.model_id.clone(), *assign as f64);
            }
            result.extras.insert("k".into(), fit.k as f64);
            result.extras.insert("bic".into(), fit.bic);
            result
                .extras
                .insert("log_likelihood".into(), fit.log_likelihood);
            result
                .extras
                .insert("target_cluster".into(), target_cluster as f64);
            result
                .extras
                .insert("converged".into(), if fit.converged { 1.0 } else { 0.0 });
            if result.selected.len() < *min_sources {
                result.abstain = true;
                result.notes.push(format!(
                    "target cluster has {} other models, below min_sources {}",
                    result.selected.len(),
                    min_sources
                ));
            }
        }
        SelectionStrategy::Correlation { kind, rule } => {
            let raw = raw_scores.ok_or(SelectionError::MissingRawScores)?;
            let ty = raw.get(target_id).ok_or(SelectionError::MissingRawScores)?;
            for c in &candidates {
                let cy = raw.get(c).ok_or(SelectionError::MissingRawScores)?;
                let rho = match kind {
                    CorrelationKind::Spearman => spearman(ty, cy)?.0,
                    CorrelationKind::Pearson => {
                        if ty.len() != cy.len() || ty.len() < 2 {
                            return Err(SelectionError::BadSequenceLength);
                        }
                        pearson(ty, cy).0
                    }
                };
                result.per_candidate.insert(c.clone(), rho);
            }
            match rule {
                CorrelationRule::TopK(k) => {
                    result.selected = top_k_by(&candidates, *k, |c| result.per_candidate[c], true)?;
                }
                CorrelationRule::Threshold(tau) => {
                    if !(*tau > 0.0 && *tau < 1.0) {
                        return Err(SelectionError::BadThreshold(*tau));
                    }
                    result.selected = candidates
                        .iter()
                        .filter(|c| result.per_candidate[*c] >= *tau)
                        .cloned()
                        .collect();
                }
            }
        }
        SelectionStrategy::Mahalanobis { top_k, ood_alpha } => {
            let cov = pooled_covariance(profiles);
            let inv = sym_inverse(&cov).ok_or(SelectionError::SingularCovariance)?;
            for c in &candidates {
                let d2 = mahalanobis2(feature_of(c), target.features.as_slice(), &inv);
                result.per_candidate.insert(c.clone(), d2.sqrt());
            }
            result.selected = top_k_by(&candidates, *top_k, |c| result.per_candidate[c], false)?;
            if let Some(alpha) = ood_alpha {
                if !(*alpha > 0.0 && *alpha < 1.0) {
                    return Err(SelectionError::BadThreshold(*alpha));
                }
                let d = target.features.dim();
                let mean: Vec<f64> = (0..d)
                    .map(|j| {
                        profiles
                            .iter()
                            .map(|p| p.features.as_slice()[j])
                            .sum::<f64>()
                            / profiles.len() as f64
                    })
                    .collect();
                let d2 = mahalanobis2(target.features.as_slice(), &mean, &inv);
                let chi = ChiSquared::new(d as f64).expect("positive dof");
                let cutoff = chi.inverse_cdf(1.0 - alpha);
                result.extras.insert("target_d2".into(), d2);
                result.extras.insert("chi2_cutoff".into(), cutoff);
                if d2 > cutoff {
                    result.abstain = true;
                    result.notes.push(format!(
                        "target squared distance {d2:.4} beyond chi-square cutoff {cutoff:.4}"
                    ));
                }
            }
        }
        SelectionStrategy::LooLikelihood { top_k } => {
            for c in &candidates {
                let rest: Vec<&ModelProfile> =
                    profiles.iter().filter(|p| &p.model_id != c).collect();
                let n = rest.len();
                let d = target.features.dim();
                let mean: Vec<f64> = (0..d)
                    .map(|j| rest.iter().map(|p| p.features.as_slice()[j]).sum::<f64>() / n as f64)
                    .collect();
                let mut cov = DMatrix::zeros(d, d);
                for p in &rest {
                    let x = p.features.as_slice();
                    for i in 0..d {
                        for j in 0..d {
                            cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
                        }
                    }
                }
                cov /= (n.max(3) - 2) as f64;
                regularize(&mut cov);
                let inv = sym_inverse(&cov).ok_or(SelectionError::SingularCovariance)?;
                let (f, _) = factor_with_jitter(&cov).ok_or(SelectionError::SingularCovariance)?;
                let ll = log_gaussian(feature_of(c), &mean, &inv, f.log_det());
                result.per_candidate.insert(c.clone(), ll);
            }
            result.selected = top_k_by(&candidates, *top_k, |c| result.per_candidate[c], true)?;
        }
        SelectionStrategy::HotellingTest { alpha } => {
            if !(*alpha > 0.0 && *alpha < 1.0) {
                return Err(SelectionError::BadThreshold(*alpha));
            }
            let cov = pooled_covariance(profiles);
            let inv = sym_inverse(&cov).ok_or(SelectionError::SingularCovariance)?;
            let d = target.features.dim();
            let chi = ChiSquared::new(d as f64).expect("positive dof");
            if d >= profiles.len() {
                result.notes.push(format!(
                    "warning: {d} feature dimensions >= {} samples; the T^2 test has little power",
                    profiles.len()
                ));
            }
            for c in &candidates {
                let t2 = mahalanobis2(feature_of(c), target.features.as_slice(), &inv);
                let p = (1.0 - chi.cdf(t2)).clamp(0.0, 1.0);
                result.per_candidate.insert(c.clone(), p);
                if p > *alpha {
                    result.selected.push(c.clone());
                }
            }
        }
        SelectionStrategy::MardiaTest { top_k } => {
            for c in &candidates {
                let p = mardia_combined_p(target.features.as_slice(), feature_of(c));
                result.per_candidate.insert(c.clone(), p);
            }
            result.selected = top_k_by(&candidates, *top_k, |c| result.per_candidate[c], true)?;
        }
    }

    debug_assert!(!result.selected.iter().any(|m| m == target_id));
    result.selected.sort();
    Ok(result)
}
