//! Bayesian-quadrature performance estimation and the active acquisition
//! loop.
//!
//! With a GP posterior over the per-input score, the aggregate score
//! `S = (1/M) sum_j f(x_j)` over a finite pool is Gaussian with mean
//! `(1/M) sum_j mu_t(x_j)` and variance `(1/M^2) sum_jj' k_t(x_j, x_j')`.
//! The active rule greedily evaluates the candidate whose hypothetical
//! observation reduces that variance the most. Because GP posterior
//! covariances do not depend on observed values, the acquisition is a pure
//! function of the features, and for linear kernels it reduces to an O(d^2)
//! expression in the cached precision-style state.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gp::{GpError, GpInput, GpPosterior, GpPrior, KernelSpec, Observations};
use crate::transfer::Scenario;
use crate::InputId;

#[derive(Debug, thiserror::Error)]
pub enum QuadratureError {
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("budget must be >= 1")]
    ZeroBudget,
    #[error("candidate `{0}` is not part of the test set")]
    UnknownCandidate(InputId),
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Posterior estimate of the aggregate score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureEstimate {
    pub mean: f64,
    pub variance: f64,
    /// Mean of the per-input posterior means rounded to {0, 1} (half-up),
    /// the discrete-score variant.
    pub rounded_mean: f64,
}

/// Pool, candidates, and budget for one estimation run. The test pool is
/// treated as a uniform sample of the input distribution.
#[derive(Debug, Clone)]
pub struct QuadratureConfig {
    pub test_set: Vec<GpInput>,
    pub candidate_ids: Vec<InputId>,
    pub budget: usize,
    pub scenario: Scenario,
    /// Allow re-evaluating the same input (off by default).
    pub with_replacement: bool,
}

impl QuadratureConfig {
    pub fn new(
        test_set: Vec<GpInput>,
        candidate_ids: Vec<InputId>,
        budget: usize,
        scenario: Scenario,
    ) -> Result<Self, QuadratureError> {
        if test_set.is_empty() {
            return Err(QuadratureError::EmptyTestSet);
        }
        if candidate_ids.is_empty() {
            return Err(QuadratureError::EmptyCandidates);
        }
        if budget == 0 {
            return Err(QuadratureError::ZeroBudget);
        }
        let ids: BTreeSet<&InputId> = test_set.iter().map(|i| &i.id).collect();
        for c in &candidate_ids {
            if !ids.contains(c) {
                return Err(QuadratureError::UnknownCandidate(c.clone()));
            }
        }
        Ok(Self {
            test_set,
            candidate_ids,
            budget,
            scenario,
            with_replacement: false,
        })
    }
}

/// How the next evaluation is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Greedy variance reduction.
    Active,
    /// Uniform without replacement.
    Random { seed: u64 },
}

/// One record of the evaluation loop. Estimation runs fill the estimate
/// fields; discovery runs add prompts, topics, and provider responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    /// 1-based step index.
    pub iteration: usize,
    pub input_id: InputId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquisition_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<QuadratureEstimate>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anchors: Vec<InputId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl TrajectoryStep {
    pub fn bare(iteration: usize, input_id: impl Into<InputId>) -> Self {
        Self {
            iteration,
            input_id: input_id.into(),
            observed: None,
            acquisition_value: None,
            estimate: None,
            skipped: false,
            topic_id: None,
            anchors: Vec::new(),
            question: None,
            prompt: None,
            raw_response: None,
            ground_truth: None,
            parsed_answer: None,
            embedding: None,
        }
    }
}

/// Ordered log of one evaluation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_estimate: Option<QuadratureEstimate>,
    /// Populated when the run terminated early (oracle/provider failure).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).expect("step serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut steps = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            steps.push(serde_json::from_str(line)?);
        }
        let final_estimate = steps
            .iter()
            .rev()
            .find_map(|s: &TrajectoryStep| s.estimate.clone());
        Ok(Self {
            steps,
            final_estimate,
            error: None,
        })
    }
}

/// Aggregate-score posterior over the test pool: the finite-pool mean and
/// double-sum variance, plus the rounded variant.
pub fn bq_estimate(
    post: &GpPosterior,
    test_set: &[GpInput],
) -> Result<QuadratureEstimate, QuadratureError> {
    if test_set.is_empty() {
        return Err(QuadratureError::EmptyTestSet);
    }
    let m = test_set.len() as f64;
    let mut mean_acc = 0.0;
    let mut rounded_acc = 0.0;
    for input in test_set {
        let (mu, _) = post.predict(input, input)?;
        mean_acc += mu;
        rounded_acc += if mu >= 0.5 { 1.0 } else { 0.0 };
    }
    let variance = match (post.linear_state(), post.num_observations()) {
        (Some(st), _) => {
            // (1/M^2) sum_jj' phi_j' K~ phi_j'' collapses to s' K~ s
            let d = st.dim();
            let mut s = vec![0.0; d];
            for input in test_set {
                for (acc, v) in s.iter_mut().zip(input.features.as_slice()) {
                    *acc += v / m;
                }
            }
            let kt = st.k_tilde();
            let mut acc = 0.0;
            for i in 0..d {
                let mut row = 0.0;
                for j in 0..d {
                    row += kt[(i, j)] * s[j];
                }
                acc += s[i] * row;
            }
            acc
        }
        _ => {
            // generic double sum over posterior covariances
            let mut acc = 0.0;
            for (i, a) in test_set.iter().enumerate() {
                for b in &test_set[i..] {
                    let (_, c) = post.predict(a, b)?;
                    // off-diagonal pairs count twice
                    acc += if std::ptr::eq(a, b) { c } else { 2.0 * c };
                }
            }
            acc / (m * m)
        }
    };
    let variance = if variance < 0.0 && variance > -1e-9 {
        0.0
    } else {
        variance
    };
    Ok(QuadratureEstimate {
        mean: mean_acc / m,
        variance,
        rounded_mean: rounded_acc / m,
    })
}

fn remaining_candidates<'a>(
    config: &'a QuadratureConfig,
    observed: &BTreeSet<InputId>,
) -> Vec<&'a InputId> {
    let mut out: Vec<&InputId> = config
        .candidate_ids
        .iter()
        .filter(|c| config.with_replacement || !observed.contains(*c))
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Variance reduction from hypothetically observing `x`:
/// `V[S | D_t] - V[S | D_t + x]`. For linear kernels this is the closed-form
/// `(s' K~ phi)^2 / (sigma^2 + phi' K~ phi)` with `s` the mean pool feature;
/// for general kernels the rank-one posterior-update identity
/// `w(x)^2 / (k_t(x,x) + sigma^2)` with `w` the mean posterior covariance
/// against the pool.
pub fn variance_reduction(
    post: &GpPosterior,
    test_set: &[GpInput],
    x: &GpInput,
) -> Result<f64, QuadratureError> {
    let m = test_set.len() as f64;
    let sigma2 = post.prior().noise_variance;
    if let Some(st) = post.linear_state() {
        let d = st.dim();
        let mut s = vec![0.0; d];
        for input in test_set {
            for (acc, v) in s.iter_mut().zip(input.features.as_slice()) {
                *acc += v / m;
            }
        }
        let kt = st.k_tilde();
        let phi = x.features.as_slice();
        let mut skp = 0.0; // s' K~ phi
        let mut pkp = 0.0; // phi' K~ phi
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += kt[(i, j)] * phi[j];
            }
            skp += s[i] * row;
            pkp += phi[i] * row;
        }
        return Ok(skp * skp / (sigma2 + pkp));
    }
    if matches!(post.prior().kernel, KernelSpec::Linear) && post.num_observations() == 0 {
        // empty linear posterior: K~_0 = I
        let mut s = vec![0.0; x.features.dim()];
        for input in test_set {
            for (acc, v) in s.iter_mut().zip(input.features.as_slice()) {
                *acc += v / m;
            }
        }
        let phi = x.features.as_slice();
        let skp: f64 = s.iter().zip(phi).map(|(a, b)| a * b).sum();
        let pkp: f64 = phi.iter().map(|v| v * v).sum();
        return Ok(skp * skp / (sigma2 + pkp));
    }
    let mut w = 0.0;
    for input in test_set {
        let (_, c) = post.predict(input, x)?;
        w += c / m;
    }
    let (_, vx) = post.predict(x, x)?;
    Ok(w * w / (vx + sigma2))
}

/// Choose the unevaluated candidate maximizing the variance reduction,
/// breaking ties toward the lowest input id.
pub fn acquire_next(
    post: &GpPosterior,
    config: &QuadratureConfig,
) -> Result<InputId, QuadratureError> {
    let observed: BTreeSet<InputId> = post
        .observations()
        .inputs
        .iter()
        .map(|i| i.id.clone())
        .collect();
    acquire_from(post, config, &observed).map(|(id, _)| id)
}

fn acquire_from(
    post: &GpPosterior,
    config: &QuadratureConfig,
    observed: &BTreeSet<InputId>,
) -> Result<(InputId, f64), QuadratureError> {
    let by_id: BTreeMap<&InputId, &GpInput> = config.test_set.iter().map(|i| (&i.id, i)).collect();
    let candidates = remaining_candidates(config, observed);
    if candidates.is_empty() {
        return Err(QuadratureError::EmptyCandidates);
    }
    let mut best: Option<(&InputId, f64)> = None;
    for id in candidates {
        let input = by_id[id];
        let red = variance_reduction(post, &config.test_set, input)?;
        match best {
            Some((_, b)) if red <= b => {}
            _ => best = Some((id, red)),
        }
    }
    let (id, value) = best.expect("nonempty candidates");
    Ok((id.clone(), value))
}

/// Greedy batch acquisition: pick the top candidate, apply the hypothetical
/// (observation-free) posterior update, repeat. With `b = 1` this is
/// [`acquire_next`].
pub fn acquire_batch(
    post: &GpPosterior,
    config: &QuadratureConfig,
    b: usize,
) -> Result<Vec<InputId>, QuadratureError> {
    let by_id: BTreeMap<&InputId, &GpInput> = config.test_set.iter().map(|i| (&i.id, i)).collect();
    let mut observed: BTreeSet<InputId> = post
        .observations()
        .inputs
        .iter()
        .map(|i| i.id.clone())
        .collect();
    let mut hypothetical = post.clone();
    let mut picked = Vec::new();
    for _ in 0..b {
        let Ok((id, _)) = acquire_from(&hypothetical, config, &observed) else {
            break;
        };
        let input = (*by_id[&id]).clone();
        // covariances are independent of the observed value, so any finite
        // placeholder works for the hypothetical update
        let mu = hypothetical.predict(&input, &input)?.0;
        hypothetical = hypothetical.extend(input, mu)?;
        observed.insert(id.clone());
        picked.push(id);
    }
    if picked.is_empty() {
        return Err(QuadratureError::EmptyCandidates);
    }
    Ok(picked)
}

/// Run the estimation loop: select (actively or at random), evaluate through
/// the oracle, condition the posterior, and record the running estimate.
/// Oracle failures truncate the trajectory, preserving completed steps.
pub fn run_estimation<F>(
    prior: &GpPrior,
    config: &QuadratureConfig,
    mut oracle: F,
    selection: SelectionMode,
) -> Result<Trajectory, QuadratureError>
where
    F: FnMut(&InputId) -> Result<f64, String>,
{
    let by_id: BTreeMap<&InputId, &GpInput> = config.test_set.iter().map(|i| (&i.id, i)).collect();
    let mut post = GpPosterior::condition(prior.clone(), Observations::empty())?;
    let mut observed = BTreeSet::new();
    let mut rng = match selection {
        SelectionMode::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        SelectionMode::Active => None,
    };
    let mut trajectory = Trajectory::default();
    let total = config.budget.min(if config.with_replacement {
        config.budget
    } else {
        config.candidate_ids.len()
    });
    for iteration in 1..=total {
        let (id, acq) = match (&selection, rng.as_mut()) {
            (SelectionMode::Active, _) => {
                let (id, value) = acquire_from(&post, config, &observed)?;
                (id, Some(value))
            }
            (SelectionMode::Random { .. }, Some(rng)) => {
                let remaining = remaining_candidates(config, &observed);
                if remaining.is_empty() {
                    break;
                }
                let pick = rng.gen_range(0..remaining.len());
                (remaining[pick].clone(), None)
            }
            _ => unreachable!("random mode always has an rng"),
        };
        let input = (*by_id[&id]).clone();
        match oracle(&id) {
            Ok(y) => {
                post = post.extend(input, y)?;
                observed.insert(id.clone());
                let estimate = bq_estimate(&post, &config.test_set)?;
                trajectory.steps.push(TrajectoryStep {
                    observed: Some(y),
                    acquisition_value: acq,
                    estimate: Some(estimate.clone()),
                    ..TrajectoryStep::bare(iteration, id)
                });
                trajectory.final_estimate = Some(estimate);
            }
            Err(message) => {
                trajectory.steps.push(TrajectoryStep {
                    skipped: true,
                    acquisition_value: acq,
                    ..TrajectoryStep::bare(iteration, id)
                });
                trajectory.error = Some(format!("oracle failed at step {iteration}: {message}"));
                break;
            }
        }
    }
    Ok(trajectory)
}
