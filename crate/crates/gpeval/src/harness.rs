//! Data ingestion, the synthetic benchmark simulator, estimator-theory
//! validation at desk scale, run orchestration, and the selection-strategy
//! comparison table.
//!
//! The simulator draws N historical score functions plus one target jointly
//! from a configured GP prior over seeded standard-normal features, which
//! satisfies the shared-prior and aligned-inputs assumptions by
//! construction. That is the ground both statistical checks stand on: the
//! estimator-unbiasedness harness compares the transfer-prior estimate
//! against the true-prior posterior over many redraws, and the planted-pool
//! generator produces binary failure regions for the discovery criteria.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discovery::{
    run_discovery, DiscoveryError, DiscoveryGp, DiscoveryStrategy, PoolItem, StrategyKind,
    SuperlevelParams, TopicSource,
};
use crate::gp::{
    FeatureVector, GpError, GpInput, GpPosterior, GpPrior, KernelSpec, MeanSpec, Observations,
};
use crate::linalg::factor_with_jitter;
use crate::metrics::{self, MetricsError};
use crate::providers::{mock_answer_for, MockConfig, ProviderError, ProviderSet, TaskKind};
use crate::quadrature::{
    bq_estimate, run_estimation, QuadratureConfig, QuadratureError, SelectionMode, Trajectory,
};
use crate::selection::{select_sources, RawScores, SelectionError, SelectionStrategy};
use crate::transfer::{
    build_score_feature_prior, build_score_feature_prior_raw, pca_fit_transform, PcaCriterion,
    Scenario, ScoreMatrix, TransferError,
};
use crate::{InputId, ModelId};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(String),
    #[error("bad score record on line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("duplicate cell ({model}, {input}) in benchmark `{benchmark}`")]
    DuplicateCell {
        model: ModelId,
        input: InputId,
        benchmark: String,
    },
    #[error("missing cell: model `{model}` has no score for input `{input}`")]
    MissingCell { model: ModelId, input: InputId },
    #[error("file holds benchmarks {found:?}; pass one explicitly")]
    AmbiguousBenchmark { found: Vec<String> },
    #[error("benchmark `{0}` not present in file")]
    UnknownBenchmark(String),
    #[error("config: {0}")]
    Config(String),
    #[error("simulation needs N >= {needed} (got {got}) for this report")]
    TooFewModels { needed: usize, got: usize },
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

/// One scored cell of a benchmark file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub model_id: ModelId,
    pub input_id: InputId,
    pub score: f64,
    pub benchmark: String,
}

/// Load a dense score matrix from a JSONL file of [`ScoreRecord`]s. With
/// `allow_missing`, inputs missing any model's score are dropped; otherwise
/// a missing cell is an alignment error naming the cell.
pub fn load_score_matrix(
    path: &Path,
    benchmark: Option<&str>,
    allow_missing: bool,
) -> Result<ScoreMatrix, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ScoreRecord =
            serde_json::from_str(line).map_err(|e| HarnessError::BadRecord {
                line: idx + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    let benchmarks: BTreeSet<String> = records.iter().map(|r| r.benchmark.clone()).collect();
    let chosen = match benchmark {
        Some(b) => {
            if !benchmarks.contains(b) {
                return Err(HarnessError::UnknownBenchmark(b.to_string()));
            }
            b.to_string()
        }
        None => {
            if benchmarks.len() != 1 {
                return Err(HarnessError::AmbiguousBenchmark {
                    found: benchmarks.into_iter().collect(),
                });
            }
            benchmarks.into_iter().next().expect("one benchmark")
        }
    };
    let mut cells: BTreeMap<(ModelId, InputId), f64> = BTreeMap::new();
    let mut model_ids = Vec::new();
    let mut input_ids = Vec::new();
    for r in records.into_iter().filter(|r| r.benchmark == chosen) {
        if !model_ids.contains(&r.model_id) {
            model_ids.push(r.model_id.clone());
        }
        if !input_ids.contains(&r.input_id) {
            input_ids.push(r.input_id.clone());
        }
        if cells
            .insert((r.model_id.clone(), r.input_id.clone()), r.score)
            .is_some()
        {
            return Err(HarnessError::DuplicateCell {
                model: r.model_id,
                input: r.input_id,
                benchmark: chosen,
            });
        }
    }
    if allow_missing {
        input_ids.retain(|input| {
            model_ids
                .iter()
                .all(|m| cells.contains_key(&(m.clone(), input.clone())))
        });
    }
    let mut scores = Vec::with_capacity(model_ids.len());
    for m in &model_ids {
        let mut row = Vec::with_capacity(input_ids.len());
        for input in &input_ids {
            match cells.get(&(m.clone(), input.clone())) {
                Some(v) => row.push(*v),
                None => {
                    return Err(HarnessError::MissingCell {
                        model: m.clone(),
                        input: input.clone(),
                    })
                }
            }
        }
        scores.push(row);
    }
    Ok(ScoreMatrix::new(model_ids, input_ids, scores)?)
}

/// Inverse of [`load_score_matrix`]: one record per cell.
pub fn save_score_matrix(
    matrix: &ScoreMatrix,
    benchmark: &str,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut file = std::fs::File::create(path)?;
    for (i, model) in matrix.model_ids.iter().enumerate() {
        for (j, input) in matrix.input_ids.iter().enumerate() {
            let record = ScoreRecord {
                model_id: model.clone(),
                input_id: input.clone(),
                score: matrix.scores[i][j],
                benchmark: benchmark.to_string(),
            };
            writeln!(
                file,
                "{}",
                serde_json::to_string(&record).expect("record serializes")
            )?;
        }
    }
    Ok(())
}

/// A fully synthetic benchmark drawn from a known GP prior: N historical
/// models plus one target share functions sampled jointly over the same
/// pool, with Gaussian observation noise on the historical scores.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub inputs: Vec<GpInput>,
    pub model_ids: Vec<ModelId>,
    /// N x M noisy historical scores (continuous).
    pub historical_scores: Vec<Vec<f64>>,
    /// True target function values over the pool.
    pub target_true: Vec<f64>,
    /// Pre-drawn noisy target observations, one per pool input.
    pub target_noisy: Vec<f64>,
    /// S*: the pool mean of the true target function.
    pub ground_truth: f64,
    pub sigma2: f64,
}

impl SyntheticBenchmark {
    pub fn input_ids(&self) -> Vec<InputId> {
        self.inputs.iter().map(|i| i.id.clone()).collect()
    }

    /// Transfer prior from the historical scores with the given
    /// conditioning noise.
    pub fn score_feature_prior(
        &self,
        sigma2: f64,
    ) -> Result<crate::transfer::ScoreFeaturePrior, TransferError> {
        build_score_feature_prior_raw(&self.input_ids(), &self.historical_scores, sigma2)
    }

    /// Noisy-target oracle keyed by input id.
    pub fn oracle(&self) -> impl Fn(&InputId) -> Result<f64, String> + '_ {
        move |id: &InputId| {
            self.inputs
                .iter()
                .position(|i| &i.id == id)
                .map(|j| self.target_noisy[j])
                .ok_or_else(|| format!("unknown input {id}"))
        }
    }

    /// Round historical and target scores to {0, 1} at 0.5.
    pub fn binarize(&self) -> SyntheticBenchmark {
        let round = |v: f64| if v >= 0.5 { 1.0 } else { 0.0 };
        SyntheticBenchmark {
            inputs: self.inputs.clone(),
            model_ids: self.model_ids.clone(),
            historical_scores: self
                .historical_scores
                .iter()
                .map(|row| row.iter().map(|v| round(*v)).collect())
                .collect(),
            target_true: self.target_true.iter().map(|v| round(*v)).collect(),
            target_noisy: self.target_noisy.iter().map(|v| round(*v)).collect(),
            ground_truth: self.target_true.iter().map(|v| round(*v)).sum::<f64>()
                / self.target_true.len() as f64,
            sigma2: self.sigma2,
        }
    }
}

/// Draw a synthetic benchmark: M seeded standard-normal feature vectors,
/// N+1 function vectors jointly Gaussian under the prior, and observation
/// noise on every score. Deterministic per seed.
pub fn simulate_benchmark(
    prior: &GpPrior,
    n_models: usize,
    m_inputs: usize,
    sigma2: f64,
    feature_dim: usize,
    seed: u64,
) -> Result<SyntheticBenchmark, HarnessError> {
    if n_models == 0 || m_inputs == 0 {
        return Err(HarnessError::Config("N and M must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (m_inputs as f64).log10().ceil().max(1.0) as usize + 1;
    let inputs: Vec<GpInput> = (0..m_inputs)
        .map(|j| {
            let features: Vec<f64> = (0..feature_dim)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            GpInput::new(
                format!("x{j:0width$}", width = width),
                FeatureVector::new(features).expect("finite normals"),
            )
        })
        .collect();
    let mean: Vec<f64> = inputs
        .iter()
        .map(|i| prior.mean.eval(i))
        .collect::<Result<_, _>>()
        .map_err(HarnessError::Gp)?;
    let mut gram = nalgebra::DMatrix::zeros(m_inputs, m_inputs);
    for a in 0..m_inputs {
        for b in 0..=a {
            let v = prior
                .kernel
                .eval(&inputs[a].features, &inputs[b].features)?;
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let (factor_l, _) = factor_with_jitter(&gram).ok_or(GpError::ConditioningFailure)?;
    let lower = factor_lower(&factor_l, m_inputs);
    let draw_function = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let z: Vec<f64> = (0..m_inputs)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        (0..m_inputs)
            .map(|a| mean[a] + (0..=a).map(|b| lower[a][b] * z[b]).sum::<f64>())
            .collect()
    };
    let sigma = sigma2.sqrt();
    let mut historical_scores = Vec::with_capacity(n_models);
    let mut model_ids = Vec::with_capacity(n_models);
    for i in 0..n_models {
        let f = draw_function(&mut rng);
        let noisy: Vec<f64> = f
            .iter()
            .map(|v| v + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        historical_scores.push(noisy);
        model_ids.push(format!("m{i:03}"));
    }
    let target_true = draw_function(&mut rng);
    let target_noisy: Vec<f64> = target_true
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let ground_truth = target_true.iter().sum::<f64>() / m_inputs as f64;
    Ok(SyntheticBenchmark {
        inputs,
        model_ids,
        historical_scores,
        target_true,
        target_noisy,
        ground_truth,
        sigma2,
    })
}

fn factor_lower(factor: &crate::linalg::CholeskyFactor, _n: usize) -> Vec<Vec<f64>> {
    factor.dense_lower()
}

/// Which estimator a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationMethod {
    /// GP quadrature (active or random selection).
    Bq,
    /// Uniform sampling with the plain sample mean.
    Random,
    /// Surrogate-guided importance sampling.
    Is,
    /// Surrogate-guided LURE weighting.
    Lure,
}

/// Summary metrics of an estimation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationMetrics {
    pub final_mean: f64,
    pub final_variance: Option<f64>,
    pub final_rounded: Option<f64>,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    /// Smallest step within 1% MAE of the truth; None = never reached.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_to_1pct: Option<usize>,
}

/// Compute estimation metrics from a trajectory and optional ground truth.
pub fn estimation_metrics(traj: &Trajectory, truth: Option<f64>) -> EstimationMetrics {
    let final_est = traj.final_estimate.clone();
    EstimationMetrics {
        final_mean: final_est.as_ref().map(|e| e.mean).unwrap_or(f64::NAN),
        final_variance: final_est.as_ref().map(|e| e.variance),
        final_rounded: final_est.as_ref().map(|e| e.rounded_mean),
        steps: traj.steps.len(),
        ground_truth: truth,
        mae: truth
            .zip(final_est.as_ref().map(|e| e.mean))
            .map(|(t, m)| metrics::mae(m, t)),
        samples_to_1pct: truth.and_then(|t| metrics::samples_to_threshold(traj, t, 0.01)),
    }
}

/// Summary metrics of a discovery run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscoveryMetrics {
    pub steps: usize,
    pub failures: usize,
    pub failure_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_to_first_failure: Option<usize>,
    pub cumulative: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topic_entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_diversity_raw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overall_diversity: Option<f64>,
}

/// Compute discovery metrics from a trajectory. Diversity terms appear when
/// the steps carry embeddings/topics; `w1`/`w2` weight the composite.
pub fn discovery_metrics(
    traj: &Trajectory,
    w1: f64,
    w2: f64,
) -> Result<DiscoveryMetrics, HarnessError> {
    let stats = metrics::failure_stats(traj)?;
    let embeddings: Vec<FeatureVector> = traj
        .steps
        .iter()
        .filter_map(|s| s.embedding.as_ref())
        .map(|e| FeatureVector::new(e.clone()).map_err(HarnessError::Gp))
        .collect::<Result<_, _>>()?;
    let topics: Vec<String> = traj
        .steps
        .iter()
        .filter_map(|s| s.topic_id.clone())
        .collect();
    let (ed_raw, ed_norm) = if embeddings.len() >= 2 {
        let (raw, norm) = metrics::embedding_diversity(&embeddings, 100, 1e-6)?;
        (Some(raw), Some(norm))
    } else {
        (None, None)
    };
    let entropy = if topics.is_empty() {
        None
    } else {
        Some(metrics::topic_entropy(&topics)?)
    };
    let overall = match (entropy, ed_norm) {
        (Some(h), Some(d)) => Some(metrics::overall_diversity(h, d, w1, w2)?),
        _ => None,
    };
    let failures = *stats.cumulative.last().unwrap_or(&0);
    Ok(DiscoveryMetrics {
        steps: traj.steps.len(),
        failures,
        failure_rate: stats.failure_rate,
        samples_to_first_failure: stats.samples_to_first_failure,
        cumulative: stats.cumulative,
        topic_entropy: entropy,
        embedding_diversity: ed_norm,
        embedding_diversity_raw: ed_raw,
        overall_diversity: overall,
    })
}

/// Unbiasedness and bound report for the transfer-prior quadrature
/// estimator, computed on the simulator where the modeling assumptions hold
/// by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremReport {
    pub n_models: usize,
    pub m_inputs: usize,
    pub repetitions: usize,
    pub delta: f64,
    pub kappa: f64,
    pub sigma2: f64,
    pub rows: Vec<TheoremRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremRow {
    pub t: usize,
    /// Mean of (transfer-prior estimate - true-posterior estimate).
    pub bias: f64,
    pub std_err: f64,
    pub within_3se: bool,
    /// a' sqrt(kappa + sigma^2) at the configured delta; None when
    /// N < t + 3 (the prefactor is undefined there).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation_fraction: Option<f64>,
}

/// The deviation-bound prefactor
/// `sqrt(4 M (t + 1 + 2 sqrt(t ln(4M/d)) + 2 ln(4M/d) - 2/N) / ((N-t-2) d))`,
/// defined for N >= t + 3.
pub fn bound_prefactor(n: usize, m: usize, t: usize, delta: f64) -> Option<f64> {
    if n < t + 3 {
        return None;
    }
    let (nf, mf, tf) = (n as f64, m as f64, t as f64);
    let log_term = (4.0 * mf / delta).ln();
    let numerator =
        4.0 * mf * (tf + 1.0 + 2.0 * (tf * log_term).sqrt() + 2.0 * log_term - 2.0 / nf);
    Some((numerator / ((nf - tf - 2.0) * delta)).sqrt())
}

/// Run the estimator validation: per repetition, redraw historical data and
/// the target, condition the transfer-prior and true-prior posteriors on
/// the same t observations, and record the difference of the two pool-mean
/// estimates. The sample covariance of noisy historical rows already
/// carries the observation noise on its diagonal, so the transfer prior
/// conditions with a small noise floor instead of adding sigma^2 again.
pub fn theorem_validation(
    prior: &GpPrior,
    n_models: usize,
    m_inputs: usize,
    sigma2: f64,
    feature_dim: usize,
    t_values: &[usize],
    repetitions: usize,
    delta: f64,
    seed: u64,
) -> Result<TheoremReport, HarnessError> {
    let max_t = *t_values.iter().max().unwrap_or(&1);
    if max_t >= m_inputs {
        return Err(HarnessError::Config("t must be below M".into()));
    }
    let mut diffs: BTreeMap<usize, Vec<f64>> = t_values
        .iter()
        .map(|t| (*t, Vec::with_capacity(repetitions)))
        .collect();
    let mut kappa: f64 = 0.0;
    for rep in 0..repetitions {
        let bench = simulate_benchmark(
            prior,
            n_models,
            m_inputs,
            sigma2,
            feature_dim,
            seed ^ (rep as u64).wrapping_mul(0x9e3779b97f4a7c15),
        )?;
        for input in &bench.inputs {
            kappa = kappa.max(prior.kernel.eval(&input.features, &input.features)?);
        }
        // conditioning points chosen independently of the scores
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(rep as u64).wrapping_mul(31));
        let mut order: Vec<usize> = (0..m_inputs).collect();
        order.shuffle(&mut rng);
        let transfer = bench.score_feature_prior(1e-6)?;
        let transfer_prior = transfer.to_gp_prior()?;
        let transfer_inputs = transfer.gp_inputs(&bench.input_ids());
        let mut est_post = GpPosterior::condition(transfer_prior, Observations::empty())?;
        let mut true_post = GpPosterior::condition(prior.clone(), Observations::empty())?;
        let mut observed = 0usize;
        let mut sorted_t = t_values.to_vec();
        sorted_t.sort_unstable();
        for t in sorted_t {
            while observed < t {
                let j = order[observed];
                let y = bench.target_noisy[j];
                est_post = est_post.extend(transfer_inputs[j].clone(), y)?;
                true_post = true_post.extend(bench.inputs[j].clone(), y)?;
                observed += 1;
            }
            let est = bq_estimate(&est_post, &transfer_inputs)?;
            let truth = bq_estimate(&true_post, &bench.inputs)?;
            diffs
                .get_mut(&t)
                .expect("t registered")
                .push(est.mean - truth.mean);
        }
    }
    let rows = t_values
        .iter()
        .map(|&t| {
            let d = &diffs[&t];
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            let std_err = (var / n).sqrt();
            let bound =
                bound_prefactor(n_models, m_inputs, t, delta).map(|a| a * (kappa + sigma2).sqrt());
            let violation_fraction =
                bound.map(|b| d.iter().filter(|x| x.abs() > b).count() as f64 / n);
            TheoremRow {
                t,
                bias: mean,
                std_err,
                within_3se: mean.abs() <= 3.0 * std_err,
                bound,
                violation_fraction,
            }
        })
        .collect();
    Ok(TheoremReport {
        n_models,
        m_inputs,
        repetitions,
        delta,
        kappa,
        sigma2,
        rows,
    })
}

/// A pool with a planted failure region: the target fails with probability
/// `p_inside` on inputs inside a ball around the origin and `p_outside`
/// elsewhere, and N historical models share the same region with jittered
/// probabilities. Pool features are 2-D standard normals.
#[derive(Debug, Clone)]
pub struct PlantedPool {
    pub items: Vec<PoolItem>,
    pub historical: ScoreMatrix,
    pub region_ids: BTreeSet<InputId>,
    /// question -> (canonical answer, fails) table for the mock target.
    pub answer_key: BTreeMap<String, (String, bool)>,
}

/// Generate the planted-region pool; deterministic per seed. Pool items
/// carry score features from the historical matrix so a transfer prior over
/// them is ready to use.
pub fn simulate_planted_pool(
    n_pool: usize,
    n_historical: usize,
    region_fraction: f64,
    p_inside: f64,
    p_outside: f64,
    seed: u64,
) -> Result<PlantedPool, HarnessError> {
    if n_pool == 0 || n_historical < 2 {
        return Err(HarnessError::Config(
            "need a pool and at least 2 historical models".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // radius of a ball holding the requested mass of a 2-D standard normal
    let radius2 = -2.0 * (1.0 - region_fraction).ln();
    let width = (n_pool as f64).log10().ceil().max(1.0) as usize + 1;
    let mut coords = Vec::with_capacity(n_pool);
    let mut region_ids = BTreeSet::new();
    let mut ids = Vec::with_capacity(n_pool);
    for j in 0..n_pool {
        let x: f64 = rng.sample(rand_distr::StandardNormal);
        let y: f64 = rng.sample(rand_distr::StandardNormal);
        let id = format!("x{j:0width$}", width = width);
        if x * x + y * y <= radius2 {
            region_ids.insert(id.clone());
        }
        coords.push((x, y));
        ids.push(id);
    }
    let mut historical_rows = Vec::with_capacity(n_historical);
    let mut model_ids = Vec::with_capacity(n_historical);
    for i in 0..n_historical {
        let jitter_in = (rng.gen::<f64>() - 0.5) * 0.1;
        let jitter_out = (rng.gen::<f64>() - 0.5) * 0.04;
        let p_in = (p_inside + jitter_in).clamp(0.01, 0.99);
        let p_out = (p_outside + jitter_out).clamp(0.01, 0.99);
        let row: Vec<f64> = ids
            .iter()
            .map(|id| {
                let p = if region_ids.contains(id) { p_in } else { p_out };
                if rng.gen::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        historical_rows.push(row);
        model_ids.push(format!("m{i:02}"));
    }
    let historical = ScoreMatrix::new(model_ids, ids.clone(), historical_rows)?;
    let transfer = build_score_feature_prior(&historical, 0.05)?;
    let mut items = Vec::with_capacity(n_pool);
    let mut answer_key = BTreeMap::new();
    for (j, id) in ids.iter().enumerate() {
        let question = format!("planted case {id}");
        let answer = mock_answer_for(&question, TaskKind::Math, seed);
        let p = if region_ids.contains(id) {
            p_inside
        } else {
            p_outside
        };
        let fails = rng.gen::<f64>() < p;
        answer_key.insert(question.clone(), (answer.canonical(), fails));
        items.push(PoolItem {
            id: id.clone(),
            question,
            ground_truth: answer.canonical(),
            gp_input: GpInput::new(id.clone(), transfer.features[id].clone()),
            raw_embedding: FeatureVector::new(vec![coords[j].0, coords[j].1])
                .expect("finite coords"),
            topic_id: None,
        });
    }
    Ok(PlantedPool {
        items,
        historical,
        region_ids,
        answer_key,
    })
}

/// Transfer prior over a planted pool (tabulated historical means, linear
/// kernel over score features).
pub fn planted_pool_gp(pool: &PlantedPool, sigma2: f64) -> Result<DiscoveryGp, HarnessError> {
    let transfer = build_score_feature_prior(&pool.historical, sigma2)?;
    Ok(DiscoveryGp {
        prior: transfer.to_gp_prior()?,
        encoder: None,
    })
}

/// One row of the selection-strategy comparison table: experiments run,
/// abstentions, and the MAE distribution over completed runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyComparisonRow {
    pub method: String,
    pub n: usize,
    pub abstain: usize,
    pub mean_mae: f64,
    pub median_mae: f64,
    pub std_mae: f64,
}

/// Configuration of the comparison harness. Each experiment simulates a
/// clustered model population over a reference benchmark (profiles) and a
/// target benchmark (estimation), runs every strategy on the profiles, and
/// scores the resulting prior by final-MAE of a BQ run.
#[derive(Debug, Clone)]
pub struct SelectionComparisonConfig {
    pub n_experiments: usize,
    pub models_per_cluster: Vec<usize>,
    pub m_inputs: usize,
    pub budget: usize,
    pub sigma2: f64,
    pub seed: u64,
}

impl Default for SelectionComparisonConfig {
    fn default() -> Self {
        Self {
            n_experiments: 10,
            models_per_cluster: vec![6, 5, 2],
            m_inputs: 40,
            budget: 10,
            sigma2: 0.01,
            seed: 0,
        }
    }
}

/// Clustered synthetic population: models in the same cluster share a base
/// function per benchmark plus small idiosyncratic deviations.
fn clustered_population(
    cfg: &SelectionComparisonConfig,
    seed: u64,
) -> Result<
    (
        Vec<ModelId>,
        Vec<usize>,
        Vec<InputId>,
        Vec<Vec<f64>>,
        Vec<Vec<f64>>,
    ),
    HarnessError,
> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cfg.m_inputs;
    let input_ids: Vec<InputId> = (0..m).map(|j| format!("q{j:03}")).collect();
    let n_clusters = cfg.models_per_cluster.len();
    // base failure profiles per cluster and benchmark (reference + target)
    let base = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..m).map(|_| rng.gen::<f64>()).collect() };
    let ref_bases: Vec<Vec<f64>> = (0..n_clusters).map(|_| base(&mut rng)).collect();
    let tgt_bases: Vec<Vec<f64>> = (0..n_clusters).map(|_| base(&mut rng)).collect();
    let mut model_ids = Vec::new();
    let mut cluster_of = Vec::new();
    let mut ref_scores = Vec::new();
    let mut tgt_scores = Vec::new();
    for (c, &count) in cfg.models_per_cluster.iter().enumerate() {
        for i in 0..count {
            model_ids.push(format!("c{c}m{i}"));
            cluster_of.push(c);
            let deviate = |base: &Vec<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> {
                base.iter()
                    .map(|v| {
                        (v + 0.08 * rng.sample::<f64, _>(rand_distr::StandardNormal))
                            .clamp(0.0, 1.0)
                    })
                    .collect()
            };
            ref_scores.push(deviate(&ref_bases[c], &mut rng));
            tgt_scores.push(deviate(&tgt_bases[c], &mut rng));
        }
    }
    Ok((model_ids, cluster_of, input_ids, ref_scores, tgt_scores))
}

/// Run the comparison: for every strategy, the number of experiments,
/// abstention count, and mean/median/std of the final MAE across completed
/// experiments.
pub fn selection_comparison(
    cfg: &SelectionComparisonConfig,
    strategies: &[(String, SelectionStrategy)],
) -> Result<Vec<StrategyComparisonRow>, HarnessError> {
    let mut maes: BTreeMap<String, Vec<f64>> = strategies
        .iter()
        .map(|(name, _)| (name.clone(), Vec::new()))
        .collect();
    let mut abstains: BTreeMap<String, usize> = strategies
        .iter()
        .map(|(name, _)| (name.clone(), 0))
        .collect();
    for exp in 0..cfg.n_experiments {
        let exp_seed = cfg.seed ^ (exp as u64).wrapping_mul(0x9e3779b97f4a7c15);
        let (model_ids, _clusters, input_ids, ref_scores, tgt_scores) =
            clustered_population(cfg, exp_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(exp_seed.wrapping_add(1));
        let target_idx = rng.gen_range(0..model_ids.len());
        let target_id = model_ids[target_idx].clone();
        // profiles: PCA at 95% retained variance over reference scores
        let (_, reduced) = pca_fit_transform(&ref_scores, PcaCriterion::RetainedVariance(0.95))?;
        let profiles: Vec<crate::selection::ModelProfile> = model_ids
            .iter()
            .zip(&reduced)
            .map(|(id, f)| crate::selection::ModelProfile {
                model_id: id.clone(),
                features: FeatureVector::new(f.clone()).expect("pca output"),
            })
            .collect();
        let raw: RawScores = model_ids
            .iter()
            .cloned()
            .zip(ref_scores.iter().cloned())
            .collect();
        // target benchmark: truth is the target row's mean
        let target_row = &tgt_scores[target_idx];
        let truth = target_row.iter().sum::<f64>() / target_row.len() as f64;
        for (name, strategy) in strategies {
            let result = select_sources(strategy, &profiles, Some(&raw), &target_id)?;
            if result.abstain {
                *abstains.get_mut(name).expect("registered") += 1;
                continue;
            }
            if result.selected.len() < 2 {
                // not enough sources for a covariance; counts as abstention
                *abstains.get_mut(name).expect("registered") += 1;
                continue;
            }
            let rows: Vec<Vec<f64>> = model_ids
                .iter()
                .zip(&tgt_scores)
                .filter(|(id, _)| result.selected.contains(id))
                .map(|(_, row)| row.clone())
                .collect();
            let transfer = build_score_feature_prior_raw(&input_ids, &rows, cfg.sigma2)?;
            let prior = transfer.to_gp_prior()?;
            let pool = transfer.gp_inputs(&input_ids);
            let config = QuadratureConfig::new(
                pool.clone(),
                input_ids.clone(),
                cfg.budget,
                Scenario::Default,
            )?;
            let traj = run_estimation(
                &prior,
                &config,
                |id| {
                    input_ids
                        .iter()
                        .position(|i| i == id)
                        .map(|j| target_row[j])
                        .ok_or_else(|| "unknown input".to_string())
                },
                SelectionMode::Active,
            )?;
            if let Some(est) = traj.final_estimate {
                maes.get_mut(name)
                    .expect("registered")
                    .push(metrics::mae(est.mean, truth));
            }
        }
    }
    Ok(strategies
        .iter()
        .map(|(name, _)| {
            let values = &maes[name];
            let n_done = values.len();
            let mean = if n_done == 0 {
                f64::NAN
            } else {
                values.iter().sum::<f64>() / n_done as f64
            };
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let median = if n_done == 0 {
                f64::NAN
            } else if n_done % 2 == 1 {
                sorted[n_done / 2]
            } else {
                0.5 * (sorted[n_done / 2 - 1] + sorted[n_done / 2])
            };
            let std = if n_done < 2 {
                f64::NAN
            } else {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (n_done as f64 - 1.0))
                    .sqrt()
            };
            StrategyComparisonRow {
                method: name.clone(),
                n: cfg.n_experiments,
                abstain: abstains[name],
                mean_mae: mean,
                median_mae: median,
                std_mae: std,
            }
        })
        .collect())
}

/// Provider operating mode for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderMode {
    Live,
    Record,
    Replay,
    #[default]
    Mock,
}

/// Run configuration; defaults fill in and the fully resolved form is
/// written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub scores_path: Option<PathBuf>,
    pub benchmark: Option<String>,
    pub pool_path: Option<PathBuf>,
    pub scenario: Scenario,
    pub sigma2: f64,
    pub budget: usize,
    pub seed: u64,
    pub method: EstimationMethod,
    pub active_selection: bool,
    pub provider_mode: ProviderMode,
    pub transcript_path: Option<PathBuf>,
    pub live_base_url: Option<String>,
    pub live_auth_env: String,
    pub embed_model: String,
    pub generator_model: String,
    pub target_model: String,
    pub generator_temperature: f64,
    pub target_temperature: f64,
    pub discovery_strategy: StrategyKind,
    pub anchor_count: usize,
    pub lambda: f64,
    pub beta: f64,
    pub n_topics: usize,
    pub w1: f64,
    pub w2: f64,
    pub ground_truth: Option<f64>,
    pub surrogate_floor: f64,
    pub mock_failure_prob: f64,
    pub prior_mean: f64,
    pub matern_lengthscale: f64,
    pub matern_signal: f64,
    pub embed_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Math,
            scores_path: None,
            benchmark: None,
            pool_path: None,
            scenario: Scenario::Default,
            sigma2: 0.01,
            budget: 20,
            seed: 0,
            method: EstimationMethod::Bq,
            active_selection: true,
            provider_mode: ProviderMode::Mock,
            transcript_path: None,
            live_base_url: None,
            live_auth_env: "GPEVAL_API_TOKEN".into(),
            embed_model: "mock-embedder".into(),
            generator_model: "mock-generator".into(),
            target_model: "mock-target".into(),
            generator_temperature: 0.7,
            target_temperature: 0.0,
            discovery_strategy: StrategyKind::Tss,
            anchor_count: 3,
            lambda: 0.5,
            beta: 0.0,
            n_topics: 8,
            w1: 0.5,
            w2: 0.5,
            ground_truth: None,
            surrogate_floor: 1e-3,
            mock_failure_prob: 0.3,
            prior_mean: 0.5,
            matern_lengthscale: 1.0,
            matern_signal: 1.0,
            embed_dim: 16,
        }
    }
}

impl RunConfig {
    /// The prompt-feature GP a discovery run conditions: constant prior
    /// mean with a Matern kernel over encoder features.
    pub fn discovery_gp(&self) -> Result<DiscoveryGp, HarnessError> {
        let prior = GpPrior::new(
            MeanSpec::Constant(self.prior_mean),
            KernelSpec::Matern {
                nu: crate::gp::MaternNu::FiveHalves,
                lengthscale: self.matern_lengthscale,
                signal_variance: self.matern_signal,
            },
            self.sigma2,
        )?;
        Ok(DiscoveryGp {
            prior,
            encoder: Some(crate::transfer::EncoderSpec::raw(self.embed_dim)),
        })
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Terminal status of a run; the CLI maps these to distinct exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Success,
    Abstained,
    Failed,
}

/// Write a run directory: resolved config, trajectory JSONL, metrics JSON,
/// optional transcript, and a short human-readable summary. Returns the
/// status for exit-code mapping.
pub fn write_run_dir(
    dir: &Path,
    config: &RunConfig,
    trajectory: Option<&Trajectory>,
    metrics_json: &serde_json::Value,
    transcript: Option<&crate::providers::ProviderTranscript>,
    status: RunStatus,
    summary: &str,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved_config.toml"), config.to_toml())?;
    if let Some(traj) = trajectory {
        std::fs::write(dir.join("trajectory.jsonl"), traj.to_jsonl())?;
    }
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(metrics_json).expect("metrics serialize") + "\n",
    )?;
    if let Some(t) = transcript {
        t.save(&dir.join("transcript.jsonl"))?;
    }
    let status_line = serde_json::json!({ "status": status });
    std::fs::write(
        dir.join("status.json"),
        serde_json::to_string_pretty(&status_line).expect("status serializes") + "\n",
    )?;
    std::fs::write(dir.join("summary.txt"), summary)?;
    Ok(())
}

/// Build the provider set a config asks for. Replay requires a transcript
/// path; record wraps the mock (or live) backend.
pub fn build_providers(config: &RunConfig) -> Result<ProviderSet, HarnessError> {
    let mock = MockConfig {
        seed: config.seed,
        target_failure_prob: config.mock_failure_prob,
        ..Default::default()
    };
    match config.provider_mode {
        ProviderMode::Mock => Ok(ProviderSet::mock(mock)),
        ProviderMode::Record => Ok(ProviderSet::mock(mock).recording()),
        ProviderMode::Replay => {
            let path = config
                .transcript_path
                .as_ref()
                .ok_or_else(|| HarnessError::Config("replay mode needs transcript_path".into()))?;
            let transcript = crate::providers::ProviderTranscript::load(path)?;
            Ok(ProviderSet::replay(&transcript))
        }
        ProviderMode::Live => {
            let base = config
                .live_base_url
                .as_ref()
                .ok_or_else(|| HarnessError::Config("live mode needs live_base_url".into()))?;
            Ok(ProviderSet {
                embedder: crate::providers::ProviderClient::live(
                    config.embed_model.clone(),
                    0.0,
                    base.clone(),
                    config.live_auth_env.clone(),
                ),
                generator: crate::providers::ProviderClient::live(
                    config.generator_model.clone(),
                    config.generator_temperature,
                    base.clone(),
                    config.live_auth_env.clone(),
                ),
                target: crate::providers::ProviderClient::live(
                    config.target_model.clone(),
                    config.target_temperature,
                    base.clone(),
                    config.live_auth_env.clone(),
                ),
            })
        }
    }
}

/// Pool file record: one unlabeled input with its question text and
/// canonical expected answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolRecord {
    pub id: InputId,
    pub question: String,
    pub ground_truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_id: Option<String>,
}

/// Load pool records and embed the questions through the provider set,
/// encoding features with the given encoder.
pub fn load_pool(
    path: &Path,
    providers: &mut ProviderSet,
    encoder: &crate::transfer::EncoderSpec,
) -> Result<Vec<PoolItem>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut records: Vec<PoolRecord> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(line).map_err(|e| HarnessError::BadRecord {
                line: idx + 1,
                message: e.to_string(),
            })?,
        );
    }
    let questions: Vec<String> = records.iter().map(|r| r.question.clone()).collect();
    let embeddings = providers.embedder.embed(&questions)?;
    records
        .into_iter()
        .zip(embeddings)
        .map(|(r, raw)| {
            let gp_input = encoder.encode_input(r.id.clone(), &raw)?;
            Ok(PoolItem {
                id: r.id,
                question: r.question,
                ground_truth: r.ground_truth,
                gp_input,
                raw_embedding: raw,
                topic_id: r.topic_id,
            })
        })
        .collect()
}

/// Run a discovery experiment from a pool of items: wires the strategy,
/// topic source, and providers together and returns the trajectory with its
/// metrics.
pub fn run_discovery_experiment(
    config: &RunConfig,
    pool: &[PoolItem],
    gp: &DiscoveryGp,
    providers: &mut ProviderSet,
) -> Result<(Trajectory, DiscoveryMetrics), HarnessError> {
    let strategy = DiscoveryStrategy {
        kind: config.discovery_strategy,
        anchor_count: config.anchor_count,
        params: SuperlevelParams {
            lambda: config.lambda,
            beta: config.beta,
        },
    };
    let topic_source = if strategy.kind.uses_topic() || config.n_topics > 0 {
        TopicSource::Cluster {
            n_topics: config.n_topics.min(pool.len()).max(1),
            seed: config.seed,
        }
    } else {
        TopicSource::None
    };
    let trajectory = run_discovery(
        &strategy,
        pool,
        gp,
        providers,
        &topic_source,
        config.task,
        config.budget,
        config.seed,
    )?;
    let metrics = discovery_metrics(&trajectory, config.w1, config.w2)?;
    Ok((trajectory, metrics))
}
