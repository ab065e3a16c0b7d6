//! Transfer-learned GP priors from historical evaluation data.
//!
//! Two feature constructions feed the surrogate:
//!
//! * **Score features** — per-input vectors built from the centered columns
//!   of a historical N-models-by-M-inputs score matrix, scaled so that the
//!   linear kernel over them reproduces the sample covariance exactly, with
//!   the sample mean as a tabulated prior mean.
//! * **Prompt features** — provider embeddings passed through an optional
//!   PCA reducer and an optional learnable affine projection, then centered
//!   across their own coordinates and scaled by 1/sqrt(d-1). The matching
//!   prior mean is the coordinate average of the un-centered output.
//!
//! Encoder parameters and GP hyperparameters can be pre-trained by maximizing
//! the summed Gaussian marginal log-likelihood of the historical datasets.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gp::{FeatureVector, GpError, GpInput, GpPrior, KernelSpec, MeanSpec};
use crate::linalg::factor_with_jitter;
use crate::{InputId, ModelId};

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("score matrix needs at least {needed} models, got {got}")]
    TooFewModels { needed: usize, got: usize },
    #[error("score matrix is empty")]
    EmptyMatrix,
    #[error("score {value} for model `{model}`, input `{input}` outside [0, 1]")]
    ScoreOutOfRange {
        model: ModelId,
        input: InputId,
        value: f64,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("PCA needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("data is rank deficient: requested {requested} components, rank {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),
    #[error("non-finite objective on dataset `{0}`")]
    NonFiniteObjective(String),
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Evaluation regime: how much history exists for the target model and the
/// target benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// History for both the model and the benchmark.
    Default,
    /// No history for the target model.
    NewModel,
    /// No history for the benchmark; prior mean falls back to a constant 0.5.
    NewBench,
}

/// Dense N-models x M-inputs matrix of historical scores in [0, 1]
/// (1 = failure, 0 = success). Every (model, input) cell must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub model_ids: Vec<ModelId>,
    pub input_ids: Vec<InputId>,
    /// Row-major, one row per model.
    pub scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(
        model_ids: Vec<ModelId>,
        input_ids: Vec<InputId>,
        scores: Vec<Vec<f64>>,
    ) -> Result<Self, TransferError> {
        if model_ids.is_empty() || input_ids.is_empty() {
            return Err(TransferError::EmptyMatrix);
        }
        if scores.len() != model_ids.len() {
            return Err(TransferError::DimensionMismatch {
                expected: model_ids.len(),
                got: scores.len(),
            });
        }
        for (row, model) in scores.iter().zip(&model_ids) {
            if row.len() != input_ids.len() {
                return Err(TransferError::DimensionMismatch {
                    expected: input_ids.len(),
                    got: row.len(),
                });
            }
            for (value, input) in row.iter().zip(&input_ids) {
                if !value.is_finite() || *value < 0.0 || *value > 1.0 {
                    return Err(TransferError::ScoreOutOfRange {
                        model: model.clone(),
                        input: input.clone(),
                        value: *value,
                    });
                }
            }
        }
        Ok(Self {
            model_ids,
            input_ids,
            scores,
        })
    }

    pub fn num_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.input_ids.len()
    }

    pub fn row(&self, model: &str) -> Option<&[f64]> {
        let idx = self.model_ids.iter().position(|m| m == model)?;
        Some(self.scores[idx].as_slice())
    }

    /// Keep only the given models (in their current order).
    pub fn subset(&self, keep: &[ModelId]) -> Result<Self, TransferError> {
        let mut model_ids = Vec::new();
        let mut scores = Vec::new();
        for (i, m) in self.model_ids.iter().enumerate() {
            if keep.iter().any(|k| k == m) {
                model_ids.push(m.clone());
                scores.push(self.scores[i].clone());
            }
        }
        Self::new(model_ids, self.input_ids.clone(), scores)
    }

    /// Per-input mean across models.
    pub fn column_means(&self) -> Vec<f64> {
        let n = self.num_models() as f64;
        (0..self.num_inputs())
            .map(|j| self.scores.iter().map(|row| row[j]).sum::<f64>() / n)
            .collect()
    }
}

/// GP prior extracted from a score matrix: tabulated per-input means plus
/// N-dimensional score features whose dot products reproduce the sample
/// covariance exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreFeaturePrior {
    pub mean_table: BTreeMap<InputId, f64>,
    pub features: BTreeMap<InputId, FeatureVector>,
    pub noise_variance: f64,
}

impl ScoreFeaturePrior {
    /// The equivalent GP prior: tabulated mean, linear kernel over the score
    /// features, and the given conditioning noise.
    pub fn to_gp_prior(&self) -> Result<GpPrior, GpError> {
        GpPrior::new(
            MeanSpec::Tabulated(self.mean_table.clone()),
            KernelSpec::Linear,
            self.noise_variance,
        )
    }

    /// Pool inputs in the given id order.
    pub fn gp_inputs(&self, input_ids: &[InputId]) -> Vec<GpInput> {
        input_ids
            .iter()
            .map(|id| GpInput::new(id.clone(), self.features[id].clone()))
            .collect()
    }
}

/// Build the score-feature prior: mean u_j = (1/N) sum_i y_ij and features
/// phi(x_j) = [y_ij - u_j]_i / sqrt(N-1), so phi(x_j).phi(x_j') equals the
/// sample covariance between inputs j and j'.
pub fn build_score_feature_prior(
    y: &ScoreMatrix,
    sigma2: f64,
) -> Result<ScoreFeaturePrior, TransferError> {
    build_score_feature_prior_raw(&y.input_ids, &y.scores, sigma2)
}

/// Same construction over a raw score table (no [0, 1] range requirement);
/// the simulator feeds continuous Gaussian scores through this path.
pub fn build_score_feature_prior_raw(
    input_ids: &[InputId],
    scores: &[Vec<f64>],
    sigma2: f64,
) -> Result<ScoreFeaturePrior, TransferError> {
    let n = scores.len();
    if n < 2 {
        return Err(TransferError::TooFewModels { needed: 2, got: n });
    }
    if !(sigma2 > 0.0) {
        return Err(TransferError::Gp(GpError::InvalidNoise(sigma2)));
    }
    let m = input_ids.len();
    for row in scores {
        if row.len() != m {
            return Err(TransferError::DimensionMismatch {
                expected: m,
                got: row.len(),
            });
        }
    }
    let means: Vec<f64> = (0..m)
        .map(|j| scores.iter().map(|row| row[j]).sum::<f64>() / n as f64)
        .collect();
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let mut mean_table = BTreeMap::new();
    let mut features = BTreeMap::new();
    for (j, input_id) in input_ids.iter().enumerate() {
        mean_table.insert(input_id.clone(), means[j]);
        let phi: Vec<f64> = scores
            .iter()
            .map(|row| (row[j] - means[j]) * scale)
            .collect();
        features.insert(input_id.clone(), FeatureVector::new(phi)?);
    }
    Ok(ScoreFeaturePrior {
        mean_table,
        features,
        noise_variance: sigma2,
    })
}

/// Prior mean for a scenario: Default uses the mean table of the selected
/// source subset, NewModel the mean over all sources, NewBench a constant
/// 0.5.
pub fn scenario_mean(
    scenario: Scenario,
    all_sources: &ScoreMatrix,
    selected: Option<&[ModelId]>,
) -> Result<MeanSpec, TransferError> {
    match scenario {
        Scenario::NewBench => Ok(MeanSpec::Constant(0.5)),
        Scenario::NewModel => Ok(tabulated_mean(all_sources)),
        Scenario::Default => {
            let subset = match selected {
                Some(models) => all_sources.subset(models)?,
                None => all_sources.clone(),
            };
            Ok(tabulated_mean(&subset))
        }
    }
}

fn tabulated_mean(y: &ScoreMatrix) -> MeanSpec {
    let means = y.column_means();
    MeanSpec::Tabulated(
        y.input_ids
            .iter()
            .cloned()
            .zip(means)
            .collect::<BTreeMap<_, _>>(),
    )
}

/// Orthonormal PCA projection fitted on row data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaProjection {
    /// Components as rows, k x D, orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Mean row subtracted before projecting.
    pub mean: Vec<f64>,
    /// Explained-variance ratio per retained component.
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaProjection {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>, TransferError> {
        if row.len() != self.input_dim() {
            return Err(TransferError::DimensionMismatch {
                expected: self.input_dim(),
                got: row.len(),
            });
        }
        let centered: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn inverse_transform(&self, reduced: &[f64]) -> Result<Vec<f64>, TransferError> {
        if reduced.len() != self.output_dim() {
            return Err(TransferError::DimensionMismatch {
                expected: self.output_dim(),
                got: reduced.len(),
            });
        }
        let mut out = self.mean.clone();
        for (coef, component) in reduced.iter().zip(&self.components) {
            for (o, c) in out.iter_mut().zip(component) {
                *o += coef * c;
            }
        }
        Ok(out)
    }
}

/// Stopping rule for [`pca_fit_transform`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcaCriterion {
    TargetDim(usize),
    /// Smallest dimension whose cumulative explained variance reaches the
    /// fraction.
    RetainedVariance(f64),
}

/// Fit PCA on the rows of `x` and project them.
pub fn pca_fit_transform(
    x: &[Vec<f64>],
    criterion: PcaCriterion,
) -> Result<(PcaProjection, Vec<Vec<f64>>), TransferError> {
    let n = x.len();
    if n < 2 {
        return Err(TransferError::TooFewRows(n));
    }
    let d = x[0].len();
    for row in x {
        if row.len() != d {
            return Err(TransferError::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut centered = DMatrix::zeros(n, d);
    for (i, row) in x.iter().enumerate() {
        for j in 0..d {
            centered[(i, j)] = row[j] - mean[j];
        }
    }
    let svd = centered.svd(true, true);
    let v_t = svd.v_t.as_ref().expect("svd computed with vectors");
    let singular: Vec<f64> = svd.singular_values.iter().copied().collect();
    let total_var: f64 = singular.iter().map(|s| s * s).sum();
    if total_var <= 1e-24 {
        return Err(TransferError::RankDeficient {
            requested: 1,
            rank: 0,
        });
    }
    let rank = singular
        .iter()
        .filter(|s| **s > 1e-10 * singular[0])
        .count();
    let ratios: Vec<f64> = singular.iter().map(|s| s * s / total_var).collect();
    let k = match criterion {
        PcaCriterion::TargetDim(k) => {
            if k > rank {
                return Err(TransferError::RankDeficient { requested: k, rank });
            }
            k
        }
        PcaCriterion::RetainedVariance(frac) => {
            let mut cum = 0.0;
            let mut k = rank;
            for (i, r) in ratios.iter().enumerate() {
                cum += r;
                if cum >= frac {
                    k = i + 1;
                    break;
                }
            }
            k.min(rank)
        }
    };
    let mut components = Vec::with_capacity(k);
    for i in 0..k {
        let mut row: Vec<f64> = (0..d).map(|j| v_t[(i, j)]).collect();
        // deterministic sign: largest-magnitude coordinate positive
        let lead = row
            .iter()
            .cloned()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        components.push(row);
    }
    let projection = PcaProjection {
        components,
        mean,
        explained_variance_ratio: ratios[..k].to_vec(),
    };
    let reduced = x
        .iter()
        .map(|row| projection.transform(row))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((projection, reduced))
}

/// Learnable map psi(z) = W2 tanh(W1 z + b1) + b2, or a single affine layer
/// when no hidden width is configured (the default, keeping gradients exact).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineProjection {
    pub input_dim: usize,
    pub hidden_dim: Option<usize>,
    pub output_dim: usize,
    /// Flattened parameters: [W1, b1, W2, b2] or [W, b] for a single layer.
    pub params: Vec<f64>,
}

impl AffineProjection {
    pub fn param_count(input: usize, hidden: Option<usize>, output: usize) -> usize {
        match hidden {
            Some(h) => input * h + h + h * output + output,
            None => input * output + output,
        }
    }

    /// Seeded small-uniform init; square single-layer maps start at the
    /// identity so an untuned projection is a no-op.
    pub fn init(input: usize, hidden: Option<usize>, output: usize, seed: u64) -> Self {
        let count = Self::param_count(input, hidden, output);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<f64> = (0..count).map(|_| rng.gen_range(-0.05..0.05)).collect();
        if hidden.is_none() && input == output {
            for i in 0..output {
                for j in 0..input {
                    params[i * input + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
            for b in params[input * output..].iter_mut() {
                *b = 0.0;
            }
        }
        Self {
            input_dim: input,
            hidden_dim: hidden,
            output_dim: output,
            params,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::init(dim, None, dim, 0)
    }

    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>, TransferError> {
        if z.len() != self.input_dim {
            return Err(TransferError::DimensionMismatch {
                expected: self.input_dim,
                got: z.len(),
            });
        }
        match self.hidden_dim {
            None => {
                let w = &self.params[..self.input_dim * self.output_dim];
                let b = &self.params[self.input_dim * self.output_dim..];
                Ok((0..self.output_dim)
                    .map(|i| {
                        b[i] + (0..self.input_dim)
                            .map(|j| w[i * self.input_dim + j] * z[j])
                            .sum::<f64>()
                    })
                    .collect())
            }
            Some(h) => {
                let w1_len = self.input_dim * h;
                let w1 = &self.params[..w1_len];
                let b1 = &self.params[w1_len..w1_len + h];
                let w2_off = w1_len + h;
                let w2 = &self.params[w2_off..w2_off + h * self.output_dim];
                let b2 = &self.params[w2_off + h * self.output_dim..];
                let hidden: Vec<f64> = (0..h)
                    .map(|i| {
                        (b1[i]
                            + (0..self.input_dim)
                                .map(|j| w1[i * self.input_dim + j] * z[j])
                                .sum::<f64>())
                        .tanh()
                    })
                    .collect();
                Ok((0..self.output_dim)
                    .map(|i| b2[i] + (0..h).map(|j| w2[i * h + j] * hidden[j]).sum::<f64>())
                    .collect())
            }
        }
    }
}

/// Encoder pipeline: raw embedding -> optional PCA -> optional learnable
/// projection -> centering and 1/sqrt(d-1) scaling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub base_dim: usize,
    pub reducer: Option<PcaProjection>,
    pub projection: Option<AffineProjection>,
    /// Clamp the encoder mean into [0, 1]; off by default (raw average).
    pub clamp_mean: bool,
}

impl EncoderSpec {
    pub fn raw(base_dim: usize) -> Self {
        Self {
            base_dim,
            reducer: None,
            projection: None,
            clamp_mean: false,
        }
    }

    /// Dimension of psi(x), the encoder output before centering.
    pub fn output_dim(&self) -> usize {
        if let Some(p) = &self.projection {
            p.output_dim
        } else if let Some(r) = &self.reducer {
            r.output_dim()
        } else {
            self.base_dim
        }
    }

    fn psi(&self, raw: &[f64]) -> Result<Vec<f64>, TransferError> {
        if raw.len() != self.base_dim {
            return Err(TransferError::DimensionMismatch {
                expected: self.base_dim,
                got: raw.len(),
            });
        }
        let reduced = match &self.reducer {
            Some(r) => r.transform(raw)?,
            None => raw.to_vec(),
        };
        match &self.projection {
            Some(p) => p.apply(&reduced),
            None => Ok(reduced),
        }
    }

    /// Centered feature phi(x) and the encoder mean (1/d) sum_j psi(x)_j.
    pub fn encode_with_mean(
        &self,
        raw_embedding: &FeatureVector,
    ) -> Result<(FeatureVector, f64), TransferError> {
        let psi = self.psi(raw_embedding.as_slice())?;
        let d = psi.len();
        let mean = psi.iter().sum::<f64>() / d as f64;
        let scale = if d > 1 {
            1.0 / ((d - 1) as f64).sqrt()
        } else {
            1.0
        };
        let phi: Vec<f64> = psi.iter().map(|v| (v - mean) * scale).collect();
        let reported = if self.clamp_mean {
            mean.clamp(0.0, 1.0)
        } else {
            mean
        };
        Ok((FeatureVector::new(phi)?, reported))
    }

    /// Centered feature phi(x) only.
    pub fn encode(&self, raw_embedding: &FeatureVector) -> Result<FeatureVector, TransferError> {
        Ok(self.encode_with_mean(raw_embedding)?.0)
    }

    /// Encode a raw embedding into a GP input carrying the encoder mean.
    pub fn encode_input(
        &self,
        id: impl Into<InputId>,
        raw_embedding: &FeatureVector,
    ) -> Result<GpInput, TransferError> {
        let (phi, mean) = self.encode_with_mean(raw_embedding)?;
        Ok(GpInput::with_mean(id, phi, mean))
    }
}

/// Weighted average of question and reasoning-trace embeddings.
pub fn fuse_embeddings(
    question: &FeatureVector,
    trace: &FeatureVector,
    alpha: f64,
) -> Result<FeatureVector, TransferError> {
    if question.dim() != trace.dim() {
        return Err(TransferError::DimensionMismatch {
            expected: question.dim(),
            got: trace.dim(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(TransferError::InvalidAlpha(alpha));
    }
    let fused: Vec<f64> = question
        .as_slice()
        .iter()
        .zip(trace.as_slice())
        .map(|(q, t)| alpha * q + (1.0 - alpha) * t)
        .collect();
    Ok(FeatureVector::new(fused)?)
}

/// One historical model's scores over embedded inputs, for pre-training.
#[derive(Debug, Clone)]
pub struct HistoricalDataset {
    pub name: String,
    pub raw_embeddings: Vec<FeatureVector>,
    pub values: Vec<f64>,
}

/// Exact Gaussian marginal log-likelihood log N(y; mu(X), K(X,X) + sigma^2 I)
/// of one dataset under the encoder-derived prior.
pub fn marginal_log_likelihood(
    spec: &EncoderSpec,
    kernel: &KernelSpec,
    sigma2: f64,
    dataset: &HistoricalDataset,
) -> Result<f64, TransferError> {
    if dataset.values.is_empty() {
        return Err(TransferError::EmptyDataset(dataset.name.clone()));
    }
    let t = dataset.values.len();
    let encoded: Vec<(FeatureVector, f64)> = dataset
        .raw_embeddings
        .iter()
        .map(|e| spec.encode_with_mean(e))
        .collect::<Result<_, _>>()?;
    let mut gram = DMatrix::zeros(t, t);
    for i in 0..t {
        for j in 0..=i {
            let v = kernel.eval(&encoded[i].0, &encoded[j].0)?;
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
        gram[(i, i)] += sigma2;
    }
    let (factor, _) = factor_with_jitter(&gram).ok_or(GpError::ConditioningFailure)?;
    let resid: Vec<f64> = dataset
        .values
        .iter()
        .zip(&encoded)
        .map(|(y, (_, m))| y - m)
        .collect();
    let alpha = factor.solve(&resid);
    let quad: f64 = resid.iter().zip(&alpha).map(|(r, a)| r * a).sum();
    let ll = -0.5 * (quad + factor.log_det() + t as f64 * (2.0 * std::f64::consts::PI).ln());
    if !ll.is_finite() {
        return Err(TransferError::NonFiniteObjective(dataset.name.clone()));
    }
    Ok(ll)
}

/// Knobs for [`pretrain_encoder`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub tune_projection: bool,
    pub tune_kernel: bool,
    pub tune_noise: bool,
    /// Initial gradient-ascent step size.
    pub step: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            seed: 0,
            tune_projection: true,
            tune_kernel: true,
            tune_noise: false,
            step: 0.1,
        }
    }
}

/// Result of encoder pre-training.
#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub spec: EncoderSpec,
    pub kernel: KernelSpec,
    pub sigma2: f64,
    pub objective_init: f64,
    pub objective_final: f64,
}

fn summed_objective(
    spec: &EncoderSpec,
    kernel: &KernelSpec,
    sigma2: f64,
    datasets: &[HistoricalDataset],
) -> Result<f64, TransferError> {
    datasets
        .iter()
        .map(|d| marginal_log_likelihood(spec, kernel, sigma2, d))
        .sum()
}

#[derive(Clone)]
struct ParamSpace {
    spec: EncoderSpec,
    kernel: KernelSpec,
    log_sigma2: f64,
    tune_projection: bool,
    tune_kernel: bool,
    tune_noise: bool,
}

impl ParamSpace {
    fn pack(&self) -> Vec<f64> {
        let mut v = Vec::new();
        if self.tune_kernel {
            if let KernelSpec::Matern {
                lengthscale,
                signal_variance,
                ..
            } = &self.kernel
            {
                v.push(lengthscale.ln());
                v.push(signal_variance.ln());
            }
        }
        if self.tune_noise {
            v.push(self.log_sigma2);
        }
        if self.tune_projection {
            if let Some(p) = &self.spec.projection {
                v.extend_from_slice(&p.params);
            }
        }
        v
    }

    fn unpack(&self, v: &[f64]) -> (EncoderSpec, KernelSpec, f64) {
        let mut idx = 0;
        let mut kernel = self.kernel.clone();
        if self.tune_kernel {
            if let KernelSpec::Matern { nu, .. } = &self.kernel {
                kernel = KernelSpec::Matern {
                    nu: *nu,
                    lengthscale: v[idx].exp(),
                    signal_variance: v[idx + 1].exp(),
                };
                idx += 2;
            }
        }
        let sigma2 = if self.tune_noise {
            let s = v[idx].exp();
            idx += 1;
            s
        } else {
            self.log_sigma2.exp()
        };
        let mut spec = self.spec.clone();
        if self.tune_projection {
            if let Some(p) = &mut spec.projection {
                p.params = v[idx..idx + p.params.len()].to_vec();
            }
        }
        (spec, kernel, sigma2)
    }
}

/// Pre-train encoder parameters and GP hyperparameters by gradient ascent on
/// the summed marginal log-likelihood. Gradients are central finite
/// differences (step 1e-4 x parameter scale); steps are accepted only when
/// they improve the objective, so the result never falls below the
/// initialization. Deterministic given the config seed.
pub fn pretrain_encoder(
    datasets: &[HistoricalDataset],
    spec: EncoderSpec,
    kernel: KernelSpec,
    sigma2: f64,
    config: &PretrainConfig,
) -> Result<PretrainResult, TransferError> {
    if datasets.is_empty() {
        return Err(TransferError::EmptyDataset("<no datasets>".into()));
    }
    let space = ParamSpace {
        spec,
        kernel,
        log_sigma2: sigma2.ln(),
        tune_projection: config.tune_projection,
        tune_kernel: config.tune_kernel,
        tune_noise: config.tune_noise,
    };
    let mut params = space.pack();
    let eval = |p: &[f64]| -> Result<f64, TransferError> {
        let (s, k, n) = space.unpack(p);
        summed_objective(&s, &k, n, datasets)
    };
    let objective_init = eval(&params)?;
    let mut best = objective_init;
    let mut step = config.step;
    if params.is_empty() || config.iterations == 0 {
        let (s, k, n) = space.unpack(&params);
        return Ok(PretrainResult {
            spec: s,
            kernel: k,
            sigma2: n,
            objective_init,
            objective_final: best,
        });
    }
    for _ in 0..config.iterations {
        let mut grad = vec![0.0; params.len()];
        for i in 0..params.len() {
            let h = 1e-4 * params[i].abs().max(1.0);
            let mut up = params.clone();
            up[i] += h;
            let mut down = params.clone();
            down[i] -= h;
            grad[i] = (eval(&up)? - eval(&down)?) / (2.0 * h);
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-12 {
            break;
        }
        // accept only improving steps (monotone in the evaluated iterates)
        let mut trial_step = step;
        let mut accepted = false;
        for _ in 0..20 {
            let candidate: Vec<f64> = params
                .iter()
                .zip(&grad)
                .map(|(p, g)| p + trial_step * g / norm)
                .collect();
            match eval(&candidate) {
                Ok(obj) if obj > best => {
                    params = candidate;
                    best = obj;
                    accepted = true;
                    break;
                }
                _ => trial_step *= 0.5,
            }
        }
        if accepted {
            step = (trial_step * 1.5).min(config.step);
        } else {
            break;
        }
    }
    let (s, k, n) = space.unpack(&params);
    Ok(PretrainResult {
        spec: s,
        kernel: k,
        sigma2: n,
        objective_init,
        objective_final: best,
    })
}
