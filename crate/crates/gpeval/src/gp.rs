//! Gaussian-process surrogate: priors, exact posterior conditioning, and an
//! incremental fast path for linear kernels.
//!
//! Two conditioning states coexist behind [`GpPosterior`]:
//!
//! * the general path factorizes `K_t = k(X,X) + sigma^2 I` with a
//!   lower-triangular factorization (never an explicit inverse), and
//! * the linear path keeps the d x d matrix
//!   `K~_t = (Z Z' / sigma^2 + I)^{-1}` plus the accumulator `Z (y - mu)`,
//!   updated in O(d^2) per observation via the Sherman-Morrison identity.
//!
//! Posteriors are immutable value objects: conditioning and extension return
//! new values, so reads are freely shareable across threads while a single
//! logical writer drives the acquisition loop.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, factor_with_jitter, CholeskyFactor};
use crate::InputId;

#[derive(Debug, thiserror::Error)]
pub enum GpError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("empty feature vector")]
    EmptyFeatures,
    #[error("invalid kernel parameter: {0}")]
    InvalidKernel(String),
    #[error("noise variance must be strictly positive, got {0}")]
    InvalidNoise(f64),
    #[error("tabulated mean has no entry for input `{0}`")]
    MissingMeanEntry(InputId),
    #[error("input `{0}` has no encoder mean attached")]
    MissingEncoderMean(InputId),
    #[error("observations length mismatch: {inputs} inputs vs {values} values")]
    ObservationLength { inputs: usize, values: usize },
    #[error("gram matrix not positive definite after jitter escalation")]
    ConditioningFailure,
    #[error("posterior variance {0} below the negative-jitter tolerance")]
    NegativeVariance(f64),
    #[error("linear_update requires a linear-kernel posterior")]
    NotLinearState,
}

/// Feature vector fed to kernels. Entries must be finite and the dimension
/// fixed within one surrogate instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GpError> {
        if values.is_empty() {
            return Err(GpError::EmptyFeatures);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite {
                context: "feature vector".into(),
            });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Smoothness order of the Matern kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

/// Covariance function selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// k(a, b) = a . b
    Linear,
    /// Stationary Matern kernel over the feature distance.
    Matern {
        nu: MaternNu,
        lengthscale: f64,
        signal_variance: f64,
    },
}

impl KernelSpec {
    /// Matern with the library defaults: nu = 5/2, lengthscale 1, signal 1.
    pub fn matern_default() -> Self {
        KernelSpec::Matern {
            nu: MaternNu::FiveHalves,
            lengthscale: 1.0,
            signal_variance: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if let KernelSpec::Matern {
            lengthscale,
            signal_variance,
            ..
        } = self
        {
            if !(*lengthscale > 0.0) || !lengthscale.is_finite() {
                return Err(GpError::InvalidKernel(format!("lengthscale {lengthscale}")));
            }
            if !(*signal_variance > 0.0) || !signal_variance.is_finite() {
                return Err(GpError::InvalidKernel(format!(
                    "signal_variance {signal_variance}"
                )));
            }
        }
        Ok(())
    }

    /// Evaluate k(a, b).
    pub fn eval(&self, a: &FeatureVector, b: &FeatureVector) -> Result<f64, GpError> {
        if a.dim() != b.dim() {
            return Err(GpError::DimensionMismatch {
                expected: a.dim(),
                got: b.dim(),
            });
        }
        self.validate()?;
        let v = match self {
            KernelSpec::Linear => dot(a.as_slice(), b.as_slice()),
            KernelSpec::Matern {
                nu,
                lengthscale,
                signal_variance,
            } => {
                let r2: f64 = a
                    .as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let r = r2.sqrt() / lengthscale;
                signal_variance
                    * match nu {
                        MaternNu::Half => (-r).exp(),
                        MaternNu::ThreeHalves => {
                            let s = 3f64.sqrt() * r;
                            (1.0 + s) * (-s).exp()
                        }
                        MaternNu::FiveHalves => {
                            let s = 5f64.sqrt() * r;
                            (1.0 + s + s * s / 3.0) * (-s).exp()
                        }
                    }
            }
        };
        if !v.is_finite() {
            return Err(GpError::NonFinite {
                context: "kernel value".into(),
            });
        }
        Ok(v)
    }
}

/// Prior mean function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MeanSpec {
    Constant(f64),
    /// Per-input means; querying an input outside the table is an error.
    Tabulated(BTreeMap<InputId, f64>),
    /// Mean attached to the input at encode time: (1/d) sum_j psi(x)_j.
    EncoderMean,
}

impl MeanSpec {
    pub fn eval(&self, input: &GpInput) -> Result<f64, GpError> {
        match self {
            MeanSpec::Constant(c) => Ok(*c),
            MeanSpec::Tabulated(table) => table
                .get(&input.id)
                .copied()
                .ok_or_else(|| GpError::MissingMeanEntry(input.id.clone())),
            MeanSpec::EncoderMean => input
                .encoder_mean
                .ok_or_else(|| GpError::MissingEncoderMean(input.id.clone())),
        }
    }
}

/// A pool input as seen by the GP: an id, its kernel features, and the
/// encoder mean when the prior mean is [`MeanSpec::EncoderMean`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpInput {
    pub id: InputId,
    pub features: FeatureVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_mean: Option<f64>,
}

impl GpInput {
    pub fn new(id: impl Into<InputId>, features: FeatureVector) -> Self {
        Self {
            id: id.into(),
            features,
            encoder_mean: None,
        }
    }

    pub fn with_mean(id: impl Into<InputId>, features: FeatureVector, mean: f64) -> Self {
        Self {
            id: id.into(),
            features,
            encoder_mean: Some(mean),
        }
    }
}

/// GP prior: mean, kernel, and observation-noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpPrior {
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
    pub noise_variance: f64,
}

impl GpPrior {
    pub fn new(mean: MeanSpec, kernel: KernelSpec, noise_variance: f64) -> Result<Self, GpError> {
        if !(noise_variance > 0.0) || !noise_variance.is_finite() {
            return Err(GpError::InvalidNoise(noise_variance));
        }
        kernel.validate()?;
        Ok(Self {
            mean,
            kernel,
            noise_variance,
        })
    }
}

/// Noisy observations `(x_tau, y_tau)`; input ids may repeat.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Observations {
    pub inputs: Vec<GpInput>,
    pub values: Vec<f64>,
}

impl Observations {
    pub fn new(inputs: Vec<GpInput>, values: Vec<f64>) -> Result<Self, GpError> {
        if inputs.len() != values.len() {
            return Err(GpError::ObservationLength {
                inputs: inputs.len(),
                values: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite {
                context: "observation values".into(),
            });
        }
        if let Some(first) = inputs.first() {
            let d = first.features.dim();
            for input in &inputs {
                if input.features.dim() != d {
                    return Err(GpError::DimensionMismatch {
                        expected: d,
                        got: input.features.dim(),
                    });
                }
            }
        }
        Ok(Self { inputs, values })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Conditioning state for the linear-kernel fast path (Sherman-Morrison).
#[derive(Debug, Clone)]
pub struct LinearState {
    /// K~_t = (Z Z' / sigma^2 + I)^{-1}, d x d.
    k_tilde: DMatrix<f64>,
    /// Accumulator Z (y - mu(x)).
    resid: Vec<f64>,
    sigma2: f64,
}

impl LinearState {
    /// Fresh state before any observation: K~_0 = I, zero accumulator.
    pub fn new(dim: usize, sigma2: f64) -> Self {
        Self {
            k_tilde: DMatrix::identity(dim, dim),
            resid: vec![0.0; dim],
            sigma2,
        }
    }

    pub fn dim(&self) -> usize {
        self.resid.len()
    }

    pub fn k_tilde(&self) -> &DMatrix<f64> {
        &self.k_tilde
    }

    /// Rank-one update with a new feature vector and centered observation
    /// `resid = y - mu(x)`. Returns the updated state; O(d^2).
    pub fn update(&self, phi: &FeatureVector, resid: f64) -> Result<Self, GpError> {
        if phi.dim() != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                got: phi.dim(),
            });
        }
        if !resid.is_finite() {
            return Err(GpError::NonFinite {
                context: "linear_update residual".into(),
            });
        }
        let p = phi.as_slice();
        // u = K~ phi
        let u: Vec<f64> = (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.k_tilde[(i, j)] * p[j]).sum())
            .collect();
        let denom = 1.0 + dot(p, &u) / self.sigma2;
        let mut k_new = self.k_tilde.clone();
        let scale = 1.0 / (self.sigma2 * denom);
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                k_new[(i, j)] -= u[i] * u[j] * scale;
            }
        }
        let mut r_new = self.resid.clone();
        for i in 0..self.dim() {
            r_new[i] += p[i] * resid;
        }
        Ok(Self {
            k_tilde: k_new,
            resid: r_new,
            sigma2: self.sigma2,
        })
    }

    fn mean_shift(&self, phi: &FeatureVector) -> f64 {
        // sigma^{-2} phi' K~ Z(y - mu)
        let p = phi.as_slice();
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let mut row = 0.0;
            for j in 0..self.dim() {
                row += self.k_tilde[(i, j)] * self.resid[j];
            }
            acc += p[i] * row;
        }
        acc / self.sigma2
    }

    fn cov(&self, a: &FeatureVector, b: &FeatureVector) -> f64 {
        let pa = a.as_slice();
        let pb = b.as_slice();
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let mut row = 0.0;
            for j in 0..self.dim() {
                row += self.k_tilde[(i, j)] * pb[j];
            }
            acc += pa[i] * row;
        }
        acc
    }
}

/// Conditioning state for arbitrary kernels: triangular factor of K_t and
/// the weight vector alpha = K_t^{-1} (y - mu).
#[derive(Debug, Clone)]
pub struct GeneralState {
    factor: CholeskyFactor,
    alpha: Vec<f64>,
    jitter: f64,
}

#[derive(Debug, Clone)]
enum State {
    Empty,
    Linear(LinearState),
    General(GeneralState),
}

/// GP posterior after conditioning on observations; with no observations it
/// reproduces the prior exactly.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    prior: GpPrior,
    obs: Observations,
    state: State,
}

/// Condition a prior on observations. For the linear kernel the d x d state
/// of the fast path is built directly; otherwise K_t is factorized.
pub fn condition(prior: &GpPrior, obs: Observations) -> Result<GpPosterior, GpError> {
    GpPosterior::condition(prior.clone(), obs)
}

impl GpPosterior {
    pub fn condition(prior: GpPrior, obs: Observations) -> Result<Self, GpError> {
        if obs.is_empty() {
            return Ok(Self {
                prior,
                obs,
                state: State::Empty,
            });
        }
        let state = match prior.kernel {
            KernelSpec::Linear => {
                let dim = obs.inputs[0].features.dim();
                let mut st = LinearState::new(dim, prior.noise_variance);
                for (input, &y) in obs.inputs.iter().zip(&obs.values) {
                    let mu = prior.mean.eval(input)?;
                    st = st.update(&input.features, y - mu)?;
                }
                State::Linear(st)
            }
            KernelSpec::Matern { .. } => {
                let t = obs.len();
                let mut gram = DMatrix::zeros(t, t);
                for i in 0..t {
                    for j in 0..=i {
                        let v = prior
                            .kernel
                            .eval(&obs.inputs[i].features, &obs.inputs[j].features)?;
                        gram[(i, j)] = v;
                        gram[(j, i)] = v;
                    }
                    gram[(i, i)] += prior.noise_variance;
                }
                let (factor, jitter) =
                    factor_with_jitter(&gram).ok_or(GpError::ConditioningFailure)?;
                let resid: Vec<f64> = obs
                    .inputs
                    .iter()
                    .zip(&obs.values)
                    .map(|(input, &y)| prior.mean.eval(input).map(|m| y - m))
                    .collect::<Result<_, _>>()?;
                let alpha = factor.solve(&resid);
                State::General(GeneralState {
                    factor,
                    alpha,
                    jitter,
                })
            }
        };
        Ok(Self { prior, obs, state })
    }

    pub fn prior(&self) -> &GpPrior {
        &self.prior
    }

    pub fn observations(&self) -> &Observations {
        &self.obs
    }

    pub fn num_observations(&self) -> usize {
        self.obs.len()
    }

    /// The linear-path state, when this posterior uses the linear kernel.
    pub fn linear_state(&self) -> Option<&LinearState> {
        match &self.state {
            State::Linear(st) => Some(st),
            _ => None,
        }
    }

    fn neg_var_tolerance(&self, prior_var: f64) -> f64 {
        let jitter = match &self.state {
            State::General(st) => st.jitter,
            _ => 0.0,
        };
        10.0 * jitter.max(1e-8 * prior_var.abs()) + 1e-12
    }

    /// Posterior mean at `a` and covariance k_t(a, b).
    pub fn predict(&self, a: &GpInput, b: &GpInput) -> Result<(f64, f64), GpError> {
        if a.features.dim() != b.features.dim() {
            return Err(GpError::DimensionMismatch {
                expected: a.features.dim(),
                got: b.features.dim(),
            });
        }
        let mu_a = self.prior.mean.eval(a)?;
        match &self.state {
            State::Empty => Ok((mu_a, self.prior.kernel.eval(&a.features, &b.features)?)),
            State::Linear(st) => {
                let mean = mu_a + st.mean_shift(&a.features);
                let mut cov = st.cov(&a.features, &b.features);
                if a.features == b.features {
                    let prior_var = self.prior.kernel.eval(&a.features, &a.features)?;
                    cov = self.clamp_variance(cov, prior_var)?;
                }
                Ok((mean, cov))
            }
            State::General(st) => {
                let ka: Vec<f64> = self
                    .obs
                    .inputs
                    .iter()
                    .map(|o| self.prior.kernel.eval(&a.features, &o.features))
                    .collect::<Result<_, _>>()?;
                let kb: Vec<f64> = self
                    .obs
                    .inputs
                    .iter()
                    .map(|o| self.prior.kernel.eval(&b.features, &o.features))
                    .collect::<Result<_, _>>()?;
                let mean = mu_a + dot(&ka, &st.alpha);
                let va = st.factor.solve_lower(&ka);
                let vb = st.factor.solve_lower(&kb);
                let mut cov = self.prior.kernel.eval(&a.features, &b.features)? - dot(&va, &vb);
                if a.features == b.features {
                    let prior_var = self.prior.kernel.eval(&a.features, &a.features)?;
                    cov = self.clamp_variance(cov, prior_var)?;
                }
                Ok((mean, cov))
            }
        }
    }

    /// Posterior variance k_t(a, a), clamped at jitter scale.
    pub fn variance(&self, a: &GpInput) -> Result<f64, GpError> {
        Ok(self.predict(a, a)?.1)
    }

    fn clamp_variance(&self, v: f64, prior_var: f64) -> Result<f64, GpError> {
        if v >= 0.0 {
            return Ok(v);
        }
        let tol = self.neg_var_tolerance(prior_var);
        if v >= -tol {
            Ok(0.0)
        } else {
            Err(GpError::NegativeVariance(v))
        }
    }

    /// Extend the posterior with one more observation. Linear posteriors use
    /// the O(d^2) rank-one update; general posteriors append to the factor.
    pub fn extend(&self, input: GpInput, y: f64) -> Result<Self, GpError> {
        if !y.is_finite() {
            return Err(GpError::NonFinite {
                context: "observation value".into(),
            });
        }
        let mut obs = self.obs.clone();
        obs.inputs.push(input.clone());
        obs.values.push(y);
        match &self.state {
            State::Empty | State::Linear(_) => {
                if matches!(self.prior.kernel, KernelSpec::Linear) {
                    let mu = self.prior.mean.eval(&input)?;
                    let st = match &self.state {
                        State::Linear(st) => st.clone(),
                        _ => LinearState::new(input.features.dim(), self.prior.noise_variance),
                    };
                    let st = st.update(&input.features, y - mu)?;
                    Ok(Self {
                        prior: self.prior.clone(),
                        obs,
                        state: State::Linear(st),
                    })
                } else {
                    Self::condition(self.prior.clone(), obs)
                }
            }
            State::General(st) => {
                let col: Vec<f64> = self.obs.inputs[..self.obs.len()]
                    .iter()
                    .map(|o| self.prior.kernel.eval(&input.features, &o.features))
                    .collect::<Result<_, _>>()?;
                let diag = self.prior.kernel.eval(&input.features, &input.features)?
                    + self.prior.noise_variance
                    + st.jitter;
                let mut factor = st.factor.clone();
                if factor.append(&col, diag) {
                    let resid: Vec<f64> = obs
                        .inputs
                        .iter()
                        .zip(&obs.values)
                        .map(|(i, &v)| self.prior.mean.eval(i).map(|m| v - m))
                        .collect::<Result<_, _>>()?;
                    let alpha = factor.solve(&resid);
                    let state = State::General(GeneralState {
                        factor,
                        alpha,
                        jitter: st.jitter,
                    });
                    Ok(Self {
                        prior: self.prior.clone(),
                        obs,
                        state,
                    })
                } else {
                    // pivot failure: fall back to conditioning from scratch
                    // so the jitter ladder can escalate
                    Self::condition(self.prior.clone(), obs)
                }
            }
        }
    }
}

/// Sherman-Morrison update of a standalone [`LinearState`]. `resid` is the
/// centered observation `y - mu(x)`.
pub fn linear_update(
    state: &LinearState,
    phi_new: &FeatureVector,
    resid: f64,
) -> Result<LinearState, GpError> {
    state.update(phi_new, resid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn input(id: &str, v: &[f64]) -> GpInput {
        GpInput::new(id, fv(v))
    }

    /// Dense posterior via explicit inversion of the full K_t (including the
    /// documented base diagonal jitter); the oracle the factored paths are
    /// checked against.
    fn dense_oracle(prior: &GpPrior, obs: &Observations, a: &GpInput, b: &GpInput) -> (f64, f64) {
        let t = obs.len();
        let mut k_t = DMatrix::zeros(t, t);
        for i in 0..t {
            for j in 0..t {
                k_t[(i, j)] = prior
                    .kernel
                    .eval(&obs.inputs[i].features, &obs.inputs[j].features)
                    .unwrap();
            }
            k_t[(i, i)] += prior.noise_variance;
        }
        if matches!(prior.kernel, KernelSpec::Matern { .. }) {
            // the general conditioning path adds 1e-8 * mean(diag) by contract
            let mean_diag = (0..t).map(|i| k_t[(i, i)]).sum::<f64>() / t as f64;
            for i in 0..t {
                k_t[(i, i)] += 1e-8 * mean_diag;
            }
        }
        let k_inv = k_t.try_inverse().unwrap();
        let ka = DVector::from_iterator(
            t,
            obs.inputs
                .iter()
                .map(|o| prior.kernel.eval(&a.features, &o.features).unwrap()),
        );
        let kb = DVector::from_iterator(
            t,
            obs.inputs
                .iter()
                .map(|o| prior.kernel.eval(&b.features, &o.features).unwrap()),
        );
        let resid = DVector::from_iterator(
            t,
            obs.inputs
                .iter()
                .zip(&obs.values)
                .map(|(i, &y)| y - prior.mean.eval(i).unwrap()),
        );
        let mean = prior.mean.eval(a).unwrap() + (ka.transpose() * &k_inv * &resid)[(0, 0)];
        let cov = prior.kernel.eval(&a.features, &b.features).unwrap()
            - (ka.transpose() * &k_inv * &kb)[(0, 0)];
        (mean, cov)
    }

    #[test]
    fn linear_kernel_is_dot_product() {
        let k = KernelSpec::Linear;
        assert_relative_eq!(k.eval(&fv(&[1.0, 2.0]), &fv(&[3.0, 4.0])).unwrap(), 11.0);
    }

    #[test]
    fn matern_at_zero_distance_is_signal_variance() {
        for nu in [MaternNu::Half, MaternNu::ThreeHalves, MaternNu::FiveHalves] {
            let k = KernelSpec::Matern {
                nu,
                lengthscale: 0.7,
                signal_variance: 2.5,
            };
            let a = fv(&[0.3, -1.0]);
            assert_relative_eq!(k.eval(&a, &a).unwrap(), 2.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn matern32_closed_form_at_unit_distance() {
        // independent evaluation of the nu = 3/2 closed form at r = 1
        let expected = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
        let k = KernelSpec::Matern {
            nu: MaternNu::ThreeHalves,
            lengthscale: 1.0,
            signal_variance: 1.0,
        };
        let got = k.eval(&fv(&[0.0]), &fv(&[1.0])).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-12);
    }

    #[test]
    fn kernel_rejects_dimension_mismatch() {
        let k = KernelSpec::Linear;
        assert!(matches!(
            k.eval(&fv(&[1.0]), &fv(&[1.0, 2.0])),
            Err(GpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_posterior_equals_prior() {
        let prior =
            GpPrior::new(MeanSpec::Constant(0.4), KernelSpec::matern_default(), 0.01).unwrap();
        let post = GpPosterior::condition(prior.clone(), Observations::empty()).unwrap();
        let a = input("a", &[0.1, 0.2]);
        let b = input("b", &[1.0, -0.3]);
        let (m, c) = post.predict(&a, &b).unwrap();
        assert_relative_eq!(m, 0.4);
        assert_relative_eq!(c, prior.kernel.eval(&a.features, &b.features).unwrap());
    }

    #[test]
    fn near_noiseless_linear_interpolates() {
        let prior = GpPrior::new(MeanSpec::Constant(0.0), KernelSpec::Linear, 1e-8).unwrap();
        let x = input("x", &[1.0, 2.0]);
        let obs = Observations::new(vec![x.clone()], vec![3.5]).unwrap();
        let post = GpPosterior::condition(prior, obs).unwrap();
        let (m, _) = post.predict(&x, &x).unwrap();
        assert_relative_eq!(m, 3.5, epsilon = 1e-4);
    }

    #[test]
    fn matern_two_point_matches_dense_oracle() {
        let prior = GpPrior::new(
            MeanSpec::Constant(0.2),
            KernelSpec::Matern {
                nu: MaternNu::FiveHalves,
                lengthscale: 0.8,
                signal_variance: 1.3,
            },
            0.05,
        )
        .unwrap();
        let obs = Observations::new(
            vec![input("p", &[0.0, 1.0]), input("q", &[1.0, -1.0])],
            vec![0.9, -0.4],
        )
        .unwrap();
        let post = GpPosterior::condition(prior.clone(), obs.clone()).unwrap();
        let a = input("a", &[0.5, 0.5]);
        let b = input("b", &[-0.2, 0.3]);
        let (m, c) = post.predict(&a, &b).unwrap();
        let (om, oc) = dense_oracle(&prior, &obs, &a, &b);
        assert_relative_eq!(m, om, max_relative = 1e-8);
        assert_relative_eq!(c, oc, max_relative = 1e-8);
    }

    #[test]
    fn random_five_point_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prior = GpPrior::new(
            MeanSpec::Constant(0.1),
            KernelSpec::Matern {
                nu: MaternNu::ThreeHalves,
                lengthscale: 1.2,
                signal_variance: 0.9,
            },
            0.02,
        )
        .unwrap();
        let mut inputs = Vec::new();
        let mut values = Vec::new();
        for i in 0..5 {
            inputs.push(input(
                &format!("o{i}"),
                &[rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()],
            ));
            values.push(rng.gen::<f64>());
        }
        let obs = Observations::new(inputs, values).unwrap();
        let post = GpPosterior::condition(prior.clone(), obs.clone()).unwrap();
        let a = input("a", &[0.3, 0.9, -0.1]);
        let (m, v) = post.predict(&a, &a).unwrap();
        let (om, ov) = dense_oracle(&prior, &obs, &a, &a);
        assert_relative_eq!(m, om, max_relative = 1e-8);
        assert_relative_eq!(v, ov, max_relative = 1e-6, epsilon = 1e-10);
    }

    #[test]
    fn observed_point_variance_collapses() {
        let prior =
            GpPrior::new(MeanSpec::Constant(0.0), KernelSpec::matern_default(), 1e-8).unwrap();
        let x = input("x", &[0.5]);
        let post = GpPosterior::condition(
            prior,
            Observations::new(vec![x.clone()], vec![1.0]).unwrap(),
        )
        .unwrap();
        let v = post.variance(&x).unwrap();
        assert!(
            v < 1e-6,
            "variance at observed point should be near zero, got {v}"
        );
    }

    #[test]
    fn linear_update_zero_vector_keeps_state() {
        let st = LinearState::new(3, 0.5);
        let st2 = st.update(&fv(&[0.0, 0.0, 0.0]), 1.0).unwrap();
        assert_eq!(st.k_tilde(), st2.k_tilde());
    }

    #[test]
    fn linear_update_hand_case_d1() {
        // t=0, d=1, phi=[1], sigma^2=1: K~_1 = (1*1/1 + 1)^{-1} = 1/2
        let st = LinearState::new(1, 1.0);
        let st2 = st.update(&fv(&[1.0]), 0.7).unwrap();
        assert_relative_eq!(st2.k_tilde()[(0, 0)], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn sequential_updates_match_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let sigma2 = 0.3;
        let mut st = LinearState::new(d, sigma2);
        let mut phis: Vec<Vec<f64>> = Vec::new();
        for _ in 0..20 {
            let phi: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
            st = st.update(&fv(&phi), rng.gen::<f64>()).unwrap();
            phis.push(phi);
        }
        // direct (Z Z'/sigma^2 + I)^{-1}
        let mut zzt = DMatrix::<f64>::identity(d, d);
        for phi in &phis {
            for i in 0..d {
                for j in 0..d {
                    zzt[(i, j)] += phi[i] * phi[j] / sigma2;
                }
            }
        }
        let direct = zzt.try_inverse().unwrap();
        for i in 0..d {
            for j in 0..d {
                assert_relative_eq!(
                    st.k_tilde()[(i, j)],
                    direct[(i, j)],
                    max_relative = 1e-8,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn linear_state_matches_general_conditioning() {
        // Eq-3 fast path against the dense oracle on the same data.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..20 {
            let d = 1 + (case % 5);
            let t = 1 + (case % 7);
            let prior = GpPrior::new(MeanSpec::Constant(0.3), KernelSpec::Linear, 0.2).unwrap();
            let mut inputs = Vec::new();
            let mut values = Vec::new();
            for i in 0..t {
                let phi: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                inputs.push(input(&format!("i{i}"), &phi));
                values.push(rng.gen::<f64>());
            }
            let obs = Observations::new(inputs, values).unwrap();
            let post = GpPosterior::condition(prior.clone(), obs.clone()).unwrap();
            assert!(post.linear_state().is_some());
            let a = input("a", &(0..d).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
            let b = input("b", &(0..d).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
            let (m, c) = post.predict(&a, &b).unwrap();
            let (om, oc) = dense_oracle(&prior, &obs, &a, &b);
            assert_relative_eq!(m, om, max_relative = 1e-8, epsilon = 1e-10);
            assert_relative_eq!(c, oc, max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn monotone_variance_under_extension() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prior = GpPrior::new(
            MeanSpec::Constant(0.0),
            KernelSpec::Matern {
                nu: MaternNu::FiveHalves,
                lengthscale: 1.0,
                signal_variance: 1.0,
            },
            0.05,
        )
        .unwrap();
        let probe = input("probe", &[0.25, -0.4]);
        let mut post = GpPosterior::condition(prior, Observations::empty()).unwrap();
        let mut last = post.variance(&probe).unwrap();
        for i in 0..12 {
            let x = input(&format!("x{i}"), &[rng.gen::<f64>(), rng.gen::<f64>()]);
            post = post.extend(x, rng.gen::<f64>()).unwrap();
            let v = post.variance(&probe).unwrap();
            assert!(v <= last + 1e-7, "variance increased: {last} -> {v}");
            last = v;
        }
    }

    #[test]
    fn order_invariance() {
        let prior = GpPrior::new(
            MeanSpec::Constant(0.0),
            KernelSpec::Matern {
                nu: MaternNu::Half,
                lengthscale: 0.9,
                signal_variance: 1.1,
            },
            0.1,
        )
        .unwrap();
        let pts = vec![
            (input("a", &[0.1, 0.2]), 0.3),
            (input("b", &[0.8, -0.5]), 0.9),
            (input("c", &[-0.4, 0.6]), 0.1),
        ];
        let fwd = Observations::new(
            pts.iter().map(|(i, _)| i.clone()).collect(),
            pts.iter().map(|(_, y)| *y).collect(),
        )
        .unwrap();
        let rev = Observations::new(
            pts.iter().rev().map(|(i, _)| i.clone()).collect(),
            pts.iter().rev().map(|(_, y)| *y).collect(),
        )
        .unwrap();
        let p1 = GpPosterior::condition(prior.clone(), fwd).unwrap();
        let p2 = GpPosterior::condition(prior, rev).unwrap();
        let probe = input("p", &[0.0, 0.0]);
        let (m1, v1) = p1.predict(&probe, &probe).unwrap();
        let (m2, v2) = p2.predict(&probe, &probe).unwrap();
        assert_relative_eq!(m1, m2, max_relative = 1e-8);
        assert_relative_eq!(v1, v2, max_relative = 1e-8, epsilon = 1e-12);
    }

    #[test]
    fn repeated_observation_ids_are_legal() {
        // the same input evaluated twice under noise tightens the posterior
        let prior = GpPrior::new(MeanSpec::Constant(0.0), KernelSpec::matern_default(), 0.5).unwrap();
        let x = input("x", &[0.2, 0.4]);
        let once = GpPosterior::condition(
            prior.clone(),
            Observations::new(vec![x.clone()], vec![1.0]).unwrap(),
        )
        .unwrap();
        let twice = GpPosterior::condition(
            prior,
            Observations::new(vec![x.clone(), x.clone()], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert!(twice.variance(&x).unwrap() < once.variance(&x).unwrap());
    }

    #[test]
    fn tabulated_mean_errors_outside_table() {
        let mut table = BTreeMap::new();
        table.insert("known".to_string(), 0.5);
        let mean = MeanSpec::Tabulated(table);
        assert!(mean.eval(&input("known", &[1.0])).is_ok());
        assert!(matches!(
            mean.eval(&input("unknown", &[1.0])),
            Err(GpError::MissingMeanEntry(_))
        ));
    }

    #[test]
    fn gram_matrices_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kernel in [
            KernelSpec::Linear,
            KernelSpec::Matern {
                nu: MaternNu::ThreeHalves,
                lengthscale: 0.6,
                signal_variance: 2.0,
            },
        ] {
            let pts: Vec<FeatureVector> = (0..10)
                .map(|_| fv(&[rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]))
                .collect();
            let mut gram = DMatrix::zeros(10, 10);
            for i in 0..10 {
                for j in 0..10 {
                    gram[(i, j)] = kernel.eval(&pts[i], &pts[j]).unwrap();
                }
            }
            let scale = gram.diagonal().amax();
            let eig = gram.symmetric_eigenvalues();
            for ev in eig.iter() {
                assert!(*ev >= -1e-8 * scale, "negative eigenvalue {ev}");
            }
        }
    }
}
