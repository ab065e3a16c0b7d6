//! Failure-case discovery: superlevel-set sampling over static pools and
//! generative synthesis with anchors and a topic bandit.
//!
//! The acquisition `1(mu_t + beta sigma_t >= lambda) * k_t(x, x)` restricts
//! the search to inputs that are probably failures and, within that region,
//! prefers the least-explored ones. The generative strategies inject the
//! top-scoring pool items into the generator prompt as in-context anchors;
//! the topic-aware variant additionally picks a semantic topic per step via
//! UCB1 so the generator cannot collapse onto one failure flavor.
//!
//! Prompt templates are shipped as byte-exact text assets and filled by
//! plain string substitution of `{anchor_context}` (one `Q: <question>`
//! line per anchor) and `{selected_topic_label}` (comma-joined keywords).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gp::{FeatureVector, GpError, GpInput, GpPosterior, GpPrior, MeanSpec, Observations};
use crate::providers::{Answer, GeneratedCase, ProviderError, ProviderSet, TaskKind};
use crate::quadrature::{Trajectory, TrajectoryStep};
use crate::transfer::{EncoderSpec, TransferError};
use crate::InputId;

#[derive(Debug, thiserror::Error)]
pub enum DiscoveryError {
    #[error("pool is empty")]
    EmptyPool,
    #[error("budget must be >= 1")]
    ZeroBudget,
    #[error("anchor count m must be >= 1")]
    ZeroAnchors,
    #[error("no template for strategy `{strategy}` (non-generative)")]
    NoTemplate { strategy: String },
    #[error("template requires `{variable}` but none was provided")]
    MissingVariable { variable: String },
    #[error("strategy `{strategy}` needs a topic source with at least one topic")]
    MissingTopics { strategy: String },
    #[error("generative strategies need an encoder for new inputs")]
    MissingEncoder,
    #[error("generative strategies need a Constant or EncoderMean prior mean")]
    UnsupportedMean,
    #[error("n_topics {requested} exceeds pool size {pool}")]
    TooManyTopics { requested: usize, pool: usize },
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

/// Threshold and confidence multiplier of the probabilistic superlevel set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperlevelParams {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for SuperlevelParams {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta: 0.0,
        }
    }
}

/// One bandit arm: a semantic topic with pull/reward statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicArm {
    pub topic_id: String,
    pub keywords: Vec<String>,
    pub pulls: u64,
    pub reward_sum: f64,
}

impl TopicArm {
    pub fn new(topic_id: impl Into<String>, keywords: Vec<String>) -> Self {
        Self {
            topic_id: topic_id.into(),
            keywords,
            pulls: 0,
            reward_sum: 0.0,
        }
    }

    pub fn label(&self) -> String {
        self.keywords.join(", ")
    }
}

/// Discovery strategy family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Uniform pool sampling.
    Rand,
    /// Superlevel-set pool sampling.
    Ss,
    /// Anchored generation.
    SsGen,
    /// Topic-aware anchored generation.
    Tss,
    /// Unguided generation.
    RandGen,
    /// Random-topic generation without anchors.
    RandTGen,
    /// Anchored generation with uniformly random anchors.
    RandAnchorGen,
}

impl StrategyKind {
    pub fn is_generative(self) -> bool {
        !matches!(self, StrategyKind::Rand | StrategyKind::Ss)
    }

    pub fn uses_anchors(self) -> bool {
        matches!(
            self,
            StrategyKind::SsGen | StrategyKind::Tss | StrategyKind::RandAnchorGen
        )
    }

    pub fn uses_topic(self) -> bool {
        matches!(self, StrategyKind::Tss | StrategyKind::RandTGen)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Rand => "rand",
            StrategyKind::Ss => "ss",
            StrategyKind::SsGen => "ss-gen",
            StrategyKind::Tss => "tss",
            StrategyKind::RandGen => "rand-gen",
            StrategyKind::RandTGen => "rand-t-gen",
            StrategyKind::RandAnchorGen => "rand-anchor-gen",
        }
    }
}

/// Full strategy configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryStrategy {
    pub kind: StrategyKind,
    /// In-context anchors per prompt for the anchored variants.
    pub anchor_count: usize,
    pub params: SuperlevelParams,
}

impl DiscoveryStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            anchor_count: 3,
            params: SuperlevelParams::default(),
        }
    }
}

/// One unlabeled pool input with everything discovery needs: the question
/// text, the canonical expected answer, GP features, and the raw embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolItem {
    pub id: InputId,
    pub question: String,
    pub ground_truth: String,
    pub gp_input: GpInput,
    pub raw_embedding: FeatureVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_id: Option<String>,
}

/// Superlevel-set acquisition: the posterior variance gated by the
/// probable-failure indicator.
pub fn acquisition_ss(
    post: &GpPosterior,
    x: &GpInput,
    params: &SuperlevelParams,
) -> Result<f64, DiscoveryError> {
    let (mu, var) = post.predict(x, x)?;
    let sigma = var.max(0.0).sqrt();
    if mu + params.beta * sigma >= params.lambda {
        Ok(var.max(0.0))
    } else {
        Ok(0.0)
    }
}

/// Anchor selection outcome; `fallback` is set when every acquisition value
/// was zero and the ordering fell back to `mu + beta sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSelection {
    pub ids: Vec<InputId>,
    pub fallback: bool,
    pub truncated: bool,
    /// Acquisition value of the top anchor.
    pub top_value: f64,
}

/// Top-m pool items by superlevel-set acquisition, ties toward the lowest
/// id. All-zero acquisitions fall back to the optimistic score; an m larger
/// than the pool takes everything, flagged.
pub fn select_anchors(
    post: &GpPosterior,
    pool: &[PoolItem],
    m: usize,
    params: &SuperlevelParams,
) -> Result<AnchorSelection, DiscoveryError> {
    if pool.is_empty() {
        return Err(DiscoveryError::EmptyPool);
    }
    if m == 0 {
        return Err(DiscoveryError::ZeroAnchors);
    }
    let mut scored: Vec<(&PoolItem, f64, f64)> = Vec::with_capacity(pool.len());
    for item in pool {
        let acq = acquisition_ss(post, &item.gp_input, params)?;
        let (mu, var) = post.predict(&item.gp_input, &item.gp_input)?;
        let optimistic = mu + params.beta * var.max(0.0).sqrt();
        scored.push((item, acq, optimistic));
    }
    let fallback = scored.iter().all(|(_, acq, _)| *acq == 0.0);
    if fallback {
        scored.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.id.cmp(&b.0.id))
        });
    } else {
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.id.cmp(&b.0.id))
        });
    }
    let truncated = m > pool.len();
    let take = m.min(pool.len());
    let top_value = scored[0].1;
    Ok(AnchorSelection {
        ids: scored[..take]
            .iter()
            .map(|(i, _, _)| i.id.clone())
            .collect(),
        fallback,
        truncated,
        top_value,
    })
}

/// UCB1 arm selection: unpulled arms first (lowest topic id among them),
/// otherwise argmax of mean reward + sqrt(2 ln t / pulls), ties toward the
/// lowest topic id.
pub fn ucb1_select(arms: &[TopicArm], total_pulls: u64) -> Option<&TopicArm> {
    if arms.is_empty() {
        return None;
    }
    let mut unpulled: Vec<&TopicArm> = arms.iter().filter(|a| a.pulls == 0).collect();
    if !unpulled.is_empty() {
        unpulled.sort_by(|a, b| a.topic_id.cmp(&b.topic_id));
        return Some(unpulled[0]);
    }
    let t = (total_pulls.max(1)) as f64;
    let mut best: Option<(&TopicArm, f64)> = None;
    let mut ordered: Vec<&TopicArm> = arms.iter().collect();
    ordered.sort_by(|a, b| a.topic_id.cmp(&b.topic_id));
    for arm in ordered {
        let mean = arm.reward_sum / arm.pulls as f64;
        let bonus = (2.0 * t.ln() / arm.pulls as f64).sqrt();
        let score = mean + bonus;
        match best {
            Some((_, b)) if score <= b => {}
            _ => best = Some((arm, score)),
        }
    }
    best.map(|(a, _)| a)
}

/// Prompt template variants shipped as byte-exact assets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateId {
    RandGen,
    RandTGen,
    RandAnchorGen,
    SsGen,
    Tss,
}

impl TemplateId {
    pub fn for_strategy(kind: StrategyKind) -> Option<TemplateId> {
        match kind {
            StrategyKind::RandGen => Some(TemplateId::RandGen),
            StrategyKind::RandTGen => Some(TemplateId::RandTGen),
            StrategyKind::RandAnchorGen => Some(TemplateId::RandAnchorGen),
            StrategyKind::SsGen => Some(TemplateId::SsGen),
            StrategyKind::Tss => Some(TemplateId::Tss),
            StrategyKind::Rand | StrategyKind::Ss => None,
        }
    }
}

/// The raw template text for a (task, template) pair.
pub fn template_text(task: TaskKind, id: TemplateId) -> &'static str {
    match (task, id) {
        (TaskKind::Math, TemplateId::RandGen) => {
            include_str!("../assets/templates/math_rand_gen.txt")
        }
        (TaskKind::Math, TemplateId::RandTGen) => {
            include_str!("../assets/templates/math_rand_t_gen.txt")
        }
        (TaskKind::Math, TemplateId::RandAnchorGen) => {
            include_str!("../assets/templates/math_rand_anchor_gen.txt")
        }
        (TaskKind::Math, TemplateId::SsGen) => {
            include_str!("../assets/templates/math_ss_gen.txt")
        }
        (TaskKind::Math, TemplateId::Tss) => include_str!("../assets/templates/math_tss.txt"),
        (TaskKind::Implicit, TemplateId::RandGen) => {
            include_str!("../assets/templates/implicit_rand_gen.txt")
        }
        (TaskKind::Implicit, TemplateId::RandTGen) => {
            include_str!("../assets/templates/implicit_rand_t_gen.txt")
        }
        (TaskKind::Implicit, TemplateId::RandAnchorGen) => {
            include_str!("../assets/templates/implicit_rand_anchor_gen.txt")
        }
        (TaskKind::Implicit, TemplateId::SsGen) => {
            include_str!("../assets/templates/implicit_ss_gen.txt")
        }
        (TaskKind::Implicit, TemplateId::Tss) => {
            include_str!("../assets/templates/implicit_tss.txt")
        }
    }
}

/// Fill a template: anchors one per line as `Q: <question>`, topic label as
/// comma-joined keywords, nothing else touched.
pub fn render_prompt(
    task: TaskKind,
    kind: StrategyKind,
    anchor_questions: &[String],
    topic_keywords: Option<&[String]>,
) -> Result<String, DiscoveryError> {
    let id = TemplateId::for_strategy(kind).ok_or_else(|| DiscoveryError::NoTemplate {
        strategy: kind.as_str().into(),
    })?;
    let mut text = template_text(task, id).to_string();
    if text.contains("{anchor_context}") {
        if anchor_questions.is_empty() {
            return Err(DiscoveryError::MissingVariable {
                variable: "anchor_context".into(),
            });
        }
        let block = anchor_questions
            .iter()
            .map(|q| format!("Q: {q}"))
            .collect::<Vec<_>>()
            .join("\n");
        text = text.replace("{anchor_context}", &block);
    }
    if text.contains("{selected_topic_label}") {
        let Some(keywords) = topic_keywords else {
            return Err(DiscoveryError::MissingVariable {
                variable: "selected_topic_label".into(),
            });
        };
        text = text.replace("{selected_topic_label}", &keywords.join(", "));
    }
    Ok(text)
}

/// Where topics come from: seeded k-means over pool embeddings, or
/// user-supplied keyword lists that bypass clustering.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum TopicSource {
    None,
    Cluster { n_topics: usize, seed: u64 },
    Predefined { topics: Vec<(String, Vec<String>)> },
}

/// Topic arms plus (for clustered topics) centroids for assigning new
/// questions to their nearest topic.
#[derive(Debug, Clone)]
pub struct TopicModel {
    pub arms: Vec<TopicArm>,
    centroids: Option<Vec<Vec<f64>>>,
}

impl TopicModel {
    pub fn empty() -> Self {
        Self {
            arms: Vec::new(),
            centroids: None,
        }
    }

    /// Nearest-centroid assignment of a raw embedding; `None` for
    /// predefined topic sets.
    pub fn assign(&self, embedding: &FeatureVector) -> Option<String> {
        let centroids = self.centroids.as_ref()?;
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in centroids.iter().enumerate() {
            let d2: f64 = c
                .iter()
                .zip(embedding.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            match best {
                Some((_, bd)) if d2 >= bd => {}
                _ => best = Some((i, d2)),
            }
        }
        best.map(|(i, _)| self.arms[i].topic_id.clone())
    }
}

/// Build topic arms from the pool per the configured source. Clustered
/// topics run seeded k-means over the raw embeddings; each arm's keywords
/// are the ids of the 3 pool inputs nearest its centroid.
pub fn extract_topics(
    pool: &[PoolItem],
    source: &TopicSource,
) -> Result<TopicModel, DiscoveryError> {
    match source {
        TopicSource::None => Ok(TopicModel::empty()),
        TopicSource::Predefined { topics } => Ok(TopicModel {
            arms: topics
                .iter()
                .map(|(id, kw)| TopicArm::new(id.clone(), kw.clone()))
                .collect(),
            centroids: None,
        }),
        TopicSource::Cluster { n_topics, seed } => {
            if *n_topics == 0 || *n_topics > pool.len() {
                return Err(DiscoveryError::TooManyTopics {
                    requested: *n_topics,
                    pool: pool.len(),
                });
            }
            let data: Vec<Vec<f64>> = pool
                .iter()
                .map(|p| p.raw_embedding.as_slice().to_vec())
                .collect();
            let centroids = kmeans(&data, *n_topics, *seed);
            let mut arms = Vec::with_capacity(*n_topics);
            for (c_idx, centroid) in centroids.iter().enumerate() {
                let mut by_dist: Vec<(usize, f64)> = data
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        (
                            i,
                            x.iter()
                                .zip(centroid)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>(),
                        )
                    })
                    .collect();
                by_dist.sort_by(|a, b| {
                    a.1.partial_cmp(&b.1)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then_with(|| pool[a.0].id.cmp(&pool[b.0].id))
                });
                let keywords: Vec<String> = by_dist
                    .iter()
                    .take(3)
                    .map(|(i, _)| pool[*i].id.clone())
                    .collect();
                arms.push(TopicArm::new(format!("topic{c_idx:02}"), keywords));
            }
            Ok(TopicModel {
                arms,
                centroids: Some(centroids),
            })
        }
    }
}

fn kmeans(data: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = data.len();
    let d = data[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![data[rng.gen_range(0..n)].clone()];
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
    let mut assignment = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, x) in data.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (c_idx, c) in centers.iter().enumerate() {
                let dist: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (c_idx, dist);
                }
            }
            if assignment[i] != best.0 {
                assignment[i] = best.0;
                changed = true;
            }
        }
        for (c_idx, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = data
                .iter()
                .zip(&assignment)
                .filter(|(_, a)| **a == c_idx)
                .map(|(x, _)| x)
                .collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..d {
                center[j] = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    centers
}

/// GP configuration for a discovery run: the prior plus, for generative
/// strategies, the encoder that maps fresh embeddings into GP inputs.
#[derive(Debug, Clone)]
pub struct DiscoveryGp {
    pub prior: GpPrior,
    pub encoder: Option<EncoderSpec>,
}

const GENERATION_RETRIES: usize = 3;

/// Run the discovery loop. Non-generative strategies select and evaluate
/// pool items; generative ones select topics/anchors, render the prompt,
/// generate a case, evaluate the target on it (failure = parsed answer
/// differs from the generated ground truth), and condition the posterior on
/// the new point's embedding. Unparseable generations are retried up to 3
/// times, then recorded as flagged skipped steps that consume budget.
pub fn run_discovery(
    strategy: &DiscoveryStrategy,
    pool: &[PoolItem],
    gp: &DiscoveryGp,
    providers: &mut ProviderSet,
    topic_source: &TopicSource,
    task: TaskKind,
    budget: usize,
    seed: u64,
) -> Result<Trajectory, DiscoveryError> {
    if pool.is_empty() {
        return Err(DiscoveryError::EmptyPool);
    }
    if budget == 0 {
        return Err(DiscoveryError::ZeroBudget);
    }
    if strategy.kind.is_generative() {
        if gp.encoder.is_none() {
            return Err(DiscoveryError::MissingEncoder);
        }
        if !matches!(gp.prior.mean, MeanSpec::Constant(_) | MeanSpec::EncoderMean) {
            return Err(DiscoveryError::UnsupportedMean);
        }
    }
    let mut topics = extract_topics(pool, topic_source)?;
    if strategy.kind.uses_topic() && topics.arms.is_empty() {
        return Err(DiscoveryError::MissingTopics {
            strategy: strategy.kind.as_str().into(),
        });
    }
    let mut post = GpPosterior::condition(gp.prior.clone(), Observations::empty())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectory = Trajectory::default();
    let mut unevaluated: Vec<usize> = (0..pool.len()).collect();
    let mut total_pulls: u64 = 0;

    for iteration in 1..=budget {
        match strategy.kind {
            StrategyKind::Rand | StrategyKind::Ss => {
                if unevaluated.is_empty() {
                    break;
                }
                let pick = match strategy.kind {
                    StrategyKind::Rand => unevaluated[rng.gen_range(0..unevaluated.len())],
                    _ => {
                        // argmax acquisition over the unevaluated pool,
                        // ties toward the lowest id
                        let mut best: Option<(usize, f64)> = None;
                        let mut ordered = unevaluated.clone();
                        ordered.sort_by(|a, b| pool[*a].id.cmp(&pool[*b].id));
                        for idx in ordered {
                            let acq = acquisition_ss(&post, &pool[idx].gp_input, &strategy.params)?;
                            match best {
                                Some((_, b)) if acq <= b => {}
                                _ => best = Some((idx, acq)),
                            }
                        }
                        best.expect("nonempty unevaluated").0
                    }
                };
                let item = &pool[pick];
                let acq_value = acquisition_ss(&post, &item.gp_input, &strategy.params)?;
                unevaluated.retain(|i| *i != pick);
                let expected = Answer::parse(&item.ground_truth, task).ok_or_else(|| {
                    ProviderError::SchemaError(format!(
                        "pool item `{}` ground truth `{}` unparseable",
                        item.id, item.ground_truth
                    ))
                })?;
                let outcome =
                    match providers
                        .target
                        .evaluate_target(&item.question, &expected, task)
                    {
                        Ok(o) => o,
                        Err(e) => {
                            trajectory.error =
                                Some(format!("provider failed at step {iteration}: {e}"));
                            break;
                        }
                    };
                let mut step = TrajectoryStep::bare(iteration, item.id.clone());
                step.question = Some(item.question.clone());
                step.ground_truth = Some(item.ground_truth.clone());
                step.raw_response = Some(outcome.raw_response.clone());
                step.parsed_answer = outcome.parsed_answer.clone();
                step.topic_id = item
                    .topic_id
                    .clone()
                    .or_else(|| topics.assign(&item.raw_embedding));
                step.acquisition_value = Some(acq_value);
                step.embedding = Some(item.raw_embedding.as_slice().to_vec());
                match outcome.score {
                    Some(score) => {
                        let y = score as f64;
                        step.observed = Some(y);
                        post = post.extend(item.gp_input.clone(), y)?;
                    }
                    None => step.skipped = true,
                }
                trajectory.steps.push(step);
            }
            _ => {
                // generative strategies
                let topic_arm = if strategy.kind.uses_topic() {
                    match strategy.kind {
                        StrategyKind::Tss => ucb1_select(&topics.arms, total_pulls).cloned(),
                        _ => {
                            // random topic constraint
                            let idx = rng.gen_range(0..topics.arms.len());
                            Some(topics.arms[idx].clone())
                        }
                    }
                } else {
                    None
                };
                let anchor_selection = if strategy.kind.uses_anchors() {
                    match strategy.kind {
                        StrategyKind::RandAnchorGen => {
                            let mut idxs: Vec<usize> = (0..pool.len()).collect();
                            let take = strategy.anchor_count.min(pool.len());
                            let mut picked = Vec::with_capacity(take);
                            for _ in 0..take {
                                let j = rng.gen_range(0..idxs.len());
                                picked.push(idxs.swap_remove(j));
                            }
                            Some(AnchorSelection {
                                ids: picked.iter().map(|i| pool[*i].id.clone()).collect(),
                                fallback: false,
                                truncated: strategy.anchor_count > pool.len(),
                                top_value: 0.0,
                            })
                        }
                        _ => Some(select_anchors(
                            &post,
                            pool,
                            strategy.anchor_count,
                            &strategy.params,
                        )?),
                    }
                } else {
                    None
                };
                let anchor_questions: Vec<String> = anchor_selection
                    .as_ref()
                    .map(|sel| {
                        sel.ids
                            .iter()
                            .map(|id| {
                                pool.iter()
                                    .find(|p| &p.id == id)
                                    .expect("anchor id from pool")
                                    .question
                                    .clone()
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                let topic_keywords: Option<Vec<String>> =
                    topic_arm.as_ref().map(|a| a.keywords.clone());
                let prompt = render_prompt(
                    task,
                    strategy.kind,
                    &anchor_questions,
                    topic_keywords.as_deref(),
                )?;

                let mut case: Option<(GeneratedCase, String)> = None;
                let mut last_schema_error = String::new();
                for _ in 0..GENERATION_RETRIES {
                    match providers.generator.generate(&prompt, task) {
                        Ok(ok) => {
                            case = Some(ok);
                            break;
                        }
                        Err(ProviderError::SchemaError(e)) => last_schema_error = e,
                        Err(e) => {
                            trajectory.error =
                                Some(format!("provider failed at step {iteration}: {e}"));
                            break;
                        }
                    }
                }
                if trajectory.error.is_some() {
                    break;
                }
                let mut step = TrajectoryStep::bare(iteration, format!("gen{iteration:04}"));
                step.prompt = Some(prompt.clone());
                step.topic_id = topic_arm.as_ref().map(|a| a.topic_id.clone());
                if let Some(sel) = &anchor_selection {
                    step.anchors = sel.ids.clone();
                    step.acquisition_value = Some(sel.top_value);
                }
                let Some((mut generated, raw)) = case else {
                    step.skipped = true;
                    step.raw_response = Some(format!("schema error: {last_schema_error}"));
                    trajectory.steps.push(step);
                    continue;
                };
                generated.topic_id = topic_arm.as_ref().map(|a| a.topic_id.clone());
                generated.anchors_used = anchor_selection
                    .as_ref()
                    .map(|s| s.ids.clone())
                    .unwrap_or_default();

                let expected = Answer::parse(&generated.ground_truth, task)
                    .expect("schema-validated ground truth parses");
                let outcome =
                    match providers
                        .target
                        .evaluate_target(&generated.question, &expected, task)
                    {
                        Ok(o) => o,
                        Err(e) => {
                            trajectory.error =
                                Some(format!("provider failed at step {iteration}: {e}"));
                            break;
                        }
                    };
                let raw_embedding = match providers.embedder.embed(&[generated.question.clone()]) {
                    Ok(mut v) => v.pop().expect("one embedding per text"),
                    Err(e) => {
                        trajectory.error =
                            Some(format!("provider failed at step {iteration}: {e}"));
                        break;
                    }
                };
                let encoder = gp.encoder.as_ref().expect("checked at entry");
                let gp_input =
                    encoder.encode_input(format!("gen{iteration:04}"), &raw_embedding)?;

                step.question = Some(generated.question.clone());
                step.ground_truth = Some(generated.ground_truth.clone());
                step.raw_response = Some(raw);
                step.parsed_answer = outcome.parsed_answer.clone();
                step.embedding = Some(raw_embedding.as_slice().to_vec());
                if step.topic_id.is_none() {
                    step.topic_id = topics.assign(&raw_embedding);
                }
                match outcome.score {
                    Some(score) => {
                        let y = score as f64;
                        step.observed = Some(y);
                        post = post.extend(gp_input, y)?;
                        if let (StrategyKind::Tss, Some(arm)) = (strategy.kind, &topic_arm) {
                            if let Some(stats) =
                                topics.arms.iter_mut().find(|a| a.topic_id == arm.topic_id)
                            {
                                stats.pulls += 1;
                                stats.reward_sum += y;
                                total_pulls += 1;
                            }
                        }
                    }
                    None => step.skipped = true,
                }
                trajectory.steps.push(step);
            }
        }
    }
    Ok(trajectory)
}
