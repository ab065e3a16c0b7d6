//! Clients for the three external roles — embedder, generator, and target
//! evaluator — with content-addressed record/replay.
//!
//! Every call is canonicalized (role, model, temperature, sorted-key JSON
//! payload) and hashed; record mode appends `(digest, request, response)`
//! entries to a transcript, and replay mode answers exclusively from the
//! transcript. Replay and mock clients hold no HTTP machinery at all, so no
//! network traffic is possible in those modes by construction.
//!
//! The mock providers are pure functions of the request text and a seed:
//! embeddings are normalized bags of per-token hash vectors (so texts
//! sharing words land near each other), and the mock generator/target agree
//! on a hashed canonical answer per question, which makes failure events a
//! controlled, deterministic function of the question text.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::gp::FeatureVector;
use crate::InputId;

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("replay transcript has no entry for digest {0}")]
    ReplayMiss(String),
    #[error("provider call failed after {retries} retries: {message}")]
    CallFailed { retries: usize, message: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("generated case failed schema validation: {0}")]
    SchemaError(String),
    #[error("texts must be nonempty")]
    EmptyInput,
    #[error("transcript io: {0}")]
    TranscriptIo(String),
    #[error("environment variable `{0}` with the auth token is not set")]
    MissingAuthToken(String),
}

/// Task family: determines the answer schema (number vs yes/no) and the
/// prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Grade-school math; answers are numbers.
    Math,
    /// Implicit multi-hop reasoning; answers are yes/no.
    Implicit,
}

/// Canonical answer value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Answer {
    Number(f64),
    YesNo(bool),
}

impl Answer {
    /// Canonical string form ("42", "3.5", "yes", "no"). Idempotent under
    /// re-parsing.
    pub fn canonical(&self) -> String {
        match self {
            Answer::Number(v) => {
                if v.fract() == 0.0 && v.abs() < 1e15 {
                    format!("{}", *v as i64)
                } else {
                    format!("{v}")
                }
            }
            Answer::YesNo(b) => if *b { "yes" } else { "no" }.to_string(),
        }
    }

    /// Parse a canonical-form answer (a bare number or yes/no token).
    pub fn parse(text: &str, task: TaskKind) -> Option<Answer> {
        let trimmed = text.trim().trim_end_matches(['.', '!', ',']);
        match task {
            TaskKind::Math => trimmed
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Answer::Number),
            TaskKind::Implicit => match trimmed.to_ascii_lowercase().as_str() {
                "yes" => Some(Answer::YesNo(true)),
                "no" => Some(Answer::YesNo(false)),
                _ => None,
            },
        }
    }

    /// Equality after canonicalization: integers compare exactly, other
    /// numbers at 1e-6 relative tolerance, yes/no case-insensitively (by
    /// construction).
    pub fn matches(&self, other: &Answer) -> bool {
        match (self, other) {
            (Answer::Number(a), Answer::Number(b)) => {
                if a.fract() == 0.0 && b.fract() == 0.0 {
                    a == b
                } else {
                    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0)
                }
            }
            (Answer::YesNo(a), Answer::YesNo(b)) => a == b,
            _ => false,
        }
    }
}

/// Extract the final answer from free-form model text: the last number for
/// math, the last yes/no token for implicit reasoning.
pub fn extract_answer(text: &str, task: TaskKind) -> Option<Answer> {
    match task {
        TaskKind::Math => {
            let re = regex::Regex::new(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?").expect("valid regex");
            let last = re.find_iter(text).last()?;
            last.as_str().parse::<f64>().ok().map(Answer::Number)
        }
        TaskKind::Implicit => {
            let mut found = None;
            for token in text.split(|c: char| !c.is_ascii_alphabetic()) {
                match token.to_ascii_lowercase().as_str() {
                    "yes" => found = Some(Answer::YesNo(true)),
                    "no" => found = Some(Answer::YesNo(false)),
                    _ => {}
                }
            }
            found
        }
    }
}

/// A synthesized test case parsed from the generator's JSON payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCase {
    pub question: String,
    /// The generator's worked solution or reasoning.
    pub rationale: String,
    /// Canonical ground-truth answer string.
    pub ground_truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anchors_used: Vec<InputId>,
}

/// Outcome of scoring the target on one question (1 = failure).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_answer: Option<String>,
    /// Defined only when `parse_ok`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    pub parse_ok: bool,
}

/// Canonicalized request: the unit of content addressing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub role: String,
    pub model: String,
    pub temperature: f64,
    pub payload: Value,
}

impl ProviderRequest {
    /// Sorted-key JSON form; prompt bytes inside the payload are preserved
    /// exactly.
    pub fn canonical(&self) -> String {
        // serde_json maps are BTree-backed, so key order is already sorted
        serde_json::to_string(&json!({
            "model": self.model,
            "payload": self.payload,
            "role": self.role,
            "temperature": self.temperature,
        }))
        .expect("request serializes")
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical().as_bytes());
        hex::encode(hasher.finalize())
    }
}

/// One recorded exchange.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    pub request: ProviderRequest,
    pub response: Value,
    pub provider_id: String,
    pub timestamp: u64,
}

/// Content-addressed store of recorded calls.
#[derive(Debug, Clone, Default)]
pub struct ProviderTranscript {
    pub entries: Vec<TranscriptEntry>,
    index: BTreeMap<String, usize>,
}

impl ProviderTranscript {
    pub fn insert(&mut self, entry: TranscriptEntry) {
        self.index.insert(entry.digest.clone(), self.entries.len());
        self.entries.push(entry);
    }

    pub fn lookup(&self, digest: &str) -> Option<&Value> {
        self.index.get(digest).map(|&i| &self.entries[i].response)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), ProviderError> {
        let mut file =
            std::fs::File::create(path).map_err(|e| ProviderError::TranscriptIo(e.to_string()))?;
        for entry in &self.entries {
            let line = serde_json::to_string(entry).expect("entry serializes");
            writeln!(file, "{line}").map_err(|e| ProviderError::TranscriptIo(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::TranscriptIo(e.to_string()))?;
        let mut transcript = Self::default();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(line)
                .map_err(|e| ProviderError::TranscriptIo(e.to_string()))?;
            transcript.insert(entry);
        }
        Ok(transcript)
    }
}

/// A backend that can answer canonicalized requests.
pub trait RawProvider: Send {
    fn call(&mut self, request: &ProviderRequest) -> Result<Value, ProviderError>;
    fn id(&self) -> String;
}

/// HTTP/JSON backend. POSTs the canonical request to
/// `{base_url}/v1/{role}` with the auth token from the configured
/// environment variable; retries transient failures 3 times with
/// exponential backoff.
pub struct LiveProvider {
    pub base_url: String,
    pub auth_env: String,
    client: reqwest::blocking::Client,
}

impl LiveProvider {
    pub fn new(base_url: impl Into<String>, auth_env: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            auth_env: auth_env.into(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

const LIVE_RETRIES: usize = 3;

impl RawProvider for LiveProvider {
    fn call(&mut self, request: &ProviderRequest) -> Result<Value, ProviderError> {
        let token = std::env::var(&self.auth_env)
            .map_err(|_| ProviderError::MissingAuthToken(self.auth_env.clone()))?;
        let url = format!(
            "{}/v1/{}",
            self.base_url.trim_end_matches('/'),
            request.role
        );
        let mut last_error = String::new();
        for attempt in 0..=LIVE_RETRIES {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(100 << attempt));
            }
            let result = self
                .client
                .post(&url)
                .bearer_auth(&token)
                .json(&json!({
                    "model": request.model,
                    "payload": request.payload,
                    "temperature": request.temperature,
                }))
                .send();
            match result {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<Value>()
                        .map_err(|e| ProviderError::MalformedResponse(e.to_string()));
                }
                Ok(resp) => last_error = format!("status {}", resp.status()),
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(ProviderError::CallFailed {
            retries: LIVE_RETRIES,
            message: last_error,
        })
    }

    fn id(&self) -> String {
        format!("live:{}", self.base_url)
    }
}

/// Behavior of the mock generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockGeneratorBehavior {
    /// Fresh question derived from the prompt hash; mentions the topic when
    /// one is requested.
    Standard,
    /// Question confined to the requested topic (topic tokens dominate the
    /// text).
    EchoTopic,
    /// Question mimics the first anchor line, collapsing onto the anchors'
    /// semantic neighborhood.
    MimicAnchors,
}

/// Deterministic offline backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockConfig {
    pub embed_dim: usize,
    pub seed: u64,
    /// Probability that the mock target answers a question incorrectly
    /// (hash-Bernoulli per question).
    pub target_failure_prob: f64,
    pub generator_behavior: MockGeneratorBehavior,
    /// Question -> (correct answer, force-failure flag); overrides the
    /// hash rule for planted pools.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub answer_key: BTreeMap<String, (String, bool)>,
    /// The target fails exactly on questions containing any of these
    /// (case-insensitive) keywords; takes precedence over the hash rule.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failure_keywords: Vec<String>,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            seed: 0,
            target_failure_prob: 0.3,
            generator_behavior: MockGeneratorBehavior::Standard,
            answer_key: BTreeMap::new(),
            failure_keywords: Vec::new(),
        }
    }
}

fn hash_u64(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    let bytes = hasher.finalize();
    u64::from_le_bytes(bytes[..8].try_into().expect("sha256 is long enough"))
}

fn unit_fraction(parts: &[&str]) -> f64 {
    hash_u64(parts) as f64 / u64::MAX as f64
}

/// Hash-derived canonical answer the mock generator and mock target agree
/// on for any question text.
pub fn mock_answer_for(question: &str, task: TaskKind, seed: u64) -> Answer {
    let h = hash_u64(&["answer", &seed.to_string(), question]);
    match task {
        TaskKind::Math => Answer::Number((h % 997) as f64),
        TaskKind::Implicit => Answer::YesNo(h % 2 == 0),
    }
}

/// Token-bag embedding: the normalized sum of per-token hash vectors, so
/// texts sharing words are close in cosine. Identical text always maps to
/// the identical unit vector.
pub fn mock_embedding(text: &str, dim: usize, seed: u64) -> FeatureVector {
    let mut acc = vec![0.0f64; dim];
    let mut any = false;
    for token in text
        .to_ascii_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
    {
        if token.is_empty() {
            continue;
        }
        any = true;
        let mut rng = ChaCha8Rng::seed_from_u64(hash_u64(&["tok", &seed.to_string(), token]));
        for a in acc.iter_mut() {
            *a += rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    if !any {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_u64(&["tok", &seed.to_string(), ""]));
        for a in acc.iter_mut() {
            *a += rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    FeatureVector::new(acc.into_iter().map(|v| v / norm).collect()).expect("nonzero norm")
}

fn prompt_topic(prompt: &str) -> Option<String> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix("TOPIC TO USE: "))
        .map(|s| s.trim().to_string())
}

fn prompt_anchors(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix("Q: "))
        .map(|s| s.trim().to_string())
        .collect()
}

pub struct MockProvider {
    pub config: MockConfig,
}

impl MockProvider {
    pub fn new(config: MockConfig) -> Self {
        Self { config }
    }

    fn generate_payload(&self, prompt: &str, task: TaskKind) -> Value {
        let topic = prompt_topic(prompt);
        let anchors = prompt_anchors(prompt);
        let tag = hash_u64(&["gen", &self.config.seed.to_string(), prompt]) % 100_000;
        let question = match self.config.generator_behavior {
            MockGeneratorBehavior::Standard => match &topic {
                Some(t) => format!("synthetic case {tag} about {t}"),
                None => format!("synthetic case {tag}"),
            },
            MockGeneratorBehavior::EchoTopic => {
                let t = topic.clone().unwrap_or_else(|| "general".into());
                format!("{t} {t} themed case {tag}")
            }
            MockGeneratorBehavior::MimicAnchors => match anchors.first() {
                Some(a) => format!("{a} variant {tag}"),
                None => format!("synthetic case {tag}"),
            },
        };
        let answer = mock_answer_for(&question, task, self.config.seed);
        let (rationale_key, rationale) = match task {
            TaskKind::Math => (
                "solution",
                format!(
                    "Step 1: combine. Therefore the answer is {}",
                    answer.canonical()
                ),
            ),
            TaskKind::Implicit => (
                "reasoning",
                format!(
                    "Step 1: recall. Therefore the answer is {}",
                    answer.canonical().to_uppercase()
                ),
            ),
        };
        let gt: Value = match &answer {
            Answer::Number(v) => json!(v),
            Answer::YesNo(b) => json!(if *b { "yes" } else { "no" }),
        };
        let body = json!({
            "question": question,
            rationale_key: rationale,
            "ground_truth": gt,
        });
        json!({ "text": body.to_string() })
    }

    fn evaluate_payload(&self, question: &str, task: TaskKind) -> Value {
        let (correct, force_fail) = match self.config.answer_key.get(question) {
            Some((ans, fail)) => (
                Answer::parse(ans, task)
                    .unwrap_or_else(|| mock_answer_for(question, task, self.config.seed)),
                Some(*fail),
            ),
            None => (mock_answer_for(question, task, self.config.seed), None),
        };
        let fails = force_fail.unwrap_or_else(|| {
            if !self.config.failure_keywords.is_empty() {
                let lower = question.to_ascii_lowercase();
                self.config
                    .failure_keywords
                    .iter()
                    .any(|k| lower.contains(&k.to_ascii_lowercase()))
            } else {
                unit_fraction(&["fail", &self.config.seed.to_string(), question])
                    < self.config.target_failure_prob
            }
        });
        let answer = if fails {
            match correct {
                Answer::Number(v) => Answer::Number(v + 1.0),
                Answer::YesNo(b) => Answer::YesNo(!b),
            }
        } else {
            correct
        };
        let text = match answer {
            Answer::Number(v) => format!(
                "Working through it, the answer is {}.",
                Answer::Number(v).canonical()
            ),
            Answer::YesNo(b) => format!(
                "Considering the steps, the answer is {}.",
                if b { "Yes" } else { "No" }
            ),
        };
        json!({ "text": text })
    }
}

fn task_from_payload(payload: &Value) -> TaskKind {
    match payload.get("task").and_then(|t| t.as_str()) {
        Some("implicit") => TaskKind::Implicit,
        _ => TaskKind::Math,
    }
}

impl RawProvider for MockProvider {
    fn call(&mut self, request: &ProviderRequest) -> Result<Value, ProviderError> {
        match request.role.as_str() {
            "embed" => {
                let text = request
                    .payload
                    .get("text")
                    .and_then(|t| t.as_str())
                    .ok_or_else(|| ProviderError::MalformedResponse("missing text".into()))?;
                let v = mock_embedding(text, self.config.embed_dim, self.config.seed);
                Ok(json!({ "embedding": v.as_slice() }))
            }
            "generate" => {
                let prompt = request
                    .payload
                    .get("prompt")
                    .and_then(|t| t.as_str())
                    .ok_or_else(|| ProviderError::MalformedResponse("missing prompt".into()))?;
                Ok(self.generate_payload(prompt, task_from_payload(&request.payload)))
            }
            "evaluate" => {
                let question = request
                    .payload
                    .get("question")
                    .and_then(|t| t.as_str())
                    .ok_or_else(|| ProviderError::MalformedResponse("missing question".into()))?;
                Ok(self.evaluate_payload(question, task_from_payload(&request.payload)))
            }
            other => Err(ProviderError::MalformedResponse(format!(
                "unknown role {other}"
            ))),
        }
    }

    fn id(&self) -> String {
        format!("mock:{}", self.config.seed)
    }
}

enum ClientMode {
    /// Direct calls (live or mock), optionally recording.
    Direct {
        inner: Box<dyn RawProvider>,
        record: bool,
    },
    /// Transcript only; a missing digest is an error, never a live call.
    Replay,
}

/// Role-agnostic client: canonicalize, dispatch per mode, cache embeddings
/// per text within the run.
pub struct ProviderClient {
    pub model: String,
    pub temperature: f64,
    mode: ClientMode,
    transcript: ProviderTranscript,
    embed_cache: BTreeMap<String, FeatureVector>,
}

impl ProviderClient {
    pub fn mock(model: impl Into<String>, temperature: f64, config: MockConfig) -> Self {
        Self {
            model: model.into(),
            temperature,
            mode: ClientMode::Direct {
                inner: Box::new(MockProvider::new(config)),
                record: false,
            },
            transcript: ProviderTranscript::default(),
            embed_cache: BTreeMap::new(),
        }
    }

    pub fn live(
        model: impl Into<String>,
        temperature: f64,
        base_url: impl Into<String>,
        auth_env: impl Into<String>,
    ) -> Self {
        Self {
            model: model.into(),
            temperature,
            mode: ClientMode::Direct {
                inner: Box::new(LiveProvider::new(base_url, auth_env)),
                record: false,
            },
            transcript: ProviderTranscript::default(),
            embed_cache: BTreeMap::new(),
        }
    }

    /// Wrap any direct client so every exchange lands in the transcript.
    pub fn recording(mut self) -> Self {
        if let ClientMode::Direct { record, .. } = &mut self.mode {
            *record = true;
        }
        self
    }

    pub fn replay(
        model: impl Into<String>,
        temperature: f64,
        transcript: ProviderTranscript,
    ) -> Self {
        Self {
            model: model.into(),
            temperature,
            mode: ClientMode::Replay,
            transcript,
            embed_cache: BTreeMap::new(),
        }
    }

    pub fn transcript(&self) -> &ProviderTranscript {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> ProviderTranscript {
        std::mem::take(&mut self.transcript)
    }

    fn dispatch(&mut self, request: ProviderRequest) -> Result<Value, ProviderError> {
        match &mut self.mode {
            ClientMode::Replay => {
                let digest = request.digest();
                self.transcript
                    .lookup(&digest)
                    .cloned()
                    .ok_or(ProviderError::ReplayMiss(digest))
            }
            ClientMode::Direct { inner, record } => {
                let response = inner.call(&request)?;
                if *record {
                    let timestamp = std::time::SystemTime::now()
                        .duration_since(std::time::UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0);
                    self.transcript.insert(TranscriptEntry {
                        digest: request.digest(),
                        request,
                        response: response.clone(),
                        provider_id: inner.id(),
                        timestamp,
                    });
                }
                Ok(response)
            }
        }
    }

    /// Embed texts, one vector per text; identical text yields the identical
    /// vector via the per-run cache.
    pub fn embed(&mut self, texts: &[String]) -> Result<Vec<FeatureVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            if let Some(v) = self.embed_cache.get(text) {
                out.push(v.clone());
                continue;
            }
            let request = ProviderRequest {
                role: "embed".into(),
                model: self.model.clone(),
                temperature: self.temperature,
                payload: json!({ "text": text }),
            };
            let response = self.dispatch(request)?;
            let values: Vec<f64> = response
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| ProviderError::MalformedResponse("missing embedding".into()))?
                .iter()
                .map(|v| {
                    v.as_f64().ok_or_else(|| {
                        ProviderError::MalformedResponse("non-numeric embedding".into())
                    })
                })
                .collect::<Result<_, _>>()?;
            let v = FeatureVector::new(values)
                .map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
            self.embed_cache.insert(text.clone(), v.clone());
            out.push(v);
        }
        Ok(out)
    }

    /// Generate a test case from a prompt and parse the JSON payload against
    /// the task schema.
    pub fn generate(
        &mut self,
        prompt: &str,
        task: TaskKind,
    ) -> Result<(GeneratedCase, String), ProviderError> {
        if prompt.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let request = ProviderRequest {
            role: "generate".into(),
            model: self.model.clone(),
            temperature: self.temperature,
            payload: json!({
                "prompt": prompt,
                "task": match task { TaskKind::Math => "math", TaskKind::Implicit => "implicit" },
            }),
        };
        let response = self.dispatch(request)?;
        let raw = response
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| ProviderError::MalformedResponse("missing text".into()))?
            .to_string();
        let case = parse_generated_case(&raw, task)?;
        Ok((case, raw))
    }

    /// Ask the target the question and score its extracted answer against
    /// the expected one (1 = failure).
    pub fn evaluate_target(
        &mut self,
        question: &str,
        expected: &Answer,
        task: TaskKind,
    ) -> Result<EvalOutcome, ProviderError> {
        if question.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let request = ProviderRequest {
            role: "evaluate".into(),
            model: self.model.clone(),
            temperature: self.temperature,
            payload: json!({
                "question": question,
                "task": match task { TaskKind::Math => "math", TaskKind::Implicit => "implicit" },
            }),
        };
        let response = self.dispatch(request)?;
        let raw = response
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| ProviderError::MalformedResponse("missing text".into()))?
            .to_string();
        Ok(score_response(&raw, expected, task))
    }
}

/// Score a raw target response against the expected canonical answer.
pub fn score_response(raw: &str, expected: &Answer, task: TaskKind) -> EvalOutcome {
    match extract_answer(raw, task) {
        Some(parsed) => {
            let score = if parsed.matches(expected) { 0 } else { 1 };
            EvalOutcome {
                raw_response: raw.to_string(),
                parsed_answer: Some(parsed.canonical()),
                score: Some(score),
                parse_ok: true,
            }
        }
        None => EvalOutcome {
            raw_response: raw.to_string(),
            parsed_answer: None,
            score: None,
            parse_ok: false,
        },
    }
}

/// Parse the generator's JSON payload into a [`GeneratedCase`], enforcing
/// the task's answer schema.
pub fn parse_generated_case(raw: &str, task: TaskKind) -> Result<GeneratedCase, ProviderError> {
    let value: Value = serde_json::from_str(raw.trim())
        .map_err(|e| ProviderError::SchemaError(format!("payload is not JSON: {e}")))?;
    let question = value
        .get("question")
        .and_then(|q| q.as_str())
        .ok_or_else(|| ProviderError::SchemaError("missing `question`".into()))?
        .to_string();
    let rationale = value
        .get("solution")
        .or_else(|| value.get("reasoning"))
        .and_then(|s| s.as_str())
        .unwrap_or_default()
        .to_string();
    let gt_value = value
        .get("ground_truth")
        .ok_or_else(|| ProviderError::SchemaError("missing `ground_truth`".into()))?;
    let gt_text = match gt_value {
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        other => {
            return Err(ProviderError::SchemaError(format!(
                "ground_truth has unsupported type: {other}"
            )))
        }
    };
    let answer = Answer::parse(&gt_text, task).ok_or_else(|| {
        ProviderError::SchemaError(format!(
            "ground_truth `{gt_text}` does not parse as a {} answer",
            match task {
                TaskKind::Math => "numeric",
                TaskKind::Implicit => "yes/no",
            }
        ))
    })?;
    Ok(GeneratedCase {
        question,
        rationale,
        ground_truth: answer.canonical(),
        topic_id: None,
        anchors_used: Vec::new(),
    })
}

/// The three role clients used by a run.
pub struct ProviderSet {
    pub embedder: ProviderClient,
    pub generator: ProviderClient,
    pub target: ProviderClient,
}

impl ProviderSet {
    /// Mock providers with the conventional temperatures (generator 0.7,
    /// target 0.0). Requires no configuration beyond an optional seed.
    pub fn mock(config: MockConfig) -> Self {
        Self {
            embedder: ProviderClient::mock("mock-embedder", 0.0, config.clone()),
            generator: ProviderClient::mock("mock-generator", 0.7, config.clone()),
            target: ProviderClient::mock("mock-target", 0.0, config),
        }
    }

    /// Record every exchange of all three roles.
    pub fn recording(self) -> Self {
        Self {
            embedder: self.embedder.recording(),
            generator: self.generator.recording(),
            target: self.target.recording(),
        }
    }

    /// Replay all three roles from one merged transcript.
    pub fn replay(transcript: &ProviderTranscript) -> Self {
        Self {
            embedder: ProviderClient::replay("mock-embedder", 0.0, transcript.clone()),
            generator: ProviderClient::replay("mock-generator", 0.7, transcript.clone()),
            target: ProviderClient::replay("mock-target", 0.0, transcript.clone()),
        }
    }

    /// Merge the three role transcripts into one store.
    pub fn merged_transcript(&mut self) -> ProviderTranscript {
        let mut merged = ProviderTranscript::default();
        for client in [&mut self.embedder, &mut self.generator, &mut self.target] {
            for entry in client.take_transcript().entries {
                merged.insert(entry);
            }
        }
        merged
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn duplicate_texts_share_vectors() {
        let mut client = ProviderClient::mock("m", 0.0, MockConfig::default());
        let texts = vec!["the same text".to_string(), "the same text".to_string()];
        let vs = client.embed(&texts).unwrap();
        assert_eq!(vs[0], vs[1]);
    }

    #[test]
    fn mock_embeddings_are_unit_norm_and_self_similar() {
        let v = mock_embedding("a question about apples", 16, 0);
        let norm: f64 = v.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_relative_eq!(norm, 1.0, epsilon = 1e-12);
        let v2 = mock_embedding("a question about apples", 16, 0);
        let cosine: f64 = v
            .as_slice()
            .iter()
            .zip(v2.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        assert_relative_eq!(cosine, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn shared_tokens_raise_cosine() {
        let a = mock_embedding("counting apples in a basket", 32, 0);
        let b = mock_embedding("counting apples in a box", 32, 0);
        let c = mock_embedding("orbital mechanics of jupiter", 32, 0);
        let cos = |x: &FeatureVector, y: &FeatureVector| -> f64 {
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(p, q)| p * q)
                .sum()
        };
        assert!(cos(&a, &b) > cos(&a, &c) + 0.2);
    }

    #[test]
    fn record_then_replay_is_byte_identical() {
        let mut rec = ProviderClient::mock("m", 0.0, MockConfig::default()).recording();
        let texts = vec!["alpha".to_string(), "beta".to_string()];
        let original = rec.embed(&texts).unwrap();
        let transcript = rec.take_transcript();
        let mut rep = ProviderClient::replay("m", 0.0, transcript);
        let replayed = rep.embed(&texts).unwrap();
        assert_eq!(original, replayed);
    }

    #[test]
    fn replay_miss_is_an_error_not_a_live_call() {
        let mut rep = ProviderClient::replay("m", 0.0, ProviderTranscript::default());
        let err = rep.embed(&["unseen".to_string()]).unwrap_err();
        assert!(matches!(err, ProviderError::ReplayMiss(_)));
    }

    #[test]
    fn canonicalization_sorts_keys_and_is_stable() {
        let r1 = ProviderRequest {
            role: "embed".into(),
            model: "m".into(),
            temperature: 0.0,
            payload: json!({"b": 1, "a": 2}),
        };
        let r2 = ProviderRequest {
            role: "embed".into(),
            model: "m".into(),
            temperature: 0.0,
            payload: json!({"a": 2, "b": 1}),
        };
        assert_eq!(r1.canonical(), r2.canonical());
        assert_eq!(r1.digest(), r2.digest());
    }

    #[test]
    fn generated_case_parses_and_canonicalizes() {
        let raw = r#"{"question": "q", "solution": "s", "ground_truth": "42.0"}"#;
        let case = parse_generated_case(raw, TaskKind::Math).unwrap();
        assert_eq!(case.ground_truth, "42");
        let raw2 = r#"{"question": "q", "solution": "s", "ground_truth": 42}"#;
        let case2 = parse_generated_case(raw2, TaskKind::Math).unwrap();
        assert_eq!(case.ground_truth, case2.ground_truth);
    }

    #[test]
    fn generated_case_missing_ground_truth_is_schema_error() {
        let raw = r#"{"question": "q", "solution": "s"}"#;
        assert!(matches!(
            parse_generated_case(raw, TaskKind::Math),
            Err(ProviderError::SchemaError(_))
        ));
    }

    #[test]
    fn implicit_schema_rejects_numbers() {
        let raw = r#"{"question": "q", "reasoning": "r", "ground_truth": "7"}"#;
        assert!(parse_generated_case(raw, TaskKind::Implicit).is_err());
        let raw = r#"{"question": "q", "reasoning": "r", "ground_truth": "YES"}"#;
        let case = parse_generated_case(raw, TaskKind::Implicit).unwrap();
        assert_eq!(case.ground_truth, "yes");
    }

    #[test]
    fn score_matches_and_mismatches() {
        let expected = Answer::Number(12.0);
        let hit = score_response("adding up: 5 + 7 = 12", &expected, TaskKind::Math);
        assert_eq!(hit.score, Some(0));
        let miss = score_response("the total is 13", &expected, TaskKind::Math);
        assert_eq!(miss.score, Some(1));
        let unparseable = score_response("no digits here", &expected, TaskKind::Math);
        assert!(!unparseable.parse_ok);
        assert_eq!(unparseable.score, None);
    }

    #[test]
    fn yes_no_canonicalization_is_case_insensitive() {
        let expected = Answer::YesNo(true);
        let outcome = score_response("Thinking about it... Yes.", &expected, TaskKind::Implicit);
        assert_eq!(outcome.score, Some(0));
        assert_eq!(outcome.parsed_answer.as_deref(), Some("yes"));
        // canonicalization is idempotent and symmetric
        let a = Answer::parse("Yes.", TaskKind::Implicit).map(|x| x.canonical());
        let b = Answer::parse("yes", TaskKind::Implicit).map(|x| x.canonical());
        assert_eq!(a, b);
    }

    #[test]
    fn last_number_extraction() {
        let ans = extract_answer("first 3 then 5, final answer: 8.", TaskKind::Math).unwrap();
        assert!(ans.matches(&Answer::Number(8.0)));
        let ans = extract_answer("yes then no, so: no!", TaskKind::Implicit).unwrap();
        assert!(ans.matches(&Answer::YesNo(false)));
    }

    #[test]
    fn numeric_tolerance_and_integer_exactness() {
        assert!(Answer::Number(42.0).matches(&Answer::Number(42.0)));
        assert!(!Answer::Number(42.0).matches(&Answer::Number(43.0)));
        assert!(Answer::Number(0.5000001).matches(&Answer::Number(0.5000002)));
    }

    #[test]
    fn mock_generator_respects_topic_and_anchors() {
        let mut client = ProviderClient::mock(
            "g",
            0.7,
            MockConfig {
                generator_behavior: MockGeneratorBehavior::EchoTopic,
                ..Default::default()
            },
        );
        let prompt = "TOPIC TO USE: astronomy, stars\n\nQ: anchor one\nQ: anchor two\nbody";
        let (case, _) = client.generate(prompt, TaskKind::Math).unwrap();
        assert!(case.question.contains("astronomy"));

        let mut mimic = ProviderClient::mock(
            "g",
            0.7,
            MockConfig {
                generator_behavior: MockGeneratorBehavior::MimicAnchors,
                ..Default::default()
            },
        );
        let (case, _) = mimic.generate(prompt, TaskKind::Math).unwrap();
        assert!(case.question.contains("anchor one"));
    }

    #[test]
    fn mock_target_agrees_with_mock_generator_on_success() {
        let config = MockConfig {
            target_failure_prob: 0.0,
            ..Default::default()
        };
        let mut set = ProviderSet::mock(config);
        let (case, _) = set.generator.generate("make one", TaskKind::Math).unwrap();
        let expected = Answer::parse(&case.ground_truth, TaskKind::Math).unwrap();
        let outcome = set
            .target
            .evaluate_target(&case.question, &expected, TaskKind::Math)
            .unwrap();
        assert_eq!(outcome.score, Some(0));
    }

    #[test]
    fn mock_target_answer_key_forces_failures() {
        let mut key = BTreeMap::new();
        key.insert("planted question".to_string(), ("yes".to_string(), true));
        let config = MockConfig {
            answer_key: key,
            ..Default::default()
        };
        let mut client = ProviderClient::mock("t", 0.0, config);
        let outcome = client
            .evaluate_target("planted question", &Answer::YesNo(true), TaskKind::Implicit)
            .unwrap();
        assert_eq!(outcome.score, Some(1));
    }

    #[test]
    fn transcript_roundtrips_through_disk() {
        let mut rec = ProviderClient::mock("m", 0.0, MockConfig::default()).recording();
        rec.embed(&["to disk".to_string()]).unwrap();
        let transcript = rec.take_transcript();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transcript.jsonl");
        transcript.save(&path).unwrap();
        let loaded = ProviderTranscript::load(&path).unwrap();
        assert_eq!(loaded.len(), transcript.len());
        assert_eq!(loaded.entries[0].digest, transcript.entries[0].digest);
    }
}
