//! Command-line interface: estimate aggregate scores with few evaluations,
//! discover failure cases, select source models, simulate benchmarks, and
//! recompute metrics from stored trajectories.
//!
//! Exit codes: 0 success, 2 abstained (source selection refused to build a
//! prior), 1 error.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gpeval::baselines::{acquisition_from_surrogate, fit_surrogate, is_estimate, lure_estimate};
use gpeval::harness::{
    build_providers, discovery_metrics, estimation_metrics, load_pool, load_score_matrix,
    run_discovery_experiment, save_score_matrix, selection_comparison, simulate_benchmark,
    theorem_validation, write_run_dir, EstimationMethod, ProviderMode, RunConfig, RunStatus,
    SelectionComparisonConfig, StrategyComparisonRow,
};
use gpeval::providers::TaskKind;
use gpeval::quadrature::{
    run_estimation, QuadratureEstimate, SelectionMode, Trajectory, TrajectoryStep,
};
use gpeval::selection::{
    select_sources, CorrelationKind, CorrelationRule, ModelProfile, RawScores, SelectionStrategy,
};
use gpeval::transfer::{
    build_score_feature_prior, pca_fit_transform, scenario_mean, PcaCriterion, Scenario,
    ScoreMatrix,
};
use gpeval::{FeatureVector, GpPrior, KernelSpec, MeanSpec};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "gpeval",
    version,
    about = "GP-surrogate model evaluation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a target model's aggregate score from few evaluations.
    Estimate(EstimateArgs),
    /// Discover failure cases by pool sampling or guided generation.
    Discover(DiscoverArgs),
    /// Choose which historical models feed the prior (with abstention).
    SelectSources(SelectSourcesArgs),
    /// Draw synthetic benchmarks and validate the estimator on them.
    Simulate(SimulateArgs),
    /// Recompute metrics from a stored trajectory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioArg {
    Default,
    NewModel,
    NewBench,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Default => Scenario::Default,
            ScenarioArg::NewModel => Scenario::NewModel,
            ScenarioArg::NewBench => Scenario::NewBench,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Bq,
    Random,
    Is,
    Lure,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SelectionModeArg {
    Active,
    Random,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SurrogateArg {
    Lr,
    Rf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Historical score matrix (JSONL of score records).
    #[arg(long)]
    scores: PathBuf,
    /// Benchmark name when the file holds several.
    #[arg(long)]
    benchmark: Option<String>,
    /// Target model id (its row provides the evaluation oracle and truth).
    #[arg(long)]
    target: String,
    /// Evaluation budget: absolute count or percentage like `1%`.
    #[arg(long, default_value = "20")]
    budget: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ScenarioArg::Default)]
    scenario: ScenarioArg,
    #[arg(long, value_enum, default_value_t = MethodArg::Bq)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = SelectionModeArg::Active)]
    selection: SelectionModeArg,
    /// Surrogate for the is/lure baselines.
    #[arg(long, value_enum, default_value_t = SurrogateArg::Lr)]
    surrogate: SurrogateArg,
    /// Conditioning noise variance.
    #[arg(long, default_value_t = 0.01)]
    sigma2: f64,
    /// Drop inputs missing any model's score instead of erroring.
    #[arg(long)]
    allow_missing: bool,
    /// Run GMM source selection before building the prior (abstains with
    /// exit code 2 when the cluster is too small).
    #[arg(long)]
    select: bool,
    #[arg(long, default_value_t = 3)]
    min_sources: usize,
    /// Output directory for the run artifacts.
    #[arg(long, default_value = "runs/estimate")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Rand,
    Ss,
    SsGen,
    Tss,
    RandGen,
    RandTGen,
    RandAnchorGen,
}

impl From<StrategyArg> for gpeval::discovery::StrategyKind {
    fn from(s: StrategyArg) -> Self {
        use gpeval::discovery::StrategyKind::*;
        match s {
            StrategyArg::Rand => Rand,
            StrategyArg::Ss => Ss,
            StrategyArg::SsGen => SsGen,
            StrategyArg::Tss => Tss,
            StrategyArg::RandGen => RandGen,
            StrategyArg::RandTGen => RandTGen,
            StrategyArg::RandAnchorGen => RandAnchorGen,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Math,
    Implicit,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Math => TaskKind::Math,
            TaskArg::Implicit => TaskKind::Implicit,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderArg {
    Mock,
    Record,
    Replay,
    Live,
}

impl From<ProviderArg> for ProviderMode {
    fn from(p: ProviderArg) -> Self {
        match p {
            ProviderArg::Mock => ProviderMode::Mock,
            ProviderArg::Record => ProviderMode::Record,
            ProviderArg::Replay => ProviderMode::Replay,
            ProviderArg::Live => ProviderMode::Live,
        }
    }
}

#[derive(Args)]
struct DiscoverArgs {
    /// Pool file (JSONL of {id, question, ground_truth}).
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = TaskArg::Math)]
    task: TaskArg,
    #[arg(long, default_value_t = 50)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ProviderArg::Mock)]
    provider: ProviderArg,
    /// Transcript path (required for replay; record writes here too).
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long, default_value_t = 3)]
    anchors: usize,
    #[arg(long, default_value_t = 8)]
    topics: usize,
    /// Base URL for live providers.
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long, default_value = "runs/discover")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SelectStrategyArg {
    LooPrior,
    Gmm,
    CorrelationSpearman,
    CorrelationPearson,
    Mahalanobis,
    LooLikelihood,
    Hotelling,
    Mardia,
}

#[derive(Args)]
struct SelectSourcesArgs {
    /// Score file; may hold several benchmarks.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Target model id.
    #[arg(long, default_value = "")]
    target: String,
    /// Target benchmark to exclude from the reference profiles.
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long, value_enum, default_value_t = SelectStrategyArg::Gmm)]
    strategy: SelectStrategyArg,
    #[arg(long, default_value_t = 3)]
    min_sources: usize,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Correlation / abstention threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Significance level for test-based strategies.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run the synthetic strategy-comparison table instead of a single
    /// selection.
    #[arg(long)]
    compare: bool,
    #[arg(long, default_value_t = 10)]
    experiments: usize,
}

#[derive(Args)]
struct SimulateArgs {
    /// Historical models to draw.
    #[arg(long, default_value_t = 15)]
    models: usize,
    /// Pool size.
    #[arg(long, default_value_t = 200)]
    inputs: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 1e-4)]
    sigma2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Kernel of the generating prior.
    #[arg(long, default_value = "linear")]
    kernel: String,
    /// Round all scores to {0, 1}.
    #[arg(long)]
    binarize: bool,
    /// Write the historical matrix (and the target row) here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the estimator validation report instead of writing data.
    #[arg(long)]
    theorem: bool,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Comma-separated conditioning sizes for the report.
    #[arg(long, default_value = "1,5,10")]
    t_values: String,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Trajectory JSONL produced by estimate or discover.
    #[arg(long)]
    trajectory: PathBuf,
    /// Ground truth for MAE-based metrics.
    #[arg(long)]
    truth: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    w1: f64,
    #[arg(long, default_value_t = 0.5)]
    w2: f64,
    /// Metrics JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional CSV table output path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_budget(text: &str, pool: usize) -> Result<usize> {
    if let Some(stripped) = text.strip_suffix('%') {
        let pct: f64 = stripped.parse().context("budget percentage")?;
        if !(pct > 0.0) {
            bail!("budget percentage must be positive");
        }
        Ok(((pct / 100.0) * pool as f64).ceil().max(1.0) as usize)
    } else {
        let n: usize = text.parse().context("budget")?;
        if n == 0 {
            bail!("budget must be >= 1");
        }
        Ok(n)
    }
}

fn cmd_estimate(args: EstimateArgs) -> Result<RunStatus> {
    if args.surrogate == SurrogateArg::Rf {
        bail!(
            "the random-forest surrogate is out of scope for this build; \
             use --surrogate lr (logistic regression)"
        );
    }
    let matrix = load_score_matrix(&args.scores, args.benchmark.as_deref(), args.allow_missing)
        .context("loading score matrix")?;
    let target_row = matrix
        .row(&args.target)
        .ok_or_else(|| anyhow!("target `{}` not in score file", args.target))?
        .to_vec();
    let truth = target_row.iter().sum::<f64>() / target_row.len() as f64;
    let budget = parse_budget(&args.budget, matrix.num_inputs())?;
    let scenario: Scenario = args.scenario.into();

    // historical = everything except the target
    let sources: Vec<String> = matrix
        .model_ids
        .iter()
        .filter(|m| *m != &args.target)
        .cloned()
        .collect();
    if sources.len() < 2 {
        bail!("need at least 2 historical models besides the target");
    }
    let mut historical = matrix.subset(&sources)?;

    // optional GMM source selection with abstention
    let mut selection_note = String::new();
    if args.select {
        let (_, reduced) = pca_fit_transform(&matrix.scores, PcaCriterion::RetainedVariance(0.95))?;
        let profiles: Vec<ModelProfile> = matrix
            .model_ids
            .iter()
            .zip(&reduced)
            .map(|(id, f)| ModelProfile {
                model_id: id.clone(),
                features: FeatureVector::new(f.clone()).expect("pca output"),
            })
            .collect();
        let raw: RawScores = matrix
            .model_ids
            .iter()
            .cloned()
            .zip(matrix.scores.iter().cloned())
            .collect();
        let strategy = SelectionStrategy::Gmm {
            min_sources: args.min_sources,
            k_min: 1,
            k_max: matrix.num_models().min(4),
            seed: args.seed,
        };
        let result = select_sources(&strategy, &profiles, Some(&raw), &args.target)?;
        if result.abstain {
            eprintln!(
                "abstained: target cluster holds {} other models (min {})",
                result.selected.len(),
                args.min_sources
            );
            return Ok(RunStatus::Abstained);
        }
        selection_note = format!("sources selected by GMM: {:?}\n", result.selected);
        historical = matrix.subset(&result.selected)?;
    }

    let transfer = build_score_feature_prior(&historical, args.sigma2)?;
    let mean = scenario_mean(scenario, &historical, None)?;
    let prior = GpPrior::new(mean, KernelSpec::Linear, args.sigma2)?;
    let pool = transfer.gp_inputs(&matrix.input_ids);
    let oracle = |id: &String| -> std::result::Result<f64, String> {
        matrix
            .input_ids
            .iter()
            .position(|i| i == id)
            .map(|j| target_row[j])
            .ok_or_else(|| format!("unknown input {id}"))
    };

    let trajectory = match args.method {
        MethodArg::Bq => {
            let config = gpeval::QuadratureConfig::new(
                pool.clone(),
                matrix.input_ids.clone(),
                budget,
                scenario,
            )?;
            let mode = match args.selection {
                SelectionModeArg::Active => SelectionMode::Active,
                SelectionModeArg::Random => SelectionMode::Random { seed: args.seed },
            };
            run_estimation(&prior, &config, oracle, mode)?
        }
        MethodArg::Random => baseline_random(&matrix.input_ids, oracle, budget, args.seed),
        MethodArg::Is | MethodArg::Lure => baseline_weighted(
            args.method,
            &matrix,
            &transfer,
            oracle,
            budget,
            args.seed,
            1e-3,
        )?,
    };

    let run_metrics = estimation_metrics(&trajectory, Some(truth));
    let method = match args.method {
        MethodArg::Bq => EstimationMethod::Bq,
        MethodArg::Random => EstimationMethod::Random,
        MethodArg::Is => EstimationMethod::Is,
        MethodArg::Lure => EstimationMethod::Lure,
    };
    let config = RunConfig {
        scores_path: Some(args.scores.clone()),
        benchmark: args.benchmark.clone(),
        scenario,
        sigma2: args.sigma2,
        budget,
        seed: args.seed,
        method,
        active_selection: args.selection == SelectionModeArg::Active,
        ground_truth: Some(truth),
        ..Default::default()
    };
    let summary = format!(
        "{}final estimate: {:.6}\ntruth: {:.6}\nMAE: {:.6}\nsamples to 1% MAE: {}\n",
        selection_note,
        run_metrics.final_mean,
        truth,
        run_metrics.mae.unwrap_or(f64::NAN),
        run_metrics
            .samples_to_1pct
            .map(|s| s.to_string())
            .unwrap_or_else(|| "never".into()),
    );
    write_run_dir(
        &args.out,
        &config,
        Some(&trajectory),
        &serde_json::to_value(&run_metrics)?,
        None,
        RunStatus::Success,
        &summary,
    )?;
    println!("{summary}run written to {}", args.out.display());
    Ok(RunStatus::Success)
}

/// Uniform sampling without replacement with a running sample mean.
fn baseline_random<F>(input_ids: &[String], mut oracle: F, budget: usize, seed: u64) -> Trajectory
where
    F: FnMut(&String) -> std::result::Result<f64, String>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<&String> = input_ids.iter().collect();
    let mut trajectory = Trajectory::default();
    let mut sum = 0.0;
    for iteration in 1..=budget.min(input_ids.len()) {
        let pick = rng.gen_range(0..remaining.len());
        let id = remaining.swap_remove(pick);
        match oracle(id) {
            Ok(y) => {
                sum += y;
                let mean = sum / iteration as f64;
                let estimate = QuadratureEstimate {
                    mean,
                    variance: 0.0,
                    rounded_mean: mean,
                };
                trajectory.steps.push(TrajectoryStep {
                    observed: Some(y),
                    estimate: Some(estimate.clone()),
                    ..TrajectoryStep::bare(iteration, id.clone())
                });
                trajectory.final_estimate = Some(estimate);
            }
            Err(message) => {
                trajectory.error = Some(message);
                break;
            }
        }
    }
    trajectory
}

/// Surrogate-guided IS (with replacement) or LURE (without replacement)
/// baseline trajectories. The logistic surrogate trains on every historical
/// (input, score) pair over the same score features the GP sees.
fn baseline_weighted<F>(
    method: MethodArg,
    matrix: &ScoreMatrix,
    transfer: &gpeval::transfer::ScoreFeaturePrior,
    mut oracle: F,
    budget: usize,
    seed: u64,
    floor: f64,
) -> Result<Trajectory>
where
    F: FnMut(&String) -> std::result::Result<f64, String>,
{
    let mut training = Vec::new();
    for row in &matrix.scores {
        for (j, input_id) in matrix.input_ids.iter().enumerate() {
            training.push((transfer.features[input_id].clone(), row[j]));
        }
    }
    let surrogate = fit_surrogate(&training, 0.01)?;
    let candidates: Vec<(String, FeatureVector)> = matrix
        .input_ids
        .iter()
        .map(|id| (id.clone(), transfer.features[id].clone()))
        .collect();
    let dist = acquisition_from_surrogate(&surrogate, &candidates, floor)?;
    let population = matrix.input_ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectory = Trajectory::default();
    let mut samples: Vec<(f64, f64)> = Vec::new();
    let mut remaining: Vec<String> = matrix.input_ids.clone();
    for iteration in 1..=budget.min(population) {
        let (id, q) = match method {
            MethodArg::Is => {
                // i.i.d. draw from the full distribution
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = matrix.input_ids.last().expect("nonempty").clone();
                for id in &matrix.input_ids {
                    acc += dist.get(id).expect("full support");
                    if u < acc {
                        chosen = id.clone();
                        break;
                    }
                }
                let q = dist.get(&chosen).expect("full support");
                (chosen, q)
            }
            MethodArg::Lure => {
                // conditional draw over the remaining items
                let total: f64 = remaining
                    .iter()
                    .map(|r| dist.get(r).expect("support"))
                    .sum();
                let u: f64 = rng.gen::<f64>() * total;
                let mut acc = 0.0;
                let mut idx = remaining.len() - 1;
                for (i, id) in remaining.iter().enumerate() {
                    acc += dist.get(id).expect("support");
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                let q = dist.get(&remaining[idx]).expect("support") / total;
                let id = remaining.swap_remove(idx);
                (id, q)
            }
            _ => unreachable!("weighted methods only"),
        };
        match oracle(&id) {
            Ok(y) => {
                samples.push((y, q));
                let mean = match method {
                    MethodArg::Is => is_estimate(&samples, iteration, population)?,
                    MethodArg::Lure => lure_estimate(&samples, population)?,
                    _ => unreachable!(),
                };
                let estimate = QuadratureEstimate {
                    mean,
                    variance: 0.0,
                    rounded_mean: mean,
                };
                trajectory.steps.push(TrajectoryStep {
                    observed: Some(y),
                    acquisition_value: Some(q),
                    estimate: Some(estimate.clone()),
                    ..TrajectoryStep::bare(iteration, id)
                });
                trajectory.final_estimate = Some(estimate);
            }
            Err(message) => {
                trajectory.error = Some(message);
                break;
            }
        }
    }
    Ok(trajectory)
}

fn cmd_discover(args: DiscoverArgs) -> Result<RunStatus> {
    let config = RunConfig {
        task: args.task.into(),
        pool_path: Some(args.pool.clone()),
        budget: args.budget,
        seed: args.seed,
        provider_mode: args.provider.into(),
        transcript_path: args.transcript.clone(),
        live_base_url: args.base_url.clone(),
        discovery_strategy: args.strategy.into(),
        anchor_count: args.anchors,
        lambda: args.lambda,
        beta: args.beta,
        n_topics: args.topics,
        ..Default::default()
    };
    let mut providers = build_providers(&config)?;
    let encoder = gpeval::transfer::EncoderSpec::raw(config.embed_dim);
    let pool = load_pool(&args.pool, &mut providers, &encoder)?;
    let gp = config.discovery_gp()?;
    let (trajectory, run_metrics) = run_discovery_experiment(&config, &pool, &gp, &mut providers)?;
    let transcript = match config.provider_mode {
        ProviderMode::Record => Some(providers.merged_transcript()),
        _ => None,
    };
    if let (Some(t), Some(path)) = (&transcript, &args.transcript) {
        t.save(path)
            .map_err(|e| anyhow!("saving transcript: {e}"))?;
    }
    let summary = format!(
        "strategy: {}\nsteps: {}\nfailures: {} (rate {:.3})\nfirst failure at: {}\ntopic entropy: {}\noverall diversity: {}\n",
        gpeval::discovery::StrategyKind::from(args.strategy).as_str(),
        run_metrics.steps,
        run_metrics.failures,
        run_metrics.failure_rate,
        run_metrics
            .samples_to_first_failure
            .map(|s| s.to_string())
            .unwrap_or_else(|| "never".into()),
        run_metrics.topic_entropy.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
        run_metrics.overall_diversity.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
    );
    write_run_dir(
        &args.out,
        &config,
        Some(&trajectory),
        &serde_json::to_value(&run_metrics)?,
        transcript.as_ref(),
        RunStatus::Success,
        &summary,
    )?;
    println!("{summary}run written to {}", args.out.display());
    Ok(RunStatus::Success)
}

fn cmd_select_sources(args: SelectSourcesArgs) -> Result<RunStatus> {
    if args.compare {
        let cfg = SelectionComparisonConfig {
            n_experiments: args.experiments,
            seed: args.seed,
            ..Default::default()
        };
        let strategies = vec![
            (
                "gmm_min3".to_string(),
                SelectionStrategy::Gmm {
                    min_sources: args.min_sources,
                    k_min: 1,
                    k_max: 4,
                    seed: args.seed,
                },
            ),
            (
                "loo_prior".to_string(),
                SelectionStrategy::LooPrior {
                    spearman_threshold: None,
                },
            ),
            (
                "loo_prior_spearman_0.7".to_string(),
                SelectionStrategy::LooPrior {
                    spearman_threshold: Some(0.7),
                },
            ),
            (
                "correlation_spearman".to_string(),
                SelectionStrategy::Correlation {
                    kind: CorrelationKind::Spearman,
                    rule: CorrelationRule::TopK(args.top_k),
                },
            ),
            (
                "mahalanobis".to_string(),
                SelectionStrategy::Mahalanobis {
                    top_k: args.top_k,
                    ood_alpha: None,
                },
            ),
            (
                "loo_likelihood".to_string(),
                SelectionStrategy::LooLikelihood { top_k: args.top_k },
            ),
            (
                "hotelling".to_string(),
                SelectionStrategy::HotellingTest { alpha: args.alpha },
            ),
            (
                "mardia".to_string(),
                SelectionStrategy::MardiaTest { top_k: args.top_k },
            ),
        ];
        let rows = selection_comparison(&cfg, &strategies)?;
        println!("{}", comparison_csv(&rows));
        return Ok(RunStatus::Success);
    }

    let Some(scores) = &args.scores else {
        bail!("pass --scores (or --compare for the synthetic comparison)");
    };
    if args.target.is_empty() {
        bail!("pass --target");
    }
    let matrix = match load_score_matrix(scores, None, false) {
        Ok(single) => single,
        Err(_) => reference_matrix(scores, args.benchmark.as_deref())?,
    };
    let (_, reduced) = pca_fit_transform(&matrix.scores, PcaCriterion::RetainedVariance(0.95))?;
    let profiles: Vec<ModelProfile> = matrix
        .model_ids
        .iter()
        .zip(&reduced)
        .map(|(id, f)| ModelProfile {
            model_id: id.clone(),
            features: FeatureVector::new(f.clone()).expect("pca output"),
        })
        .collect();
    let raw: RawScores = matrix
        .model_ids
        .iter()
        .cloned()
        .zip(matrix.scores.iter().cloned())
        .collect();
    let n_profiles = profiles.len();
    if profiles[0].features.dim() >= n_profiles
        && matches!(args.strategy, SelectStrategyArg::Hotelling)
    {
        eprintln!(
            "warning: {} profile dimensions >= {} models; the T^2 test has little power",
            profiles[0].features.dim(),
            n_profiles
        );
    }
    let strategy = match args.strategy {
        SelectStrategyArg::LooPrior => SelectionStrategy::LooPrior {
            spearman_threshold: args.tau,
        },
        SelectStrategyArg::Gmm => SelectionStrategy::Gmm {
            min_sources: args.min_sources,
            k_min: 1,
            k_max: n_profiles.min(4),
            seed: args.seed,
        },
        SelectStrategyArg::CorrelationSpearman => SelectionStrategy::Correlation {
            kind: CorrelationKind::Spearman,
            rule: match args.tau {
                Some(tau) => CorrelationRule::Threshold(tau),
                None => CorrelationRule::TopK(args.top_k),
            },
        },
        SelectStrategyArg::CorrelationPearson => SelectionStrategy::Correlation {
            kind: CorrelationKind::Pearson,
            rule: match args.tau {
                Some(tau) => CorrelationRule::Threshold(tau),
                None => CorrelationRule::TopK(args.top_k),
            },
        },
        SelectStrategyArg::Mahalanobis => SelectionStrategy::Mahalanobis {
            top_k: args.top_k,
            ood_alpha: args.tau,
        },
        SelectStrategyArg::LooLikelihood => SelectionStrategy::LooLikelihood { top_k: args.top_k },
        SelectStrategyArg::Hotelling => SelectionStrategy::HotellingTest { alpha: args.alpha },
        SelectStrategyArg::Mardia => SelectionStrategy::MardiaTest { top_k: args.top_k },
    };
    let result = select_sources(&strategy, &profiles, Some(&raw), &args.target)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    if result.abstain {
        return Ok(RunStatus::Abstained);
    }
    Ok(RunStatus::Success)
}

/// Profiles come from every benchmark except the target one, concatenated
/// per model.
fn reference_matrix(path: &PathBuf, target_benchmark: Option<&str>) -> Result<ScoreMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut benchmarks: BTreeMap<String, Vec<gpeval::harness::ScoreRecord>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record: gpeval::harness::ScoreRecord = serde_json::from_str(line)?;
        benchmarks
            .entry(record.benchmark.clone())
            .or_default()
            .push(record);
    }
    let Some(target) = target_benchmark else {
        bail!(
            "file holds benchmarks {:?}; pass --benchmark to name the target benchmark",
            benchmarks.keys().collect::<Vec<_>>()
        );
    };
    if !benchmarks.contains_key(target) {
        bail!("target benchmark `{target}` not present");
    }
    benchmarks.remove(target);
    if benchmarks.is_empty() {
        bail!("no reference benchmarks remain after excluding `{target}`");
    }
    // concatenate columns across the remaining benchmarks
    let mut model_ids: Vec<String> = Vec::new();
    let mut columns: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (bench, records) in &benchmarks {
        for r in records {
            if !model_ids.contains(&r.model_id) {
                model_ids.push(r.model_id.clone());
            }
            columns
                .entry(format!("{bench}:{}", r.input_id))
                .or_default()
                .insert(r.model_id.clone(), r.score);
        }
    }
    let input_ids: Vec<String> = columns.keys().cloned().collect();
    let mut scores = Vec::new();
    for m in &model_ids {
        let mut row = Vec::new();
        for input in &input_ids {
            let cell = columns[input]
                .get(m)
                .ok_or_else(|| anyhow!("model `{m}` missing cell `{input}`"))?;
            row.push(*cell);
        }
        scores.push(row);
    }
    Ok(ScoreMatrix::new(model_ids, input_ids, scores)?)
}

fn comparison_csv(rows: &[StrategyComparisonRow]) -> String {
    let mut out = String::from("method,n,abstain,mean_mae,median_mae,std_mae\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.method, r.n, r.abstain, r.mean_mae, r.median_mae, r.std_mae
        ));
    }
    out
}

fn cmd_simulate(args: SimulateArgs) -> Result<RunStatus> {
    let kernel = match args.kernel.as_str() {
        "linear" => KernelSpec::Linear,
        "matern" => KernelSpec::matern_default(),
        other => bail!("unknown kernel `{other}` (linear|matern)"),
    };
    let prior = GpPrior::new(MeanSpec::Constant(0.5), kernel, args.sigma2.max(1e-12))?;
    if args.theorem {
        let t_values: Vec<usize> = args
            .t_values
            .split(',')
            .map(|s| s.trim().parse().context("t value"))
            .collect::<Result<_>>()?;
        for &t in &t_values {
            if args.models < t + 3 {
                eprintln!(
                    "warning: N={} < t+3={} leaves the deviation bound undefined at t={t}",
                    args.models,
                    t + 3
                );
            }
        }
        let report = theorem_validation(
            &prior,
            args.models,
            args.inputs,
            args.sigma2,
            args.dim,
            &t_values,
            args.reps,
            args.delta,
            args.seed,
        )?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(RunStatus::Success);
    }
    let bench = simulate_benchmark(
        &prior,
        args.models,
        args.inputs,
        args.sigma2,
        args.dim,
        args.seed,
    )?;
    let bench = if args.binarize {
        bench.binarize()
    } else {
        bench
    };
    let Some(out) = &args.out else {
        bail!("pass --out to write the simulated scores (or --theorem for the report)");
    };
    // historical rows plus the noisy target row, all as score records;
    // continuous scores are clamped into [0, 1] for the file format
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let mut model_ids = bench.model_ids.clone();
    let mut rows: Vec<Vec<f64>> = bench
        .historical_scores
        .iter()
        .map(|r| r.iter().map(|v| clamp(*v)).collect())
        .collect();
    model_ids.push("target".into());
    rows.push(bench.target_noisy.iter().map(|v| clamp(*v)).collect());
    let matrix = ScoreMatrix::new(model_ids, bench.input_ids(), rows)?;
    save_score_matrix(&matrix, "synthetic", out)?;
    println!(
        "wrote {} models x {} inputs to {}\nground truth S* (pre-clamp): {:.6}",
        matrix.num_models(),
        matrix.num_inputs(),
        out.display(),
        bench.ground_truth
    );
    Ok(RunStatus::Success)
}

fn cmd_report(args: ReportArgs) -> Result<RunStatus> {
    let text = std::fs::read_to_string(&args.trajectory)?;
    let trajectory = Trajectory::from_jsonl(&text)?;
    let has_estimates = trajectory.steps.iter().any(|s| s.estimate.is_some());
    let (metrics_value, csv) = if has_estimates {
        let m = estimation_metrics(&trajectory, args.truth);
        let csv = format!(
            "final_mean,mae,samples_to_1pct,steps\n{:.6},{},{},{}\n",
            m.final_mean,
            m.mae.map(|v| format!("{v:.6}")).unwrap_or_default(),
            m.samples_to_1pct.map(|v| v.to_string()).unwrap_or_default(),
            m.steps
        );
        (serde_json::to_value(&m)?, csv)
    } else {
        let m = discovery_metrics(&trajectory, args.w1, args.w2)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let csv = format!(
            "topic_entropy,embedding_diversity,overall_diversity,failure_rate,sff,steps\n{},{},{},{:.6},{},{}\n",
            fmt(m.topic_entropy),
            fmt(m.embedding_diversity),
            fmt(m.overall_diversity),
            m.failure_rate,
            m.samples_to_first_failure.map(|v| v.to_string()).unwrap_or_default(),
            m.steps
        );
        (serde_json::to_value(&m)?, csv)
    };
    let rendered = serde_json::to_string_pretty(&metrics_value)? + "\n";
    match &args.out {
        Some(path) => std::fs::write(path, &rendered)?,
        None => print!("{rendered}"),
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, csv)?;
    }
    Ok(RunStatus::Success)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Discover(args) => cmd_discover(args),
        Command::SelectSources(args) => cmd_select_sources(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(RunStatus::Success) => ExitCode::SUCCESS,
        Ok(RunStatus::Abstained) => ExitCode::from(2),
        Ok(RunStatus::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
