//! Regenerate the bundled `tss-math-small` fixture: record a mock TSS
//! discovery run and freeze its transcript, trajectory, and metrics.
//!
//! Run from the crate root: `cargo run -p gpeval --example make_fixture`

use std::io::Write;
use std::path::Path;

use gpeval::fixtures::{write_manifest, GoldenSpec};
use gpeval::harness::{
    build_providers, load_pool, run_discovery_experiment, save_score_matrix, simulate_benchmark,
    PoolRecord, ProviderMode, RunConfig,
};
use gpeval::providers::{mock_answer_for, TaskKind};
use gpeval::transfer::ScoreMatrix;
use gpeval::{GpPrior, KernelSpec, MeanSpec};

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/tss-math-small");
    std::fs::create_dir_all(root.join("golden")).expect("create bundle dirs");

    let themes = [
        "counting apples in the orchard",
        "sharing apples between friends",
        "saving coins every week",
        "spending coins at the market",
        "train speed between two towns",
        "walking pace on a long trail",
        "mixing paint colors by ratio",
        "diluting juice with water",
        "stacking boxes in a warehouse",
        "loading crates onto a truck",
        "reading pages of a book nightly",
        "writing words for an essay",
    ];
    let mut pool_lines = Vec::new();
    for (i, theme) in themes.iter().enumerate() {
        let question = format!("A problem about {theme}, numbered {i}.");
        let record = PoolRecord {
            id: format!("pool{i:03}"),
            question: question.clone(),
            ground_truth: mock_answer_for(&question, TaskKind::Math, 7).canonical(),
            topic_id: None,
        };
        pool_lines.push(serde_json::to_string(&record).expect("record serializes"));
    }
    let mut pool_file = std::fs::File::create(root.join("pool.jsonl")).expect("pool file");
    for line in &pool_lines {
        writeln!(pool_file, "{line}").expect("write pool");
    }

    // a binarized desk-scale score slice rides along in the bundle
    let prior = GpPrior::new(MeanSpec::Constant(0.5), KernelSpec::Linear, 0.01).unwrap();
    let bench = simulate_benchmark(&prior, 8, 40, 0.01, 4, 7).unwrap().binarize();
    let mut model_ids = bench.model_ids.clone();
    let mut rows = bench.historical_scores.clone();
    model_ids.push("target".into());
    rows.push(bench.target_noisy.clone());
    let matrix = ScoreMatrix::new(model_ids, bench.input_ids(), rows).expect("binary scores");
    save_score_matrix(&matrix, "fixture-slice", &root.join("scores.jsonl")).expect("scores");

    let mut config = RunConfig {
        budget: 10,
        seed: 7,
        n_topics: 4,
        mock_failure_prob: 0.45,
        provider_mode: ProviderMode::Record,
        ..Default::default()
    };
    std::fs::write(root.join("config.toml"), config.to_toml()).expect("write config");

    let mut providers = build_providers(&config).expect("providers");
    let encoder = gpeval::transfer::EncoderSpec::raw(config.embed_dim);
    let pool = load_pool(&root.join("pool.jsonl"), &mut providers, &encoder).expect("pool");
    let gp = config.discovery_gp().expect("gp");
    let (trajectory, metrics) =
        run_discovery_experiment(&config, &pool, &gp, &mut providers).expect("run");

    let transcript = providers.merged_transcript();
    transcript
        .save(&root.join("transcript.jsonl"))
        .expect("transcript");
    std::fs::write(root.join("golden/trajectory.jsonl"), trajectory.to_jsonl())
        .expect("trajectory");
    std::fs::write(
        root.join("golden/metrics.json"),
        serde_json::to_string_pretty(&metrics).expect("metrics") + "\n",
    )
    .expect("metrics");

    // the stored config points at the bundle-relative transcript for replay
    config.provider_mode = ProviderMode::Replay;
    config.transcript_path = Some("transcript.jsonl".into());
    std::fs::write(root.join("config.toml"), config.to_toml()).expect("rewrite config");

    write_manifest(
        &root,
        "tss-math-small",
        &[
            "config.toml",
            "pool.jsonl",
            "scores.jsonl",
            "transcript.jsonl",
            "golden/trajectory.jsonl",
            "golden/metrics.json",
        ],
        Some(GoldenSpec {
            config: "config.toml".into(),
            pool: "pool.jsonl".into(),
            transcript: "transcript.jsonl".into(),
            trajectory: "golden/trajectory.jsonl".into(),
            metrics: "golden/metrics.json".into(),
        }),
    )
    .expect("manifest");
    println!("bundle written to {}", root.display());
    println!("steps: {}, failures: {}", metrics.steps, metrics.failures);
}
