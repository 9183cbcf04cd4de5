//! Acceptance suite. Each test checks one criterion end to end, at its
//! stated tolerance and runtime budget, and prints one PASS line (visible
//! with `cargo test --test acceptance -- --nocapture`).
//!
//! 1.  composite confidence matches an independent summation oracle
//! 2.  quality selection equals a brute-force filter, boundary inclusive
//! 3.  argmin pair matches an exhaustive pair scan, ties included
//! 4.  cosine symmetry / scale invariance / bounds / self-similarity
//! 5.  end-to-end mock determinism (cold, cold, warm)
//! 6.  stage-shape invariants on the mock run
//! 7.  parser robustness: well-formed corpus, typed errors, byte fuzz
//! 8.  four-stage extension via a second compression round
//! 9.  shipped default configuration values
//! 10. resumability after an interrupted run

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use distillery_core::config::{PipelineConfig, RequestParams};
use distillery_core::dcrs::{argmin_pair, composite_confidence, quality_select};
use distillery_core::embed::{cosine, RationaleEmbedding};
use distillery_core::gateway::parse::{parse_teacher_output, ParseError};
use distillery_core::model::{FactorScore, StageRecord, TaskKind, TeacherAnnotation};

fn pass(criterion: u32, what: &str, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    assert!(
        elapsed <= budget,
        "criterion {criterion} took {elapsed:?}, budget {budget:?}"
    );
    println!("criterion {criterion:>2} ({what}): PASS in {elapsed:?}");
}

// ---- criterion 1 -----------------------------------------------------------

#[test]
fn criterion_01_composite_confidence_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..10_000 {
        let k = rng.random_range(1..=8);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let factors: Vec<FactorScore> = raw
            .iter()
            .enumerate()
            .map(|(i, w)| FactorScore {
                name: format!("f{i}"),
                weight: w / sum,
                value: rng.random_range(0.0..=1.0),
            })
            .collect();
        let got = composite_confidence(&factors).unwrap();
        // independent oracle: reversed-order accumulation
        let expected: f64 = factors.iter().rev().map(|f| f.weight * f.value).sum();
        assert!(
            (got - expected).abs() <= 1e-12,
            "impl {got} vs oracle {expected}"
        );
        assert!((0.0..=1.0).contains(&got), "out of range: {got}");
    }
    pass(1, "composite confidence oracle, 10k sets", started, Duration::from_secs(1));
}

// ---- criterion 2 -----------------------------------------------------------

fn annotation(query: &str, teacher: &str, confidence: f64) -> TeacherAnnotation {
    TeacherAnnotation {
        query_id: query.to_string(),
        teacher_id: teacher.to_string(),
        rationale: "r".to_string(),
        label: "y".to_string(),
        confidence,
        factor_scores: None,
        raw_text: String::new(),
        rationale_tokens: 1,
        mean_logprob: None,
        completion_tokens: None,
    }
}

#[test]
fn criterion_02_quality_selection_brute_force() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let grid_thresholds = [0.0, 0.5, 0.9, 0.95, 0.99, 1.0];
    for corpus_idx in 0..1_000 {
        let n = rng.random_range(0..=500);
        let annotations: Vec<TeacherAnnotation> = (0..n)
            .map(|i| {
                // confidences on a 0.01 grid so exact boundary cases occur
                let c = rng.random_range(0..=100) as f64 / 100.0;
                annotation(&format!("q{}", i % 97), &format!("t{}", i % 7), c)
            })
            .collect();
        let s = grid_thresholds[rng.random_range(0..grid_thresholds.len())];
        let pool = quality_select(&annotations, s);
        // independent brute-force filter
        let expected: Vec<&TeacherAnnotation> =
            annotations.iter().filter(|a| a.confidence >= s).collect();
        assert_eq!(pool.total(), expected.len(), "corpus {corpus_idx} at s={s}");

        let mut prev = usize::MAX;
        for s in grid_thresholds {
            let retained = quality_select(&annotations, s).total();
            assert!(retained <= prev, "retention not monotone at s={s}");
            prev = retained;
        }
    }
    // the boundary case from the selection rule: c = s is retained
    let boundary = vec![annotation("q", "t", 0.95)];
    assert_eq!(quality_select(&boundary, 0.95).total(), 1);
    pass(2, "quality selection vs brute force, 1k corpora", started, Duration::from_secs(5));
}

// ---- criterion 3 -----------------------------------------------------------

#[test]
fn criterion_03_argmin_pair_exhaustive_scan() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for trial in 0..1_000 {
        let k = rng.random_range(2..=10);
        let mut group: Vec<Vec<f32>> = (0..k)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        // constructed ties: sometimes duplicate vectors inside the group
        if trial % 3 == 0 && k >= 4 {
            group[2] = group[0].clone();
            group[3] = group[1].clone();
        }
        let embeddings: Vec<RationaleEmbedding> = group
            .iter()
            .map(|v| RationaleEmbedding::from_vector(v.clone()))
            .collect();
        let (p, q, sim) = argmin_pair(&embeddings).unwrap();

        // exhaustive O(k^2) oracle with first-wins tie handling
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..k {
            for b in (a + 1)..k {
                let s = cosine(&embeddings[a], &embeddings[b]).unwrap();
                if best.map_or(true, |(_, _, bs)| s < bs) {
                    best = Some((a, b, s));
                }
            }
        }
        let (ep, eq, es) = best.unwrap();
        assert_eq!((p, q), (ep, eq), "trial {trial}");
        assert_eq!(sim, es);
    }
    pass(3, "argmin pair vs exhaustive scan, 1k groups", started, Duration::from_secs(5));
}

// ---- criterion 4 -----------------------------------------------------------

#[test]
fn criterion_04_cosine_properties() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let dims = [2usize, 8, 384];
    for trial in 0..10_000 {
        let dim = dims[trial % dims.len()];
        let u: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let eu = RationaleEmbedding::from_vector(u.clone());
        let ev = RationaleEmbedding::from_vector(v);

        let uv = cosine(&eu, &ev).unwrap();
        let vu = cosine(&ev, &eu).unwrap();
        assert_eq!(uv, vu, "symmetry must be exact");

        assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&uv), "bounds: {uv}");

        let uu = cosine(&eu, &eu).unwrap();
        assert!((uu - 1.0).abs() <= 1e-9, "self-similarity: {uu}");

        // power-of-two scales are exact in f32, isolating the cosine itself
        let alpha = [0.25f32, 0.5, 2.0, 4.0, 16.0][trial % 5];
        let scaled: Vec<f32> = u.iter().map(|&x| x * alpha).collect();
        let es = RationaleEmbedding::from_vector(scaled);
        let sv = cosine(&es, &ev).unwrap();
        assert!((sv - uv).abs() <= 1e-9, "scale invariance: {sv} vs {uv}");
    }
    pass(4, "cosine properties, 10k pairs", started, Duration::from_secs(2));
}

// ---- criteria 5, 6, 10: CLI end-to-end -------------------------------------

fn demo_dir() -> PathBuf {
    // crates/cli -> workspace root -> demo/
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo")
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_distillery"))
        .args(args)
        .output()
        .expect("spawn distillery")
}

fn run_ok(args: &[&str]) {
    let out = run_cli(args);
    assert!(
        out.status.success(),
        "distillery {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every artifact the pipeline produces, relative to the run dir.
const ARTIFACTS: &[&str] = &[
    "inputs/queries.jsonl",
    "inputs/config.json",
    "annotations/annotations.jsonl",
    "annotations/failures.jsonl",
    "selection/pool.jsonl",
    "selection/selected.jsonl",
    "selection/report.json",
    "inference/student_r1.jsonl",
    "inference/student_r1_failures.jsonl",
    "inference/round_r1_output.jsonl",
    "inference/round_r1_meta.json",
    "stages/stage1_full.jsonl",
    "stages/stage2_compressed_r1.jsonl",
    "stages/stage3_answer_only.jsonl",
    "report/report.json",
    "report/report.md",
    "report/histogram.csv",
    "report/sweep.csv",
    "manifest.json",
];

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("read {rel}: {e}"))
}

fn assert_dirs_identical(a: &Path, b: &Path, context: &str) {
    for rel in ARTIFACTS {
        assert_eq!(
            read(a, rel),
            read(b, rel),
            "{context}: `{rel}` differs between {} and {}",
            a.display(),
            b.display()
        );
    }
}

fn demo_run(out_dir: &Path, extra: &[&str]) {
    let config = demo_dir().join("demo.toml");
    let mut args = vec![
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--mock",
        "--seed",
        "42",
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
}

#[test]
fn criterion_05_end_to_end_determinism() {
    let started = Instant::now();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();

    demo_run(first.path(), &[]);
    demo_run(second.path(), &[]);
    assert_dirs_identical(first.path(), second.path(), "two cold runs");

    // warm-cache rerun over the first directory
    demo_run(first.path(), &[]);
    assert_dirs_identical(first.path(), second.path(), "warm rerun");

    pass(
        5,
        "mock determinism: cold, cold, warm; 50 queries x 3 teachers",
        started,
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_06_stage_shape_invariants() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    demo_run(dir.path(), &[]);

    let load = |rel: &str| -> Vec<StageRecord> {
        distillery_core::model::read_jsonl_str(&String::from_utf8(read(dir.path(), rel)).unwrap())
            .unwrap()
    };
    let stage1 = load("stages/stage1_full.jsonl");
    let stage2 = load("stages/stage2_compressed_r1.jsonl");
    let stage3 = load("stages/stage3_answer_only.jsonl");
    assert!(!stage1.is_empty());

    // identical query-id sets
    let ids = |records: &[StageRecord]| -> BTreeSet<String> {
        records.iter().map(|r| r.query_id.clone()).collect()
    };
    assert_eq!(ids(&stage1), ids(&stage2));
    assert_eq!(ids(&stage2), ids(&stage3));

    // labels identical sample-for-sample; stage3 has no rationale
    assert_eq!(stage1.len(), stage2.len());
    assert_eq!(stage2.len(), stage3.len());
    for ((a, b), c) in stage1.iter().zip(&stage2).zip(&stage3) {
        assert_eq!(a.query_id, b.query_id);
        assert_eq!(b.query_id, c.query_id);
        assert_eq!(a.provenance.teacher_id, b.provenance.teacher_id);
        assert_eq!(a.label, b.label);
        assert_eq!(b.label, c.label);
        assert!(c.rationale.is_none());
    }

    // mean serialized tokens strictly ordered stage1 > stage2 > stage3
    let mean = |records: &[StageRecord]| -> f64 {
        let total: usize = records
            .iter()
            .map(|r| r.training_text.split_whitespace().count())
            .sum();
        total as f64 / records.len() as f64
    };
    let (m1, m2, m3) = (mean(&stage1), mean(&stage2), mean(&stage3));
    assert!(m1 > m2, "stage1 {m1} vs stage2 {m2}");
    assert!(m2 > m3, "stage2 {m2} vs stage3 {m3}");

    // selection count conservation, exactly
    let report: serde_json::Value =
        serde_json::from_slice(&read(dir.path(), "selection/report.json")).unwrap();
    let count = |k: &str| report["counts"][k].as_u64().unwrap();
    assert_eq!(
        count("generated"),
        count("parse_failed") + count("quality_rejected") + count("diversity_dropped") + count("final")
    );

    pass(6, "stage-shape invariants on the mock run", started, Duration::from_secs(30));
}

#[test]
fn criterion_10_resumability() {
    let started = Instant::now();
    let uninterrupted = tempfile::tempdir().unwrap();
    demo_run(uninterrupted.path(), &[]);

    // killed after the selection stage, then resumed
    let interrupted = tempfile::tempdir().unwrap();
    demo_run(interrupted.path(), &["--stop-after", "selection"]);
    assert!(
        !interrupted.path().join("stages/stage1_full.jsonl").exists(),
        "pipeline must actually have stopped early"
    );
    demo_run(interrupted.path(), &["--resume"]);

    assert_dirs_identical(uninterrupted.path(), interrupted.path(), "resumed run");
    pass(10, "resume after interruption", started, Duration::from_secs(60));
}

// ---- criterion 7 -----------------------------------------------------------

#[test]
fn criterion_07_parser_robustness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);

    // 500 well-formed outputs in varied shapes, including the plain
    // `score: 0.85` format
    for case in 0..500 {
        let kind = if case % 2 == 0 {
            TaskKind::CodeGeneration
        } else {
            TaskKind::Math
        };
        let reasoning = "walk the input and accumulate the running total";
        let label = match kind {
            TaskKind::CodeGeneration => "```python\ndef solve(x):\n    return x\n```",
            _ => "Answer: 42",
        };
        let score = rng.random_range(0..=100) as f64 / 100.0;
        let score_line = match case % 4 {
            0 => format!("score: {score:.2}"),
            1 => format!("Score: {score:.2}"),
            2 => format!("score:{score:.2}"),
            _ => format!("the rubric is strict\nscore: 0.10\n{label}\nscore: {score:.2}"),
        };
        let raw = match case % 3 {
            0 => format!("{reasoning}\n\n{label}\n\n{score_line}\n"),
            1 => format!("{reasoning}\n{score_line}\n{label}\n"),
            _ => format!("{reasoning}\n\nfactors: correctness=0.90, readability=0.95\n{label}\n{score_line}\n"),
        };
        let parsed = parse_teacher_output(&raw, kind)
            .unwrap_or_else(|e| panic!("well-formed case {case} failed: {e}\n{raw}"));
        assert!(
            (parsed.confidence - score).abs() < 1e-9,
            "case {case}: {} vs {score}",
            parsed.confidence
        );
        assert!(!parsed.rationale.is_empty());
        assert!(!parsed.label.is_empty());
    }

    // every malformed family yields its specific typed error
    assert!(matches!(
        parse_teacher_output("final answer only", TaskKind::Other),
        Err(ParseError::NoScoreMarker)
    ));
    assert!(matches!(
        parse_teacher_output("r\nAnswer: 4\nscore: 1.37", TaskKind::Math),
        Err(ParseError::ScoreOutOfRange(_))
    ));
    assert!(matches!(
        parse_teacher_output("r\nAnswer: 4\nscore: -0.2", TaskKind::Math),
        Err(ParseError::ScoreOutOfRange(_))
    ));
    assert!(matches!(
        parse_teacher_output("reasoning only\nscore: 0.9", TaskKind::CodeGeneration),
        Err(ParseError::EmptyLabel(_))
    ));
    assert!(matches!(
        parse_teacher_output("Answer: 4\nscore: 0.9", TaskKind::Math),
        Err(ParseError::EmptyRationale)
    ));

    // no panic on arbitrary byte fuzz
    let kinds = [
        TaskKind::CodeGeneration,
        TaskKind::MultipleChoice,
        TaskKind::Math,
        TaskKind::Other,
    ];
    for i in 0..10_000 {
        let len = rng.random_range(0..400);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random::<u8>()).collect();
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_teacher_output(&text, kinds[i % kinds.len()]);
    }

    pass(7, "parser robustness + 10k byte fuzz", started, Duration::from_secs(10));
}

// ---- criterion 8 -----------------------------------------------------------

#[test]
fn criterion_08_four_stage_extension() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    demo_run(dir.path(), &["--compression-rounds", "2"]);

    let load = |rel: &str| -> Vec<StageRecord> {
        distillery_core::model::read_jsonl_str(&String::from_utf8(read(dir.path(), rel)).unwrap())
            .unwrap()
    };
    let round1 = load("stages/stage2_compressed_r1.jsonl");
    let round2 = load("stages/stage2_compressed_r2.jsonl");
    assert_eq!(round1.len(), round2.len());

    let mean_rationale = |records: &[StageRecord]| -> f64 {
        let total: usize = records
            .iter()
            .map(|r| r.rationale.as_deref().map(|t| t.split_whitespace().count()).unwrap_or(0))
            .sum();
        total as f64 / records.len() as f64
    };
    let (m1, m2) = (mean_rationale(&round1), mean_rationale(&round2));
    assert!(m2 <= m1, "round 2 mean {m2} vs round 1 mean {m1}");

    // the four datasets exist: full, compressed r1, compressed r2, answer-only
    for rel in [
        "stages/stage1_full.jsonl",
        "stages/stage2_compressed_r1.jsonl",
        "stages/stage2_compressed_r2.jsonl",
        "stages/stage3_answer_only.jsonl",
    ] {
        assert!(dir.path().join(rel).exists(), "{rel} missing");
    }

    pass(8, "second compression round extends the stages", started, Duration::from_secs(30));
}

// ---- criterion 9 -----------------------------------------------------------

#[test]
fn criterion_09_default_configuration_fidelity() {
    let started = Instant::now();
    let config = PipelineConfig::default();
    assert_eq!(config.threshold, 0.95, "default confidence threshold");

    let code = config
        .factor_weights
        .get("code_generation")
        .expect("code task weights shipped");
    assert_eq!(code.get("correctness"), Some(&0.5));
    assert_eq!(code.get("readability"), Some(&0.2));
    assert_eq!(code.get("efficiency"), Some(&0.2));
    assert_eq!(code.get("coverage"), Some(&0.1));

    let params = RequestParams::default();
    assert_eq!(params.temperature, 0.0);
    assert_eq!(params.max_tokens, 2048);
    assert_eq!(params.top_p, 0.95);

    assert_eq!(config.compression_rounds, 1, "three-stage protocol by default");
    pass(9, "shipped defaults snapshot", started, Duration::from_secs(1));
}
