//! Stage dataset construction and pipeline orchestration.
//!
//! The pipeline is a fixed sequence of steps, each persisting its
//! artifacts under the run directory and checkpointing into the manifest:
//!
//! `inputs -> annotations -> selection -> (student_r<k> -> compress_r<k>)*
//!  -> stages -> report`
//!
//! Every step reads its inputs back from the artifacts of earlier steps,
//! so running steps one command at a time produces the same bytes as one
//! `run`, and a step whose artifacts verify against the manifest can be
//! skipped on resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::{CacheError, CacheStore};
use crate::config::{validate_config, ConfigViolations, PipelineConfig, SamplerStrategy};
use crate::dcrs::{
    baseline_select, diversity_select, quality_select, strict_confidence_split, BaselineStrategy,
    DcrsError, GenerationTally, SelectionReport,
};
use crate::embed::{embed, EmbedError, RationaleEmbedding};
use crate::gateway::{
    bounded_map, generate_annotations, new_key_log, refine_pair, student_infer, AnnotationFailure,
    EmbeddingProvider, FailureCategory, GatewayError, KeyLog, PromptTemplate, Provider,
    TemplateError,
};
use crate::manifest::{artifact_record, write_atomic, ManifestError, RunDir, RunManifest};
use crate::model::{
    read_jsonl_str, validate_queries, write_jsonl_string, DistillationSample, DistillationSet,
    ModelError, Query, Stage, StageDataset, StudentResponse, TeacherAnnotation,
};
use crate::report::{
    build_histogram, build_stage_summary, threshold_sweep, token_stats, ReportBundle, ReportError,
    TokenStats,
};

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Dcrs(#[from] DcrsError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("invalid configuration:\n{0}")]
    Config(#[from] ConfigViolations),
    #[error("missing input artifact `{path}`; run the earlier pipeline step first")]
    MissingInput { path: String },
    #[error("no provider configured for role {0}")]
    MissingProvider(String),
    #[error("sample routed to unknown refiner provider `{0}`")]
    UnknownRefiner(String),
    #[error("manifest belongs to config {manifest} but the current config digest is {current}; cannot resume")]
    ManifestMismatch { manifest: String, current: String },
    #[error("io at `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> StageError {
    StageError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Builds the full-reasoning stage dataset from the selected set.
pub fn build_stage1(set: &DistillationSet, prompt_prefix: &str) -> Result<StageDataset, ModelError> {
    StageDataset::build(Stage::FullReasoning, set, prompt_prefix)
}

/// Builds the compressed stage dataset from a completed round's output.
pub fn build_stage2(
    round_output: &DistillationSet,
    prompt_prefix: &str,
) -> Result<StageDataset, ModelError> {
    StageDataset::build(Stage::Compressed, round_output, prompt_prefix)
}

/// Builds the reasoning-free stage dataset: every rationale is dropped and
/// the serialization carries only prefix + query + label.
pub fn build_stage3(
    source: &DistillationSet,
    prompt_prefix: &str,
) -> Result<StageDataset, ModelError> {
    let stripped: Vec<DistillationSample> = source
        .samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            out.rationale = None;
            out.stage = Stage::ReasoningFree;
            out
        })
        .collect();
    StageDataset::build(Stage::ReasoningFree, &DistillationSet::new(stripped), prompt_prefix)
}

/// Stats persisted per compression round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRoundMeta {
    pub round_index: u32,
    pub rationale_tokens_before: TokenStats,
    pub rationale_tokens_after: TokenStats,
    /// Samples that kept their previous rationale after a failed refinement.
    pub refinement_failures: usize,
    /// Refined rationales longer than what they replaced (kept, but noted).
    pub refined_longer_than_original: usize,
    pub student_failures: usize,
}

/// One teacher-guided compression pass over a sample set.
#[derive(Debug, Clone)]
pub struct CompressionRound {
    pub round_index: u32,
    pub input_set: DistillationSet,
    pub student_responses: Vec<StudentResponse>,
    pub output_set: DistillationSet,
    pub meta: CompressionRoundMeta,
}

impl CompressionRound {
    /// Input and output cover the same query ids with identical labels,
    /// sample for sample.
    pub fn check_invariants(&self) -> Result<(), ModelError> {
        assert_eq!(
            self.input_set.query_ids(),
            self.output_set.query_ids(),
            "round {} changed query coverage",
            self.round_index
        );
        for (a, b) in self.input_set.samples.iter().zip(&self.output_set.samples) {
            assert_eq!(a.query.id, b.query.id);
            assert_eq!(a.label, b.label, "round {} altered a label", self.round_index);
        }
        Ok(())
    }
}

/// Unique queries of a sample set, ascending by id.
fn unique_queries(set: &DistillationSet) -> Vec<Query> {
    let mut queries: Vec<Query> = Vec::new();
    for sample in &set.samples {
        if queries.last().map(|q: &Query| q.id.as_str()) != Some(sample.query.id.as_str()) {
            queries.push(sample.query.clone());
        }
    }
    queries
}

/// Runs student inference plus teacher refinement over one sample set.
/// Each sample is refined by the teacher that produced its rationale
/// unless `refiner_override` designates a single provider. Per-sample
/// failures keep the previous rationale and are counted, never dropped.
#[allow(clippy::too_many_arguments)]
pub fn run_compression_round(
    input_set: &DistillationSet,
    student_responses: &[StudentResponse],
    teachers: &BTreeMap<String, Provider>,
    refiner_override: Option<&str>,
    refinement_template: &PromptTemplate,
    round_index: u32,
    student_failures: usize,
) -> Result<CompressionRound, StageError> {
    let responses: BTreeMap<&str, &StudentResponse> = student_responses
        .iter()
        .map(|r| (r.query_id.as_str(), r))
        .collect();

    // group sample indices by the provider that refines them
    let mut by_refiner: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, sample) in input_set.samples.iter().enumerate() {
        let refiner = refiner_override.unwrap_or(&sample.provenance.teacher_id);
        by_refiner.entry(refiner).or_default().push(i);
    }

    let mut refined: Vec<Option<(Option<String>, bool)>> = vec![None; input_set.samples.len()];
    for (refiner_id, indices) in by_refiner {
        let teacher = teachers
            .get(refiner_id)
            .ok_or_else(|| StageError::UnknownRefiner(refiner_id.to_string()))?;
        let results = bounded_map(&indices, teacher.spec.max_concurrency, |&i| {
            let sample = &input_set.samples[i];
            let rationale = sample.rationale.as_deref().unwrap_or_default();
            match responses.get(sample.query.id.as_str()) {
                None => (None, true),
                Some(response) => {
                    match refine_pair(
                        teacher,
                        refinement_template,
                        &sample.query.id,
                        rationale,
                        response,
                    ) {
                        Ok(text) => (Some(text), false),
                        Err(e) => {
                            log::warn!(
                                "refinement failed for ({}, {}): {e}; keeping previous rationale",
                                sample.query.id,
                                refiner_id
                            );
                            (None, true)
                        }
                    }
                }
            }
        });
        for (&i, result) in indices.iter().zip(results) {
            refined[i] = Some(result);
        }
    }

    let mut output_samples = Vec::with_capacity(input_set.samples.len());
    let mut before = Vec::with_capacity(input_set.samples.len());
    let mut after = Vec::with_capacity(input_set.samples.len());
    let mut refinement_failures = 0;
    let mut refined_longer = 0;
    for (sample, outcome) in input_set.samples.iter().zip(refined) {
        let (replacement, fallback) = outcome.expect("every sample routed");
        let original = sample.rationale.clone().unwrap_or_default();
        let original_tokens = original.split_whitespace().count();
        before.push(original_tokens);
        let rationale = match replacement {
            Some(text) => {
                let tokens = text.split_whitespace().count();
                if tokens > original_tokens {
                    log::warn!(
                        "refined rationale for ({}, {}) grew from {original_tokens} to {tokens} tokens; keeping it",
                        sample.query.id,
                        sample.provenance.teacher_id
                    );
                    refined_longer += 1;
                }
                text
            }
            None => original,
        };
        if fallback {
            refinement_failures += 1;
        }
        after.push(rationale.split_whitespace().count());
        let mut out = sample.clone();
        out.rationale = Some(rationale);
        out.stage = Stage::Compressed;
        out.provenance.compression_round = round_index;
        out.provenance.refinement_fallback = fallback;
        output_samples.push(out);
    }

    let round = CompressionRound {
        round_index,
        input_set: input_set.clone(),
        student_responses: student_responses.to_vec(),
        output_set: DistillationSet::new(output_samples),
        meta: CompressionRoundMeta {
            round_index,
            rationale_tokens_before: token_stats(&before),
            rationale_tokens_after: token_stats(&after),
            refinement_failures,
            refined_longer_than_original: refined_longer,
            student_failures,
        },
    };
    round.check_invariants()?;
    Ok(round)
}

/// Orchestrates the pipeline over a run directory with manifest
/// checkpointing.
pub struct Pipeline {
    pub config: PipelineConfig,
    run: RunDir,
    cache: CacheStore,
    keys: KeyLog,
    manifest: RunManifest,
    resume: bool,
    deterministic: bool,
}

/// Step names in execution order for a given round count.
pub fn step_sequence(compression_rounds: u32) -> Vec<String> {
    let mut steps = vec![
        "inputs".to_string(),
        "annotations".to_string(),
        "selection".to_string(),
    ];
    for round in 1..=compression_rounds {
        steps.push(format!("student_r{round}"));
        steps.push(format!("compress_r{round}"));
    }
    steps.push("stages".to_string());
    steps.push("report".to_string());
    steps
}

impl Pipeline {
    /// Opens (and creates) a run directory. With `resume` an existing
    /// manifest is loaded and verified steps will be skipped; otherwise a
    /// fresh manifest replaces whatever was there.
    pub fn open(
        config: PipelineConfig,
        run_root: impl Into<PathBuf>,
        cache_dir: Option<PathBuf>,
        resume: bool,
    ) -> Result<Self, StageError> {
        validate_config(&config)?;
        let run = RunDir::new(run_root);
        std::fs::create_dir_all(run.root()).map_err(|e| io_err(run.root(), e))?;
        let cache = CacheStore::open(cache_dir.unwrap_or_else(|| run.default_cache_dir()));
        let digest = config.digest();
        // an existing manifest for the same config carries on (so stepwise
        // commands accumulate into one history); a mismatched one is an
        // error under --resume and is replaced otherwise
        let manifest = if run.manifest_path().exists() {
            match RunManifest::load(&run.manifest_path()) {
                Ok(loaded) if loaded.config_digest == digest && loaded.seed == config.seed => {
                    loaded
                }
                Ok(loaded) => {
                    if resume {
                        return Err(StageError::ManifestMismatch {
                            manifest: loaded.config_digest,
                            current: digest,
                        });
                    }
                    RunManifest::new(&digest, config.seed)
                }
                Err(e) => {
                    if resume {
                        return Err(e.into());
                    }
                    RunManifest::new(&digest, config.seed)
                }
            }
        } else {
            RunManifest::new(&digest, config.seed)
        };
        let deterministic = !config.providers.is_empty()
            && config.providers.iter().all(|p| p.role.is_mock());
        Ok(Self {
            config,
            run,
            cache,
            keys: new_key_log(),
            manifest,
            resume,
            deterministic,
        })
    }

    pub fn run_dir(&self) -> &RunDir {
        &self.run
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn now(&self) -> Option<u64> {
        if self.deterministic {
            None
        } else {
            Some(
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            )
        }
    }

    fn skip(&self, step: &str) -> bool {
        let skip = self.resume && self.manifest.step_verified(&self.run, step);
        if skip {
            log::info!("step {step} already complete; skipping");
        }
        skip
    }

    fn finish_step(&mut self, step: &str, files: &[PathBuf]) -> Result<(), StageError> {
        let mut artifacts = Vec::with_capacity(files.len());
        for file in files {
            artifacts.push(artifact_record(&self.run, file)?);
        }
        let at = self.now();
        self.manifest.record_step(step, artifacts, at);
        let keys: Vec<String> = self.keys.lock().expect("key log").iter().cloned().collect();
        let mut merged = self.manifest.cache_keys.clone();
        merged.extend(keys);
        self.manifest.set_cache_keys(merged);
        self.manifest.save(&self.run.manifest_path())?;
        Ok(())
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> Result<(), StageError> {
        write_atomic(path, bytes)?;
        Ok(())
    }

    fn read_required(&self, path: &Path) -> Result<String, StageError> {
        std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                StageError::MissingInput {
                    path: self.run.relative(path),
                }
            } else {
                io_err(path, e)
            }
        })
    }

    // ---- providers & templates -------------------------------------------------

    fn teacher_providers(&self) -> Result<Vec<Provider>, StageError> {
        let teachers = self.config.teachers();
        if teachers.is_empty() {
            return Err(StageError::MissingProvider("teacher".to_string()));
        }
        teachers
            .into_iter()
            .map(|spec| {
                Provider::from_spec(
                    spec,
                    &self.config,
                    Some(self.cache.clone()),
                    Some(self.keys.clone()),
                )
                .map_err(StageError::from)
            })
            .collect()
    }

    fn teacher_map(&self) -> Result<BTreeMap<String, Provider>, StageError> {
        Ok(self
            .teacher_providers()?
            .into_iter()
            .map(|p| (p.id().to_string(), p))
            .collect())
    }

    fn student_provider(&self) -> Result<Provider, StageError> {
        let spec = self
            .config
            .student()
            .ok_or_else(|| StageError::MissingProvider("student".to_string()))?;
        Ok(Provider::from_spec(
            spec,
            &self.config,
            Some(self.cache.clone()),
            Some(self.keys.clone()),
        )?)
    }

    fn embedder_provider(&self) -> Result<EmbeddingProvider, StageError> {
        let spec = self
            .config
            .embedder()
            .ok_or_else(|| StageError::MissingProvider("embedder".to_string()))?;
        Ok(EmbeddingProvider::from_spec(
            spec,
            &self.config,
            Some(self.cache.clone()),
            Some(self.keys.clone()),
        )?)
    }

    fn template(&self, name: &str, body: &str) -> Result<PromptTemplate, StageError> {
        Ok(PromptTemplate::new(name, body)?)
    }

    // ---- artifact loading ------------------------------------------------------

    pub fn load_queries(&self) -> Result<Vec<Query>, StageError> {
        let text = self.read_required(&self.run.queries_file())?;
        Ok(read_jsonl_str(&text)?)
    }

    pub fn load_annotations(&self) -> Result<Vec<TeacherAnnotation>, StageError> {
        let text = self.read_required(&self.run.annotations_file())?;
        Ok(read_jsonl_str(&text)?)
    }

    pub fn load_failures(&self) -> Result<Vec<AnnotationFailure>, StageError> {
        let text = self.read_required(&self.run.failures_file())?;
        Ok(read_jsonl_str(&text)?)
    }

    pub fn load_pool_annotations(&self) -> Result<Vec<TeacherAnnotation>, StageError> {
        let text = self.read_required(&self.run.pool_file())?;
        Ok(read_jsonl_str(&text)?)
    }

    pub fn load_selected(&self) -> Result<DistillationSet, StageError> {
        let text = self.read_required(&self.run.selected_file())?;
        Ok(DistillationSet {
            samples: read_jsonl_str(&text)?,
        })
    }

    pub fn load_selection_report(&self) -> Result<SelectionReport, StageError> {
        let text = self.read_required(&self.run.selection_report_file())?;
        serde_json::from_str(&text).map_err(|source| {
            StageError::Model(ModelError::Json { line: 0, source })
        })
    }

    pub fn load_student_responses(&self, round: u32) -> Result<Vec<StudentResponse>, StageError> {
        let text = self.read_required(&self.run.student_file(round))?;
        Ok(read_jsonl_str(&text)?)
    }

    pub fn load_round_output(&self, round: u32) -> Result<DistillationSet, StageError> {
        let text = self.read_required(&self.run.round_output_file(round))?;
        Ok(DistillationSet {
            samples: read_jsonl_str(&text)?,
        })
    }

    pub fn load_round_meta(&self, round: u32) -> Result<CompressionRoundMeta, StageError> {
        let text = self.read_required(&self.run.round_meta_file(round))?;
        serde_json::from_str(&text).map_err(|source| {
            StageError::Model(ModelError::Json { line: 0, source })
        })
    }

    pub fn load_stage_dataset(&self, path: &Path) -> Result<StageDataset, StageError> {
        let text = self.read_required(path)?;
        Ok(StageDataset::from_jsonl(&text)?)
    }

    /// The set a compression round reads: the selection for round 1, the
    /// previous round's output afterwards.
    fn round_input(&self, round: u32) -> Result<DistillationSet, StageError> {
        if round <= 1 {
            self.load_selected()
        } else {
            self.load_round_output(round - 1)
        }
    }

    // ---- steps -------------------------------------------------------------

    /// Copies the query set and the resolved config into the run directory.
    pub fn step_inputs(&mut self, queries: &[Query]) -> Result<(), StageError> {
        if self.skip("inputs") {
            return Ok(());
        }
        validate_queries(queries)?;
        let mut sorted = queries.to_vec();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        self.write(
            &self.run.queries_file(),
            write_jsonl_string(&sorted)?.as_bytes(),
        )?;
        let mut config_json =
            serde_json::to_string_pretty(&self.config).expect("config serializes");
        config_json.push('\n');
        self.write(&self.run.config_snapshot(), config_json.as_bytes())?;
        self.finish_step("inputs", &[self.run.queries_file(), self.run.config_snapshot()])
    }

    /// Prompts every teacher on every query and persists annotations plus
    /// recorded failures.
    pub fn step_annotations(&mut self) -> Result<(), StageError> {
        if self.skip("annotations") {
            return Ok(());
        }
        let queries = self.load_queries()?;
        let teachers = self.teacher_providers()?;
        let template = self.template("generation", &self.config.prompts.generation)?;
        let (annotations, failures) =
            generate_annotations(&queries, &teachers, &template, &self.config);
        self.write(
            &self.run.annotations_file(),
            write_jsonl_string(&annotations)?.as_bytes(),
        )?;
        self.write(
            &self.run.failures_file(),
            write_jsonl_string(&failures)?.as_bytes(),
        )?;
        self.finish_step(
            "annotations",
            &[self.run.annotations_file(), self.run.failures_file()],
        )
    }

    /// Quality selection, diversity selection (or a baseline sampler), and
    /// the selection report.
    pub fn step_selection(&mut self) -> Result<(), StageError> {
        if self.skip("selection") {
            return Ok(());
        }
        let queries = self.load_queries()?;
        let annotations = self.load_annotations()?;
        let failures = self.load_failures()?;
        let queries_by_id: BTreeMap<String, Query> =
            queries.into_iter().map(|q| (q.id.clone(), q)).collect();

        let parse_failed = failures
            .iter()
            .filter(|f| f.category == FailureCategory::Parse)
            .count();
        let transport_failed = failures.len() - parse_failed;
        let (checked, strict_rejected) = if self.config.strict_confidence {
            let (kept, rejected) =
                strict_confidence_split(annotations.clone(), self.config.confidence_tolerance);
            (kept, rejected.len())
        } else {
            (annotations.clone(), 0)
        };
        let tally = GenerationTally {
            generated: annotations.len() + parse_failed,
            parse_failed,
            transport_failed,
            strict_rejected,
        };

        let (pool, set, report) = match self.config.sampler {
            SamplerStrategy::Confidence => {
                let pool = quality_select(&checked, self.config.threshold);
                let embeddings = self.embed_diversity_groups(&pool)?;
                let (set, report) =
                    diversity_select(&pool, &embeddings, &queries_by_id, tally)?;
                (pool, set, report)
            }
            SamplerStrategy::LogProbability => {
                let strategy = BaselineStrategy::LogProbability {
                    keep_fraction: self.config.log_probability_keep_fraction,
                };
                let (set, report) =
                    baseline_select(&checked, &strategy, &queries_by_id, tally)?;
                (quality_select(&checked, 0.0), set, report)
            }
            SamplerStrategy::HardRejection => {
                let pattern = self
                    .config
                    .hard_rejection_pattern
                    .as_deref()
                    .ok_or(DcrsError::MissingPredicate)?;
                let strategy = BaselineStrategy::HardRejection {
                    predicate: regex::Regex::new(pattern)
                        .map_err(|_| DcrsError::MissingPredicate)?,
                };
                let (set, report) =
                    baseline_select(&checked, &strategy, &queries_by_id, tally)?;
                (quality_select(&checked, 0.0), set, report)
            }
        };

        let pool_flat: Vec<&TeacherAnnotation> = pool.annotations().collect();
        self.write(
            &self.run.pool_file(),
            write_jsonl_string(&pool_flat)?.as_bytes(),
        )?;
        self.write(
            &self.run.selected_file(),
            write_jsonl_string(&set.samples)?.as_bytes(),
        )?;
        let mut report_json = serde_json::to_string_pretty(&report).expect("report serializes");
        report_json.push('\n');
        self.write(&self.run.selection_report_file(), report_json.as_bytes())?;
        self.finish_step(
            "selection",
            &[
                self.run.pool_file(),
                self.run.selected_file(),
                self.run.selection_report_file(),
            ],
        )
    }

    /// Embeds the rationales of every group that diversity selection will
    /// actually compare (k >= 3 survivors).
    fn embed_diversity_groups(
        &self,
        pool: &crate::dcrs::SelectionPool,
    ) -> Result<BTreeMap<(String, String), RationaleEmbedding>, StageError> {
        let mut keys = Vec::new();
        let mut texts = Vec::new();
        for (query_id, group) in &pool.retained {
            if group.len() >= 3 {
                for a in group {
                    keys.push((query_id.clone(), a.teacher_id.clone()));
                    texts.push(a.rationale.clone());
                }
            }
        }
        if texts.is_empty() {
            return Ok(BTreeMap::new());
        }
        let embedder = self.embedder_provider()?;
        let embeddings = embed(&texts, &embedder)?;
        Ok(keys.into_iter().zip(embeddings).collect())
    }

    /// Student inference for one compression round.
    pub fn step_student(&mut self, round: u32) -> Result<(), StageError> {
        let step = format!("student_r{round}");
        if self.skip(&step) {
            return Ok(());
        }
        let input = self.round_input(round)?;
        let queries = unique_queries(&input);
        let student = self.student_provider()?;
        let template = self.template("student", &self.config.prompts.student)?;
        let (responses, failures) = student_infer(&student, &queries, &template);
        self.write(
            &self.run.student_file(round),
            write_jsonl_string(&responses)?.as_bytes(),
        )?;
        let failures_path = self
            .run
            .root()
            .join(format!("inference/student_r{round}_failures.jsonl"));
        self.write(&failures_path, write_jsonl_string(&failures)?.as_bytes())?;
        self.finish_step(&step, &[self.run.student_file(round), failures_path])
    }

    /// Teacher-guided refinement for one compression round.
    pub fn step_compress(&mut self, round: u32) -> Result<(), StageError> {
        let step = format!("compress_r{round}");
        if self.skip(&step) {
            return Ok(());
        }
        let input = self.round_input(round)?;
        let responses = self.load_student_responses(round)?;
        let student_failures = unique_queries(&input).len() - responses.len();
        let teachers = self.teacher_map()?;
        let template = self.template("refinement", &self.config.prompts.refinement)?;
        let round_result = run_compression_round(
            &input,
            &responses,
            &teachers,
            self.config.refiner.as_deref(),
            &template,
            round,
            student_failures,
        )?;
        self.write(
            &self.run.round_output_file(round),
            write_jsonl_string(&round_result.output_set.samples)?.as_bytes(),
        )?;
        let mut meta_json =
            serde_json::to_string_pretty(&round_result.meta).expect("meta serializes");
        meta_json.push('\n');
        self.write(&self.run.round_meta_file(round), meta_json.as_bytes())?;
        self.finish_step(
            &step,
            &[
                self.run.round_output_file(round),
                self.run.round_meta_file(round),
            ],
        )
    }

    /// Builds and persists every stage dataset file.
    pub fn step_stages(&mut self) -> Result<(), StageError> {
        if self.skip("stages") {
            return Ok(());
        }
        let prefix = self.config.stage_prompt_prefix.clone();
        let g = self.load_selected()?;
        let mut files = Vec::new();

        let stage1 = build_stage1(&g, &prefix)?;
        self.write(&self.run.stage1_file(), stage1.to_jsonl().map_err(json_err)?.as_bytes())?;
        files.push(self.run.stage1_file());

        let rounds = self.config.compression_rounds;
        for round in 1..=rounds {
            let output = self.load_round_output(round)?;
            let stage2 = build_stage2(&output, &prefix)?;
            self.write(
                &self.run.stage2_file(round),
                stage2.to_jsonl().map_err(json_err)?.as_bytes(),
            )?;
            files.push(self.run.stage2_file(round));
        }

        let last = self.load_round_output(rounds)?;
        let stage3 = build_stage3(&last, &prefix)?;
        self.write(&self.run.stage3_file(), stage3.to_jsonl().map_err(json_err)?.as_bytes())?;
        files.push(self.run.stage3_file());

        self.finish_step("stages", &files)
    }

    /// Builds the report bundle from the persisted artifacts.
    pub fn step_report(&mut self) -> Result<(), StageError> {
        if self.skip("report") {
            return Ok(());
        }
        let bundle = self.build_report()?;
        self.write(&self.run.report_json(), bundle.to_json().as_bytes())?;
        self.write(&self.run.report_md(), bundle.to_markdown().as_bytes())?;
        self.write(&self.run.histogram_csv(), bundle.histogram_csv().as_bytes())?;
        self.write(&self.run.sweep_csv(), bundle.sweep_csv().as_bytes())?;
        self.finish_step(
            "report",
            &[
                self.run.report_json(),
                self.run.report_md(),
                self.run.histogram_csv(),
                self.run.sweep_csv(),
            ],
        )
    }

    /// Assembles the report from disk artifacts (also used by `--verify`).
    pub fn build_report(&self) -> Result<ReportBundle, StageError> {
        let annotations = self.load_annotations()?;
        let selection = self.load_selection_report()?;
        let pool_annotations = self.load_pool_annotations()?;
        let pool = quality_select(&pool_annotations, selection.threshold.unwrap_or(0.0));
        let datasets = self.load_all_stage_datasets()?;
        let dataset_refs: Vec<&StageDataset> = datasets.iter().collect();
        let summary = build_stage_summary(
            &dataset_refs,
            &annotations,
            &pool,
            &self.manifest.config_digest,
        );
        Ok(ReportBundle {
            summary,
            selection,
            histogram: build_histogram(
                &annotations,
                self.config.histogram_bins,
                self.config.threshold,
            ),
            sweep: threshold_sweep(&annotations, &self.config.sweep_thresholds),
        })
    }

    pub fn load_all_stage_datasets(&self) -> Result<Vec<StageDataset>, StageError> {
        let mut datasets = vec![self.load_stage_dataset(&self.run.stage1_file())?];
        for round in 1..=self.config.compression_rounds {
            datasets.push(self.load_stage_dataset(&self.run.stage2_file(round))?);
        }
        datasets.push(self.load_stage_dataset(&self.run.stage3_file())?);
        Ok(datasets)
    }

    /// Recomputes every reported number from the artifacts and compares.
    pub fn verify_report(&self) -> Result<(), StageError> {
        let text = self.read_required(&self.run.report_json())?;
        let bundle: ReportBundle = serde_json::from_str(&text)
            .map_err(|source| StageError::Model(ModelError::Json { line: 0, source }))?;
        let annotations = self.load_annotations()?;
        let selection = self.load_selection_report()?;
        let pool_annotations = self.load_pool_annotations()?;
        let pool = quality_select(&pool_annotations, selection.threshold.unwrap_or(0.0));
        let datasets = self.load_all_stage_datasets()?;
        let dataset_refs: Vec<&StageDataset> = datasets.iter().collect();
        bundle.verify(&dataset_refs, &annotations, &pool)?;
        Ok(())
    }

    /// Runs every step in order, optionally stopping after a named step.
    pub fn run_all(
        &mut self,
        queries: &[Query],
        stop_after: Option<&str>,
    ) -> Result<(), StageError> {
        for step in step_sequence(self.config.compression_rounds) {
            match step.as_str() {
                "inputs" => self.step_inputs(queries)?,
                "annotations" => self.step_annotations()?,
                "selection" => self.step_selection()?,
                "stages" => self.step_stages()?,
                "report" => self.step_report()?,
                other => {
                    let (kind, round) = other.split_once("_r").expect("round step name");
                    let round: u32 = round.parse().expect("round index");
                    match kind {
                        "student" => self.step_student(round)?,
                        "compress" => self.step_compress(round)?,
                        _ => unreachable!("unknown step {other}"),
                    }
                }
            }
            if stop_after == Some(step.as_str()) {
                log::info!("stopping after step {step} as requested");
                break;
            }
        }
        Ok(())
    }
}

fn json_err(source: serde_json::Error) -> StageError {
    StageError::Model(ModelError::Json { line: 0, source })
}
