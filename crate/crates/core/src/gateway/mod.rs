//! Provider gateway: renders prompts, talks to teacher/student/embedding
//! endpoints (live HTTP or seeded mocks), parses structured outputs, and
//! caches every response so re-runs are byte-identical.

pub mod http;
pub mod mock;
pub mod parse;
pub mod server;
pub mod template;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::cache::{CacheError, CacheKey, CacheStore};
use crate::config::{PipelineConfig, ProviderRole, ProviderSpec};
use crate::model::{FactorScore, Query, StudentResponse, TaskKind, TeacherAnnotation};

pub use parse::{parse_refined_rationale, parse_student_output, parse_teacher_output, ParseError};
pub use template::{render_prompt, PromptTemplate, TemplateError};

/// One raw completion from a provider, as cached on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderReply {
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_logprob: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("provider `{provider}`: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        provider: String,
        attempts: u32,
        message: String,
    },
    #[error("provider `{provider}`: still rate-limited after {attempts} attempt(s)")]
    RateLimited { provider: String, attempts: u32 },
    #[error("provider `{provider}`: cannot parse output: {error}")]
    Parse {
        provider: String,
        error: ParseError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("annotation for query `{expected}` paired with student response for `{got}`")]
    MismatchedPair { expected: String, got: String },
    #[error("provider `{id}` has role {role}, which cannot serve this request")]
    WrongRole { id: String, role: ProviderRole },
}

/// Collects every cache key a run touches, for the manifest and `gc`.
pub type KeyLog = Arc<Mutex<BTreeSet<String>>>;

pub fn new_key_log() -> KeyLog {
    Arc::new(Mutex::new(BTreeSet::new()))
}

fn log_key(keys: &Option<KeyLog>, key: &CacheKey) {
    if let Some(log) = keys {
        log.lock()
            .expect("key log lock")
            .insert(key.as_hex().to_string());
    }
}

/// A chat-capable backend: live HTTP or a deterministic mock.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<ProviderReply, GatewayError>;
}

/// An embedding-capable backend.
pub trait EmbedBackend: Send + Sync {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError>;
}

/// A configured chat provider plus its cache binding.
pub struct Provider {
    pub spec: ProviderSpec,
    backend: Box<dyn ChatBackend>,
    cache: Option<CacheStore>,
    keys: Option<KeyLog>,
    /// Resolved seed for mock roles; part of the cache key so runs with
    /// different seeds never share entries.
    mock_seed: Option<u64>,
}

impl Provider {
    /// Builds the backend matching the spec's role. Mock roles never touch
    /// the network.
    pub fn from_spec(
        spec: &ProviderSpec,
        config: &PipelineConfig,
        cache: Option<CacheStore>,
        keys: Option<KeyLog>,
    ) -> Result<Self, GatewayError> {
        let mock_seed = spec.role.is_mock().then(|| spec.effective_seed(config.seed));
        let backend: Box<dyn ChatBackend> = match spec.role {
            ProviderRole::Teacher | ProviderRole::Student => {
                Box::new(http::HttpChat::new(spec.clone()))
            }
            ProviderRole::MockTeacher => Box::new(mock::MockTeacher::new(
                mock_seed.expect("mock role has a seed"),
                config.factor_weights.clone(),
            )),
            ProviderRole::MockStudent => {
                Box::new(mock::MockStudent::new(mock_seed.expect("mock role has a seed")))
            }
            ProviderRole::Embedder | ProviderRole::MockEmbedder => {
                return Err(GatewayError::WrongRole {
                    id: spec.id.clone(),
                    role: spec.role,
                })
            }
        };
        Ok(Self {
            spec: spec.clone(),
            backend,
            cache,
            keys,
            mock_seed,
        })
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    fn request_key(&self, prompt: &str) -> CacheKey {
        let params = serde_json::to_vec(&self.spec.request_params).expect("params serialize");
        let seed = match self.mock_seed {
            Some(seed) => seed.to_le_bytes().to_vec(),
            None => b"live".to_vec(),
        };
        CacheKey::from_parts(&[
            b"chat",
            self.spec.model.as_bytes(),
            prompt.as_bytes(),
            &params,
            &crate::model::SCHEMA_VERSION.to_le_bytes(),
            &seed,
        ])
    }

    /// Completes a prompt, serving from the cache when possible. A corrupt
    /// cache entry is evicted, logged, and recomputed, never served.
    pub fn complete_cached(&self, prompt: &str) -> Result<ProviderReply, GatewayError> {
        let key = self.request_key(prompt);
        log_key(&self.keys, &key);
        if let Some(cache) = &self.cache {
            match cache.get(&key) {
                Ok(Some(bytes)) => match serde_json::from_slice::<ProviderReply>(&bytes) {
                    Ok(reply) => return Ok(reply),
                    Err(e) => log::warn!(
                        "cache entry {key} for provider `{}` undecodable ({e}); recomputing",
                        self.spec.id
                    ),
                },
                Ok(None) => {}
                Err(CacheError::CorruptEntry { key }) => {
                    log::warn!(
                        "corrupt cache entry {key} for provider `{}` evicted; recomputing",
                        self.spec.id
                    );
                }
                Err(e) => return Err(e.into()),
            }
        }
        let reply = self.backend.complete(prompt)?;
        if let Some(cache) = &self.cache {
            let bytes = serde_json::to_vec(&reply).expect("reply serializes");
            cache.put(&key, &bytes)?;
        }
        Ok(reply)
    }
}

/// A configured embedding provider plus its cache binding.
pub struct EmbeddingProvider {
    pub spec: ProviderSpec,
    backend: Box<dyn EmbedBackend>,
    cache: Option<CacheStore>,
    keys: Option<KeyLog>,
    mock_seed: Option<u64>,
}

impl EmbeddingProvider {
    pub fn from_spec(
        spec: &ProviderSpec,
        config: &PipelineConfig,
        cache: Option<CacheStore>,
        keys: Option<KeyLog>,
    ) -> Result<Self, GatewayError> {
        let mock_seed = spec.role.is_mock().then(|| spec.effective_seed(config.seed));
        let backend: Box<dyn EmbedBackend> = match spec.role {
            ProviderRole::Embedder => Box::new(http::HttpEmbed::new(spec.clone())),
            ProviderRole::MockEmbedder => Box::new(mock::MockEmbedder::new(
                mock_seed.expect("mock role has a seed"),
                spec.embedding_dimension
                    .unwrap_or(mock::DEFAULT_MOCK_EMBED_DIM),
            )),
            _ => {
                return Err(GatewayError::WrongRole {
                    id: spec.id.clone(),
                    role: spec.role,
                })
            }
        };
        Ok(Self {
            spec: spec.clone(),
            backend,
            cache,
            keys,
            mock_seed,
        })
    }

    /// Wraps an arbitrary backend (custom integrations, tests).
    pub fn with_backend(
        spec: &ProviderSpec,
        backend: Box<dyn EmbedBackend>,
        cache: Option<CacheStore>,
        keys: Option<KeyLog>,
    ) -> Self {
        Self {
            spec: spec.clone(),
            backend,
            cache,
            keys,
            mock_seed: None,
        }
    }

    fn text_key(&self, text: &str) -> CacheKey {
        let seed = match self.mock_seed {
            Some(seed) => seed.to_le_bytes().to_vec(),
            None => b"live".to_vec(),
        };
        CacheKey::from_parts(&[
            b"embed",
            self.spec.model.as_bytes(),
            text.as_bytes(),
            &crate::model::SCHEMA_VERSION.to_le_bytes(),
            &seed,
        ])
    }

    /// Embeds texts in order, consulting the per-text cache and batching
    /// the misses into one provider call.
    pub fn embed_cached(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let mut out: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        let mut miss_idx = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            let key = self.text_key(text);
            log_key(&self.keys, &key);
            if let Some(cache) = &self.cache {
                match cache.get(&key) {
                    Ok(Some(bytes)) => {
                        if let Ok(v) = serde_json::from_slice::<Vec<f32>>(&bytes) {
                            out[i] = Some(v);
                            continue;
                        }
                        log::warn!("undecodable embedding cache entry {key}; recomputing");
                    }
                    Ok(None) => {}
                    Err(CacheError::CorruptEntry { key }) => {
                        log::warn!("corrupt embedding cache entry {key} evicted; recomputing");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            miss_idx.push(i);
        }
        if !miss_idx.is_empty() {
            let miss_texts: Vec<String> = miss_idx.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.backend.embed_batch(&miss_texts)?;
            for (&i, vector) in miss_idx.iter().zip(vectors) {
                if let Some(cache) = &self.cache {
                    let key = self.text_key(&texts[i]);
                    cache.put(&key, &serde_json::to_vec(&vector).expect("vec serializes"))?;
                }
                out[i] = Some(vector);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("all slots filled")).collect())
    }
}

/// Why a (query, provider) pair produced no usable output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    Parse,
    Transport,
    RateLimited,
    Template,
}

/// A recorded per-pair failure; raw text is preserved for parse failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFailure {
    pub query_id: String,
    pub provider_id: String,
    pub category: FailureCategory,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

fn failure_for(query_id: &str, provider_id: &str, err: &GatewayError) -> AnnotationFailure {
    let category = match err {
        GatewayError::Transport { .. } | GatewayError::Cache(_) => FailureCategory::Transport,
        GatewayError::RateLimited { .. } => FailureCategory::RateLimited,
        GatewayError::Parse { .. } => FailureCategory::Parse,
        GatewayError::Template(_) => FailureCategory::Template,
        GatewayError::MismatchedPair { .. } | GatewayError::WrongRole { .. } => {
            FailureCategory::Template
        }
    };
    AnnotationFailure {
        query_id: query_id.to_string(),
        provider_id: provider_id.to_string(),
        category,
        message: err.to_string(),
        raw_text: None,
    }
}

/// Runs `f` over `items` on up to `workers` threads, preserving order.
pub(crate) fn bounded_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let workers = workers.clamp(1, n);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("slot filled"))
        .collect()
}

/// Binds the standard placeholder vocabulary for a query against whatever
/// the template actually requires.
fn query_bindings(template: &PromptTemplate, query: &Query) -> BTreeMap<String, String> {
    let mut bindings = BTreeMap::new();
    if template.requires("query") {
        bindings.insert("query".to_string(), query.text.clone());
    }
    if template.requires("task_kind") {
        bindings.insert("task_kind".to_string(), query.task_kind.to_string());
    }
    bindings
}

/// Attaches config weights to self-reported factor values when the factor
/// names match the configured weight set exactly.
fn attach_factors(
    parsed: Option<Vec<(String, f64)>>,
    config: &PipelineConfig,
    kind: TaskKind,
) -> Option<Vec<FactorScore>> {
    let parsed = parsed?;
    let weights = config.weights_for(kind)?;
    if parsed.len() != weights.len() {
        return None;
    }
    let mut scores = Vec::with_capacity(parsed.len());
    for (name, value) in parsed {
        let weight = *weights.get(&name)?;
        scores.push(FactorScore {
            name,
            weight,
            value,
        });
    }
    scores.sort_by(|a, b| a.name.cmp(&b.name));
    Some(scores)
}

/// Prompts every teacher on every query, returning parsed annotations plus
/// recorded failures. A failure on one (query, teacher) pair never
/// suppresses the others; output order is (query id, teacher id).
pub fn generate_annotations(
    queries: &[Query],
    teachers: &[Provider],
    template: &PromptTemplate,
    config: &PipelineConfig,
) -> (Vec<TeacherAnnotation>, Vec<AnnotationFailure>) {
    let per_teacher: Vec<Vec<Result<TeacherAnnotation, AnnotationFailure>>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = teachers
                .iter()
                .map(|teacher| {
                    scope.spawn(move || {
                        bounded_map(queries, teacher.spec.max_concurrency, |query| {
                            annotate_one(query, teacher, template, config)
                        })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("teacher fan-out")).collect()
        });

    let mut annotations = Vec::new();
    let mut failures = Vec::new();
    for outcomes in per_teacher {
        for outcome in outcomes {
            match outcome {
                Ok(a) => annotations.push(a),
                Err(f) => failures.push(f),
            }
        }
    }
    annotations.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    failures.sort_by(|a, b| {
        (&a.query_id, &a.provider_id).cmp(&(&b.query_id, &b.provider_id))
    });
    (annotations, failures)
}

fn annotate_one(
    query: &Query,
    teacher: &Provider,
    template: &PromptTemplate,
    config: &PipelineConfig,
) -> Result<TeacherAnnotation, AnnotationFailure> {
    let bindings = query_bindings(template, query);
    let prompt = render_prompt(template, &bindings)
        .map_err(|e| failure_for(&query.id, teacher.id(), &GatewayError::Template(e)))?;
    let reply = teacher
        .complete_cached(&prompt)
        .map_err(|e| failure_for(&query.id, teacher.id(), &e))?;
    match parse_teacher_output(&reply.raw_text, query.task_kind) {
        Ok(parsed) => Ok(TeacherAnnotation {
            query_id: query.id.clone(),
            teacher_id: teacher.id().to_string(),
            rationale_tokens: parsed.rationale.split_whitespace().count(),
            factor_scores: attach_factors(parsed.factor_values, config, query.task_kind),
            rationale: parsed.rationale,
            label: parsed.label,
            confidence: parsed.confidence,
            raw_text: reply.raw_text,
            mean_logprob: reply.mean_logprob,
            completion_tokens: reply.completion_tokens,
        }),
        Err(error) => Err(AnnotationFailure {
            query_id: query.id.clone(),
            provider_id: teacher.id().to_string(),
            category: FailureCategory::Parse,
            message: error.to_string(),
            raw_text: Some(reply.raw_text),
        }),
    }
}

/// Runs the student over every query; one response per query or a recorded
/// failure. Output order is query id.
pub fn student_infer(
    student: &Provider,
    queries: &[Query],
    template: &PromptTemplate,
) -> (Vec<StudentResponse>, Vec<AnnotationFailure>) {
    let outcomes = bounded_map(queries, student.spec.max_concurrency, |query| {
        infer_one(query, student, template)
    });
    let mut responses = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => responses.push(r),
            Err(f) => failures.push(f),
        }
    }
    responses.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    failures.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    (responses, failures)
}

fn infer_one(
    query: &Query,
    student: &Provider,
    template: &PromptTemplate,
) -> Result<StudentResponse, AnnotationFailure> {
    let bindings = query_bindings(template, query);
    let prompt = render_prompt(template, &bindings)
        .map_err(|e| failure_for(&query.id, student.id(), &GatewayError::Template(e)))?;
    let reply = student
        .complete_cached(&prompt)
        .map_err(|e| failure_for(&query.id, student.id(), &e))?;
    match parse_student_output(&reply.raw_text, query.task_kind) {
        Ok((rationale, label)) => Ok(StudentResponse {
            query_id: query.id.clone(),
            rationale_tokens: rationale.split_whitespace().count(),
            rationale,
            label,
            raw_text: reply.raw_text,
        }),
        Err(error) => Err(AnnotationFailure {
            query_id: query.id.clone(),
            provider_id: student.id().to_string(),
            category: FailureCategory::Parse,
            message: error.to_string(),
            raw_text: Some(reply.raw_text),
        }),
    }
}

/// Asks a teacher to rewrite its rationale in light of the student's
/// response. Returns the refined rationale; the label is untouched.
pub fn refine_rationale(
    teacher: &Provider,
    template: &PromptTemplate,
    original: &TeacherAnnotation,
    student: &StudentResponse,
) -> Result<String, GatewayError> {
    refine_pair(teacher, template, &original.query_id, &original.rationale, student)
}

/// Refinement on raw parts; later compression rounds refine an already
/// refined rationale rather than a teacher annotation.
pub fn refine_pair(
    teacher: &Provider,
    template: &PromptTemplate,
    query_id: &str,
    original_rationale: &str,
    student: &StudentResponse,
) -> Result<String, GatewayError> {
    if query_id != student.query_id {
        return Err(GatewayError::MismatchedPair {
            expected: query_id.to_string(),
            got: student.query_id.clone(),
        });
    }
    let mut bindings = BTreeMap::new();
    if template.requires("original_reasoning") {
        bindings.insert(
            "original_reasoning".to_string(),
            original_rationale.to_string(),
        );
    }
    if template.requires("student_response") {
        bindings.insert("student_response".to_string(), student.rationale.clone());
    }
    let prompt = render_prompt(template, &bindings)?;
    let reply = teacher.complete_cached(&prompt)?;
    parse_refined_rationale(&reply.raw_text).map_err(|error| GatewayError::Parse {
        provider: teacher.id().to_string(),
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ProviderRole, RequestParams};

    fn mock_teacher_spec(id: &str) -> ProviderSpec {
        ProviderSpec {
            id: id.to_string(),
            role: ProviderRole::MockTeacher,
            endpoint: String::new(),
            model: format!("mock-{id}"),
            auth_env: None,
            request_params: RequestParams::default(),
            max_concurrency: 3,
            max_retries: 0,
            seed: None,
            embedding_dimension: None,
        }
    }

    fn queries(n: usize) -> Vec<Query> {
        (0..n)
            .map(|i| Query {
                id: format!("q{i:03}"),
                text: format!("compute value number {i}"),
                task_kind: TaskKind::CodeGeneration,
                aux: None,
            })
            .collect()
    }

    fn config() -> PipelineConfig {
        PipelineConfig {
            seed: 7,
            ..PipelineConfig::default()
        }
    }

    fn generation_template() -> PromptTemplate {
        PromptTemplate::new("generation", crate::config::DEFAULT_GENERATION_PROMPT).unwrap()
    }

    #[test]
    fn two_queries_three_teachers_gives_six_annotations() {
        let config = config();
        let teachers: Vec<Provider> = ["t1", "t2", "t3"]
            .iter()
            .map(|id| Provider::from_spec(&mock_teacher_spec(id), &config, None, None).unwrap())
            .collect();
        let (annotations, failures) =
            generate_annotations(&queries(2), &teachers, &generation_template(), &config);
        assert_eq!(annotations.len(), 6);
        assert!(failures.is_empty());
        // sorted by (query id, teacher id)
        let keys: Vec<_> = annotations
            .iter()
            .map(|a| (a.query_id.clone(), a.teacher_id.clone()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn mock_teacher_rerun_is_byte_identical() {
        let config = config();
        let spec = ProviderSpec {
            seed: Some(7),
            ..mock_teacher_spec("t1")
        };
        let teacher = Provider::from_spec(&spec, &config, None, None).unwrap();
        let qs = queries(1);
        let (first, _) = generate_annotations(&qs, std::slice::from_ref(&teacher), &generation_template(), &config);
        let (second, _) = generate_annotations(&qs, std::slice::from_ref(&teacher), &generation_template(), &config);
        assert_eq!(first[0].raw_text, second[0].raw_text);
    }

    #[test]
    fn parse_failure_is_isolated() {
        struct BrokenTeacher;
        impl ChatBackend for BrokenTeacher {
            fn complete(&self, _prompt: &str) -> Result<ProviderReply, GatewayError> {
                Ok(ProviderReply {
                    raw_text: "prose with no marker at all".to_string(),
                    completion_tokens: None,
                    mean_logprob: None,
                })
            }
        }
        let config = config();
        let good = Provider::from_spec(&mock_teacher_spec("good"), &config, None, None).unwrap();
        let broken = Provider {
            spec: mock_teacher_spec("broken"),
            backend: Box::new(BrokenTeacher),
            cache: None,
            keys: None,
            mock_seed: Some(0),
        };
        let (annotations, failures) = generate_annotations(
            &queries(3),
            &[good, broken],
            &generation_template(),
            &config,
        );
        assert_eq!(annotations.len(), 3, "good teacher unaffected");
        assert_eq!(failures.len(), 3);
        assert!(failures
            .iter()
            .all(|f| f.category == FailureCategory::Parse && f.raw_text.is_some()));
    }

    #[test]
    fn transport_failure_keeps_partial_results() {
        struct FlakyByQuery;
        impl ChatBackend for FlakyByQuery {
            fn complete(&self, prompt: &str) -> Result<ProviderReply, GatewayError> {
                if prompt.contains("number 1") {
                    Err(GatewayError::Transport {
                        provider: "flaky".to_string(),
                        attempts: 3,
                        message: "connection refused".to_string(),
                    })
                } else {
                    mock::MockTeacher::new(1, crate::config::PipelineConfig::default().factor_weights)
                        .complete(prompt)
                }
            }
        }
        let config = config();
        let flaky = Provider {
            spec: mock_teacher_spec("flaky"),
            backend: Box::new(FlakyByQuery),
            cache: None,
            keys: None,
            mock_seed: Some(0),
        };
        let (annotations, failures) =
            generate_annotations(&queries(3), &[flaky], &generation_template(), &config);
        assert_eq!(annotations.len(), 2);
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].category, FailureCategory::Transport);
        assert_eq!(failures[0].query_id, "q001");
    }

    #[test]
    fn cached_completion_round_trips_and_records_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CacheStore::open(dir.path());
        let keys = new_key_log();
        let config = config();
        let teacher = Provider::from_spec(
            &mock_teacher_spec("t1"),
            &config,
            Some(cache.clone()),
            Some(keys.clone()),
        )
        .unwrap();
        let a = teacher.complete_cached("Task: cache me\n").unwrap();
        let b = teacher.complete_cached("Task: cache me\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(keys.lock().unwrap().len(), 1);
        assert_eq!(cache.list().unwrap().len(), 1);
    }

    #[test]
    fn student_and_refinement_flow() {
        let config = config();
        let teacher =
            Provider::from_spec(&mock_teacher_spec("t1"), &config, None, None).unwrap();
        let student_spec = ProviderSpec {
            role: ProviderRole::MockStudent,
            ..mock_teacher_spec("s1")
        };
        let student = Provider::from_spec(&student_spec, &config, None, None).unwrap();
        let qs = queries(2);
        let gen = generation_template();
        let stu = PromptTemplate::new("student", crate::config::DEFAULT_STUDENT_PROMPT).unwrap();
        let refine = PromptTemplate::new("refinement", crate::config::DEFAULT_REFINEMENT_PROMPT).unwrap();

        let (annotations, _) = generate_annotations(&qs, std::slice::from_ref(&teacher), &gen, &config);
        let (responses, fails) = student_infer(&student, &qs, &stu);
        assert_eq!(responses.len(), 2);
        assert!(fails.is_empty());
        for (a, r) in annotations.iter().zip(&responses) {
            assert!(
                r.rationale_tokens < a.rationale_tokens,
                "student {} vs teacher {}",
                r.rationale_tokens,
                a.rationale_tokens
            );
            let refined = refine_rationale(&teacher, &refine, a, r).unwrap();
            assert!(!refined.is_empty());
            assert_eq!(
                refined.split_whitespace().count(),
                r.rationale_tokens.min(a.rationale_tokens - 1)
            );
        }
    }

    #[test]
    fn mismatched_pair_rejected() {
        let config = config();
        let teacher = Provider::from_spec(&mock_teacher_spec("t1"), &config, None, None).unwrap();
        let refine = PromptTemplate::new("refinement", crate::config::DEFAULT_REFINEMENT_PROMPT).unwrap();
        let annotation = TeacherAnnotation {
            query_id: "qA".to_string(),
            teacher_id: "t1".to_string(),
            rationale: "some reasoning".to_string(),
            label: "x".to_string(),
            confidence: 0.9,
            factor_scores: None,
            raw_text: String::new(),
            rationale_tokens: 2,
            mean_logprob: None,
            completion_tokens: None,
        };
        let response = StudentResponse {
            query_id: "qB".to_string(),
            rationale: "short".to_string(),
            label: "x".to_string(),
            rationale_tokens: 1,
            raw_text: String::new(),
        };
        assert!(matches!(
            refine_rationale(&teacher, &refine, &annotation, &response),
            Err(GatewayError::MismatchedPair { .. })
        ));
    }
}
