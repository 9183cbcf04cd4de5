//! Pipeline value types: queries, teacher annotations, distillation samples,
//! and stage datasets, together with their JSON Lines serialization.
//!
//! Everything here is a plain immutable value. Workers share these types
//! read-only; new values are constructed rather than mutated in place.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

/// Version stamped into every serialized dataset record and cache key.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("query id is empty")]
    EmptyId,
    #[error("query `{0}` has empty text")]
    EmptyText(String),
    #[error("duplicate query id `{0}`")]
    DuplicateId(String),
    #[error("sample `{0}` tagged {1} but rationale presence does not match")]
    RationaleStageMismatch(String, Stage),
    #[error("stage dataset mixes {expected} with {found}")]
    MixedStages { expected: Stage, found: Stage },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

/// Task family a query belongs to; drives answer-block extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CodeGeneration,
    MultipleChoice,
    Math,
    Other,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::CodeGeneration => "code_generation",
            TaskKind::MultipleChoice => "multiple_choice",
            TaskKind::Math => "math",
            TaskKind::Other => "other",
        };
        f.write_str(s)
    }
}

/// One unlabeled task instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub task_kind: TaskKind,
    /// Task metadata such as test-case strings or answer choices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<BTreeMap<String, String>>,
}

impl Query {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::EmptyId);
        }
        if self.text.is_empty() {
            return Err(ModelError::EmptyText(self.id.clone()));
        }
        Ok(())
    }
}

/// Checks per-query invariants plus id uniqueness across the set.
pub fn validate_queries(queries: &[Query]) -> Result<(), ModelError> {
    let mut seen = std::collections::BTreeSet::new();
    for q in queries {
        q.validate()?;
        if !seen.insert(q.id.as_str()) {
            return Err(ModelError::DuplicateId(q.id.clone()));
        }
    }
    Ok(())
}

/// One weighted scoring factor inside a teacher's self-assessment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorScore {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// One teacher output for one query: rationale, label, and self-reported
/// confidence, plus provenance and token accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherAnnotation {
    pub query_id: String,
    pub teacher_id: String,
    pub rationale: String,
    pub label: String,
    /// Self-reported score in [0, 1].
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor_scores: Option<Vec<FactorScore>>,
    pub raw_text: String,
    pub rationale_tokens: usize,
    /// Mean token log-probability when the provider reports one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_logprob: Option<f64>,
    /// Completion token count as reported by the provider, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<usize>,
}

impl TeacherAnnotation {
    /// Sort key used everywhere a deterministic order is required.
    pub fn sort_key(&self) -> (&str, &str) {
        (&self.query_id, &self.teacher_id)
    }
}

/// The stage-1 student's answer to a selected query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentResponse {
    pub query_id: String,
    pub rationale: String,
    pub label: String,
    pub rationale_tokens: usize,
    pub raw_text: String,
}

/// Which of the staged datasets a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FullReasoning,
    Compressed,
    ReasoningFree,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::FullReasoning => "full_reasoning",
            Stage::Compressed => "compressed",
            Stage::ReasoningFree => "reasoning_free",
        };
        f.write_str(s)
    }
}

/// Where a sample came from and how it was selected and refined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_id: String,
    /// Cosine similarity of the selected pair, when diversity selection ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_similarity: Option<f64>,
    /// Sampler that admitted the sample.
    pub sampler: String,
    /// 0 before any compression; the round index afterwards.
    pub compression_round: u32,
    /// True when a refinement call failed and the previous rationale was kept.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub refinement_fallback: bool,
}

/// A selected (query, rationale, label) triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationSample {
    pub query: Query,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub label: String,
    pub stage: Stage,
    pub provenance: Provenance,
}

impl DistillationSample {
    /// Rationale presence must match the stage tag.
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = match self.stage {
            Stage::ReasoningFree => self.rationale.is_none(),
            Stage::FullReasoning | Stage::Compressed => {
                self.rationale.as_deref().is_some_and(|r| !r.is_empty())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::RationaleStageMismatch(
                self.query.id.clone(),
                self.stage,
            ))
        }
    }

    pub fn sort_key(&self) -> (&str, &str) {
        (&self.query.id, &self.provenance.teacher_id)
    }
}

/// An ordered collection of selected samples, prior to stage serialization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillationSet {
    pub samples: Vec<DistillationSample>,
}

impl DistillationSet {
    pub fn new(mut samples: Vec<DistillationSample>) -> Self {
        samples.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct query ids, ascending.
    pub fn query_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.query.id.as_str()).collect();
        ids.dedup();
        ids
    }
}

/// One serialized line of a stage dataset file.
///
/// `training_text` holds the exact joint input a trainer consumes; the
/// structured fields exist so the same file can be re-filtered or audited
/// without re-parsing the text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub schema_version: u32,
    pub stage: Stage,
    pub query_id: String,
    pub query_text: String,
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub label: String,
    pub provenance: Provenance,
    pub training_text: String,
}

/// A complete stage dataset: every record shares the stage tag and records
/// are ordered by (query id, teacher id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDataset {
    pub stage: Stage,
    pub schema_version: u32,
    pub records: Vec<StageRecord>,
}

/// Joins the non-empty segments of a training example with blank lines.
///
/// full_reasoning and compressed serialize prefix + query + rationale +
/// label; reasoning_free serializes prefix + query + label. An empty
/// prefix contributes nothing.
pub fn training_text(
    prefix: &str,
    query_text: &str,
    rationale: Option<&str>,
    label: &str,
) -> String {
    let mut parts: Vec<&str> = Vec::with_capacity(4);
    if !prefix.is_empty() {
        parts.push(prefix);
    }
    parts.push(query_text);
    if let Some(r) = rationale {
        parts.push(r);
    }
    parts.push(label);
    parts.join("\n\n")
}

impl StageDataset {
    /// Builds a stage dataset from a sample set, validating stage/rationale
    /// agreement and producing the deterministic record order.
    pub fn build(
        stage: Stage,
        set: &DistillationSet,
        prompt_prefix: &str,
    ) -> Result<Self, ModelError> {
        let mut records = Vec::with_capacity(set.samples.len());
        for sample in &set.samples {
            sample.validate()?;
            if sample.stage != stage {
                return Err(ModelError::MixedStages {
                    expected: stage,
                    found: sample.stage,
                });
            }
            records.push(StageRecord {
                schema_version: SCHEMA_VERSION,
                stage,
                query_id: sample.query.id.clone(),
                query_text: sample.query.text.clone(),
                task_kind: sample.query.task_kind,
                rationale: sample.rationale.clone(),
                label: sample.label.clone(),
                provenance: sample.provenance.clone(),
                training_text: training_text(
                    prompt_prefix,
                    &sample.query.text,
                    sample.rationale.as_deref(),
                    &sample.label,
                ),
            });
        }
        records.sort_by(|a, b| {
            (a.query_id.as_str(), a.provenance.teacher_id.as_str())
                .cmp(&(b.query_id.as_str(), b.provenance.teacher_id.as_str()))
        });
        Ok(Self {
            stage,
            schema_version: SCHEMA_VERSION,
            records,
        })
    }

    pub fn to_jsonl(&self) -> Result<String, serde_json::Error> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ModelError> {
        let records: Vec<StageRecord> = read_jsonl_str(text)?;
        let stage = records.first().map(|r| r.stage).unwrap_or(Stage::FullReasoning);
        for rec in &records {
            if rec.stage != stage {
                return Err(ModelError::MixedStages {
                    expected: stage,
                    found: rec.stage,
                });
            }
        }
        Ok(Self {
            stage,
            schema_version: SCHEMA_VERSION,
            records,
        })
    }
}

/// Writes values as JSON Lines (UTF-8, one object per line).
pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<(), ModelError> {
    for item in items {
        let line = serde_json::to_string(item).map_err(|source| ModelError::Json {
            line: 0,
            source,
        })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_jsonl_string<T: Serialize>(items: &[T]) -> Result<String, ModelError> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, items)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

/// Reads JSON Lines, reporting the 1-based line of the first bad record.
pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(r: R) -> Result<Vec<T>, ModelError> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| ModelError::Json {
            line: idx + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn read_jsonl_str<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, ModelError> {
    read_jsonl(text.as_bytes())
}
