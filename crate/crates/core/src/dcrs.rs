//! Dual-criteria rejection sampling: composite confidence scoring,
//! threshold-based quality selection, and similarity-based diversity
//! selection, plus the baseline samplers used for comparison runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, EmbedError, RationaleEmbedding};
use crate::model::{
    DistillationSample, DistillationSet, FactorScore, Provenance, Query, Stage, TeacherAnnotation,
};

#[derive(Debug, thiserror::Error)]
pub enum DcrsError {
    #[error("factor weights sum to {0}, want 1 within 1e-9")]
    WeightsNotNormalized(f64),
    #[error("factor value {0} outside [0, 1]")]
    FactorOutOfRange(f64),
    #[error("diversity group needs at least 2 rationales, got {0}")]
    GroupTooSmall(usize),
    #[error("annotation ({query_id}, {teacher_id}) in a k>=3 group has no embedding")]
    EmbeddingMissing {
        query_id: String,
        teacher_id: String,
    },
    #[error("annotation ({query_id}, {teacher_id}) carries no log-probability metadata")]
    MissingLogProbs {
        query_id: String,
        teacher_id: String,
    },
    #[error("hard rejection sampling needs a configured predicate")]
    MissingPredicate,
    #[error("query `{0}` referenced by an annotation is not in the query set")]
    UnknownQuery(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Weighted combination of performance factors: sum of weight * value.
///
/// Weights must sum to 1 within 1e-9 and values must lie in [0, 1]; the
/// result then lies in [0, 1] too (clamped against float round-off).
pub fn composite_confidence(factors: &[FactorScore]) -> Result<f64, DcrsError> {
    let weight_sum: f64 = factors.iter().map(|f| f.weight).sum();
    if (weight_sum - 1.0).abs() > 1e-9 {
        return Err(DcrsError::WeightsNotNormalized(weight_sum));
    }
    let mut score = 0.0;
    for f in factors {
        if !(0.0..=1.0).contains(&f.value) || f.value.is_nan() {
            return Err(DcrsError::FactorOutOfRange(f.value));
        }
        score += f.weight * f.value;
    }
    Ok(score.clamp(0.0, 1.0))
}

/// Annotations surviving the confidence threshold, grouped by query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPool {
    /// Query id -> surviving annotations, ordered by teacher id.
    pub retained: BTreeMap<String, Vec<TeacherAnnotation>>,
    /// Query id -> count of surviving teachers.
    pub per_query_k: BTreeMap<String, usize>,
    pub threshold_used: f64,
}

impl SelectionPool {
    pub fn total(&self) -> usize {
        self.per_query_k.values().sum()
    }

    /// Flat view in (query id, teacher id) order.
    pub fn annotations(&self) -> impl Iterator<Item = &TeacherAnnotation> {
        self.retained.values().flatten()
    }
}

/// Retains annotations with confidence >= s (boundary inclusive), grouped
/// by query. An empty result is legal.
pub fn quality_select(annotations: &[TeacherAnnotation], s: f64) -> SelectionPool {
    let mut retained: BTreeMap<String, Vec<TeacherAnnotation>> = BTreeMap::new();
    for a in annotations {
        if a.confidence >= s {
            retained.entry(a.query_id.clone()).or_default().push(a.clone());
        }
    }
    for group in retained.values_mut() {
        group.sort_by(|a, b| a.teacher_id.cmp(&b.teacher_id));
    }
    let per_query_k = retained
        .iter()
        .map(|(q, group)| (q.clone(), group.len()))
        .collect();
    SelectionPool {
        retained,
        per_query_k,
        threshold_used: s,
    }
}

/// Splits annotations whose self-reported confidence deviates from the
/// factor recomputation by more than `tolerance`. Annotations without a
/// factor breakdown pass through unchecked.
pub fn strict_confidence_split(
    annotations: Vec<TeacherAnnotation>,
    tolerance: f64,
) -> (Vec<TeacherAnnotation>, Vec<TeacherAnnotation>) {
    let mut kept = Vec::with_capacity(annotations.len());
    let mut rejected = Vec::new();
    for a in annotations {
        let consistent = match &a.factor_scores {
            None => true,
            Some(factors) => match composite_confidence(factors) {
                Ok(recomputed) => (a.confidence - recomputed).abs() <= tolerance,
                Err(_) => false,
            },
        };
        if consistent {
            kept.push(a);
        } else {
            rejected.push(a);
        }
    }
    (kept, rejected)
}

/// The index pair (p, q), p < q, minimizing cosine similarity over a group,
/// with ties broken by the lexicographically smallest pair. Indices are
/// 0-based positions into the group.
pub fn argmin_pair(embeddings: &[RationaleEmbedding]) -> Result<(usize, usize, f64), DcrsError> {
    let k = embeddings.len();
    if k < 2 {
        return Err(DcrsError::GroupTooSmall(k));
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for p in 0..k {
        for q in (p + 1)..k {
            let sim = cosine(&embeddings[p], &embeddings[q])?;
            // strict less-than keeps the first (lexicographically smallest) pair on ties
            if best.map_or(true, |(_, _, b)| sim < b) {
                best = Some((p, q, sim));
            }
        }
    }
    Ok(best.expect("k >= 2 yields at least one pair"))
}

/// Per-stage sample accounting. The identity
/// `generated = parse_failed + quality_rejected + diversity_dropped + final`
/// holds on every run; transport failures never produced an output and are
/// tracked separately.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionCounts {
    pub generated: usize,
    pub parse_failed: usize,
    pub quality_rejected: usize,
    pub diversity_dropped: usize,
    #[serde(rename = "final")]
    pub final_kept: usize,
    pub transport_failed: usize,
}

impl SelectionCounts {
    pub fn conserved(&self) -> bool {
        self.generated
            == self.parse_failed + self.quality_rejected + self.diversity_dropped + self.final_kept
    }
}

/// The argmin pair chosen for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenPair {
    pub query_id: String,
    /// 0-based indices into the query's surviving annotations (teacher-id order).
    pub pair: (usize, usize),
    pub teacher_ids: (String, String),
    pub similarity: f64,
}

/// What the selection stage did, emitted alongside the selected set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub sampler: String,
    /// Confidence threshold used; absent for the baseline samplers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub counts: SelectionCounts,
    pub chosen_pairs: Vec<ChosenPair>,
}

/// Raw generation outcomes feeding the selection accounting.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenerationTally {
    /// Parsed annotations + parse failures (everything that produced output).
    pub generated: usize,
    pub parse_failed: usize,
    pub transport_failed: usize,
    /// Annotations dropped by the strict confidence recheck, counted into
    /// quality_rejected.
    pub strict_rejected: usize,
}

/// Diversity selection over a quality-selected pool.
///
/// Queries with k >= 3 surviving annotations keep exactly the two
/// annotations of the minimum-similarity pair; k in {1, 2} keeps all
/// survivors; queries with no survivors are already absent from the pool.
pub fn diversity_select(
    pool: &SelectionPool,
    embeddings: &BTreeMap<(String, String), RationaleEmbedding>,
    queries: &BTreeMap<String, Query>,
    tally: GenerationTally,
) -> Result<(DistillationSet, SelectionReport), DcrsError> {
    let mut samples = Vec::new();
    let mut chosen_pairs = Vec::new();
    let mut diversity_dropped = 0;

    for (query_id, group) in &pool.retained {
        let query = queries
            .get(query_id)
            .ok_or_else(|| DcrsError::UnknownQuery(query_id.clone()))?;
        let keep: Vec<(&TeacherAnnotation, Option<f64>)> = if group.len() >= 3 {
            let vectors: Vec<RationaleEmbedding> = group
                .iter()
                .map(|a| {
                    embeddings
                        .get(&(a.query_id.clone(), a.teacher_id.clone()))
                        .cloned()
                        .ok_or_else(|| DcrsError::EmbeddingMissing {
                            query_id: a.query_id.clone(),
                            teacher_id: a.teacher_id.clone(),
                        })
                })
                .collect::<Result<_, _>>()?;
            let (p, q, sim) = argmin_pair(&vectors)?;
            diversity_dropped += group.len() - 2;
            chosen_pairs.push(ChosenPair {
                query_id: query_id.clone(),
                pair: (p, q),
                teacher_ids: (group[p].teacher_id.clone(), group[q].teacher_id.clone()),
                similarity: sim,
            });
            vec![(&group[p], Some(sim)), (&group[q], Some(sim))]
        } else {
            group.iter().map(|a| (a, None)).collect()
        };

        for (annotation, similarity) in keep {
            samples.push(sample_from_annotation(
                query,
                annotation,
                similarity,
                "confidence",
            ));
        }
    }

    let set = DistillationSet::new(samples);
    let final_kept = set.len();
    let parsed = tally.generated - tally.parse_failed;
    let report = SelectionReport {
        sampler: "confidence".to_string(),
        threshold: Some(pool.threshold_used),
        counts: SelectionCounts {
            generated: tally.generated,
            parse_failed: tally.parse_failed,
            quality_rejected: parsed - pool.total(),
            diversity_dropped,
            final_kept,
            transport_failed: tally.transport_failed,
        },
        chosen_pairs,
    };
    Ok((set, report))
}

fn sample_from_annotation(
    query: &Query,
    annotation: &TeacherAnnotation,
    similarity: Option<f64>,
    sampler: &str,
) -> DistillationSample {
    DistillationSample {
        query: query.clone(),
        rationale: Some(annotation.rationale.clone()),
        label: annotation.label.clone(),
        stage: Stage::FullReasoning,
        provenance: Provenance {
            teacher_id: annotation.teacher_id.clone(),
            selection_similarity: similarity,
            sampler: sampler.to_string(),
            compression_round: 0,
            refinement_fallback: false,
        },
    }
}

/// Baseline sampler parameters.
#[derive(Debug, Clone)]
pub enum BaselineStrategy {
    /// Keep the top `keep_fraction` by mean token log-probability.
    LogProbability { keep_fraction: f64 },
    /// Keep annotations whose label matches the predicate regex.
    HardRejection { predicate: regex::Regex },
}

impl BaselineStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineStrategy::LogProbability { .. } => "log_probability",
            BaselineStrategy::HardRejection { .. } => "hard_rejection",
        }
    }
}

/// The compared samplers: a single filtering pass with no diversity step.
/// These definitions are interpretations documented in the README; reports
/// label the sampler used.
pub fn baseline_select(
    annotations: &[TeacherAnnotation],
    strategy: &BaselineStrategy,
    queries: &BTreeMap<String, Query>,
    tally: GenerationTally,
) -> Result<(DistillationSet, SelectionReport), DcrsError> {
    let kept: Vec<&TeacherAnnotation> = match strategy {
        BaselineStrategy::LogProbability { keep_fraction } => {
            for a in annotations {
                if a.mean_logprob.is_none() {
                    return Err(DcrsError::MissingLogProbs {
                        query_id: a.query_id.clone(),
                        teacher_id: a.teacher_id.clone(),
                    });
                }
            }
            let mut ranked: Vec<&TeacherAnnotation> = annotations.iter().collect();
            ranked.sort_by(|a, b| {
                let la = a.mean_logprob.expect("checked above");
                let lb = b.mean_logprob.expect("checked above");
                lb.partial_cmp(&la)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.sort_key().cmp(&b.sort_key()))
            });
            let keep = ((annotations.len() as f64) * keep_fraction).ceil() as usize;
            ranked.truncate(keep);
            ranked
        }
        BaselineStrategy::HardRejection { predicate } => annotations
            .iter()
            .filter(|a| predicate.is_match(&a.label))
            .collect(),
    };

    let mut samples = Vec::with_capacity(kept.len());
    for a in &kept {
        let query = queries
            .get(&a.query_id)
            .ok_or_else(|| DcrsError::UnknownQuery(a.query_id.clone()))?;
        samples.push(sample_from_annotation(query, a, None, strategy.name()));
    }
    let set = DistillationSet::new(samples);
    let final_kept = set.len();
    let parsed = tally.generated - tally.parse_failed;
    let report = SelectionReport {
        sampler: strategy.name().to_string(),
        threshold: None,
        counts: SelectionCounts {
            generated: tally.generated,
            parse_failed: tally.parse_failed,
            quality_rejected: parsed - final_kept,
            diversity_dropped: 0,
            final_kept,
            transport_failed: tally.transport_failed,
        },
        chosen_pairs: Vec::new(),
    };
    Ok((set, report))
}
