//! Dataset-side statistics: token accounting, confidence histograms,
//! threshold sweeps, and stage summaries, emitted as machine-readable
//! report files. All numbers here describe the datasets this pipeline
//! produced, not any trained model's inference behavior.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::Tokenizer;
use crate::dcrs::{quality_select, SelectionPool, SelectionReport};
use crate::model::{Stage, StageDataset, TeacherAnnotation};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("tokenizer is provider_reported but the provider returned no count")]
    MissingProviderCount,
    #[error("io at `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("report does not match datasets:\n{0}")]
    VerificationFailed(String),
}

/// Maximal non-whitespace runs.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Token count under the configured tokenizer. `provider_count` is the
/// count the provider returned alongside this exact text, when one exists.
pub fn token_count(
    text: &str,
    tokenizer: Tokenizer,
    provider_count: Option<usize>,
) -> Result<usize, ReportError> {
    match tokenizer {
        Tokenizer::Whitespace => Ok(whitespace_tokens(text)),
        Tokenizer::ProviderReported => provider_count.ok_or(ReportError::MissingProviderCount),
    }
}

/// Mean/median/p95 over a sample of counts; zeros when empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

pub fn token_stats(counts: &[usize]) -> TokenStats {
    if counts.is_empty() {
        return TokenStats::default();
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mean = sorted.iter().sum::<usize>() as f64 / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    // nearest-rank percentile
    let p95_idx = ((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1;
    TokenStats {
        mean,
        median,
        p95: sorted[p95_idx] as f64,
    }
}

/// Per-stage dataset statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: Stage,
    pub sample_count: usize,
    pub serialized_tokens: TokenStats,
    /// Mean rationale tokens; absent for the reasoning-free stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_rationale_tokens: Option<f64>,
}

pub fn stage_stats(dataset: &StageDataset) -> StageStats {
    let serialized: Vec<usize> = dataset
        .records
        .iter()
        .map(|r| whitespace_tokens(&r.training_text))
        .collect();
    let rationale: Vec<usize> = dataset
        .records
        .iter()
        .filter_map(|r| r.rationale.as_deref().map(whitespace_tokens))
        .collect();
    let mean_rationale_tokens = if rationale.is_empty() {
        None
    } else {
        Some(rationale.iter().sum::<usize>() as f64 / rationale.len() as f64)
    };
    StageStats {
        stage: dataset.stage,
        sample_count: dataset.records.len(),
        serialized_tokens: token_stats(&serialized),
        mean_rationale_tokens,
    }
}

/// Per-teacher annotation counts and selection retention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherStats {
    pub teacher_id: String,
    pub annotations: usize,
    pub retained: usize,
    pub retention_rate: f64,
}

/// Everything the summary section of a report carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub config_digest: String,
    pub stages: Vec<StageStats>,
    pub teachers: Vec<TeacherStats>,
}

pub fn build_stage_summary(
    datasets: &[&StageDataset],
    annotations: &[TeacherAnnotation],
    pool: &SelectionPool,
    config_digest: &str,
) -> StageSummary {
    let mut annotated: BTreeMap<&str, usize> = BTreeMap::new();
    for a in annotations {
        *annotated.entry(a.teacher_id.as_str()).or_insert(0) += 1;
    }
    let mut retained: BTreeMap<&str, usize> = BTreeMap::new();
    for a in pool.annotations() {
        *retained.entry(a.teacher_id.as_str()).or_insert(0) += 1;
    }
    let teachers = annotated
        .iter()
        .map(|(&teacher_id, &count)| {
            let kept = retained.get(teacher_id).copied().unwrap_or(0);
            TeacherStats {
                teacher_id: teacher_id.to_string(),
                annotations: count,
                retained: kept,
                retention_rate: if count == 0 {
                    0.0
                } else {
                    kept as f64 / count as f64
                },
            }
        })
        .collect();
    StageSummary {
        config_digest: config_digest.to_string(),
        stages: datasets.iter().map(|d| stage_stats(d)).collect(),
        teachers,
    }
}

/// Confidence score distribution with uniform bins over [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub bins: usize,
    /// bins + 1 edges, 0 to 1.
    pub bin_edges: Vec<f64>,
    pub threshold: f64,
    pub per_teacher: BTreeMap<String, Vec<usize>>,
    pub total: usize,
}

pub fn build_histogram(
    annotations: &[TeacherAnnotation],
    bins: usize,
    threshold: f64,
) -> ConfidenceHistogram {
    let bins = bins.max(1);
    let mut per_teacher: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for a in annotations {
        let idx = ((a.confidence * bins as f64) as usize).min(bins - 1);
        per_teacher
            .entry(a.teacher_id.clone())
            .or_insert_with(|| vec![0; bins])[idx] += 1;
    }
    ConfidenceHistogram {
        bins,
        bin_edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        threshold,
        per_teacher,
        total: annotations.len(),
    }
}

/// Retention at one sweep threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub retained: usize,
}

/// Retention counts at each threshold; `s_values` must be ascending.
pub fn threshold_sweep(annotations: &[TeacherAnnotation], s_values: &[f64]) -> Vec<SweepPoint> {
    debug_assert!(
        s_values.windows(2).all(|w| w[0] <= w[1]),
        "sweep thresholds must be ascending"
    );
    s_values
        .iter()
        .map(|&s| SweepPoint {
            threshold: s,
            retained: quality_select(annotations, s).total(),
        })
        .collect()
}

/// The full report payload written to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub summary: StageSummary,
    pub selection: SelectionReport,
    pub histogram: ConfidenceHistogram,
    pub sweep: Vec<SweepPoint>,
}

impl ReportBundle {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        md.push_str("# Run report\n\n");
        md.push_str(&format!("Config digest: `{}`\n\n", self.summary.config_digest));

        md.push_str("## Selection\n\n");
        let c = &self.selection.counts;
        md.push_str(&format!(
            "Sampler: `{}`, threshold: {}\n\n",
            self.selection.sampler,
            self.selection
                .threshold
                .map(|t| t.to_string())
                .unwrap_or_else(|| "n/a".to_string())
        ));
        md.push_str("| generated | parse-failed | quality-rejected | diversity-dropped | final |\n");
        md.push_str("|---|---|---|---|---|\n");
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n\n",
            c.generated, c.parse_failed, c.quality_rejected, c.diversity_dropped, c.final_kept
        ));
        md.push_str(&format!(
            "Count conservation: {} = {} + {} + {} + {} ({}); transport failures tracked separately: {}\n\n",
            c.generated,
            c.parse_failed,
            c.quality_rejected,
            c.diversity_dropped,
            c.final_kept,
            if c.conserved() { "holds" } else { "VIOLATED" },
            c.transport_failed
        ));

        md.push_str("## Stages\n\n");
        md.push_str("| stage | samples | mean tokens | median | p95 | mean rationale tokens |\n");
        md.push_str("|---|---|---|---|---|---|\n");
        for s in &self.summary.stages {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                s.stage,
                s.sample_count,
                s.serialized_tokens.mean,
                s.serialized_tokens.median,
                s.serialized_tokens.p95,
                s.mean_rationale_tokens
                    .map(|m| m.to_string())
                    .unwrap_or_else(|| "-".to_string())
            ));
        }
        md.push('\n');

        md.push_str("## Teachers\n\n");
        md.push_str("| teacher | annotations | retained | retention |\n");
        md.push_str("|---|---|---|---|\n");
        for t in &self.summary.teachers {
            md.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                t.teacher_id, t.annotations, t.retained, t.retention_rate
            ));
        }
        md.push('\n');

        md.push_str(&format!(
            "## Confidence histogram\n\n{} bins over [0, 1], threshold marker at {}; see histogram.csv.\n",
            self.histogram.bins, self.histogram.threshold
        ));
        md
    }

    /// Plot-ready CSV: one row per (teacher, bin).
    pub fn histogram_csv(&self) -> String {
        let mut csv = String::from("teacher,bin_start,bin_end,count\n");
        for (teacher, counts) in &self.histogram.per_teacher {
            for (i, count) in counts.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    csv_field(teacher),
                    self.histogram.bin_edges[i],
                    self.histogram.bin_edges[i + 1],
                    count
                ));
            }
        }
        csv
    }

    pub fn sweep_csv(&self) -> String {
        let mut csv = String::from("threshold,retained\n");
        for point in &self.sweep {
            csv.push_str(&format!("{},{}\n", point.threshold, point.retained));
        }
        csv
    }

    /// Recomputes every reported count from the artifacts and asserts
    /// equality; the verification mode of the report command.
    pub fn verify(
        &self,
        datasets: &[&StageDataset],
        annotations: &[TeacherAnnotation],
        pool: &SelectionPool,
    ) -> Result<(), ReportError> {
        let mut problems = Vec::new();
        let recomputed = build_stage_summary(
            datasets,
            annotations,
            pool,
            &self.summary.config_digest,
        );
        if recomputed != self.summary {
            problems.push("stage summary differs from recomputation".to_string());
        }
        let hist = build_histogram(annotations, self.histogram.bins, self.histogram.threshold);
        if hist != self.histogram {
            problems.push("histogram differs from recomputation".to_string());
        }
        if hist.per_teacher.values().flatten().sum::<usize>() != annotations.len() {
            problems.push("histogram total does not match annotation count".to_string());
        }
        let sweep_values: Vec<f64> = self.sweep.iter().map(|p| p.threshold).collect();
        if threshold_sweep(annotations, &sweep_values) != self.sweep {
            problems.push("threshold sweep differs from recomputation".to_string());
        }
        if !self.selection.counts.conserved() {
            problems.push("selection counts are not conserved".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ReportError::VerificationFailed(problems.join("\n")))
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
