//! Run directory layout and the run manifest.
//!
//! Every pipeline step persists its artifacts under the run directory and
//! records their content digests in `manifest.json`. The manifest is the
//! resume point: a step whose artifacts all exist and verify can be loaded
//! instead of recomputed. Wall-clock timestamps are recorded only for live
//! runs; deterministic (all-mock) runs omit them so the manifest bytes are
//! reproducible.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::sha256_hex;
use crate::model::SCHEMA_VERSION;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("io at `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("artifact `{path}` does not match its recorded digest")]
    DigestMismatch { path: String },
}

fn io_err(path: &Path, source: std::io::Error) -> ManifestError {
    ManifestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// The fixed layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn default_cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn queries_file(&self) -> PathBuf {
        self.root.join("inputs/queries.jsonl")
    }
    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("inputs/config.json")
    }
    pub fn annotations_file(&self) -> PathBuf {
        self.root.join("annotations/annotations.jsonl")
    }
    pub fn failures_file(&self) -> PathBuf {
        self.root.join("annotations/failures.jsonl")
    }
    pub fn pool_file(&self) -> PathBuf {
        self.root.join("selection/pool.jsonl")
    }
    pub fn selected_file(&self) -> PathBuf {
        self.root.join("selection/selected.jsonl")
    }
    pub fn selection_report_file(&self) -> PathBuf {
        self.root.join("selection/report.json")
    }
    pub fn student_file(&self, round: u32) -> PathBuf {
        self.root.join(format!("inference/student_r{round}.jsonl"))
    }
    pub fn round_output_file(&self, round: u32) -> PathBuf {
        self.root.join(format!("inference/round_r{round}_output.jsonl"))
    }
    pub fn round_meta_file(&self, round: u32) -> PathBuf {
        self.root.join(format!("inference/round_r{round}_meta.json"))
    }
    pub fn stage1_file(&self) -> PathBuf {
        self.root.join("stages/stage1_full.jsonl")
    }
    pub fn stage2_file(&self, round: u32) -> PathBuf {
        self.root.join(format!("stages/stage2_compressed_r{round}.jsonl"))
    }
    pub fn stage3_file(&self) -> PathBuf {
        self.root.join("stages/stage3_answer_only.jsonl")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report/report.json")
    }
    pub fn report_md(&self) -> PathBuf {
        self.root.join("report/report.md")
    }
    pub fn histogram_csv(&self) -> PathBuf {
        self.root.join("report/histogram.csv")
    }
    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("report/sweep.csv")
    }

    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

/// Writes a file atomically (temp + rename), creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ManifestError> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    let tmp = parent.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// One produced file and its content digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the run root, forward slashes.
    pub path: String,
    pub sha256: String,
}

/// One completed pipeline step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: String,
    pub artifacts: Vec<ArtifactRecord>,
    /// Wall clock, omitted on deterministic runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recorded_at_unix: Option<u64>,
}

/// The audit record of one run: which steps completed, which files they
/// produced, and which cache keys they touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub config_digest: String,
    pub seed: u64,
    /// Steps in execution order; re-running a step replaces its record.
    pub steps: Vec<StepRecord>,
    /// Sorted cache keys read or written during the run.
    pub cache_keys: Vec<String>,
}

impl RunManifest {
    pub fn new(config_digest: &str, seed: u64) -> Self {
        let run_id = sha256_hex(format!("{config_digest}:{seed}").as_bytes())[..16].to_string();
        Self {
            schema_version: SCHEMA_VERSION,
            run_id,
            config_digest: config_digest.to_string(),
            seed,
            steps: Vec::new(),
            cache_keys: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_atomic(path, json.as_bytes())
    }

    pub fn step(&self, name: &str) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.step == name)
    }

    /// Records a completed step, replacing any previous record of the same
    /// step and dropping records of steps that followed it (they were
    /// computed against stale inputs).
    pub fn record_step(&mut self, name: &str, artifacts: Vec<ArtifactRecord>, at: Option<u64>) {
        if let Some(pos) = self.steps.iter().position(|s| s.step == name) {
            self.steps.truncate(pos);
        }
        self.steps.push(StepRecord {
            step: name.to_string(),
            artifacts,
            recorded_at_unix: at,
        });
    }

    pub fn set_cache_keys(&mut self, keys: impl IntoIterator<Item = String>) {
        self.cache_keys = keys.into_iter().collect();
        self.cache_keys.sort();
        self.cache_keys.dedup();
    }

    /// True when every artifact of a recorded step exists and matches its
    /// digest.
    pub fn step_verified(&self, run: &RunDir, name: &str) -> bool {
        let Some(step) = self.step(name) else {
            return false;
        };
        step.artifacts.iter().all(|artifact| {
            let path = run.root().join(&artifact.path);
            match std::fs::read(&path) {
                Ok(bytes) => sha256_hex(&bytes) == artifact.sha256,
                Err(_) => false,
            }
        })
    }
}

/// Digest of a file already on disk, as an artifact record.
pub fn artifact_record(run: &RunDir, path: &Path) -> Result<ArtifactRecord, ManifestError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(ArtifactRecord {
        path: run.relative(path),
        sha256: sha256_hex(&bytes),
    })
}
