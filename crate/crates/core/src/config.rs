//! Pipeline configuration: provider registry, prompt templates, selection
//! threshold, factor weights, and sampler choice. Loaded from a TOML file;
//! every knob has a shipped default so a minimal config only names its
//! providers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::TaskKind;

/// Default confidence threshold for quality selection.
pub const DEFAULT_THRESHOLD: f64 = 0.95;
/// Tolerance when recomputing a self-reported confidence from factors.
pub const DEFAULT_CONFIDENCE_TOLERANCE: f64 = 0.05;
/// Default histogram resolution; fine enough to resolve the 0.90-1.00 band.
pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

pub const DEFAULT_GENERATION_PROMPT: &str = include_str!("../assets/generation.txt");
pub const DEFAULT_STUDENT_PROMPT: &str = include_str!("../assets/student.txt");
pub const DEFAULT_REFINEMENT_PROMPT: &str = include_str!("../assets/refinement.txt");

/// What a provider is used for. Mock roles are deterministic in-process
/// stand-ins keyed by a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderRole {
    Teacher,
    Student,
    Embedder,
    MockTeacher,
    MockStudent,
    MockEmbedder,
}

impl ProviderRole {
    pub fn is_teacher(self) -> bool {
        matches!(self, ProviderRole::Teacher | ProviderRole::MockTeacher)
    }
    pub fn is_student(self) -> bool {
        matches!(self, ProviderRole::Student | ProviderRole::MockStudent)
    }
    pub fn is_embedder(self) -> bool {
        matches!(self, ProviderRole::Embedder | ProviderRole::MockEmbedder)
    }
    pub fn is_mock(self) -> bool {
        matches!(
            self,
            ProviderRole::MockTeacher | ProviderRole::MockStudent | ProviderRole::MockEmbedder
        )
    }

    /// The mock counterpart of a live role.
    pub fn mocked(self) -> Self {
        match self {
            ProviderRole::Teacher => ProviderRole::MockTeacher,
            ProviderRole::Student => ProviderRole::MockStudent,
            ProviderRole::Embedder => ProviderRole::MockEmbedder,
            mock => mock,
        }
    }
}

impl fmt::Display for ProviderRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProviderRole::Teacher => "teacher",
            ProviderRole::Student => "student",
            ProviderRole::Embedder => "embedder",
            ProviderRole::MockTeacher => "mock_teacher",
            ProviderRole::MockStudent => "mock_student",
            ProviderRole::MockEmbedder => "mock_embedder",
        };
        f.write_str(s)
    }
}

/// Inference request parameters sent with every chat completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
}

impl Default for RequestParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 2048,
            top_p: 0.95,
        }
    }
}

/// One configured model endpoint (or its mock stand-in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub id: String,
    pub role: ProviderRole,
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.example.com/v1`.
    /// Ignored by mock roles.
    #[serde(default)]
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub request_params: RequestParams,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Seed for mock roles; derived from the global seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Vector width for mock embedders; live embedders report their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dimension: Option<usize>,
}

fn default_concurrency() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}

impl ProviderSpec {
    /// Effective seed for a mock provider: the explicit per-provider seed,
    /// otherwise the global seed mixed with a stable hash of the id so
    /// distinct mock teachers diverge.
    pub fn effective_seed(&self, global_seed: u64) -> u64 {
        self.seed
            .unwrap_or_else(|| global_seed ^ crate::cache::stable_hash64(self.id.as_bytes()))
    }
}

/// Sampler used to admit annotations into the distillation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerStrategy {
    /// Confidence-threshold quality selection followed by diversity selection.
    Confidence,
    /// Keep the top fraction by mean token log-probability; no diversity step.
    LogProbability,
    /// Keep annotations whose label passes a configured predicate; no
    /// diversity step.
    HardRejection,
}

impl fmt::Display for SamplerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SamplerStrategy::Confidence => "confidence",
            SamplerStrategy::LogProbability => "log_probability",
            SamplerStrategy::HardRejection => "hard_rejection",
        };
        f.write_str(s)
    }
}

/// How token counts are produced for reports and annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Maximal non-whitespace runs.
    Whitespace,
    /// The count the provider returned with the response.
    ProviderReported,
}

/// Resolved prompt template bodies. Loading a config file inlines the file
/// contents here so the config digest covers the actual prompt text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub generation: String,
    pub student: String,
    pub refinement: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            generation: DEFAULT_GENERATION_PROMPT.to_string(),
            student: DEFAULT_STUDENT_PROMPT.to_string(),
            refinement: DEFAULT_REFINEMENT_PROMPT.to_string(),
        }
    }
}

/// The complete pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Confidence threshold s; annotations with confidence >= s are retained.
    pub threshold: f64,
    /// Per-task-kind factor weights, keyed by the task kind's snake_case name.
    pub factor_weights: BTreeMap<String, BTreeMap<String, f64>>,
    /// 1 = the three-stage protocol; 2 adds a second compression round.
    pub compression_rounds: u32,
    pub sampler: SamplerStrategy,
    pub tokenizer: Tokenizer,
    /// Global seed for mock providers.
    pub seed: u64,
    /// Reject annotations whose self-reported confidence deviates from the
    /// factor recomputation by more than `confidence_tolerance`.
    pub strict_confidence: bool,
    pub confidence_tolerance: f64,
    pub histogram_bins: usize,
    /// Thresholds for the retention sweep report, ascending.
    pub sweep_thresholds: Vec<f64>,
    /// Prefix prepended to every serialized training example. Independent of
    /// the generation prompt; configure both explicitly.
    pub stage_prompt_prefix: String,
    /// Fraction kept by the log-probability baseline sampler.
    pub log_probability_keep_fraction: f64,
    /// Regex a label must match under the hard-rejection baseline sampler.
    pub hard_rejection_pattern: Option<String>,
    /// Provider id that performs every refinement; by default each sample
    /// is refined by the teacher that produced it.
    pub refiner: Option<String>,
    /// Default queries file, relative to the config file; CLI may override.
    pub queries: Option<String>,
    pub providers: Vec<ProviderSpec>,
    pub prompts: PromptSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut factor_weights = BTreeMap::new();
        let mut code = BTreeMap::new();
        code.insert("correctness".to_string(), 0.5);
        code.insert("readability".to_string(), 0.2);
        code.insert("efficiency".to_string(), 0.2);
        code.insert("coverage".to_string(), 0.1);
        factor_weights.insert("code_generation".to_string(), code);
        for kind in ["multiple_choice", "math", "other"] {
            let mut w = BTreeMap::new();
            w.insert("correctness".to_string(), 1.0);
            factor_weights.insert(kind.to_string(), w);
        }
        Self {
            schema_version: crate::model::SCHEMA_VERSION,
            threshold: DEFAULT_THRESHOLD,
            factor_weights,
            compression_rounds: 1,
            sampler: SamplerStrategy::Confidence,
            tokenizer: Tokenizer::Whitespace,
            seed: 0,
            strict_confidence: false,
            confidence_tolerance: DEFAULT_CONFIDENCE_TOLERANCE,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
            sweep_thresholds: vec![0.0, 0.5, 0.9, 0.95, 0.99, 1.0],
            stage_prompt_prefix: String::new(),
            log_probability_keep_fraction: 0.5,
            hard_rejection_pattern: None,
            refiner: None,
            queries: None,
            providers: Vec::new(),
            prompts: PromptSet::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("cannot read prompt file `{path}`: {source}")]
    PromptFile {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid configuration:\n{0}")]
    Invalid(#[from] ConfigViolations),
}

/// One constraint the config fails to meet.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigViolation {
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("factor weights for `{kind}` sum to {sum}, want 1")]
    WeightsNotNormalized { kind: String, sum: f64 },
    #[error("factor weight `{name}` for `{kind}` is {value}, outside [0, 1]")]
    WeightOutOfRange {
        kind: String,
        name: String,
        value: f64,
    },
    #[error("missing provider role: {0}")]
    MissingProviderRole(String),
    #[error("compression_rounds must be >= 1, got {0}")]
    BadCompressionRounds(u32),
    #[error("provider `{0}` has max_concurrency 0")]
    BadConcurrency(String),
    #[error("duplicate provider id `{0}`")]
    DuplicateProvider(String),
    #[error("log_probability_keep_fraction {0} outside (0, 1]")]
    BadKeepFraction(f64),
    #[error("hard_rejection sampler configured without hard_rejection_pattern")]
    MissingPredicate,
    #[error("hard_rejection_pattern does not compile: {0}")]
    BadPredicate(String),
    #[error("histogram_bins must be >= 1")]
    BadHistogramBins,
    #[error("sweep threshold {0} outside [0, 1] or list not ascending")]
    BadSweepThresholds(f64),
}

/// Every violation found in one pass, not just the first.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigViolations(pub Vec<ConfigViolation>);

impl fmt::Display for ConfigViolations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Checks every config invariant, collecting all violations.
pub fn validate_config(config: &PipelineConfig) -> Result<(), ConfigViolations> {
    let mut violations = Vec::new();

    if !(0.0..=1.0).contains(&config.threshold) || config.threshold.is_nan() {
        violations.push(ConfigViolation::InvalidThreshold(config.threshold));
    }
    if config.compression_rounds < 1 {
        violations.push(ConfigViolation::BadCompressionRounds(
            config.compression_rounds,
        ));
    }
    for (kind, weights) in &config.factor_weights {
        let mut sum = 0.0;
        for (name, &w) in weights {
            if !(0.0..=1.0).contains(&w) || w.is_nan() {
                violations.push(ConfigViolation::WeightOutOfRange {
                    kind: kind.clone(),
                    name: name.clone(),
                    value: w,
                });
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            violations.push(ConfigViolation::WeightsNotNormalized {
                kind: kind.clone(),
                sum,
            });
        }
    }

    let teachers = config.providers.iter().filter(|p| p.role.is_teacher()).count();
    let students = config.providers.iter().filter(|p| p.role.is_student()).count();
    let embedders = config.providers.iter().filter(|p| p.role.is_embedder()).count();
    if teachers == 0 {
        violations.push(ConfigViolation::MissingProviderRole(
            "no teacher provider configured".to_string(),
        ));
    }
    if config.sampler == SamplerStrategy::Confidence {
        if teachers < 2 {
            violations.push(ConfigViolation::MissingProviderRole(
                "diversity selection needs at least two teacher providers".to_string(),
            ));
        }
        if embedders == 0 {
            violations.push(ConfigViolation::MissingProviderRole(
                "diversity selection needs an embedder provider".to_string(),
            ));
        }
    }
    if students == 0 {
        violations.push(ConfigViolation::MissingProviderRole(
            "compression rounds need a student provider".to_string(),
        ));
    }
    let mut ids = std::collections::BTreeSet::new();
    for p in &config.providers {
        if p.max_concurrency == 0 {
            violations.push(ConfigViolation::BadConcurrency(p.id.clone()));
        }
        if !ids.insert(p.id.as_str()) {
            violations.push(ConfigViolation::DuplicateProvider(p.id.clone()));
        }
    }

    match config.sampler {
        SamplerStrategy::LogProbability => {
            let f = config.log_probability_keep_fraction;
            if !(f > 0.0 && f <= 1.0) {
                violations.push(ConfigViolation::BadKeepFraction(f));
            }
        }
        SamplerStrategy::HardRejection => match &config.hard_rejection_pattern {
            None => violations.push(ConfigViolation::MissingPredicate),
            Some(pat) => {
                if let Err(e) = regex::Regex::new(pat) {
                    violations.push(ConfigViolation::BadPredicate(e.to_string()));
                }
            }
        },
        SamplerStrategy::Confidence => {}
    }

    if config.histogram_bins == 0 {
        violations.push(ConfigViolation::BadHistogramBins);
    }
    let mut prev = f64::NEG_INFINITY;
    for &s in &config.sweep_thresholds {
        if !(0.0..=1.0).contains(&s) || s < prev {
            violations.push(ConfigViolation::BadSweepThresholds(s));
            break;
        }
        prev = s;
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(ConfigViolations(violations))
    }
}

/// Mirror of the on-disk TOML layout; prompts are file paths here and are
/// inlined during load.
#[derive(Debug, Deserialize)]
#[serde(default)]
struct ConfigFile {
    #[serde(flatten)]
    base: PipelineConfig,
    prompt_files: PromptFiles,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            base: PipelineConfig::default(),
            prompt_files: PromptFiles::default(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct PromptFiles {
    generation: Option<String>,
    student: Option<String>,
    refinement: Option<String>,
}

impl PipelineConfig {
    /// Loads a TOML config, inlining prompt files (paths resolved relative
    /// to the config file) and validating the result.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: ConfigFile = toml::from_str(&text)?;
        let mut config = file.base;
        let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
        let read_prompt = |rel: &str| -> Result<String, ConfigError> {
            let p = base_dir.join(rel);
            std::fs::read_to_string(&p).map_err(|source| ConfigError::PromptFile {
                path: p.display().to_string(),
                source,
            })
        };
        if let Some(p) = &file.prompt_files.generation {
            config.prompts.generation = read_prompt(p)?;
        }
        if let Some(p) = &file.prompt_files.student {
            config.prompts.student = read_prompt(p)?;
        }
        if let Some(p) = &file.prompt_files.refinement {
            config.prompts.refinement = read_prompt(p)?;
        }
        validate_config(&config)?;
        Ok(config)
    }

    /// Content digest over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::cache::sha256_hex(&json)
    }

    /// Swaps every live provider for its mock counterpart and pins the
    /// global seed. Used by `--mock`.
    pub fn with_mock_providers(mut self, seed: u64) -> Self {
        self.seed = seed;
        for p in &mut self.providers {
            p.role = p.role.mocked();
        }
        self
    }

    pub fn weights_for(&self, kind: TaskKind) -> Option<&BTreeMap<String, f64>> {
        self.factor_weights.get(&kind.to_string())
    }

    pub fn teachers(&self) -> Vec<&ProviderSpec> {
        self.providers.iter().filter(|p| p.role.is_teacher()).collect()
    }

    pub fn student(&self) -> Option<&ProviderSpec> {
        self.providers.iter().find(|p| p.role.is_student())
    }

    pub fn embedder(&self) -> Option<&ProviderSpec> {
        self.providers.iter().find(|p| p.role.is_embedder())
    }

    pub fn provider(&self, id: &str) -> Option<&ProviderSpec> {
        self.providers.iter().find(|p| p.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn teacher(id: &str) -> ProviderSpec {
        ProviderSpec {
            id: id.to_string(),
            role: ProviderRole::MockTeacher,
            endpoint: String::new(),
            model: format!("mock-{id}"),
            auth_env: None,
            request_params: RequestParams::default(),
            max_concurrency: 2,
            max_retries: 0,
            seed: None,
            embedding_dimension: None,
        }
    }

    fn valid_config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.providers = vec![
            teacher("t1"),
            teacher("t2"),
            ProviderSpec {
                role: ProviderRole::MockStudent,
                ..teacher("s1")
            },
            ProviderSpec {
                role: ProviderRole::MockEmbedder,
                ..teacher("e1")
            },
        ];
        c
    }

    #[test]
    fn default_config_matches_shipped_settings() {
        let c = PipelineConfig::default();
        assert_eq!(c.threshold, 0.95);
        let code = c.weights_for(TaskKind::CodeGeneration).unwrap();
        assert_eq!(code.get("correctness"), Some(&0.5));
        assert_eq!(code.get("readability"), Some(&0.2));
        assert_eq!(code.get("efficiency"), Some(&0.2));
        assert_eq!(code.get("coverage"), Some(&0.1));
        let params = RequestParams::default();
        assert_eq!(params.temperature, 0.0);
        assert_eq!(params.max_tokens, 2048);
        assert_eq!(params.top_p, 0.95);
        assert_eq!(c.compression_rounds, 1);
    }

    #[test]
    fn valid_config_passes() {
        assert!(validate_config(&valid_config()).is_ok());
    }

    #[test]
    fn threshold_out_of_range_rejected() {
        let mut c = valid_config();
        c.threshold = 1.4;
        let errs = validate_config(&c).unwrap_err();
        assert!(errs
            .0
            .iter()
            .any(|v| matches!(v, ConfigViolation::InvalidThreshold(_))));
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let mut c = valid_config();
        let mut w = BTreeMap::new();
        // sums to 1.1
        w.insert("a".to_string(), 0.5);
        w.insert("b".to_string(), 0.2);
        w.insert("c".to_string(), 0.2);
        w.insert("d".to_string(), 0.2);
        c.factor_weights.insert("code_generation".to_string(), w);
        let errs = validate_config(&c).unwrap_err();
        assert!(errs
            .0
            .iter()
            .any(|v| matches!(v, ConfigViolation::WeightsNotNormalized { .. })));
    }

    #[test]
    fn all_violations_reported_not_just_first() {
        let mut c = valid_config();
        c.threshold = -0.2;
        c.compression_rounds = 0;
        c.providers.clear();
        let errs = validate_config(&c).unwrap_err();
        assert!(errs.0.len() >= 3, "got {errs:?}");
    }

    #[test]
    fn hard_rejection_requires_pattern() {
        let mut c = valid_config();
        c.sampler = SamplerStrategy::HardRejection;
        c.hard_rejection_pattern = None;
        let errs = validate_config(&c).unwrap_err();
        assert!(errs.0.contains(&ConfigViolation::MissingPredicate));
        c.hard_rejection_pattern = Some("^\\d+$".to_string());
        assert!(validate_config(&c).is_ok());
    }

    #[test]
    fn mock_swap_keeps_ids_and_sets_seed() {
        let mut c = valid_config();
        c.providers[0].role = ProviderRole::Teacher;
        let swapped = c.with_mock_providers(42);
        assert_eq!(swapped.seed, 42);
        assert!(swapped.providers.iter().all(|p| p.role.is_mock()));
        assert_eq!(swapped.providers[0].id, "t1");
    }

    #[test]
    fn effective_seeds_differ_per_provider() {
        let t1 = teacher("t1");
        let t2 = teacher("t2");
        assert_ne!(t1.effective_seed(42), t2.effective_seed(42));
        assert_eq!(t1.effective_seed(42), t1.effective_seed(42));
    }

    #[test]
    fn digest_changes_with_any_field() {
        let a = valid_config();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.threshold = 0.9;
        assert_ne!(a.digest(), b.digest());
    }
}
