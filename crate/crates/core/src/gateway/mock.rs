//! Deterministic in-process providers.
//!
//! Every mock is a pure function of (seed, rendered prompt): the prompt is
//! hashed together with the seed into a stream cipher RNG, so identical
//! requests always produce byte-identical replies and no state is carried
//! between calls.
//!
//! Mocks understand the anchor lines of the shipped templates (`Kind:`,
//! `Task:`, `Original reasoning:`, `Student response:`). A prompt carrying
//! both refinement anchors is answered as a refinement request; anything
//! else is answered as a task request. When anchors are absent the whole
//! prompt stands in for the task text, which keeps the mocks total but
//! makes their sizing less meaningful under custom templates.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cache::stable_hash64_parts;
use crate::model::TaskKind;

use super::{ChatBackend, EmbedBackend, GatewayError, ProviderReply};

/// Default vector width of the mock embedder.
pub const DEFAULT_MOCK_EMBED_DIM: usize = 64;

/// Fraction of mock teacher outputs drawn from the high-quality mode.
const GOOD_MODE_PROBABILITY: f64 = 0.6;

const WORD_POOL: &[&str] = &[
    "first", "we", "note", "the", "input", "then", "check", "each", "case", "and", "track",
    "every", "value", "before", "computing", "a", "result", "this", "holds", "because", "any",
    "valid", "step", "keeps", "its", "bound", "so", "loop", "over", "items", "while", "updating",
    "state", "next", "compare", "against", "target", "which", "gives", "needed", "answer",
    "finally", "verify", "with", "sample", "tests", "that", "confirm", "behavior", "stays",
    "correct", "under", "edge", "conditions", "therefore", "return", "computed", "outcome",
    "after", "handling", "empty", "inputs", "as", "well",
];

fn rng_for(seed: u64, prompt: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash64_parts(&[
        &seed.to_le_bytes(),
        prompt.as_bytes(),
    ]))
}

/// Task length in whitespace tokens, a pure function of the task text so
/// every mock sizing decision for one query agrees across providers.
pub fn base_rationale_tokens(task_text: &str) -> usize {
    60 + (crate::cache::stable_hash64(task_text.as_bytes()) % 121) as usize
}

fn anchor_line<'a>(prompt: &'a str, anchor: &str) -> Option<&'a str> {
    let start = prompt.find(anchor)? + anchor.len();
    let rest = &prompt[start..];
    let end = rest.find('\n').unwrap_or(rest.len());
    Some(rest[..end].trim())
}

fn anchor_block<'a>(prompt: &'a str, anchor: &str) -> Option<&'a str> {
    let start = prompt.find(anchor)? + anchor.len();
    let rest = &prompt[start..];
    let end = rest.find("\n\n").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

fn task_text(prompt: &str) -> &str {
    anchor_block(prompt, "Task:").unwrap_or(prompt)
}

fn task_kind(prompt: &str) -> TaskKind {
    match anchor_line(prompt, "Kind:") {
        Some("code_generation") => TaskKind::CodeGeneration,
        Some("multiple_choice") => TaskKind::MultipleChoice,
        Some("math") => TaskKind::Math,
        _ => TaskKind::Other,
    }
}

fn words(rng: &mut ChaCha8Rng, count: usize) -> String {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(WORD_POOL[rng.random_range(0..WORD_POOL.len())]);
    }
    out.join(" ")
}

fn label_block(rng: &mut ChaCha8Rng, kind: TaskKind) -> String {
    match kind {
        TaskKind::CodeGeneration => {
            let op = ["+", "-", "*"][rng.random_range(0..3)];
            let k: u32 = rng.random_range(1..100);
            format!("```python\ndef solve(x):\n    return x {op} {k}\n```")
        }
        TaskKind::MultipleChoice => {
            let letter = ["A", "B", "C", "D"][rng.random_range(0..4)];
            format!("Answer: {letter}")
        }
        TaskKind::Math => format!("Answer: {}", rng.random_range(0..1000)),
        TaskKind::Other => format!(
            "Answer: {}",
            WORD_POOL[rng.random_range(0..WORD_POOL.len())]
        ),
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// A seeded stand-in for a teacher endpoint.
///
/// Task prompts get an n-token rationale (n fixed by the task text), an
/// answer block, a `factors:` breakdown, and a `score:` line whose value is
/// the weighted combination of the factors. Scores are bimodal: a
/// high-quality mode near 0.97 and a low-quality mode near 0.6, so
/// threshold sweeps show a knee and quality selection exercises both
/// outcomes.
///
/// Refinement prompts are answered by truncating the original reasoning to
/// the student's token count (and always at least one token below the
/// original, so repeated rounds keep shrinking).
pub struct MockTeacher {
    seed: u64,
    /// Factor weights keyed by task kind name.
    factor_weights: BTreeMap<String, BTreeMap<String, f64>>,
}

impl MockTeacher {
    pub fn new(seed: u64, factor_weights: BTreeMap<String, BTreeMap<String, f64>>) -> Self {
        Self {
            seed,
            factor_weights,
        }
    }

    fn refine(&self, prompt: &str) -> Option<ProviderReply> {
        let original = anchor_block(prompt, "Original reasoning:")?;
        // the student section runs to the end of the prompt
        let student_start = prompt.find("Student response:")? + "Student response:".len();
        let student = prompt[student_start..].trim();
        let orig_tokens: Vec<&str> = original.split_whitespace().collect();
        let student_len = student.split_whitespace().count();
        let keep = orig_tokens.len().saturating_sub(1).min(student_len).max(1);
        let text = orig_tokens[..keep.min(orig_tokens.len())].join(" ");
        let tokens = text.split_whitespace().count();
        Some(ProviderReply {
            raw_text: text,
            completion_tokens: Some(tokens),
            mean_logprob: None,
        })
    }

    fn generate(&self, prompt: &str) -> ProviderReply {
        let mut rng = rng_for(self.seed, prompt);
        let task = task_text(prompt);
        let kind = task_kind(prompt);
        let n = base_rationale_tokens(task);
        let reasoning = words(&mut rng, n);
        let label = label_block(&mut rng, kind);

        let good = rng.random::<f64>() < GOOD_MODE_PROBABILITY;
        let (lo, hi) = if good { (0.94, 1.0) } else { (0.40, 0.80) };
        let default_weights: BTreeMap<String, f64> =
            [("correctness".to_string(), 1.0)].into_iter().collect();
        let weights = self
            .factor_weights
            .get(&kind.to_string())
            .unwrap_or(&default_weights);
        let mut factors = Vec::with_capacity(weights.len());
        let mut confidence = 0.0;
        for (name, &w) in weights {
            let value = round2(rng.random_range(lo..hi));
            confidence += w * value;
            factors.push(format!("{name}={value:.2}"));
        }
        let confidence = round2(confidence);
        let mean_logprob = -(rng.random_range(0.1f64..2.0) * 10000.0).round() / 10000.0;

        let raw_text = format!(
            "{reasoning}\n\n{label}\n\nfactors: {}\nscore: {confidence:.2}\n",
            factors.join(", ")
        );
        let completion_tokens = raw_text.split_whitespace().count();
        ProviderReply {
            raw_text,
            completion_tokens: Some(completion_tokens),
            mean_logprob: Some(mean_logprob),
        }
    }
}

impl ChatBackend for MockTeacher {
    fn complete(&self, prompt: &str) -> Result<ProviderReply, GatewayError> {
        if let Some(reply) = self.refine(prompt) {
            return Ok(reply);
        }
        Ok(self.generate(prompt))
    }
}

/// A seeded stand-in for the distilled student: answers the same tasks with
/// half the teacher's rationale length (rounded up) and no self-score.
pub struct MockStudent {
    seed: u64,
}

impl MockStudent {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl ChatBackend for MockStudent {
    fn complete(&self, prompt: &str) -> Result<ProviderReply, GatewayError> {
        let mut rng = rng_for(self.seed, prompt);
        let task = task_text(prompt);
        let kind = task_kind(prompt);
        let n = base_rationale_tokens(task);
        let reasoning = words(&mut rng, n.div_ceil(2));
        let label = label_block(&mut rng, kind);
        let raw_text = format!("{reasoning}\n\n{label}\n");
        let completion_tokens = raw_text.split_whitespace().count();
        Ok(ProviderReply {
            raw_text,
            completion_tokens: Some(completion_tokens),
            mean_logprob: None,
        })
    }
}

/// A seeded hash-projection embedder: each text maps to a unit vector of
/// the configured dimension.
pub struct MockEmbedder {
    seed: u64,
    dimension: usize,
}

impl MockEmbedder {
    pub fn new(seed: u64, dimension: usize) -> Self {
        Self { seed, dimension }
    }
}

impl EmbedBackend for MockEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            let mut rng = rng_for(self.seed, text);
            let raw: Vec<f64> = (0..self.dimension)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.push(raw.iter().map(|x| (x / norm) as f32).collect());
        }
        Ok(out)
    }
}
