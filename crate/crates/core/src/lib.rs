//! distillery-core: a distillation-dataset factory.
//!
//! Builds SFT-ready datasets from unlabeled queries in two phases. First,
//! multiple teacher models produce rationale/label/confidence annotations,
//! which pass through dual-criteria rejection sampling: a confidence
//! threshold keeps high-quality annotations, then per query the two most
//! dissimilar rationales (by embedding cosine similarity) keep the set
//! diverse. Second, the selected set is serialized into staged training
//! datasets: full reasoning, teacher-compressed reasoning (guided by a
//! student model's own responses, for one or more rounds), and
//! reasoning-free.
//!
//! Everything runs against live OpenAI-compatible endpoints or seeded
//! in-process mocks; responses are cached content-addressed so re-runs and
//! resumed runs are byte-identical.

pub mod cache;
pub mod config;
pub mod dcrs;
pub mod embed;
pub mod gateway;
pub mod manifest;
pub mod model;
pub mod report;
pub mod stages;

pub use config::{validate_config, PipelineConfig, ProviderRole, ProviderSpec, SamplerStrategy};
pub use model::{
    DistillationSample, DistillationSet, Query, Stage, StageDataset, StudentResponse, TaskKind,
    TeacherAnnotation,
};
pub use stages::{Pipeline, StageError};
