//! Test-time scaling evaluation toolkit.
//!
//! The crate samples and sequentially revises solutions through a
//! chat-completion [`provider`], grades them with the built-in [`answer`]
//! checkers, selects final answers with the [`aggregate`] strategies
//! (Majority Vote, Shortest, Shortest Majority Vote, last revision) and
//! reproduces length, revision and coverage analyses over a persisted
//! [`store`] of runs. The [`simulator`] generates synthetic runs in the same
//! store format, with closed-form expectations for the revision dynamics.
//!
//! Data flows one way:
//!
//! ```text
//! dataset.jsonl ─► orchestrator ─► provider ─► answer::grade ─► store
//!                                                               │
//!                          simulator ──────────────────────────►┤
//!                                                               ▼
//!                                            aggregate / analysis ─► CSV
//! ```

pub mod aggregate;
pub mod analysis;
pub mod answer;
pub mod config;
pub mod orchestrator;
pub mod provider;
pub mod seed;
pub mod simulator;
pub mod store;
pub mod types;

pub use aggregate::{AggregateError, Aggregator, AnswerCategory, Categories};
pub use answer::{Canonical, NormalizedAnswer};
pub use config::RunConfig;
pub use simulator::SimParams;
pub use types::{
    AnswerKind, GenerationRecord, Grade, Question, RecordError, RevisionChain, RevisionStep,
};
