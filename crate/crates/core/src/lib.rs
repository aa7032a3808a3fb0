//! Biomedical entity linking pipeline.
//!
//! Mentions are linked to knowledge-base entities in three stages:
//!
//! 1. dense candidate retrieval by inner product over precomputed embeddings
//!    ([`retriever`], backed by [`embedstore`]);
//! 2. listwise re-ranking of the candidates by a chat-completion "teacher"
//!    model ([`promptkit`], [`teacher`], [`rankparse`]), whose rankings are
//!    emitted as an instruction-tuning dataset ([`distillgen`]);
//! 3. evaluation of any re-ranking backend, including a locally served
//!    student fine-tuned on that dataset ([`evalharness`]).
//!
//! Every stage is deterministic given its inputs and a warm response cache.

pub mod config;
pub mod corpus;
pub mod distillgen;
pub mod embedstore;
pub mod evalharness;
pub mod promptkit;
pub mod rankparse;
pub mod retriever;
pub mod teacher;

mod error;

pub use error::{Error, Result};
