//! Component-based API synthesis pipeline.
//!
//! Stages: validation-oracle generation ([`oracle`]), prompt rendering
//! ([`prompt`]), prompt optimization by beam search over LLM-proposed edits
//! ([`apo`]), and GRPO fine-tuning with verifiable test rewards ([`rlvr`]).
//! Candidates are judged by running them through an execution shim
//! ([`sandbox`]); every stage logs to an append-only run store ([`store`]).

pub mod apo;
pub mod bench;
pub mod llm;
pub mod oracle;
pub mod prompt;
pub mod rlvr;
pub mod sandbox;
pub mod store;
pub mod stub_shim;
pub mod task;
