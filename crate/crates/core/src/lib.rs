//! Deterministic triage-and-audit pipeline for Modbus/TCP traffic.
//!
//! The pipeline ingests captures and attack logs, renders each frame as a
//! compact six-field token string under train-frozen discretization, runs a
//! prompt-configured (or rule-based, or scored-baseline) classifier, emits a
//! second-pass audit record per decision, and evaluates the record with
//! intervention probes plus full metric/latency/cost reporting.

pub mod artifact;
pub mod audit;
pub mod classify;
pub mod config;
pub mod encode;
pub mod ingest;
pub mod labelsplit;
pub mod probes;
pub mod report;
pub mod stage;
pub mod types;

pub use config::{Backend, RunConfig};
pub use stage::{run_stage, Stage, StageError, StageOutput};
pub use types::{Direction, FrameId, Label, Partition};
