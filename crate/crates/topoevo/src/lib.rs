//! Topology-aware root cause analysis for microservice incidents.
//!
//! The pipeline: a fault-propagation simulator produces labeled incidents
//! over a dependency graph; multimodal encoders turn telemetry into entity
//! features; a contrastively aligned GAT localizer ranks root-cause
//! candidates and classifies fault types; topology-aware states are
//! quantized into an auditable symptom lexicon; a hypothesis-evidence-test
//! engine verifies propagation-consistent explanations; and an evolving
//! memory with conservative test-time adaptation keeps the model useful
//! under topology drift.

#![forbid(unsafe_code)]

pub mod tensor;
pub mod params;
pub mod stats;
pub mod graph;
pub mod sim;
pub mod encoders;
pub mod align;
pub mod localizer;
pub mod vq;
pub mod lexicon;
pub mod het;
pub mod memory;
pub mod eval;
pub mod harness;
