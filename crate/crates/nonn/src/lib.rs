//! Std companion to `nonn-core`: binary and JSON file formats, the TCP
//! coordinator/worker runtime, and the pipeline configuration used by the
//! `nonn` binary.

pub mod config;
pub mod formats;
pub mod runtime;
pub mod wire;

pub use nonn_core as core;
