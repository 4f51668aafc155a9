//! Service shell around `syncer-core`: configuration, node wiring, the
//! HTTP API, the deterministic scenario runner and in-process receivers.

pub mod api;
pub mod config;
pub mod node;
pub mod receiver;
pub mod scenario;
pub mod service;
pub mod simulation;
