//! Deterministic discrete-event simulator for serverless computing clusters.
//!
//! Models function containers on a fixed VM fleet under two execution
//! architectures (scale-per-request and request-concurrency), with pluggable
//! load-balancing, container placement, and horizontal/vertical auto-scaling
//! policies. Runs are fully reproducible for a given scenario and seed.

pub mod autoscaler;
pub mod cluster;
pub mod config;
pub mod engine;
pub mod loadbalancer;
pub mod metrics;
pub mod output;
pub mod scheduler;
pub mod simulation;
pub mod workload;
