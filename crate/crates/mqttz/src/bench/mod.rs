//! Measurement harness: re-encryption micro-benchmark with phase
//! breakdown, key-cache lookup experiment, dissemination-delay
//! macro-benchmarks, subscriber scaling, and the hospital-floor
//! telemetry workload. Scenarios emit pinned CSV schemas and carry
//! their own pass/fail assertions so the CLI can exit nonzero on a
//! regression.

pub mod harness;
pub mod latency;
pub mod medtech;
pub mod micro;
pub mod stats;

pub use harness::{BenchEnv, BenchError, BrokerSpawn, BrokerUnderTest};
