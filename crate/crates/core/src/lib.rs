//! Trace-driven performance prediction for multi-GPU ML training.
//!
//! The crate is organized as a pipeline:
//!
//! * [`trace`] — the per-rank execution-trace data model: parsing,
//!   validation, dependency queries, and synthetic trace generation.
//! * [`comm`] — a three-region piecewise latency model for all-to-all and
//!   all-reduce collectives, plus the curve fitter over microbenchmark
//!   samples.
//! * [`kernels`] — per-kernel latency prediction: reuse-factor extraction,
//!   an MLP cost model for embedding lookups and other learned ops, a
//!   roofline model for elementwise ops, and the registry dispatching a
//!   kernel call to a predicted latency.
//! * [`sim`] — the multi-rank critical-path simulator with inter-rank and
//!   intra-rank synchronization, a naive baseline predictor, and an
//!   independent event-queue oracle.
//! * [`sharding`] — embedding-table sharders, greedy cost-based assignment,
//!   and fastest-config selection through the simulator.
//! * [`metrics`] — GMAE/MAPE prediction-error metrics.
//!
//! Data-parallel entry points (fit restarts, candidate evaluation, world
//! sweeps) run on rayon when the `parallel` feature is enabled (default) and
//! fall back to sequential execution otherwise; results are identical either
//! way.

pub mod comm;
pub mod kernels;
pub mod metrics;
pub mod par;
pub mod sharding;
pub mod sim;
pub mod synth;
pub mod trace;

pub use kernels::{KernelError, LatencyModel, ModelRegistry};
pub use sim::{baseline_predict, oracle_simulate, simulate, PredictionReport};
pub use trace::ExecutionTrace;
