//! Sparse-attention budget allocation and head-parallel load balancing.
//!
//! The pipeline runs per attention layer:
//!
//! 1. [`attention`]: exact and top-k sparse attention plus the recovery ratio.
//! 2. [`profiler`]: per-head recovery curves, synthetic workloads, profile files.
//! 3. [`allocator`]: distributes a global token budget across heads.
//! 4. [`partitioner`]: places heads on devices and measures load imbalance.
//! 5. [`simulator`]: turns device loads into barrier latency.
//!
//! [`experiment`] wires these together for the command-line driver.

pub mod allocator;
pub mod attention;
pub mod experiment;
pub mod partitioner;
pub mod profiler;
pub mod simulator;
