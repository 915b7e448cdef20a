//! Barrier-synchronized execution of one head-parallel attention layer.
//!
//! Device `d` finishes after `α + β·L_d`; the next module starts only when every
//! device is done, so the layer takes `max_d t_d` and the remainder is idle bubble.

use crate::allocator::{AllocationError, AllocatorChoice, AllocatorConfig};
use crate::attention::SelectionPolicy;
use crate::partitioner::{
    greedy_assign, imbalance, naive_assign, Assignment, LoadReport, PartitionError,
};
use crate::profiler::{
    budget_grid, build_profiles, generate_workload, Exponents, ProfileError, Provenance,
    SyntheticWorkloadSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid cost model: {0}")]
    CostModel(String),
    #[error("candidate {name:?} covers {found} heads, budgets cover {expected}")]
    HeadSetMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("nothing to compare")]
    Empty,
    #[error("sweep: {0}")]
    Sweep(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Affine latency model, milliseconds (or abstract units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Fixed per-device overhead, ≥ 0.
    pub alpha: f64,
    /// Cost per budget token, > 0.
    pub beta: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 1.0,
        }
    }
}

impl CostModel {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, SimulationError> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(SimulationError::CostModel(format!(
                "alpha must be finite and >= 0, got {alpha}"
            )));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(SimulationError::CostModel(format!(
                "beta must be finite and > 0, got {beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn latency(&self, load: u64) -> f64 {
        self.alpha + self.beta * load as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub device_latency: Vec<f64>,
    /// Slowest device; when the downstream module can start.
    pub barrier_latency: f64,
    /// `1 − mean(t_d) / T`; 0 when every device finishes together.
    pub bubble_fraction: f64,
}

impl SimulationResult {
    /// `reference.T / self.T`.
    pub fn speedup_over(&self, reference: &SimulationResult) -> f64 {
        if self.barrier_latency == reference.barrier_latency {
            1.0
        } else {
            reference.barrier_latency / self.barrier_latency
        }
    }
}

pub fn simulate(report: &LoadReport, cost: &CostModel) -> SimulationResult {
    let device_latency: Vec<f64> = report.loads.iter().map(|&l| cost.latency(l)).collect();
    let barrier_latency = device_latency.iter().copied().fold(0.0, f64::max);
    let mean = device_latency.iter().sum::<f64>() / device_latency.len() as f64;
    let bubble_fraction = if barrier_latency > 0.0 {
        (1.0 - mean / barrier_latency).max(0.0)
    } else {
        0.0
    };
    SimulationResult {
        device_latency,
        barrier_latency,
        bubble_fraction,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub barrier_latency: f64,
    pub bubble_fraction: f64,
    pub imbalance: f64,
    /// Relative to the first candidate.
    pub speedup: f64,
}

/// Simulates each named placement of the same heads; speedups are relative to the first.
pub fn compare(
    candidates: &[(String, Assignment)],
    budgets: &[u64],
    cost: &CostModel,
) -> Result<Vec<ComparisonRow>, SimulationError> {
    if candidates.is_empty() {
        return Err(SimulationError::Empty);
    }
    let mut results = Vec::with_capacity(candidates.len());
    for (name, assignment) in candidates {
        if assignment.head_count() != budgets.len() {
            return Err(SimulationError::HeadSetMismatch {
                name: name.clone(),
                expected: budgets.len(),
                found: assignment.head_count(),
            });
        }
        let report = imbalance(budgets, assignment)?;
        results.push((name, simulate(&report, cost), report.imbalance));
    }
    let reference = results[0].1.clone();
    Ok(results
        .into_iter()
        .map(|(name, sim, imbalance)| ComparisonRow {
            name: name.clone(),
            barrier_latency: sim.barrier_latency,
            bubble_fraction: sim.bubble_fraction,
            imbalance,
            speedup: sim.speedup_over(&reference),
        })
        .collect())
}

/// Fixed parameters of a parallelism × context-length sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub degrees: Vec<usize>,
    pub context_lengths: Vec<usize>,
    pub heads: usize,
    pub queries: usize,
    pub head_dim: usize,
    /// A range is sampled once and shared by every context length.
    pub exponents: Exponents,
    pub noise: f64,
    pub allocator: AllocatorChoice,
    pub allocator_config: AllocatorConfig,
    /// Total budget as a fraction of `heads · n_k`.
    pub budget_fraction: f64,
    pub policy: SelectionPolicy,
    pub grid_step: usize,
    pub cost: CostModel,
    pub seed: u64,
}

/// One CSV row of a sweep. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub degree: usize,
    pub context_length: usize,
    pub allocator: String,
    pub assigner: String,
    pub barrier_latency: f64,
    pub bubble_fraction: f64,
    pub imbalance: f64,
    pub speedup_vs_naive: f64,
}

/// Generates, profiles and allocates one layer per context length, then simulates
/// naive and greedy placement at every degree. Two rows per (degree, length).
///
/// Head exponents are drawn once and shared by every context length; each length
/// gets its own workload seed. All randomness comes from `config.seed`.
pub fn sweep(config: &SweepConfig) -> Result<Vec<SweepRow>, SimulationError> {
    if config.degrees.is_empty() || config.context_lengths.is_empty() {
        return Err(SimulationError::Sweep(
            "needs at least one degree and one context length".into(),
        ));
    }
    if let Some(d) = config.degrees.iter().find(|&&d| d == 0) {
        return Err(SimulationError::Sweep(format!(
            "degree {d} must be at least 1"
        )));
    }
    if !(config.budget_fraction > 0.0 && config.budget_fraction <= 1.0) {
        return Err(SimulationError::Sweep(format!(
            "budget fraction {} outside (0, 1]",
            config.budget_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let exponents: Vec<f64> = match &config.exponents {
        Exponents::Range { min, max } => (0..config.heads)
            .map(|_| {
                if max > min {
                    rng.random_range(*min..=*max)
                } else {
                    *min
                }
            })
            .collect(),
        Exponents::Fixed(list) => list.clone(),
    };

    let mut rows = Vec::new();
    for &n_k in &config.context_lengths {
        let spec = SyntheticWorkloadSpec {
            layer: 0,
            heads: config.heads,
            context_length: n_k,
            queries: config.queries,
            head_dim: config.head_dim,
            exponents: Exponents::Fixed(exponents.clone()),
            noise: config.noise,
            seed: rng.random(),
        };
        let workload = generate_workload(&spec)?;
        let provenance = Provenance::new(format!("sweep-n{n_k}"), "synthetic");
        let profiles = build_profiles(
            &workload,
            &budget_grid(n_k, config.grid_step),
            config.policy,
            &provenance,
        )?;
        let curves: Vec<_> = profiles.into_iter().map(|p| p.curve).collect();
        let total = (config.budget_fraction * (config.heads * n_k) as f64).round() as usize;
        let (allocation, _) =
            config
                .allocator
                .allocate(&curves, total, &config.allocator_config)?;
        let budgets: Vec<u64> = allocation.budgets().iter().map(|&b| b as u64).collect();

        for &degree in &config.degrees {
            let candidates = [
                ("naive".to_string(), naive_assign(&budgets, degree)?),
                ("greedy".to_string(), greedy_assign(&budgets, degree)?),
            ];
            for row in compare(&candidates, &budgets, &config.cost)? {
                rows.push(SweepRow {
                    degree,
                    context_length: n_k,
                    allocator: config.allocator.to_string(),
                    assigner: row.name,
                    barrier_latency: row.barrier_latency,
                    bubble_fraction: row.bubble_fraction,
                    imbalance: row.imbalance,
                    speedup_vs_naive: row.speedup,
                });
            }
        }
    }
    Ok(rows)
}
