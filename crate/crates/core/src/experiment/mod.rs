//! Command implementations behind the `headload` binary.
//!
//! Each command reads an [`ExperimentConfig`], writes its result files into the output
//! directory and returns a human-readable report for stdout. Identical configuration
//! and seed give byte-identical files.

mod config;

pub use config::{Budget, ExperimentConfig, Overrides, Source, SweepSettings};

use crate::allocator::{
    load_allocation, save_allocation, AllocationError, AllocatorChoice, BudgetAllocation,
};
use crate::attention::{
    dense_attention, output_error, sparse_attention, AttentionError, AttentionOutput,
    AttentionWorkload, Matrix, Selection,
};
use crate::partitioner::{
    assignment_to_json, greedy_assign, imbalance, naive_assign, Assigner, LoadReport,
    PartitionError,
};
use crate::profiler::{
    budget_for_recovery, budget_grid, build_profiles, generate_workload, load_profiles,
    normalized_budgets, save_profiles, HeadId, HeadProfile, ProfileError, Provenance,
    RecoveryCurve, SyntheticWorkloadSpec,
};
use crate::simulator::{simulate, sweep, SimulationError, SweepConfig};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const PROFILES_FILE: &str = "profiles.json";
pub const ALLOCATION_FILE: &str = "allocation.json";
pub const ASSIGNMENT_FILE: &str = "assignment.json";
pub const SKYLINE_FILE: &str = "skyline.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Bad configuration or unusable input file.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

impl ExperimentError {
    /// Process exit status: 2 for configuration errors, 3 for everything at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            _ => 3,
        }
    }
}

/// Subcommands of the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Profile,
    Allocate,
    Partition,
    Skyline,
    Sweep,
}

pub fn run(command: Command, config: &ExperimentConfig) -> Result<String, ExperimentError> {
    match command {
        Command::Profile => cmd_profile(config),
        Command::Allocate => cmd_allocate(config),
        Command::Partition => cmd_partition(config),
        Command::Skyline => cmd_skyline(config),
        Command::Sweep => cmd_sweep(config),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn synthetic_spec(config: &ExperimentConfig) -> Result<SyntheticWorkloadSpec, ExperimentError> {
    match &config.source {
        Source::Synthetic(spec) => Ok(SyntheticWorkloadSpec {
            seed: config.require_seed()?,
            ..spec.clone()
        }),
        Source::ProfileFile(path) => Err(ExperimentError::Config(format!(
            "this command needs a synthetic workload, but workload.profile_file is set ({})",
            path.display()
        ))),
    }
}

fn profile_workload(
    workload: &AttentionWorkload,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<HeadProfile>, ExperimentError> {
    let grid = budget_grid(workload.context_length(), config.grid_step);
    let provenance = Provenance::new(format!("synthetic-seed{seed}"), "synthetic");
    Ok(build_profiles(workload, &grid, config.policy, &provenance)?)
}

/// Profiles from the configured file, or from a freshly generated workload.
fn obtain_profiles(config: &ExperimentConfig) -> Result<Vec<HeadProfile>, ExperimentError> {
    match &config.source {
        Source::ProfileFile(path) => {
            load_profiles(path).map_err(|e| ExperimentError::Config(e.to_string()))
        }
        Source::Synthetic(_) => {
            let spec = synthetic_spec(config)?;
            let workload = generate_workload(&spec)?;
            profile_workload(&workload, config, spec.seed)
        }
    }
}

fn curves_of(profiles: Vec<HeadProfile>) -> Vec<RecoveryCurve> {
    profiles.into_iter().map(|p| p.curve).collect()
}

fn total_budget(budget: Budget, curves: &[RecoveryCurve]) -> usize {
    let n_k = curves.first().map_or(0, |c| c.context_length());
    budget.resolve(curves.len(), n_k)
}

/// Writes the profile file and returns the per-head budget table.
pub fn cmd_profile(config: &ExperimentConfig) -> Result<String, ExperimentError> {
    let profiles = obtain_profiles(config)?;
    let path = config.out_path(PROFILES_FILE);
    save_profiles(&path, &profiles)?;

    let normalized = normalized_budgets(&profiles, config.target, config.normalization)?;
    let mut report = String::new();
    let target = config.target;
    writeln!(
        report,
        "{:<10} {:>12} {:>10}",
        "head",
        format!("budget@{target}"),
        "normalized"
    )
    .unwrap();
    let mut budgets = Vec::with_capacity(profiles.len());
    for (profile, norm) in profiles.iter().zip(&normalized) {
        let b = budget_for_recovery(&profile.curve, target)?;
        budgets.push(b);
        writeln!(
            report,
            "{:<10} {:>12} {:>10.4}",
            profile.id().to_string(),
            b,
            norm
        )
        .unwrap();
    }
    let (lo, hi) = (budgets.iter().min().copied(), budgets.iter().max().copied());
    if let (Some(lo), Some(hi)) = (lo, hi) {
        if lo > 0 {
            writeln!(report, "spread (max/min): {:.4}", hi as f64 / lo as f64).unwrap();
        } else {
            writeln!(report, "spread (max/min): inf").unwrap();
        }
    }
    writeln!(report, "wrote {}", path.display()).unwrap();
    Ok(report)
}

fn allocate(
    config: &ExperimentConfig,
    choice: AllocatorChoice,
    curves: &[RecoveryCurve],
    total: usize,
) -> Result<(BudgetAllocation, usize, Option<String>), ExperimentError> {
    let (allocation, outcome) = choice.allocate(curves, total, &config.allocator_config)?;
    let (transfers, stop) = match outcome {
        Some(o) => (o.transfers.len(), Some(o.stop.to_string())),
        None => (0, None),
    };
    Ok((allocation, transfers, stop))
}

/// Writes the allocation file and returns a recovery summary.
pub fn cmd_allocate(config: &ExperimentConfig) -> Result<String, ExperimentError> {
    let curves = curves_of(obtain_profiles(config)?);
    let total = total_budget(config.budget, &curves);
    let (allocation, transfers, stop) = allocate(config, config.allocator, &curves, total)?;
    let path = config.out_path(ALLOCATION_FILE);
    save_allocation(&path, &allocation)?;

    let mut report = String::new();
    writeln!(report, "allocator: {}", config.allocator).unwrap();
    writeln!(
        report,
        "total: {}  floor: {}",
        allocation.total(),
        allocation.floor()
    )
    .unwrap();
    writeln!(
        report,
        "min recovery: {:.6}",
        allocation.min_recovery(&curves)
    )
    .unwrap();
    writeln!(
        report,
        "mean recovery: {:.6}",
        allocation.mean_recovery(&curves)
    )
    .unwrap();
    match stop {
        Some(stop) => writeln!(report, "transfers: {transfers} (stopped: {stop})").unwrap(),
        None => writeln!(report, "transfers: 0").unwrap(),
    }
    writeln!(report, "{:<10} {:>8} {:>10}", "head", "budget", "recovery").unwrap();
    for ((id, &b), r) in allocation
        .heads()
        .iter()
        .zip(allocation.budgets())
        .zip(allocation.recoveries(&curves))
    {
        writeln!(report, "{:<10} {:>8} {:>10.6}", id.to_string(), b, r).unwrap();
    }
    writeln!(report, "wrote {}", path.display()).unwrap();
    Ok(report)
}

fn as_loads(budgets: &[usize]) -> Vec<u64> {
    budgets.iter().map(|&b| b as u64).collect()
}

/// Writes one assignment file per device count and returns the load report.
///
/// With a single device count the file is `assignment.json`, otherwise
/// `assignment_d{K}.json` for each count `K`.
pub fn cmd_partition(config: &ExperimentConfig) -> Result<String, ExperimentError> {
    let allocation = match &config.allocation_file {
        Some(path) => load_allocation(path).map_err(|e| ExperimentError::Config(e.to_string()))?,
        None => {
            let curves = curves_of(obtain_profiles(config)?);
            let total = total_budget(config.budget, &curves);
            allocate(config, config.allocator, &curves, total)?.0
        }
    };
    let heads: Vec<HeadId> = allocation.heads().to_vec();
    let loads = as_loads(allocation.budgets());

    let mut report = String::new();
    for &devices in &config.devices {
        let assignment = config.assigner.assign(&loads, devices)?;
        let load_report = imbalance(&loads, &assignment)?;
        let name = if config.devices.len() == 1 {
            ASSIGNMENT_FILE.to_string()
        } else {
            format!("assignment_d{devices}.json")
        };
        let path = config.out_path(&name);
        write_file(
            &path,
            assignment_to_json(&heads, &assignment, &load_report).as_bytes(),
        )?;
        describe_placement(&mut report, config, devices, &load_report);
        if config.assigner == Assigner::Optimal {
            let greedy = imbalance(&loads, &greedy_assign(&loads, devices)?)?;
            if greedy.max_load > load_report.max_load {
                writeln!(
                    report,
                    "  LPT suboptimal: greedy max load {} (imbalance {}) vs optimal {} (imbalance {})",
                    greedy.max_load, greedy.imbalance, load_report.max_load, load_report.imbalance
                )
                .unwrap();
            } else {
                writeln!(report, "  greedy matches the optimum").unwrap();
            }
        }
        writeln!(report, "  wrote {}", path.display()).unwrap();
    }
    Ok(report)
}

fn describe_placement(
    report: &mut String,
    config: &ExperimentConfig,
    devices: usize,
    loads: &LoadReport,
) {
    let sim = simulate(loads, &config.cost);
    writeln!(report, "devices: {devices} ({})", config.assigner).unwrap();
    writeln!(report, "  loads: {:?}", loads.loads).unwrap();
    writeln!(report, "  imbalance: {}", loads.imbalance).unwrap();
    writeln!(
        report,
        "  barrier latency: {}  bubble fraction: {:.6}",
        sim.barrier_latency, sim.bubble_fraction
    )
    .unwrap();
}

/// One row of `skyline.csv`. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkylineRow {
    pub total_budget: usize,
    pub allocator: String,
    pub mean_output_error: f64,
    pub min_recovery: f64,
    /// Greedy placement on the first configured device count.
    pub barrier_latency: f64,
    pub naive_barrier_latency: f64,
}

/// Accuracy and latency of uniform and max–min allocation across the configured budgets.
pub fn skyline_rows(config: &ExperimentConfig) -> Result<Vec<SkylineRow>, ExperimentError> {
    let spec = synthetic_spec(config)?;
    let workload = generate_workload(&spec)?;
    let dense: Vec<AttentionOutput> = workload
        .heads()
        .iter()
        .map(|h| dense_attention(h).1)
        .collect();
    let curves = curves_of(profile_workload(&workload, config, spec.seed)?);
    let devices = config.devices[0];

    let mut rows = Vec::new();
    for &budget in &config.skyline {
        let total = total_budget(budget, &curves);
        for choice in [AllocatorChoice::Uniform, AllocatorChoice::MaxMin] {
            let (allocation, _, _) = allocate(config, choice, &curves, total)?;
            let mut error_sum = 0.0;
            for ((head, &b), reference) in workload
                .heads()
                .iter()
                .zip(allocation.budgets())
                .zip(&dense)
            {
                let sparse = if b == 0 {
                    AttentionOutput::new(Matrix::zeros(head.query_count(), head.head_dim()))
                } else {
                    sparse_attention(
                        head,
                        Selection {
                            policy: config.policy,
                            budget: b,
                        },
                    )?
                };
                error_sum += output_error(&sparse, reference)?;
            }
            let loads = as_loads(allocation.budgets());
            let greedy = simulate(
                &imbalance(&loads, &greedy_assign(&loads, devices)?)?,
                &config.cost,
            );
            let naive = simulate(
                &imbalance(&loads, &naive_assign(&loads, devices)?)?,
                &config.cost,
            );
            rows.push(SkylineRow {
                total_budget: allocation.total(),
                allocator: choice.to_string(),
                mean_output_error: error_sum / curves.len() as f64,
                min_recovery: allocation.min_recovery(&curves),
                barrier_latency: greedy.barrier_latency,
                naive_barrier_latency: naive.barrier_latency,
            });
        }
    }
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        source: e.into_error(),
    })?;
    write_file(path, &bytes)
}

/// Writes `skyline.csv`.
pub fn cmd_skyline(config: &ExperimentConfig) -> Result<String, ExperimentError> {
    let rows = skyline_rows(config)?;
    let path = config.out_path(SKYLINE_FILE);
    write_csv(&path, &rows)?;
    let mut report = String::new();
    writeln!(
        report,
        "{:>12} {:>10} {:>12} {:>10} {:>10} {:>10}",
        "total", "allocator", "mean_error", "min_rec", "greedy_T", "naive_T"
    )
    .unwrap();
    for r in &rows {
        writeln!(
            report,
            "{:>12} {:>10} {:>12.6} {:>10.6} {:>10} {:>10}",
            r.total_budget,
            r.allocator,
            r.mean_output_error,
            r.min_recovery,
            r.barrier_latency,
            r.naive_barrier_latency
        )
        .unwrap();
    }
    writeln!(report, "wrote {}", path.display()).unwrap();
    Ok(report)
}

/// The simulator sweep described by `config`.
pub fn sweep_config(config: &ExperimentConfig) -> Result<SweepConfig, ExperimentError> {
    let spec = synthetic_spec(config)?;
    Ok(SweepConfig {
        degrees: config.sweep.degrees.clone(),
        context_lengths: config.sweep.context_lengths.clone(),
        heads: spec.heads,
        queries: spec.queries,
        head_dim: spec.head_dim,
        exponents: spec.exponents,
        noise: spec.noise,
        allocator: config.allocator,
        allocator_config: config.allocator_config,
        budget_fraction: config.sweep.budget_fraction,
        policy: config.policy,
        grid_step: config.grid_step,
        cost: config.cost,
        seed: spec.seed,
    })
}

/// Writes `sweep.csv`.
pub fn cmd_sweep(config: &ExperimentConfig) -> Result<String, ExperimentError> {
    let rows = sweep(&sweep_config(config)?)?;
    let path = config.out_path(SWEEP_FILE);
    write_csv(&path, &rows)?;
    Ok(format!("{} rows\nwrote {}\n", rows.len(), path.display()))
}
