use clap::{Args, Parser, Subcommand};
use headload::allocator::AllocatorChoice;
use headload::attention::SelectionPolicy;
use headload::experiment::{run, Command, ExperimentConfig, Overrides};
use headload::partitioner::Assigner;
use std::path::PathBuf;
use std::process::ExitCode;

/// Per-head sparse-attention budgets and head-parallel placement experiments.
#[derive(Parser)]
#[command(name = "headload", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Cmd {
    /// Profile recovery curves and print per-head budgets
    Profile,
    /// Distribute the total budget across heads
    Allocate,
    /// Place heads on devices and report load imbalance
    Partition,
    /// Error and latency of uniform vs max-min allocation across budgets
    Skyline,
    /// Parallelism-degree by context-length latency sweep
    Sweep,
}

#[derive(Args)]
struct Flags {
    /// TOML configuration file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory (must exist)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Device counts, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    devices: Option<Vec<usize>>,
    #[arg(long, global = true)]
    total_budget: Option<usize>,
    #[arg(long, global = true)]
    floor: Option<usize>,
    #[arg(long, global = true)]
    delta: Option<usize>,
    /// per_query_topk | column_aggregate_topk
    #[arg(long, global = true)]
    policy: Option<SelectionPolicy>,
    /// uniform | maxmin | oracle_topp(P)
    #[arg(long, global = true)]
    allocator: Option<AllocatorChoice>,
    /// naive | round_robin | greedy | optimal
    #[arg(long, global = true)]
    assigner: Option<Assigner>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let f = cli.flags;
    let overrides = Overrides {
        seed: f.seed,
        out: f.out,
        devices: f.devices,
        total_budget: f.total_budget,
        floor: f.floor,
        delta: f.delta,
        policy: f.policy,
        allocator: f.allocator,
        assigner: f.assigner,
        alpha: f.alpha,
        beta: f.beta,
    };
    let command = match cli.command {
        Cmd::Profile => Command::Profile,
        Cmd::Allocate => Command::Allocate,
        Cmd::Partition => Command::Partition,
        Cmd::Skyline => Command::Skyline,
        Cmd::Sweep => Command::Sweep,
    };
    let result =
        ExperimentConfig::resolve(f.config.as_deref(), &overrides).and_then(|c| run(command, &c));
    match result {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
