use super::ExperimentError;
use crate::allocator::{AllocatorChoice, AllocatorConfig, DEFAULT_DELTA, DEFAULT_FLOOR};
use crate::attention::SelectionPolicy;
use crate::partitioner::Assigner;
use crate::profiler::{BudgetNormalization, Exponents, SyntheticWorkloadSpec};
use crate::simulator::CostModel;
use serde::Deserialize;
use std::fs;
use std::path::{Path, PathBuf};

/// On-disk TOML layout. Every key is optional; see [`ExperimentConfig::resolve`] for defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    out: Option<PathBuf>,
    #[serde(default)]
    workload: WorkloadSection,
    #[serde(default)]
    profile: ProfileSection,
    #[serde(default)]
    allocation: AllocationSection,
    #[serde(default)]
    partition: PartitionSection,
    #[serde(default)]
    cost: CostSection,
    #[serde(default)]
    skyline: SkylineSection,
    #[serde(default)]
    sweep: SweepSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadSection {
    profile_file: Option<PathBuf>,
    layer: Option<usize>,
    heads: Option<usize>,
    context_length: Option<usize>,
    queries: Option<usize>,
    head_dim: Option<usize>,
    exponent_min: Option<f64>,
    exponent_max: Option<f64>,
    exponents: Option<Vec<f64>>,
    noise: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileSection {
    policy: Option<SelectionPolicy>,
    grid_step: Option<usize>,
    target: Option<f64>,
    normalization: Option<BudgetNormalization>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocationSection {
    allocator: Option<String>,
    total_budget: Option<usize>,
    budget_fraction: Option<f64>,
    floor: Option<usize>,
    delta: Option<usize>,
    max_iterations: Option<usize>,
    allocation_file: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionSection {
    assigner: Option<String>,
    devices: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostSection {
    alpha: Option<f64>,
    beta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkylineSection {
    totals: Option<Vec<usize>>,
    fractions: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    degrees: Option<Vec<usize>>,
    context_lengths: Option<Vec<usize>>,
    budget_fraction: Option<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub devices: Option<Vec<usize>>,
    pub total_budget: Option<usize>,
    pub floor: Option<usize>,
    pub delta: Option<usize>,
    pub policy: Option<SelectionPolicy>,
    pub allocator: Option<AllocatorChoice>,
    pub assigner: Option<Assigner>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

/// Total token budget of a layer, absolute or relative to `heads · n_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Total(usize),
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, heads: usize, context_length: usize) -> usize {
        match self {
            Budget::Total(t) => t,
            Budget::Fraction(f) => (f * (heads * context_length) as f64).round() as usize,
        }
    }
}

/// Where head curves come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// Generate a workload; the seed is filled in from the run seed.
    Synthetic(SyntheticWorkloadSpec),
    /// Read curves from a profile file.
    ProfileFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub degrees: Vec<usize>,
    pub context_lengths: Vec<usize>,
    pub budget_fraction: f64,
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub source: Source,
    pub allocation_file: Option<PathBuf>,
    pub policy: SelectionPolicy,
    pub grid_step: usize,
    pub target: f64,
    pub normalization: BudgetNormalization,
    pub budget: Budget,
    pub allocator: AllocatorChoice,
    pub allocator_config: AllocatorConfig,
    pub assigner: Assigner,
    pub devices: Vec<usize>,
    pub cost: CostModel,
    pub skyline: Vec<Budget>,
    pub sweep: SweepSettings,
}

fn config_err(message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(message.into())
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies `overrides`, fills defaults and validates.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ExperimentError> {
        let file = match path {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    config_err(format!("cannot read config {}: {e}", path.display()))
                })?;
                toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
            }
            None => ConfigFile::default(),
        };
        Self::from_parts(file, overrides)
    }

    /// Same as [`resolve`](Self::resolve) with the file given as TOML text.
    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self, ExperimentError> {
        let file = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        Self::from_parts(file, overrides)
    }

    fn from_parts(file: ConfigFile, o: &Overrides) -> Result<Self, ExperimentError> {
        let seed = o.seed.or(file.seed);
        let out = o.out.clone().or(file.out).ok_or_else(|| {
            config_err("no output directory: set `out` in the config or pass --out")
        })?;
        if !out.is_dir() {
            return Err(config_err(format!(
                "output directory {} does not exist",
                out.display()
            )));
        }

        let w = file.workload;
        let source = match w.profile_file {
            Some(p) => Source::ProfileFile(p),
            None => {
                let heads = w.heads.unwrap_or(32);
                let exponents = match (w.exponents, w.exponent_min, w.exponent_max) {
                    (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                        return Err(config_err(
                            "workload: give either `exponents` or an exponent range, not both",
                        ))
                    }
                    (Some(list), None, None) => Exponents::Fixed(list),
                    (None, min, max) => Exponents::Range {
                        min: min.unwrap_or(0.3),
                        max: max.unwrap_or(2.5),
                    },
                };
                let spec = SyntheticWorkloadSpec {
                    layer: w.layer.unwrap_or(0),
                    heads,
                    context_length: w.context_length.unwrap_or(1024),
                    queries: w.queries.unwrap_or(16),
                    head_dim: w.head_dim.unwrap_or(16),
                    exponents,
                    noise: w.noise.unwrap_or(0.0),
                    seed: seed.unwrap_or(0),
                };
                spec.validate()
                    .map_err(|e| config_err(format!("workload: {e}")))?;
                Source::Synthetic(spec)
            }
        };

        let p = file.profile;
        let grid_step = p.grid_step.unwrap_or(1);
        if grid_step == 0 {
            return Err(config_err("profile.grid_step must be at least 1"));
        }
        let target = p.target.unwrap_or(0.9);
        if !(target > 0.0 && target <= 1.0) {
            return Err(config_err(format!(
                "profile.target {target} outside (0, 1]"
            )));
        }

        let a = file.allocation;
        let allocator = match o.allocator {
            Some(choice) => choice,
            None => a
                .allocator
                .as_deref()
                .unwrap_or("maxmin")
                .parse()
                .map_err(|e: String| config_err(format!("allocation.allocator: {e}")))?,
        };
        let budget = match (o.total_budget.or(a.total_budget), a.budget_fraction) {
            (Some(t), _) => Budget::Total(t),
            (None, Some(f)) => Budget::Fraction(check_fraction("allocation.budget_fraction", f)?),
            (None, None) => Budget::Fraction(0.25),
        };
        let allocator_config = AllocatorConfig {
            delta: o.delta.or(a.delta).unwrap_or(DEFAULT_DELTA),
            floor: o.floor.or(a.floor).unwrap_or(DEFAULT_FLOOR),
            max_iterations: a.max_iterations,
        };
        if allocator_config.delta == 0 {
            return Err(config_err("delta must be at least 1"));
        }

        let assigner = match o.assigner {
            Some(choice) => choice,
            None => file
                .partition
                .assigner
                .as_deref()
                .unwrap_or("greedy")
                .parse()
                .map_err(|e: String| config_err(format!("partition.assigner: {e}")))?,
        };
        let devices = o
            .devices
            .clone()
            .or(file.partition.devices)
            .unwrap_or_else(|| vec![4]);
        check_counts("devices", &devices)?;

        let cost = CostModel::new(
            o.alpha.or(file.cost.alpha).unwrap_or(0.0),
            o.beta.or(file.cost.beta).unwrap_or(1.0),
        )
        .map_err(|e| config_err(e.to_string()))?;

        let skyline = match (file.skyline.totals, file.skyline.fractions) {
            (Some(_), Some(_)) => {
                return Err(config_err(
                    "skyline: give either `totals` or `fractions`, not both",
                ))
            }
            (Some(totals), None) => totals.into_iter().map(Budget::Total).collect(),
            (None, fractions) => fractions
                .unwrap_or_else(|| vec![0.125, 0.25, 0.5, 1.0])
                .into_iter()
                .map(|f| check_fraction("skyline.fractions", f).map(Budget::Fraction))
                .collect::<Result<Vec<_>, _>>()?,
        };
        if skyline.is_empty() {
            return Err(config_err("skyline: budget list is empty"));
        }

        let s = file.sweep;
        let sweep = SweepSettings {
            degrees: s.degrees.unwrap_or_else(|| vec![1, 2, 4, 8]),
            context_lengths: s.context_lengths.unwrap_or_else(|| vec![1024, 2048, 4096]),
            budget_fraction: check_fraction(
                "sweep.budget_fraction",
                s.budget_fraction.unwrap_or(0.25),
            )?,
        };
        check_counts("sweep.degrees", &sweep.degrees)?;
        check_counts("sweep.context_lengths", &sweep.context_lengths)?;

        Ok(Self {
            seed,
            out,
            source,
            allocation_file: a.allocation_file,
            policy: o.policy.or(p.policy).unwrap_or_default(),
            grid_step,
            target,
            normalization: p.normalization.unwrap_or_default(),
            budget,
            allocator,
            allocator_config,
            assigner,
            devices,
            cost,
            skyline,
            sweep,
        })
    }

    /// The run seed; synthetic workloads cannot run without one.
    pub fn require_seed(&self) -> Result<u64, ExperimentError> {
        self.seed.ok_or_else(|| {
            config_err("a seed is required for synthetic workloads: set `seed` or pass --seed")
        })
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn check_fraction(name: &str, f: f64) -> Result<f64, ExperimentError> {
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(config_err(format!("{name}: {f} outside (0, 1]")))
    }
}

fn check_counts(name: &str, values: &[usize]) -> Result<(), ExperimentError> {
    if values.is_empty() {
        return Err(config_err(format!("{name}: list is empty")));
    }
    if values.contains(&0) {
        return Err(config_err(format!("{name}: values must be at least 1")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_overrides(dir: &Path) -> Overrides {
        Overrides {
            out: Some(dir.to_path_buf()),
            ..Default::default()
        }
    }

    #[test]
    fn defaults() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::from_toml("seed = 5", &dir_overrides(dir.path())).unwrap();
        assert_eq!(c.seed, Some(5));
        assert_eq!(c.allocator, AllocatorChoice::MaxMin);
        assert_eq!(c.assigner, Assigner::Greedy);
        assert_eq!(c.devices, vec![4]);
        assert_eq!(c.budget, Budget::Fraction(0.25));
        assert_eq!(c.allocator_config, AllocatorConfig::default());
        let Source::Synthetic(spec) = &c.source else {
            panic!()
        };
        assert_eq!((spec.heads, spec.context_length, spec.seed), (32, 1024, 5));
    }

    #[test]
    fn flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
seed = 1
[allocation]
allocator = "uniform"
total_budget = 100
floor = 4
[partition]
devices = [2, 3]
assigner = "naive"
[cost]
alpha = 2.0
"#;
        let o = Overrides {
            seed: Some(9),
            allocator: Some(AllocatorChoice::OracleTopP(0.5)),
            total_budget: Some(200),
            devices: Some(vec![8]),
            assigner: Some(Assigner::Optimal),
            alpha: Some(0.5),
            ..dir_overrides(dir.path())
        };
        let c = ExperimentConfig::from_toml(text, &o).unwrap();
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.allocator, AllocatorChoice::OracleTopP(0.5));
        assert_eq!(c.budget, Budget::Total(200));
        assert_eq!(c.allocator_config.floor, 4);
        assert_eq!(c.devices, vec![8]);
        assert_eq!(c.assigner, Assigner::Optimal);
        assert_eq!(
            c.cost,
            CostModel {
                alpha: 0.5,
                beta: 1.0
            }
        );
    }

    #[test]
    fn config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let o = dir_overrides(dir.path());
        for text in [
            "unknown_key = 1",
            "[allocation]\nallocator = \"best\"",
            "[partition]\ndevices = []",
            "[cost]\nbeta = 0.0",
            "[workload]\nexponents = [1.0]\nexponent_min = 0.5",
            "[workload]\nheads = 0",
            "[skyline]\nfractions = [1.5]",
        ] {
            let err = ExperimentConfig::from_toml(text, &o).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
        let missing = dir.path().join("nope");
        let err = ExperimentConfig::from_toml("", &dir_overrides(&missing)).unwrap_err();
        assert!(
            err.to_string().contains(&missing.display().to_string()),
            "{err}"
        );
        assert!(ExperimentConfig::from_toml("", &Overrides::default()).is_err());
        let unseeded = ExperimentConfig::from_toml("", &o).unwrap();
        assert_eq!(unseeded.require_seed().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn budget_resolution() {
        assert_eq!(Budget::Fraction(0.25).resolve(32, 1024), 8192);
        assert_eq!(Budget::Total(77).resolve(32, 1024), 77);
    }
}
