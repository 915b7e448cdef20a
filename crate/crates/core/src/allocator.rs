//! Distributing a global token budget across the heads of a layer.
//!
//! [`maxmin_allocate`] starts from the uniform split and repeatedly moves a quantum
//! of budget from the head with the highest current recovery to the head with the
//! lowest, keeping a transfer only if it raises the layer-wide minimum recovery.

use crate::profiler::{budget_for_recovery, HeadId, ProfileError, RecoveryCurve};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

pub const DEFAULT_DELTA: usize = 64;
pub const DEFAULT_FLOOR: usize = 128;
pub const ALLOCATION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AllocationError {
    #[error("no heads to allocate")]
    NoHeads,
    #[error("total budget {total} infeasible for {heads} heads: feasible range is [{min}, {max}]")]
    Infeasible {
        total: usize,
        heads: usize,
        min: usize,
        max: usize,
    },
    #[error("head {head} has context length {found}, expected {expected}")]
    ContextMismatch {
        head: HeadId,
        expected: usize,
        found: usize,
    },
    #[error("transfer quantum must be at least 1")]
    ZeroDelta,
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

/// Per-head token budgets summing to a fixed total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetAllocation {
    heads: Vec<HeadId>,
    budgets: Vec<usize>,
    total: usize,
    floor: usize,
}

impl BudgetAllocation {
    /// Checks `Σ budgets = total` and `budget ≥ floor` for every head.
    pub fn new(heads: Vec<HeadId>, budgets: Vec<usize>, floor: usize) -> Result<Self, String> {
        if heads.len() != budgets.len() {
            return Err(format!(
                "{} heads but {} budgets",
                heads.len(),
                budgets.len()
            ));
        }
        if let Some((i, b)) = budgets.iter().enumerate().find(|(_, &b)| b < floor) {
            return Err(format!(
                "head {} budget {b} is below the floor {floor}",
                heads[i]
            ));
        }
        let total = budgets.iter().sum();
        Ok(Self {
            heads,
            budgets,
            total,
            floor,
        })
    }

    pub fn heads(&self) -> &[HeadId] {
        &self.heads
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn floor(&self) -> usize {
        self.floor
    }

    /// Replaces the default `(layer 0, index)` head ids.
    pub fn with_heads(mut self, heads: Vec<HeadId>) -> Self {
        assert_eq!(heads.len(), self.budgets.len(), "head id count");
        self.heads = heads;
        self
    }

    /// Each head's recovery at its budget.
    pub fn recoveries(&self, curves: &[RecoveryCurve]) -> Vec<f64> {
        self.budgets
            .iter()
            .zip(curves)
            .map(|(&b, c)| c.recovery_at(b))
            .collect()
    }

    pub fn min_recovery(&self, curves: &[RecoveryCurve]) -> f64 {
        self.recoveries(curves)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn mean_recovery(&self, curves: &[RecoveryCurve]) -> f64 {
        let r = self.recoveries(curves);
        r.iter().sum::<f64>() / r.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocatorConfig {
    /// Tokens moved per transfer.
    pub delta: usize,
    /// No head may drop below this budget.
    pub floor: usize,
    /// Safety cap on loop iterations; `None` means `10·N·n_k/Δ`.
    pub max_iterations: Option<usize>,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            floor: DEFAULT_FLOOR,
            max_iterations: None,
        }
    }
}

/// Why the max–min loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The tentative transfer did not raise the minimum recovery, so it was reverted.
    NoImprovement,
    /// Every head other than the recipient sits within one quantum of the floor.
    FloorReached,
    /// The iteration cap was hit before either condition.
    IterationCap,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::NoImprovement => "no improvement",
            StopReason::FloorReached => "floor reached",
            StopReason::IterationCap => "iteration cap",
        })
    }
}

/// One committed transfer of the max–min loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transfer {
    pub donor: usize,
    pub recipient: usize,
    pub amount: usize,
    pub donor_recovery: f64,
    pub recipient_recovery: f64,
    pub min_before: f64,
    pub min_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxMinOutcome {
    pub allocation: BudgetAllocation,
    pub transfers: Vec<Transfer>,
    pub stop: StopReason,
}

/// Equal split of `total`, remainder one token each to the lowest-indexed heads.
pub fn uniform_allocate(
    heads: usize,
    total: usize,
    floor: usize,
    context_length: usize,
) -> Result<BudgetAllocation, AllocationError> {
    if heads == 0 {
        return Err(AllocationError::NoHeads);
    }
    let (min, max) = (heads * floor, heads * context_length);
    if total < min || total > max {
        return Err(AllocationError::Infeasible {
            total,
            heads,
            min,
            max,
        });
    }
    let (base, extra) = (total / heads, total % heads);
    let budgets = (0..heads).map(|h| base + usize::from(h < extra)).collect();
    Ok(BudgetAllocation {
        heads: (0..heads).map(|h| HeadId::new(0, h)).collect(),
        budgets,
        total,
        floor,
    })
}

fn shared_context_length(curves: &[RecoveryCurve]) -> Result<usize, AllocationError> {
    let first = curves.first().ok_or(AllocationError::NoHeads)?;
    let n_k = first.context_length();
    if let Some(c) = curves.iter().find(|c| c.context_length() != n_k) {
        return Err(AllocationError::ContextMismatch {
            head: c.id(),
            expected: n_k,
            found: c.context_length(),
        });
    }
    Ok(n_k)
}

/// Index of the extreme value, lowest index on ties.
fn arg_extreme(
    values: impl Iterator<Item = (usize, f64)>,
    better: impl Fn(f64, f64) -> bool,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values {
        if best.is_none_or(|(_, b)| better(v, b)) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Max–min budget shifting over the heads' recovery curves.
///
/// Recovery at a budget is read from the nearest sampled curve point at or below it.
pub fn maxmin_allocate(
    curves: &[RecoveryCurve],
    total: usize,
    config: &AllocatorConfig,
) -> Result<MaxMinOutcome, AllocationError> {
    if config.delta == 0 {
        return Err(AllocationError::ZeroDelta);
    }
    let n_k = shared_context_length(curves)?;
    let n = curves.len();
    let start = uniform_allocate(n, total, config.floor, n_k)?
        .with_heads(curves.iter().map(|c| c.id()).collect());
    let cap = config
        .max_iterations
        .unwrap_or_else(|| (10 * n * n_k).div_ceil(config.delta));

    let mut budgets = start.budgets.clone();
    let mut recovery: Vec<f64> = budgets
        .iter()
        .zip(curves)
        .map(|(&b, c)| c.recovery_at(b))
        .collect();
    let mut transfers = Vec::new();
    let min_of = |r: &[f64]| r.iter().copied().fold(f64::INFINITY, f64::min);

    let stop = loop {
        if transfers.len() >= cap {
            break StopReason::IterationCap;
        }
        let recipient =
            arg_extreme(recovery.iter().copied().enumerate(), |v, b| v < b).expect("nonempty");
        let donor = arg_extreme(
            (0..n)
                .filter(|&h| h != recipient && budgets[h] >= config.floor + config.delta)
                .map(|h| (h, recovery[h])),
            |v, b| v > b,
        );
        let Some(donor) = donor else {
            break StopReason::FloorReached;
        };
        let amount = config.delta.min(n_k - budgets[recipient]);
        if amount == 0 {
            break StopReason::NoImprovement;
        }
        let min_before = recovery[recipient];
        let (donor_recovery, recipient_recovery) = (recovery[donor], recovery[recipient]);

        budgets[donor] -= amount;
        budgets[recipient] += amount;
        recovery[donor] = curves[donor].recovery_at(budgets[donor]);
        recovery[recipient] = curves[recipient].recovery_at(budgets[recipient]);
        let min_after = min_of(&recovery);
        if min_after <= min_before {
            budgets[donor] += amount;
            budgets[recipient] -= amount;
            recovery[donor] = donor_recovery;
            recovery[recipient] = recipient_recovery;
            break StopReason::NoImprovement;
        }
        transfers.push(Transfer {
            donor,
            recipient,
            amount,
            donor_recovery,
            recipient_recovery,
            min_before,
            min_after,
        });
    };

    Ok(MaxMinOutcome {
        allocation: BudgetAllocation { budgets, ..start },
        transfers,
        stop,
    })
}

/// Idealized top-p baseline: each head gets the smallest sampled budget reaching `p`.
/// The total is whatever these budgets add up to; the floor is 0.
pub fn oracle_topp_allocate(
    curves: &[RecoveryCurve],
    p: f64,
) -> Result<BudgetAllocation, AllocationError> {
    shared_context_length(curves)?;
    let budgets = curves
        .iter()
        .map(|c| budget_for_recovery(c, p))
        .collect::<Result<Vec<_>, _>>()?;
    let heads = curves.iter().map(|c| c.id()).collect();
    Ok(BudgetAllocation::new(heads, budgets, 0).expect("floor 0 always holds"))
}

/// Which allocation strategy to run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AllocatorChoice {
    Uniform,
    MaxMin,
    /// Per-head top-p budgets; ignores the requested total.
    OracleTopP(f64),
}

impl AllocatorChoice {
    /// Allocates `total` (ignored by top-p) over `curves`. Returns the transfer count
    /// alongside for max–min.
    pub fn allocate(
        self,
        curves: &[RecoveryCurve],
        total: usize,
        config: &AllocatorConfig,
    ) -> Result<(BudgetAllocation, Option<MaxMinOutcome>), AllocationError> {
        match self {
            AllocatorChoice::Uniform => {
                let n_k = shared_context_length(curves)?;
                let a = uniform_allocate(curves.len(), total, config.floor, n_k)?
                    .with_heads(curves.iter().map(|c| c.id()).collect());
                Ok((a, None))
            }
            AllocatorChoice::MaxMin => {
                let out = maxmin_allocate(curves, total, config)?;
                Ok((out.allocation.clone(), Some(out)))
            }
            AllocatorChoice::OracleTopP(p) => Ok((oracle_topp_allocate(curves, p)?, None)),
        }
    }
}

impl fmt::Display for AllocatorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllocatorChoice::Uniform => f.write_str("uniform"),
            AllocatorChoice::MaxMin => f.write_str("maxmin"),
            AllocatorChoice::OracleTopP(p) => write!(f, "oracle_topp({p})"),
        }
    }
}

impl FromStr for AllocatorChoice {
    type Err = String;

    /// Accepts `uniform`, `maxmin`, `oracle_topp` (p = 0.9) and `oracle_topp(P)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "uniform" => return Ok(AllocatorChoice::Uniform),
            "maxmin" | "max-min" => return Ok(AllocatorChoice::MaxMin),
            "oracle_topp" => return Ok(AllocatorChoice::OracleTopP(0.9)),
            _ => {}
        }
        let p = s
            .strip_prefix("oracle_topp(")
            .and_then(|rest| rest.strip_suffix(')'))
            .ok_or_else(|| {
                format!("unknown allocator {s:?} (expected uniform, maxmin or oracle_topp(P))")
            })?;
        let p: f64 = p
            .trim()
            .parse()
            .map_err(|_| format!("invalid top-p threshold {p:?}"))?;
        if !(p > 0.0 && p <= 1.0) {
            return Err(format!("top-p threshold {p} outside (0, 1]"));
        }
        Ok(AllocatorChoice::OracleTopP(p))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocationFile {
    version: u32,
    total: usize,
    floor: usize,
    budgets: Vec<BudgetEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetEntry {
    layer: usize,
    head: usize,
    budget: usize,
}

pub fn allocation_to_json(allocation: &BudgetAllocation) -> String {
    let file = AllocationFile {
        version: ALLOCATION_FORMAT_VERSION,
        total: allocation.total,
        floor: allocation.floor,
        budgets: allocation
            .heads
            .iter()
            .zip(&allocation.budgets)
            .map(|(id, &budget)| BudgetEntry {
                layer: id.layer,
                head: id.head,
                budget,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("allocation serializes");
    text.push('\n');
    text
}

pub fn parse_allocation(text: &str, origin: &str) -> Result<BudgetAllocation, AllocationError> {
    let err = |message: String| AllocationError::File {
        path: origin.to_string(),
        message,
    };
    let file: AllocationFile = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
    if file.version != ALLOCATION_FORMAT_VERSION {
        return Err(err(format!(
            "version: unsupported version {}",
            file.version
        )));
    }
    if file.budgets.is_empty() {
        return Err(err("budgets: empty".into()));
    }
    let heads = file
        .budgets
        .iter()
        .map(|e| HeadId::new(e.layer, e.head))
        .collect();
    let budgets = file.budgets.iter().map(|e| e.budget).collect();
    let allocation = BudgetAllocation::new(heads, budgets, file.floor)
        .map_err(|m| err(format!("budgets: {m}")))?;
    if allocation.total != file.total {
        return Err(err(format!(
            "total: budgets sum to {}, file states {}",
            allocation.total, file.total
        )));
    }
    Ok(allocation)
}

pub fn save_allocation(
    path: impl AsRef<Path>,
    allocation: &BudgetAllocation,
) -> Result<(), AllocationError> {
    let path = path.as_ref();
    fs::write(path, allocation_to_json(allocation)).map_err(|e| AllocationError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_allocation(path: impl AsRef<Path>) -> Result<BudgetAllocation, AllocationError> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| AllocationError::File {
        path: origin.clone(),
        message: e.to_string(),
    })?;
    parse_allocation(&text, &origin)
}
