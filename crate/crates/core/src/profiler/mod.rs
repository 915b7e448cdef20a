//! Offline per-head sparsity profiling.
//!
//! A [`RecoveryCurve`] samples a head's recovery ratio `r(k)` on a budget grid. Curves
//! are built from exact attention weights, persisted in a strict JSON schema and turned
//! into per-head budgets by [`budget_for_recovery`].

mod io;
mod synthetic;

pub use io::{
    load_profiles, parse_profiles, profiles_to_json, save_profiles, PROFILE_FORMAT_VERSION,
};
pub use synthetic::{draw_exponents, generate_workload, Exponents, SyntheticWorkloadSpec};

use crate::attention::{dense_attention, recovery_profile, AttentionWorkload, SelectionPolicy};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Tolerance on `r(n_k) = 1`.
pub const FULL_RECOVERY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("curve has no points")]
    Empty,
    #[error("budgets not strictly increasing at point {index} ({prev} then {next})")]
    BudgetsNotIncreasing {
        index: usize,
        prev: usize,
        next: usize,
    },
    #[error("recovery decreases at point {index} ({prev} then {next})")]
    RecoveryDecreasing { index: usize, prev: f64, next: f64 },
    #[error("budget {budget} at point {index} exceeds context length {context_length}")]
    BudgetOutOfRange {
        index: usize,
        budget: usize,
        context_length: usize,
    },
    #[error("recovery {value} at point {index} is outside [0, 1]")]
    RecoveryOutOfRange { index: usize, value: f64 },
    #[error("last point has budget {budget}, expected the context length {context_length}")]
    MissingFullBudget {
        budget: usize,
        context_length: usize,
    },
    #[error("recovery at the full budget is {value}, expected 1")]
    FullRecoveryNotOne { value: f64 },
    #[error("a budget of 0 must have recovery 0, got {value}")]
    NonZeroAtZero { value: f64 },
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("budget grid: {0}")]
    Grid(String),
    #[error("head {head}: {source}")]
    Curve {
        head: HeadId,
        #[source]
        source: CurveError,
    },
    #[error("recovery target {0} outside (0, 1]")]
    Target(f64),
    #[error("recovery target {target} is above the curve maximum {max} for head {head}")]
    Unreachable { head: HeadId, target: f64, max: f64 },
    #[error("stability needs at least two requests, got {0}")]
    TooFewRequests(usize),
    #[error("request {request:?} covers a different head set than request {reference:?}")]
    HeadSetMismatch { request: String, reference: String },
    #[error("request {request:?} has a zero-variance budget vector")]
    Degenerate { request: String },
    #[error("synthetic workload: {0}")]
    Spec(String),
    #[error("profiles disagree on {0}; a profile file holds one policy and one context length")]
    Mixed(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {field}: {message}")]
    Schema {
        path: String,
        field: String,
        message: String,
    },
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
}

/// Identifies a head by layer and index within the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Sampled budget → recovery function of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryCurve {
    id: HeadId,
    context_length: usize,
    points: Vec<(usize, f64)>,
}

impl RecoveryCurve {
    pub fn new(
        id: HeadId,
        context_length: usize,
        points: Vec<(usize, f64)>,
    ) -> Result<Self, CurveError> {
        let &(last_k, last_r) = points.last().ok_or(CurveError::Empty)?;
        for (index, &(k, r)) in points.iter().enumerate() {
            if k > context_length {
                return Err(CurveError::BudgetOutOfRange {
                    index,
                    budget: k,
                    context_length,
                });
            }
            if !(0.0..=1.0).contains(&r) {
                return Err(CurveError::RecoveryOutOfRange { index, value: r });
            }
            if k == 0 && r != 0.0 {
                return Err(CurveError::NonZeroAtZero { value: r });
            }
            if index > 0 {
                let (pk, pr) = points[index - 1];
                if k <= pk {
                    return Err(CurveError::BudgetsNotIncreasing {
                        index,
                        prev: pk,
                        next: k,
                    });
                }
                if r < pr {
                    return Err(CurveError::RecoveryDecreasing {
                        index,
                        prev: pr,
                        next: r,
                    });
                }
            }
        }
        if last_k != context_length {
            return Err(CurveError::MissingFullBudget {
                budget: last_k,
                context_length,
            });
        }
        if (last_r - 1.0).abs() > FULL_RECOVERY_TOLERANCE {
            return Err(CurveError::FullRecoveryNotOne { value: last_r });
        }
        Ok(Self {
            id,
            context_length,
            points,
        })
    }

    /// Samples `recovery` at every budget of `grid`.
    pub fn from_fn(
        id: HeadId,
        context_length: usize,
        grid: impl IntoIterator<Item = usize>,
        mut recovery: impl FnMut(usize) -> f64,
    ) -> Result<Self, CurveError> {
        Self::new(
            id,
            context_length,
            grid.into_iter().map(|k| (k, recovery(k))).collect(),
        )
    }

    pub fn id(&self) -> HeadId {
        self.id
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }

    /// Recovery at `budget`, read from the nearest sampled point at or below it.
    /// Budgets below the first sample recover nothing.
    pub fn recovery_at(&self, budget: usize) -> f64 {
        match self.points.partition_point(|&(k, _)| k <= budget) {
            0 => 0.0,
            i => self.points[i - 1].1,
        }
    }
}

/// Where a profile came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub request: String,
    pub task: String,
}

impl Provenance {
    pub fn new(request: impl Into<String>, task: impl Into<String>) -> Self {
        Self {
            request: request.into(),
            task: task.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadProfile {
    pub curve: RecoveryCurve,
    pub provenance: Provenance,
    pub policy: SelectionPolicy,
}

impl HeadProfile {
    pub fn id(&self) -> HeadId {
        self.curve.id()
    }
}

/// `0, step, 2·step, …` up to and including `context_length`.
pub fn budget_grid(context_length: usize, step: usize) -> Vec<usize> {
    let step = step.max(1);
    let mut grid: Vec<usize> = (0..=context_length).step_by(step).collect();
    if grid.last() != Some(&context_length) {
        grid.push(context_length);
    }
    grid
}

fn check_grid(grid: &[usize], context_length: usize) -> Result<(), ProfileError> {
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ProfileError::Grid("budgets not strictly increasing".into()));
    }
    match grid.last() {
        None => Err(ProfileError::Grid("empty".into())),
        Some(&k) if k > context_length => Err(ProfileError::Grid(format!(
            "budget {k} exceeds context length {context_length}"
        ))),
        Some(&k) if k < context_length => Err(ProfileError::Grid(format!(
            "must end at the context length {context_length}, ends at {k}"
        ))),
        _ => Ok(()),
    }
}

/// One profile per head of `workload`, sampled at `grid` from exact attention weights.
pub fn build_profiles(
    workload: &AttentionWorkload,
    grid: &[usize],
    policy: SelectionPolicy,
    provenance: &Provenance,
) -> Result<Vec<HeadProfile>, ProfileError> {
    let n_k = workload.context_length();
    check_grid(grid, n_k)?;
    workload
        .heads()
        .iter()
        .enumerate()
        .map(|(h, head)| {
            let id = HeadId::new(workload.layer(), h);
            let (weights, _) = dense_attention(head);
            let full = recovery_profile(&weights, policy);
            let points = grid
                .iter()
                .map(|&k| (k, if k == n_k { 1.0 } else { full[k] }))
                .collect();
            let curve = RecoveryCurve::new(id, n_k, points)
                .map_err(|source| ProfileError::Curve { head: id, source })?;
            Ok(HeadProfile {
                curve,
                provenance: provenance.clone(),
                policy,
            })
        })
        .collect()
}

/// Smallest sampled budget whose recovery reaches `target`. The full budget always qualifies.
pub fn budget_for_recovery(curve: &RecoveryCurve, target: f64) -> Result<usize, ProfileError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(ProfileError::Target(target));
    }
    curve
        .points()
        .iter()
        .find(|&&(k, r)| r >= target || k == curve.context_length())
        .map(|&(k, _)| k)
        .ok_or_else(|| ProfileError::Unreachable {
            head: curve.id(),
            target,
            max: curve.points().last().map_or(0.0, |p| p.1),
        })
}

/// How a request's per-head budget vector is scaled before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetNormalization {
    /// Divide by the largest budget.
    #[default]
    Max,
    /// Divide by the sum of budgets.
    Sum,
}

/// Per-head budgets needed to reach `target`, scaled by `normalization`, in head order.
pub fn normalized_budgets(
    profiles: &[HeadProfile],
    target: f64,
    normalization: BudgetNormalization,
) -> Result<Vec<f64>, ProfileError> {
    let budgets = profiles
        .iter()
        .map(|p| budget_for_recovery(&p.curve, target).map(|b| b as f64))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = match normalization {
        BudgetNormalization::Max => budgets.iter().copied().fold(0.0, f64::max),
        BudgetNormalization::Sum => budgets.iter().sum(),
    };
    Ok(budgets
        .iter()
        .map(|b| if scale > 0.0 { b / scale } else { 0.0 })
        .collect())
}

/// Pearson correlation; `None` when either side has zero variance or lengths differ.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.is_empty() {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn request_name(group: &[HeadProfile], index: usize) -> String {
    group
        .first()
        .map(|p| p.provenance.request.clone())
        .unwrap_or_else(|| format!("#{index}"))
}

/// Cross-request stability of relative head sparsity: the minimum pairwise Pearson
/// correlation between the requests' normalized budget vectors at `target`.
///
/// Each group holds one request's profiles; groups are matched by [`HeadId`].
pub fn stability_score(
    groups: &[Vec<HeadProfile>],
    target: f64,
    normalization: BudgetNormalization,
) -> Result<f64, ProfileError> {
    if groups.len() < 2 {
        return Err(ProfileError::TooFewRequests(groups.len()));
    }
    let sorted: Vec<Vec<&HeadProfile>> = groups
        .iter()
        .map(|g| {
            let mut g: Vec<&HeadProfile> = g.iter().collect();
            g.sort_by_key(|p| p.id());
            g
        })
        .collect();
    let reference: Vec<HeadId> = sorted[0].iter().map(|p| p.id()).collect();
    let mut vectors = Vec::with_capacity(groups.len());
    for (i, g) in sorted.iter().enumerate() {
        if !g.iter().map(|p| p.id()).eq(reference.iter().copied()) {
            return Err(ProfileError::HeadSetMismatch {
                request: request_name(&groups[i], i),
                reference: request_name(&groups[0], 0),
            });
        }
        let owned: Vec<HeadProfile> = g.iter().map(|&p| p.clone()).collect();
        let v = normalized_budgets(&owned, target, normalization)?;
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        if v.iter().all(|x| (x - mean).abs() == 0.0) {
            return Err(ProfileError::Degenerate {
                request: request_name(&groups[i], i),
            });
        }
        vectors.push(v);
    }
    let mut worst = f64::INFINITY;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = pearson(&vectors[i], &vectors[j]).ok_or_else(|| ProfileError::Degenerate {
                request: request_name(&groups[j], j),
            })?;
            worst = worst.min(c);
        }
    }
    Ok(worst)
}
