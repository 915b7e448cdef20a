//! Placing heads on devices.
//!
//! A device's load is the sum of its heads' budgets; the imbalance ratio is the
//! maximum load over the mean load. Three placements are provided: contiguous equal
//! head-count blocks (what head-parallel serving does today), longest-budget-first
//! greedy, and an exact solver for small instances.

use crate::profiler::HeadId;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Largest instance [`optimal_assign`] accepts.
pub const OPTIMAL_MAX_HEADS: usize = 24;
pub const OPTIMAL_MAX_DEVICES: usize = 4;
pub const ASSIGNMENT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("device count must be at least 1")]
    NoDevices,
    #[error("no heads to place")]
    NoHeads,
    #[error("{devices} devices but only {heads} heads")]
    TooFewHeads { heads: usize, devices: usize },
    #[error("head {head} is assigned to device {device}, but there are only {devices} devices")]
    DeviceOutOfRange {
        head: usize,
        device: usize,
        devices: usize,
    },
    #[error("{groups} head sets given for {devices} devices")]
    GroupCount { devices: usize, groups: usize },
    #[error("head {head} is not assigned to any device")]
    Unassigned { head: usize },
    #[error("head {head} is assigned to more than one device")]
    DoublyAssigned { head: usize },
    #[error("assignment covers {found} heads, budgets cover {expected}")]
    HeadCount { expected: usize, found: usize },
    #[error(
        "exact solver limited to {max_heads} heads and {max_devices} devices, got {heads} heads on {devices} devices; use greedy"
    )]
    TooLarge {
        heads: usize,
        devices: usize,
        max_heads: usize,
        max_devices: usize,
    },
    #[error("assignment file: {0}")]
    File(String),
}

/// Head → device map. Every head belongs to exactly one device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    devices: usize,
    device_of: Vec<usize>,
}

impl Assignment {
    pub fn new(devices: usize, device_of: Vec<usize>) -> Result<Self, PartitionError> {
        if devices == 0 {
            return Err(PartitionError::NoDevices);
        }
        if let Some((head, &device)) = device_of.iter().enumerate().find(|(_, &d)| d >= devices) {
            return Err(PartitionError::DeviceOutOfRange {
                head,
                device,
                devices,
            });
        }
        Ok(Self { devices, device_of })
    }

    /// Builds an assignment from per-device head sets, checking that they partition `0..heads`.
    pub fn from_groups(
        devices: usize,
        groups: &[Vec<usize>],
        heads: usize,
    ) -> Result<Self, PartitionError> {
        if devices == 0 {
            return Err(PartitionError::NoDevices);
        }
        if groups.len() != devices {
            return Err(PartitionError::GroupCount {
                devices,
                groups: groups.len(),
            });
        }
        let mut device_of = vec![None; heads];
        for (d, group) in groups.iter().enumerate() {
            for &h in group {
                let slot = device_of.get_mut(h).ok_or(PartitionError::HeadCount {
                    expected: heads,
                    found: h + 1,
                })?;
                if slot.replace(d).is_some() {
                    return Err(PartitionError::DoublyAssigned { head: h });
                }
            }
        }
        let device_of = device_of
            .into_iter()
            .enumerate()
            .map(|(head, d)| d.ok_or(PartitionError::Unassigned { head }))
            .collect::<Result<_, _>>()?;
        Ok(Self { devices, device_of })
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn device_of(&self) -> &[usize] {
        &self.device_of
    }

    pub fn head_count(&self) -> usize {
        self.device_of.len()
    }

    /// Head indices per device, ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.devices];
        for (h, &d) in self.device_of.iter().enumerate() {
            groups[d].push(h);
        }
        groups
    }

    pub fn loads(&self, budgets: &[u64]) -> Vec<u64> {
        let mut loads = vec![0; self.devices];
        for (&d, &b) in self.device_of.iter().zip(budgets) {
            loads[d] += b;
        }
        loads
    }
}

/// Per-device loads and the imbalance ratio.
///
/// The ratio is computed as `(|D| · max L_d) / Σ L_d` in `f64`, one rounding from the exact
/// rational. An all-zero load vector has ratio 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub loads: Vec<u64>,
    pub total: u64,
    pub max_load: u64,
    /// Most loaded device, lowest index on ties.
    pub argmax: usize,
    pub imbalance: f64,
}

impl LoadReport {
    pub fn from_loads(loads: Vec<u64>) -> Self {
        let total: u64 = loads.iter().sum();
        let (argmax, max_load) = loads.iter().copied().enumerate().fold(
            (0, 0),
            |(bi, bm), (i, l)| if l > bm { (i, l) } else { (bi, bm) },
        );
        let imbalance = if total == 0 {
            1.0
        } else {
            (loads.len() as u64 * max_load) as f64 / total as f64
        };
        Self {
            loads,
            total,
            max_load,
            argmax,
            imbalance,
        }
    }

    pub fn mean_load(&self) -> f64 {
        self.total as f64 / self.loads.len() as f64
    }
}

fn check_instance(budgets: &[u64], devices: usize) -> Result<(), PartitionError> {
    if devices == 0 {
        return Err(PartitionError::NoDevices);
    }
    if budgets.is_empty() {
        return Err(PartitionError::NoHeads);
    }
    Ok(())
}

/// Contiguous blocks of `⌈N/|D|⌉` / `⌊N/|D|⌋` heads in index order, larger blocks first.
pub fn naive_assign(budgets: &[u64], devices: usize) -> Result<Assignment, PartitionError> {
    check_instance(budgets, devices)?;
    let n = budgets.len();
    if devices > n {
        return Err(PartitionError::TooFewHeads { heads: n, devices });
    }
    let (base, extra) = (n / devices, n % devices);
    let device_of = (0..devices)
        .flat_map(|d| std::iter::repeat_n(d, base + usize::from(d < extra)))
        .collect();
    Assignment::new(devices, device_of)
}

/// Head `h` on device `h mod |D|`.
pub fn round_robin_assign(budgets: &[u64], devices: usize) -> Result<Assignment, PartitionError> {
    check_instance(budgets, devices)?;
    if devices > budgets.len() {
        return Err(PartitionError::TooFewHeads {
            heads: budgets.len(),
            devices,
        });
    }
    Assignment::new(devices, (0..budgets.len()).map(|h| h % devices).collect())
}

/// Heads ordered by budget, largest first (lower index first on ties).
fn by_budget_desc(budgets: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..budgets.len()).collect();
    order.sort_by_key(|&h| (Reverse(budgets[h]), h));
    order
}

/// Longest-budget-first greedy: each head, largest first, goes to the currently least
/// loaded device (lowest index on ties). `O(N log N + N log |D|)`.
pub fn greedy_assign(budgets: &[u64], devices: usize) -> Result<Assignment, PartitionError> {
    check_instance(budgets, devices)?;
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
        (0..devices).map(|d| Reverse((0, d))).collect();
    let mut device_of = vec![0; budgets.len()];
    for h in by_budget_desc(budgets) {
        let Reverse((load, d)) = heap.pop().expect("at least one device");
        device_of[h] = d;
        heap.push(Reverse((load + budgets[h], d)));
    }
    Assignment::new(devices, device_of)
}

/// Minimum achievable maximum load, by branch and bound over heads in descending
/// budget order, seeded with the greedy makespan.
fn min_makespan(budgets: &[u64], devices: usize, upper: u64) -> u64 {
    let order = by_budget_desc(budgets);
    let items: Vec<u64> = order.iter().map(|&h| budgets[h]).collect();
    let total: u64 = items.iter().sum();
    let lower = total.div_ceil(devices as u64).max(items[0]);
    if upper <= lower {
        return upper;
    }
    let mut suffix = vec![0; items.len() + 1];
    for i in (0..items.len()).rev() {
        suffix[i] = suffix[i + 1] + items[i];
    }

    struct Search<'a> {
        items: &'a [u64],
        suffix: &'a [u64],
        lower: u64,
        best: u64,
    }

    impl Search<'_> {
        fn go(&mut self, i: usize, loads: &mut [u64], current_max: u64) {
            if self.best == self.lower {
                return;
            }
            if i == self.items.len() {
                self.best = current_max;
                return;
            }
            // every device must stay strictly below the incumbent
            let room: u64 = loads
                .iter()
                .map(|&l| (self.best - 1).saturating_sub(l))
                .sum();
            if room < self.suffix[i] {
                return;
            }
            let x = self.items[i];
            for d in 0..loads.len() {
                if loads[..d].contains(&loads[d]) || loads[d] + x >= self.best {
                    continue;
                }
                loads[d] += x;
                self.go(i + 1, loads, current_max.max(loads[d]));
                loads[d] -= x;
            }
        }
    }

    let mut search = Search {
        items: &items,
        suffix: &suffix,
        lower,
        best: upper,
    };
    search.go(0, &mut vec![0; devices], 0);
    search.best
}

/// Lexicographically smallest device vector, in head-index order, with every load ≤ `cap`.
fn lex_smallest_within(budgets: &[u64], devices: usize, cap: u64) -> Option<Vec<usize>> {
    let n = budgets.len();
    let mut suffix = vec![0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + budgets[i];
    }
    // feasibility of the remaining heads depends only on the load multiset
    fn go(
        i: usize,
        budgets: &[u64],
        suffix: &[u64],
        cap: u64,
        loads: &mut [u64],
        out: &mut [usize],
        dead: &mut HashSet<(usize, Vec<u64>)>,
    ) -> bool {
        if i == budgets.len() {
            return true;
        }
        let room: u64 = loads.iter().map(|&l| cap - l).sum();
        if room < suffix[i] {
            return false;
        }
        let mut key = loads.to_vec();
        key.sort_unstable();
        let key = (i, key);
        if dead.contains(&key) {
            return false;
        }
        for d in 0..loads.len() {
            if loads[d] + budgets[i] <= cap {
                loads[d] += budgets[i];
                out[i] = d;
                if go(i + 1, budgets, suffix, cap, loads, out, dead) {
                    return true;
                }
                loads[d] -= budgets[i];
            }
        }
        dead.insert(key);
        false
    }
    let mut out = vec![0; n];
    go(
        0,
        budgets,
        &suffix,
        cap,
        &mut vec![0; devices],
        &mut out,
        &mut HashSet::new(),
    )
    .then_some(out)
}

/// Exact minimum-imbalance placement for small instances.
///
/// Among all optimal placements, returns the lexicographically smallest device vector.
pub fn optimal_assign(budgets: &[u64], devices: usize) -> Result<Assignment, PartitionError> {
    check_instance(budgets, devices)?;
    if budgets.len() > OPTIMAL_MAX_HEADS || devices > OPTIMAL_MAX_DEVICES {
        return Err(PartitionError::TooLarge {
            heads: budgets.len(),
            devices,
            max_heads: OPTIMAL_MAX_HEADS,
            max_devices: OPTIMAL_MAX_DEVICES,
        });
    }
    let greedy = greedy_assign(budgets, devices)?;
    let upper = greedy.loads(budgets).into_iter().max().unwrap_or(0);
    let best = min_makespan(budgets, devices, upper);
    let device_of = lex_smallest_within(budgets, devices, best).expect("optimum is attainable");
    Assignment::new(devices, device_of)
}

/// Placement strategy selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assigner {
    Naive,
    RoundRobin,
    Greedy,
    Optimal,
}

impl Assigner {
    pub fn assign(self, budgets: &[u64], devices: usize) -> Result<Assignment, PartitionError> {
        match self {
            Assigner::Naive => naive_assign(budgets, devices),
            Assigner::RoundRobin => round_robin_assign(budgets, devices),
            Assigner::Greedy => greedy_assign(budgets, devices),
            Assigner::Optimal => optimal_assign(budgets, devices),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Assigner::Naive => "naive",
            Assigner::RoundRobin => "round_robin",
            Assigner::Greedy => "greedy",
            Assigner::Optimal => "optimal",
        }
    }
}

impl fmt::Display for Assigner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Assigner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "naive" => Ok(Assigner::Naive),
            "round_robin" | "round-robin" => Ok(Assigner::RoundRobin),
            "greedy" | "lpt" => Ok(Assigner::Greedy),
            "optimal" => Ok(Assigner::Optimal),
            other => Err(format!(
                "unknown assigner {other:?} (expected naive, round_robin, greedy or optimal)"
            )),
        }
    }
}

/// Loads and imbalance ratio of `assignment` under `budgets`.
pub fn imbalance(budgets: &[u64], assignment: &Assignment) -> Result<LoadReport, PartitionError> {
    if assignment.head_count() != budgets.len() {
        return Err(PartitionError::HeadCount {
            expected: budgets.len(),
            found: assignment.head_count(),
        });
    }
    Ok(LoadReport::from_loads(assignment.loads(budgets)))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssignmentFile {
    version: u32,
    devices: usize,
    assignment: Vec<PlacementEntry>,
    loads: Vec<u64>,
    imbalance: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlacementEntry {
    layer: usize,
    head: usize,
    device: usize,
}

/// Version-1 assignment document.
pub fn assignment_to_json(
    heads: &[HeadId],
    assignment: &Assignment,
    report: &LoadReport,
) -> String {
    let file = AssignmentFile {
        version: ASSIGNMENT_FORMAT_VERSION,
        devices: assignment.devices,
        assignment: heads
            .iter()
            .zip(&assignment.device_of)
            .map(|(id, &device)| PlacementEntry {
                layer: id.layer,
                head: id.head,
                device,
            })
            .collect(),
        loads: report.loads.clone(),
        imbalance: report.imbalance,
    };
    let mut text = serde_json::to_string_pretty(&file).expect("assignment serializes");
    text.push('\n');
    text
}

/// Parses an assignment document, checking the device indices and that the stated
/// imbalance agrees with the stated loads.
pub fn parse_assignment(
    text: &str,
) -> Result<(Vec<HeadId>, Assignment, LoadReport), PartitionError> {
    let file: AssignmentFile =
        serde_json::from_str(text).map_err(|e| PartitionError::File(e.to_string()))?;
    if file.version != ASSIGNMENT_FORMAT_VERSION {
        return Err(PartitionError::File(format!(
            "unsupported version {}",
            file.version
        )));
    }
    let heads: Vec<HeadId> = file
        .assignment
        .iter()
        .map(|e| HeadId::new(e.layer, e.head))
        .collect();
    if heads.iter().collect::<HashSet<_>>().len() != heads.len() {
        return Err(PartitionError::File("a head appears more than once".into()));
    }
    let assignment = Assignment::new(
        file.devices,
        file.assignment.iter().map(|e| e.device).collect(),
    )?;
    if file.loads.len() != file.devices {
        return Err(PartitionError::File(format!(
            "{} loads for {} devices",
            file.loads.len(),
            file.devices
        )));
    }
    let report = LoadReport::from_loads(file.loads);
    if report.imbalance.to_bits() != file.imbalance.to_bits() {
        return Err(PartitionError::File(format!(
            "imbalance {} does not match loads (expected {})",
            file.imbalance, report.imbalance
        )));
    }
    Ok((heads, assignment, report))
}
