//! Exact scaled-dot-product attention, budgeted top-k sparse attention and the
//! attention-weight recovery ratio.
//!
//! Everything here works per head and in `f64`. Softmax always subtracts the row
//! maximum before exponentiating. Dense and sparse attention share one row kernel,
//! so a sparse call that keeps every key is bit-identical to the dense call.

mod matrix;

pub use matrix::Matrix;

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Rows of Q (and of direct logits).
    Queries,
    /// Rows of K / V (and columns of direct logits).
    Keys,
    /// Columns of Q / K.
    HeadDim,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Queries => "queries",
            Axis::Keys => "keys",
            Axis::HeadDim => "head_dim",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("head {head}: {matrix} has {found} along {axis}, expected {expected}")]
    Shape {
        head: usize,
        matrix: &'static str,
        axis: Axis,
        expected: usize,
        found: usize,
    },
    #[error("head {head}: {matrix} is empty along {axis}")]
    Empty {
        head: usize,
        matrix: &'static str,
        axis: Axis,
    },
    #[error("head {head}: {matrix} contains a non-finite entry")]
    NonFinite { head: usize, matrix: &'static str },
    #[error("causal masking needs queries <= keys, got {queries} queries over {keys} keys")]
    CausalShape { queries: usize, keys: usize },
    #[error("workload has no heads")]
    NoHeads,
    #[error("token budget {budget} outside [{min}, {max}]")]
    Budget {
        budget: usize,
        min: usize,
        max: usize,
    },
    #[error("output shapes differ: {left:?} vs {right:?}")]
    OutputShape {
        left: (usize, usize),
        right: (usize, usize),
    },
}

impl AttentionError {
    fn at_head(mut self, index: usize) -> Self {
        match &mut self {
            AttentionError::Shape { head, .. }
            | AttentionError::Empty { head, .. }
            | AttentionError::NonFinite { head, .. } => *head = index,
            _ => {}
        }
        self
    }
}

/// How a head's pre-softmax scores are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Logits {
    /// `Q·Kᵀ / √d_h`.
    Projected { query: Matrix, key: Matrix },
    /// Pre-softmax scores supplied directly (`n_q × n_k`), already scaled.
    Direct(Matrix),
}

/// One attention head: how its scores are formed plus its value matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    logits: Logits,
    value: Matrix,
    causal: bool,
}

fn check_nonempty(
    m: &Matrix,
    matrix: &'static str,
    row_axis: Axis,
    col_axis: Axis,
) -> Result<(), AttentionError> {
    if m.rows() == 0 {
        return Err(AttentionError::Empty {
            head: 0,
            matrix,
            axis: row_axis,
        });
    }
    if m.cols() == 0 {
        return Err(AttentionError::Empty {
            head: 0,
            matrix,
            axis: col_axis,
        });
    }
    if !m.is_finite() {
        return Err(AttentionError::NonFinite { head: 0, matrix });
    }
    Ok(())
}

impl AttentionHead {
    /// Head from `Q` (`n_q × d_h`), `K` (`n_k × d_h`) and `V` (`n_k × d_h`).
    pub fn new(query: Matrix, key: Matrix, value: Matrix) -> Result<Self, AttentionError> {
        check_nonempty(&query, "Q", Axis::Queries, Axis::HeadDim)?;
        check_nonempty(&key, "K", Axis::Keys, Axis::HeadDim)?;
        check_nonempty(&value, "V", Axis::Keys, Axis::HeadDim)?;
        let d = query.cols();
        for (m, name) in [(&key, "K"), (&value, "V")] {
            if m.cols() != d {
                return Err(AttentionError::Shape {
                    head: 0,
                    matrix: name,
                    axis: Axis::HeadDim,
                    expected: d,
                    found: m.cols(),
                });
            }
        }
        if value.rows() != key.rows() {
            return Err(AttentionError::Shape {
                head: 0,
                matrix: "V",
                axis: Axis::Keys,
                expected: key.rows(),
                found: value.rows(),
            });
        }
        Ok(Self {
            logits: Logits::Projected { query, key },
            value,
            causal: false,
        })
    }

    /// Head whose pre-softmax scores (`n_q × n_k`) are given directly.
    pub fn from_logits(scores: Matrix, value: Matrix) -> Result<Self, AttentionError> {
        check_nonempty(&scores, "scores", Axis::Queries, Axis::Keys)?;
        check_nonempty(&value, "V", Axis::Keys, Axis::HeadDim)?;
        if value.rows() != scores.cols() {
            return Err(AttentionError::Shape {
                head: 0,
                matrix: "V",
                axis: Axis::Keys,
                expected: scores.cols(),
                found: value.rows(),
            });
        }
        Ok(Self {
            logits: Logits::Direct(scores),
            value,
            causal: false,
        })
    }

    /// Enables the causal mask. Query `i` sees keys `j <= i + (n_k - n_q)`, i.e. the
    /// queries are the last `n_q` positions of the context.
    pub fn with_causal(mut self, causal: bool) -> Result<Self, AttentionError> {
        if causal && self.query_count() > self.key_count() {
            return Err(AttentionError::CausalShape {
                queries: self.query_count(),
                keys: self.key_count(),
            });
        }
        self.causal = causal;
        Ok(self)
    }

    pub fn logits(&self) -> &Logits {
        &self.logits
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    pub fn query_count(&self) -> usize {
        match &self.logits {
            Logits::Projected { query, .. } => query.rows(),
            Logits::Direct(s) => s.rows(),
        }
    }

    pub fn key_count(&self) -> usize {
        self.value.rows()
    }

    /// Width of the output rows (`V`'s columns).
    pub fn head_dim(&self) -> usize {
        self.value.cols()
    }

    /// Number of keys visible to query `row` under the mask.
    fn visible(&self, row: usize) -> usize {
        if self.causal {
            row + 1 + (self.key_count() - self.query_count())
        } else {
            self.key_count()
        }
    }

    /// Pre-softmax scores with masked entries set to `-inf`.
    pub fn scores(&self) -> Matrix {
        let mut s = match &self.logits {
            Logits::Projected { query, key } => {
                let scale = 1.0 / (query.cols() as f64).sqrt();
                Matrix::from_fn(query.rows(), key.rows(), |i, j| {
                    let dot: f64 = query
                        .row(i)
                        .iter()
                        .zip(key.row(j))
                        .map(|(a, b)| a * b)
                        .sum();
                    dot * scale
                })
            }
            Logits::Direct(s) => s.clone(),
        };
        if self.causal {
            for i in 0..s.rows() {
                let visible = self.visible(i);
                s.row_mut(i)[visible..].fill(f64::NEG_INFINITY);
            }
        }
        s
    }
}

/// The heads of one attention layer. All heads share the context length `n_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWorkload {
    layer: usize,
    heads: Vec<AttentionHead>,
}

impl AttentionWorkload {
    pub fn new(layer: usize, heads: Vec<AttentionHead>) -> Result<Self, AttentionError> {
        let first = heads.first().ok_or(AttentionError::NoHeads)?;
        let n_k = first.key_count();
        for (h, head) in heads.iter().enumerate() {
            if head.key_count() != n_k {
                return Err(AttentionError::Shape {
                    head: h,
                    matrix: "V",
                    axis: Axis::Keys,
                    expected: n_k,
                    found: head.key_count(),
                });
            }
        }
        Ok(Self { layer, heads })
    }

    /// Like [`AttentionWorkload::new`] but builds each head with `make`, tagging any
    /// construction error with the head index.
    pub fn try_from_fn(
        layer: usize,
        count: usize,
        mut make: impl FnMut(usize) -> Result<AttentionHead, AttentionError>,
    ) -> Result<Self, AttentionError> {
        let heads = (0..count)
            .map(|h| make(h).map_err(|e| e.at_head(h)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(layer, heads)
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn heads(&self) -> &[AttentionHead] {
        &self.heads
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn context_length(&self) -> usize {
        self.heads[0].key_count()
    }
}

/// Row-stochastic `n_q × n_k` attention matrix of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights(Matrix);

impl AttentionWeights {
    /// Wraps a matrix after checking that entries are nonnegative and rows sum to 1.
    pub fn new(m: Matrix) -> Option<Self> {
        let ok = m.rows() > 0
            && m.row_iter().all(|r| {
                r.iter().all(|&x| x >= 0.0 && x.is_finite())
                    && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9
            });
        ok.then_some(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn key_count(&self) -> usize {
        self.0.cols()
    }
}

/// `n_q × d_h` attention output of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput(Matrix);

impl AttentionOutput {
    pub fn new(m: Matrix) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Granularity at which the top-k tokens are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Every query row keeps its own `k` highest-scoring keys.
    #[default]
    #[serde(rename = "per_query_topk")]
    PerQueryTopK,
    /// One set of `k` keys per head, chosen by dense attention column mass.
    #[serde(rename = "column_aggregate_topk")]
    ColumnAggregateTopK,
}

impl SelectionPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionPolicy::PerQueryTopK => "per_query_topk",
            SelectionPolicy::ColumnAggregateTopK => "column_aggregate_topk",
        }
    }
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SelectionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_query_topk" | "per-query" => Ok(SelectionPolicy::PerQueryTopK),
            "column_aggregate_topk" | "column-aggregate" => Ok(SelectionPolicy::ColumnAggregateTopK),
            other => Err(format!(
                "unknown selection policy {other:?} (expected per_query_topk or column_aggregate_topk)"
            )),
        }
    }
}

/// A selection policy together with its token budget `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub policy: SelectionPolicy,
    pub budget: usize,
}

impl Selection {
    pub fn per_query(budget: usize) -> Self {
        Self {
            policy: SelectionPolicy::PerQueryTopK,
            budget,
        }
    }

    pub fn column_aggregate(budget: usize) -> Self {
        Self {
            policy: SelectionPolicy::ColumnAggregateTopK,
            budget,
        }
    }
}

/// Softmax over `keep` (ascending key indices) followed by the weighted sum of the
/// corresponding value rows. Writes into `out` and, if given, the weights into `weights`.
fn attend_row(
    scores: &[f64],
    keep: &[usize],
    value: &Matrix,
    out: &mut [f64],
    weights: Option<&mut [f64]>,
) {
    out.fill(0.0);
    let max = keep
        .iter()
        .map(|&j| scores[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // nothing visible in the kept set
        return;
    }
    let exps: Vec<f64> = keep.iter().map(|&j| (scores[j] - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut weights = weights;
    for (&j, e) in keep.iter().zip(&exps) {
        let w = e / total;
        if let Some(ws) = weights.as_deref_mut() {
            ws[j] = w;
        }
        for (o, v) in out.iter_mut().zip(value.row(j)) {
            *o += w * v;
        }
    }
}

/// Orders key indices by descending key, lowest index first on ties.
fn rank_desc(values: &[f64], candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = candidates.collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Indices of the `k` largest entries (ties to the lower index), returned ascending.
fn top_k_ascending(
    values: &[f64],
    candidates: impl Iterator<Item = usize>,
    k: usize,
) -> Vec<usize> {
    let mut idx = rank_desc(values, candidates);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Exact attention: `A = softmax(Q·Kᵀ/√d_h)`, `O = A·V`.
pub fn dense_attention(head: &AttentionHead) -> (AttentionWeights, AttentionOutput) {
    let scores = head.scores();
    let (n_q, n_k) = scores.shape();
    let mut weights = Matrix::zeros(n_q, n_k);
    let mut out = Matrix::zeros(n_q, head.head_dim());
    for i in 0..n_q {
        let keep: Vec<usize> = (0..head.visible(i)).collect();
        attend_row(
            scores.row(i),
            &keep,
            head.value(),
            out.row_mut(i),
            Some(weights.row_mut(i)),
        );
    }
    (AttentionWeights(weights), AttentionOutput(out))
}

/// The key set every query of `head` keeps under `selection`, ascending per row.
pub fn selected_keys(
    head: &AttentionHead,
    selection: Selection,
) -> Result<Vec<Vec<usize>>, AttentionError> {
    let n_k = head.key_count();
    if selection.budget == 0 || selection.budget > n_k {
        return Err(AttentionError::Budget {
            budget: selection.budget,
            min: 1,
            max: n_k,
        });
    }
    let scores = head.scores();
    let n_q = scores.rows();
    Ok(match selection.policy {
        SelectionPolicy::PerQueryTopK => (0..n_q)
            .map(|i| top_k_ascending(scores.row(i), 0..head.visible(i), selection.budget))
            .collect(),
        SelectionPolicy::ColumnAggregateTopK => {
            let (weights, _) = dense_attention(head);
            let mass = weights.matrix().column_sums();
            let chosen = top_k_ascending(&mass, 0..n_k, selection.budget);
            (0..n_q)
                .map(|i| {
                    let visible = head.visible(i);
                    chosen.iter().copied().filter(|&j| j < visible).collect()
                })
                .collect()
        }
    })
}

/// Budgeted attention: softmax renormalized over the kept keys only.
///
/// Under a causal mask a query keeps at most its visible keys; a query whose
/// column-aggregate set is entirely masked produces a zero row.
pub fn sparse_attention(
    head: &AttentionHead,
    selection: Selection,
) -> Result<AttentionOutput, AttentionError> {
    let kept = selected_keys(head, selection)?;
    let scores = head.scores();
    let mut out = Matrix::zeros(scores.rows(), head.head_dim());
    for (i, keep) in kept.iter().enumerate() {
        attend_row(scores.row(i), keep, head.value(), out.row_mut(i), None);
    }
    Ok(AttentionOutput(out))
}

/// Recovery ratio for every budget `0..=n_k` at once; entry `k` is `r(k)`.
///
/// Values are clamped to `[0, 1]`, and are nondecreasing in `k` because each entry
/// adds nonnegative mass to the previous one.
pub fn recovery_profile(weights: &AttentionWeights, policy: SelectionPolicy) -> Vec<f64> {
    let m = weights.matrix();
    let (n_q, n_k) = m.shape();
    let mut total = vec![0.0; n_k + 1];
    match policy {
        SelectionPolicy::PerQueryTopK => {
            for row in m.row_iter() {
                let order = rank_desc(row, 0..n_k);
                let mut acc = 0.0;
                for (k, &j) in order.iter().enumerate() {
                    acc += row[j];
                    total[k + 1] += acc;
                }
            }
        }
        SelectionPolicy::ColumnAggregateTopK => {
            let mass = m.column_sums();
            let order = rank_desc(&mass, 0..n_k);
            let mut acc = 0.0;
            for (k, &j) in order.iter().enumerate() {
                acc += mass[j];
                total[k + 1] = acc;
            }
        }
    }
    total
        .iter()
        .map(|t| (t / n_q as f64).clamp(0.0, 1.0))
        .collect()
}

/// Fraction of a head's attention mass captured by its top-`k` tokens, averaged over queries.
pub fn recovery_ratio(
    weights: &AttentionWeights,
    k: usize,
    policy: SelectionPolicy,
) -> Result<f64, AttentionError> {
    let n_k = weights.key_count();
    if k > n_k {
        return Err(AttentionError::Budget {
            budget: k,
            min: 0,
            max: n_k,
        });
    }
    Ok(recovery_profile(weights, policy)[k])
}

/// Relative Frobenius error `‖sparse − dense‖ / ‖dense‖`.
///
/// Identical inputs give 0. A zero `dense` with a nonzero difference gives `+inf`.
pub fn output_error(
    sparse: &AttentionOutput,
    dense: &AttentionOutput,
) -> Result<f64, AttentionError> {
    let (a, b) = (sparse.matrix(), dense.matrix());
    if a.shape() != b.shape() {
        return Err(AttentionError::OutputShape {
            left: a.shape(),
            right: b.shape(),
        });
    }
    let diff = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    if diff == 0.0 {
        return Ok(0.0);
    }
    let norm = b.frobenius_norm();
    Ok(if norm == 0.0 {
        f64::INFINITY
    } else {
        diff / norm
    })
}
