//! Reference implementations used only by tests. Each one is written from the
//! definition, with no code shared with the library.

#![allow(dead_code)]

use headload::attention::{AttentionHead, Matrix};
use headload::profiler::RecoveryCurve;
use rand::Rng;
use rand_distr::StandardNormal;

/// Q, K, V as plain nested vectors.
#[derive(Debug, Clone)]
pub struct RawHead {
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl RawHead {
    pub fn random(rng: &mut impl Rng, n_q: usize, n_k: usize, d: usize) -> Self {
        let mut m = |rows: usize| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| {
                    (0..d)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        };
        let q = m(n_q);
        let k = m(n_k);
        let v = m(n_k);
        Self { q, k, v }
    }

    pub fn head(&self) -> AttentionHead {
        AttentionHead::new(
            Matrix::from_rows(&self.q).unwrap(),
            Matrix::from_rows(&self.k).unwrap(),
            Matrix::from_rows(&self.v).unwrap(),
        )
        .unwrap()
    }

    pub fn scores(&self) -> Vec<Vec<f64>> {
        let d = self.q[0].len() as f64;
        self.q
            .iter()
            .map(|q| {
                self.k
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect()
            })
            .collect()
    }

    /// Softmax of each row over `keep[i]` with plain exponentials, then the weighted sum of V.
    pub fn attend(&self, keep: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let scores = self.scores();
        let d = self.v[0].len();
        scores
            .iter()
            .zip(keep)
            .map(|(row, kept)| {
                let z: f64 = kept.iter().map(|&j| row[j].exp()).sum();
                let mut out = vec![0.0; d];
                for &j in kept {
                    let w = row[j].exp() / z;
                    for (o, v) in out.iter_mut().zip(&self.v[j]) {
                        *o += w * v;
                    }
                }
                out
            })
            .collect()
    }

    pub fn dense_weights(&self) -> Vec<Vec<f64>> {
        self.scores()
            .iter()
            .map(|row| {
                let z: f64 = row.iter().map(|s| s.exp()).sum();
                row.iter().map(|s| s.exp() / z).collect()
            })
            .collect()
    }

    pub fn all_keys(&self) -> Vec<Vec<usize>> {
        vec![(0..self.k.len()).collect(); self.q.len()]
    }

    /// Per-row top-`k` by full sort of (score, index).
    pub fn per_query_keep(&self, k: usize) -> Vec<Vec<usize>> {
        self.scores()
            .iter()
            .map(|row| top_k_by_sort(row, k))
            .collect()
    }

    /// One top-`k` key set by dense column mass, shared by every row.
    pub fn column_keep(&self, k: usize) -> Vec<Vec<usize>> {
        let w = self.dense_weights();
        let mass: Vec<f64> = (0..self.k.len())
            .map(|j| w.iter().map(|r| r[j]).sum())
            .collect();
        vec![top_k_by_sort(&mass, k); self.q.len()]
    }
}

/// Indices of the `k` largest values, lower index first on ties, returned ascending.
pub fn top_k_by_sort(values: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut idx: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
    idx.sort();
    idx
}

pub fn max_abs_diff(a: &Matrix, b: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            worst = worst.max((a.get(i, j) - x).abs());
        }
    }
    worst
}

/// Recovery at every budget from sorted row prefix sums, averaged over rows.
pub fn prefix_recovery(weights: &[Vec<f64>]) -> Vec<f64> {
    let n_k = weights[0].len();
    let mut r = vec![0.0; n_k + 1];
    for row in weights {
        let mut sorted = row.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut acc = 0.0;
        for (k, w) in sorted.iter().enumerate() {
            acc += w;
            r[k + 1] += acc / weights.len() as f64;
        }
    }
    r
}

/// First budget whose recovery reaches `p`, by linear scan.
pub fn first_reaching(recovery: &[f64], p: f64) -> usize {
    recovery
        .iter()
        .position(|&r| r >= p)
        .unwrap_or(recovery.len() - 1)
}

/// Pearson correlation from raw moment sums.
pub fn pearson_moments(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Minimum makespan over every assignment, enumerating labelings up to device renaming.
pub fn exhaustive_makespan(budgets: &[u64], devices: usize) -> u64 {
    fn go(i: usize, used: usize, budgets: &[u64], loads: &mut Vec<u64>, best: &mut u64) {
        if i == budgets.len() {
            *best = (*best).min(*loads.iter().max().unwrap());
            return;
        }
        for d in 0..(used + 1).min(loads.len()) {
            loads[d] += budgets[i];
            go(i + 1, used.max(d + 1), budgets, loads, best);
            loads[d] -= budgets[i];
        }
    }
    let mut best = u64::MAX;
    go(0, 0, budgets, &mut vec![0; devices], &mut best);
    best
}

/// Every one of the `devices^N` device vectors in lexicographic order; returns the
/// smallest makespan and the first vector attaining it.
pub fn enumerate_all(budgets: &[u64], devices: usize) -> (u64, Vec<usize>) {
    let n = budgets.len();
    let mut v = vec![0; n];
    let mut best = (u64::MAX, v.clone());
    loop {
        let mut loads = vec![0; devices];
        for (h, &d) in v.iter().enumerate() {
            loads[d] += budgets[h];
        }
        let m = *loads.iter().max().unwrap();
        if m < best.0 {
            best = (m, v.clone());
        }
        // odometer with the last head as the fastest digit
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            v[i] += 1;
            if v[i] < devices {
                break;
            }
            v[i] = 0;
        }
    }
}

/// Best minimum recovery over all allocations `start_h + j_h·Δ` with `Σ j_h = 0`,
/// each inside `[floor, n_k]`.
pub fn grid_optimum(curves: &[RecoveryCurve], start: &[usize], delta: usize, floor: usize) -> f64 {
    let n_k = curves[0].context_length() as i64;
    let (delta, floor) = (delta as i64, floor as i64);
    #[allow(clippy::too_many_arguments)]
    fn go(
        h: usize,
        shift: i64,
        curves: &[RecoveryCurve],
        start: &[usize],
        delta: i64,
        floor: i64,
        n_k: i64,
        current: f64,
        best: &mut f64,
    ) {
        let base = start[h] as i64;
        if h + 1 == curves.len() {
            let b = base - shift * delta;
            if b >= floor && b <= n_k {
                let m = current.min(curves[h].recovery_at(b as usize));
                *best = best.max(m);
            }
            return;
        }
        let lo = (floor - base).div_euclid(delta) - 1;
        let hi = (n_k - base).div_euclid(delta) + 1;
        for j in lo..=hi {
            let b = base + j * delta;
            if b < floor || b > n_k {
                continue;
            }
            let m = current.min(curves[h].recovery_at(b as usize));
            go(h + 1, shift + j, curves, start, delta, floor, n_k, m, best);
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(
        0,
        0,
        curves,
        start,
        delta,
        floor,
        n_k,
        f64::INFINITY,
        &mut best,
    );
    best
}

/// Largest change in any head's recovery from moving its budget by one quantum.
pub fn one_step_effect(curves: &[RecoveryCurve], budgets: &[usize], delta: usize) -> f64 {
    curves
        .iter()
        .zip(budgets)
        .map(|(c, &b)| {
            let n_k = c.context_length();
            let up = c.recovery_at((b + delta).min(n_k)) - c.recovery_at(b);
            let down = c.recovery_at(b) - c.recovery_at(b.saturating_sub(delta));
            up.max(down)
        })
        .fold(0.0, f64::max)
}

/// Power-law budgets by head index, `cap · (h+1)^(-a)` rounded and clamped below by `floor`.
pub fn power_law_budgets(heads: usize, cap: f64, a: f64, floor: u64) -> Vec<u64> {
    (1..=heads)
        .map(|r| ((cap * (r as f64).powf(-a)).round() as u64).max(floor))
        .collect()
}

pub fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}
