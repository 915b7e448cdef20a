mod common;

use common::*;
use headload::allocator::{oracle_topp_allocate, AllocatorChoice, AllocatorConfig};
use headload::attention::{
    dense_attention, output_error, sparse_attention, AttentionOutput, Matrix, Selection,
    SelectionPolicy,
};
use headload::partitioner::{greedy_assign, imbalance, naive_assign, optimal_assign};
use headload::profiler::{
    budget_for_recovery, budget_grid, build_profiles, generate_workload, normalized_budgets,
    pearson, stability_score, BudgetNormalization, Exponents, HeadProfile, Provenance,
    SyntheticWorkloadSpec,
};
use headload::simulator::{sweep, CostModel, SweepConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(
    heads: usize,
    n_k: usize,
    exponents: Exponents,
    noise: f64,
    seed: u64,
) -> SyntheticWorkloadSpec {
    SyntheticWorkloadSpec {
        layer: 0,
        heads,
        context_length: n_k,
        queries: 8,
        head_dim: 4,
        exponents,
        noise,
        seed,
    }
}

fn profiles(spec: &SyntheticWorkloadSpec, request: &str) -> Vec<HeadProfile> {
    let w = generate_workload(spec).unwrap();
    build_profiles(
        &w,
        &budget_grid(spec.context_length, 1),
        SelectionPolicy::PerQueryTopK,
        &Provenance::new(request, "synthetic"),
    )
    .unwrap()
}

#[test]
fn sparse_matches_brute_force_on_small_fixture() {
    // 2 queries, 4 keys, k = 2
    let raw = RawHead::random(&mut ChaCha8Rng::seed_from_u64(2024), 2, 4, 3);
    let head = raw.head();
    let got = sparse_attention(&head, Selection::per_query(2)).unwrap();
    assert!(max_abs_diff(got.matrix(), &raw.attend(&raw.per_query_keep(2))) <= 1e-12);
    let got = sparse_attention(&head, Selection::column_aggregate(2)).unwrap();
    assert!(max_abs_diff(got.matrix(), &raw.attend(&raw.column_keep(2))) <= 1e-12);
}

#[test]
fn output_error_second_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let b: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..3 {
        for j in 0..4 {
            num += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
            den += b[i][j] * b[i][j];
        }
    }
    let expected = (num / den).sqrt();
    let got = output_error(
        &AttentionOutput::new(Matrix::from_rows(&a).unwrap()),
        &AttentionOutput::new(Matrix::from_rows(&b).unwrap()),
    )
    .unwrap();
    assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
}

#[test]
fn median_error_falls_with_budget() {
    let n_k = 64;
    let budgets = [n_k / 8, n_k / 4, n_k / 2, n_k];
    let mut errors = vec![Vec::new(); budgets.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let head = RawHead::random(&mut rng, 4, n_k, 8).head();
        let dense = dense_attention(&head).1;
        for (slot, &k) in errors.iter_mut().zip(&budgets) {
            let sparse = sparse_attention(&head, Selection::per_query(k)).unwrap();
            slot.push(output_error(&sparse, &dense).unwrap());
        }
    }
    let medians: Vec<f64> = errors.into_iter().map(median).collect();
    assert!(medians.windows(2).all(|w| w[0] >= w[1]), "{medians:?}");
    assert_eq!(medians[3], 0.0);
}

#[test]
fn sparser_head_dominates() {
    let s = spec(2, 512, Exponents::Fixed(vec![2.0, 0.5]), 0.0, 9);
    let w = generate_workload(&s).unwrap();
    let ps = profiles(&s, "r");
    // the curves agree with a per-row sort of the dense weights
    for (head, p) in w.heads().iter().zip(&ps) {
        let (a, _) = dense_attention(head);
        let rows: Vec<Vec<f64>> = a.matrix().row_iter().map(|r| r.to_vec()).collect();
        let reference = prefix_recovery(&rows);
        for &(k, r) in p.curve.points() {
            assert!((r - reference[k]).abs() <= 1e-12);
        }
    }
    for k in 1..512 {
        assert!(
            ps[0].curve.recovery_at(k) > ps[1].curve.recovery_at(k),
            "k={k}"
        );
    }
}

#[test]
fn budget_lookup_matches_prefix_scan() {
    for seed in 0..5 {
        let s = spec(1, 1024, Exponents::Fixed(vec![2.0]), 0.0, seed);
        let w = generate_workload(&s).unwrap();
        let (a, _) = dense_attention(&w.heads()[0]);
        let rows: Vec<Vec<f64>> = a.matrix().row_iter().map(|r| r.to_vec()).collect();
        let expected = first_reaching(&prefix_recovery(&rows), 0.9);
        let got = budget_for_recovery(&profiles(&s, "r")[0].curve, 0.9).unwrap();
        assert_eq!(got, expected, "seed {seed}");
    }
}

#[test]
fn heterogeneous_budgets_spread() {
    let s = spec(32, 1024, Exponents::Range { min: 0.3, max: 2.5 }, 0.0, 1);
    let ps = profiles(&s, "r");
    let b: Vec<usize> = ps
        .iter()
        .map(|p| budget_for_recovery(&p.curve, 0.9).unwrap())
        .collect();
    let (lo, hi) = (*b.iter().min().unwrap(), *b.iter().max().unwrap());
    assert!(hi as f64 / lo as f64 > 2.0, "{b:?}");

    let curves: Vec<_> = ps.into_iter().map(|p| p.curve).collect();
    let topp = oracle_topp_allocate(&curves, 0.9).unwrap();
    let (lo, hi) = (
        topp.budgets().iter().min().unwrap(),
        topp.budgets().iter().max().unwrap(),
    );
    assert!(*hi as f64 / *lo as f64 > 2.0);
    assert_eq!(topp.total(), topp.budgets().iter().sum::<usize>());
}

#[test]
fn stability_matches_second_pearson() {
    let exponents = draw(16, 3);
    let groups: Vec<Vec<HeadProfile>> = (0..3)
        .map(|r| {
            profiles(
                &spec(16, 512, Exponents::Fixed(exponents.clone()), 0.05, 100 + r),
                &format!("req{r}"),
            )
        })
        .collect();
    let vectors: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| normalized_budgets(g, 0.9, BudgetNormalization::Max).unwrap())
        .collect();
    let mut expected = f64::INFINITY;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let r = pearson_moments(&vectors[i], &vectors[j]);
            assert!((pearson(&vectors[i], &vectors[j]).unwrap() - r).abs() <= 1e-9);
            expected = expected.min(r);
        }
    }
    let got = stability_score(&groups, 0.9, BudgetNormalization::Max).unwrap();
    assert!((got - expected).abs() <= 1e-9, "{got} vs {expected}");
    let by_sum = stability_score(&groups, 0.9, BudgetNormalization::Sum).unwrap();
    assert!((got - by_sum).abs() <= 1e-9);
}

fn draw(n: usize, seed: u64) -> Vec<f64> {
    headload::profiler::draw_exponents(n, 0.3, 2.5, seed)
}

#[test]
fn optimal_equals_full_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // 3^12 device vectors
    let b: Vec<u64> = (0..12).map(|_| rng.random_range(1..60)).collect();
    let (best, first) = enumerate_all(&b, 3);
    let o = optimal_assign(&b, 3).unwrap();
    assert_eq!(imbalance(&b, &o).unwrap().max_load, best);
    assert_eq!(o.device_of(), &first[..]);

    for _ in 0..40 {
        let n = rng.random_range(2..9);
        let d = rng.random_range(1..5);
        let b: Vec<u64> = (0..n).map(|_| rng.random_range(0..20)).collect();
        let (best, first) = enumerate_all(&b, d);
        let o = optimal_assign(&b, d).unwrap();
        assert_eq!(o.device_of(), &first[..], "{b:?} on {d}");
        assert_eq!(imbalance(&b, &o).unwrap().max_load, best);
    }
}

#[test]
fn greedy_fixture_is_optimal_by_enumeration() {
    let b = [7, 6, 5, 4, 3, 2];
    assert_eq!(enumerate_all(&b, 2).0, 14);
    assert_eq!(
        imbalance(&b, &greedy_assign(&b, 2).unwrap())
            .unwrap()
            .max_load,
        14
    );
    let b = [3, 3, 2, 2, 2];
    assert_eq!(enumerate_all(&b, 2).0, 6);
}

#[test]
fn contiguous_blocks_can_beat_lpt() {
    // greedy is not a universal improvement over contiguous blocks
    let b = [2, 2, 2, 3, 3];
    let naive = imbalance(&b, &naive_assign(&b, 2).unwrap()).unwrap();
    let greedy = imbalance(&b, &greedy_assign(&b, 2).unwrap()).unwrap();
    assert_eq!(naive.loads, vec![6, 6]);
    assert_eq!(greedy.max_load, 7);
}

#[test]
fn sweep_greedy_never_slower() {
    let config = SweepConfig {
        degrees: vec![1, 2, 4, 8],
        context_lengths: vec![512, 1024],
        heads: 32,
        queries: 4,
        head_dim: 4,
        exponents: Exponents::Range { min: 0.3, max: 2.5 },
        noise: 0.05,
        allocator: AllocatorChoice::MaxMin,
        allocator_config: AllocatorConfig::default(),
        budget_fraction: 0.25,
        policy: SelectionPolicy::PerQueryTopK,
        grid_step: 1,
        cost: CostModel::new(5.0, 0.01).unwrap(),
        seed: 8,
    };
    let rows = sweep(&config).unwrap();
    assert_eq!(rows.len(), 4 * 2 * 2);
    for pair in rows.chunks(2) {
        let (naive, greedy) = (&pair[0], &pair[1]);
        assert_eq!(
            (naive.assigner.as_str(), greedy.assigner.as_str()),
            ("naive", "greedy")
        );
        assert!(greedy.barrier_latency <= naive.barrier_latency, "{pair:?}");
        if greedy.degree == 1 {
            assert_eq!(greedy.speedup_vs_naive, 1.0);
        }
    }
}
