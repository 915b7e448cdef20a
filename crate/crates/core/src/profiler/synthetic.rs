use super::ProfileError;
use crate::attention::{AttentionHead, AttentionWorkload, Matrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Per-head power-law exponents of a synthetic workload.
#[derive(Debug, Clone, PartialEq)]
pub enum Exponents {
    /// Drawn uniformly from `[min, max]` with the workload seed.
    Range { min: f64, max: f64 },
    /// One exponent per head, used as given.
    Fixed(Vec<f64>),
}

/// Recipe for a synthetic heterogeneous attention layer.
///
/// Head `h` attends with sorted weights `w_i ∝ i^(-s_h)` (rank `i` from 1), scaled per
/// entry by `exp(N(0, noise²))`, with the key order shuffled once per head.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorkloadSpec {
    pub layer: usize,
    pub heads: usize,
    pub context_length: usize,
    pub queries: usize,
    pub head_dim: usize,
    pub exponents: Exponents,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticWorkloadSpec {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: String| Err(ProfileError::Spec(m));
        for (name, v) in [
            ("heads", self.heads),
            ("context_length", self.context_length),
            ("queries", self.queries),
            ("head_dim", self.head_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        match &self.exponents {
            Exponents::Range { min, max } => {
                if !(min.is_finite() && max.is_finite() && *min >= 0.0 && min <= max) {
                    return bad(format!(
                        "exponent range [{min}, {max}] must satisfy 0 <= min <= max"
                    ));
                }
            }
            Exponents::Fixed(list) => {
                if list.len() != self.heads {
                    return bad(format!(
                        "{} exponents given for {} heads",
                        list.len(),
                        self.heads
                    ));
                }
                if let Some(s) = list.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
                    return bad(format!("exponent {s} must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }
}

/// `count` exponents uniform in `[min, max]`, reproducible from `seed`.
pub fn draw_exponents(count: usize, min: f64, max: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_exponents(&mut rng, count, min, max)
}

fn sample_exponents(rng: &mut impl Rng, count: usize, min: f64, max: f64) -> Vec<f64> {
    (0..count)
        .map(|_| {
            if max > min {
                rng.random_range(min..=max)
            } else {
                min
            }
        })
        .collect()
}

/// Realizes `spec` as direct pre-softmax scores plus Gaussian value rows.
pub fn generate_workload(spec: &SyntheticWorkloadSpec) -> Result<AttentionWorkload, ProfileError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let exponents = match &spec.exponents {
        Exponents::Range { min, max } => sample_exponents(&mut rng, spec.heads, *min, *max),
        Exponents::Fixed(list) => list.clone(),
    };
    let n_k = spec.context_length;
    let heads = exponents
        .iter()
        .map(|&s| {
            let mut rank: Vec<usize> = (1..=n_k).collect();
            rank.shuffle(&mut rng);
            let log_rank: Vec<f64> = rank.iter().map(|&r| (r as f64).ln()).collect();
            let scores = Matrix::from_fn(spec.queries, n_k, |_, j| {
                let z: f64 = if spec.noise > 0.0 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                -s * log_rank[j] + spec.noise * z
            });
            let value = Matrix::from_fn(n_k, spec.head_dim, |_, _| rng.sample(StandardNormal));
            AttentionHead::from_logits(scores, value)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AttentionWorkload::new(spec.layer, heads)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{dense_attention, recovery_ratio, SelectionPolicy};

    fn spec(exponents: Exponents, noise: f64) -> SyntheticWorkloadSpec {
        SyntheticWorkloadSpec {
            layer: 0,
            heads: 2,
            context_length: 1024,
            queries: 2,
            head_dim: 4,
            exponents,
            noise,
            seed: 11,
        }
    }

    #[test]
    fn flat_exponent_is_uniform() {
        let w = generate_workload(&spec(Exponents::Fixed(vec![1e-9, 0.0]), 0.0)).unwrap();
        for head in w.heads() {
            let (a, _) = dense_attention(head);
            for k in [1, 100, 512, 1000] {
                let r = recovery_ratio(&a, k, SelectionPolicy::PerQueryTopK).unwrap();
                assert!((r - k as f64 / 1024.0).abs() < 1e-6, "k={k} r={r}");
            }
        }
    }

    #[test]
    fn power_law_partial_sums() {
        let w = generate_workload(&spec(Exponents::Fixed(vec![2.0, 2.0]), 0.0)).unwrap();
        let (a, _) = dense_attention(&w.heads()[0]);
        let partial = |n: usize| (1..=n).map(|i| (i as f64).powi(-2)).sum::<f64>();
        let expected = partial(10) / partial(1024);
        let r = recovery_ratio(&a, 10, SelectionPolicy::PerQueryTopK).unwrap();
        assert!((r - expected).abs() < 1e-6, "{r} vs {expected}");
    }

    #[test]
    fn deterministic_per_seed() {
        let s = spec(Exponents::Range { min: 0.3, max: 2.5 }, 0.1);
        assert_eq!(
            generate_workload(&s).unwrap(),
            generate_workload(&s).unwrap()
        );
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(
            generate_workload(&s).unwrap(),
            generate_workload(&other).unwrap()
        );
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(Exponents::Fixed(vec![1.0]), 0.0);
        assert!(generate_workload(&s).is_err());
        s.exponents = Exponents::Range { min: 2.0, max: 1.0 };
        assert!(generate_workload(&s).is_err());
        s.exponents = Exponents::Range { min: 1.0, max: 2.0 };
        s.queries = 0;
        assert!(generate_workload(&s).is_err());
        s.queries = 1;
        s.noise = -1.0;
        assert!(generate_workload(&s).is_err());
    }
}
