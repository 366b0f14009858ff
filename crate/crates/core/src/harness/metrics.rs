//! Summary statistics and the paired permutation test used by the
//! comparison experiments.

use crate::rng::Rng;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Two-sided paired permutation test on the mean difference: random sign
/// flips of the per-pair differences, p = share of flipped means at least as
/// extreme as the observed one (add-one smoothed).
pub fn paired_permutation_test(pairs: &[(f64, f64)], iterations: usize, seed: u64) -> f64 {
    if pairs.is_empty() {
        return 1.0;
    }
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let observed = mean(&diffs).abs();
    if diffs.iter().all(|d| *d == 0.0) {
        return 1.0;
    }
    let mut rng = Rng::new(seed).stream("permutation-test");
    let mut at_least = 0usize;
    for _ in 0..iterations {
        let flipped: f64 = diffs
            .iter()
            .map(|d| if rng.next_u64() & 1 == 0 { *d } else { -*d })
            .sum::<f64>()
            / diffs.len() as f64;
        if flipped.abs() >= observed - 1e-15 {
            at_least += 1;
        }
    }
    (at_least + 1) as f64 / (iterations + 1) as f64
}
