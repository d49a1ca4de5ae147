//! Rank correlations checked against brute-force reference implementations.

use bouquet::analysis::{
    average_ranks, kendall_tau, normalize_about_mean, spearman_rho, tau_counts, AnalysisError,
    PairedSeries,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rank i = 1 + #{j: v_j < v_i} + (#{j: v_j == v_i} - 1) / 2.
fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    oracle_pearson(&oracle_ranks(x), &oracle_ranks(y))
}

/// Exhaustive pair counting.
fn oracle_kendall(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                ties_x += 1;
            }
            if dy == 0.0 {
                ties_y += 1;
            }
            if dx != 0.0 && dy != 0.0 {
                if (dx > 0.0) == (dy > 0.0) {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    (concordant - discordant) as f64 / ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt()
}

fn degenerate(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

#[test]
fn thousand_random_integer_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut checked = 0;
    let mut with_ties = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        let range = rng.random_range(2..=10);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..range) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..range) as f64).collect();
        let series = PairedSeries::unlabelled(x.clone(), y.clone());
        if degenerate(&x) || degenerate(&y) {
            assert!(matches!(series, Err(AnalysisError::DegenerateSeries(_))));
            continue;
        }
        let series = series.unwrap();
        let rho = spearman_rho(&series).unwrap();
        let tau = kendall_tau(&series).unwrap();
        let expect_rho = oracle_spearman(&x, &y);
        let expect_tau = oracle_kendall(&x, &y);
        assert!((rho - expect_rho).abs() <= 1e-12, "rho {rho} vs {expect_rho} for {x:?} {y:?}");
        assert_eq!(tau, expect_tau, "tau for {x:?} {y:?}");
        checked += 1;
        if oracle_ranks(&x).iter().any(|r| r.fract() != 0.0) {
            with_ties += 1;
        }
    }
    assert!(checked > 900, "only {checked} non-degenerate cases");
    assert!(with_ties > 300, "only {with_ties} cases with ties");
}

#[test]
fn ranks_match_oracle() {
    let v = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0, 5.0];
    assert_eq!(average_ranks(&v), oracle_ranks(&v));
}

#[test]
fn opposite_orientation_flips_sign() {
    let x = vec![10.0, 20.0, 30.0, 40.0];
    let y = vec![4.0, 3.0, 2.0, 1.0];
    let labels: Vec<String> = (0..4).map(|i| i.to_string()).collect();
    // Time (lower is better) against score (higher is better).
    let s = PairedSeries::new(labels, x, y, false, true).unwrap();
    assert_eq!(spearman_rho(&s).unwrap(), 1.0);
    assert_eq!(kendall_tau(&s).unwrap(), 1.0);
}

#[test]
fn f32_agrees_with_f64() {
    let x = [1.0, 2.0, 2.0, 5.0, 7.0, 7.0, 7.0, 9.0];
    let y = [3.0, 1.0, 4.0, 4.0, 6.0, 5.0, 9.0, 8.0];
    let s64 = PairedSeries::<f64>::unlabelled(x.to_vec(), y.to_vec()).unwrap();
    let s32 = PairedSeries::<f32>::unlabelled(
        x.iter().map(|&v| v as f32).collect(),
        y.iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    assert!((spearman_rho(&s64).unwrap() - spearman_rho(&s32).unwrap() as f64).abs() < 1e-6);
    assert!((kendall_tau(&s64).unwrap() - kendall_tau(&s32).unwrap() as f64).abs() < 1e-6);
}

#[test]
fn short_and_nonfinite_inputs_are_rejected() {
    assert!(matches!(
        PairedSeries::unlabelled(vec![1.0], vec![2.0]),
        Err(AnalysisError::TooShort(1))
    ));
    assert!(matches!(
        PairedSeries::unlabelled(vec![1.0, f64::NAN], vec![2.0, 3.0]),
        Err(AnalysisError::NonFinite(1))
    ));
    assert!(matches!(
        PairedSeries::unlabelled(vec![1.0, 2.0], vec![2.0]),
        Err(AnalysisError::LengthMismatch { .. })
    ));
}

fn distinct_series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(-1000i32..1000, n),
            proptest::collection::vec(-1000i32..1000, n),
        )
            .prop_map(|(a, b)| {
                (
                    a.into_iter().map(f64::from).collect::<Vec<_>>(),
                    b.into_iter().map(f64::from).collect::<Vec<_>>(),
                )
            })
            .prop_filter("non-degenerate", |(a, b)| !degenerate(a) && !degenerate(b))
    })
}

proptest! {
    #[test]
    fn strictly_increasing_transform_changes_nothing((x, y) in distinct_series()) {
        let base = PairedSeries::unlabelled(x.clone(), y.clone()).unwrap();
        let fx: Vec<f64> = x.iter().map(|v| v * v * v + 3.0 * v).collect();
        let fy: Vec<f64> = y.iter().map(|v| (v / 500.0).exp()).collect();
        let moved = PairedSeries::unlabelled(fx, fy).unwrap();
        prop_assert!((spearman_rho(&base).unwrap() - spearman_rho(&moved).unwrap()).abs() < 1e-12);
        prop_assert_eq!(kendall_tau(&base).unwrap(), kendall_tau(&moved).unwrap());
    }

    #[test]
    fn knight_counts_match_pairwise((x, y) in distinct_series()) {
        let s = PairedSeries::unlabelled(x.clone(), y.clone()).unwrap();
        prop_assert_eq!(kendall_tau(&s).unwrap(), oracle_kendall(&x, &y));
        let c = tau_counts(&x, &y);
        prop_assert!(c.n1 <= c.n0 && c.n2 <= c.n0);
    }

    #[test]
    fn correlations_are_symmetric_and_bounded((x, y) in distinct_series()) {
        let xy = PairedSeries::unlabelled(x.clone(), y.clone()).unwrap();
        let yx = PairedSeries::unlabelled(y, x).unwrap();
        let rho = spearman_rho(&xy).unwrap();
        let tau = kendall_tau(&xy).unwrap();
        prop_assert!((-1.0..=1.0).contains(&rho) && (-1.0..=1.0).contains(&tau));
        prop_assert!((rho - spearman_rho(&yx).unwrap()).abs() < 1e-12);
        prop_assert_eq!(tau, kendall_tau(&yx).unwrap());
    }

    #[test]
    fn normalized_values_average_to_one(v in proptest::collection::vec(0.001f64..1e6, 1..50)) {
        let norm = normalize_about_mean(&v).unwrap();
        let mean = norm.iter().sum::<f64>() / norm.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
    }
}
