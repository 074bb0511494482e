use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hlsirm::evaluate::{auc, effective_sample_size, geweke_z, max_f1_threshold, metrics_at, split_rhat};
use hlsirm::linalg::standard_normal;

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0u8..12, any::<bool>()), 2..40)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
        .prop_map(|v| (v.iter().map(|x| x.0 as f64 / 12.0 + 0.01).collect(), v.iter().map(|x| x.1).collect()))
}

proptest! {
    #[test]
    fn auc_unchanged_by_monotone_transforms((scores, labels) in scored()) {
        let base = auc(&scores, &labels).unwrap();
        let logit: Vec<f64> = scores.iter().map(|p| (p / (1.0 - p + 1e-9)).ln()).collect();
        let cubed: Vec<f64> = scores.iter().map(|p| 3.0 * p.powi(3) - 7.0).collect();
        prop_assert_eq!(auc(&logit, &labels).unwrap(), base);
        prop_assert_eq!(auc(&cubed, &labels).unwrap(), base);
    }

    #[test]
    fn no_real_threshold_beats_the_selected_one((scores, labels) in scored()) {
        let best = metrics_at(&scores, &labels, max_f1_threshold(&scores, &labels).unwrap()).unwrap().f1;
        let mut cuts: Vec<f64> = scores.clone();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut grid = vec![cuts[0] - 1.0, cuts[cuts.len() - 1] + 1.0];
        grid.extend(cuts.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        grid.extend(&cuts);
        for t in grid {
            prop_assert!(metrics_at(&scores, &labels, t).unwrap().f1 <= best + 1e-15);
        }
    }
}

fn ar1(rho: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = standard_normal(rng) / (1.0 - rho * rho).sqrt();
    (0..n)
        .map(|_| {
            x = rho * x + standard_normal(rng);
            x
        })
        .collect()
}

#[test]
fn ess_of_ar1_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n = 100_000;
    for rho in [0.0, 0.5, 0.9] {
        let mean_ess: f64 = (0..10).map(|_| effective_sample_size(&ar1(rho, n, &mut rng))).sum::<f64>() / 10.0;
        let exact = n as f64 * (1.0 - rho) / (1.0 + rho);
        assert!((mean_ess / exact - 1.0).abs() < 0.08, "rho {rho}: ess {mean_ess} vs {exact}");
    }
}

#[test]
fn geweke_scores_of_stationary_series_are_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let z: Vec<f64> = (0..1_000).map(|_| geweke_z(&ar1(0.6, 4_000, &mut rng))).collect();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64;
    assert!(mean.abs() < 0.15, "mean {mean}");
    assert!((var - 1.0).abs() < 0.2, "variance {var}");
}

#[test]
fn split_rhat_flags_a_shifted_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let a: Vec<f64> = (0..2_000).map(|_| standard_normal(&mut rng)).collect();
    let b: Vec<f64> = (0..2_000).map(|_| standard_normal(&mut rng)).collect();
    let shifted: Vec<f64> = b.iter().map(|x| x + 2.0).collect();
    let same = split_rhat(&[&a, &b]).unwrap();
    assert!((same - 1.0).abs() < 0.01, "{same}");
    assert!(split_rhat(&[&a, &shifted]).unwrap() > 1.3);
    // Both chains drift the same way: only splitting exposes it.
    let d1: Vec<f64> = (0..2_000).map(|i| i as f64 / 500.0 + 0.1 * rng.random::<f64>()).collect();
    let d2: Vec<f64> = (0..2_000).map(|i| i as f64 / 500.0 + 0.1 * rng.random::<f64>()).collect();
    assert!(split_rhat(&[&d1, &d2]).unwrap() > 1.3);
}
