use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hlsirm::clustering::{adjusted_rand_index, cluster_items, cosine_affinity, select_k};
use hlsirm::data::{simulate_dataset, SimulateOptions, Sizes, Truth};
use hlsirm::linalg::{self, dot};
use hlsirm::model::Hyperparameters;
use hlsirm::postprocess::{align_chain, alpha_tilde, beta_tilde, ReferencePolicy};
use hlsirm::sampler::{run_chain, ChainConfig};

#[test]
fn alignment_preserves_inner_products_and_adjusted_effects() {
    let hp = Hyperparameters::default();
    let sizes = Sizes::new(vec![8, 6, 5], 6, 2);
    let (data, _) = simulate_dataset(&Truth::Prior(hp.clone()), &sizes, 31, &SimulateOptions::default()).unwrap();
    let config = ChainConfig {
        iterations: 1_200,
        burn_in: 200,
        thin: 5,
        seed: 31,
        ..Default::default()
    };
    let chain = run_chain(&data, &hp, &config).unwrap();
    let aligned = align_chain(&chain, &ReferencePolicy::PilotMean).unwrap();
    assert_eq!(aligned.samples.len(), chain.samples.len());
    let mut worst_ip = 0.0f64;
    let mut worst_tilde = 0.0f64;
    for (raw, al) in chain.samples.iter().zip(&aligned.samples) {
        for k in 0..raw.num_groups() {
            for (zr, za) in raw.individual_positions[k].iter().zip(&al.individual_positions[k]) {
                for (wr, wa) in raw.item_positions.iter().zip(&al.item_positions) {
                    worst_ip = worst_ip.max((dot(zr, wr) - dot(za, wa)).abs());
                }
            }
        }
        for (a, b) in alpha_tilde(raw).iter().zip(alpha_tilde(al)) {
            worst_tilde = worst_tilde.max((a - b).abs());
        }
        for (a, b) in beta_tilde(raw).iter().zip(beta_tilde(al)) {
            worst_tilde = worst_tilde.max((a - b).abs());
        }
    }
    assert!(worst_ip < 1e-10, "inner products moved by {worst_ip}");
    assert!(worst_tilde < 1e-12, "adjusted effects moved by {worst_tilde}");
}

fn random_items(rng: &mut ChaCha8Rng, p: usize, d: usize) -> Vec<Vec<f64>> {
    (0..p).map(|_| (0..d).map(|_| linalg::standard_normal(rng)).collect()).collect()
}

fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| linalg::standard_normal(rng)).qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clustering_ignores_item_magnitudes(seed in 0u64..100_000, k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_items(&mut rng, 14, 3);
        let scaled: Vec<Vec<f64>> = w.iter().map(|v| {
            let c = 0.05 + 20.0 * rng.random::<f64>();
            v.iter().map(|x| c * x).collect()
        }).collect();
        let a = cosine_affinity(&w).matrix;
        let b = cosine_affinity(&scaled).matrix;
        prop_assert!((&a - &b).amax() < 1e-12);
        let ra = cluster_items(&w, k, 3).unwrap();
        let rb = cluster_items(&scaled, k, 3).unwrap();
        prop_assert_eq!(&ra.labels, &rb.labels);
        prop_assert!((ra.silhouette.unwrap() - rb.silhouette.unwrap()).abs() < 1e-12);
        prop_assert!((ra.dbi.as_ref().unwrap().value - rb.dbi.as_ref().unwrap().value).abs() < 1e-12 * ra.dbi.as_ref().unwrap().value.max(1.0));
    }

    #[test]
    fn clustering_ignores_global_rotations(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let w = random_items(&mut rng, 16, d);
        let r = orthogonal(&mut rng, d);
        let rotated: Vec<Vec<f64>> = w.iter().map(|v| (0..d).map(|c| (0..d).map(|a| v[a] * r[(a, c)]).sum()).collect()).collect();
        prop_assert!((cosine_affinity(&w).matrix - cosine_affinity(&rotated).matrix).amax() < 1e-10);
        let sa = select_k(&w, 2..=6, 9).unwrap();
        let sb = select_k(&rotated, 2..=6, 9).unwrap();
        prop_assert_eq!(sa.recommended, sb.recommended);
        for (x, y) in sa.results.iter().zip(&sb.results) {
            let lx: Vec<usize> = x.labels.iter().map(|l| l.unwrap()).collect();
            let ly: Vec<usize> = y.labels.iter().map(|l| l.unwrap()).collect();
            prop_assert!((adjusted_rand_index(&lx, &ly).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((x.silhouette.unwrap() - y.silhouette.unwrap()).abs() < 1e-10);
            let (dx, dy) = (x.dbi.as_ref().unwrap().value, y.dbi.as_ref().unwrap().value);
            prop_assert!((dx - dy).abs() < 1e-10 * dx.max(1.0));
        }
    }
}
