use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hlsirm::data::{redraw_responses, sample_prior, simulate_dataset, Group, ResponseDataset, ResponseMatrix, SimulateOptions, Sizes, Truth};
use hlsirm::evaluate::effective_sample_size;
use hlsirm::model::{cell_log_likelihood, Hyperparameters, ModelState};
use hlsirm::sampler::{
    covariance_posterior, gibbs_covariances, gibbs_group_variance, sweep, update_group_block, update_item,
    update_residuals, BlockScales,
};

struct Moments {
    mean: f64,
    var: f64,
    se_mean: f64,
}

fn moments(x: &[f64], ess: f64) -> Moments {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Moments { mean, var, se_mean: (var / ess).sqrt() }
}

/// Standard error of the sample variance of iid draws, from the fourth central moment.
fn se_var(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    ((m4 - m2 * m2) / n).sqrt()
}

fn one_group(rows: Vec<Vec<Option<bool>>>) -> ResponseDataset {
    let n = rows.len();
    let p = rows[0].len();
    ResponseDataset::new(
        vec![Group {
            id: "g".into(),
            respondent_ids: (0..n).map(|i| format!("r{i}")).collect(),
            responses: ResponseMatrix::from_rows(rows).unwrap(),
        }],
        (0..p).map(|j| format!("q{j}")).collect(),
    )
    .unwrap()
}

#[test]
fn group_variance_draws_match_inverse_gamma_moments() {
    let hp = Hyperparameters::default();
    let mut s = ModelState::zeros(&[10], 2, 2);
    s.group_intercepts[0] = 0.4;
    for (i, a) in s.individual_intercepts[0].iter_mut().enumerate() {
        *a = 0.4 + 0.3 * (i as f64 - 4.5);
    }
    let ss: f64 = s.individual_intercepts[0].iter().map(|a| (a - 0.4).powi(2)).sum();
    let shape = hp.a_sigma + 5.0;
    let scale = hp.b_sigma + 0.5 * ss;
    let mean = scale / (shape - 1.0);
    let var = scale * scale / ((shape - 1.0).powi(2) * (shape - 2.0));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            gibbs_group_variance(&mut s, &hp, 0, &mut rng).unwrap();
            s.group_variances[0]
        })
        .collect();
    let m = moments(&draws, n as f64);
    assert!((m.mean - mean).abs() < 3.0 * m.se_mean, "mean {} vs {mean}", m.mean);
    assert!((m.var - var).abs() < 3.0 * se_var(&draws), "var {} vs {var}", m.var);
}

#[test]
fn covariance_draws_match_inverse_wishart_moments() {
    let hp = Hyperparameters::default();
    let mut s = ModelState::zeros(&[6, 4], 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for z in s.individual_positions.iter_mut().flatten() {
        z[0] = rng.random::<f64>() - 0.5;
        z[1] = 2.0 * rng.random::<f64>() - 1.0 + 0.5 * z[0];
    }
    for w in &mut s.item_positions {
        w[0] = 2.0 * rng.random::<f64>();
        w[1] = rng.random::<f64>() - w[0];
    }
    s.group_positions[1] = vec![0.3, -0.2];
    let post = covariance_posterior(&s, &hp);
    let d = 2.0;
    let n = 100_000;
    let mut zs: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut ws: Vec<[f64; 3]> = Vec::with_capacity(n);
    for _ in 0..n {
        gibbs_covariances(&mut s, &hp, &mut rng).unwrap();
        zs.push([s.psi_z[(0, 0)], s.psi_z[(0, 1)], s.psi_z[(1, 1)]]);
        ws.push([s.psi_w[(0, 0)], s.psi_w[(0, 1)], s.psi_w[(1, 1)]]);
    }
    let check = |draws: &[[f64; 3]], scale: &DMatrix<f64>, df: f64| {
        let c = df - d - 1.0;
        let entries = [(0, 0), (0, 1), (1, 1)];
        for (e, &(r, col)) in entries.iter().enumerate() {
            let x: Vec<f64> = draws.iter().map(|v| v[e]).collect();
            let m = moments(&x, n as f64);
            let mean = scale[(r, col)] / c;
            let var = ((df - d + 1.0) * scale[(r, col)].powi(2) + (df - d - 1.0) * scale[(r, r)] * scale[(col, col)])
                / ((df - d) * c * c * (df - d - 3.0));
            assert!((m.mean - mean).abs() < 3.0 * m.se_mean, "entry {r}{col} mean {} vs {mean}", m.mean);
            assert!((m.var - var).abs() < 3.0 * se_var(&x), "entry {r}{col} var {} vs {var}", m.var);
        }
    };
    check(&zs, &post.scale_z, post.df_z);
    check(&ws, &post.scale_w, post.df_w);
}

#[test]
fn single_residual_matches_quadrature() {
    let hp = Hyperparameters::with_dim(1);
    let data = one_group(vec![vec![Some(true)]]);
    let mut s = ModelState::zeros(&[1], 1, 1);
    s.individual_intercepts[0][0] = -0.7;
    s.item_intercepts[0] = 0.2;
    let rest = -0.5;
    let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
    let h = 1e-3;
    for i in 0..=20_000 {
        let e = -10.0 + i as f64 * h;
        let w = (cell_log_likelihood(true, rest + e) - 0.5 * e * e).exp();
        z0 += w;
        z1 += w * e;
        z2 += w * e * e;
    }
    let (mean, sd) = (z1 / z0, (z2 / z0 - (z1 / z0).powi(2)).sqrt());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            update_residuals(&mut s, &data, &hp, 2.0, &mut rng).unwrap();
            s.residuals[0][0][0]
        })
        .collect();
    let m = moments(&draws, effective_sample_size(&draws));
    assert!((m.mean - mean).abs() < 3.0 * m.se_mean, "mean {} vs {mean}", m.mean);
    let sq: Vec<f64> = draws.iter().map(|e| (e - m.mean).powi(2)).collect();
    let se_sd = moments(&sq, effective_sample_size(&sq)).se_mean / (2.0 * sd);
    assert!((m.var.sqrt() - sd).abs() < 3.0 * se_sd, "sd {} vs {sd}", m.var.sqrt());
}

/// Net probability flux between every pair of three bins, averaged over long
/// consecutive segments, must vanish for a reversible kernel.
fn assert_balanced_flux(mut step: impl FnMut() -> usize, segments: usize, length: usize) {
    let mut net = vec![Vec::new(); 3];
    for _ in 0..segments {
        let mut counts = [[0i64; 3]; 3];
        let mut prev = step();
        for _ in 0..length {
            let next = step();
            counts[prev][next] += 1;
            prev = next;
        }
        for (slot, (a, b)) in net.iter_mut().zip([(0, 1), (1, 2), (0, 2)]) {
            slot.push((counts[a][b] - counts[b][a]) as f64);
        }
    }
    for (pair, d) in net.iter().enumerate() {
        let m = moments(d, d.len() as f64);
        let z = if m.se_mean > 0.0 { m.mean / m.se_mean } else { 0.0 };
        assert!(z.abs() < 4.0, "pair {pair}: net flux {} (z = {z})", m.mean);
    }
}

fn tercile(x: f64, lo: f64, hi: f64) -> usize {
    if x < lo {
        0
    } else if x < hi {
        1
    } else {
        2
    }
}

#[test]
fn item_kernel_is_reversible() {
    let hp = Hyperparameters::with_dim(1);
    let data = one_group(vec![vec![Some(true)], vec![Some(false)], vec![Some(true)]]);
    let mut s = ModelState::zeros(&[3], 1, 1);
    s.individual_positions[0][0][0] = 1.0;
    s.individual_positions[0][1][0] = -0.5;
    s.individual_positions[0][2][0] = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert_balanced_flux(
        || {
            update_item(&mut s, &data, &hp, 0, 1.5, &mut rng).unwrap();
            let angle = s.item_positions[0][0].atan2(s.item_intercepts[0]);
            tercile(angle, -1.0, 1.0)
        },
        200,
        2_000,
    );
}

#[test]
fn group_kernel_is_reversible() {
    let hp = Hyperparameters::with_dim(1);
    let data = one_group(vec![vec![Some(true), Some(false)]]);
    let mut s = ModelState::zeros(&[1], 2, 1);
    s.item_positions[0][0] = 0.8;
    s.item_positions[1][0] = -0.4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert_balanced_flux(
        || {
            update_group_block(&mut s, &data, &hp, 0, 1.0, 0.8, &mut rng).unwrap();
            tercile(s.individual_intercepts[0][0] - s.individual_positions[0][0][0], -0.8, 0.8)
        },
        200,
        2_000,
    );
}

#[test]
fn residual_kernel_is_reversible() {
    let hp = Hyperparameters::with_dim(1);
    let data = one_group(vec![vec![Some(false)]]);
    let mut s = ModelState::zeros(&[1], 1, 1);
    s.item_intercepts[0] = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    assert_balanced_flux(
        || {
            update_residuals(&mut s, &data, &hp, 2.5, &mut rng).unwrap();
            tercile(s.residuals[0][0][0], -0.9, -0.1)
        },
        200,
        2_000,
    );
}

/// Test functions compared between the forward and the successive-conditional simulators.
fn functionals(s: &ModelState, data: &ResponseDataset) -> Vec<(&'static str, f64)> {
    let y_rate = {
        let (mut ones, mut total) = (0.0, 0.0);
        for g in data.groups() {
            for i in 0..g.size() {
                for y in g.responses.row(i).iter().flatten() {
                    ones += *y as u8 as f64;
                    total += 1.0;
                }
            }
        }
        ones / total
    };
    vec![
        ("alpha_k", s.group_intercepts[0]),
        ("alpha_k^2", s.group_intercepts[1].powi(2)),
        ("sigma2_k", s.group_variances[0]),
        ("alpha_i", s.individual_intercepts[0][1]),
        ("alpha_i^2", s.individual_intercepts[1][0].powi(2)),
        ("beta_j", s.item_intercepts[0]),
        ("beta_j^2", s.item_intercepts[2].powi(2)),
        ("z_k", s.group_positions[0][0]),
        ("z_k^2", s.group_positions[1][1].powi(2)),
        ("z_i", s.individual_positions[0][2][1]),
        ("w_j", s.item_positions[1][0]),
        ("w_j^2", s.item_positions[0][1].powi(2)),
        ("zw", hlsirm::linalg::dot(&s.individual_positions[0][0], &s.item_positions[0])),
        ("psi_z00", s.psi_z[(0, 0)]),
        ("psi_z01", s.psi_z[(0, 1)]),
        ("psi_w11", s.psi_w[(1, 1)]),
        ("eps", s.residuals[0][0][0]),
        ("y_rate", y_rate),
    ]
}

#[test]
fn successive_conditional_simulator_matches_forward_simulator() {
    let mut hp = Hyperparameters::with_dim(2);
    hp.sigma_alpha = 1.0;
    hp.tau = 1.0;
    hp.a_sigma = 6.0;
    hp.b_sigma = 5.0;
    hp.nu_z = 9.0;
    hp.nu_w = 9.0;
    hp.s_z = DMatrix::identity(2, 2) * 3.0;
    hp.s_w = DMatrix::identity(2, 2) * 3.0;
    let sizes = Sizes::new(vec![3, 2], 3, 2);

    // Forward: θ from the prior, y given θ.
    let forward_n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (template, _) = simulate_dataset(&Truth::Prior(hp.clone()), &sizes, 7, &SimulateOptions::default()).unwrap();
    let mut forward: Vec<Vec<f64>> = Vec::new();
    for _ in 0..forward_n {
        let s = sample_prior(&hp, &sizes.group_sizes, sizes.num_items, &mut rng).unwrap();
        let y = redraw_responses(&s, &template, &mut rng).unwrap();
        forward.push(functionals(&s, &y).into_iter().map(|(_, v)| v).collect());
    }

    // Successive conditional: alternate one sampler sweep given y with a fresh y given θ.
    let scales = BlockScales {
        group_intercept: vec![0.35; 2],
        group_position: vec![0.35; 2],
        item: vec![0.5; 3],
        residual: 1.5,
    };
    let mut s = sample_prior(&hp, &sizes.group_sizes, sizes.num_items, &mut rng).unwrap();
    let mut y = redraw_responses(&s, &template, &mut rng).unwrap();
    let names: Vec<&str> = functionals(&s, &y).into_iter().map(|(n, _)| n).collect();
    let sc_n = 300_000;
    let mut sc: Vec<Vec<f64>> = vec![Vec::with_capacity(sc_n); names.len()];
    for it in 0..sc_n {
        sweep(&mut s, &y, &hp, &scales, 8, it as u64, None).unwrap();
        y = redraw_responses(&s, &y, &mut rng).unwrap();
        for (slot, (_, v)) in sc.iter_mut().zip(functionals(&s, &y)) {
            slot.push(v);
        }
    }

    let mut worst = (0.0f64, "");
    for (c, name) in names.iter().enumerate() {
        let f: Vec<f64> = forward.iter().map(|v| v[c]).collect();
        let a = moments(&f, forward_n as f64);
        let b = moments(&sc[c], effective_sample_size(&sc[c]));
        let z = (a.mean - b.mean) / (a.se_mean.powi(2) + b.se_mean.powi(2)).sqrt();
        if z.abs() > worst.0 {
            worst = (z.abs(), name);
        }
    }
    assert!(worst.0 <= 4.0, "largest standardized discrepancy {:.2} for {}", worst.0, worst.1);
}
