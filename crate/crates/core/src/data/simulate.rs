use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{Group, ResponseDataset, ResponseMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{logistic, Hyperparameters, ModelState};

/// Dataset shape for simulation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizes {
    pub group_sizes: Vec<usize>,
    pub num_items: usize,
    pub dim: usize,
}

impl Sizes {
    pub fn new(group_sizes: Vec<usize>, num_items: usize, dim: usize) -> Self {
        Self {
            group_sizes,
            num_items,
            dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.group_sizes.is_empty() || self.group_sizes.contains(&0) || self.num_items == 0 || self.dim == 0 {
            return Err(Error::Argument("simulation sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Where the generating parameters come from.
#[derive(Clone, Debug)]
pub enum Truth {
    /// Use this state as-is (its residuals are replaced by fresh draws).
    State(ModelState),
    /// Draw every parameter from the prior hierarchy first.
    Prior(Hyperparameters),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateOptions {
    /// Set every ε to zero instead of drawing it.
    pub suppress_residuals: bool,
    /// Residual precision used with `Truth::State`; `Truth::Prior` uses its own φ.
    pub residual_precision: f64,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            suppress_residuals: false,
            residual_precision: 1.0,
        }
    }
}

/// Forward-simulate a dataset. Returns the responses and the exact state that
/// generated them, residuals included.
pub fn simulate_dataset(
    truth: &Truth,
    sizes: &Sizes,
    seed: u64,
    options: &SimulateOptions,
) -> Result<(ResponseDataset, ModelState)> {
    sizes.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, phi) = match truth {
        Truth::Prior(hp) => {
            hp.validate()?;
            if hp.dim != sizes.dim {
                return Err(Error::Shape("hyperparameter dimension differs from sizes".into()));
            }
            (sample_prior(hp, &sizes.group_sizes, sizes.num_items, &mut rng)?, hp.phi)
        }
        Truth::State(s) => {
            s.validate()?;
            if s.group_sizes() != sizes.group_sizes || s.num_items() != sizes.num_items || s.dim() != sizes.dim {
                return Err(Error::Shape("truth state does not match requested sizes".into()));
            }
            (s.clone(), options.residual_precision)
        }
    };
    if !(phi > 0.0) {
        return Err(Error::Validity("residual precision must be positive".into()));
    }
    let sd = phi.recip().sqrt();
    state.residuals = sizes
        .group_sizes
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| {
                    (0..sizes.num_items)
                        .map(|_| {
                            if options.suppress_residuals {
                                0.0
                            } else {
                                sd * linalg::standard_normal(&mut rng)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let item_ids: Vec<String> = (1..=sizes.num_items).map(|j| format!("item{j}")).collect();
    let groups = sizes
        .group_sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let rows = (0..n)
                .map(|i| {
                    (0..sizes.num_items)
                        .map(|j| {
                            let eta = state.systematic(k, i, j) + state.residuals[k][i][j];
                            Some(rng.random::<f64>() < logistic(eta))
                        })
                        .collect()
                })
                .collect();
            Ok(Group {
                id: format!("g{}", k + 1),
                respondent_ids: (1..=n).map(|i| format!("s{i}")).collect(),
                responses: ResponseMatrix::from_rows(rows)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ResponseDataset::new(groups, item_ids)?, state))
}

/// Draw a full state from the prior hierarchy, residuals included.
pub fn sample_prior<R: Rng + ?Sized>(
    hp: &Hyperparameters,
    group_sizes: &[usize],
    num_items: usize,
    rng: &mut R,
) -> Result<ModelState> {
    let d = hp.dim;
    let psi_z = linalg::sample_inv_wishart(&hp.s_z, hp.nu_z, rng)?;
    let psi_w = linalg::sample_inv_wishart(&hp.s_w, hp.nu_w, rng)?;
    let lz = linalg::cholesky_lower(&psi_z, "Psi_z")?;
    let lz_group = linalg::cholesky_lower(&(&psi_z / hp.kappa0), "Psi_z/kappa0")?;
    let lw = linalg::cholesky_lower(&psi_w, "Psi_w")?;
    let ig = Gamma::new(hp.a_sigma, 1.0 / hp.b_sigma).map_err(|e| Error::Validity(e.to_string()))?;

    let mut s = ModelState::zeros(group_sizes, num_items, d);
    for (k, &n) in group_sizes.iter().enumerate() {
        s.group_intercepts[k] = hp.alpha0 + hp.sigma_alpha * linalg::standard_normal(rng);
        s.group_variances[k] = 1.0 / ig.sample(rng);
        s.group_positions[k] = linalg::sample_mvn(&hp.z0, &lz_group, rng);
        let sd = s.group_variances[k].sqrt();
        for i in 0..n {
            s.individual_intercepts[k][i] = s.group_intercepts[k] + sd * linalg::standard_normal(rng);
            s.individual_positions[k][i] = linalg::sample_mvn(&s.group_positions[k], &lz, rng);
        }
    }
    for j in 0..num_items {
        s.item_intercepts[j] = hp.beta0 + hp.tau * linalg::standard_normal(rng);
        s.item_positions[j] = linalg::sample_mvn(&hp.w0, &lw, rng);
    }
    let esd = hp.phi.recip().sqrt();
    for e in s.residuals.iter_mut().flatten().flatten() {
        *e = esd * linalg::standard_normal(rng);
    }
    s.psi_z = psi_z;
    s.psi_w = psi_w;
    Ok(s)
}

/// Redraw every observed cell of `data` from Bernoulli(logistic(η)) under
/// `state` (residuals included); missing cells stay missing.
pub fn redraw_responses<R: Rng + ?Sized>(
    state: &ModelState,
    data: &ResponseDataset,
    rng: &mut R,
) -> Result<ResponseDataset> {
    state.check_against(data)?;
    let mut out = data.clone();
    for (k, g) in out.groups.iter_mut().enumerate() {
        for i in 0..g.responses.rows() {
            for j in 0..g.responses.cols() {
                if g.responses.get(i, j).is_some() {
                    let eta = state.systematic(k, i, j) + state.residuals[k][i][j];
                    g.responses.set(i, j, Some(rng.random::<f64>() < logistic(eta)));
                }
            }
        }
    }
    Ok(out)
}

/// Structured generator for recovery experiments: group positions spread at
/// equal angles on the first two axes, items with random directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDesign {
    pub group_sizes: Vec<usize>,
    pub num_items: usize,
    pub dim: usize,
    pub group_magnitude: f64,
    pub group_intercept_sd: f64,
    pub within_variance: f64,
    pub within_position_sd: f64,
    pub item_intercept_sd: f64,
    pub item_magnitude: f64,
}

impl Default for SyntheticDesign {
    fn default() -> Self {
        Self {
            group_sizes: vec![50; 6],
            num_items: 30,
            dim: 2,
            group_magnitude: 1.5,
            group_intercept_sd: 0.8,
            within_variance: 1.0,
            within_position_sd: 0.3,
            item_intercept_sd: 1.0,
            item_magnitude: 1.5,
        }
    }
}

impl SyntheticDesign {
    pub fn sizes(&self) -> Sizes {
        Sizes::new(self.group_sizes.clone(), self.num_items, self.dim)
    }

    /// Build the generating state (residuals zero; `simulate_dataset` redraws them).
    pub fn truth(&self, seed: u64) -> Result<ModelState> {
        self.sizes().validate()?;
        if self.dim < 2 {
            return Err(Error::Argument("synthetic design needs at least two dimensions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kk = self.group_sizes.len();
        let d = self.dim;
        let mut s = ModelState::zeros(&self.group_sizes, self.num_items, d);
        let offset = rng.random::<f64>() * std::f64::consts::TAU;
        let psi_z = nalgebra::DMatrix::identity(d, d) * self.within_position_sd.powi(2);
        for k in 0..kk {
            let angle = offset + std::f64::consts::TAU * k as f64 / kk as f64;
            let mut pos = vec![0.0; d];
            pos[0] = self.group_magnitude * angle.cos();
            pos[1] = self.group_magnitude * angle.sin();
            s.group_positions[k] = pos;
            s.group_intercepts[k] = self.group_intercept_sd * linalg::standard_normal(&mut rng);
            s.group_variances[k] = self.within_variance;
            let sd = self.within_variance.sqrt();
            for i in 0..self.group_sizes[k] {
                s.individual_intercepts[k][i] = s.group_intercepts[k] + sd * linalg::standard_normal(&mut rng);
                s.individual_positions[k][i] = s.group_positions[k]
                    .iter()
                    .map(|m| m + self.within_position_sd * linalg::standard_normal(&mut rng))
                    .collect();
            }
        }
        for j in 0..self.num_items {
            s.item_intercepts[j] = self.item_intercept_sd * linalg::standard_normal(&mut rng);
            let dir: Vec<f64> = (0..d).map(|_| linalg::standard_normal(&mut rng)).collect();
            let n = linalg::norm(&dir).max(f64::MIN_POSITIVE);
            s.item_positions[j] = dir.iter().map(|x| x / n * self.item_magnitude).collect();
        }
        s.psi_z = if self.within_position_sd > 0.0 {
            psi_z
        } else {
            nalgebra::DMatrix::identity(d, d) * 1e-8
        };
        s.psi_w = nalgebra::DMatrix::identity(d, d) * (self.item_magnitude.powi(2) / d as f64).max(1e-8);
        Ok(s)
    }
}
