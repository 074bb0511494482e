//! Parameter containers and densities of the hierarchical inner-product
//! latent space item response model.
//!
//! For respondent `i` of group `k` answering item `j`:
//!
//! ```text
//! logit P(y = 1) = α_i(k) + β_j + ⟨z_i(k), w_j⟩ + ε_ij(k)
//! α_i(k) ~ N(α_(k), σ²_(k))        α_(k) ~ N(α₀, σ_α²)       σ²_(k) ~ IG(a_σ, b_σ)
//! z_i(k) ~ N(z_(k), Ψ_z)           z_(k) ~ N(z₀, Ψ_z / κ₀)   Ψ_z ~ IW(S_z, ν_z)
//! β_j ~ N(β₀, τ²)                  w_j ~ N(w₀, Ψ_w)          Ψ_w ~ IW(S_w, ν_w)
//! ε_ij(k) ~ N(0, 1/φ)
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::ResponseDataset;
use crate::error::{Error, Result};
use crate::linalg::{self, matrix_rows, GaussianForm};

/// Fixed prior constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub dim: usize,
    pub alpha0: f64,
    pub sigma_alpha: f64,
    pub beta0: f64,
    pub tau: f64,
    pub z0: Vec<f64>,
    pub w0: Vec<f64>,
    pub kappa0: f64,
    #[serde(with = "matrix_rows")]
    pub s_z: DMatrix<f64>,
    pub nu_z: f64,
    #[serde(with = "matrix_rows")]
    pub s_w: DMatrix<f64>,
    pub nu_w: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    /// Residual precision; the residual variance is 1/φ.
    pub phi: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self::with_dim(2)
    }
}

impl Hyperparameters {
    /// Weakly informative defaults for a `dim`-dimensional interaction map.
    pub fn with_dim(dim: usize) -> Self {
        let eye = DMatrix::<f64>::identity(dim, dim);
        Self {
            dim,
            alpha0: 0.0,
            sigma_alpha: 2.5,
            beta0: 0.0,
            tau: 2.5,
            z0: vec![0.0; dim],
            w0: vec![0.0; dim],
            kappa0: 1.0,
            s_z: &eye * 2.0,
            nu_z: dim as f64 + 1.0,
            s_w: &eye * 2.0,
            nu_w: dim as f64 + 1.0,
            a_sigma: 1.0,
            b_sigma: 1.0,
            phi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::Validity("latent dimension must be at least 1".into()));
        }
        for (name, v) in [
            ("sigma_alpha", self.sigma_alpha),
            ("tau", self.tau),
            ("kappa0", self.kappa0),
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
            ("phi", self.phi),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validity(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("nu_z", self.nu_z), ("nu_w", self.nu_w)] {
            if !(v > d as f64 - 1.0) {
                return Err(Error::Validity(format!("{name} must exceed D-1, got {v}")));
            }
        }
        if self.z0.len() != d || self.w0.len() != d {
            return Err(Error::Shape("z0 and w0 must have length D".into()));
        }
        for (name, m) in [("S_z", &self.s_z), ("S_w", &self.s_w)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::Shape(format!("{name} must be {d}x{d}")));
            }
            linalg::cholesky_lower(m, name)?;
        }
        Ok(())
    }
}

/// One point in parameter space.
///
/// Positions are stored as rows of length D. `residuals[k][i][j]` holds ε for
/// every cell; chains may drop residuals from stored samples, in which case the
/// vector is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelState {
    pub group_intercepts: Vec<f64>,
    pub group_variances: Vec<f64>,
    pub group_positions: Vec<Vec<f64>>,
    pub individual_intercepts: Vec<Vec<f64>>,
    pub individual_positions: Vec<Vec<Vec<f64>>>,
    pub item_intercepts: Vec<f64>,
    pub item_positions: Vec<Vec<f64>>,
    #[serde(with = "matrix_rows")]
    pub psi_z: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub psi_w: DMatrix<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residuals: Vec<Vec<Vec<f64>>>,
}

impl ModelState {
    /// Zero intercepts, positions and residuals with unit variances.
    pub fn zeros(group_sizes: &[usize], num_items: usize, dim: usize) -> Self {
        let k = group_sizes.len();
        Self {
            group_intercepts: vec![0.0; k],
            group_variances: vec![1.0; k],
            group_positions: vec![vec![0.0; dim]; k],
            individual_intercepts: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            individual_positions: group_sizes.iter().map(|&n| vec![vec![0.0; dim]; n]).collect(),
            item_intercepts: vec![0.0; num_items],
            item_positions: vec![vec![0.0; dim]; num_items],
            psi_z: DMatrix::identity(dim, dim),
            psi_w: DMatrix::identity(dim, dim),
            residuals: group_sizes
                .iter()
                .map(|&n| vec![vec![0.0; num_items]; n])
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.psi_z.nrows()
    }

    pub fn num_groups(&self) -> usize {
        self.group_intercepts.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_intercepts.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.individual_intercepts.iter().map(Vec::len).collect()
    }

    pub fn has_residuals(&self) -> bool {
        !self.residuals.is_empty()
    }

    pub fn without_residuals(&self) -> Self {
        let mut s = self.clone();
        s.residuals = Vec::new();
        s
    }

    /// Structural and support checks: shapes agree, variances positive, Ψ SPD.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let k = self.num_groups();
        let p = self.num_items();
        let sizes = self.group_sizes();
        let bad = |what: &str| Err(Error::Shape(format!("model state: {what}")));
        if self.psi_z.ncols() != d || self.psi_w.nrows() != d || self.psi_w.ncols() != d {
            return bad("covariances must be DxD");
        }
        if self.group_variances.len() != k
            || self.group_positions.len() != k
            || self.individual_positions.len() != k
        {
            return bad("group-level arrays disagree on K");
        }
        if self.item_positions.len() != p {
            return bad("item arrays disagree on p");
        }
        if self.group_positions.iter().chain(&self.item_positions).any(|v| v.len() != d) {
            return bad("position rows must have length D");
        }
        for (g, n) in sizes.iter().enumerate() {
            if self.individual_positions[g].len() != *n || self.individual_positions[g].iter().any(|v| v.len() != d) {
                return bad("individual positions disagree with intercepts");
            }
        }
        if self.has_residuals() {
            if self.residuals.len() != k {
                return bad("residual groups");
            }
            for (g, n) in sizes.iter().enumerate() {
                if self.residuals[g].len() != *n || self.residuals[g].iter().any(|r| r.len() != p) {
                    return bad("residual matrix dimensions");
                }
            }
        }
        if let Some(v) = self.group_variances.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Validity(format!("group variance {v} is not positive")));
        }
        linalg::cholesky_lower(&self.psi_z, "Psi_z")?;
        linalg::cholesky_lower(&self.psi_w, "Psi_w")?;
        Ok(())
    }

    /// Shape agreement with a dataset, residuals included.
    pub fn check_against(&self, data: &ResponseDataset) -> Result<()> {
        if self.num_groups() != data.num_groups()
            || self.num_items() != data.num_items()
            || self.group_sizes() != data.group_sizes()
        {
            return Err(Error::Shape("model state and dataset dimensions differ".into()));
        }
        if !self.has_residuals() {
            return Err(Error::Shape("model state carries no residual matrix".into()));
        }
        for (g, rows) in self.residuals.iter().enumerate() {
            if rows.len() != data.group(g).size() || rows.iter().any(|r| r.len() != data.num_items()) {
                return Err(Error::Shape("residual matrix dimensions differ from dataset".into()));
            }
        }
        Ok(())
    }

    /// α_i(k) + β_j + ⟨z_i(k), w_j⟩, without the residual.
    #[inline]
    pub(crate) fn systematic(&self, k: usize, i: usize, j: usize) -> f64 {
        self.individual_intercepts[k][i]
            + self.item_intercepts[j]
            + linalg::dot(&self.individual_positions[k][i], &self.item_positions[j])
    }

    /// Applies x ↦ Rᵀx to every position vector (rows are multiplied by R) and
    /// Ψ ↦ RᵀΨR, leaving all inner products intact.
    pub fn rotate(&mut self, r: &DMatrix<f64>) {
        let apply = |v: &mut Vec<f64>| {
            let d = v.len();
            let out: Vec<f64> = (0..d).map(|c| (0..d).map(|a| v[a] * r[(a, c)]).sum()).collect();
            *v = out;
        };
        self.group_positions.iter_mut().for_each(apply);
        self.item_positions.iter_mut().for_each(apply);
        self.individual_positions.iter_mut().flatten().for_each(apply);
        self.psi_z = linalg::symmetrize(&(r.transpose() * &self.psi_z * r));
        self.psi_w = linalg::symmetrize(&(r.transpose() * &self.psi_w * r));
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + eˣ) without overflow.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bernoulli-logit log-likelihood of one cell: y·η − log(1 + e^η).
#[inline]
pub fn cell_log_likelihood(y: bool, eta: f64) -> f64 {
    if y {
        -log1p_exp(-eta)
    } else {
        -log1p_exp(eta)
    }
}

pub fn linear_predictor(state: &ModelState, k: usize, i: usize, j: usize) -> Result<f64> {
    if k >= state.num_groups() {
        return Err(Error::Bounds(format!("group {k} of {}", state.num_groups())));
    }
    if i >= state.individual_intercepts[k].len() {
        return Err(Error::Bounds(format!("respondent {i} of group {k}")));
    }
    if j >= state.num_items() {
        return Err(Error::Bounds(format!("item {j} of {}", state.num_items())));
    }
    let eps = state
        .residuals
        .get(k)
        .and_then(|g| g.get(i))
        .and_then(|r| r.get(j))
        .ok_or_else(|| Error::Bounds(format!("residual ({k}, {i}, {j}) not present")))?;
    Ok(state.systematic(k, i, j) + eps)
}

/// Sum of Bernoulli-logit terms over observed cells, in group/row/item order.
pub fn log_likelihood(state: &ModelState, data: &ResponseDataset) -> Result<f64> {
    state.check_against(data)?;
    let mut total = 0.0;
    for (k, group) in data.groups().iter().enumerate() {
        total += group_log_likelihood(state, data, k, group.size());
    }
    Ok(total)
}

fn group_log_likelihood(state: &ModelState, data: &ResponseDataset, k: usize, n: usize) -> f64 {
    let responses = &data.group(k).responses;
    let mut total = 0.0;
    for i in 0..n {
        for (j, y) in responses.row(i).iter().enumerate() {
            if let Some(y) = y {
                let eta = state.systematic(k, i, j) + state.residuals[k][i][j];
                total += cell_log_likelihood(*y, eta);
            }
        }
    }
    total
}

/// Prior log-density broken down by parameter family.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PriorTerms {
    pub group_intercepts: f64,
    pub individual_intercepts: f64,
    pub group_variances: f64,
    pub item_intercepts: f64,
    pub group_positions: f64,
    pub individual_positions: f64,
    pub item_positions: f64,
    pub psi_z: f64,
    pub psi_w: f64,
    pub residuals: f64,
}

impl PriorTerms {
    pub fn total(&self) -> f64 {
        self.group_intercepts
            + self.individual_intercepts
            + self.group_variances
            + self.item_intercepts
            + self.group_positions
            + self.individual_positions
            + self.item_positions
            + self.psi_z
            + self.psi_w
            + self.residuals
    }
}

/// Every prior term of the hierarchy. Residual terms are included when the
/// state carries residuals.
pub fn log_prior_terms(state: &ModelState, hp: &Hyperparameters) -> Result<PriorTerms> {
    state.validate()?;
    if state.dim() != hp.dim {
        return Err(Error::Shape(format!(
            "state dimension {} differs from hyperparameter dimension {}",
            state.dim(),
            hp.dim
        )));
    }
    let mut t = PriorTerms::default();
    let va = hp.sigma_alpha * hp.sigma_alpha;
    let psi_z = GaussianForm::new(&state.psi_z, "Psi_z")?;
    let psi_w = GaussianForm::new(&state.psi_w, "Psi_w")?;
    let group_cov = GaussianForm::new(&(&state.psi_z / hp.kappa0), "Psi_z/kappa0")?;

    for k in 0..state.num_groups() {
        let ak = state.group_intercepts[k];
        let s2 = state.group_variances[k];
        t.group_intercepts += linalg::normal_log_density(ak, hp.alpha0, va);
        t.group_variances += linalg::inv_gamma_log_density(s2, hp.a_sigma, hp.b_sigma);
        t.group_positions += group_cov.log_density(&state.group_positions[k], &hp.z0);
        for (a, z) in state.individual_intercepts[k].iter().zip(&state.individual_positions[k]) {
            t.individual_intercepts += linalg::normal_log_density(*a, ak, s2);
            t.individual_positions += psi_z.log_density(z, &state.group_positions[k]);
        }
    }
    let vt = hp.tau * hp.tau;
    for (b, w) in state.item_intercepts.iter().zip(&state.item_positions) {
        t.item_intercepts += linalg::normal_log_density(*b, hp.beta0, vt);
        t.item_positions += psi_w.log_density(w, &hp.w0);
    }
    t.psi_z = linalg::inv_wishart_log_density(&state.psi_z, &hp.s_z, hp.nu_z)?;
    t.psi_w = linalg::inv_wishart_log_density(&state.psi_w, &hp.s_w, hp.nu_w)?;
    let ve = 1.0 / hp.phi;
    t.residuals = state
        .residuals
        .iter()
        .flatten()
        .flatten()
        .map(|e| linalg::normal_log_density(*e, 0.0, ve))
        .sum();
    Ok(t)
}

pub fn log_prior(state: &ModelState, hp: &Hyperparameters) -> Result<f64> {
    log_prior_terms(state, hp).map(|t| t.total())
}

pub fn log_posterior(state: &ModelState, data: &ResponseDataset, hp: &Hyperparameters) -> Result<f64> {
    Ok(log_likelihood(state, data)? + log_prior(state, hp)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Group, ResponseMatrix};

    fn one_cell(y: bool) -> ResponseDataset {
        ResponseDataset::new(
            vec![Group {
                id: "g".into(),
                respondent_ids: vec!["s".into()],
                responses: ResponseMatrix::from_rows(vec![vec![Some(y)]]).unwrap(),
            }],
            vec!["i".into()],
        )
        .unwrap()
    }

    #[test]
    fn predictor_identity_case() {
        let s = ModelState::zeros(&[1], 1, 2);
        let eta = linear_predictor(&s, 0, 0, 0).unwrap();
        assert_eq!(eta, 0.0);
        assert_eq!(logistic(eta), 0.5);
    }

    #[test]
    fn predictor_arithmetic() {
        let mut s = ModelState::zeros(&[1], 1, 2);
        s.individual_intercepts[0][0] = 0.5;
        s.item_intercepts[0] = -1.0;
        s.individual_positions[0][0] = vec![1.0, 0.0];
        s.item_positions[0] = vec![2.0, 0.0];
        assert!((linear_predictor(&s, 0, 0, 0).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn predictor_orthogonal_vectors() {
        let mut s = ModelState::zeros(&[1], 1, 2);
        s.individual_positions[0][0] = vec![1.0, 1.0];
        s.item_positions[0] = vec![-1.0, 1.0];
        assert_eq!(linear_predictor(&s, 0, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn predictor_bounds() {
        let s = ModelState::zeros(&[2], 3, 2);
        assert!(matches!(linear_predictor(&s, 1, 0, 0), Err(Error::Bounds(_))));
        assert!(matches!(linear_predictor(&s, 0, 2, 0), Err(Error::Bounds(_))));
        assert!(matches!(linear_predictor(&s, 0, 0, 3), Err(Error::Bounds(_))));
    }

    #[test]
    fn single_cell_likelihood() {
        let s = ModelState::zeros(&[1], 1, 2);
        let l1 = log_likelihood(&s, &one_cell(true)).unwrap();
        let l0 = log_likelihood(&s, &one_cell(false)).unwrap();
        assert!((l1 - 0.5f64.ln()).abs() < 1e-15);
        assert!((l0 - (-0.693_147_180_559_945_3)).abs() < 1e-15);
    }

    #[test]
    fn likelihood_shape_mismatch() {
        let s = ModelState::zeros(&[2], 1, 2);
        assert!(matches!(log_likelihood(&s, &one_cell(true)), Err(Error::Shape(_))));
        let stripped = ModelState::zeros(&[1], 1, 2).without_residuals();
        assert!(matches!(log_likelihood(&stripped, &one_cell(true)), Err(Error::Shape(_))));
    }

    #[test]
    fn likelihood_is_stable_for_extreme_predictors() {
        assert!(cell_log_likelihood(true, 800.0).abs() < 1e-300);
        assert!((cell_log_likelihood(true, -800.0) + 800.0).abs() < 1e-9);
        assert!((cell_log_likelihood(false, 800.0) + 800.0).abs() < 1e-9);
        assert!(log1p_exp(-800.0) >= 0.0);
    }

    #[test]
    fn scaling_one_variance_changes_only_its_term() {
        let hp = Hyperparameters::default();
        let mut s = ModelState::zeros(&[2, 3], 2, 2);
        s.individual_intercepts[1] = vec![0.4, -0.2, 0.1];
        let a = log_prior_terms(&s, &hp).unwrap();
        s.group_variances[0] = 3.0;
        let b = log_prior_terms(&s, &hp).unwrap();
        assert_ne!(a.group_variances, b.group_variances);
        assert_ne!(a.individual_intercepts, b.individual_intercepts);
        assert_eq!(a.group_intercepts, b.group_intercepts);
        assert_eq!(a.group_positions, b.group_positions);
        assert_eq!(a.individual_positions, b.individual_positions);
        assert_eq!(a.item_intercepts, b.item_intercepts);
        assert_eq!(a.psi_z, b.psi_z);
        assert_eq!(a.residuals, b.residuals);
    }

    #[test]
    fn non_spd_covariance_is_validity_error() {
        let hp = Hyperparameters::default();
        let mut s = ModelState::zeros(&[1], 1, 2);
        s.psi_z = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(log_prior(&s, &hp), Err(Error::Validity(_))));
    }

    #[test]
    fn default_hyperparameters_match_reported_settings() {
        let hp = Hyperparameters::default();
        hp.validate().unwrap();
        assert_eq!(hp.dim, 2);
        assert_eq!((hp.sigma_alpha, hp.tau), (2.5, 2.5));
        assert_eq!((hp.nu_z, hp.nu_w), (3.0, 3.0));
        assert_eq!(hp.s_z, DMatrix::identity(2, 2) * 2.0);
        assert_eq!((hp.a_sigma, hp.b_sigma, hp.kappa0, hp.phi), (1.0, 1.0, 1.0, 1.0));
    }
}
