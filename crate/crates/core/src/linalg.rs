//! Small dense linear algebra helpers for the D×D covariance blocks.
//!
//! Latent dimensions are tiny (D = 2 in practice), so everything here works on
//! `nalgebra::DMatrix` without any attempt at blocking or reuse of workspaces.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !is_symmetric(m, 1e-9) {
        return Err(Error::Validity(format!("{what} is not symmetric")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validity(format!("{what} has non-finite entries")));
    }
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Validity(format!("{what} is not positive definite")))
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    cholesky_lower(m, "matrix").is_ok()
}

/// log|M| from a lower Cholesky factor.
pub fn log_det_from_lower(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Inverse of an SPD matrix given its lower Cholesky factor.
pub fn inverse_from_lower(l: &DMatrix<f64>) -> DMatrix<f64> {
    let d = l.nrows();
    let linv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .expect("cholesky factor has a positive diagonal");
    let inv = linv.transpose() * linv;
    symmetrize(&inv)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// xᵀ P x for a dense precision matrix P.
#[inline]
pub fn quad_form(precision: &DMatrix<f64>, x: &[f64]) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for r in 0..d {
        let mut row = 0.0;
        for c in 0..d {
            row += precision[(r, c)] * x[c];
        }
        acc += x[r] * row;
    }
    acc
}

/// Precomputed pieces of a multivariate normal log-density.
#[derive(Clone, Debug)]
pub struct GaussianForm {
    pub precision: DMatrix<f64>,
    pub log_det: f64,
}

impl GaussianForm {
    pub fn new(cov: &DMatrix<f64>, what: &str) -> Result<Self> {
        let l = cholesky_lower(cov, what)?;
        Ok(Self {
            precision: inverse_from_lower(&l),
            log_det: log_det_from_lower(&l),
        })
    }

    pub fn dim(&self) -> usize {
        self.precision.nrows()
    }

    /// Log-density at `x` with mean `mean`.
    #[inline]
    pub fn log_density(&self, x: &[f64], mean: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + quad_form(&self.precision, &diff))
    }

    /// Quadratic part only, −½ (x−m)ᵀ P (x−m); enough for MH ratios.
    #[inline]
    pub fn kernel(&self, x: &[f64], mean: &[f64]) -> f64 {
        let mut diff = [0.0f64; 8];
        if x.len() <= diff.len() {
            for (slot, (a, b)) in diff.iter_mut().zip(x.iter().zip(mean)) {
                *slot = a - b;
            }
            -0.5 * quad_form(&self.precision, &diff[..x.len()])
        } else {
            let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
            -0.5 * quad_form(&self.precision, &diff)
        }
    }
}

/// Univariate normal log-density.
#[inline]
pub fn normal_log_density(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + variance.ln() + d * d / variance)
}

/// Inverse-gamma log-density with shape `a` and scale `b`.
pub fn inv_gamma_log_density(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - statrs::function::gamma::ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

/// Multivariate log-gamma, ln Γ_d(a).
pub fn ln_mv_gamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    let mut acc = df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 0..d {
        acc += statrs::function::gamma::ln_gamma(a - j as f64 / 2.0);
    }
    acc
}

/// Inverse-Wishart log-density at `psi` with scale `scale` and `df` degrees of freedom.
pub fn inv_wishart_log_density(psi: &DMatrix<f64>, scale: &DMatrix<f64>, df: f64) -> Result<f64> {
    let d = psi.nrows();
    let lp = cholesky_lower(psi, "covariance")?;
    let ls = cholesky_lower(scale, "inverse-Wishart scale")?;
    let psi_inv = inverse_from_lower(&lp);
    let trace = (scale * psi_inv).trace();
    let dd = d as f64;
    Ok(0.5 * df * log_det_from_lower(&ls)
        - 0.5 * df * dd * std::f64::consts::LN_2
        - ln_mv_gamma(d, 0.5 * df)
        - 0.5 * (df + dd + 1.0) * log_det_from_lower(&lp)
        - 0.5 * trace)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw from N(mean, L Lᵀ) given the lower factor L.
pub fn sample_mvn<R: Rng + ?Sized>(mean: &[f64], lower: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let d = mean.len();
    let u: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
    (0..d)
        .map(|r| mean[r] + (0..=r).map(|c| lower[(r, c)] * u[c]).sum::<f64>())
        .collect()
}

/// Symmetric square-root factor of a positive semidefinite matrix; tolerates
/// zero or rank-deficient covariances.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = m.nrows();
    let mut scale = DMatrix::zeros(d, d);
    for i in 0..d {
        scale[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * scale * eig.eigenvectors.transpose()
}

/// Draw from N(mean, F Fᵀ) for an arbitrary square factor F.
pub fn sample_with_factor<R: Rng + ?Sized>(
    mean: &[f64],
    factor: &DMatrix<f64>,
    rng: &mut R,
) -> Vec<f64> {
    let d = mean.len();
    let u: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
    (0..d)
        .map(|r| mean[r] + (0..d).map(|c| factor[(r, c)] * u[c]).sum::<f64>())
        .collect()
}

/// Draw Ψ ~ Inv-Wishart(scale, df) through the Bartlett decomposition of the
/// matching Wishart(scale⁻¹, df) variate.
pub fn sample_inv_wishart<R: Rng + ?Sized>(
    scale: &DMatrix<f64>,
    df: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if df <= d as f64 - 1.0 {
        return Err(Error::Validity(format!(
            "inverse-Wishart degrees of freedom {df} must exceed {}",
            d as f64 - 1.0
        )));
    }
    let ls = cholesky_lower(scale, "inverse-Wishart scale")?;
    let scale_inv = inverse_from_lower(&ls);
    let l = cholesky_lower(&scale_inv, "inverse scale")?;
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi2 = Gamma::new(0.5 * (df - i as f64), 2.0)
            .map_err(|e| Error::numerical(format!("chi-square draw: {e}")))?
            .sample(rng);
        a[(i, i)] = chi2.sqrt();
        for j in 0..i {
            a[(i, j)] = standard_normal(rng);
        }
    }
    let la = l * a;
    let wishart = &la * la.transpose();
    let lw = cholesky_lower(&symmetrize(&wishart), "Wishart draw")
        .map_err(|_| Error::numerical("Wishart draw is singular"))?;
    Ok(inverse_from_lower(&lw))
}

/// Serde adapter storing a matrix as a list of rows.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub fn from_rows(rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".to_string());
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_and_log_det_match_nalgebra() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let l = cholesky_lower(&m, "m").unwrap();
        let inv = inverse_from_lower(&l);
        let expected = m.clone().try_inverse().unwrap();
        assert!((inv - expected).amax() < 1e-12);
        assert!((log_det_from_lower(&l) - m.determinant().ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_lower(&m, "m"), Err(Error::Validity(_))));
    }

    #[test]
    fn inv_wishart_density_one_dim_is_inverse_gamma() {
        // IW(s, nu) in one dimension is IG(nu/2, s/2).
        let psi = DMatrix::from_element(1, 1, 0.7);
        let scale = DMatrix::from_element(1, 1, 2.0);
        let iw = inv_wishart_log_density(&psi, &scale, 5.0).unwrap();
        let ig = inv_gamma_log_density(0.7, 2.5, 1.0);
        assert!((iw - ig).abs() < 1e-12);
    }

    #[test]
    fn inv_wishart_draws_have_expected_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scale = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let df = 9.0;
        let n = 20_000;
        let mut mean = DMatrix::zeros(2, 2);
        for _ in 0..n {
            mean += sample_inv_wishart(&scale, df, &mut rng).unwrap();
        }
        mean /= n as f64;
        let expected = &scale / (df - 3.0);
        assert!((mean - expected).amax() < 0.02);
    }

    #[test]
    fn psd_factor_handles_zero_matrix() {
        let f = psd_factor(&DMatrix::zeros(2, 2));
        assert_eq!(f.amax(), 0.0);
    }
}
