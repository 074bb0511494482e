//! Transition kernels. Every kernel draws from its own ChaCha stream keyed by
//! (seed, iteration, block kind, block index), so serial and parallel sweeps
//! consume identical random numbers.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ResponseDataset;
use crate::error::{Error, Result};
use crate::linalg::{self, GaussianForm};
use crate::model::{cell_log_likelihood, Hyperparameters, ModelState};

/// Optimal acceptance for one-dimensional random-walk kernels; used for residuals.
pub const RESIDUAL_TARGET_ACCEPTANCE: f64 = 0.44;

#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub(crate) enum Stream {
    Group = 1,
    Item = 2,
    Residual = 3,
    Variance = 4,
    Covariance = 5,
    Init = 6,
}

pub(crate) fn stream_rng(seed: u64, iteration: u64, kind: Stream, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&iteration.to_le_bytes());
    key[16..24].copy_from_slice(&(kind as u64).to_le_bytes());
    key[24..].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Random-walk proposal standard deviations for every block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockScales {
    pub group_intercept: Vec<f64>,
    pub group_position: Vec<f64>,
    pub item: Vec<f64>,
    pub residual: f64,
}

/// Quantities shared by all group and item kernels within one sweep.
pub(crate) struct SweepContext {
    pub psi_z: GaussianForm,
    pub group_prior: GaussianForm,
    pub psi_w: GaussianForm,
}

impl SweepContext {
    pub fn new(state: &ModelState, hp: &Hyperparameters) -> Result<Self> {
        Ok(Self {
            psi_z: GaussianForm::new(&state.psi_z, "Psi_z")?,
            group_prior: GaussianForm::new(&(&state.psi_z / hp.kappa0), "Psi_z/kappa0")?,
            psi_w: GaussianForm::new(&state.psi_w, "Psi_w")?,
        })
    }
}

/// Proposed values for one group's intercepts and positions.
#[derive(Clone, Debug)]
pub(crate) struct GroupBlock {
    pub intercept: f64,
    pub position: Vec<f64>,
    pub individual_intercepts: Vec<f64>,
    pub individual_positions: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn group_log_target(
    state: &ModelState,
    data: &ResponseDataset,
    hp: &Hyperparameters,
    ctx: &SweepContext,
    k: usize,
    intercept: f64,
    position: &[f64],
    alphas: &[f64],
    zs: &[Vec<f64>],
) -> f64 {
    let responses = &data.group(k).responses;
    let variance = state.group_variances[k];
    let mut lp = -0.5 * (intercept - hp.alpha0).powi(2) / (hp.sigma_alpha * hp.sigma_alpha)
        + ctx.group_prior.kernel(position, &hp.z0);
    for (i, (a, z)) in alphas.iter().zip(zs).enumerate() {
        lp += -0.5 * (a - intercept).powi(2) / variance + ctx.psi_z.kernel(z, position);
        let eps = &state.residuals[k][i];
        for (j, y) in responses.row(i).iter().enumerate() {
            if let Some(y) = y {
                let eta = a + state.item_intercepts[j] + linalg::dot(z, &state.item_positions[j]) + eps[j];
                lp += cell_log_likelihood(*y, eta);
            }
        }
    }
    lp
}

pub(crate) fn propose_group_block<R: Rng + ?Sized>(
    state: &ModelState,
    data: &ResponseDataset,
    hp: &Hyperparameters,
    ctx: &SweepContext,
    k: usize,
    intercept_scale: f64,
    position_scale: f64,
    rng: &mut R,
) -> Option<GroupBlock> {
    // Individuals inherit the group-level increment on top of their own, so
    // the whole group can drift together. The proposal stays a symmetric
    // Gaussian random walk on the block.
    let shift = intercept_scale * linalg::standard_normal(rng);
    let intercept = state.group_intercepts[k] + shift;
    let individual_intercepts: Vec<f64> = state.individual_intercepts[k]
        .iter()
        .map(|a| a + shift + intercept_scale * linalg::standard_normal(rng))
        .collect();
    let position_shift: Vec<f64> = (0..state.dim()).map(|_| position_scale * linalg::standard_normal(rng)).collect();
    let position: Vec<f64> = state.group_positions[k].iter().zip(&position_shift).map(|(x, d)| x + d).collect();
    let individual_positions: Vec<Vec<f64>> = state.individual_positions[k]
        .iter()
        .map(|z| {
            z.iter()
                .zip(&position_shift)
                .map(|(x, d)| x + d + position_scale * linalg::standard_normal(rng))
                .collect()
        })
        .collect();

    let current = group_log_target(
        state,
        data,
        hp,
        ctx,
        k,
        state.group_intercepts[k],
        &state.group_positions[k],
        &state.individual_intercepts[k],
        &state.individual_positions[k],
    );
    let proposed = group_log_target(
        state,
        data,
        hp,
        ctx,
        k,
        intercept,
        &position,
        &individual_intercepts,
        &individual_positions,
    );
    accept(proposed - current, rng).then_some(GroupBlock {
        intercept,
        position,
        individual_intercepts,
        individual_positions,
    })
}

pub(crate) fn apply_group_block(state: &mut ModelState, k: usize, block: GroupBlock) {
    state.group_intercepts[k] = block.intercept;
    state.group_positions[k] = block.position;
    state.individual_intercepts[k] = block.individual_intercepts;
    state.individual_positions[k] = block.individual_positions;
}

#[inline]
fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    log_ratio.is_finite() && u.ln() < log_ratio
}

/// Joint random-walk Metropolis update of group `k`'s intercept, position and
/// all of its respondents' intercepts and positions, with a single
/// accept/reject decision for the whole block.
pub fn update_group_block<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &ResponseDataset,
    hp: &Hyperparameters,
    k: usize,
    intercept_scale: f64,
    position_scale: f64,
    rng: &mut R,
) -> Result<bool> {
    if k >= state.num_groups() {
        return Err(Error::Bounds(format!("group {k} of {}", state.num_groups())));
    }
    state.check_against(data)?;
    let ctx = SweepContext::new(state, hp)?;
    match propose_group_block(state, data, hp, &ctx, k, intercept_scale, position_scale, rng) {
        Some(block) => {
            apply_group_block(state, k, block);
            Ok(true)
        }
        None => Ok(false),
    }
}

fn item_log_target(
    state: &ModelState,
    data: &ResponseDataset,
    hp: &Hyperparameters,
    ctx: &SweepContext,
    j: usize,
    intercept: f64,
    position: &[f64],
) -> f64 {
    let mut lp = -0.5 * (intercept - hp.beta0).powi(2) / (hp.tau * hp.tau) + ctx.psi_w.kernel(position, &hp.w0);
    for (k, g) in data.groups().iter().enumerate() {
        for i in 0..g.size() {
            if let Some(y) = g.responses.get(i, j) {
                let eta = state.individual_intercepts[k][i]
                    + intercept
                    + linalg::dot(&state.individual_positions[k][i], position)
                    + state.residuals[k][i][j];
                lp += cell_log_likelihood(y, eta);
            }
        }
    }
    lp
}

pub(crate) fn propose_item<R: Rng + ?Sized>(
    state: &ModelState,
    data: &ResponseDataset,
    hp: &Hyperparameters,
    ctx: &SweepContext,
    j: usize,
    scale: f64,
    rng: &mut R,
) -> Option<(f64, Vec<f64>)> {
    let intercept = state.item_intercepts[j] + scale * linalg::standard_normal(rng);
    let position: Vec<f64> = state.item_positions[j]
        .iter()
        .map(|x| x + scale * linalg::standard_normal(rng))
        .collect();
    let current = item_log_target(state, data, hp, ctx, j, state.item_intercepts[j], &state.item_positions[j]);
    let proposed = item_log_target(state, data, hp, ctx, j, intercept, &position);
    accept(proposed - current, rng).then_some((intercept, position))
}

/// Joint random-walk Metropolis update of (β_j, w_j) using column `j` of every group.
pub fn update_item<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &ResponseDataset,
    hp: &Hyperparameters,
    j: usize,
    scale: f64,
    rng: &mut R,
) -> Result<bool> {
    if j >= state.num_items() {
        return Err(Error::Bounds(format!("item {j} of {}", state.num_items())));
    }
    state.check_against(data)?;
    let ctx = SweepContext::new(state, hp)?;
    match propose_item(state, data, hp, &ctx, j, scale, rng) {
        Some((b, w)) => {
            state.item_intercepts[j] = b;
            state.item_positions[j] = w;
            Ok(true)
        }
        None => Ok(false),
    }
}

/// Element-wise Metropolis update of group `k`'s residuals. Missing cells get
/// an exact draw from N(0, 1/φ). Returns (accepted, proposed) over observed cells.
pub(crate) fn update_group_residuals<R: Rng + ?Sized>(
    state: &ModelState,
    residuals: &mut [Vec<f64>],
    data: &ResponseDataset,
    hp: &Hyperparameters,
    k: usize,
    scale: f64,
    rng: &mut R,
) -> (u64, u64) {
    let responses = &data.group(k).responses;
    let sd = hp.phi.recip().sqrt();
    let (mut accepted, mut proposed) = (0u64, 0u64);
    for (i, row) in residuals.iter_mut().enumerate() {
        for (j, eps) in row.iter_mut().enumerate() {
            match responses.get(i, j) {
                None => *eps = sd * linalg::standard_normal(rng),
                Some(y) => {
                    proposed += 1;
                    let rest = state.systematic(k, i, j);
                    let cand = *eps + scale * linalg::standard_normal(rng);
                    let log_ratio = cell_log_likelihood(y, rest + cand) - cell_log_likelihood(y, rest + *eps)
                        - 0.5 * hp.phi * (cand * cand - *eps * *eps);
                    if accept(log_ratio, rng) {
                        *eps = cand;
                        accepted += 1;
                    }
                }
            }
        }
    }
    (accepted, proposed)
}

/// Residual update over all cells, group-major then row-major.
pub fn update_residuals<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &ResponseDataset,
    hp: &Hyperparameters,
    scale: f64,
    rng: &mut R,
) -> Result<(u64, u64)> {
    state.check_against(data)?;
    let mut residuals = std::mem::take(&mut state.residuals);
    let mut total = (0, 0);
    for (k, block) in residuals.iter_mut().enumerate() {
        let (a, p) = update_group_residuals(state, block, data, hp, k, scale, rng);
        total.0 += a;
        total.1 += p;
    }
    state.residuals = residuals;
    Ok(total)
}

/// Shape and scale of the conditional Inv-Gamma for σ²_(k).
pub fn group_variance_posterior(state: &ModelState, hp: &Hyperparameters, k: usize) -> (f64, f64) {
    let alphas = &state.individual_intercepts[k];
    let center = state.group_intercepts[k];
    let ss: f64 = alphas.iter().map(|a| (a - center).powi(2)).sum();
    (hp.a_sigma + alphas.len() as f64 / 2.0, hp.b_sigma + 0.5 * ss)
}

/// Conjugate draw σ²_(k) ~ Inv-Gamma(a_σ + n_k/2, b_σ + ½ Σᵢ (α_i(k) − α_(k))²).
pub fn gibbs_group_variance<R: Rng + ?Sized>(
    state: &mut ModelState,
    hp: &Hyperparameters,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let (shape, scale) = group_variance_posterior(state, hp, k);
    let gamma = Gamma::new(shape, 1.0 / scale).map_err(|e| Error::numerical(format!("gamma draw: {e}")))?;
    state.group_variances[k] = 1.0 / gamma.sample(rng);
    Ok(())
}

/// Parameters of the conditional Inv-Wishart distributions of Ψ_z and Ψ_w.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariancePosterior {
    pub scale_z: DMatrix<f64>,
    pub df_z: f64,
    pub scale_w: DMatrix<f64>,
    pub df_w: f64,
}

pub fn covariance_posterior(state: &ModelState, hp: &Hyperparameters) -> CovariancePosterior {
    let d = hp.dim;
    let outer = |m: &mut DMatrix<f64>, a: &[f64], b: &[f64], weight: f64| {
        for r in 0..d {
            for c in 0..d {
                m[(r, c)] += weight * (a[r] - b[r]) * (a[c] - b[c]);
            }
        }
    };
    let mut scale_z = hp.s_z.clone();
    let mut n_total = 0usize;
    for k in 0..state.num_groups() {
        let center = &state.group_positions[k];
        for z in &state.individual_positions[k] {
            outer(&mut scale_z, z, center, 1.0);
            n_total += 1;
        }
        outer(&mut scale_z, center, &hp.z0, hp.kappa0);
    }
    let mut scale_w = hp.s_w.clone();
    for w in &state.item_positions {
        outer(&mut scale_w, w, &hp.w0, 1.0);
    }
    CovariancePosterior {
        scale_z,
        df_z: hp.nu_z + n_total as f64 + state.num_groups() as f64,
        scale_w,
        df_w: hp.nu_w + state.num_items() as f64,
    }
}

/// Conjugate Inv-Wishart draws of Ψ_z then Ψ_w.
pub fn gibbs_covariances<R: Rng + ?Sized>(state: &mut ModelState, hp: &Hyperparameters, rng: &mut R) -> Result<()> {
    let post = covariance_posterior(state, hp);
    let dump = |what: &str, m: &DMatrix<f64>| Error::Numerical {
        message: format!("{what} scale matrix is not positive definite after accumulation"),
        dump: serde_json::to_string(&linalg::to_rows(m)).ok(),
    };
    if !linalg::is_spd(&post.scale_z) {
        return Err(dump("Psi_z", &post.scale_z));
    }
    if !linalg::is_spd(&post.scale_w) {
        return Err(dump("Psi_w", &post.scale_w));
    }
    state.psi_z = linalg::sample_inv_wishart(&post.scale_z, post.df_z, rng)?;
    state.psi_w = linalg::sample_inv_wishart(&post.scale_w, post.df_w, rng)?;
    Ok(())
}

/// Per-sweep accept/reject record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutcome {
    pub group_accepted: Vec<bool>,
    pub item_accepted: Vec<bool>,
    pub residual_accepted: u64,
    pub residual_proposed: u64,
}

fn map_indices<T, F>(pool: Option<&rayon::ThreadPool>, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool {
        Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}

/// One full iteration: group blocks (ascending k), items (ascending j),
/// residuals, σ²_(k), Ψ_z, Ψ_w.
pub fn sweep(
    state: &mut ModelState,
    data: &ResponseDataset,
    hp: &Hyperparameters,
    scales: &BlockScales,
    seed: u64,
    iteration: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<SweepOutcome> {
    let ctx = SweepContext::new(state, hp)?;
    let mut outcome = SweepOutcome::default();

    let blocks = {
        let st: &ModelState = state;
        map_indices(pool, st.num_groups(), |k| {
            let mut rng = stream_rng(seed, iteration, Stream::Group, k as u64);
            propose_group_block(
                st,
                data,
                hp,
                &ctx,
                k,
                scales.group_intercept[k],
                scales.group_position[k],
                &mut rng,
            )
        })
    };
    for (k, block) in blocks.into_iter().enumerate() {
        outcome.group_accepted.push(block.is_some());
        if let Some(block) = block {
            apply_group_block(state, k, block);
        }
    }

    let items = {
        let st: &ModelState = state;
        map_indices(pool, st.num_items(), |j| {
            let mut rng = stream_rng(seed, iteration, Stream::Item, j as u64);
            propose_item(st, data, hp, &ctx, j, scales.item[j], &mut rng)
        })
    };
    for (j, item) in items.into_iter().enumerate() {
        outcome.item_accepted.push(item.is_some());
        if let Some((b, w)) = item {
            state.item_intercepts[j] = b;
            state.item_positions[j] = w;
        }
    }

    let mut residuals = std::mem::take(&mut state.residuals);
    let counts = {
        let st: &ModelState = state;
        let run = |(k, block): (usize, &mut Vec<Vec<f64>>)| {
            let mut rng = stream_rng(seed, iteration, Stream::Residual, k as u64);
            update_group_residuals(st, block, data, hp, k, scales.residual, &mut rng)
        };
        match pool {
            Some(pool) => pool.install(|| residuals.par_iter_mut().enumerate().map(run).collect::<Vec<_>>()),
            None => residuals.iter_mut().enumerate().map(run).collect(),
        }
    };
    state.residuals = residuals;
    for (a, p) in counts {
        outcome.residual_accepted += a;
        outcome.residual_proposed += p;
    }

    for k in 0..state.num_groups() {
        let mut rng = stream_rng(seed, iteration, Stream::Variance, k as u64);
        gibbs_group_variance(state, hp, k, &mut rng)?;
    }
    let mut rng = stream_rng(seed, iteration, Stream::Covariance, 0);
    gibbs_covariances(state, hp, &mut rng)?;
    Ok(outcome)
}
