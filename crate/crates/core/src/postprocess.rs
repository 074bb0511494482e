//! Rotational alignment of posterior samples and interaction-map summaries.
//!
//! The likelihood depends on positions only through inner products, so each
//! sample is identified up to an orthogonal transform. Samples are rotated onto
//! a common reference by orthogonal Procrustes on the stacked item and group
//! positions; the same rotation is then applied to every individual position
//! and to Ψ_z, Ψ_w.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, ResponseDataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ModelState;
use crate::sampler::PosteriorChain;

/// Solution of min over orthogonal R of ‖source·R − target‖_F.
#[derive(Clone, Debug, PartialEq)]
pub struct Procrustes {
    pub rotation: DMatrix<f64>,
    /// Set when sourceᵀ·target is rank deficient and the optimum is not unique.
    pub degenerate: bool,
}

pub fn procrustes_rotation(source: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<Procrustes> {
    if source.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "procrustes: source {:?} vs target {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let (n, d) = source.shape();
    if n < d || d == 0 {
        return Err(Error::Argument(format!("procrustes needs at least D={d} rows, got {n}")));
    }
    let cross = source.transpose() * target;
    let svd = cross.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let sv = &svd.singular_values;
    let largest = sv.max();
    let smallest = sv.min();
    Ok(Procrustes {
        rotation: u * v_t,
        degenerate: largest == 0.0 || smallest <= 1e-12 * largest,
    })
}

/// Which positions define the alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentBasis {
    /// Items stacked over group positions, [W; Z_group].
    #[default]
    ItemsAndGroups,
    ItemsOnly,
}

/// Stacked configuration used for alignment.
pub fn configuration(state: &ModelState, basis: AlignmentBasis) -> DMatrix<f64> {
    let d = state.dim();
    let rows: Vec<&Vec<f64>> = match basis {
        AlignmentBasis::ItemsAndGroups => state.item_positions.iter().chain(&state.group_positions).collect(),
        AlignmentBasis::ItemsOnly => state.item_positions.iter().collect(),
    };
    DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c])
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReferencePolicy {
    LastSample,
    /// Mean configuration after a first pass aligned to the last sample.
    PilotMean,
    /// A caller-supplied configuration (e.g. the generating truth).
    Fixed(DMatrix<f64>),
}

impl Default for ReferencePolicy {
    fn default() -> Self {
        ReferencePolicy::PilotMean
    }
}

/// Posterior mean, standard deviation and equal-tailed 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Type-7 (linear interpolation) sample quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Interval {
    pub fn from_draws(draws: &[f64]) -> Self {
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = if draws.len() > 1 {
            draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean,
            sd: var.sqrt(),
            lower: quantile_sorted(&sorted, 0.025),
            upper: quantile_sorted(&sorted, 0.975),
        }
    }
}

/// Summaries of every parameter over aligned samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub group_intercepts: Vec<Interval>,
    pub group_variances: Vec<Interval>,
    pub group_positions: Vec<Vec<Interval>>,
    pub individual_intercepts: Vec<Vec<Interval>>,
    pub individual_positions: Vec<Vec<Vec<Interval>>>,
    pub item_intercepts: Vec<Interval>,
    pub item_positions: Vec<Vec<Interval>>,
    pub psi_z: Vec<Vec<Interval>>,
    pub psi_w: Vec<Vec<Interval>>,
}

fn interval_of<F: Fn(&ModelState) -> f64>(samples: &[ModelState], f: F) -> Interval {
    let draws: Vec<f64> = samples.iter().map(f).collect();
    Interval::from_draws(&draws)
}

pub fn summarize(samples: &[ModelState]) -> Result<PosteriorSummary> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("cannot summarize an empty chain".into()))?;
    let d = first.dim();
    let sizes = first.group_sizes();
    let k = sizes.len();
    let p = first.num_items();
    let iv = |f: &dyn Fn(&ModelState) -> f64| interval_of(samples, f);
    Ok(PosteriorSummary {
        group_intercepts: (0..k).map(|g| iv(&|s| s.group_intercepts[g])).collect(),
        group_variances: (0..k).map(|g| iv(&|s| s.group_variances[g])).collect(),
        group_positions: (0..k)
            .map(|g| (0..d).map(|c| iv(&|s| s.group_positions[g][c])).collect())
            .collect(),
        individual_intercepts: (0..k)
            .map(|g| (0..sizes[g]).map(|i| iv(&|s| s.individual_intercepts[g][i])).collect())
            .collect(),
        individual_positions: (0..k)
            .map(|g| {
                (0..sizes[g])
                    .map(|i| (0..d).map(|c| iv(&|s| s.individual_positions[g][i][c])).collect())
                    .collect()
            })
            .collect(),
        item_intercepts: (0..p).map(|j| iv(&|s| s.item_intercepts[j])).collect(),
        item_positions: (0..p)
            .map(|j| (0..d).map(|c| iv(&|s| s.item_positions[j][c])).collect())
            .collect(),
        psi_z: (0..d).map(|r| (0..d).map(|c| iv(&|s| s.psi_z[(r, c)])).collect()).collect(),
        psi_w: (0..d).map(|r| (0..d).map(|c| iv(&|s| s.psi_w[(r, c)])).collect()).collect(),
    })
}

/// Posterior samples after rotation onto a common reference.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedChain {
    pub basis: AlignmentBasis,
    pub reference: DMatrix<f64>,
    pub rotations: Vec<DMatrix<f64>>,
    pub degenerate: Vec<bool>,
    pub samples: Vec<ModelState>,
    pub summary: PosteriorSummary,
    /// Carried over from the chain; rotation does not change them.
    pub fitted_probabilities: Vec<Vec<Vec<f64>>>,
}

impl AlignedChain {
    /// Component-wise posterior mean as a state (no residuals).
    pub fn posterior_mean(&self) -> ModelState {
        mean_state(&self.samples)
    }
}

pub fn mean_state(samples: &[ModelState]) -> ModelState {
    let n = samples.len() as f64;
    let mut m = samples[0].without_residuals();
    let zero = |v: &mut f64| *v = 0.0;
    m.group_intercepts.iter_mut().for_each(zero);
    m.group_variances.iter_mut().for_each(zero);
    m.item_intercepts.iter_mut().for_each(zero);
    m.group_positions.iter_mut().flatten().for_each(zero);
    m.individual_intercepts.iter_mut().flatten().for_each(zero);
    m.individual_positions.iter_mut().flatten().flatten().for_each(zero);
    m.item_positions.iter_mut().flatten().for_each(zero);
    m.psi_z.fill(0.0);
    m.psi_w.fill(0.0);
    for s in samples {
        let add = |dst: &mut f64, src: &f64| *dst += src / n;
        m.group_intercepts.iter_mut().zip(&s.group_intercepts).for_each(|(a, b)| add(a, b));
        m.group_variances.iter_mut().zip(&s.group_variances).for_each(|(a, b)| add(a, b));
        m.item_intercepts.iter_mut().zip(&s.item_intercepts).for_each(|(a, b)| add(a, b));
        m.group_positions
            .iter_mut()
            .flatten()
            .zip(s.group_positions.iter().flatten())
            .for_each(|(a, b)| add(a, b));
        m.individual_intercepts
            .iter_mut()
            .flatten()
            .zip(s.individual_intercepts.iter().flatten())
            .for_each(|(a, b)| add(a, b));
        m.individual_positions
            .iter_mut()
            .flatten()
            .flatten()
            .zip(s.individual_positions.iter().flatten().flatten())
            .for_each(|(a, b)| add(a, b));
        m.item_positions
            .iter_mut()
            .flatten()
            .zip(s.item_positions.iter().flatten())
            .for_each(|(a, b)| add(a, b));
        m.psi_z += &s.psi_z / n;
        m.psi_w += &s.psi_w / n;
    }
    m
}

/// Rotate each sample onto `reference`; returns (rotations, degeneracy flags, rotated samples).
pub fn align_to_reference(
    samples: &[ModelState],
    reference: &DMatrix<f64>,
    basis: AlignmentBasis,
) -> Result<(Vec<DMatrix<f64>>, Vec<bool>, Vec<ModelState>)> {
    let mut rotations = Vec::with_capacity(samples.len());
    let mut flags = Vec::with_capacity(samples.len());
    let mut aligned = Vec::with_capacity(samples.len());
    for s in samples {
        let fit = procrustes_rotation(&configuration(s, basis), reference)?;
        let mut rotated = s.clone();
        rotated.rotate(&fit.rotation);
        rotations.push(fit.rotation);
        flags.push(fit.degenerate);
        aligned.push(rotated);
    }
    Ok((rotations, flags, aligned))
}

pub fn align_chain(chain: &PosteriorChain, policy: &ReferencePolicy) -> Result<AlignedChain> {
    align_chain_with(chain, policy, AlignmentBasis::default())
}

pub fn align_chain_with(chain: &PosteriorChain, policy: &ReferencePolicy, basis: AlignmentBasis) -> Result<AlignedChain> {
    let last = chain
        .samples
        .last()
        .ok_or_else(|| Error::Argument("cannot align an empty chain".into()))?;
    let reference = match policy {
        ReferencePolicy::LastSample => configuration(last, basis),
        ReferencePolicy::Fixed(m) => m.clone(),
        ReferencePolicy::PilotMean => {
            let (_, _, pilot) = align_to_reference(&chain.samples, &configuration(last, basis), basis)?;
            let mut mean = DMatrix::zeros(0, 0);
            for (i, s) in pilot.iter().enumerate() {
                let c = configuration(s, basis);
                if i == 0 {
                    mean = c;
                } else {
                    mean += c;
                }
            }
            mean / pilot.len() as f64
        }
    };
    let (rotations, degenerate, samples) = align_to_reference(&chain.samples, &reference, basis)?;
    let summary = summarize(&samples)?;
    Ok(AlignedChain {
        basis,
        reference,
        rotations,
        degenerate,
        samples,
        summary,
        fitted_probabilities: chain.fitted_probabilities.clone(),
    })
}

/// α̃_(k) = α_(k) + (1/p) Σ_j ⟨z_(k), w_j⟩ for one sample.
pub fn alpha_tilde(state: &ModelState) -> Vec<f64> {
    let p = state.num_items() as f64;
    state
        .group_intercepts
        .iter()
        .zip(&state.group_positions)
        .map(|(a, z)| a + state.item_positions.iter().map(|w| linalg::dot(z, w)).sum::<f64>() / p)
        .collect()
}

/// β̃_j = β_j + (1/K) Σ_k ⟨z_(k), w_j⟩ for one sample.
pub fn beta_tilde(state: &ModelState) -> Vec<f64> {
    let k = state.num_groups() as f64;
    state
        .item_intercepts
        .iter()
        .zip(&state.item_positions)
        .map(|(b, w)| b + state.group_positions.iter().map(|z| linalg::dot(z, w)).sum::<f64>() / k)
        .collect()
}

/// Magnitude and direction of a mean position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub coordinates: Vec<f64>,
    pub magnitude: f64,
    /// atan2 of the first two coordinates (0 or π in one dimension).
    pub angle_radians: f64,
}

impl MapPoint {
    fn new(coordinates: Vec<f64>) -> Self {
        let magnitude = linalg::norm(&coordinates);
        let angle_radians = match coordinates.as_slice() {
            [x] if *x < 0.0 => std::f64::consts::PI,
            [_] | [] => 0.0,
            [x, y, ..] => y.atan2(*x),
        };
        Self {
            coordinates,
            magnitude,
            angle_radians,
        }
    }
}

/// Interaction-adjusted effects and the mean interaction map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSummary {
    pub alpha_tilde: Vec<Interval>,
    pub beta_tilde: Vec<Interval>,
    pub groups: Vec<MapPoint>,
    pub individuals: Vec<Vec<MapPoint>>,
    pub items: Vec<MapPoint>,
}

pub fn interaction_adjusted(chain: &AlignedChain) -> Result<InteractionSummary> {
    if chain.samples.is_empty() {
        return Err(Error::Argument("empty aligned chain".into()));
    }
    let alphas: Vec<Vec<f64>> = chain.samples.iter().map(alpha_tilde).collect();
    let betas: Vec<Vec<f64>> = chain.samples.iter().map(beta_tilde).collect();
    let column = |rows: &[Vec<f64>], c: usize| rows.iter().map(|r| r[c]).collect::<Vec<_>>();
    let means = |ivs: &[Interval]| ivs.iter().map(|i| i.mean).collect::<Vec<_>>();
    let s = &chain.summary;
    Ok(InteractionSummary {
        alpha_tilde: (0..alphas[0].len()).map(|k| Interval::from_draws(&column(&alphas, k))).collect(),
        beta_tilde: (0..betas[0].len()).map(|j| Interval::from_draws(&column(&betas, j))).collect(),
        groups: s.group_positions.iter().map(|v| MapPoint::new(means(v))).collect(),
        individuals: s
            .individual_positions
            .iter()
            .map(|g| g.iter().map(|v| MapPoint::new(means(v))).collect())
            .collect(),
        items: s.item_positions.iter().map(|v| MapPoint::new(means(v))).collect(),
    })
}

/// Plot-ready map rows: entity_type, entity_id, dim1..dimD, magnitude,
/// angle_radians, then one column per covariate (filled on group rows).
pub fn write_map_csv<W: Write>(
    summary: &InteractionSummary,
    data: &ResponseDataset,
    covariates: Option<&Covariates>,
    out: W,
) -> Result<()> {
    let d = summary.items.first().map_or(0, |m| m.coordinates.len());
    let cov_keys: Vec<String> = covariates
        .map(|c| {
            let mut keys: Vec<String> = c.values().flat_map(|m| m.keys().cloned()).collect();
            keys.sort();
            keys.dedup();
            keys
        })
        .unwrap_or_default();
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["entity_type".to_string(), "entity_id".to_string()];
    header.extend((1..=d).map(|c| format!("dim{c}")));
    header.push("magnitude".into());
    header.push("angle_radians".into());
    header.extend(cov_keys.iter().cloned());
    wtr.write_record(&header)?;

    let mut row = |kind: &str, id: String, point: &MapPoint, group: Option<&str>| -> Result<()> {
        let mut rec = vec![kind.to_string(), id];
        rec.extend(point.coordinates.iter().map(|v| v.to_string()));
        rec.push(point.magnitude.to_string());
        rec.push(point.angle_radians.to_string());
        for key in &cov_keys {
            let value = group
                .and_then(|g| covariates.and_then(|c| c.get(g)))
                .and_then(|m| m.get(key))
                .map(ToString::to_string)
                .unwrap_or_default();
            rec.push(value);
        }
        wtr.write_record(&rec)?;
        Ok(())
    };
    for (g, point) in data.groups().iter().zip(&summary.groups) {
        row("group", g.id.clone(), point, Some(&g.id))?;
    }
    for (g, points) in data.groups().iter().zip(&summary.individuals) {
        for (rid, point) in g.respondent_ids.iter().zip(points) {
            row("individual", format!("{}/{}", g.id, rid), point, None)?;
        }
    }
    for (id, point) in data.item_ids().iter().zip(&summary.items) {
        row("item", id.clone(), point, None)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rotation(theta: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
    }

    fn config() -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 2, &[1.0, 0.2, -0.3, 0.8, 0.5, -1.1, 2.0, 0.4])
    }

    #[test]
    fn identity_when_source_equals_target() {
        let t = config();
        let fit = procrustes_rotation(&t, &t).unwrap();
        assert!((fit.rotation - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!(!fit.degenerate);
    }

    #[test]
    fn recovers_quarter_turn() {
        let t = config();
        let r = rotation(std::f64::consts::FRAC_PI_2);
        let source = &t * r.transpose();
        let fit = procrustes_rotation(&source, &t).unwrap();
        assert!((&fit.rotation - &r).amax() < 1e-12);
        assert!((source * fit.rotation - t).norm() <= 1e-10);
    }

    #[test]
    fn recovers_reflection() {
        let t = config();
        let flip = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        let source = &t * &flip;
        let fit = procrustes_rotation(&source, &t).unwrap();
        assert!((fit.rotation.determinant() + 1.0).abs() < 1e-12);
        assert!((fit.rotation - flip).amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_cross_product_is_flagged() {
        let t = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.0]);
        assert!(procrustes_rotation(&t, &t).unwrap().degenerate);
        assert!(procrustes_rotation(&DMatrix::zeros(1, 2), &DMatrix::zeros(1, 2)).is_err());
    }

    fn random_state(rng: &mut ChaCha8Rng) -> ModelState {
        let mut s = ModelState::zeros(&[3, 2], 4, 2);
        let mut draw = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = linalg::standard_normal(rng));
        s.group_positions.iter_mut().for_each(&mut draw);
        s.item_positions.iter_mut().for_each(&mut draw);
        s.individual_positions.iter_mut().flatten().for_each(&mut draw);
        s.group_intercepts = vec![0.3, -0.2];
        s.item_intercepts = vec![0.1, -0.4, 0.0, 0.9];
        s
    }

    fn chain_of(samples: Vec<ModelState>) -> PosteriorChain {
        PosteriorChain {
            config: Default::default(),
            data_fingerprint: String::new(),
            samples,
            acceptance: Default::default(),
            adaptation_trace: Vec::new(),
            fitted_probabilities: Vec::new(),
        }
    }

    #[test]
    fn identical_samples_get_identity_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_state(&mut rng);
        let aligned = align_chain(&chain_of(vec![s.clone(); 5]), &ReferencePolicy::PilotMean).unwrap();
        for r in &aligned.rotations {
            assert!((r - DMatrix::identity(2, 2)).amax() < 1e-12);
        }
    }

    #[test]
    fn rotated_copies_are_undone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_state(&mut rng);
        let samples: Vec<ModelState> = (0..6)
            .map(|i| {
                let mut s = base.clone();
                s.rotate(&rotation(0.7 * i as f64));
                s
            })
            .collect();
        let reference = configuration(&base, AlignmentBasis::ItemsAndGroups);
        let aligned = align_chain(&chain_of(samples), &ReferencePolicy::Fixed(reference)).unwrap();
        for s in &aligned.samples {
            for (a, b) in s.individual_positions.iter().flatten().flatten().zip(base.individual_positions.iter().flatten().flatten()) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!((&s.psi_z - &base.psi_z).amax() < 1e-10);
        }
    }

    #[test]
    fn empty_chain_is_argument_error() {
        assert!(matches!(align_chain(&chain_of(vec![]), &ReferencePolicy::LastSample), Err(Error::Argument(_))));
    }

    #[test]
    fn alignment_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<ModelState> = (0..8)
            .map(|i| {
                let mut s = random_state(&mut rng);
                s.rotate(&rotation(i as f64));
                s
            })
            .collect();
        let aligned = align_chain(&chain_of(samples), &ReferencePolicy::PilotMean).unwrap();
        let (rots, _, _) = align_to_reference(&aligned.samples, &aligned.reference, aligned.basis).unwrap();
        for r in rots {
            assert!((r - DMatrix::identity(2, 2)).amax() < 1e-10);
        }
    }

    #[test]
    fn tilde_single_term_arithmetic() {
        let mut s = ModelState::zeros(&[1], 1, 2);
        s.group_intercepts[0] = 0.3;
        s.item_intercepts[0] = -0.1;
        s.group_positions[0] = vec![1.0, 0.0];
        s.item_positions[0] = vec![2.0, 0.0];
        assert!((alpha_tilde(&s)[0] - 2.3).abs() < 1e-15);
        assert!((beta_tilde(&s)[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_group_positions_leave_main_effects() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut samples = Vec::new();
        for _ in 0..4 {
            let mut s = random_state(&mut rng);
            s.group_positions.iter_mut().flatten().for_each(|x| *x = 0.0);
            s.group_intercepts[0] = linalg::standard_normal(&mut rng);
            samples.push(s);
        }
        let aligned = align_chain(&chain_of(samples), &ReferencePolicy::LastSample).unwrap();
        let summary = interaction_adjusted(&aligned).unwrap();
        for k in 0..2 {
            assert!((summary.alpha_tilde[k].mean - aligned.summary.group_intercepts[k].mean).abs() < 1e-12);
        }
        for j in 0..4 {
            assert!((summary.beta_tilde[j].mean - aligned.summary.item_intercepts[j].mean).abs() < 1e-12);
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert!((quantile_sorted(&v, 0.975) - 4.9).abs() < 1e-12);
    }

    #[test]
    fn map_point_angles() {
        assert!((MapPoint::new(vec![0.0, 2.0]).angle_radians - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(MapPoint::new(vec![-1.0]).angle_radians, std::f64::consts::PI);
        assert_eq!(MapPoint::new(vec![3.0, 4.0]).magnitude, 5.0);
    }
}
