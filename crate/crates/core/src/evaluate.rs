//! Model-fit assessment: fitted probabilities, posterior predictive checks,
//! classification metrics and convergence diagnostics.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ResponseDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{logistic, Hyperparameters, ModelState};
use crate::postprocess::{alpha_tilde, beta_tilde, mean_state, quantile_sorted, AlignedChain};

/// Ragged per-cell values: group → respondent → item.
pub type CellValues = Vec<Vec<Vec<f64>>>;

pub const DEFAULT_REPLICATES: usize = 200;
pub const MARGINAL_DRAWS: usize = 64;
pub const MIN_DIAGNOSTIC_SAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// Average of logistic(η) with the sampled residuals.
    InSample,
    /// Residuals integrated over N(0, 1/φ) by Monte Carlo, 64 draws per sample.
    Marginal { phi: f64, seed: u64 },
}

fn check_shape(state: &ModelState, data: &ResponseDataset) -> Result<()> {
    if state.num_groups() != data.num_groups()
        || state.num_items() != data.num_items()
        || state.group_sizes() != data.group_sizes()
    {
        return Err(Error::Shape("posterior samples and dataset dimensions differ".into()));
    }
    Ok(())
}

fn zeros_like(data: &ResponseDataset) -> CellValues {
    data.groups()
        .iter()
        .map(|g| vec![vec![0.0; data.num_items()]; g.size()])
        .collect()
}

/// Per-cell posterior mean of logistic(η), residuals included.
pub fn average_probabilities(samples: &[ModelState], data: &ResponseDataset) -> Result<CellValues> {
    if samples.is_empty() {
        return Err(Error::Argument("no posterior samples".into()));
    }
    let mut out = zeros_like(data);
    let n = samples.len() as f64;
    for s in samples {
        s.check_against(data)?;
        for (k, g) in out.iter_mut().enumerate() {
            for (i, row) in g.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell += logistic(s.systematic(k, i, j) + s.residuals[k][i][j]) / n;
                }
            }
        }
    }
    Ok(out)
}

/// Per-cell posterior mean of E_ε[logistic(η)] with ε ~ N(0, 1/φ).
pub fn marginal_probabilities(
    samples: &[ModelState],
    data: &ResponseDataset,
    phi: f64,
    seed: u64,
) -> Result<CellValues> {
    if samples.is_empty() {
        return Err(Error::Argument("no posterior samples".into()));
    }
    let sd = 1.0 / phi.sqrt();
    let mut out = zeros_like(data);
    let n = samples.len() as f64;
    for (t, s) in samples.iter().enumerate() {
        check_shape(s, data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        for (k, g) in out.iter_mut().enumerate() {
            for (i, row) in g.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    let eta = s.systematic(k, i, j);
                    let mean = (0..MARGINAL_DRAWS)
                        .map(|_| logistic(eta + sd * linalg::standard_normal(&mut rng)))
                        .sum::<f64>()
                        / MARGINAL_DRAWS as f64;
                    *cell += mean / n;
                }
            }
        }
    }
    Ok(out)
}

/// Fitted probabilities for an aligned chain. In-sample mode uses stored
/// residuals when present and otherwise the running average kept by the sampler.
pub fn fitted_probabilities(chain: &AlignedChain, data: &ResponseDataset, mode: FitMode) -> Result<CellValues> {
    match mode {
        FitMode::InSample => {
            if chain.samples.first().is_some_and(ModelState::has_residuals) {
                return average_probabilities(&chain.samples, data);
            }
            if let Some(s) = chain.samples.first() {
                check_shape(s, data)?;
            }
            let acc = &chain.fitted_probabilities;
            let matches = acc.len() == data.num_groups()
                && acc
                    .iter()
                    .zip(data.groups())
                    .all(|(g, dg)| g.len() == dg.size() && g.iter().all(|r| r.len() == data.num_items()));
            if !matches {
                return Err(Error::Shape("chain has neither residuals nor matching fitted probabilities".into()));
            }
            Ok(acc.clone())
        }
        FitMode::Marginal { phi, seed } => marginal_probabilities(&chain.samples, data, phi, seed),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PpcMode {
    /// Individuals redrawn around the posterior-mean group parameters.
    #[default]
    PosteriorMean,
    /// Replicate r redraws around posterior sample ⌊r·n/S⌋.
    FullPosterior,
}

/// Observed statistic against its replicate distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub label: String,
    pub observed: f64,
    pub replicated_mean: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
    /// Observed value inside the central 95% replicate interval.
    pub covered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpcReport {
    pub replicates: usize,
    pub mode: PpcMode,
    pub items: Vec<RateCheck>,
    pub groups: Vec<RateCheck>,
    pub item_coverage: f64,
    pub group_coverage: f64,
}

/// Endorsement rates over observed cells, per item and per group.
fn rates(data: &ResponseDataset) -> (Vec<f64>, Vec<f64>) {
    let p = data.num_items();
    let mut item_hits = vec![0usize; p];
    let mut item_obs = vec![0usize; p];
    let mut group_rates = Vec::with_capacity(data.num_groups());
    for g in data.groups() {
        let (mut hits, mut obs) = (0usize, 0usize);
        for i in 0..g.size() {
            for (j, cell) in g.responses.row(i).iter().enumerate() {
                if let Some(y) = cell {
                    item_obs[j] += 1;
                    obs += 1;
                    if *y {
                        item_hits[j] += 1;
                        hits += 1;
                    }
                }
            }
        }
        group_rates.push(if obs > 0 { hits as f64 / obs as f64 } else { f64::NAN });
    }
    let item_rates = item_hits
        .iter()
        .zip(&item_obs)
        .map(|(&h, &o)| if o > 0 { h as f64 / o as f64 } else { f64::NAN })
        .collect();
    (item_rates, group_rates)
}

/// Copy of `estimate` with every individual intercept and position redrawn
/// from its group distribution and fresh residuals from N(0, 1/φ).
pub fn redraw_individuals<R: Rng + ?Sized>(estimate: &ModelState, phi: f64, rng: &mut R) -> ModelState {
    let psi_factor = linalg::psd_factor(&estimate.psi_z);
    let eps_sd = 1.0 / phi.sqrt();
    let p = estimate.num_items();
    let mut out = estimate.without_residuals();
    out.residuals = Vec::with_capacity(out.num_groups());
    for k in 0..out.num_groups() {
        let alpha_sd = estimate.group_variances[k].max(0.0).sqrt();
        let mut eps = Vec::with_capacity(out.individual_intercepts[k].len());
        for i in 0..out.individual_intercepts[k].len() {
            out.individual_intercepts[k][i] = estimate.group_intercepts[k] + alpha_sd * linalg::standard_normal(rng);
            out.individual_positions[k][i] = linalg::sample_with_factor(&estimate.group_positions[k], &psi_factor, rng);
            eps.push((0..p).map(|_| eps_sd * linalg::standard_normal(rng)).collect());
        }
        out.residuals.push(eps);
    }
    out
}

/// One replicate dataset on the observed pattern of `data`.
pub fn replicate_dataset<R: Rng + ?Sized>(
    estimate: &ModelState,
    data: &ResponseDataset,
    hp: &Hyperparameters,
    rng: &mut R,
) -> Result<ResponseDataset> {
    check_shape(estimate, data)?;
    let draw = redraw_individuals(estimate, hp.phi, rng);
    crate::data::redraw_responses(&draw, data, rng)
}

fn rate_check(label: String, observed: f64, mut draws: Vec<f64>) -> RateCheck {
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    draws.sort_by(f64::total_cmp);
    let lower = quantile_sorted(&draws, 0.025);
    let upper = quantile_sorted(&draws, 0.975);
    RateCheck {
        label,
        observed,
        replicated_mean: mean,
        lower,
        median: quantile_sorted(&draws, 0.5),
        upper,
        covered: lower <= observed && observed <= upper,
    }
}

fn ppc_from_estimates<'s>(
    estimate: impl Fn(usize) -> &'s ModelState,
    data: &ResponseDataset,
    hp: &Hyperparameters,
    replicates: usize,
    mode: PpcMode,
    seed: u64,
) -> Result<PpcReport> {
    if replicates == 0 {
        return Err(Error::Argument("posterior predictive check needs at least one replicate".into()));
    }
    let (obs_items, obs_groups) = rates(data);
    let mut item_draws = vec![Vec::with_capacity(replicates); data.num_items()];
    let mut group_draws = vec![Vec::with_capacity(replicates); data.num_groups()];
    for r in 0..replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let rep = replicate_dataset(estimate(r), data, hp, &mut rng)?;
        let (items, groups) = rates(&rep);
        item_draws.iter_mut().zip(items).for_each(|(d, v)| d.push(v));
        group_draws.iter_mut().zip(groups).for_each(|(d, v)| d.push(v));
    }
    let items: Vec<RateCheck> = data
        .item_ids()
        .iter()
        .zip(obs_items)
        .zip(item_draws)
        .map(|((id, o), d)| rate_check(id.clone(), o, d))
        .collect();
    let groups: Vec<RateCheck> = data
        .groups()
        .iter()
        .zip(obs_groups)
        .zip(group_draws)
        .map(|((g, o), d)| rate_check(g.id.clone(), o, d))
        .collect();
    let coverage = |c: &[RateCheck]| c.iter().filter(|x| x.covered).count() as f64 / c.len().max(1) as f64;
    Ok(PpcReport {
        replicates,
        mode,
        item_coverage: coverage(&items),
        group_coverage: coverage(&groups),
        items,
        groups,
    })
}

/// Posterior predictive check conditioned on a single parameter estimate.
pub fn posterior_predictive_from_state(
    estimate: &ModelState,
    data: &ResponseDataset,
    hp: &Hyperparameters,
    replicates: usize,
    seed: u64,
) -> Result<PpcReport> {
    ppc_from_estimates(|_| estimate, data, hp, replicates, PpcMode::PosteriorMean, seed)
}

pub fn posterior_predictive(
    samples: &[ModelState],
    data: &ResponseDataset,
    hp: &Hyperparameters,
    replicates: usize,
    mode: PpcMode,
    seed: u64,
) -> Result<PpcReport> {
    if samples.is_empty() {
        return Err(Error::Argument("no posterior samples".into()));
    }
    match mode {
        PpcMode::PosteriorMean => {
            let mean = mean_state(samples);
            posterior_predictive_from_state(&mean, data, hp, replicates, seed)
        }
        PpcMode::FullPosterior => {
            let n = samples.len();
            ppc_from_estimates(|r| &samples[r * n / replicates], data, hp, replicates, mode, seed)
        }
    }
}

/// statistic, label, observed, replicate mean and quantiles, coverage.
pub fn write_ppc_csv<W: Write>(report: &PpcReport, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["statistic", "label", "observed", "replicated_mean", "q025", "q50", "q975", "covered"])?;
    let rows = report
        .items
        .iter()
        .map(|c| ("item_rate", c))
        .chain(report.groups.iter().map(|c| ("group_rate", c)));
    for (kind, c) in rows {
        wtr.write_record([
            kind.to_string(),
            c.label.clone(),
            c.observed.to_string(),
            c.replicated_mean.to_string(),
            c.lower.to_string(),
            c.median.to_string(),
            c.upper.to_string(),
            c.covered.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Area under the ROC curve by the Mann–Whitney statistic with mid-ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let mid = (start + end) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[start..=end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Value("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("metrics need at least one positive and one negative cell".into()));
    }
    Ok((pos, neg))
}

/// Confusion counts and derived rates for the rule "positive iff score ≥ threshold".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub cells: usize,
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub specificity: f64,
    pub sensitivity: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
    pub auc: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Metrics at a fixed threshold.
pub fn metrics_at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<BinaryMetrics> {
    class_counts(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(BinaryMetrics {
        cells: scores.len(),
        threshold,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        specificity: ratio(tn, tn + fp),
        sensitivity: ratio(tp, tp + fn_),
        accuracy: ratio(tp + tn, scores.len()),
        precision: ratio(tp, tp + fp),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        auc: auc(scores, labels)?,
    })
}

/// Threshold over the unique scores that maximizes F1; ties go to the lower threshold.
pub fn max_f1_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    class_counts(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y).count() as u128;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // F1 = 2tp / (tp + fp + pos), compared exactly as fractions.
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut best: Option<(u128, u128, f64)> = None;
    let mut start = 0;
    while start < order.len() {
        let t = scores[order[start]];
        let mut end = start;
        while end < order.len() && scores[order[end]] == t {
            if labels[order[end]] {
                tp += 1;
            } else {
                fp += 1;
            }
            end += 1;
        }
        let (num, den) = (2 * tp, tp + fp + pos);
        if best.is_none_or(|(bn, bd, _)| num * bd >= bn * den) {
            best = Some((num, den, t));
        }
        start = end;
    }
    Ok(best.expect("non-empty scores").2)
}

/// Metrics at the F1-maximizing threshold.
pub fn binary_metrics(scores: &[f64], labels: &[bool]) -> Result<BinaryMetrics> {
    let t = max_f1_threshold(scores, labels)?;
    metrics_at(scores, labels, t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group_id: String,
    /// None when the group has only one response class.
    pub metrics: Option<BinaryMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pooled: BinaryMetrics,
    /// Each group scored at its own F1-maximizing threshold.
    pub per_group: Vec<GroupMetrics>,
}

fn observed_pairs(p_hat: &[Vec<f64>], g: &crate::data::Group) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, row) in p_hat.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if let Some(y) = g.responses.get(i, j) {
                scores.push(p);
                labels.push(y);
            }
        }
    }
    (scores, labels)
}

/// Pooled and per-group classification metrics over observed cells.
pub fn classification_metrics(p_hat: &CellValues, data: &ResponseDataset) -> Result<MetricsReport> {
    let shape_ok = p_hat.len() == data.num_groups()
        && p_hat
            .iter()
            .zip(data.groups())
            .all(|(g, dg)| g.len() == dg.size() && g.iter().all(|r| r.len() == data.num_items()));
    if !shape_ok {
        return Err(Error::Shape("probabilities do not match the dataset".into()));
    }
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut per_group = Vec::new();
    for (probs, g) in p_hat.iter().zip(data.groups()) {
        let (s, l) = observed_pairs(probs, g);
        per_group.push(GroupMetrics {
            group_id: g.id.clone(),
            metrics: binary_metrics(&s, &l).ok(),
        });
        all_scores.extend(s);
        all_labels.extend(l);
    }
    Ok(MetricsReport {
        pooled: binary_metrics(&all_scores, &all_labels)?,
        per_group,
    })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
}

/// Effective sample size from Geyer's initial monotone sequence estimator.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let (m, var) = mean_var(x);
    if var == 0.0 {
        return n as f64;
    }
    let rho = |lag: usize| -> f64 {
        x[..n - lag]
            .iter()
            .zip(&x[lag..])
            .map(|(a, b)| (a - m) * (b - m))
            .sum::<f64>()
            / (n as f64 * var)
    };
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        tau += 2.0 * pair;
        prev = pair;
        lag += 2;
    }
    n as f64 / tau.max(1.0 / n as f64)
}

/// Geweke z-score comparing the first 10% with the last 50% of the draws;
/// variances of the segment means use each segment's effective size.
pub fn geweke_z(x: &[f64]) -> f64 {
    let n = x.len();
    let a = &x[..(n / 10).max(2)];
    let b = &x[n - (n / 2).max(2)..];
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let se2 = va / effective_sample_size(a) + vb / effective_sample_size(b);
    if se2 == 0.0 {
        return if ma == mb { 0.0 } else { f64::INFINITY };
    }
    (ma - mb) / se2.sqrt()
}

/// Split-chain potential scale reduction over two or more chains.
pub fn split_rhat(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Argument("split R-hat needs at least two chains".into()));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if n < 2 {
        return Err(Error::Argument("chains too short for split R-hat".into()));
    }
    let halves: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..n], &c[n..2 * n]]).collect();
    let m = halves.len() as f64;
    let nf = n as f64;
    let stats: Vec<(f64, f64)> = halves
        .iter()
        .map(|h| {
            let (mean, v) = mean_var(h);
            (mean, v * nf / (nf - 1.0))
        })
        .collect();
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m;
    let between = nf / (m - 1.0) * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>();
    let within = stats.iter().map(|s| s.1).sum::<f64>() / m;
    if within == 0.0 {
        return Ok(if between == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (nf - 1.0) / nf * within + between / nf;
    Ok((var_plus / within).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub name: String,
    pub ess: f64,
    pub geweke_z: f64,
    pub rhat: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub samples_per_chain: usize,
    pub chains: usize,
    pub diagnostics: Vec<Diagnostic>,
    pub min_ess: f64,
    pub max_abs_geweke: f64,
    pub max_rhat: Option<f64>,
}

/// Rotation-invariant scalar functionals of one sample, with names.
pub fn invariant_functionals(s: &ModelState) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (k, a) in s.group_intercepts.iter().enumerate() {
        out.push((format!("alpha[{k}]"), *a));
    }
    for (k, v) in s.group_variances.iter().enumerate() {
        out.push((format!("sigma2[{k}]"), *v));
    }
    for (k, g) in s.individual_intercepts.iter().enumerate() {
        for (i, a) in g.iter().enumerate() {
            out.push((format!("alpha[{k}][{i}]"), *a));
        }
    }
    for (j, b) in s.item_intercepts.iter().enumerate() {
        out.push((format!("beta[{j}]"), *b));
    }
    for (k, a) in alpha_tilde(s).into_iter().enumerate() {
        out.push((format!("alpha_tilde[{k}]"), a));
    }
    for (j, b) in beta_tilde(s).into_iter().enumerate() {
        out.push((format!("beta_tilde[{j}]"), b));
    }
    for (k, z) in s.group_positions.iter().enumerate() {
        out.push((format!("|z[{k}]|"), linalg::norm(z)));
    }
    for (j, w) in s.item_positions.iter().enumerate() {
        out.push((format!("|w[{j}]|"), linalg::norm(w)));
    }
    for (k, z) in s.group_positions.iter().enumerate() {
        for (j, w) in s.item_positions.iter().enumerate() {
            out.push((format!("<z[{k}],w[{j}]>"), linalg::dot(z, w)));
        }
    }
    out.push(("tr(Psi_z)".into(), s.psi_z.trace()));
    out.push(("tr(Psi_w)".into(), s.psi_w.trace()));
    out
}

/// ESS and Geweke per invariant functional; split R-hat when two or more
/// chains are given.
pub fn convergence_diagnostics(chains: &[&[ModelState]]) -> Result<ConvergenceReport> {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if chains.is_empty() || n < MIN_DIAGNOSTIC_SAMPLES {
        return Err(Error::Argument(format!(
            "convergence diagnostics need at least {MIN_DIAGNOSTIC_SAMPLES} samples per chain, got {n}"
        )));
    }
    let names: Vec<String> = invariant_functionals(&chains[0][0]).into_iter().map(|(n, _)| n).collect();
    let series: Vec<Vec<Vec<f64>>> = chains
        .iter()
        .map(|c| {
            let rows: Vec<Vec<f64>> = c
                .iter()
                .map(|s| invariant_functionals(s).into_iter().map(|(_, v)| v).collect())
                .collect();
            (0..names.len()).map(|f| rows.iter().map(|r| r[f]).collect()).collect()
        })
        .collect();
    let mut diagnostics = Vec::with_capacity(names.len());
    for (f, name) in names.into_iter().enumerate() {
        let per_chain: Vec<&[f64]> = series.iter().map(|c| c[f].as_slice()).collect();
        let ess = per_chain.iter().map(|c| effective_sample_size(c)).sum();
        let geweke = per_chain
            .iter()
            .map(|c| geweke_z(c))
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        let rhat = (chains.len() >= 2).then(|| split_rhat(&per_chain)).transpose()?;
        diagnostics.push(Diagnostic {
            name,
            ess,
            geweke_z: geweke,
            rhat,
        });
    }
    Ok(ConvergenceReport {
        samples_per_chain: n,
        chains: chains.len(),
        min_ess: diagnostics.iter().map(|d| d.ess).fold(f64::INFINITY, f64::min),
        max_abs_geweke: diagnostics.iter().map(|d| d.geweke_z.abs()).fold(0.0, f64::max),
        max_rhat: diagnostics.iter().filter_map(|d| d.rhat).reduce(f64::max),
        diagnostics,
    })
}
