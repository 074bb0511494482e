//! Metropolis-within-Gibbs sampler.
//!
//! Each iteration updates, in order: every group block (one random-walk
//! Metropolis decision per group), every item's (β_j, w_j), residuals cell by
//! cell, then the conjugate σ²_(k), Ψ_z and Ψ_w draws. Proposal scales follow a
//! Robbins–Monro schedule during burn-in and are frozen afterwards.

mod io;
mod kernels;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ResponseDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, logistic, Hyperparameters, ModelState};

pub use io::{read_chain, write_chain, ChainFile};
pub use kernels::{
    covariance_posterior, gibbs_covariances, gibbs_group_variance, group_variance_posterior, sweep, update_group_block,
    update_item, update_residuals, BlockScales, CovariancePosterior, SweepOutcome, RESIDUAL_TARGET_ACCEPTANCE,
};

use kernels::{stream_rng, Stream};

/// Initial proposal standard deviations per block kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalScales {
    pub group_intercept: f64,
    pub group_position: f64,
    pub item: f64,
    pub residual: f64,
}

impl Default for ProposalScales {
    fn default() -> Self {
        Self {
            group_intercept: 0.1,
            group_position: 0.1,
            item: 0.1,
            residual: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub proposal_scales: ProposalScales,
    pub adapt: bool,
    pub target_acceptance: f64,
    pub checkpoint_every: Option<usize>,
    /// Keep every stored sample's residual matrix (memory heavy on large data).
    pub store_residuals: bool,
    /// Worker threads for within-iteration block updates; 1 means serial.
    pub threads: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            burn_in: 5_000,
            thin: 5,
            seed: 1,
            proposal_scales: ProposalScales::default(),
            adapt: true,
            target_acceptance: 0.234,
            checkpoint_every: None,
            store_residuals: false,
            threads: 1,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::Configuration(format!(
                "burn_in ({}) must be below iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Configuration("thin must be at least 1".into()));
        }
        let s = &self.proposal_scales;
        for (name, v) in [
            ("group_intercept", s.group_intercept),
            ("group_position", s.group_position),
            ("item", s.item),
            ("residual", s.residual),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Configuration(format!("proposal scale {name} must be positive")));
            }
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::Configuration("target acceptance must lie in (0, 1)".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Configuration("checkpoint_every must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Configuration("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    /// Equality on everything that influences the chain's values.
    fn same_chain_as(&self, other: &ChainConfig) -> bool {
        let strip = |c: &ChainConfig| ChainConfig {
            checkpoint_every: None,
            threads: 1,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub accepted: u64,
    pub proposed: u64,
}

impl Counter {
    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub group: Vec<Counter>,
    pub item: Vec<Counter>,
    pub residual: Counter,
}

impl PhaseCounts {
    fn new(k: usize, p: usize) -> Self {
        Self {
            group: vec![Counter::default(); k],
            item: vec![Counter::default(); p],
            residual: Counter::default(),
        }
    }

    fn record(&mut self, outcome: &SweepOutcome) {
        for (c, a) in self.group.iter_mut().zip(&outcome.group_accepted) {
            c.record(*a);
        }
        for (c, a) in self.item.iter_mut().zip(&outcome.item_accepted) {
            c.record(*a);
        }
        self.residual.accepted += outcome.residual_accepted;
        self.residual.proposed += outcome.residual_proposed;
    }

    /// Every per-block rate, labelled.
    pub fn rates(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (k, c) in self.group.iter().enumerate() {
            out.extend(c.rate().map(|r| (format!("group[{k}]"), r)));
        }
        for (j, c) in self.item.iter().enumerate() {
            out.extend(c.rate().map(|r| (format!("item[{j}]"), r)));
        }
        out.extend(self.residual.rate().map(|r| ("residual".to_string(), r)));
        out
    }
}

/// Acceptance counts split by phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceLog {
    pub burn_in: PhaseCounts,
    pub sampling: PhaseCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub scales: BlockScales,
}

/// Thinned post-burn-in samples plus run records.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorChain {
    pub config: ChainConfig,
    pub data_fingerprint: String,
    pub samples: Vec<ModelState>,
    pub acceptance: AcceptanceLog,
    pub adaptation_trace: Vec<TraceEntry>,
    /// Per-cell mean of logistic(η) over the stored samples, residuals included.
    pub fitted_probabilities: Vec<Vec<Vec<f64>>>,
}

/// Counter-based RNG position: streams are derived from (seed, iteration).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_iteration: u64,
}

/// Everything needed to continue an interrupted run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub data_fingerprint: String,
    pub config: ChainConfig,
    pub iteration: usize,
    pub rng: RngState,
    pub state: ModelState,
    pub scales: BlockScales,
    pub acceptance: AcceptanceLog,
    pub adaptation_trace: Vec<TraceEntry>,
    pub samples: Vec<ModelState>,
    pub probability_sums: Vec<Vec<Vec<f64>>>,
}

/// Deterministic starting point: zero intercepts except β_j at the logit of
/// the smoothed item endorsement rate, small random positions, unit variances.
pub fn initial_state(data: &ResponseDataset, hp: &Hyperparameters, seed: u64) -> ModelState {
    let mut rng = stream_rng(seed, u64::MAX, Stream::Init, 0);
    let sizes = data.group_sizes();
    let mut s = ModelState::zeros(&sizes, data.num_items(), hp.dim);
    for j in 0..data.num_items() {
        let (mut ones, mut seen) = (0.0, 0.0);
        for g in data.groups() {
            for i in 0..g.size() {
                if let Some(y) = g.responses.get(i, j) {
                    seen += 1.0;
                    ones += f64::from(u8::from(y));
                }
            }
        }
        let rate = (ones + 0.5) / (seen + 1.0);
        s.item_intercepts[j] = (rate / (1.0 - rate)).ln();
    }
    let mut jitter = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = 0.1 * linalg::standard_normal(&mut rng));
    s.group_positions.iter_mut().for_each(&mut jitter);
    s.individual_positions.iter_mut().flatten().for_each(&mut jitter);
    s.item_positions.iter_mut().for_each(&mut jitter);
    s
}

pub struct Sampler<'a> {
    data: &'a ResponseDataset,
    hp: &'a Hyperparameters,
    pool: Option<rayon::ThreadPool>,
    progress: Checkpoint,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a ResponseDataset, hp: &'a Hyperparameters, config: &ChainConfig) -> Result<Self> {
        Self::from_state(data, hp, config, initial_state(data, hp, config.seed))
    }

    /// Start from a caller-supplied state.
    pub fn from_state(
        data: &'a ResponseDataset,
        hp: &'a Hyperparameters,
        config: &ChainConfig,
        state: ModelState,
    ) -> Result<Self> {
        config.validate()?;
        hp.validate()?;
        state.validate()?;
        state.check_against(data)?;
        let k = data.num_groups();
        let p = data.num_items();
        let ps = &config.proposal_scales;
        let progress = Checkpoint {
            version: crate::VERSION.to_string(),
            data_fingerprint: data.fingerprint(),
            config: config.clone(),
            iteration: 0,
            rng: RngState {
                seed: config.seed,
                next_iteration: 0,
            },
            probability_sums: data
                .groups()
                .iter()
                .map(|g| vec![vec![0.0; p]; g.size()])
                .collect(),
            state,
            scales: BlockScales {
                group_intercept: vec![ps.group_intercept; k],
                group_position: vec![ps.group_position; k],
                item: vec![ps.item; p],
                residual: ps.residual,
            },
            acceptance: AcceptanceLog {
                burn_in: PhaseCounts::new(k, p),
                sampling: PhaseCounts::new(k, p),
            },
            adaptation_trace: Vec::new(),
            samples: Vec::new(),
        };
        Self::with_progress(data, hp, progress)
    }

    fn with_progress(data: &'a ResponseDataset, hp: &'a Hyperparameters, progress: Checkpoint) -> Result<Self> {
        let threads = progress.config.threads;
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Configuration(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            data,
            hp,
            pool,
            progress,
        })
    }

    /// Continue from a checkpoint written by [`Sampler::save_checkpoint`].
    pub fn resume(
        data: &'a ResponseDataset,
        hp: &'a Hyperparameters,
        config: &ChainConfig,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        if checkpoint.data_fingerprint != data.fingerprint() {
            return Err(Error::Argument("checkpoint was written for a different dataset".into()));
        }
        if !checkpoint.config.same_chain_as(config) {
            return Err(Error::Argument("checkpoint was written with a different chain configuration".into()));
        }
        let mut checkpoint = checkpoint;
        checkpoint.config = config.clone();
        Self::with_progress(data, hp, checkpoint)
    }

    pub fn iteration(&self) -> usize {
        self.progress.iteration
    }

    pub fn state(&self) -> &ModelState {
        &self.progress.state
    }

    pub fn is_finished(&self) -> bool {
        self.progress.iteration >= self.progress.config.iterations
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.progress
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(&self.progress)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Run one iteration.
    pub fn step(&mut self) -> Result<()> {
        let it = self.progress.iteration;
        let config = &self.progress.config;
        let (burn_in, thin, adapt, target) = (config.burn_in, config.thin, config.adapt, config.target_acceptance);
        let store_residuals = config.store_residuals;
        let outcome = sweep(
            &mut self.progress.state,
            self.data,
            self.hp,
            &self.progress.scales,
            self.progress.rng.seed,
            it as u64,
            self.pool.as_ref(),
        )?;

        if it < burn_in {
            self.progress.acceptance.burn_in.record(&outcome);
            if adapt {
                adapt_scales(&mut self.progress.scales, &outcome, it, target);
            }
        } else {
            self.progress.acceptance.sampling.record(&outcome);
        }
        if (it + 1) % thin == 0 {
            self.progress.adaptation_trace.push(TraceEntry {
                iteration: it,
                scales: self.progress.scales.clone(),
            });
        }
        if it >= burn_in && (it + 1 - burn_in) % thin == 0 {
            let state = &self.progress.state;
            let lp = model::log_posterior(state, self.data, self.hp)?;
            if !lp.is_finite() {
                return Err(Error::Numerical {
                    message: format!("non-finite log-posterior at iteration {it}"),
                    dump: serde_json::to_string(state).ok(),
                });
            }
            for (k, rows) in self.progress.probability_sums.iter_mut().enumerate() {
                for (i, row) in rows.iter_mut().enumerate() {
                    for (j, acc) in row.iter_mut().enumerate() {
                        *acc += logistic(state.systematic(k, i, j) + state.residuals[k][i][j]);
                    }
                }
            }
            let stored = if store_residuals {
                state.clone()
            } else {
                state.without_residuals()
            };
            self.progress.samples.push(stored);
        }
        self.progress.iteration += 1;
        self.progress.rng.next_iteration = self.progress.iteration as u64;
        Ok(())
    }

    /// Step until `iteration` iterations have completed (or the run ends).
    pub fn run_until(&mut self, iteration: usize, checkpoint: Option<&Path>) -> Result<()> {
        let end = iteration.min(self.progress.config.iterations);
        while self.progress.iteration < end {
            self.step()?;
            if let (Some(path), Some(every)) = (checkpoint, self.progress.config.checkpoint_every) {
                if self.progress.iteration % every == 0 {
                    self.save_checkpoint(path)?;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<PosteriorChain> {
        if !self.is_finished() {
            return Err(Error::Argument(format!(
                "chain stopped at iteration {} of {}",
                self.progress.iteration, self.progress.config.iterations
            )));
        }
        let p = self.progress;
        let n = p.samples.len().max(1) as f64;
        let fitted = p
            .probability_sums
            .into_iter()
            .map(|rows| rows.into_iter().map(|r| r.into_iter().map(|v| v / n).collect()).collect())
            .collect();
        Ok(PosteriorChain {
            config: p.config,
            data_fingerprint: p.data_fingerprint,
            samples: p.samples,
            acceptance: p.acceptance,
            adaptation_trace: p.adaptation_trace,
            fitted_probabilities: fitted,
        })
    }
}

fn adapt_scales(scales: &mut BlockScales, outcome: &SweepOutcome, iteration: usize, target: f64) {
    let gain = ((iteration + 1) as f64).powf(-0.6);
    let clamp = |s: f64| s.clamp(1e-8, 1e3);
    for (k, accepted) in outcome.group_accepted.iter().enumerate() {
        let f = (gain * (f64::from(u8::from(*accepted)) - target)).exp();
        scales.group_intercept[k] = clamp(scales.group_intercept[k] * f);
        scales.group_position[k] = clamp(scales.group_position[k] * f);
    }
    for (j, accepted) in outcome.item_accepted.iter().enumerate() {
        let f = (gain * (f64::from(u8::from(*accepted)) - target)).exp();
        scales.item[j] = clamp(scales.item[j] * f);
    }
    if outcome.residual_proposed > 0 {
        let rate = outcome.residual_accepted as f64 / outcome.residual_proposed as f64;
        scales.residual = clamp(scales.residual * (gain * (rate - RESIDUAL_TARGET_ACCEPTANCE)).exp());
    }
}

pub fn run_chain(data: &ResponseDataset, hp: &Hyperparameters, config: &ChainConfig) -> Result<PosteriorChain> {
    let mut sampler = Sampler::new(data, hp, config)?;
    sampler.run_until(config.iterations, None)?;
    sampler.finish()
}

/// Like [`run_chain`], writing a checkpoint every `checkpoint_every`
/// iterations and resuming from `path` when a matching checkpoint exists.
pub fn run_chain_with_checkpoint(
    data: &ResponseDataset,
    hp: &Hyperparameters,
    config: &ChainConfig,
    path: &Path,
) -> Result<PosteriorChain> {
    let mut sampler = if path.exists() {
        let checkpoint: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        Sampler::resume(data, hp, config, checkpoint)?
    } else {
        Sampler::new(data, hp, config)?
    };
    sampler.run_until(config.iterations, Some(path))?;
    sampler.finish()
}
