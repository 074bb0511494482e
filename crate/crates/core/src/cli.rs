//! Command-line orchestration: `simulate`, `fit` and `analyze`.
//!
//! A run is described by one TOML document; `--seed`, `--threads` and `--out`
//! override it. Every artifact records the code version and a fingerprint of
//! the resolved configuration (threads and output directory excluded, since
//! neither changes results).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{select_k, write_clusters_csv, IndexCurves, Selection};
use crate::data::{self, ResponseDataset, SimulateOptions, SyntheticDesign, Truth};
use crate::error::{Error, Result};
use crate::evaluate::{self, ConvergenceReport, FitMode, MetricsReport, PpcMode, PpcReport};
use crate::linalg;
use crate::model::{Hyperparameters, ModelState};
use crate::postprocess::{self, AlignmentBasis, InteractionSummary, PosteriorSummary, ReferencePolicy};
use crate::sampler::{self, AcceptanceLog, ChainConfig, ProposalScales, Sampler};
use crate::VERSION;

pub const DATASET_FILE: &str = "dataset.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const CHAIN_FILE: &str = "chain.bin";
pub const ACCEPTANCE_FILE: &str = "acceptance.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MAP_FILE: &str = "map.csv";
pub const CLUSTERS_FILE: &str = "clusters.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PPC_FILE: &str = "ppc.csv";
pub const METRICS_FILE: &str = "metrics.json";

/// Healthy per-block acceptance band for `fit`.
pub const ACCEPTANCE_BAND: (f64, f64) = (0.05, 0.7);

/// Hyperparameters with every field optional; missing entries take the
/// defaults for the chosen dimension.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperparameterConfig {
    pub dim: Option<usize>,
    pub alpha0: Option<f64>,
    pub sigma_alpha: Option<f64>,
    pub beta0: Option<f64>,
    pub tau: Option<f64>,
    pub z0: Option<Vec<f64>>,
    pub w0: Option<Vec<f64>>,
    pub kappa0: Option<f64>,
    pub s_z: Option<Vec<Vec<f64>>>,
    pub nu_z: Option<f64>,
    pub s_w: Option<Vec<Vec<f64>>>,
    pub nu_w: Option<f64>,
    pub a_sigma: Option<f64>,
    pub b_sigma: Option<f64>,
    pub phi: Option<f64>,
}

impl HyperparameterConfig {
    pub fn resolve(&self) -> Result<Hyperparameters> {
        let mut hp = Hyperparameters::with_dim(self.dim.unwrap_or(2));
        let matrix = |rows: &Vec<Vec<f64>>| linalg::from_rows(rows).map_err(Error::Configuration);
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { hp.$f = v.clone(); } )* };
        }
        take!(alpha0, sigma_alpha, beta0, tau, z0, w0, kappa0, nu_z, nu_w, a_sigma, b_sigma, phi);
        if let Some(m) = &self.s_z {
            hp.s_z = matrix(m)?;
        }
        if let Some(m) = &self.s_w {
            hp.s_w = matrix(m)?;
        }
        hp.validate()?;
        Ok(hp)
    }
}

/// Chain settings; the seed and thread count live at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub proposal_scales: ProposalScales,
    pub adapt: bool,
    pub target_acceptance: f64,
    pub checkpoint_every: Option<usize>,
    pub store_residuals: bool,
}

impl Default for ChainSection {
    fn default() -> Self {
        let c = ChainConfig::default();
        Self {
            iterations: c.iterations,
            burn_in: c.burn_in,
            thin: c.thin,
            proposal_scales: c.proposal_scales,
            adapt: c.adapt,
            target_acceptance: c.target_acceptance,
            checkpoint_every: c.checkpoint_every,
            store_residuals: c.store_residuals,
        }
    }
}

impl ChainSection {
    pub fn with(&self, seed: u64, threads: usize) -> ChainConfig {
        ChainConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            seed,
            proposal_scales: self.proposal_scales.clone(),
            adapt: self.adapt,
            target_acceptance: self.target_acceptance,
            checkpoint_every: self.checkpoint_every,
            store_residuals: self.store_residuals,
            threads,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthSource {
    /// Structured generator with separated group directions.
    #[default]
    Design,
    /// Every parameter drawn from the prior stack.
    Prior,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub source: TruthSource,
    /// Sizes are taken from here for both sources.
    pub design: SyntheticDesign,
    pub suppress_residuals: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceChoice {
    #[default]
    PilotMean,
    LastSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    pub reference: ReferenceChoice,
    pub basis: AlignmentBasis,
    pub k_min: usize,
    pub k_max: usize,
    pub replicates: usize,
    pub ppc_mode: PpcMode,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            reference: ReferenceChoice::default(),
            basis: AlignmentBasis::default(),
            k_min: 2,
            k_max: 7,
            replicates: evaluate::DEFAULT_REPLICATES,
            ppc_mode: PpcMode::default(),
        }
    }
}

/// Input locations; unset paths default to the fixed names under the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub chain: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub hyperparameters: HyperparameterConfig,
    pub chain: ChainSection,
    pub simulate: SimulateSection,
    pub analyze: AnalyzeSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: 1,
            hyperparameters: HyperparameterConfig::default(),
            chain: ChainSection::default(),
            simulate: SimulateSection::default(),
            analyze: AnalyzeSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn hyperparameters(&self) -> Result<Hyperparameters> {
        self.hyperparameters.resolve()
    }

    pub fn chain_config(&self) -> ChainConfig {
        self.chain.with(self.seed, self.threads)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn input(&self, set: &Option<PathBuf>, default: &str) -> PathBuf {
        set.clone().unwrap_or_else(|| self.out_dir().join(default))
    }

    /// SHA-256 over the resolved settings that can change any output value.
    pub fn fingerprint(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Resolved<'a> {
            seed: u64,
            hyperparameters: Hyperparameters,
            chain: ChainConfig,
            simulate: &'a SimulateSection,
            analyze: &'a AnalyzeSection,
            data: Option<String>,
            covariates: Option<String>,
            chain_path: Option<String>,
        }
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let resolved = Resolved {
            seed: self.seed,
            hyperparameters: self.hyperparameters()?,
            chain: self.chain.with(self.seed, 1),
            simulate: &self.simulate,
            analyze: &self.analyze,
            data: show(&self.paths.data),
            covariates: show(&self.paths.covariates),
            chain_path: show(&self.paths.chain),
        };
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&resolved)?);
        Ok(data::hex_digest(h))
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance {
            version: VERSION.to_string(),
            config_fingerprint: self.fingerprint()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_fingerprint: String,
}

impl Provenance {
    fn comment(&self, extra: &str) -> String {
        format!("# {}; config {}{}\n", self.version, self.config_fingerprint, extra)
    }
}

#[derive(Parser, Debug)]
#[command(name = "hlsirm", version, about = "Hierarchical latent space item response model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset and its generating parameters.
    Simulate(CommonArgs),
    /// Run the sampler on a dataset.
    Fit(CommonArgs),
    /// Align, summarize, cluster and evaluate a fitted chain.
    Analyze(CommonArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(o) = &self.out {
            cfg.paths.out = Some(o.clone());
        }
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthFile {
    pub provenance: Provenance,
    pub state: ModelState,
}

pub fn read_truth(path: &Path) -> Result<TruthFile> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[derive(Clone, Debug)]
pub struct SimulateOutcome {
    pub dataset: ResponseDataset,
    pub truth: ModelState,
    pub dataset_path: PathBuf,
    pub truth_path: PathBuf,
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateOutcome> {
    let hp = cfg.hyperparameters()?;
    let prov = cfg.provenance()?;
    let design = &cfg.simulate.design;
    let (truth, sizes) = match cfg.simulate.source {
        TruthSource::Design => (Truth::State(design.truth(cfg.seed)?), design.sizes()),
        TruthSource::Prior => (
            Truth::Prior(hp.clone()),
            data::Sizes::new(design.group_sizes.clone(), design.num_items, hp.dim),
        ),
    };
    let options = SimulateOptions {
        suppress_residuals: cfg.simulate.suppress_residuals,
        residual_precision: hp.phi,
    };
    let (dataset, state) = data::simulate_dataset(&truth, &sizes, cfg.seed, &options)?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let dataset_path = out.join(DATASET_FILE);
    let mut w = create(&dataset_path)?;
    w.write_all(
        prov.comment(&format!(
            "; groups {}; respondents {}; items {}",
            dataset.num_groups(),
            dataset.total_respondents(),
            dataset.num_items()
        ))
        .as_bytes(),
    )?;
    data::write_dataset(&dataset, &mut w)?;
    w.flush()?;
    let truth_path = out.join(TRUTH_FILE);
    write_json(
        &truth_path,
        &TruthFile {
            provenance: prov,
            state: state.clone(),
        },
    )?;
    Ok(SimulateOutcome {
        dataset,
        truth: state,
        dataset_path,
        truth_path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRate {
    pub block: String,
    pub rate: f64,
    pub healthy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub provenance: Provenance,
    pub band: (f64, f64),
    pub burn_in: Vec<BlockRate>,
    pub sampling: Vec<BlockRate>,
    pub healthy: bool,
}

impl AcceptanceReport {
    pub fn new(provenance: Provenance, log: &AcceptanceLog) -> Self {
        let (lo, hi) = ACCEPTANCE_BAND;
        let rows = |rates: Vec<(String, f64)>| -> Vec<BlockRate> {
            rates
                .into_iter()
                .map(|(block, rate)| BlockRate {
                    block,
                    rate,
                    healthy: (lo..=hi).contains(&rate),
                })
                .collect()
        };
        let burn_in = rows(log.burn_in.rates());
        let sampling = rows(log.sampling.rates());
        let healthy = sampling.iter().all(|r| r.healthy);
        Self {
            provenance,
            band: ACCEPTANCE_BAND,
            burn_in,
            sampling,
            healthy,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub chain_path: PathBuf,
    pub acceptance: AcceptanceReport,
}

pub fn load_input_dataset(cfg: &RunConfig) -> Result<ResponseDataset> {
    let path = cfg.input(&cfg.paths.data, DATASET_FILE);
    let dataset = data::load_dataset(&path, None)?;
    match &cfg.paths.covariates {
        Some(c) => dataset.with_covariates(data::load_covariates(c)?),
        None => Ok(dataset),
    }
}

/// Run the sampler; a checkpoint is kept under the output directory when
/// `chain.checkpoint_every` is set, and an existing one is resumed.
pub fn cmd_fit(cfg: &RunConfig) -> Result<FitOutcome> {
    let hp = cfg.hyperparameters()?;
    let prov = cfg.provenance()?;
    let dataset = load_input_dataset(cfg)?;
    let config = cfg.chain_config();
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let checkpoint = config.checkpoint_every.map(|_| out.join(CHECKPOINT_FILE));
    let mut sampler = match &checkpoint {
        Some(path) if path.exists() => {
            let saved = serde_json::from_reader(BufReader::new(File::open(path)?))?;
            Sampler::resume(&dataset, &hp, &config, saved)?
        }
        _ => Sampler::new(&dataset, &hp, &config)?,
    };
    let step = (config.iterations / 10).max(1);
    while !sampler.is_finished() {
        let next = sampler.iteration() + step;
        sampler.run_until(next, checkpoint.as_deref())?;
        log::info!("iteration {} of {}", sampler.iteration(), config.iterations);
    }
    let chain = sampler.finish()?;
    let chain_path = out.join(CHAIN_FILE);
    let metadata = serde_json::json!({
        "provenance": prov,
        "hyperparameters": hp,
    });
    let mut w = create(&chain_path)?;
    sampler::write_chain(&chain, metadata, &mut w)?;
    w.flush()?;
    let acceptance = AcceptanceReport::new(prov, &chain.acceptance);
    write_json(&out.join(ACCEPTANCE_FILE), &acceptance)?;
    Ok(FitOutcome { chain_path, acceptance })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ItemCluster {
    pub item_id: String,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryFile {
    pub provenance: Provenance,
    pub data_fingerprint: String,
    pub num_samples: usize,
    pub reference: Vec<Vec<f64>>,
    pub degenerate_rotations: usize,
    pub posterior: PosteriorSummary,
    pub interaction: InteractionSummary,
    pub cluster_indices: IndexCurves,
    /// Labels at the recommended k.
    pub clusters: Vec<ItemCluster>,
    pub convergence: Option<ConvergenceReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsFile {
    pub provenance: Provenance,
    pub metrics: MetricsReport,
    pub ppc_item_coverage: f64,
    pub ppc_group_coverage: f64,
}

#[derive(Clone, Debug)]
pub struct AnalyzeOutcome {
    pub interaction: InteractionSummary,
    pub selection: Selection,
    pub ppc: PpcReport,
    pub metrics: MetricsReport,
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalyzeOutcome> {
    let hp = cfg.hyperparameters()?;
    let prov = cfg.provenance()?;
    let dataset = load_input_dataset(cfg)?;
    let chain_path = cfg.input(&cfg.paths.chain, CHAIN_FILE);
    if !chain_path.exists() {
        return Err(Error::Argument(format!("chain file {} not found", chain_path.display())));
    }
    let file = sampler::read_chain(BufReader::new(File::open(&chain_path)?))?;
    let chain = file.chain;
    if chain.data_fingerprint != dataset.fingerprint() {
        return Err(Error::Argument("chain was fitted to a different dataset".into()));
    }
    let policy = match cfg.analyze.reference {
        ReferenceChoice::PilotMean => ReferencePolicy::PilotMean,
        ReferenceChoice::LastSample => ReferencePolicy::LastSample,
    };
    let aligned = postprocess::align_chain_with(&chain, &policy, cfg.analyze.basis)?;
    let interaction = postprocess::interaction_adjusted(&aligned)?;
    let item_means: Vec<Vec<f64>> = interaction.items.iter().map(|m| m.coordinates.clone()).collect();
    let selection = select_k(&item_means, cfg.analyze.k_min..=cfg.analyze.k_max, cfg.seed)?;
    let ppc = evaluate::posterior_predictive(
        &aligned.samples,
        &dataset,
        &hp,
        cfg.analyze.replicates,
        cfg.analyze.ppc_mode,
        cfg.seed,
    )?;
    let p_hat = evaluate::fitted_probabilities(&aligned, &dataset, FitMode::InSample)?;
    let metrics = evaluate::classification_metrics(&p_hat, &dataset)?;
    let convergence = (aligned.samples.len() >= evaluate::MIN_DIAGNOSTIC_SAMPLES)
        .then(|| evaluate::convergence_diagnostics(&[&aligned.samples]))
        .transpose()?;

    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let mut w = create(&out.join(MAP_FILE))?;
    w.write_all(prov.comment("").as_bytes())?;
    postprocess::write_map_csv(&interaction, &dataset, dataset.covariates(), &mut w)?;
    w.flush()?;
    let mut w = create(&out.join(CLUSTERS_FILE))?;
    w.write_all(prov.comment("").as_bytes())?;
    write_clusters_csv(&selection, dataset.item_ids(), &mut w)?;
    w.flush()?;
    let mut w = create(&out.join(PPC_FILE))?;
    w.write_all(prov.comment("").as_bytes())?;
    evaluate::write_ppc_csv(&ppc, &mut w)?;
    w.flush()?;
    let clusters = selection
        .recommended_result()
        .map(|r| {
            dataset
                .item_ids()
                .iter()
                .zip(&r.labels)
                .map(|(id, l)| ItemCluster {
                    item_id: id.clone(),
                    label: *l,
                })
                .collect()
        })
        .unwrap_or_default();
    write_json(
        &out.join(SUMMARY_FILE),
        &SummaryFile {
            provenance: prov.clone(),
            data_fingerprint: chain.data_fingerprint.clone(),
            num_samples: aligned.samples.len(),
            reference: linalg::to_rows(&aligned.reference),
            degenerate_rotations: aligned.degenerate.iter().filter(|d| **d).count(),
            posterior: aligned.summary.clone(),
            interaction: interaction.clone(),
            cluster_indices: IndexCurves::from(&selection),
            clusters,
            convergence,
        },
    )?;
    write_json(
        &out.join(METRICS_FILE),
        &MetricsFile {
            provenance: prov,
            metrics: metrics.clone(),
            ppc_item_coverage: ppc.item_coverage,
            ppc_group_coverage: ppc.group_coverage,
        },
    )?;
    Ok(AnalyzeOutcome {
        interaction,
        selection,
        ppc,
        metrics,
    })
}

/// Exit status: 0 success, 1 error, 2 fit finished with unhealthy acceptance.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Simulate(a) => a.resolve().and_then(|c| cmd_simulate(&c)).map(|_| 0),
        Command::Fit(a) => a.resolve().and_then(|c| cmd_fit(&c)).map(|f| {
            if f.acceptance.healthy {
                0
            } else {
                for r in f.acceptance.sampling.iter().filter(|r| !r.healthy) {
                    eprintln!("acceptance rate {:.3} for {} outside {:?}", r.rate, r.block, ACCEPTANCE_BAND);
                }
                2
            }
        }),
        Command::Analyze(a) => a.resolve().and_then(|c| cmd_analyze(&c)).map(|_| 0),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Numerical { dump: Some(d), .. } = &e {
                eprintln!("state dump: {d}");
            }
            1
        }
    }
}
