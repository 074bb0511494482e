//! Python bindings: datasets, simulation, fitting, alignment, summaries,
//! clustering and metrics. Reports come back as plain dicts and lists.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde::Serialize;
use serde_json::Value;

use hlsirm::clustering;
use hlsirm::data::{self, Group, ResponseDataset, ResponseMatrix, SimulateOptions, Sizes, SyntheticDesign, Truth};
use hlsirm::evaluate::{self, FitMode, PpcMode};
use hlsirm::postprocess::{self, AlignedChain, AlignmentBasis, ReferencePolicy};
use hlsirm::sampler::{self, ChainConfig, PosteriorChain};
use hlsirm::{Error, Hyperparameters, ModelState};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Bounds(_) => PyIndexError::new_err(e.to_string()),
        Error::Numerical { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any()
            } else if let Some(u) = n.as_u64() {
                u.into_pyobject(py)?.into_any()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any()
            }
        }
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, json_to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    hlsirm::linalg::from_rows(rows).map_err(PyValueError::new_err)
}

#[pyclass(name = "Hyperparameters", module = "hlsirm_py", from_py_object)]
#[derive(Clone)]
struct PyHyperparameters {
    inner: Hyperparameters,
}

#[pymethods]
impl PyHyperparameters {
    #[new]
    #[pyo3(signature = (dim=2, sigma_alpha=None, tau=None, a_sigma=None, b_sigma=None, nu_z=None, nu_w=None, kappa0=None, phi=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        dim: usize,
        sigma_alpha: Option<f64>,
        tau: Option<f64>,
        a_sigma: Option<f64>,
        b_sigma: Option<f64>,
        nu_z: Option<f64>,
        nu_w: Option<f64>,
        kappa0: Option<f64>,
        phi: Option<f64>,
    ) -> PyResult<Self> {
        let mut hp = Hyperparameters::with_dim(dim);
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut hp.sigma_alpha, sigma_alpha);
        set(&mut hp.tau, tau);
        set(&mut hp.a_sigma, a_sigma);
        set(&mut hp.b_sigma, b_sigma);
        set(&mut hp.nu_z, nu_z);
        set(&mut hp.nu_w, nu_w);
        set(&mut hp.kappa0, kappa0);
        set(&mut hp.phi, phi);
        hp.validate().map_err(py_err)?;
        Ok(Self { inner: hp })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Hyperparameters(dim={})", self.inner.dim)
    }
}

#[pyclass(name = "Dataset", module = "hlsirm_py", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: ResponseDataset,
}

#[pymethods]
impl PyDataset {
    /// Wide CSV with columns group_id, respondent_id, then one per item.
    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_dataset(path, None).map_err(py_err)?,
        })
    }

    /// `responses[k][i][j]` is True, False or None (missing).
    #[staticmethod]
    #[pyo3(signature = (responses, group_ids=None, item_ids=None))]
    fn from_responses(
        responses: Vec<Vec<Vec<Option<bool>>>>,
        group_ids: Option<Vec<String>>,
        item_ids: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let p = responses.iter().flatten().next().map_or(0, |r| r.len());
        let group_ids = group_ids.unwrap_or_else(|| (0..responses.len()).map(|k| format!("g{}", k + 1)).collect());
        if group_ids.len() != responses.len() {
            return Err(PyValueError::new_err("group_ids length differs from the number of groups"));
        }
        let item_ids = item_ids.unwrap_or_else(|| (0..p).map(|j| format!("item_{}", j + 1)).collect());
        let groups = responses
            .into_iter()
            .zip(group_ids)
            .map(|(rows, id)| {
                Ok(Group {
                    respondent_ids: (0..rows.len()).map(|i| format!("{}", i + 1)).collect(),
                    id,
                    responses: ResponseMatrix::from_rows(rows).map_err(py_err)?,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: ResponseDataset::new(groups, item_ids).map_err(py_err)?,
        })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        data::save_dataset(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn num_groups(&self) -> usize {
        self.inner.num_groups()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    #[getter]
    fn group_sizes(&self) -> Vec<usize> {
        self.inner.group_sizes()
    }

    #[getter]
    fn item_ids(&self) -> Vec<String> {
        self.inner.item_ids().to_vec()
    }

    #[getter]
    fn group_ids(&self) -> Vec<String> {
        self.inner.groups().iter().map(|g| g.id.clone()).collect()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn responses(&self, k: usize) -> PyResult<Vec<Vec<Option<bool>>>> {
        if k >= self.inner.num_groups() {
            return Err(PyIndexError::new_err(format!("group {k} of {}", self.inner.num_groups())));
        }
        let r = &self.inner.group(k).responses;
        Ok((0..r.rows()).map(|i| r.row(i).to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(groups={}, respondents={}, items={})",
            self.inner.num_groups(),
            self.inner.total_respondents(),
            self.inner.num_items()
        )
    }
}

#[pyclass(name = "State", module = "hlsirm_py", from_py_object)]
#[derive(Clone)]
struct PyState {
    inner: ModelState,
}

#[pymethods]
impl PyState {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ModelState = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn group_intercepts(&self) -> Vec<f64> {
        self.inner.group_intercepts.clone()
    }

    #[getter]
    fn group_variances(&self) -> Vec<f64> {
        self.inner.group_variances.clone()
    }

    #[getter]
    fn group_positions(&self) -> Vec<Vec<f64>> {
        self.inner.group_positions.clone()
    }

    #[getter]
    fn individual_intercepts(&self) -> Vec<Vec<f64>> {
        self.inner.individual_intercepts.clone()
    }

    #[getter]
    fn individual_positions(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.individual_positions.clone()
    }

    #[getter]
    fn item_intercepts(&self) -> Vec<f64> {
        self.inner.item_intercepts.clone()
    }

    #[getter]
    fn item_positions(&self) -> Vec<Vec<f64>> {
        self.inner.item_positions.clone()
    }

    #[getter]
    fn psi_z(&self) -> Vec<Vec<f64>> {
        hlsirm::linalg::to_rows(&self.inner.psi_z)
    }

    #[getter]
    fn psi_w(&self) -> Vec<Vec<f64>> {
        hlsirm::linalg::to_rows(&self.inner.psi_w)
    }

    /// Copy with every position multiplied on the right by the orthogonal `r`.
    fn rotated(&self, r: Vec<Vec<f64>>) -> PyResult<Self> {
        let r = matrix(&r)?;
        if r.nrows() != self.inner.dim() || r.ncols() != self.inner.dim() {
            return Err(PyValueError::new_err("rotation must be D x D"));
        }
        let mut s = self.inner.clone();
        s.rotate(&r);
        Ok(Self { inner: s })
    }

    fn log_likelihood(&self, dataset: &PyDataset) -> PyResult<f64> {
        hlsirm::model::log_likelihood(&self.inner, &dataset.inner).map_err(py_err)
    }

    fn log_posterior(&self, dataset: &PyDataset, hyperparameters: &PyHyperparameters) -> PyResult<f64> {
        hlsirm::model::log_posterior(&self.inner, &dataset.inner, &hyperparameters.inner).map_err(py_err)
    }

    fn alpha_tilde(&self) -> Vec<f64> {
        postprocess::alpha_tilde(&self.inner)
    }

    fn beta_tilde(&self) -> Vec<f64> {
        postprocess::beta_tilde(&self.inner)
    }
}

/// Simulate responses. With `design=True` group positions are spread at equal
/// angles (the recovery design); otherwise every parameter is a prior draw.
#[pyfunction]
#[pyo3(signature = (group_sizes, num_items, dim=2, seed=1, design=false, suppress_residuals=false, hyperparameters=None))]
fn simulate(
    group_sizes: Vec<usize>,
    num_items: usize,
    dim: usize,
    seed: u64,
    design: bool,
    suppress_residuals: bool,
    hyperparameters: Option<PyHyperparameters>,
) -> PyResult<(PyDataset, PyState)> {
    let hp = hyperparameters.map_or_else(|| Hyperparameters::with_dim(dim), |h| h.inner);
    let options = SimulateOptions {
        suppress_residuals,
        residual_precision: hp.phi,
    };
    let sizes = Sizes::new(group_sizes.clone(), num_items, dim);
    let truth = if design {
        let d = SyntheticDesign {
            group_sizes,
            num_items,
            dim,
            ..Default::default()
        };
        Truth::State(d.truth(seed).map_err(py_err)?)
    } else {
        Truth::Prior(hp)
    };
    let (data, state) = data::simulate_dataset(&truth, &sizes, seed, &options).map_err(py_err)?;
    Ok((PyDataset { inner: data }, PyState { inner: state }))
}

#[pyclass(name = "Chain", module = "hlsirm_py")]
struct PyChain {
    inner: PosteriorChain,
}

#[pymethods]
impl PyChain {
    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn sample(&self, index: usize) -> PyResult<PyState> {
        self.inner
            .samples
            .get(index)
            .map(|s| PyState { inner: s.clone() })
            .ok_or_else(|| PyIndexError::new_err(format!("sample {index} of {}", self.inner.samples.len())))
    }

    /// Posterior-mean P(y = 1) per observed cell, `[k][i][j]`.
    #[getter]
    fn fitted_probabilities(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.fitted_probabilities.clone()
    }

    /// Post-burn-in acceptance rate per block.
    fn acceptance_rates(&self) -> Vec<(String, f64)> {
        self.inner.acceptance.sampling.rates()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let file = std::fs::File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        sampler::write_chain(&self.inner, Value::Null, std::io::BufWriter::new(file)).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let file = std::fs::File::open(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let cf = sampler::read_chain(std::io::BufReader::new(file)).map_err(py_err)?;
        Ok(Self { inner: cf.chain })
    }

    /// Effective sample size, Geweke z and (single chain) diagnostics on
    /// rotation-invariant functionals.
    fn convergence<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = evaluate::convergence_diagnostics(&[&self.inner.samples]).map_err(py_err)?;
        to_py(py, &report)
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, hyperparameters=None, iterations=30_000, burn_in=5_000, thin=5, seed=1, threads=1, store_residuals=false))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    dataset: &PyDataset,
    hyperparameters: Option<PyHyperparameters>,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
    threads: usize,
    store_residuals: bool,
) -> PyResult<PyChain> {
    let hp = hyperparameters.map_or_else(Hyperparameters::default, |h| h.inner);
    let config = ChainConfig {
        iterations,
        burn_in,
        thin,
        seed,
        threads,
        store_residuals,
        ..Default::default()
    };
    let data = dataset.inner.clone();
    let chain = py.detach(move || sampler::run_chain(&data, &hp, &config)).map_err(py_err)?;
    Ok(PyChain { inner: chain })
}

#[pyclass(name = "AlignedChain", module = "hlsirm_py")]
struct PyAligned {
    inner: AlignedChain,
}

#[pymethods]
impl PyAligned {
    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn sample(&self, index: usize) -> PyResult<PyState> {
        self.inner
            .samples
            .get(index)
            .map(|s| PyState { inner: s.clone() })
            .ok_or_else(|| PyIndexError::new_err(format!("sample {index} of {}", self.inner.samples.len())))
    }

    fn posterior_mean(&self) -> PyState {
        PyState {
            inner: self.inner.posterior_mean(),
        }
    }

    #[getter]
    fn rotations(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.rotations.iter().map(hlsirm::linalg::to_rows).collect()
    }

    #[getter]
    fn reference(&self) -> Vec<Vec<f64>> {
        hlsirm::linalg::to_rows(&self.inner.reference)
    }

    /// Posterior means, sds and 95% intervals of every parameter.
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.summary)
    }

    /// α̃, β̃ and map coordinates with magnitudes and angles.
    fn interaction_summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &postprocess::interaction_adjusted(&self.inner).map_err(py_err)?)
    }

    #[pyo3(signature = (dataset, marginal=false, seed=1))]
    fn fitted_probabilities(&self, dataset: &PyDataset, marginal: bool, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let mode = if marginal {
            FitMode::Marginal { phi: 1.0, seed }
        } else {
            FitMode::InSample
        };
        evaluate::fitted_probabilities(&self.inner, &dataset.inner, mode).map_err(py_err)
    }

    /// Pooled and per-group AUC / F1-optimal threshold metrics.
    fn classification_metrics<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        let p = evaluate::fitted_probabilities(&self.inner, &dataset.inner, FitMode::InSample).map_err(py_err)?;
        to_py(py, &evaluate::classification_metrics(&p, &dataset.inner).map_err(py_err)?)
    }

    #[pyo3(signature = (dataset, hyperparameters=None, replicates=200, full_posterior=false, seed=1))]
    fn posterior_predictive<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        hyperparameters: Option<PyHyperparameters>,
        replicates: usize,
        full_posterior: bool,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let hp = hyperparameters.map_or_else(|| Hyperparameters::with_dim(self.inner.reference.ncols()), |h| h.inner);
        let mode = if full_posterior {
            PpcMode::FullPosterior
        } else {
            PpcMode::PosteriorMean
        };
        let report =
            evaluate::posterior_predictive(&self.inner.samples, &dataset.inner, &hp, replicates, mode, seed).map_err(py_err)?;
        to_py(py, &report)
    }

    fn item_positions(&self) -> Vec<Vec<f64>> {
        self.inner.posterior_mean().item_positions
    }
}

/// Procrustes-align every sample. `reference` is "pilot-mean", "last-sample",
/// or an explicit configuration matrix; `basis` is "items-and-groups" or "items".
#[pyfunction]
#[pyo3(signature = (chain, reference=None, basis="items-and-groups"))]
fn align(chain: &PyChain, reference: Option<&Bound<'_, PyAny>>, basis: &str) -> PyResult<PyAligned> {
    let basis = match basis {
        "items-and-groups" => AlignmentBasis::ItemsAndGroups,
        "items" => AlignmentBasis::ItemsOnly,
        other => return Err(PyValueError::new_err(format!("unknown basis {other:?}"))),
    };
    let policy = match reference {
        None => ReferencePolicy::PilotMean,
        Some(r) => {
            if let Ok(name) = r.extract::<String>() {
                match name.as_str() {
                    "pilot-mean" => ReferencePolicy::PilotMean,
                    "last-sample" => ReferencePolicy::LastSample,
                    other => return Err(PyValueError::new_err(format!("unknown reference {other:?}"))),
                }
            } else {
                ReferencePolicy::Fixed(matrix(&r.extract::<Vec<Vec<f64>>>()?)?)
            }
        }
    };
    Ok(PyAligned {
        inner: postprocess::align_chain_with(&chain.inner, &policy, basis).map_err(py_err)?,
    })
}

/// Orthogonal R minimising ‖source·R − target‖_F; returns (R, degenerate).
#[pyfunction]
fn procrustes(source: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, bool)> {
    let p = postprocess::procrustes_rotation(&matrix(&source)?, &matrix(&target)?).map_err(py_err)?;
    Ok((hlsirm::linalg::to_rows(&p.rotation), p.degenerate))
}

#[pyfunction]
#[pyo3(signature = (item_positions, k, seed=1))]
fn cluster_items<'py>(py: Python<'py>, item_positions: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &clustering::cluster_items(&item_positions, k, seed).map_err(py_err)?)
}

#[pyfunction]
#[pyo3(signature = (item_positions, k_min=2, k_max=7, seed=1))]
fn select_k<'py>(
    py: Python<'py>,
    item_positions: Vec<Vec<f64>>,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &clustering::select_k(&item_positions, k_min..=k_max, seed).map_err(py_err)?)
}

#[pyfunction]
fn silhouette_score(labels: Vec<usize>, item_positions: Vec<Vec<f64>>) -> PyResult<f64> {
    clustering::silhouette_score(&labels, &item_positions).map_err(py_err)
}

#[pyfunction]
fn davies_bouldin(labels: Vec<usize>, item_positions: Vec<Vec<f64>>) -> PyResult<f64> {
    clustering::davies_bouldin(&labels, &item_positions).map(|d| d.value).map_err(py_err)
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    clustering::adjusted_rand_index(&a, &b).map_err(py_err)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evaluate::auc(&scores, &labels).map_err(py_err)
}

/// Metrics at the F1-maximising threshold.
#[pyfunction]
fn binary_metrics<'py>(py: Python<'py>, scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &evaluate::binary_metrics(&scores, &labels).map_err(py_err)?)
}

#[pyfunction]
fn effective_sample_size(x: Vec<f64>) -> f64 {
    evaluate::effective_sample_size(&x)
}

#[pymodule]
fn hlsirm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", hlsirm::VERSION)?;
    m.add_class::<PyHyperparameters>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyState>()?;
    m.add_class::<PyChain>()?;
    m.add_class::<PyAligned>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(procrustes, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_items, m)?)?;
    m.add_function(wrap_pyfunction!(select_k, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette_score, m)?)?;
    m.add_function(wrap_pyfunction!(davies_bouldin, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(binary_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(effective_sample_size, m)?)?;
    Ok(())
}
