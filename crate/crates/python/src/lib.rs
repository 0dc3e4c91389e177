use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ::shapesel::data::{make_windows, TimeSeries};
use ::shapesel::distance;
use ::shapesel::forecast::{self, ErrorVector};
use ::shapesel::pipeline::{self, RunConfig};
use ::shapesel::select::{self, Selection};
use ::shapesel::sidl::{self, ShapeletModel, SidlConfig};
use ::shapesel::synth::{self, BaseSignal, SynthSpec};

type Rows = Vec<Vec<f64>>;

fn err<E: Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn series(values: Vec<f64>) -> PyResult<TimeSeries> {
    TimeSeries::new("py", values).map_err(err)
}

#[pyfunction]
fn znorm(values: Vec<f64>) -> Vec<f64> {
    distance::znorm(&values)
}

#[pyfunction]
fn znorm_ed(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    distance::znorm_ed(&a, &b).map_err(err)
}

/// Returns `(distance, position)` of the best match of `shapelet` in `context`.
#[pyfunction]
fn sliding_min_distance(context: Vec<f64>, shapelet: Vec<f64>) -> PyResult<(f64, usize)> {
    distance::sliding_min_distance(&context, &shapelet).map_err(err)
}

/// Per-window minimum distance over all shapelets.
#[pyfunction]
fn min_distances(contexts: Vec<Vec<f64>>, shapelets: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    if shapelets.is_empty() {
        return Err(PyValueError::new_err("no shapelets given"));
    }
    contexts
        .iter()
        .map(|c| {
            shapelets.iter().try_fold(f64::INFINITY, |best, s| {
                let (d, _) = distance::sliding_min_distance(c, s).map_err(err)?;
                Ok(best.min(d))
            })
        })
        .collect()
}

#[pyfunction]
fn mean_std(values: Vec<f64>) -> (f64, f64) {
    forecast::mean_std(&values)
}

#[pyfunction]
fn compute_threshold(mean_err: f64, std_err: f64, delta: f64) -> f64 {
    select::compute_threshold(mean_err, std_err, delta).tau
}

#[pyfunction]
fn filter_high_error(errors: Vec<f64>, tau: f64) -> Vec<usize> {
    select::filter_high_error(&ErrorVector::new(errors), tau)
}

#[pyfunction]
fn discard(dp: f64, min_distances: Vec<f64>) -> PyResult<Vec<usize>> {
    let sel = select::discard_by_distance(dp, &min_distances).map_err(err)?;
    Ok(sel.dropped.into_iter().collect())
}

#[pyfunction]
fn random_selection(dp: f64, n: usize, seed: u64) -> PyResult<Vec<usize>> {
    let sel = select::random_selection(dp, n, seed).map_err(err)?;
    Ok(sel.dropped.into_iter().collect())
}

/// Returns `(mse_zeroed, mse_retained, coverage)`.
#[pyfunction]
fn selective_mse(errors: Vec<f64>, dropped: Vec<usize>) -> PyResult<(f64, f64, f64)> {
    let n = errors.len();
    if let Some(&bad) = dropped.iter().find(|&&i| i >= n) {
        return Err(PyValueError::new_err(format!(
            "index {bad} out of range for {n} windows"
        )));
    }
    let sel = Selection {
        n,
        dp: if n == 0 {
            0.0
        } else {
            dropped.len() as f64 / n as f64
        },
        dropped: dropped.into_iter().collect(),
        method: select::SelectionMethod::Shapelet,
        seed: None,
    };
    let r = select::selective_mse(&ErrorVector::new(errors), &sel).map_err(err)?;
    Ok((r.mse_zeroed, r.mse_retained, r.coverage))
}

/// Returns `(contexts, targets)` for windows starting at multiples of `stride`.
#[pyfunction]
#[pyo3(signature = (values, sl, fl, stride = 1))]
fn windows(
    values: Vec<f64>,
    sl: usize,
    fl: usize,
    stride: usize,
) -> PyResult<(Rows, Rows)> {
    let ws = make_windows(&series(values)?, sl, fl, stride).map_err(err)?;
    Ok((0..ws.len())
        .map(|i| (ws.context(i).to_vec(), ws.target(i).to_vec()))
        .unzip())
}

/// Ridge baseline forecaster.
#[pyclass(module = "shapesel")]
struct Baseline {
    inner: forecast::BaselineModel,
}

#[pymethods]
impl Baseline {
    #[new]
    #[pyo3(signature = (train, sl, fl, ridge = 1e-3))]
    fn new(train: Vec<f64>, sl: usize, fl: usize, ridge: f64) -> PyResult<Self> {
        let inner = forecast::fit_baseline(&series(train)?, sl, fl, ridge).map_err(err)?;
        Ok(Self { inner })
    }

    fn forecast(&self, context: Vec<f64>) -> PyResult<Vec<f64>> {
        if context.len() != self.inner.sl {
            return Err(PyValueError::new_err(format!(
                "context has {} points, expected {}",
                context.len(),
                self.inner.sl
            )));
        }
        Ok(self.inner.forecast(&context))
    }

    /// Per-window MSE of this model over every window of `values`.
    #[pyo3(signature = (values, stride = 1))]
    fn window_errors(&self, values: Vec<f64>, stride: usize) -> PyResult<Vec<f64>> {
        let ws =
            make_windows(&series(values)?, self.inner.sl, self.inner.fl, stride).map_err(err)?;
        let preds = forecast::predict(&self.inner, &ws).map_err(err)?;
        Ok(forecast::per_window_mse(&preds, &ws)
            .map_err(err)?
            .errors()
            .to_vec())
    }
}

/// Learned dictionary with ranked shapelets.
#[pyclass(module = "shapesel")]
struct Shapelets {
    inner: ShapeletModel,
}

#[pymethods]
impl Shapelets {
    #[new]
    #[pyo3(signature = (samples, n_atoms, atom_len, lam = 0.1, seed = 0, top_k = 5, dedup = 1.0, max_iters = 100))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        samples: Vec<Vec<f64>>,
        n_atoms: usize,
        atom_len: usize,
        lam: f64,
        seed: u64,
        top_k: usize,
        dedup: f64,
        max_iters: usize,
    ) -> PyResult<Self> {
        let config = SidlConfig {
            n_atoms,
            atom_len,
            lambda: lam,
            seed,
            max_iters,
            ..SidlConfig::default()
        };
        let (dict, codes) = sidl::learn_dictionary(&samples, &config).map_err(err)?;
        Ok(Self {
            inner: ShapeletModel::new(dict, &codes, top_k, dedup),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ShapeletModel::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn atoms(&self) -> Vec<Vec<f64>> {
        self.inner.dictionary.atoms().to_vec()
    }

    #[getter]
    fn shapelets(&self) -> Vec<Vec<f64>> {
        self.inner.shapelets.atoms().map(<[f64]>::to_vec).collect()
    }

    #[getter]
    fn scores(&self) -> Vec<f64> {
        self.inner.scores.clone()
    }

    #[getter]
    fn objective_trace(&self) -> Vec<f64> {
        self.inner.dictionary.objective_trace.clone()
    }
}

/// Returns `(values, motif_positions)` of a planted-motif series.
#[pyfunction]
#[pyo3(signature = (length, motif_len = 32, amplitude = 1.0, motif_rate = 0.7, noise_std = 0.2, burst_std = 1.0, burst_len = 64, phi = 0.9, innovation_std = 0.05, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate_planted(
    length: usize,
    motif_len: usize,
    amplitude: f64,
    motif_rate: f64,
    noise_std: f64,
    burst_std: f64,
    burst_len: usize,
    phi: f64,
    innovation_std: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let spec = SynthSpec {
        length,
        base: BaseSignal::Ar1 {
            phi,
            innovation_std,
        },
        motif: SynthSpec::default_motif(motif_len, amplitude),
        motif_rate,
        burst_std,
        noise_std,
        burst_len,
        seed,
    };
    let s = synth::generate_planted(&spec).map_err(err)?;
    Ok((s.series.values().to_vec(), s.positions))
}

/// Runs the full pipeline from a TOML config file and returns the report as JSON.
/// Relative paths in the config resolve against its directory. Files are written
/// only when the config sets `output_dir`.
#[pyfunction]
fn run_pipeline(config_path: PathBuf) -> PyResult<String> {
    let config = RunConfig::load(&config_path).map_err(err)?;
    run_config(config)
}

/// Same as `run_pipeline` with the config given as TOML text.
#[pyfunction]
#[pyo3(signature = (text, base_dir = None))]
fn run_pipeline_toml(text: &str, base_dir: Option<PathBuf>) -> PyResult<String> {
    let config = RunConfig::from_toml_str(text, base_dir.as_deref()).map_err(err)?;
    run_config(config)
}

fn run_config(config: RunConfig) -> PyResult<String> {
    let report = pipeline::run_pipeline(&config).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

#[pymodule]
#[pyo3(name = "shapesel")]
fn shapesel_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(znorm, m)?)?;
    m.add_function(wrap_pyfunction!(znorm_ed, m)?)?;
    m.add_function(wrap_pyfunction!(sliding_min_distance, m)?)?;
    m.add_function(wrap_pyfunction!(min_distances, m)?)?;
    m.add_function(wrap_pyfunction!(mean_std, m)?)?;
    m.add_function(wrap_pyfunction!(compute_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(filter_high_error, m)?)?;
    m.add_function(wrap_pyfunction!(discard, m)?)?;
    m.add_function(wrap_pyfunction!(random_selection, m)?)?;
    m.add_function(wrap_pyfunction!(selective_mse, m)?)?;
    m.add_function(wrap_pyfunction!(windows, m)?)?;
    m.add_function(wrap_pyfunction!(generate_planted, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline_toml, m)?)?;
    m.add_class::<Baseline>()?;
    m.add_class::<Shapelets>()?;
    Ok(())
}
