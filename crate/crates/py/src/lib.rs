//! Python module `clare`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use clare_core::dataio::{self, LabeledDataset, ToySpec};
use clare_core::harness::{self, ConfigLayer, ResultsReport, ToyLayer};
use clare_core::model::{self, ClareModel, LatentGaussian, ModelConfig};
use clare_core::numkit::rng::seeded;
use clare_core::numkit::Tensor;
use clare_core::protocol;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

type Rows = Vec<Vec<f64>>;

fn tensor(rows: Rows) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(value_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn parse<T: std::str::FromStr>(v: Option<&str>) -> PyResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    v.map(|s| s.parse::<T>().map_err(value_err)).transpose()
}

/// Conditional VAE with a classifier head.
#[pyclass(name = "Model", module = "clare")]
struct PyModel {
    inner: ClareModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (input_dim, latent_dim, class_no, encoder_hidden = vec![512, 256], decoder_hidden = vec![256, 512], seed = 0))]
    fn new(
        input_dim: usize,
        latent_dim: usize,
        class_no: usize,
        encoder_hidden: Vec<usize>,
        decoder_hidden: Vec<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            input_dim,
            encoder_hidden,
            decoder_hidden,
            latent_dim,
            class_no,
        };
        let inner = ClareModel::new(config, &mut seeded(seed)).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn class_no(&self) -> usize {
        self.inner.class_no()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps()
    }

    /// Class probabilities, one row per input row.
    fn classify(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.classify(&tensor(x)?).map_err(value_err)?))
    }

    /// Most probable class index per row.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let p = self.inner.classify(&tensor(x)?).map_err(value_err)?;
        Ok(harness::argmax_rows(&p))
    }

    /// `(mu, log_var)` of the encoder conditioned on `labels`.
    fn encode(&self, x: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(Rows, Rows)> {
        let g = self.inner.encode(&tensor(x)?, &labels).map_err(value_err)?;
        Ok((rows(&g.mu), rows(&g.log_var)))
    }

    fn decode(&self, z: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.decode(&tensor(z)?, &labels).map_err(value_err)?))
    }

    /// Loss terms for one batch as a dict.
    #[pyo3(signature = (x, labels, noise, beta = 1.0))]
    fn total_loss<'py>(
        &self,
        py: Python<'py>,
        x: Vec<Vec<f64>>,
        labels: Vec<usize>,
        noise: Vec<Vec<f64>>,
        beta: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let l = self
            .inner
            .total_loss(&tensor(x)?, &labels, &tensor(noise)?, beta)
            .map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("total", l.total)?;
        d.set_item("classification", l.classification)?;
        d.set_item("reconstruction", l.reconstruction)?;
        d.set_item("kl", l.kl)?;
        Ok(d)
    }

    /// Copy widened to `class_no` classes; old outputs are unchanged.
    #[pyo3(signature = (class_no, seed = 0))]
    fn expand_classes(&self, class_no: usize, seed: u64) -> PyResult<Self> {
        let inner = self.inner.expand_classes(class_no, &mut seeded(seed)).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(runtime_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ClareModel::load(path).map_err(runtime_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, latent_dim={}, class_no={})",
            self.inner.input_dim(),
            self.inner.latent_dim(),
            self.inner.class_no()
        )
    }
}

/// Images in `[0, 1]` with integer labels.
#[pyclass(name = "Dataset", module = "clare")]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn images(&self) -> Vec<Vec<f64>> {
        rows(self.inner.images())
    }

    fn class_counts(&self) -> std::collections::BTreeMap<u32, usize> {
        self.inner.class_counts()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(len={}, dim={})", self.inner.len(), self.inner.dim())
    }
}

/// Gaussian-blob train and test splits.
#[pyfunction]
#[pyo3(signature = (n_classes = 2, n_per_class = 500, dim = 16, spread = 0.1, seed = 0, test_per_class = 200))]
fn make_toy(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    test_per_class: usize,
) -> PyResult<(PyDataset, PyDataset)> {
    let spec = ToySpec {
        n_classes,
        n_per_class,
        dim,
        spread,
        seed,
    };
    let s = dataio::make_toy_splits(&spec, test_per_class).map_err(value_err)?;
    Ok((PyDataset { inner: s.train }, PyDataset { inner: s.test }))
}

/// Train and test splits from a directory of MNIST IDX files.
#[pyfunction]
fn load_mnist(dir: PathBuf) -> PyResult<(PyDataset, PyDataset)> {
    let s = dataio::load_mnist(dir).map_err(runtime_err)?;
    Ok((PyDataset { inner: s.train }, PyDataset { inner: s.test }))
}

/// Results of [`run`].
#[pyclass(name = "Report", module = "clare")]
struct PyReport {
    inner: ResultsReport,
}

#[pymethods]
impl PyReport {
    /// Overall accuracy after each increment, one list per seed.
    fn accuracies(&self) -> Vec<Vec<f64>> {
        self.inner
            .runs
            .iter()
            .map(|r| r.records.iter().map(|rec| rec.overall_accuracy).collect())
            .collect()
    }

    /// Accuracy per class after `increment` for the first seed.
    fn per_class(&self, increment: usize) -> PyResult<std::collections::BTreeMap<u32, f64>> {
        let rec = self.inner.runs[0]
            .records
            .get(increment)
            .ok_or_else(|| value_err(format!("no increment {increment}")))?;
        Ok(rec.per_class.iter().map(|c| (c.class, c.accuracy)).collect())
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.runs.iter().map(|r| r.seed).collect()
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .runs
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("seed", r.seed)?;
                d.set_item("tasks", r.summary.tasks)?;
                d.set_item("final_accuracy", r.summary.final_accuracy)?;
                d.set_item("avg_5", r.summary.avg_5)?;
                d.set_item("avg_10", r.summary.avg_10)?;
                Ok(d)
            })
            .collect()
    }

    fn table(&self) -> String {
        self.inner.render_table()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(runtime_err)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ResultsReport::from_toml(text).map_err(value_err)?,
        })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let f = std::fs::File::create(&path).map_err(runtime_err)?;
        self.inner.write_csv(f).map_err(runtime_err)
    }

    /// True when both reports agree on everything but timings.
    fn same_results(&self, other: &PyReport) -> bool {
        self.inner.same_results(&other.inner)
    }
}

/// Runs one experiment. Keyword arguments override the optional TOML
/// `config` file, which overrides the dataset's defaults.
#[pyfunction]
#[pyo3(signature = (*, config = None, mode = None, dataset = None, data_dir = None, g = None, epochs = None,
    batch = None, lr = None, latent_dim = None, beta = None, replay = None, start = None, seed = None,
    seeds = None, toy_classes = None, toy_per_class = None))]
#[allow(clippy::too_many_arguments)]
fn run(
    py: Python<'_>,
    config: Option<PathBuf>,
    mode: Option<&str>,
    dataset: Option<&str>,
    data_dir: Option<PathBuf>,
    g: Option<usize>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    latent_dim: Option<usize>,
    beta: Option<f64>,
    replay: Option<bool>,
    start: Option<&str>,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    toy_classes: Option<usize>,
    toy_per_class: Option<usize>,
) -> PyResult<PyReport> {
    let file = config.as_deref().map(ConfigLayer::read).transpose().map_err(value_err)?;
    let toy = (toy_classes.is_some() || toy_per_class.is_some()).then(|| ToyLayer {
        n_classes: toy_classes,
        n_per_class: toy_per_class,
        ..ToyLayer::default()
    });
    let flags = ConfigLayer {
        mode: parse(mode)?,
        dataset: parse(dataset)?,
        data_dir: data_dir.or_else(|| std::env::var_os("CLARE_DATA_DIR").map(PathBuf::from)),
        g,
        epochs,
        batch,
        lr,
        latent_dim,
        beta,
        replay: replay.map(|r| if r { harness::ReplayMode::On } else { harness::ReplayMode::Off }),
        start: parse(start)?,
        seed,
        seeds,
        toy,
        ..ConfigLayer::default()
    };
    let resolved = harness::resolve(file.as_ref(), &flags).map_err(value_err)?;
    let report = py.detach(|| {
        let data = harness::load_data(&resolved)?;
        harness::run_config(&resolved, &data, &mut |_| {})
    });
    Ok(PyReport {
        inner: report.map_err(runtime_err)?,
    })
}

/// Disjoint ascending groups of `g` class ids.
#[pyfunction]
fn build_schedule(class_ids: Vec<u32>, g: usize) -> PyResult<Vec<Vec<u32>>> {
    Ok(protocol::build_schedule(&class_ids, g).map_err(value_err)?.groups().to_vec())
}

/// Mean of the first `k` accuracies.
#[pyfunction]
fn average_over_tasks(accuracies: Vec<f64>, k: usize) -> PyResult<f64> {
    harness::average_over_tasks(&accuracies, k).map_err(value_err)
}

/// Closed-form KL divergence from `N(mu, exp(log_var))` to `N(0, I)`,
/// averaged over rows.
#[pyfunction]
fn kl_divergence(mu: Vec<Vec<f64>>, log_var: Vec<Vec<f64>>) -> PyResult<f64> {
    let g = LatentGaussian::new(tensor(mu)?, tensor(log_var)?).map_err(value_err)?;
    Ok(model::kl_divergence(&g))
}

#[pymodule]
fn clare(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(make_toy, m)?)?;
    m.add_function(wrap_pyfunction!(load_mnist, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(build_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(average_over_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
