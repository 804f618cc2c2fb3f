//! Python bindings: datasets, the trainer, the clustering head and the metrics.
//!
//! Images cross the boundary as lists of flat rows (`C·H·W` values each).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tdec::cluster_head::{self, HeadMode};
use tdec::data::{self, BlobSpec, Dataset};
use tdec::diffcore::Tensor;
use tdec::losses::LossBundle;
use tdec::model::ModelConfig;
use tdec::trainer::{IterationRecord, RunConfig, Trainer};

fn py_err(e: tdec::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Vec::new();
    }
    t.data().chunks(t.len() / n).map(<[f64]>::to_vec).collect()
}

fn matrix(values: Vec<Vec<f64>>, what: &str) -> PyResult<Tensor> {
    if values.is_empty() {
        return Err(PyValueError::new_err(format!("{} must have at least one row", what)));
    }
    Tensor::from_rows(&values).map_err(py_err)
}

/// A labelled or unlabelled image collection.
#[pyclass(name = "Dataset", module = "tdec_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    pub inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (images, channels, height, width, labels=None))]
    pub fn new(
        images: Vec<Vec<f64>>,
        channels: usize,
        height: usize,
        width: usize,
        labels: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let n = images.len();
        let flat = matrix(images, "images")?.into_data();
        let t = Tensor::new(vec![n, channels, height, width], flat).map_err(py_err)?;
        Ok(PyDataset {
            inner: Dataset::new(t, labels, "python").map_err(py_err)?,
        })
    }

    /// Gaussian blobs on a ring, lifted into `dim`-pixel images.
    #[staticmethod]
    #[pyo3(signature = (clusters=3, per_cluster=200, sigma=0.1, separation=2.0, dim=256, seed=0))]
    pub fn blobs(
        clusters: usize,
        per_cluster: usize,
        sigma: f64,
        separation: f64,
        dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = BlobSpec::ring(clusters, per_cluster, sigma, separation, dim, seed);
        Ok(PyDataset {
            inner: data::make_blobs(&spec).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (images, labels=None))]
    pub fn from_idx(images: String, labels: Option<String>) -> PyResult<Self> {
        let labels = labels.map(std::path::PathBuf::from);
        Ok(PyDataset {
            inner: data::load_idx(images, labels.as_deref()).map_err(py_err)?,
        })
    }

    #[staticmethod]
    pub fn from_csv(path: String, channels: usize, height: usize, width: usize) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_csv(path, channels, height, width).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, shape={}x{}x{}, labelled={})",
            self.inner.len(),
            self.inner.channels(),
            self.inner.height(),
            self.inner.width(),
            self.inner.labels.is_some()
        )
    }

    /// `(n, channels, height, width)`.
    #[getter]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.inner.len(), self.inner.channels(), self.inner.height(), self.inner.width())
    }

    #[getter]
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels.clone()
    }

    pub fn images(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.images)
    }

    pub fn resized(&self, height: usize, width: usize) -> PyResult<Self> {
        Ok(PyDataset {
            inner: self.inner.resized(height, width).map_err(py_err)?,
        })
    }

    pub fn select_classes(&self, classes: Vec<usize>) -> PyResult<Self> {
        Ok(PyDataset {
            inner: self.inner.select_classes(&classes).map_err(py_err)?,
        })
    }

    pub fn limit_per_class(&self, per_class: usize) -> PyResult<Self> {
        Ok(PyDataset {
            inner: self.inner.limit_per_class(per_class).map_err(py_err)?,
        })
    }
}

fn losses_dict<'py>(py: Python<'py>, l: &LossBundle) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("total", l.l_total)?;
    d.set_item("rec", l.l_rec)?;
    d.set_item("dim", l.l_dim)?;
    d.set_item("clu", l.l_clu)?;
    Ok(d)
}

/// Outcome of a joint-training run.
#[pyclass(name = "Report", module = "tdec_py")]
pub struct PyReport {
    records: Vec<IterationRecord>,
    #[pyo3(get)]
    labels: Vec<usize>,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    z_v: Vec<Vec<f64>>,
}

#[pymethods]
impl PyReport {
    /// One dict per outer iteration.
    #[getter]
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.records
            .iter()
            .map(|r| {
                let d = losses_dict(py, &r.losses)?;
                d.set_item("iter", r.iter)?;
                d.set_item("label_change", r.label_change)?;
                d.set_item("acc", r.acc)?;
                d.set_item("nmi", r.nmi)?;
                d.set_item("empty_clusters", r.empty_clusters)?;
                Ok(d)
            })
            .collect()
    }

    /// The same text the command line writes to `metrics.csv`.
    fn metrics_csv(&self) -> String {
        tdec::cli::metrics_csv(&self.records)
    }

    fn __repr__(&self) -> String {
        format!("Report(iterations={}, converged={})", self.records.len(), self.converged)
    }
}

/// Pretraining, joint training and assignment for one model.
///
/// The network is built on first use, from the image shape of the first dataset seen.
#[pyclass(name = "Trainer", module = "tdec_py")]
pub struct PyTrainer {
    config: RunConfig,
    embed_dim: Option<usize>,
    inner: Option<Trainer>,
}

impl PyTrainer {
    fn ready(&mut self, data: &Dataset) -> PyResult<&mut Trainer> {
        if self.inner.is_none() {
            let mut mc = ModelConfig::new(data.grid().map_err(py_err)?);
            if let Some(m) = self.embed_dim {
                mc.embed_dim = m;
            }
            self.inner = Some(Trainer::new(mc, self.config.clone()).map_err(py_err)?);
        }
        Ok(self.inner.as_mut().expect("trainer was just built"))
    }

    fn built(&self) -> PyResult<&Trainer> {
        self.inner
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("the model is built by pretrain() or train(); call one first"))
    }
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (
        clusters, *, seed=0, lr=0.01, batch_size=256, pretrain_epochs=200, max_iter=500,
        alpha=0.1, beta=0.001, k=50, epsilon=0.001, augment=true, use_transformer=true,
        use_clustering_head=true, use_dim_reduction=true, embed_dim=None
    ))]
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        clusters: usize,
        seed: u64,
        lr: f64,
        batch_size: usize,
        pretrain_epochs: usize,
        max_iter: usize,
        alpha: f64,
        beta: f64,
        k: usize,
        epsilon: f64,
        augment: bool,
        use_transformer: bool,
        use_clustering_head: bool,
        use_dim_reduction: bool,
        embed_dim: Option<usize>,
    ) -> PyResult<Self> {
        let config = RunConfig {
            clusters,
            seed,
            lr,
            batch_size,
            pretrain_epochs,
            max_iter,
            alpha,
            beta,
            k,
            epsilon,
            augment,
            use_transformer,
            use_clustering_head,
            use_dim_reduction,
            ..Default::default()
        };
        config.validate().map_err(py_err)?;
        Ok(PyTrainer {
            config,
            embed_dim,
            inner: None,
        })
    }

    /// Reconstruction and dimension-reduction training; returns per-epoch mean losses.
    fn pretrain<'py>(&mut self, py: Python<'py>, data: &PyDataset) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let trainer = self.ready(&data.inner)?;
        let records = py.detach(|| trainer.pretrain(&data.inner)).map_err(py_err)?;
        records
            .iter()
            .map(|r| {
                let d = losses_dict(py, &r.losses)?;
                d.set_item("epoch", r.epoch)?;
                Ok(d)
            })
            .collect()
    }

    /// Joint training until the labels settle or `max_iter` is reached.
    fn train(&mut self, py: Python<'_>, data: &PyDataset) -> PyResult<PyReport> {
        let trainer = self.ready(&data.inner)?;
        let report = py.detach(|| trainer.train(&data.inner)).map_err(py_err)?;
        Ok(PyReport {
            z_v: rows(&report.embeddings.z_v),
            records: report.records,
            labels: report.labels,
            converged: report.converged,
        })
    }

    /// `(z_w, z_v)` rows for every image.
    fn embed(&self, data: &PyDataset) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let emb = self.built()?.model.embed(&data.inner.images).map_err(py_err)?;
        Ok((rows(&emb.z_w), rows(&emb.z_v)))
    }

    /// Hard labels from one pass of the clustering head on the current embedding.
    fn assign(&self, data: &PyDataset) -> PyResult<Vec<usize>> {
        let (_, state) = self.built()?.assign(&data.inner).map_err(py_err)?;
        Ok(state.labels)
    }

    #[getter]
    fn parameter_count(&self) -> PyResult<usize> {
        Ok(self.built()?.model.params.parameter_count())
    }
}

/// Accuracy under the best one-to-one matching of predicted to true labels.
#[pyfunction]
pub fn accuracy(predicted: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    tdec::metrics::accuracy(&predicted, &truth).map_err(py_err)
}

/// Normalized mutual information (arithmetic-mean normalization).
#[pyfunction]
pub fn nmi(predicted: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    tdec::metrics::nmi(&predicted, &truth).map_err(py_err)
}

/// Minimum-cost assignment on a square cost matrix; `result[row] = column`.
#[pyfunction]
pub fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    tdec::metrics::hungarian(&matrix(cost, "cost")?).map_err(py_err)
}

/// Density-peak centers and neighbor-weighted memberships for plain points.
///
/// Returns a dict with `labels`, `q`, `centers` and `center_indices`.
#[pyfunction]
#[pyo3(signature = (points, clusters, k=50, neighbor_fraction=0.02))]
pub fn cluster_points<'py>(
    py: Python<'py>,
    points: Vec<Vec<f64>>,
    clusters: usize,
    k: usize,
    neighbor_fraction: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let z = matrix(points, "points")?;
    let state = cluster_head::assign(&z, clusters, HeadMode::DensityPeaks { k, neighbor_fraction }).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("labels", state.labels)?;
    d.set_item("q", rows(&state.q))?;
    d.set_item("centers", rows(&state.centers.coords))?;
    d.set_item("center_indices", state.centers.indices)?;
    Ok(d)
}

#[pymodule]
fn tdec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_points, m)?)?;
    Ok(())
}
