//! Python bindings for the `texfv` texture pipeline.

use std::collections::HashMap;

use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use texfv::classifier::{self, PhiVector, SvmConfig};
use texfv::fisher::{self, Variant};
use texfv::gmm::{fit_em, EmConfig};
use texfv::io::{tfv, Bundle};
use texfv::pipeline::synthetic::{write_corpus, SyntheticSpec};
use texfv::{AutoencoderConfig, AutoencoderModel, Error, GaussianMixture, LocalDescriptorSet, PipelineConfig, Tensor};

pyo3::create_exception!(texfv_py, TexfvError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e => TexfvError::new_err(e.to_string()),
    }
}

fn descriptors(rows: Vec<Vec<f32>>) -> PyResult<LocalDescriptorSet> {
    LocalDescriptorSet::from_rows(&rows).map_err(err)
}

/// Dense float32 array with an explicit shape.
#[pyclass(name = "Tensor", module = "texfv_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Tensor::new(shape, data).map(PyTensor).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "Autoencoder", module = "texfv_py")]
struct PyAutoencoder(AutoencoderModel);

#[pymethods]
impl PyAutoencoder {
    #[new]
    #[pyo3(signature = (in_channels=3, levels=3, base_channels=16, denoising=false, noise_sigma=0.1, learning_rate=0.01, epochs=10, batch_size=8, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        in_channels: usize,
        levels: usize,
        base_channels: usize,
        denoising: bool,
        noise_sigma: f32,
        learning_rate: f32,
        epochs: usize,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = AutoencoderConfig {
            in_channels,
            levels,
            base_channels,
            denoising,
            noise_sigma,
            learning_rate,
            epochs,
            batch_size,
            seed,
            ..Default::default()
        };
        AutoencoderModel::new(cfg).map(PyAutoencoder).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    fn reconstruct(&self, image: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor(self.0.forward(&image.0).map_err(err)?.reconstruction))
    }

    fn ssl_vector(&self, image: &PyTensor) -> PyResult<Vec<f32>> {
        self.0.ssl_vector(&image.0).map_err(err)
    }

    /// Trains in place and returns the per-epoch mean loss.
    fn train(&mut self, py: Python<'_>, images: Vec<PyRef<'_, PyTensor>>) -> PyResult<Vec<f64>> {
        let images: Vec<Tensor> = images.iter().map(|t| t.0.clone()).collect();
        let model = &mut self.0;
        py.detach(|| model.train(&images)).map(|r| r.loss_history).map_err(err)
    }
}

#[pyclass(name = "GaussianMixture", module = "texfv_py", frozen)]
struct PyGaussianMixture(GaussianMixture);

#[pymethods]
impl PyGaussianMixture {
    #[new]
    fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> PyResult<Self> {
        GaussianMixture::new(weights, means, variances).map(PyGaussianMixture).map_err(err)
    }

    /// Fits a diagonal mixture with EM.
    #[staticmethod]
    #[pyo3(signature = (rows, components, seed=0, max_iters=100, tol=1e-6))]
    fn fit(py: Python<'_>, rows: Vec<Vec<f32>>, components: usize, seed: u64, max_iters: usize, tol: f64) -> PyResult<Self> {
        let x = descriptors(rows)?;
        let cfg = EmConfig { components, seed, max_iters, tol, ..Default::default() };
        py.detach(|| fit_em(&x, &cfg)).map(|f| PyGaussianMixture(f.mixture)).map_err(err)
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights().to_vec()
    }

    #[getter]
    fn means(&self) -> Vec<f64> {
        self.0.means().to_vec()
    }

    #[getter]
    fn variances(&self) -> Vec<f64> {
        self.0.variances().to_vec()
    }

    fn log_likelihood(&self, rows: Vec<Vec<f32>>) -> PyResult<f64> {
        self.0.log_likelihood(&descriptors(rows)?).map_err(err)
    }

    /// Raw Fisher Vector of a descriptor set, ordered weights, means, deviations.
    fn fisher_vector(&self, rows: Vec<Vec<f32>>) -> PyResult<Vec<f64>> {
        fisher::encode(&self.0, &descriptors(rows)?).map(|f| f.values).map_err(err)
    }
}

#[pyclass(name = "LinearSvm", module = "texfv_py", frozen)]
struct PyLinearSvm(classifier::LinearSvmModel);

#[pymethods]
impl PyLinearSvm {
    /// One-vs-rest training on already mapped feature vectors.
    #[staticmethod]
    #[pyo3(signature = (features, labels, c=1.0, tol=1e-4, max_epochs=1000, seed=0))]
    fn train(
        py: Python<'_>,
        features: Vec<Vec<f64>>,
        labels: Vec<u32>,
        c: f64,
        tol: f64,
        max_epochs: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let phis: Vec<PhiVector> = features.into_iter().map(PhiVector::from_mapped).collect();
        let cfg = SvmConfig { c, tol, max_epochs, seed };
        py.detach(|| classifier::train_ovr(&phis, &labels, &cfg)).map(PyLinearSvm).map_err(err)
    }

    #[getter]
    fn classes(&self) -> Vec<u32> {
        self.0.classes.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    /// Returns `(label, scores)`.
    fn predict(&self, x: Vec<f64>) -> PyResult<(u32, Vec<f64>)> {
        self.0.predict(&PhiVector::from_mapped(x)).map_err(err)
    }
}

#[pyclass(name = "Bundle", module = "texfv_py")]
struct PyBundle(Bundle);

#[pymethods]
impl PyBundle {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Bundle::load(path).map(PyBundle).map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Bundle::from_bytes(data).map(PyBundle).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.0.to_bytes().map_err(err)?))
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.0.class_names.clone()
    }

    #[getter]
    fn variant(&self) -> Option<&'static str> {
        self.0.variant.map(Variant::label)
    }

    /// Names of the stages present in the bundle.
    #[getter]
    fn stages(&self) -> Vec<&'static str> {
        let b = &self.0;
        [
            ("autoencoder", b.autoencoder.is_some()),
            ("features", b.reducer.is_some()),
            ("gmm", b.gmm.is_some()),
            ("svm", b.svm.is_some()),
        ]
        .into_iter()
        .filter_map(|(n, present)| present.then_some(n))
        .collect()
    }

    fn gmm(&self) -> Option<PyGaussianMixture> {
        self.0.gmm.clone().map(PyGaussianMixture)
    }

    fn svm(&self) -> Option<PyLinearSvm> {
        self.0.svm.clone().map(PyLinearSvm)
    }
}

#[pyfunction]
fn power_normalize(v: Vec<f64>) -> Vec<f64> {
    fisher::power_normalize(&v)
}

#[pyfunction]
fn l2_normalize(v: Vec<f64>) -> Vec<f64> {
    fisher::l2_normalize(&v)
}

/// Explicit feature map whose inner product is the Bhattacharyya kernel.
#[pyfunction]
fn phi(x: Vec<f64>) -> Vec<f64> {
    classifier::phi_transform(&x).values
}

#[pyfunction]
fn bhattacharyya(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    classifier::bhattacharyya(&x, &y).map_err(err)
}

#[pyfunction]
fn read_tfv(path: &str) -> PyResult<Vec<(u32, PyTensor)>> {
    let records = tfv::read_file(path).map_err(err)?;
    Ok(records.into_iter().map(|r| (r.tap, PyTensor(r.array))).collect())
}

#[pyfunction]
fn write_tfv(path: &str, records: Vec<(u32, PyRef<'_, PyTensor>)>) -> PyResult<()> {
    let records: Vec<tfv::Record> = records.iter().map(|(tap, t)| tfv::Record::new(*tap, t.0.clone())).collect();
    tfv::write_file(path, &records).map_err(err)
}

/// Writes the seeded synthetic texture corpus as PNG files; returns the image count.
#[pyfunction]
#[pyo3(signature = (out, per_class=40, size=64, seed=0))]
fn write_synthetic(out: &str, per_class: usize, size: usize, seed: u64) -> PyResult<usize> {
    let spec = SyntheticSpec { per_class, size, seed, ..Default::default() };
    write_corpus(&spec, out).map(|ds| ds.len()).map_err(err)
}

/// Runs every evaluation round and returns a summary dictionary.
#[pyfunction]
#[pyo3(signature = (config, overrides=None))]
fn run_pipeline(py: Python<'_>, config: &str, overrides: Option<HashMap<String, String>>) -> PyResult<HashMap<String, Py<PyAny>>> {
    let mut cfg = PipelineConfig::from_file(config).map_err(err)?;
    let mut overrides: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
    overrides.sort();
    for (k, v) in &overrides {
        cfg.set(k, v).map_err(err)?;
    }
    cfg.validate().map_err(err)?;
    let report = py.detach(|| texfv::run_pipeline(&cfg)).map_err(err)?;
    let mut out: HashMap<String, Py<PyAny>> = HashMap::new();
    out.insert("variant".into(), report.variant.label().into_pyobject(py)?.into_any().unbind());
    out.insert("descriptor_len".into(), report.descriptor_len.into_pyobject(py)?.into_any().unbind());
    for (name, m) in [
        ("accuracy", report.accuracy),
        ("precision", report.precision),
        ("recall", report.recall),
        ("f1", report.f1),
    ] {
        out.insert(name.into(), (m.mean, m.std).into_pyobject(py)?.into_any().unbind());
    }
    let rounds: Vec<f64> = report.rounds.iter().map(|r| r.accuracy).collect();
    out.insert("round_accuracy".into(), rounds.into_pyobject(py)?.into_any().unbind());
    out.insert("tsv".into(), report.to_tsv().into_pyobject(py)?.into_any().unbind());
    Ok(out)
}

#[pymodule]
fn texfv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TexfvError", m.py().get_type::<TexfvError>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyAutoencoder>()?;
    m.add_class::<PyGaussianMixture>()?;
    m.add_class::<PyLinearSvm>()?;
    m.add_class::<PyBundle>()?;
    m.add_function(wrap_pyfunction!(power_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(phi, m)?)?;
    m.add_function(wrap_pyfunction!(bhattacharyya, m)?)?;
    m.add_function(wrap_pyfunction!(read_tfv, m)?)?;
    m.add_function(wrap_pyfunction!(write_tfv, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
