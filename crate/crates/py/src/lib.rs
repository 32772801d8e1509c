//! Python bindings: networks, KSE scoring, phantoms, thinning and ensemble
//! metrics. Volumes cross the boundary as flat lists plus a shape.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use tgd_core::kse::{drop_kernels, kse_scores, KseConfig};
use tgd_core::metrics::{ensemble_bias as bias, ensemble_cov as cov, Roi, RoiKind};
use tgd_core::model::denoise_volume;
use tgd_core::phantom::{generate_phantom, thin as thin_counts, CountImage, PhantomSpec};
use tgd_core::weights::{load_weights, network_hash, save_weights};
use tgd_core::{build_network, NetworkConfig, Tensor, TgdError};

fn err(e: TgdError) -> PyErr {
    match e {
        TgdError::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor<f32>> {
    Tensor::new(shape, data).map_err(err)
}

#[pyclass(name = "Network", module = "tgd")]
struct PyNetwork(tgd_core::Network);

#[pymethods]
impl PyNetwork {
    /// Fresh network with He-initialized weights.
    #[new]
    #[pyo3(signature = (depth, channels, input_slices = 3, seed = 0))]
    fn new(depth: usize, channels: usize, input_slices: usize, seed: u64) -> PyResult<Self> {
        build_network(&NetworkConfig { depth, channels, input_slices }, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_weights(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_weights(&self.0, path).map_err(err)
    }

    /// SHA-256 of the serialized weights.
    #[getter]
    fn hash(&self) -> String {
        network_hash(&self.0)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.config.depth
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.config.channels
    }

    #[getter]
    fn input_slices(&self) -> usize {
        self.0.config.input_slices
    }

    /// Denoises every slice of a `[slices, height, width]` volume.
    fn denoise(&self, data: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<Vec<f32>> {
        let x = tensor(data, vec![shape.0, shape.1, shape.2])?;
        Ok(denoise_volume(&self.0, &x).map_err(err)?.into_data())
    }

    /// Per-layer KSE scores as a JSON string.
    #[pyo3(signature = (alpha = 1.0, k_neighbors = 5))]
    fn kse_report(&self, alpha: f64, k_neighbors: usize) -> PyResult<String> {
        let report = kse_scores(&self.0, &KseConfig { alpha, k_neighbors }).map_err(err)?;
        serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Copy with every kernel below `phi` zeroed, and the dropped fraction.
    #[pyo3(signature = (phi, alpha = 1.0, k_neighbors = 5))]
    fn drop_kernels(&self, phi: f64, alpha: f64, k_neighbors: usize) -> PyResult<(Self, f64)> {
        let report = kse_scores(&self.0, &KseConfig { alpha, k_neighbors }).map_err(err)?;
        let d = drop_kernels(&self.0, &report, phi).map_err(err)?;
        let f = d.fraction();
        Ok((Self(d.network), f))
    }

    fn __repr__(&self) -> String {
        format!("Network(depth={}, channels={}, input_slices={})", self.depth(), self.channels(), self.input_slices())
    }
}

/// Random phantom activity volume; returns `(data, (slices, height, width))`.
#[pyfunction]
#[pyo3(signature = (height, width, slices, seed = 0))]
fn phantom(height: usize, width: usize, slices: usize, seed: u64) -> PyResult<(Vec<f32>, (usize, usize, usize))> {
    let v = generate_phantom(&PhantomSpec::random(height, width, slices, seed)).map_err(err)?;
    Ok((v.into_data(), (slices, height, width)))
}

/// Binomial split of each count with probability `p`.
#[pyfunction]
fn thin(counts: Vec<u64>, p: f64, seed: u64) -> PyResult<(Vec<u64>, Vec<u64>)> {
    let img = CountImage::new(vec![1, 1, counts.len()], counts).map_err(err)?;
    let (a, b) = thin_counts(&img, p, seed).map_err(err)?;
    Ok((a.counts().to_vec(), b.counts().to_vec()))
}

fn stack(realizations: Vec<Vec<f32>>) -> PyResult<Vec<Tensor<f32>>> {
    realizations.into_iter().map(|r| tensor(r.clone(), vec![r.len()])).collect()
}

/// Percent bias of the ensemble mean inside `roi` relative to `truth`.
#[pyfunction]
fn ensemble_bias(realizations: Vec<Vec<f32>>, roi: Vec<usize>, truth: Vec<f32>) -> PyResult<f64> {
    let roi = Roi::new(RoiKind::Lesion, roi).map_err(err)?;
    let n = truth.len();
    bias(&stack(realizations)?, &roi, &tensor(truth, vec![n])?).map_err(err)
}

/// Percent coefficient of variation across realizations inside `roi`.
#[pyfunction]
fn ensemble_cov(realizations: Vec<Vec<f32>>, roi: Vec<usize>) -> PyResult<f64> {
    let roi = Roi::new(RoiKind::Background, roi).map_err(err)?;
    cov(&stack(realizations)?, &roi).map_err(err)
}

#[pymodule]
fn tgd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(thin, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_bias, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_cov, m)?)?;
    Ok(())
}
