//! Python bindings: spectrograms, checkpoint inference and the analysis
//! metrics, plus the synthetic pipeline.

use std::path::PathBuf;

use midlevel_core::data::MidLevelVector;
use midlevel_core::dsp::{compute_spectrogram, Spectrogram, SpectrogramConfig};
use midlevel_core::metrics::{discrepancy_from_embeddings, pearson_with_p, probe_report};
use midlevel_core::net::{load_checkpoint, receptive_field, ModelCheckpoint, RfResNetConfig};
use midlevel_core::pipeline::{run_synthetic_pipeline, PipelineConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: midlevel_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_rows(spec: &Spectrogram) -> Vec<Vec<f32>> {
    (0..spec.shape().0).map(|b| spec.band(b).to_vec()).collect()
}

fn from_rows(rows: &[Vec<f32>]) -> PyResult<Spectrogram> {
    let frames = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != frames) {
        return Err(PyValueError::new_err("ragged spectrogram"));
    }
    Spectrogram::new(rows.len(), frames, rows.concat()).map_err(err)
}

/// Log-filtered spectrogram of mono PCM as a bands x frames list. Keyword
/// arguments override the default extractor settings.
#[pyfunction]
#[pyo3(signature = (pcm, sample_rate=None, window_size=None, hop=None, bands=None, fmin=None, fmax=None))]
fn spectrogram(
    pcm: Vec<f32>,
    sample_rate: Option<u32>,
    window_size: Option<usize>,
    hop: Option<usize>,
    bands: Option<usize>,
    fmin: Option<f64>,
    fmax: Option<f64>,
) -> PyResult<Vec<Vec<f32>>> {
    let d = SpectrogramConfig::default();
    let config = SpectrogramConfig {
        sample_rate: sample_rate.unwrap_or(d.sample_rate),
        window_size: window_size.unwrap_or(d.window_size),
        hop: hop.unwrap_or(d.hop),
        bands: bands.unwrap_or(d.bands),
        fmin: fmin.unwrap_or(d.fmin),
        fmax: fmax.unwrap_or(d.fmax),
        log_floor: d.log_floor,
    };
    Ok(to_rows(&compute_spectrogram(&pcm, &config).map_err(err)?))
}

/// Receptive field (height, width) of the full-size network.
#[pyfunction]
fn reference_receptive_field() -> (usize, usize) {
    receptive_field(&RfResNetConfig::reference_resnet())
}

/// Kernel discrepancy between two sets of embeddings.
#[pyfunction]
fn discrepancy(source: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(discrepancy_from_embeddings(&source, &target).map_err(err)?.value)
}

/// Pearson correlation and two-sided p-value.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    pearson_with_p(&x, &y).map_err(err)
}

/// R^2 of a linear probe per dimension; `features` has seven columns.
#[pyfunction]
fn probe_r2(features: Vec<Vec<f64>>, dimensions: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(probe_report("python", &features, &dimensions).map_err(err)?.r2)
}

/// Run the synthetic baseline, adversarial and distillation pipeline for
/// one seed and return its report as JSON. `config` is an optional TOML
/// string of overrides.
#[pyfunction]
#[pyo3(signature = (seed, config=None))]
fn synthetic_pipeline(py: Python<'_>, seed: u64, config: Option<&str>) -> PyResult<String> {
    let cfg: PipelineConfig = match config {
        Some(text) => toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    let report = py
        .detach(|| run_synthetic_pipeline(&cfg, seed))
        .map_err(err)?
        .report;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint(ModelCheckpoint);

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(load_checkpoint(&path).map_err(err)?))
    }

    #[getter]
    fn id(&self) -> &str {
        &self.0.id
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize) {
        let [b, f] = self.0.model.config().input_shape;
        (b, f)
    }

    /// Seven mid-level predictions per spectrogram.
    fn predict(&self, spectrograms: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Vec<f64>>> {
        let specs = spectrograms.iter().map(|s| from_rows(s)).collect::<PyResult<Vec<_>>>()?;
        let preds = self.0.model.predict(&specs.iter().collect::<Vec<_>>()).map_err(err)?;
        Ok(preds.iter().map(|p: &MidLevelVector| p.values().to_vec()).collect())
    }

    /// Pooled trunk embeddings.
    fn embed(&self, spectrograms: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Vec<f64>>> {
        let specs = spectrograms.iter().map(|s| from_rows(s)).collect::<PyResult<Vec<_>>>()?;
        self.0.model.embed(&specs.iter().collect::<Vec<_>>()).map_err(err)
    }
}

#[pymodule]
fn midlevel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(reference_receptive_field, m)?)?;
    m.add_function(wrap_pyfunction!(discrepancy, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(probe_r2, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pipeline, m)?)?;
    m.add_class::<PyCheckpoint>()?;
    Ok(())
}
