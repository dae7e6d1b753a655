//! Python module `psrsynth`: phantoms, VOL1 I/O, normalization, metrics and synthesis.
//!
//! Volumes cross the boundary as `(dims, data)` with `dims = (nx, ny, nz)` and
//! `data` a flat list in X-fastest order.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use psrsynth::checkpoint::Checkpoint;
use psrsynth::metrics::{self, NawmRegion};
use psrsynth::phantom::{generate_phantom as gen, Labels};
use psrsynth::pipeline::{synthesize_volume, ConditionalModel, RunConfig};
use psrsynth::volumes::{self, Volume};

type Dims = (usize, usize, usize);

fn py_err(e: psrsynth::Error) -> PyErr {
    match e {
        psrsynth::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn volume(dims: Dims, data: Vec<f32>) -> PyResult<Volume> {
    Volume::from_data([dims.0, dims.1, dims.2], data).map_err(py_err)
}

fn parts(v: &Volume) -> (Dims, Vec<f32>) {
    let [x, y, z] = v.dims();
    ((x, y, z), v.data().to_vec())
}

fn config(toml: Option<&str>) -> PyResult<RunConfig> {
    match toml {
        Some(t) => RunConfig::from_toml(t).map_err(py_err),
        None => Ok(RunConfig::default()),
    }
}

/// Phantom volumes as a dict with keys `dims`, `t1`, `flair`, `psr`, `labels`.
#[pyfunction]
#[pyo3(signature = (seed, dims = (32, 32, 32), n_lesions = 3))]
fn generate_phantom<'py>(py: Python<'py>, seed: u64, dims: Dims, n_lesions: usize) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let p = gen(seed, [dims.0, dims.1, dims.2], n_lesions).map_err(py_err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("dims", dims)?;
    d.set_item("t1", p.t1.data().to_vec())?;
    d.set_item("flair", p.flair.data().to_vec())?;
    d.set_item("psr", p.psr.data().to_vec())?;
    d.set_item("labels", p.labels.data.clone())?;
    Ok(d)
}

#[pyfunction]
fn read_volume(path: &str) -> PyResult<(Dims, Vec<f32>)> {
    Ok(parts(&volumes::read_volume(path).map_err(py_err)?))
}

#[pyfunction]
fn write_volume(path: &str, dims: Dims, data: Vec<f32>) -> PyResult<()> {
    volumes::write_volume(&volume(dims, data)?, path).map_err(py_err)
}

#[pyfunction]
fn percentile(values: Vec<f32>, pct: f64) -> PyResult<f32> {
    volumes::percentile(&values, pct).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (dims, data, lo_pct = 0.0, hi_pct = 99.5))]
fn percentile_normalize(dims: Dims, data: Vec<f32>, lo_pct: f64, hi_pct: f64) -> PyResult<Vec<f32>> {
    let n = volumes::percentile_normalize(&volume(dims, data)?, lo_pct, hi_pct).map_err(py_err)?;
    Ok(n.volume.data().to_vec())
}

#[pyfunction]
#[pyo3(signature = (dims, a, b, mask, data_range = 1.0))]
fn masked_psnr(dims: Dims, a: Vec<f32>, b: Vec<f32>, mask: Vec<bool>, data_range: f64) -> PyResult<f64> {
    metrics::masked_psnr(&volume(dims, a)?, &volume(dims, b)?, &mask, data_range).map_err(py_err)
}

#[pyfunction]
fn masked_ssim(dims: Dims, a: Vec<f32>, b: Vec<f32>, mask: Vec<bool>) -> PyResult<f64> {
    metrics::masked_ssim(&volume(dims, a)?, &volume(dims, b)?, &mask, &Default::default()).map_err(py_err)
}

#[pyfunction]
fn auc(pos: Vec<f64>, neg: Vec<f64>) -> PyResult<f64> {
    metrics::auc_mann_whitney(&pos, &neg).map_err(py_err)
}

/// Lesion-vs-NAWM AUC of a PSR volume; `region` is `proximal`, `distal` or `combined`.
#[pyfunction]
#[pyo3(signature = (dims, psr, labels, region = "combined"))]
fn lesion_auc(dims: Dims, psr: Vec<f32>, labels: Vec<u8>, region: &str) -> PyResult<f64> {
    let region = match region {
        "proximal" => NawmRegion::Proximal,
        "distal" => NawmRegion::Distal,
        "combined" => NawmRegion::Combined,
        other => return Err(PyValueError::new_err(format!("unknown region {other:?}"))),
    };
    let labels = Labels::new([dims.0, dims.1, dims.2], labels).map_err(py_err)?;
    Ok(metrics::lesion_nawm_auc(&volume(dims, psr)?, &labels, region).map_err(py_err)?.auc)
}

/// The reference run configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(py_err)
}

/// Synthesize PSR from T1/FLAIR VOL1 files with a conditional checkpoint.
#[pyfunction]
#[pyo3(signature = (checkpoint, t1, flair, output, seed = None, config = None))]
fn synthesize(checkpoint: &str, t1: &str, flair: &str, output: &str, seed: Option<u64>, config: Option<&str>) -> PyResult<()> {
    let cfg = self::config(config)?;
    let model = ConditionalModel::from_checkpoint(&Checkpoint::load(checkpoint).map_err(py_err)?).map_err(py_err)?;
    let t1 = volumes::read_volume(t1).map_err(py_err)?;
    let flair = volumes::read_volume(flair).map_err(py_err)?;
    let v = synthesize_volume(&model, &t1, &flair, &cfg.normalize, &cfg.sample, seed.unwrap_or(cfg.sample.seed)).map_err(py_err)?;
    volumes::write_volume(&v, output).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "psrsynth")]
fn psrsynth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(percentile_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(masked_psnr, m)?)?;
    m.add_function(wrap_pyfunction!(masked_ssim, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(lesion_auc, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    Ok(())
}
