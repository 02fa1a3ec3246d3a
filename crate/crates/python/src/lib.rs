//! Python bindings. Arrays cross the boundary as nested lists (anything
//! sequence-like, including numpy arrays, is accepted on input).

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use reraw::checkpoint::Checkpoint;
use reraw::converter::{convert_batch, convert_image, InferenceMode};
use reraw::dataset::{build_patch_dataset, sampling_config, PatchDataset, Split};
use reraw::imaging::{self, PackedRawImage, RawMosaic, RgbImage};
use reraw::model::{ReRawConfig, ReRawModel};
use reraw::nn::Params;
use reraw::objective::{self, LossConfig, LossKind};
use reraw::sampling::{build_context, SamplingMethod};
use reraw::trainer::{self, TrainConfig, Trainer};

type Nested3 = Vec<Vec<Vec<f64>>>;

fn to_py(e: reraw::Error) -> PyErr {
    match e {
        reraw::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_invariant_violation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn array3(v: Nested3) -> PyResult<Array3<f64>> {
    let h = v.len();
    let w = v.first().map_or(0, Vec::len);
    let c = v.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(h * w * c);
    for row in v {
        if row.len() != w {
            return Err(PyValueError::new_err("ragged array"));
        }
        for px in row {
            if px.len() != c {
                return Err(PyValueError::new_err("ragged array"));
            }
            flat.extend(px);
        }
    }
    Array3::from_shape_vec((h, w, c), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn nested3(a: &Array3<f64>) -> Nested3 {
    a.outer_iter().map(|row| row.outer_iter().map(|px| px.to_vec()).collect()).collect()
}

fn rgb(v: Nested3) -> PyResult<RgbImage> {
    RgbImage::new(array3(v)?).map_err(to_py)
}

#[pyclass(name = "SensorProfile")]
struct PySensorProfile {
    inner: imaging::SensorProfile,
}

#[pymethods]
impl PySensorProfile {
    #[new]
    fn new(name: &str, black_level: u16, white_level: u16) -> PyResult<Self> {
        Ok(PySensorProfile { inner: imaging::SensorProfile::new(name, black_level, white_level).map_err(to_py)? })
    }

    #[getter]
    fn black_level(&self) -> u16 {
        self.inner.black_level
    }

    #[getter]
    fn white_level(&self) -> u16 {
        self.inner.white_level
    }

    fn normalize(&self, adu: u16) -> f64 {
        self.inner.normalize(adu)
    }

    fn denormalize(&self, value: f64) -> u16 {
        self.inner.denormalize(value)
    }
}

/// Packs an `H x W` mosaic of ADU counts into normalized `H/2 x W/2 x 4` RGGB planes.
#[pyfunction]
fn pack_rggb(mosaic: Vec<Vec<u16>>, profile: &PySensorProfile) -> PyResult<Nested3> {
    let h = mosaic.len();
    let w = mosaic.first().map_or(0, Vec::len);
    let flat: Vec<u16> = mosaic.into_iter().flatten().collect();
    let data = Array2::from_shape_vec((h, w), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let m = RawMosaic::new(data, profile.inner.clone()).map_err(to_py)?;
    Ok(nested3(imaging::pack_rggb(&m).data()))
}

#[pyfunction]
fn unpack_rggb(packed: Nested3, profile: &PySensorProfile) -> PyResult<Vec<Vec<u16>>> {
    let p = PackedRawImage::new(array3(packed)?, profile.inner.clone()).map_err(to_py)?;
    Ok(imaging::unpack_rggb(&p).data().outer_iter().map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn gamma_correct(img: Nested3, gamma: f64) -> PyResult<Nested3> {
    Ok(nested3(&imaging::gamma_correct(&array3(img)?, gamma).map_err(to_py)?))
}

#[pyfunction]
fn degamma(img: Nested3, gamma: f64) -> PyResult<Nested3> {
    Ok(nested3(&imaging::degamma(&array3(img)?, gamma).map_err(to_py)?))
}

#[pyfunction]
#[pyo3(signature = (pred, target, epsilon = 1e-6))]
fn hard_log_loss(pred: Nested3, target: Nested3, epsilon: f64) -> PyResult<f64> {
    objective::hard_log_loss(&array3(pred)?, &array3(target)?, epsilon).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (kind, pred, target, epsilon = 1e-6))]
fn loss(kind: &str, pred: Nested3, target: Nested3, epsilon: f64) -> PyResult<f64> {
    let kind: LossKind = kind.parse().map_err(to_py)?;
    LossConfig { kind, epsilon }.value(&array3(pred)?, &array3(target)?).map_err(to_py)
}

#[pyfunction]
fn psnr(pred: Nested3, target: Nested3) -> PyResult<f64> {
    reraw::metrics::psnr(&array3(pred)?, &array3(target)?).map_err(to_py)
}

#[pyfunction]
fn ssim(pred: Nested3, target: Nested3) -> PyResult<f64> {
    reraw::metrics::ssim(&array3(pred)?, &array3(target)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (step, steps_per_epoch, lr_start = 1e-3, lr_floor = 1e-5, restart_period_epochs = 16))]
fn lr_schedule(step: usize, steps_per_epoch: usize, lr_start: f64, lr_floor: f64, restart_period_epochs: usize) -> f64 {
    let cfg = TrainConfig { lr_start, lr_floor, restart_period_epochs, ..TrainConfig::default() };
    trainer::lr_schedule(step, steps_per_epoch, &cfg)
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: ReRawModel,
}

#[pymethods]
impl PyModel {
    /// A freshly initialized model; `desk` selects the reduced architecture.
    #[new]
    #[pyo3(signature = (heads = 10, desk = true, context = true, scaling = true, seed = 0))]
    fn new(heads: usize, desk: bool, context: bool, scaling: bool, seed: u64) -> PyResult<Self> {
        let base = if desk { ReRawConfig::desk() } else { ReRawConfig::default() };
        let mut cfg = base.with_heads(heads);
        cfg.use_context_encoder = context;
        cfg.use_scaling_encoder = scaling;
        cfg.init_seed = seed;
        Ok(PyModel { inner: ReRawModel::new(cfg).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: Checkpoint::load(&path).map_err(to_py)?.model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::inference(self.inner.clone(), None).save(&path).map_err(to_py)
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.config().n_heads
    }

    #[getter]
    fn gammas(&self) -> Vec<f64> {
        self.inner.config().gammas.clone()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.network().param_count()
    }

    /// Runs one `(2P+2) x (2P+2) x 3` patch against a `128 x 128 x 3`
    /// context; returns a dict with `final`, `candidates` and `alpha`.
    fn forward<'py>(&self, py: Python<'py>, rgb_patch: Nested3, context: Nested3) -> PyResult<Bound<'py, PyDict>> {
        let patch = array3(rgb_patch)?;
        let ctx = rgb(context)?;
        let out = self.inner.forward(patch.view(), &ctx).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("final", nested3(&out.final_patch))?;
        d.set_item("candidates", out.candidates.0.iter().map(nested3).collect::<Vec<_>>())?;
        d.set_item("alpha", out.alpha.alpha().to_vec())?;
        Ok(d)
    }

    /// Full-image conversion to `H/2 x W/2 x 4` packed RAW.
    #[pyo3(signature = (image, tiled = true))]
    fn convert(&self, image: Nested3, tiled: bool) -> PyResult<Nested3> {
        let mode = if tiled { InferenceMode::Tiled } else { InferenceMode::Whole };
        Ok(nested3(&convert_image(&self.inner, &rgb(image)?, mode).map_err(to_py)?.raw))
    }
}

/// Plain 128x128 context of a full image, or a seeded training crop.
#[pyfunction]
#[pyo3(signature = (image, seed = None))]
fn context(image: Nested3, seed: Option<u64>) -> PyResult<Nested3> {
    Ok(nested3(build_context(&rgb(image)?, seed).data()))
}

/// Writes `count` synthetic pairs and `dataset.toml` under `out`.
#[pyfunction]
#[pyo3(signature = (out, count, width = 256, height = 256, seed = 0, test_fraction = 0.2))]
fn synth_dataset(out: PathBuf, count: usize, width: usize, height: usize, seed: u64, test_fraction: f64) -> PyResult<usize> {
    let cfg = reraw::synth::SynthConfig { width, height, ..Default::default() };
    Ok(reraw::synth::generate_dataset(&out, count, &cfg, seed, test_fraction).map_err(to_py)?.pairs.len())
}

/// Samples training patches; returns the number written.
#[pyfunction]
#[pyo3(signature = (manifest, out, sampling = "stratified", patches_per_image = 6, bins = 10, seed = 0))]
fn prepare(manifest: PathBuf, out: PathBuf, sampling: &str, patches_per_image: usize, bins: usize, seed: u64) -> PyResult<usize> {
    let method: SamplingMethod = sampling.parse().map_err(to_py)?;
    let ds = build_patch_dataset(&manifest, Split::Train, &sampling_config(method, patches_per_image, bins), seed)
        .map_err(to_py)?;
    ds.save(&out).map_err(to_py)?;
    Ok(ds.len())
}

/// Trains a desk-scale model; returns per-epoch `(train_loss, val_loss)`.
#[pyfunction]
#[pyo3(signature = (data, out, epochs = 1, heads = 10, batch_size = 8, loss = "hln", seed = 0))]
fn train(
    data: PathBuf,
    out: PathBuf,
    epochs: usize,
    heads: usize,
    batch_size: usize,
    loss: &str,
    seed: u64,
) -> PyResult<Vec<(f64, Option<f64>)>> {
    let ds = PatchDataset::load(&data).map_err(to_py)?;
    let cfg = TrainConfig {
        epochs,
        restart_period_epochs: epochs,
        batch_size,
        seed,
        loss: LossConfig { kind: loss.parse().map_err(to_py)?, ..LossConfig::default() },
        model: ReRawConfig::desk().with_heads(heads),
        ..TrainConfig::default()
    };
    let sensor = ds.index.sensor.clone();
    let mut t = Trainer::new(cfg, ds.pairs, Some(sensor)).map_err(to_py)?.with_output(&out).map_err(to_py)?;
    let report = t.run().map_err(to_py)?;
    Ok(report.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect())
}

/// Converts PNG files into `out`; returns `(converted, skipped)` counts.
#[pyfunction]
fn convert_files(checkpoint: PathBuf, images: Vec<PathBuf>, out: PathBuf) -> PyResult<(usize, usize)> {
    let r = convert_batch(&checkpoint, &images, &out, None, InferenceMode::Tiled).map_err(to_py)?;
    Ok((r.outputs.len(), r.skipped.len()))
}

/// Mean PSNR (dB) and SSIM over paired RAW directories.
#[pyfunction]
fn evaluate(pred: PathBuf, target: PathBuf) -> PyResult<(f64, f64)> {
    let r = reraw::metrics::evaluate_dataset(&pred, &target).map_err(to_py)?;
    Ok((r.mean_psnr_db, r.mean_ssim))
}

#[pymodule]
fn reraw_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySensorProfile>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(pack_rggb, m)?)?;
    m.add_function(wrap_pyfunction!(unpack_rggb, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_correct, m)?)?;
    m.add_function(wrap_pyfunction!(degamma, m)?)?;
    m.add_function(wrap_pyfunction!(hard_log_loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(context, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(convert_files, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
