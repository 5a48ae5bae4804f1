//! Python module `fnfdenoise`.
//!
//! Images cross the boundary as planar `float32` bytes (`3 x H x W`), so
//! `numpy.frombuffer(img.to_bytes(), numpy.float32).reshape(3, h, w)` works
//! without a numpy dependency here.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use fnf_core::image::{load_image, save_image, BitDepth};
use fnf_core::kernel::footprint as kernel_footprint;
use fnf_core::network::{infer, ModelWeights, NetworkConfig};
use fnf_core::render::{render_srgb as render, RenderParams};
use fnf_core::simulation::{SamplePair, SimConfig};
use fnf_core::training::{load_weights, Checkpoint, TrainConfig, TrainData, Trainer};
use fnf_core::{Error, LinearImage};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_)
        | Error::InvalidDimensions(_)
        | Error::DimensionMismatch(_)
        | Error::VariantMismatch { .. }
        | Error::NegativeInput { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

/// Linear RGB image.
#[pyclass(name = "Image", module = "fnfdenoise")]
pub struct PyImage {
    inner: LinearImage,
}

#[pymethods]
impl PyImage {
    /// From a flat planar list of `3 * height * width` values.
    #[new]
    fn new(height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        let inner = LinearImage::from_planar(height, width, data).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_bytes(height: usize, width: usize, data: &[u8]) -> PyResult<Self> {
        if data.len() % 4 != 0 {
            return Err(PyValueError::new_err("byte length is not a multiple of 4"));
        }
        let values = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new(height, width, values)
    }

    #[staticmethod]
    fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self {
            inner: LinearImage::filled(height, width, rgb),
        }
    }

    /// Reads a PNG and its JSON sidecar; returns the image and its gain.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, f64)> {
        let (inner, meta) = load_image(path).map_err(py_err)?;
        Ok((Self { inner }, meta.gain))
    }

    #[pyo3(signature = (path, bit_depth = 16))]
    fn save(&self, path: PathBuf, bit_depth: u32) -> PyResult<()> {
        let depth = match bit_depth {
            8 => BitDepth::Eight,
            16 => BitDepth::Sixteen,
            _ => return Err(PyValueError::new_err("bit_depth must be 8 or 16")),
        };
        save_image(path, &self.inner, depth, None).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        let raw: Vec<u8> = self.inner.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        PyBytes::new(py, &raw)
    }

    fn get(&self, channel: usize, row: usize, col: usize) -> PyResult<f32> {
        let (h, w) = self.inner.dims();
        if channel >= 3 || row >= h || col >= w {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(channel, row, col))
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// A flash/no-flash training or evaluation pair with its ground truth.
#[pyclass(name = "Sample", module = "fnfdenoise")]
pub struct PySample {
    inner: SamplePair,
}

fn wrap(img: &LinearImage) -> PyImage {
    PyImage { inner: img.clone() }
}

#[pymethods]
impl PySample {
    /// Procedural sample `index` of the stream `seed`; `config` is a JSON
    /// simulation config.
    #[staticmethod]
    #[pyo3(signature = (seed, index = 0, config = None))]
    fn simulate(seed: u64, index: u64, config: Option<&str>) -> PyResult<Self> {
        let sim: SimConfig = from_json(config)?;
        sim.validate().map_err(py_err)?;
        Ok(Self {
            inner: sim.generate(seed, index).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SamplePair::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    /// Raises `ValueError` on the first violated invariant.
    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn x_f(&self) -> PyImage {
        wrap(&self.inner.x_f)
    }

    #[getter]
    fn x_nf(&self) -> PyImage {
        wrap(&self.inner.x_nf)
    }

    #[getter]
    fn y(&self) -> PyImage {
        wrap(&self.inner.y)
    }

    #[getter]
    fn noise_map_f(&self) -> PyImage {
        wrap(&self.inner.noise_map_f)
    }

    #[getter]
    fn noise_map_nf(&self) -> PyImage {
        wrap(&self.inner.noise_map_nf)
    }

    #[getter]
    fn dim_factor(&self) -> f64 {
        self.inner.dim_factor
    }

    #[getter]
    fn sigma_r(&self) -> f64 {
        self.inner.noise.sigma_r
    }

    #[getter]
    fn sigma_s(&self) -> f64 {
        self.inner.noise.sigma_s
    }

    #[getter]
    fn reference(&self) -> &'static str {
        self.inner.reference.as_str()
    }

    /// Row-major 3x3 homography between the frames.
    #[getter]
    fn homography(&self) -> [f64; 9] {
        self.inner.homography.row_major()
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.dims();
        format!("Sample({h}x{w}, dim_factor={:.2}, reference={})", self.inner.dim_factor, self.reference())
    }
}

/// Network weights of one variant.
#[pyclass(name = "Model", module = "fnfdenoise")]
pub struct PyModel {
    inner: ModelWeights,
}

#[pymethods]
impl PyModel {
    /// Fresh weights; `config` is a JSON network config merged over the
    /// desk-scale defaults.
    #[staticmethod]
    #[pyo3(signature = (config = None, seed = 0))]
    fn init(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let mut v = serde_json::to_value(NetworkConfig::desk()).expect("serializable");
        if let Some(s) = config {
            let patch: serde_json::Value = serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?;
            let (Some(base), Some(patch)) = (v.as_object_mut(), patch.as_object()) else {
                return Err(PyValueError::new_err("config must be a JSON object"));
            };
            for (k, x) in patch {
                base.insert(k.clone(), x.clone());
            }
        }
        let cfg: NetworkConfig = serde_json::from_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: ModelWeights::init(&cfg, seed).map_err(py_err)?,
        })
    }

    /// Loads a checkpoint directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_weights(path).map_err(py_err)?,
        })
    }

    /// Writes a checkpoint directory loadable by `fnf` and `Model.load`.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::initial(self.inner.clone(), TrainConfig::default())
            .save(path)
            .map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config.variant.as_str()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Network config as JSON.
    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("serializable")
    }

    fn denoise(&self, sample: PyRef<'_, PySample>) -> PyResult<PyImage> {
        let out = infer(&self.inner, &sample.inner).map_err(py_err)?;
        Ok(PyImage { inner: out.output })
    }

    /// Filtered image `F` and scale map `G`, where the variant has them.
    fn intermediates(&self, sample: PyRef<'_, PySample>) -> PyResult<(Option<PyImage>, Option<PyImage>)> {
        let out = infer(&self.inner, &sample.inner).map_err(py_err)?;
        Ok((out.filtered.map(|i| PyImage { inner: i }), out.scale_map.map(|i| PyImage { inner: i })))
    }

    /// Trains in place on procedural data and returns the per-step losses.
    /// `train` and `sim` are JSON configs; `steps` overrides `max_steps`.
    #[pyo3(signature = (steps, train = None, sim = None))]
    fn train(&mut self, steps: usize, train: Option<&str>, sim: Option<&str>) -> PyResult<Vec<f64>> {
        let mut tc: TrainConfig = from_json(train)?;
        tc.max_steps = steps;
        let mut sim: SimConfig = from_json(sim)?;
        sim.reference = self.inner.config.reference;
        sim.validate().map_err(py_err)?;
        let data = TrainData::Procedural { sim, seed: tc.seed };
        let mut trainer = Trainer::new(self.inner.clone(), tc).map_err(py_err)?;
        let history = trainer.run(&data, &[]).map_err(py_err)?;
        self.inner = trainer.weights().clone();
        Ok(history.iter().map(|r| r.train_loss).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {} parameters)", self.variant(), self.inner.num_parameters())
    }
}

/// PSNR in dB on values with peak 1.
#[pyfunction]
fn psnr(a: PyRef<'_, PyImage>, b: PyRef<'_, PyImage>) -> PyResult<f64> {
    fnf_core::metrics::psnr(&a.inner, &b.inner).map_err(py_err)
}

#[pyfunction]
fn ssim(a: PyRef<'_, PyImage>, b: PyRef<'_, PyImage>) -> PyResult<f64> {
    fnf_core::metrics::ssim(&a.inner, &b.inner).map_err(py_err)
}

/// Gain, identity color matrix and sRGB curve.
#[pyfunction]
#[pyo3(signature = (image, gain = 1.0))]
fn render_srgb(image: PyRef<'_, PyImage>, gain: f64) -> PyImage {
    PyImage {
        inner: render(&image.inner, &RenderParams::with_gain(gain)),
    }
}

/// Side of the effective kernel for `k x k` basis kernels at upsampling `d`.
#[pyfunction]
fn footprint(k: usize, d: usize) -> usize {
    kernel_footprint(k, d)
}

#[pymodule]
fn fnfdenoise(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyImage>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(render_srgb, m)?)?;
    m.add_function(wrap_pyfunction!(footprint, m)?)?;
    Ok(())
}
