//! Python bindings: cameras, images, Gaussian clouds, models, rendering,
//! slicing, the archive codec, dataset synthesis, training and metrics.

use engine::codec;
use engine::color::{param_count_per_gaussian as count_params, ColorLayout};
use engine::dataset::{Dataset, Manifest};
use engine::gauss::{self, Gaussian4D, Quaternion};
use engine::metrics::{self, DssimVariant};
use engine::render::{participation_ratio, rasterize, Predictors, RenderConfig};
use engine::synth::{self as synthesis, SynthConfig};
use engine::train::{self as training, TrainConfig};
use engine::{Camera, Error, GaussianCloud, Image, Model};
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Converts a serializable value to plain Python objects through JSON.
fn json_object<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Camera", module = "mega4d")]
struct PyCamera {
    inner: Camera,
}

#[pymethods]
impl PyCamera {
    /// Pinhole camera at `eye` looking at `target`.
    #[staticmethod]
    #[pyo3(signature = (eye, target, up, fx, fy, width, height, time = 0.0))]
    #[allow(clippy::too_many_arguments)]
    fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
        time: f64,
    ) -> PyResult<Self> {
        let v = |a: [f64; 3]| engine::nalgebra::Vector3::from(a);
        let inner = Camera::look_at(v(eye), v(target), v(up), fx, fy, width, height, time).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time
    }

    fn with_time(&self, time: f64) -> Self {
        Self { inner: self.inner.with_time(time) }
    }

    fn center(&self) -> [f64; 3] {
        self.inner.center().into()
    }
}

#[pyclass(name = "Image", module = "mega4d")]
struct PyImage {
    inner: Image,
}

#[pymethods]
impl PyImage {
    /// Row-major interleaved RGB floats.
    #[new]
    fn new(width: usize, height: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: Image::from_data(width, height, data).map_err(to_py)? })
    }

    #[staticmethod]
    fn read_ppm(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Image::read_ppm(path).map_err(to_py)? })
    }

    fn write_ppm(&self, path: &str) -> PyResult<()> {
        self.inner.write_ppm(path).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<[f64; 3]> {
        if x >= self.inner.width || y >= self.inner.height {
            return Err(PyIndexError::new_err(format!("pixel ({x}, {y}) outside the image")));
        }
        Ok(self.inner.pixel(x, y))
    }

    fn to_rgb8<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_rgb8())
    }
}

#[pyclass(name = "GaussianCloud", module = "mega4d")]
struct PyCloud {
    inner: GaussianCloud,
}

fn gaussian_dict<'py>(py: Python<'py>, g: &Gaussian4D) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mu4", g.mu4)?;
    d.set_item("q_l", g.q_l.to_array())?;
    d.set_item("q_r", g.q_r.to_array())?;
    d.set_item("s4", g.s4)?;
    d.set_item("c_dc", g.c_dc)?;
    d.set_item("o_logit", g.o_logit)?;
    Ok(d)
}

fn slice_dict<'py>(py: Python<'py>, g: &Gaussian4D, t: f64) -> PyResult<Bound<'py, PyDict>> {
    let s = gauss::slice(g, t).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mu3", <[f64; 3]>::from(s.mu3_t))?;
    let rows: Vec<[f64; 3]> = (0..3).map(|r| [s.sigma3[(r, 0)], s.sigma3[(r, 1)], s.sigma3[(r, 2)]]).collect();
    d.set_item("sigma3", rows)?;
    d.set_item("temporal_opacity", s.temporal_opacity)?;
    Ok(d)
}

impl PyCloud {
    fn at(&self, i: usize) -> PyResult<Gaussian4D> {
        if i >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("index {i} out of range for {} gaussians", self.inner.len())));
        }
        Ok(self.inner.get(i))
    }
}

#[pymethods]
impl PyCloud {
    #[new]
    fn new() -> Self {
        Self { inner: GaussianCloud::new() }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Appends one Gaussian; quaternions are `(w, x, y, z)`.
    fn push(&mut self, mu4: [f64; 4], q_l: [f64; 4], q_r: [f64; 4], s4: [f64; 4], c_dc: [f64; 3], o_logit: f64) {
        self.inner.push(Gaussian4D {
            mu4,
            q_l: Quaternion::from_array(q_l),
            q_r: Quaternion::from_array(q_r),
            s4,
            c_dc,
            o_logit,
        });
    }

    fn get<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyDict>> {
        gaussian_dict(py, &self.at(i)?)
    }

    fn opacities(&self) -> Vec<f64> {
        self.inner.opacities()
    }

    /// The 3D Gaussian seen at time `t`.
    fn slice<'py>(&self, py: Python<'py>, i: usize, t: f64) -> PyResult<Bound<'py, PyDict>> {
        slice_dict(py, &self.at(i)?, t)
    }
}

#[pyclass(name = "Model", module = "mega4d")]
struct PyModel {
    inner: Model,
}

fn render_config(background: [f64; 3]) -> RenderConfig {
    RenderConfig { background, ..RenderConfig::default() }
}

#[pymethods]
impl PyModel {
    /// A model without networks around a copy of `cloud`.
    #[new]
    fn new(cloud: PyRef<'_, PyCloud>) -> Self {
        Self { inner: Model::new(cloud.inner.clone(), Predictors::default()) }
    }

    /// Reads a JSON model or an archive.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Model::load(path).map_err(to_py)? })
    }

    fn save_json(&self, path: &str) -> PyResult<()> {
        self.inner.save_json(path).map_err(to_py)
    }

    /// Writes the archive and returns its size in bytes.
    fn save_archive(&self, path: &str) -> PyResult<usize> {
        Ok(self.inner.save_archive(path).map_err(to_py)?.len())
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = codec::encode(&self.inner.cloud, &self.inner.predictors).map_err(to_py)?;
        Ok(PyBytes::new(py, &bytes))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let (cloud, predictors) = codec::decode(data).map_err(to_py)?;
        Ok(Self { inner: Model::new(cloud, predictors) })
    }

    /// The model as an archive would read it back.
    fn rounded_fp16(&self) -> PyResult<Self> {
        Ok(Self { inner: self.inner.rounded_fp16().map_err(to_py)? })
    }

    fn size_report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let bytes = codec::encode(&self.inner.cloud, &self.inner.predictors).map_err(to_py)?;
        json_object(py, &codec::size_report(&bytes).map_err(to_py)?)
    }

    #[getter]
    fn cloud(&self) -> PyCloud {
        PyCloud { inner: self.inner.cloud.clone() }
    }

    #[getter]
    fn has_deformation(&self) -> bool {
        self.inner.predictors.deform.is_some()
    }

    #[getter]
    fn has_color_network(&self) -> bool {
        self.inner.predictors.color.is_some()
    }

    fn __len__(&self) -> usize {
        self.inner.cloud.len()
    }

    #[pyo3(signature = (camera, background = [0.0, 0.0, 0.0]))]
    fn render(&self, py: Python<'_>, camera: PyRef<'_, PyCamera>, background: [f64; 3]) -> PyResult<PyImage> {
        let cam = camera.inner.clone();
        let m = &self.inner;
        let img = py.detach(|| rasterize(&m.cloud, &m.predictors, &cam, &render_config(background))).map_err(to_py)?;
        Ok(PyImage { inner: img })
    }

    /// Fraction of Gaussians with temporal opacity above `threshold` at
    /// each time.
    #[pyo3(signature = (camera, times, threshold = 0.05))]
    fn participation(&self, camera: PyRef<'_, PyCamera>, times: Vec<f64>, threshold: f64) -> PyResult<Vec<f64>> {
        participation_ratio(&self.inner.cloud, &self.inner.predictors, &camera.inner, &times, threshold).map_err(to_py)
    }
}

/// Slices one 4D Gaussian at time `t`.
#[pyfunction]
fn slice_gaussian<'py>(
    py: Python<'py>,
    mu4: [f64; 4],
    q_l: [f64; 4],
    q_r: [f64; 4],
    s4: [f64; 4],
    t: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let g = Gaussian4D {
        mu4,
        q_l: Quaternion::from_array(q_l),
        q_r: Quaternion::from_array(q_r),
        s4,
        ..Default::default()
    };
    slice_dict(py, &g, t)
}

/// Writes a synthetic dataset; returns the number of frames.
#[pyfunction]
#[pyo3(signature = (out, preset = "orbit-3cam-8frames-64px", gaussians = 30, seed = 0))]
fn synth(py: Python<'_>, out: &str, preset: &str, gaussians: usize, seed: u64) -> PyResult<usize> {
    let cfg = SynthConfig { gaussians, seed, ..SynthConfig::preset(preset).map_err(to_py)? };
    let m = py.detach(|| synthesis::synth(&cfg, out)).map_err(to_py)?;
    Ok(m.frames.len())
}

/// Camera `index` of a dataset at `time`.
#[pyfunction]
fn dataset_camera(data: &str, index: usize, time: f64) -> PyResult<PyCamera> {
    let m = Manifest::load(data).map_err(to_py)?;
    Ok(PyCamera { inner: m.camera(index, time).map_err(to_py)? })
}

/// Trains on a dataset directory. Returns the model and the per-iteration
/// records `(iteration, l1, ssim_loss, l_opa, count)`.
#[pyfunction]
#[pyo3(signature = (data, iterations = 3000, kappa = 5e-4, lam = 0.2, deform = true, color_net = true, seed = 0, init_count = None, densify_threshold = None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: &str,
    iterations: usize,
    kappa: f64,
    lam: f64,
    deform: bool,
    color_net: bool,
    seed: u64,
    init_count: Option<usize>,
    densify_threshold: Option<f64>,
) -> PyResult<(PyModel, Vec<(usize, f64, f64, f64, usize)>)> {
    let ds = Dataset::load(data).map_err(to_py)?;
    let mut cfg = TrainConfig::with_iterations(iterations);
    cfg.kappa = kappa;
    cfg.lambda = lam;
    cfg.use_deform = deform;
    cfg.use_color_net = color_net;
    cfg.seed = seed;
    if let Some(n) = init_count {
        cfg.init.count = n;
    }
    if let Some(g) = densify_threshold {
        cfg.densify.grad_threshold = g;
    }
    let out = py.detach(|| training::train(&ds, &cfg)).map_err(to_py)?;
    let records = out.log.records.iter().map(|r| (r.iteration, r.l1, r.ssim_loss, r.l_opa, r.count)).collect();
    Ok((PyModel { inner: out.model }, records))
}

#[pyfunction]
#[pyo3(signature = (a, b, range = 1.0))]
fn psnr(a: PyRef<'_, PyImage>, b: PyRef<'_, PyImage>, range: f64) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner, range).map_err(to_py)
}

/// `(1 - SSIM) / 2` with data range 1 or 2.
#[pyfunction]
#[pyo3(signature = (a, b, data_range = 1))]
fn dssim(a: PyRef<'_, PyImage>, b: PyRef<'_, PyImage>, data_range: u8) -> PyResult<f64> {
    let v = match data_range {
        1 => DssimVariant::Range1,
        2 => DssimVariant::Range2,
        r => return Err(PyValueError::new_err(format!("data range must be 1 or 2, got {r}"))),
    };
    metrics::dssim(&a.inner, &b.inner, v).map_err(to_py)
}

/// Stored parameters per Gaussian: "dcac" or "sh4d" (view degree 3, time
/// degree 2).
#[pyfunction]
fn param_count_per_gaussian(layout: &str) -> PyResult<usize> {
    match layout {
        "dcac" => Ok(count_params(ColorLayout::DcAc)),
        "sh4d" => Ok(count_params(ColorLayout::REFERENCE_4DGS)),
        other => Err(PyValueError::new_err(format!("unknown layout '{other}'"))),
    }
}

#[pymodule]
fn mega4d(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCamera>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyCloud>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(slice_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_camera, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(dssim, m)?)?;
    m.add_function(wrap_pyfunction!(param_count_per_gaussian, m)?)?;
    Ok(())
}
