//! Python bindings: stacks, simulation, reconstruction, the per-window
//! building blocks (decomposition, weights, indicator) and the metrics.
//!
//! Arrays cross the boundary as float64 NumPy arrays; images are indexed
//! `[row, col]` and stacks `[frame, row, col]`.

use std::path::PathBuf;

use nalgebra::DMatrix;
use ndarray::Array2;
use numpy::{IntoPyArray, PyArray1, PyArray2, PyReadonlyArray1, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use musical_core::indicator::{self, IndicatorConfig, IndicatorVariant, ThresholdSpec, DEFAULT_EPSILON_FLOOR};
use musical_core::metrics::{self, CirclesGeometry, FineImage, LinesGeometry, RatioConfig};
use musical_core::reconstruct::{self as recon, default_window_side, ReconstructionConfig};
use musical_core::simulate::{Emitter, SceneKind, SimulationConfig};
use musical_core::stack_io::{self, SampleFormat};
use musical_core::{Calibration, Error, Family, ImageStack, PsfModel, ThresholdMode};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingFile(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        e @ (Error::Io(_) | Error::Tiff(_) | Error::Png(_)) => PyOSError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for musical_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn family(name: &str) -> PyResult<Family> {
    name.parse().py()
}

fn threshold_dict<'py>(py: Python<'py>, spec: &ThresholdSpec) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    match *spec {
        ThresholdSpec::Hard { sigma0, .. } => {
            d.set_item("kind", "hard")?;
            d.set_item("sigma0", sigma0)?;
        }
        ThresholdSpec::Soft { sigma_min, sigma_max, .. } => {
            d.set_item("kind", "soft")?;
            d.set_item("sigma_min", sigma_min)?;
            d.set_item("sigma_max", sigma_max)?;
        }
    }
    Ok(d)
}

#[pyclass(name = "Calibration", frozen, from_py_object)]
#[derive(Clone)]
struct PyCalibration(Calibration);

#[pymethods]
impl PyCalibration {
    #[new]
    #[pyo3(signature = (pixel_size_nm = 80.0, wavelength_nm = 665.0, na = 1.42))]
    fn new(pixel_size_nm: f64, wavelength_nm: f64, na: f64) -> PyResult<Self> {
        Ok(Self(Calibration::new(pixel_size_nm, wavelength_nm, na).py()?))
    }

    #[getter]
    fn pixel_size_nm(&self) -> f64 {
        self.0.pixel_size_nm
    }

    #[getter]
    fn wavelength_nm(&self) -> f64 {
        self.0.wavelength_nm
    }

    #[getter]
    fn na(&self) -> f64 {
        self.0.numerical_aperture
    }

    fn __repr__(&self) -> String {
        format!(
            "Calibration(pixel_size_nm={}, wavelength_nm={}, na={})",
            self.0.pixel_size_nm, self.0.wavelength_nm, self.0.numerical_aperture
        )
    }
}

fn calibration_or_default(c: Option<PyCalibration>) -> PyResult<Calibration> {
    match c {
        Some(c) => Ok(c.0),
        None => Calibration::new(80.0, 665.0, 1.42).py(),
    }
}

/// A validated `(frames, height, width)` stack with its calibration.
#[pyclass(name = "Stack", frozen)]
struct PyStack(ImageStack);

#[pymethods]
impl PyStack {
    #[new]
    #[pyo3(signature = (frames, calibration = None))]
    fn new(frames: PyReadonlyArray3<'_, f64>, calibration: Option<PyCalibration>) -> PyResult<Self> {
        let cal = calibration_or_default(calibration)?;
        Ok(Self(ImageStack::new(frames.as_array().to_owned(), cal).py()?))
    }

    /// Read a multi-page grayscale TIFF.
    #[staticmethod]
    #[pyo3(signature = (path, calibration = None))]
    fn load(path: PathBuf, calibration: Option<PyCalibration>) -> PyResult<Self> {
        let cal = calibration_or_default(calibration)?;
        Ok(Self(stack_io::load_stack(&path, cal).py()?))
    }

    /// Write as a multi-page TIFF in the narrowest lossless sample format.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let format = SampleFormat::lossless_for(self.0.frames().iter());
        stack_io::write_stack(&path, &self.0, format).py()
    }

    #[getter]
    fn frames<'py>(&self, py: Python<'py>) -> Bound<'py, numpy::PyArray3<f64>> {
        self.0.frames().clone().into_pyarray(py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.num_frames(), self.0.height(), self.0.width())
    }

    #[getter]
    fn calibration(&self) -> PyCalibration {
        PyCalibration(*self.0.calibration())
    }

    fn scaled(&self, factor: f64) -> PyResult<Self> {
        Ok(Self(self.0.scaled(factor).py()?))
    }

    /// Temporal mean image.
    fn mean<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        let t = self.0.num_frames() as f64;
        self.0.frames().sum_axis(ndarray::Axis(0)).mapv(|v| v / t).into_pyarray(py)
    }

    fn __repr__(&self) -> String {
        let (t, h, w) = self.shape();
        format!("Stack(frames={t}, height={h}, width={w})")
    }
}

#[pyclass(name = "Reconstruction", frozen)]
struct PyReconstruction(musical_core::Reconstruction);

#[pymethods]
impl PyReconstruction {
    #[getter]
    fn image<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        self.0.image.clone().into_pyarray(py)
    }

    /// Coarse-pixel mask of window centres that were evaluated.
    #[getter]
    fn processed_mask<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<bool>> {
        self.0.processed_mask.clone().into_pyarray(py)
    }

    #[getter]
    fn subpixels(&self) -> usize {
        self.0.subpixels
    }

    #[getter]
    fn spacing_nm(&self) -> f64 {
        self.0.fine_spacing_nm()
    }

    #[getter]
    fn window_side(&self) -> usize {
        self.0.config.window_side
    }

    #[getter]
    fn variant(&self) -> String {
        self.0.config.variant.to_string()
    }

    #[getter]
    fn threshold<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        threshold_dict(py, &self.0.threshold)
    }

    /// `log10(1 + 1000 f / f_max)`.
    fn log_display<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        self.0.log_display().into_pyarray(py)
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.0.image.dim();
        format!("Reconstruction({}, {h}x{w}, spacing_nm={})", self.0.config.variant, self.0.fine_spacing_nm())
    }
}

#[allow(clippy::too_many_arguments)]
fn config(
    stack: &ImageStack,
    method: &str,
    threshold: &str,
    alpha: f64,
    subpixels: usize,
    window_size: Option<usize>,
    min_mean: Option<f64>,
) -> PyResult<ReconstructionConfig> {
    let cal = stack.calibration();
    let psf = PsfModel::gaussian(cal.wavelength_nm, cal.numerical_aperture).py()?;
    let mode: ThresholdMode = threshold.parse().py()?;
    let cfg = ReconstructionConfig {
        window_side: window_size.unwrap_or_else(|| default_window_side(&psf, cal.pixel_size_nm)),
        subpixels,
        indicator: IndicatorConfig::new(alpha, DEFAULT_EPSILON_FLOOR).py()?,
        variant: IndicatorVariant::new(family(method)?, mode),
        psf,
        threshold_min_mean: min_mean,
    };
    cfg.validate().py()?;
    Ok(cfg)
}

/// Super-resolved image. `threshold` is "A", "B", "soft" or a manual
/// log10(sigma0) such as "2.5".
#[pyfunction]
#[pyo3(signature = (stack, method = "musical", threshold = "B", alpha = 4.0, subpixels = 10, window_size = None, min_mean = None))]
#[allow(clippy::too_many_arguments)]
fn reconstruct(
    py: Python<'_>,
    stack: &PyStack,
    method: &str,
    threshold: &str,
    alpha: f64,
    subpixels: usize,
    window_size: Option<usize>,
    min_mean: Option<f64>,
) -> PyResult<PyReconstruction> {
    let cfg = config(&stack.0, method, threshold, alpha, subpixels, window_size, min_mean)?;
    let out = py.detach(|| recon::reconstruct(&stack.0, &cfg)).py()?;
    Ok(PyReconstruction(out))
}

/// Signal-subspace size per coarse pixel (hard thresholds only).
#[pyfunction]
#[pyo3(signature = (stack, method = "musical", threshold = "B", window_size = None, min_mean = None))]
fn cardinality<'py>(
    py: Python<'py>,
    stack: &PyStack,
    method: &str,
    threshold: &str,
    window_size: Option<usize>,
    min_mean: Option<f64>,
) -> PyResult<Bound<'py, PyArray2<u64>>> {
    let cfg = config(&stack.0, method, threshold, 4.0, 1, window_size, min_mean)?;
    let map = py.detach(|| recon::cardinality_map(&stack.0, &cfg)).py()?;
    Ok(map.counts.mapv(|c| c as u64).into_pyarray(py))
}

/// Render a catalog scene. Returns `(stack, emitters)` with emitters as an
/// `(N, 3)` array of x, y, z in nm.
#[pyfunction]
#[pyo3(signature = (
    scene, seed = 1, duty = None, sbr = None, frames = None, height = None, width = None,
    calibration = None, poisson_counts = false, read_noise_sd = 0.0
))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    scene: &str,
    seed: u64,
    duty: Option<f64>,
    sbr: Option<f64>,
    frames: Option<usize>,
    height: Option<usize>,
    width: Option<usize>,
    calibration: Option<PyCalibration>,
    poisson_counts: bool,
    read_noise_sd: f64,
) -> PyResult<(PyStack, Bound<'py, PyArray2<f64>>)> {
    let kind: SceneKind = scene.parse().py()?;
    let mut cfg = SimulationConfig::standard(kind, seed);
    if let Some(c) = calibration {
        cfg.pixel_size_nm = c.0.pixel_size_nm;
        cfg.wavelength_nm = c.0.wavelength_nm;
        cfg.numerical_aperture = c.0.numerical_aperture;
    }
    cfg.duty_cycle = duty.unwrap_or(cfg.duty_cycle);
    cfg.sbr = sbr.unwrap_or(cfg.sbr);
    cfg.frames = frames.unwrap_or(cfg.frames);
    cfg.height = height.unwrap_or(cfg.height);
    cfg.width = width.unwrap_or(cfg.width);
    if poisson_counts {
        cfg.count_mode = musical_core::simulate::CountMode::Poisson;
    }
    cfg.read_noise_sd = read_noise_sd;
    let sim = py.detach(|| cfg.run()).py()?;
    let emitters = emitter_array(&sim.scene.emitters);
    Ok((PyStack(sim.stack), emitters.into_pyarray(py)))
}

fn emitter_array(emitters: &[Emitter]) -> Array2<f64> {
    Array2::from_shape_fn((emitters.len(), 3), |(i, k)| {
        let e = &emitters[i];
        [e.x_nm, e.y_nm, e.z_nm][k]
    })
}

fn emitters_from(array: PyReadonlyArray2<'_, f64>) -> PyResult<Vec<Emitter>> {
    let a = array.as_array();
    if a.ncols() < 2 || a.ncols() > 3 {
        return Err(PyValueError::new_err("emitters must be an (N, 2) or (N, 3) array"));
    }
    Ok(a.rows()
        .into_iter()
        .map(|r| Emitter::new(r[0], r[1], if r.len() > 2 { r[2] } else { 0.0 }))
        .collect())
}

/// Eigenimage basis of a `(pixels, frames)` window matrix. Returns
/// `(eigenimages, eigenvalues, singular_values)`, sorted by descending
/// eigenvalue; eigenimages are columns.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn decompose<'py>(
    py: Python<'py>,
    matrix: PyReadonlyArray2<'_, f64>,
) -> PyResult<(Bound<'py, PyArray2<f64>>, Bound<'py, PyArray1<f64>>, Bound<'py, PyArray1<f64>>)> {
    let a = matrix.as_array();
    if a.nrows() < 1 || a.ncols() < 2 {
        return Err(PyValueError::new_err("matrix needs at least one row and two columns"));
    }
    let m = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let dec = musical_core::subspace::decompose_matrix(&m);
    let u = &dec.eigenimages;
    let basis = Array2::from_shape_fn((u.nrows(), u.ncols()), |(i, j)| u[(i, j)]);
    Ok((
        basis.into_pyarray(py),
        dec.eigenvalues.into_pyarray(py),
        dec.singular_values.into_pyarray(py),
    ))
}

/// Numerator and denominator weights `(a, b)` for a spectrum. Give either
/// `sigma0` (hard) or `soft_bounds = (sigma_min, sigma_max)`.
#[pyfunction]
#[pyo3(signature = (singular_values, family = "musical", sigma0 = None, soft_bounds = None))]
#[allow(clippy::type_complexity)]
fn weights<'py>(
    py: Python<'py>,
    singular_values: PyReadonlyArray1<'_, f64>,
    family: &str,
    sigma0: Option<f64>,
    soft_bounds: Option<(f64, f64)>,
) -> PyResult<(Bound<'py, PyArray1<f64>>, Bound<'py, PyArray1<f64>>)> {
    let fam = self::family(family)?;
    let spec = match (sigma0, soft_bounds) {
        (Some(s), None) => ThresholdSpec::hard(fam, s).py()?,
        (None, Some((lo, hi))) => ThresholdSpec::soft(fam, lo, hi).py()?,
        _ => return Err(PyValueError::new_err("give exactly one of sigma0 and soft_bounds")),
    };
    let sv = singular_values.as_slice()?;
    let ev: Vec<f64> = sv.iter().map(|s| s * s).collect();
    let w = indicator::weights_for_spectrum(sv, &ev, &spec);
    Ok((w.a.into_pyarray(py), w.b.into_pyarray(py)))
}

/// Indicator value from squared projections `g_i^2` and weights.
#[pyfunction(name = "indicator")]
#[pyo3(signature = (squared_projections, a, b, alpha = 4.0))]
fn indicator_value(
    squared_projections: PyReadonlyArray1<'_, f64>,
    a: PyReadonlyArray1<'_, f64>,
    b: PyReadonlyArray1<'_, f64>,
    alpha: f64,
) -> PyResult<f64> {
    let g = squared_projections.as_slice()?;
    let w = musical_core::WeightVector {
        a: a.as_slice()?.to_vec(),
        b: b.as_slice()?.to_vec(),
    };
    if w.a.len() != g.len() || w.b.len() != g.len() {
        return Err(PyValueError::new_err("projections and weights must have the same length"));
    }
    let cfg = IndicatorConfig::new(alpha, DEFAULT_EPSILON_FLOOR).py()?;
    Ok(indicator::indicator_from_squared(g.iter().copied(), &w, &cfg))
}

/// Threshold rules on a list of per-window second singular values.
#[pyfunction]
fn thresholds(sigma2: Vec<f64>) -> PyResult<(f64, f64)> {
    Ok((indicator::rule_a(&sigma2).py()?, indicator::rule_b(&sigma2).py()?))
}

/// Metric input: a reconstruction (its mask marks valid samples) or a
/// plain array with an explicit spacing.
#[derive(FromPyObject)]
enum ImageArg<'py> {
    Recon(PyRef<'py, PyReconstruction>),
    Array(PyReadonlyArray2<'py, f64>),
}

fn fine_image(image: ImageArg<'_>, spacing_nm: Option<f64>) -> PyResult<FineImage> {
    match image {
        ImageArg::Recon(r) => Ok(FineImage::from_reconstruction(&r.0)),
        ImageArg::Array(a) => {
            let spacing = spacing_nm.ok_or_else(|| PyValueError::new_err("spacing_nm is required for arrays"))?;
            FineImage::new(a.as_array().to_owned(), spacing).py()
        }
    }
}

fn geometry_dict<'py>(py: Python<'py>, g: &LinesGeometry) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("center", g.center)?;
    d.set_item("angle_deg", g.angle_deg)?;
    d.set_item("length_nm", g.length_nm)?;
    Ok(d)
}

/// Crossing-lines geometry fitted to emitter positions.
#[pyfunction]
fn infer_lines<'py>(py: Python<'py>, emitters: PyReadonlyArray2<'_, f64>) -> PyResult<Bound<'py, PyDict>> {
    geometry_dict(py, &LinesGeometry::infer(&emitters_from(emitters)?).py()?)
}

/// Smallest resolved line separation in nm, or None if the lines never
/// separate. Geometry is fitted to `emitters`.
#[pyfunction]
#[pyo3(signature = (image, emitters, spacing_nm = None, band_fraction = 0.4, ratio_threshold = 0.835, stability_steps = 3))]
fn resolution(
    image: ImageArg<'_>,
    emitters: PyReadonlyArray2<'_, f64>,
    spacing_nm: Option<f64>,
    band_fraction: f64,
    ratio_threshold: f64,
    stability_steps: usize,
) -> PyResult<Option<f64>> {
    let img = fine_image(image, spacing_nm)?;
    let geom = LinesGeometry::infer(&emitters_from(emitters)?).py()?;
    let cfg = RatioConfig {
        band_fraction,
        threshold: ratio_threshold,
        stability_steps,
        profile_half_width: 0,
    };
    Ok(metrics::resolution(&img, &geom, &cfg).separation_nm())
}

/// Valley contrast `1 - V / mean(P1, P2)` between two circles fitted to
/// `emitters`.
#[pyfunction]
#[pyo3(signature = (image, emitters, spacing_nm = None))]
fn contrast(image: ImageArg<'_>, emitters: PyReadonlyArray2<'_, f64>, spacing_nm: Option<f64>) -> PyResult<f64> {
    let img = fine_image(image, spacing_nm)?;
    let geom = CirclesGeometry::infer(&emitters_from(emitters)?).py()?;
    metrics::contrast(&img, &geom, &RatioConfig::default()).py()
}

/// Fraction of valid samples whose max-normalized value lies in `[lo, hi]`.
#[pyfunction]
#[pyo3(signature = (image, lo, hi, spacing_nm = None))]
fn normalized_mass(image: ImageArg<'_>, lo: f64, hi: f64, spacing_nm: Option<f64>) -> PyResult<f64> {
    metrics::normalized_mass(&fine_image(image, spacing_nm)?, lo, hi).py()
}

/// Centre-disk mean over rim-annulus mean for a ring of `radius_nm`.
#[pyfunction]
#[pyo3(signature = (image, center, radius_nm, center_fraction = 0.3, rim_fraction = 0.2, spacing_nm = None))]
fn hollow_ratio(
    image: ImageArg<'_>,
    center: (f64, f64),
    radius_nm: f64,
    center_fraction: f64,
    rim_fraction: f64,
    spacing_nm: Option<f64>,
) -> PyResult<f64> {
    let img = fine_image(image, spacing_nm)?;
    Ok(metrics::hollow_ratio(&img, center, radius_nm, center_fraction, rim_fraction).py()?.ratio)
}

#[pymodule]
fn musical(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCalibration>()?;
    m.add_class::<PyStack>()?;
    m.add_class::<PyReconstruction>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(cardinality, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(weights, m)?)?;
    m.add_function(wrap_pyfunction!(indicator_value, m)?)?;
    m.add_function(wrap_pyfunction!(thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(infer_lines, m)?)?;
    m.add_function(wrap_pyfunction!(resolution, m)?)?;
    m.add_function(wrap_pyfunction!(contrast, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_mass, m)?)?;
    m.add_function(wrap_pyfunction!(hollow_ratio, m)?)?;
    m.add("DEFAULT_ALPHA", indicator::DEFAULT_ALPHA)?;
    Ok(())
}
