use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cosf_core::config::{AblationMode, TrainConfig};
use cosf_core::phantom::{generate, PhantomSpec};
use cosf_core::pipeline::{self, RegisterOptions};
use cosf_core::{io, metrics, volume, warp, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::MissingModel(_) => PyFileNotFoundError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<AblationMode> {
    mode.parse().map_err(to_py)
}

/// Regular voxel grid; dims are `(nx, ny, nz)`, spacing in mm.
#[pyclass(name = "Grid", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyGrid(volume::Grid3);

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (dims, spacing = [1.0, 1.0, 1.0]))]
    fn new(dims: [usize; 3], spacing: [f64; 3]) -> PyResult<Self> {
        volume::Grid3::new(dims, spacing).map(Self).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.0.spacing()
    }

    fn refined_in_plane(&self, factor: usize) -> Self {
        Self(self.0.refined_in_plane(factor))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid(dims={:?}, spacing={:?})",
            self.0.dims(),
            self.0.spacing()
        )
    }
}

/// Scalar volume, x fastest.
#[pyclass(name = "Volume", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVolume(volume::Volume);

#[pymethods]
impl PyVolume {
    #[new]
    fn new(grid: &PyGrid, data: Vec<f32>) -> PyResult<Self> {
        volume::Volume::new(grid.0, data).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn zeros(grid: &PyGrid) -> Self {
        Self(volume::Volume::zeros(grid.0))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::read_volume(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_volume(&self.0, &path).map_err(to_py)
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid(*self.0.grid())
    }

    fn to_list(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn at(&self, x: usize, y: usize, z: usize) -> PyResult<f32> {
        let [nx, ny, nz] = self.0.grid().dims();
        if x >= nx || y >= ny || z >= nz {
            return Err(PyValueError::new_err(format!(
                "voxel ({x}, {y}, {z}) outside {:?}",
                [nx, ny, nz]
            )));
        }
        Ok(self.0.at(x, y, z))
    }

    fn min_max(&self) -> (f32, f32) {
        self.0.min_max()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.0.grid().dims())
    }
}

/// Three-channel displacement field in voxels, `(dx, dy, dz)` per voxel.
#[pyclass(name = "DisplacementField", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyField(volume::DisplacementField);

#[pymethods]
impl PyField {
    #[new]
    fn new(grid: &PyGrid, data: Vec<f32>) -> PyResult<Self> {
        volume::DisplacementField::new(grid.0, data)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    fn zeros(grid: &PyGrid) -> Self {
        Self(volume::DisplacementField::zeros(grid.0))
    }

    #[staticmethod]
    fn constant(grid: &PyGrid, v: [f32; 3]) -> Self {
        Self(volume::DisplacementField::constant(grid.0, v))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::read_dvf(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_dvf(&self.0, &path).map_err(to_py)
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid(*self.0.grid())
    }

    fn to_list(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn magnitude(&self) -> PyVolume {
        PyVolume(warp::dvf_magnitude(&self.0))
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("DisplacementField(dims={:?})", self.0.grid().dims())
    }
}

/// Synthetic breathing sequence with low- and high-resolution phases.
#[pyclass(name = "Phantom", frozen)]
struct PyPhantom(cosf_core::phantom::Phantom);

#[pymethods]
impl PyPhantom {
    /// Generates a phantom from spec JSON (missing fields take defaults),
    /// optionally as a derived subject.
    #[new]
    #[pyo3(signature = (spec_json = None, subject = None))]
    fn new(spec_json: Option<&str>, subject: Option<u64>) -> PyResult<Self> {
        let mut spec = match spec_json {
            Some(s) => serde_json::from_str::<PhantomSpec>(s)
                .map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => PhantomSpec::default(),
        };
        if let Some(k) = subject {
            spec = spec.subject(k);
        }
        generate(&spec).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        cosf_core::phantom::Phantom::load(&dir)
            .map(Self)
            .map_err(to_py)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save(&dir).map_err(to_py)
    }

    #[getter]
    fn phases(&self) -> usize {
        self.0.lr.len()
    }

    fn low_res(&self, k: usize) -> PyResult<PyVolume> {
        self.check(k)?;
        Ok(PyVolume(self.0.lr.phase(k).clone()))
    }

    fn high_res(&self, k: usize) -> PyResult<PyVolume> {
        self.check(k)?;
        Ok(PyVolume(self.0.hr.phase(k).clone()))
    }

    #[getter]
    fn prior(&self) -> PyVolume {
        PyVolume(self.0.prior.clone())
    }

    /// Ground-truth field taking phase `moving` onto phase `fixed`.
    #[pyo3(signature = (moving, fixed, high_res = true))]
    fn pair_truth(&self, moving: usize, fixed: usize, high_res: bool) -> PyResult<PyField> {
        let grid = if high_res {
            self.0.spec.grid_hr()
        } else {
            *self.0.lr.grid()
        };
        self.0
            .spec
            .pair_truth(&grid, moving, fixed)
            .map(PyField)
            .map_err(to_py)
    }

    fn body_mask(&self, grid: &PyGrid) -> Vec<bool> {
        self.0.spec.body_mask(&grid.0)
    }

    fn spec_json(&self) -> String {
        serde_json::to_string_pretty(&self.0.spec).expect("spec serialises")
    }
}

impl PyPhantom {
    fn check(&self, k: usize) -> PyResult<()> {
        if k >= self.0.lr.len() {
            return Err(PyValueError::new_err(format!(
                "phase {k} out of range 0..{}",
                self.0.lr.len()
            )));
        }
        Ok(())
    }
}

/// Checkpoints for one mode of the cascade.
#[pyclass(name = "Models", frozen)]
struct PyModels {
    set: pipeline::ModelSet,
    mode: AblationMode,
}

#[pymethods]
impl PyModels {
    #[new]
    fn new(dir: PathBuf, mode: &str) -> PyResult<Self> {
        let mode = parse_mode(mode)?;
        Ok(Self {
            set: pipeline::ModelSet::load(&dir, mode).map_err(to_py)?,
            mode,
        })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.mode.as_str()
    }

    /// Runs the cascade; returns a dict of every intermediate volume and field.
    #[pyo3(signature = (moving, fixed, prior, linear_upsampling = false))]
    fn register<'py>(
        &self,
        py: Python<'py>,
        moving: &PyVolume,
        fixed: &PyVolume,
        prior: &PyVolume,
        linear_upsampling: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let opts = RegisterOptions {
            linear_upsampling,
            ..Default::default()
        };
        let b = py
            .detach(|| {
                pipeline::register(&self.set, &moving.0, &fixed.0, &prior.0, self.mode, opts)
            })
            .map_err(to_py)?;
        let d = PyDict::new(py);
        for (name, v) in [
            ("moving_enhanced", &b.moving_enhanced),
            ("fixed_enhanced", &b.fixed_enhanced),
            ("moving_coarse", &b.moving_coarse),
            ("moving_warped", &b.moving_warped),
            ("fixed_warped", &b.fixed_warped),
        ] {
            d.set_item(name, PyVolume(v.clone()))?;
        }
        if let Some(p) = &b.prior_aligned {
            d.set_item("prior_aligned", PyVolume(p.clone()))?;
        }
        for (name, f) in [
            ("phi_coarse_m2f", &b.phi_coarse.m2f),
            ("phi_coarse_f2m", &b.phi_coarse.f2m),
            ("phi_tilde", &b.phi_tilde),
            ("residual", &b.v),
            ("phi_star", &b.phi_star),
        ] {
            d.set_item(name, PyField(f.clone()))?;
        }
        for (name, h) in b.heatmaps().map_err(to_py)? {
            d.set_item(name, PyVolume(h))?;
        }
        Ok(d)
    }
}

#[pyfunction]
fn warp_volume(v: &PyVolume, phi: &PyField) -> PyResult<PyVolume> {
    warp::warp_volume(&v.0, &phi.0).map(PyVolume).map_err(to_py)
}

#[pyfunction]
fn resample(v: &PyVolume, grid: &PyGrid) -> PyResult<PyVolume> {
    warp::resample_volume(&v.0, &grid.0)
        .map(PyVolume)
        .map_err(to_py)
}

#[pyfunction]
fn upsample_dvf(phi: &PyField, grid: &PyGrid) -> PyResult<PyField> {
    warp::upsample_dvf(&phi.0, &grid.0)
        .map(PyField)
        .map_err(to_py)
}

#[pyfunction]
fn rmse(a: &PyVolume, b: &PyVolume) -> PyResult<f64> {
    metrics::rmse(&a.0, &b.0).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: &PyVolume, b: &PyVolume, peak: f64) -> PyResult<f64> {
    metrics::psnr(&a.0, &b.0, peak).map_err(to_py)
}

#[pyfunction]
fn ssim(a: &PyVolume, b: &PyVolume) -> PyResult<f64> {
    metrics::ssim_volume(&a.0, &b.0).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, bins = metrics::NMI_BINS))]
fn nmi(a: &PyVolume, b: &PyVolume, bins: usize) -> PyResult<f64> {
    metrics::nmi(&a.0, &b.0, bins).map_err(to_py)
}

/// `(mean, max)` endpoint error, optionally over a voxel mask.
#[pyfunction]
#[pyo3(signature = (phi, truth, mask = None))]
fn endpoint_error(phi: &PyField, truth: &PyField, mask: Option<Vec<bool>>) -> PyResult<(f64, f64)> {
    metrics::endpoint_error(&phi.0, &truth.0, mask.as_deref()).map_err(to_py)
}

/// Default training configuration as JSON.
#[pyfunction]
fn default_config() -> String {
    TrainConfig::default().to_json()
}

/// Validates a training configuration; returns it with defaults filled in.
#[pyfunction]
fn check_config(json: &str) -> PyResult<String> {
    TrainConfig::from_json(json)
        .map(|c| c.to_json())
        .map_err(to_py)
}

#[pymodule]
fn cosf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyPhantom>()?;
    m.add_class::<PyModels>()?;
    m.add_function(wrap_pyfunction!(warp_volume, m)?)?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(upsample_dvf, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(endpoint_error, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(check_config, m)?)?;
    m.add(
        "MODES",
        AblationMode::ALL.map(AblationMode::as_str).to_vec(),
    )?;
    Ok(())
}
