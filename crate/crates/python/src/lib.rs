//! Python bindings. Volumes cross the boundary as flat row-major lists plus
//! an `(L, W, H)` tuple; numpy callers use `ravel().tolist()` and `reshape`.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use remreg_core::cli::{cascade_from_checkpoint, register_pair, rem_from_checkpoint, run_command};
use remreg_core::data::{self, load_checkpoint, PhantomCfg};
use remreg_core::engine::{Shape5, Tensor5};
use remreg_core::labels::LabelVolume;
use remreg_core::losses::{lncc_value, LnccCfg};
use remreg_core::metrics::{self, SsimCfg};
use remreg_core::rem::{build_rem, rem_param_count as count, RemConfig, RemModel, Variant};
use remreg_core::resample::{warp_nearest, warp_trilinear_forward};
use remreg_core::trainer::{Method, TrainedCell};

create_exception!(pyremreg, RemregError, PyException);

fn err(e: remreg_core::Error) -> PyErr {
    RemregError::new_err(e.to_string())
}

type Dims = (usize, usize, usize);

/// Single-channel intensity volume.
#[pyclass(module = "pyremreg", frozen)]
pub struct Volume {
    pub inner: Tensor5<f32>,
}

#[pymethods]
impl Volume {
    #[new]
    fn new(data: Vec<f32>, dims: Dims) -> PyResult<Self> {
        let inner =
            Tensor5::from_vec(Shape5::new(1, 1, dims.0, dims.1, dims.2), data).map_err(err)?;
        inner.check_finite("Volume").map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dims(&self) -> Dims {
        let [l, w, h] = self.inner.shape().spatial();
        (l, w, h)
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.dims())
    }
}

/// Integer label volume.
#[pyclass(module = "pyremreg", frozen)]
pub struct Labels {
    pub inner: LabelVolume,
}

#[pymethods]
impl Labels {
    #[new]
    fn new(data: Vec<u16>, dims: Dims) -> PyResult<Self> {
        Ok(Self {
            inner: LabelVolume::new([dims.0, dims.1, dims.2], data).map_err(err)?,
        })
    }

    #[getter]
    fn dims(&self) -> Dims {
        let [l, w, h] = self.inner.dims();
        (l, w, h)
    }

    fn tolist(&self) -> Vec<u16> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Labels(dims={:?})", self.dims())
    }
}

/// Resolution enhancement module.
#[pyclass(module = "pyremreg", frozen)]
pub struct Rem {
    model: RemModel<f32>,
}

#[pymethods]
impl Rem {
    #[new]
    #[pyo3(signature = (variant = "I", k = 8, n = 4, seed = 0))]
    fn new(variant: &str, k: usize, n: usize, seed: u64) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(err)?;
        let cfg = RemConfig::new(variant, k, n).map_err(err)?;
        Ok(Self {
            model: build_rem(cfg, seed).map_err(err)?,
        })
    }

    /// Best weights of a train-rem or train-cascade checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = load_checkpoint(path).map_err(err)?;
        Ok(Self {
            model: rem_from_checkpoint(&ck).map_err(err)?,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.num_params()
    }

    fn enhance(&self, vol: &Volume) -> PyResult<Volume> {
        Ok(Volume {
            inner: self.model.apply(&vol.inner).map_err(err)?,
        })
    }
}

/// Trained registration cascade loaded from a train-cascade checkpoint.
#[pyclass(module = "pyremreg", frozen)]
pub struct Cascade {
    method: Method,
    cell: TrainedCell,
}

#[pymethods]
impl Cascade {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = load_checkpoint(path).map_err(err)?;
        let (method, cell) = cascade_from_checkpoint(&ck).map_err(err)?;
        Ok(Self { method, cell })
    }

    #[getter]
    fn method(&self) -> String {
        self.method.to_string()
    }

    #[getter]
    fn levels(&self) -> usize {
        self.cell.reg.cfg.levels
    }

    /// Returns the warped moving volume, the warped labels when given, and
    /// the flat `(3, L, W, H)` displacement field.
    #[pyo3(signature = (fixed, moving, moving_labels = None))]
    fn register(
        &self,
        fixed: &Volume,
        moving: &Volume,
        moving_labels: Option<&Labels>,
    ) -> PyResult<(Volume, Option<Labels>, Vec<f32>)> {
        let dvf = register_pair(&self.cell, &fixed.inner, &moving.inner).map_err(err)?;
        let warped = warp_trilinear_forward(&moving.inner, &dvf).map_err(err)?;
        let labels = moving_labels
            .map(|l| warp_nearest(&l.inner, &dvf).map(|inner| Labels { inner }))
            .transpose()
            .map_err(err)?;
        Ok((Volume { inner: warped }, labels, dvf.into_data()))
    }
}

#[pyfunction]
fn rem_param_count(variant: &str, k: usize, n: usize) -> PyResult<usize> {
    let variant: Variant = variant.parse().map_err(err)?;
    Ok(count(&RemConfig::new(variant, k, n).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (seed, dims = (32, 32, 32), num_labels = 6, amplitude = 4.0, smooth_sigma = 8.0, jitter = 0.03))]
fn phantom(
    seed: u64,
    dims: Dims,
    num_labels: u16,
    amplitude: f64,
    smooth_sigma: f64,
    jitter: f64,
) -> PyResult<(Volume, Labels)> {
    let cfg = PhantomCfg {
        dims: [dims.0, dims.1, dims.2],
        num_labels,
        amplitude,
        smooth_sigma,
        jitter,
    };
    let s = data::gen_phantom(seed, &cfg).map_err(err)?;
    Ok((Volume { inner: s.intensity }, Labels { inner: s.labels }))
}

/// `(lr, lr_up)` for an integer factor.
#[pyfunction]
fn degrade(vol: &Volume, factor: usize) -> PyResult<(Volume, Volume)> {
    let d = data::degrade(&vol.inner, factor).map_err(err)?;
    Ok((Volume { inner: d.lr }, Volume { inner: d.lr_up }))
}

#[pyfunction]
fn dice(a: &Labels, b: &Labels) -> PyResult<Option<f64>> {
    Ok(metrics::dice(&a.inner, &b.inner, None).map_err(err)?.mean)
}

/// `None` when either volume is constant.
#[pyfunction]
fn ncc(a: &Volume, b: &Volume) -> PyResult<Option<f64>> {
    metrics::ncc_global(&a.inner, &b.inner).map_err(err)
}

/// Decibels; `inf` for identical volumes.
#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: &Volume, b: &Volume, peak: f64) -> PyResult<f64> {
    Ok(metrics::psnr(&a.inner, &b.inner, peak)
        .map_err(err)?
        .value())
}

#[pyfunction]
fn ssim(a: &Volume, b: &Volume) -> PyResult<f64> {
    metrics::ssim3d(&a.inner, &b.inner, &SsimCfg::default()).map_err(err)
}

/// Mean windowed squared correlation; training minimizes its negative.
#[pyfunction]
#[pyo3(signature = (a, b, window = 5))]
fn lncc(a: &Volume, b: &Volume, window: usize) -> PyResult<f32> {
    let cfg = LnccCfg::new(window, LnccCfg::default().eps).map_err(err)?;
    lncc_value(&a.inner, &b.inner, &cfg).map_err(err)
}

/// Reads an RVOL file as `Volume` or `Labels`.
#[pyfunction]
fn read_volume(py: Python<'_>, path: &str) -> PyResult<Py<PyAny>> {
    Ok(match data::read_volume(path).map_err(err)? {
        data::Volume::F32(inner) => Py::new(py, Volume { inner })?.into_any(),
        data::Volume::Labels(inner) => Py::new(py, Labels { inner })?.into_any(),
    })
}

#[pyfunction]
fn write_volume(path: &str, vol: &Bound<'_, PyAny>) -> PyResult<()> {
    let v = if let Ok(v) = vol.cast::<Volume>() {
        data::Volume::F32(v.get().inner.clone())
    } else if let Ok(l) = vol.cast::<Labels>() {
        data::Volume::Labels(l.get().inner.clone())
    } else {
        return Err(RemregError::new_err("expected a Volume or Labels"));
    };
    data::write_volume(path, &v).map_err(err)
}

/// Runs the command-line tool in-process and returns its exit status.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("remreg".to_string()).chain(args).collect();
    run_command(&argv, &mut std::io::stdout(), &mut std::io::stderr())
}

#[pymodule]
fn pyremreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RemregError", m.py().get_type::<RemregError>())?;
    m.add_class::<Volume>()?;
    m.add_class::<Labels>()?;
    m.add_class::<Rem>()?;
    m.add_class::<Cascade>()?;
    m.add_function(wrap_pyfunction!(rem_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(ncc, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(lncc, m)?)?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
