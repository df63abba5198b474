//! Python bindings for the motion-manifold library: skeletons, motion
//! clips, trained models, and the manifold operations built on them.
//!
//! Build the module with `cargo build -p motion-manifold-py`, then import
//! the produced `libmotion_manifold_py.so` as `motion_manifold_py` (the
//! repo's `python/smoke_test.py` shows the whole flow).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use motion_manifold as mm;

fn err(e: mm::Error) -> PyErr {
    match e {
        mm::Error::InvalidArgument(_) | mm::Error::Config(_) | mm::Error::InvalidData(_) => {
            PyValueError::new_err(e.to_string())
        }
        mm::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A joint hierarchy with fixed bone offsets.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Skeleton {
    inner: mm::kinematics::Skeleton,
}

#[pymethods]
impl Skeleton {
    /// A serial chain of `n_joints` joints spaced `bone_length` apart.
    #[staticmethod]
    fn chain(n_joints: usize, bone_length: f64) -> PyResult<Skeleton> {
        if n_joints == 0 {
            return Err(PyValueError::new_err("a skeleton needs at least one joint"));
        }
        if !(bone_length > 0.0) {
            return Err(PyValueError::new_err("bone length must be positive"));
        }
        Ok(Skeleton { inner: mm::kinematics::Skeleton::chain(n_joints, bone_length) })
    }

    /// A 17-joint humanoid.
    #[staticmethod]
    fn human17() -> Skeleton {
        Skeleton { inner: mm::kinematics::Skeleton::human17() }
    }

    #[getter]
    fn n_joints(&self) -> usize {
        self.inner.n_joints()
    }

    #[getter]
    fn joint_names(&self) -> Vec<String> {
        self.inner.names().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Skeleton({} joints)", self.inner.n_joints())
    }
}

/// A clip: frames of flattened per-joint rotation vectors.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Motion {
    inner: mm::model::Motion,
}

#[pymethods]
impl Motion {
    /// Builds a clip from a non-empty list of equally sized frames.
    #[new]
    fn new(frames: Vec<Vec<f64>>) -> PyResult<Motion> {
        let dim = match frames.first() {
            None => return Err(PyValueError::new_err("a motion needs at least one frame")),
            Some(f) if f.is_empty() => {
                return Err(PyValueError::new_err("frames must not be empty"))
            }
            Some(f) => f.len(),
        };
        if frames.iter().any(|f| f.len() != dim) {
            return Err(PyValueError::new_err("all frames must have the same length"));
        }
        Ok(Motion { inner: mm::model::Motion::from_frames(&frames) })
    }

    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// All frames as a list of lists.
    fn frames(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_frames()).map(|t| self.inner.frame(t).to_vec()).collect()
    }

    fn frame(&self, t: usize) -> PyResult<Vec<f64>> {
        if t >= self.inner.n_frames() {
            return Err(PyValueError::new_err(format!(
                "frame {t} out of range for a {}-frame clip",
                self.inner.n_frames()
            )));
        }
        Ok(self.inner.frame(t).to_vec())
    }

    /// The same frames in reverse temporal order.
    fn reversed(&self) -> Motion {
        Motion { inner: self.inner.reversed() }
    }

    /// Contiguous sub-clip of `len` frames starting at `start`.
    fn window(&self, start: usize, len: usize) -> PyResult<Motion> {
        if len == 0 || start + len > self.inner.n_frames() {
            return Err(PyValueError::new_err(format!(
                "window [{start}, {}) out of range for a {}-frame clip",
                start + len,
                self.inner.n_frames()
            )));
        }
        Ok(Motion { inner: self.inner.window(start, len) })
    }

    fn __len__(&self) -> usize {
        self.inner.n_frames()
    }

    fn __repr__(&self) -> String {
        format!("Motion({} frames x {} dims)", self.inner.n_frames(), self.inner.dim())
    }
}

/// A trained sequence autoencoder over fixed-length motion clips.
#[pyclass]
struct Model {
    inner: mm::model::Model,
}

#[pymethods]
impl Model {
    /// Restores a model from a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Model> {
        let ckpt = mm::model::Checkpoint::load(&path).map_err(err)?;
        Ok(Model { inner: ckpt.restore_model().map_err(err)? })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    #[getter]
    fn n_joints(&self) -> usize {
        self.inner.hyper.n_joints
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.hyper.latent_dim
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.hyper.seq_len
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hyper.hidden_dim
    }

    /// Encodes a clip into its latent code.
    fn encode(&self, motion: &Motion) -> PyResult<Vec<f64>> {
        Ok(self.inner.encode(&motion.inner).map_err(err)?.0)
    }

    /// Expands a latent code into a clip. `decoder` picks `"rotation"`
    /// (absolute angles) or `"velocity"` (integrated per-step deltas);
    /// `emitted=True` returns the decoder's raw last-frame-first order.
    #[pyo3(signature = (z, decoder = "rotation", emitted = false))]
    fn decode(&self, z: Vec<f64>, decoder: &str, emitted: bool) -> PyResult<Motion> {
        let z = mm::model::LatentVector(z);
        let out = match decoder {
            "rotation" => self.inner.decode_rotation(&z),
            "velocity" => self.inner.decode_velocity(&z),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown decoder {other:?}; expected \"rotation\" or \"velocity\""
                )))
            }
        }
        .map_err(err)?;
        Ok(Motion { inner: if emitted { out.emitted } else { out.motion } })
    }

    /// Round trip: encode a clip, decode it again.
    #[pyo3(signature = (motion, decoder = "rotation"))]
    fn reconstruct(&self, motion: &Motion, decoder: &str) -> PyResult<Motion> {
        let z = self.encode(motion)?;
        self.decode(z, decoder, false)
    }

    /// Decodes `n` random draws from the latent prior.
    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Motion>> {
        let motions = mm::applications::sample_random(&self.inner, n, seed).map_err(err)?;
        Ok(motions.into_iter().map(|inner| Motion { inner }).collect())
    }

    /// Decodes `steps + 1` evenly spaced points on the latent segment
    /// between two clips' codes, endpoints included.
    fn interpolate(&self, a: &Motion, b: &Motion, steps: usize) -> PyResult<Vec<Motion>> {
        let motions =
            mm::applications::interpolate(&self.inner, &a.inner, &b.inner, steps).map_err(err)?;
        Ok(motions.into_iter().map(|inner| Motion { inner }).collect())
    }

    /// Projects a corrupted clip back through the latent space.
    fn denoise(&self, motion: &Motion) -> PyResult<Motion> {
        Ok(Motion { inner: mm::applications::denoise(&self.inner, &motion.inner).map_err(err)? })
    }

    /// Decodes `code(a) - code(b) + code(c)`: the difference between `a`
    /// and `b`, transferred onto `c`.
    fn analogy(&self, a: &Motion, b: &Motion, c: &Motion) -> PyResult<Motion> {
        let out = mm::applications::analogy(&self.inner, &a.inner, &b.inner, &c.inner)
            .map_err(err)?;
        Ok(Motion { inner: out })
    }

    /// Reconstruction metrics over random windows of `clips`: per-interval
    /// angle and position errors for each decoder, plus the latent
    /// round-trip error.
    #[pyo3(signature = (clips, skeleton, fps = 25.0, windows = 30, seed = 0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        clips: Vec<Motion>,
        skeleton: &Skeleton,
        fps: f64,
        windows: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let clips: Vec<mm::model::Motion> = clips.into_iter().map(|m| m.inner).collect();
        let report =
            mm::applications::evaluate(&self.inner, &clips, &skeleton.inner, fps, windows, seed)
                .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("fps", report.fps)?;
        out.set_item("seq_len", report.seq_len)?;
        out.set_item("n_windows", report.n_windows)?;
        out.set_item("interval_seconds", report.interval_seconds())?;
        let decoders = PyDict::new(py);
        for dec in &report.decoders {
            let entry = PyDict::new(py);
            entry.set_item("angle", dec.angle.clone())?;
            entry.set_item("position", dec.position.clone())?;
            decoders.set_item(&dec.decoder, entry)?;
        }
        out.set_item("decoders", decoders)?;
        out.set_item("latent_error", report.latent_error)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({}, {} joints, latent {}, {} frames)",
            self.inner.variant,
            self.inner.hyper.n_joints,
            self.inner.hyper.latent_dim,
            self.inner.hyper.seq_len
        )
    }
}

/// Deterministic synthetic clips for the given skeleton.
#[pyfunction]
#[pyo3(signature = (skeleton, n_clips, n_frames, fps = 25.0, seed = 0))]
fn generate_clips(
    skeleton: &Skeleton,
    n_clips: usize,
    n_frames: usize,
    fps: f64,
    seed: u64,
) -> PyResult<Vec<Motion>> {
    if n_clips == 0 || n_frames == 0 {
        return Err(PyValueError::new_err("need at least one clip and one frame"));
    }
    let cfg = mm::data::SynthesisConfig::new(skeleton.inner.clone(), n_clips, n_frames, fps);
    mm::data::generate_synthetic(&cfg, seed)
        .iter()
        .map(|f| Ok(Motion { inner: mm::data::preprocess(f, fps).map_err(err)? }))
        .collect()
}

/// Trains a model on `clips`, writing `loss.csv` and `checkpoint.json`
/// into `out_dir`, and returns the trained model.
#[pyfunction]
#[pyo3(signature = (clips, skeleton, out_dir, seq_len,
    variant = "DKGM", epochs = 100, batch_size = 30, hidden_dim = 64,
    latent_dim = 8, dropout = 0.0, prior_var = 1.0, lr = 0.01,
    clip_norm = 1.0, seed = 0, fps = 25.0))]
#[allow(clippy::too_many_arguments)]
fn train(
    clips: Vec<Motion>,
    skeleton: &Skeleton,
    out_dir: PathBuf,
    seq_len: usize,
    variant: &str,
    epochs: usize,
    batch_size: usize,
    hidden_dim: usize,
    latent_dim: usize,
    dropout: f64,
    prior_var: f64,
    lr: f64,
    clip_norm: f64,
    seed: u64,
    fps: f64,
) -> PyResult<Model> {
    let variant: mm::model::Variant = variant.parse().map_err(err)?;
    let cfg = mm::training::TrainConfig {
        variant,
        hyper: mm::model::HyperParams {
            n_joints: skeleton.inner.n_joints(),
            hidden_dim,
            latent_dim,
            seq_len,
            dropout,
            prior_var,
        },
        adam: mm::training::AdamConfig { lr, ..Default::default() },
        batch_size,
        epochs,
        clip_norm,
        seed,
        ..Default::default()
    };
    let data = mm::data::DatasetSplit {
        skeleton: skeleton.inner.clone(),
        fps,
        train: clips.into_iter().map(|m| m.inner).collect(),
        test: vec![],
    };
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| PyIOError::new_err(format!("{}: {e}", out_dir.display())))?;
    let out = mm::training::train(&cfg, &data, &out_dir, None).map_err(err)?;
    Ok(Model { inner: out.model })
}

#[pymodule]
fn motion_manifold_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Skeleton>()?;
    m.add_class::<Motion>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_clips, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
