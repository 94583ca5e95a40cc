//! Python bindings: grasp geometry, dataset generation, training,
//! inference and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

use cgnet::command::{tokenize, Vocabulary};
use cgnet::dataset::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, Split};
use cgnet::eval::{evaluate as run_eval, infer, Method};
use cgnet::geometry::{self, Grasp5D, OrientationClass};
use cgnet::model::{load_checkpoint, ModelConfig, Weights};
use cgnet::pipeline::{load_models, train_role, Role};
use cgnet::train::TrainConfig;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

#[pyclass(name = "Grasp", frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
pub struct PyGrasp(Grasp5D);

#[pymethods]
impl PyGrasp {
    #[new]
    fn new(x: f64, y: f64, theta: f64, w: f64, h: f64) -> PyResult<Self> {
        Grasp5D::new(x, y, theta, w, h).map(PyGrasp).map_err(value_err)
    }

    #[getter]
    fn x(&self) -> f64 {
        self.0.x()
    }
    #[getter]
    fn y(&self) -> f64 {
        self.0.y()
    }
    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta()
    }
    #[getter]
    fn w(&self) -> f64 {
        self.0.w()
    }
    #[getter]
    fn h(&self) -> f64 {
        self.0.h()
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn corners(&self) -> Vec<(f64, f64)> {
        self.0.corners().to_vec()
    }

    /// Axis-aligned hull as `(x, y, w, h)` with `(x, y)` the center.
    fn hull(&self) -> (f64, f64, f64, f64) {
        let b = self.0.hull();
        (b.x, b.y, b.w, b.h)
    }

    fn iou(&self, other: &PyGrasp) -> PyResult<f64> {
        geometry::rect_iou(&self.0, &other.0).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        let g = &self.0;
        format!("Grasp(x={}, y={}, theta={}, w={}, h={})", g.x(), g.y(), g.theta(), g.w(), g.h())
    }
}

#[pyfunction]
fn rect_iou(a: &PyGrasp, b: &PyGrasp) -> PyResult<f64> {
    a.iou(b)
}

/// Greedy suppression over `(grasp, score)` pairs; returns the kept pairs best first.
#[pyfunction]
fn rotated_nms(items: Vec<(PyGrasp, f64)>, iou_threshold: f64) -> Vec<(PyGrasp, f64)> {
    let raw: Vec<(Grasp5D, f64)> = items.into_iter().map(|(g, s)| (g.0, s)).collect();
    geometry::rotated_nms(&raw, iou_threshold).into_iter().map(|(g, s)| (PyGrasp(g), s)).collect()
}

#[pyfunction]
#[pyo3(signature = (theta, n_orient = 19))]
fn theta_to_class(theta: f64, n_orient: usize) -> PyResult<usize> {
    if n_orient == 0 {
        return Err(value_err("n_orient must be at least 1"));
    }
    Ok(geometry::theta_to_class(theta, n_orient))
}

#[pyfunction]
#[pyo3(signature = (class_index, n_orient = 19))]
fn class_to_theta(class_index: usize, n_orient: usize) -> PyResult<f64> {
    geometry::class_to_theta(OrientationClass::Orientation(class_index), n_orient).map_err(value_err)
}

#[pyclass(name = "Dataset", frozen)]
pub struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (scenes = 600, seed = 7))]
    fn generate(scenes: usize, seed: u64) -> PyResult<Self> {
        let cfg = DatasetConfig { scenes, seed, ..Default::default() };
        generate_dataset(&cfg).map(|(ds, _)| PyDataset(ds)).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_dataset(&path).map(PyDataset).map_err(io_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dataset(&self.0, &path).map_err(io_err)
    }

    fn __len__(&self) -> usize {
        self.0.samples.len()
    }

    #[getter]
    fn num_scenes(&self) -> usize {
        self.0.scenes.len()
    }

    /// Sample indices of `"train"` or `"test"`.
    fn split(&self, name: &str) -> PyResult<Vec<usize>> {
        let s: Split = name.parse().map_err(value_err)?;
        Ok(self.0.sample_indices(s))
    }

    /// `(scene, command words, target grasps)`; no target grasps for a no-target command.
    fn sample(&self, i: usize) -> PyResult<(usize, Vec<String>, Vec<PyGrasp>)> {
        let s = self.0.samples.get(i).ok_or_else(|| PyIndexError::new_err(format!("sample {i} out of range")))?;
        Ok((s.scene, s.words.clone(), s.target_grasps().into_iter().map(PyGrasp).collect()))
    }

    /// `(height, width, rgb bytes)` of a scene image.
    fn image(&self, scene: usize) -> PyResult<(usize, usize, Vec<u8>)> {
        let sc = self.0.scenes.get(scene).ok_or_else(|| PyIndexError::new_err(format!("scene {scene} out of range")))?;
        Ok((sc.image.height, sc.image.width, sc.image.pixels.clone()))
    }
}

#[pyclass(name = "Model", frozen)]
pub struct PyModel {
    weights: Weights<f32>,
    vocab: Vocabulary,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(io_err)?;
        Ok(PyModel { weights: ck.weights, vocab: ck.vocab })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.weights.num_params()
    }

    /// Detections for one command on one scene of `dataset`, best first,
    /// as `(grasp, score)`.
    #[pyo3(signature = (dataset, scene, command, top_k = 5))]
    fn detect(&self, py: Python<'_>, dataset: &PyDataset, scene: usize, command: &str, top_k: usize) -> PyResult<Vec<(PyGrasp, f64)>> {
        let sc = dataset.0.scenes.get(scene).ok_or_else(|| PyIndexError::new_err(format!("scene {scene} out of range")))?;
        let words: Vec<&str> = command.split_whitespace().collect();
        let tokens = tokenize(&words, &self.vocab).map_err(value_err)?;
        let dets = py.detach(|| infer(&sc.image, &tokens, &self.weights)).map_err(value_err)?;
        Ok(dets.into_iter().take(top_k).map(|d| (PyGrasp(d.grasp), d.score)).collect())
    }
}

/// Train one network (`cgnet`, `agnostic` or `retrieval`) and write its
/// checkpoint under `out/<role>/`. Returns the per-iteration total loss.
#[pyfunction]
#[pyo3(signature = (dataset, out, role = "cgnet", iterations = 20000, seed = 0))]
fn train(py: Python<'_>, dataset: &PyDataset, out: PathBuf, role: &str, iterations: u64, seed: u64) -> PyResult<Vec<f64>> {
    let role: Role = role.parse().map_err(value_err)?;
    let tc = TrainConfig { iterations, seed, log_every: 0, ..Default::default() };
    let outcome = py
        .detach(|| train_role(&dataset.0, role, &ModelConfig::toy(), &tc, Some(&out)))
        .map_err(value_err)?;
    Ok(outcome.history.iter().map(|r| r.parts.total()).collect())
}

/// Evaluate the checkpoints under `models` and return one dict per method.
#[pyfunction]
#[pyo3(signature = (dataset, models, methods = "cgnet", split = "test", seed = 0))]
fn evaluate(py: Python<'_>, dataset: &PyDataset, models: PathBuf, methods: &str, split: &str, seed: u64) -> PyResult<Vec<Py<pyo3::types::PyDict>>> {
    let methods = Method::parse_list(methods).map_err(value_err)?;
    let split: Split = split.parse().map_err(value_err)?;
    let m = load_models(&models).map_err(io_err)?;
    let report = py.detach(|| run_eval(&dataset.0, &m, &methods, split, seed)).map_err(value_err)?;
    report
        .rows
        .iter()
        .map(|r| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("method", r.method.name())?;
            for (i, k) in report.ks.iter().enumerate() {
                d.set_item(format!("R@{k}"), r.recall[i])?;
                d.set_item(format!("P@{k}"), r.precision[i])?;
            }
            d.set_item("nt_rejection", r.nt_rejection)?;
            d.set_item("chance_floor", report.chance_floor)?;
            Ok(d.unbind())
        })
        .collect()
}

#[pymodule]
fn cgnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrasp>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rect_iou, m)?)?;
    m.add_function(wrap_pyfunction!(rotated_nms, m)?)?;
    m.add_function(wrap_pyfunction!(theta_to_class, m)?)?;
    m.add_function(wrap_pyfunction!(class_to_theta, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
