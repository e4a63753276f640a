//! Python bindings: scenario datasets, models, training and the FLOPs accountant.

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use tokenflow_core::channel::{self, AntennaConfig, ChannelParams, PropagationPath};
use tokenflow_core::flops;
use tokenflow_core::harness::{self, parse_task, ModelPreset, RunConfig};
use tokenflow_core::keepratio;
use tokenflow_core::model::{self as core_model, Prediction};
use tokenflow_core::scene::{self, Label, Split};

fn py_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn preset_config(preset: &str, task: &str) -> PyResult<core_model::ModelConfig> {
    let preset: ModelPreset = preset.parse().map_err(py_err)?;
    Ok(preset.config(parse_task(task).map_err(py_err)?))
}

/// Generated or loaded scenario dataset.
#[pyclass(module = "tokenflow")]
struct Dataset {
    inner: scene::Dataset,
}

#[pymethods]
impl Dataset {
    /// Simulates `scenarios` scenarios sized for the given model preset.
    #[staticmethod]
    #[pyo3(signature = (task = "beam", scenarios = 20, frames = 105, seed = 0, model = "desk"))]
    fn generate(task: &str, scenarios: usize, frames: usize, seed: u64, model: &str) -> PyResult<Self> {
        let mut cfg = RunConfig { scenarios, frames, ..RunConfig::default() };
        cfg.set("task", task).map_err(py_err)?;
        cfg.set("model", model).map_err(py_err)?;
        cfg.train.seed = seed;
        let inner = scene::build_dataset(&harness::scenario_config(&cfg)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: scene::read_dataset(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        scene::write_dataset(&path, &self.inner).map_err(py_err)?;
        Ok(())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Beam index, or the list of link bits for handover datasets.
    fn label<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.samples.get(index).ok_or_else(|| py_err(format!("sample {index} out of range")))?;
        match &s.label {
            Label::Beam { index } => Ok(index.into_pyobject(py)?.into_any()),
            Label::Handover { status } => Ok(status.clone().into_pyobject(py)?.into_any()),
        }
    }

    fn split(&self, index: usize) -> PyResult<&'static str> {
        let s = self.inner.samples.get(index).ok_or_else(|| py_err(format!("sample {index} out of range")))?;
        Ok(match s.split {
            Split::Train => "train",
            Split::Val => "val",
        })
    }

    fn los_blocked(&self, index: usize) -> PyResult<Vec<bool>> {
        let s = self.inner.samples.get(index).ok_or_else(|| py_err(format!("sample {index} out of range")))?;
        Ok(s.meta.los_blocked.clone())
    }

    fn summary(&self) -> PyResult<String> {
        serde_json::to_string(&harness::summarize(&self.inner)).map_err(py_err)
    }
}

#[pyclass(module = "tokenflow")]
struct Model {
    inner: core_model::Model,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (preset = "desk", task = "beam", seed = 0))]
    fn new(preset: &str, task: &str, seed: u64) -> PyResult<Self> {
        let inner = core_model::Model::new(preset_config(preset, task)?, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: core_model::load_checkpoint(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core_model::save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn token_count(&self) -> usize {
        self.inner.token_count()
    }

    #[getter]
    fn keep_ratios(&self) -> Vec<f64> {
        self.inner.keep_ratios()
    }

    #[setter]
    fn set_keep_ratios(&mut self, r: Vec<f64>) -> PyResult<()> {
        self.inner.set_keep_ratios(&r).map_err(py_err)
    }

    /// Per-block token counts used at inference.
    fn inference_tokens(&self) -> Vec<usize> {
        self.inner.inference_ks()
    }

    /// Logits for one dataset window.
    fn forward(&self, dataset: &Dataset, index: usize) -> PyResult<Vec<f64>> {
        if index >= dataset.inner.len() {
            return Err(py_err(format!("sample {index} out of range")));
        }
        let frames = dataset.inner.window(index, &self.inner.config.modalities);
        Ok(self.inner.forward_infer(&frames).map_err(py_err)?.into_data())
    }

    /// Top-1 beam or link bits for one dataset window.
    fn predict<'py>(&self, py: Python<'py>, dataset: &Dataset, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let logits = self.forward(dataset, index)?;
        match core_model::predict(&logits, self.inner.config.task) {
            Prediction::Beam { top1, .. } => Ok(top1.into_pyobject(py)?.into_any()),
            Prediction::Handover { status } => Ok(status.into_pyobject(py)?.into_any()),
        }
    }

    /// Trains in place and returns the metrics record as JSON.
    #[pyo3(signature = (dataset, epochs = 1, lr = 1e-4, gamma_prime = 0.5, seed = 0, ablation = "none", train_samples = None, val_samples = None))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        dataset: &Dataset,
        epochs: usize,
        lr: f64,
        gamma_prime: f64,
        seed: u64,
        ablation: &str,
        train_samples: Option<usize>,
        val_samples: Option<usize>,
    ) -> PyResult<String> {
        let settings = harness::TrainSettings {
            epochs,
            lr,
            gamma_prime,
            seed,
            ablation: ablation.parse().map_err(py_err)?,
            train_limit: train_samples,
            val_limit: val_samples,
            ..Default::default()
        };
        let (train_idx, val_idx) = harness::split_indices(&dataset.inner, &settings);
        let epochs = harness::train_model(&mut self.inner, &dataset.inner, &train_idx, &settings).map_err(py_err)?;
        let eval = harness::evaluate(&self.inner, &dataset.inner, &val_idx, settings.ablation, seed).map_err(py_err)?;
        let out = serde_json::json!({
            "epochs": epochs,
            "eval": eval,
            "keep_ratios": self.inner.keep_ratios(),
        });
        Ok(out.to_string())
    }

    /// FLOPs report at the current inference token counts, as JSON.
    fn flops(&self) -> PyResult<String> {
        harness::flops_report(&self.inner).and_then(|r| r.to_json()).map_err(py_err)
    }
}

/// FLOPs report of a preset at explicit per-block token counts, as JSON.
#[pyfunction]
#[pyo3(signature = (tokens, preset = "desk", task = "beam"))]
fn count_flops(tokens: Vec<usize>, preset: &str, task: &str) -> PyResult<String> {
    let cfg = preset_config(preset, task)?;
    flops::count_flops(&cfg, &tokens).and_then(|r| r.to_json()).map_err(py_err)
}

#[pyfunction]
fn attention_flops(k: usize, d: usize) -> u64 {
    flops::attention_flops(k, d)
}

#[pyfunction]
fn target_ratio_from_flops(gamma: f64, flops_max: f64, r_min: f64) -> PyResult<f64> {
    keepratio::target_ratio_from_flops(gamma, flops_max, r_min).map_err(py_err)
}

#[pyfunction]
fn inference_k(r: f64, n: usize) -> usize {
    keepratio::inference_k(r, n)
}

/// UPA steering vector as a list of complex numbers.
#[pyfunction]
#[pyo3(signature = (theta, phi, q = 4, include_pi = true))]
fn array_response(theta: f64, phi: f64, q: usize, include_pi: bool) -> Vec<num_complex_shim::C64> {
    channel::array_response(theta, phi, &AntennaConfig { q, include_pi })
        .into_iter()
        .map(|z| num_complex_shim::C64(z.re, z.im))
        .collect()
}

/// Best codeword for vehicles given as lists of `(azimuth, elevation, length, is_los)` paths.
#[pyfunction]
#[pyo3(signature = (vehicles, codebook_size = 16, q = 4))]
fn optimal_beam(vehicles: Vec<Vec<(f64, f64, f64, bool)>>, codebook_size: usize, q: usize) -> PyResult<usize> {
    let ant = AntennaConfig { q, include_pi: true };
    let cb = channel::build_codebook(&ant, codebook_size).map_err(py_err)?;
    let paths: Vec<Vec<PropagationPath>> = vehicles
        .into_iter()
        .map(|v| {
            v.into_iter()
                .map(|(azimuth, elevation, length, is_los)| PropagationPath { azimuth, elevation, length, is_los, fading_db: 0.0 })
                .collect()
        })
        .collect();
    channel::optimal_beam(&paths, &cb, &ChannelParams::default(), &ant).map_err(py_err)
}

mod num_complex_shim {
    use pyo3::prelude::*;
    use pyo3::types::PyComplex;

    /// Complex number handed to Python as a builtin `complex`.
    pub struct C64(pub f64, pub f64);

    impl<'py> IntoPyObject<'py> for C64 {
        type Target = PyComplex;
        type Output = Bound<'py, PyComplex>;
        type Error = std::convert::Infallible;

        fn into_pyobject(self, py: Python<'py>) -> Result<Self::Output, Self::Error> {
            Ok(PyComplex::from_doubles(py, self.0, self.1))
        }
    }
}

#[pymodule]
fn tokenflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(attention_flops, m)?)?;
    m.add_function(wrap_pyfunction!(target_ratio_from_flops, m)?)?;
    m.add_function(wrap_pyfunction!(inference_k, m)?)?;
    m.add_function(wrap_pyfunction!(array_response, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_beam, m)?)?;
    Ok(())
}
