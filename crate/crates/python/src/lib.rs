//! Python bindings: arm kinematics and rendering, dataset generation,
//! model training and inspection, the causal belief updates, single trials
//! and whole experiments.
//!
//! Configuration overrides are passed as dicts of flat config keys; values
//! are converted with `str()`.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rhi_core::agent::{run_trial as core_run_trial, AgentConfig, TrialSetup, TRACE_COLUMNS};
use rhi_core::causal::{self, CausalBelief, CausalParams};
use rhi_core::config::KvConfig;
use rhi_core::env::{self as arm, Condition, EnvConfig, JointAngles, StimMode, StimulationEvent};
use rhi_core::generative::{self, Dataset, ModelKind, TrainConfig};
use rhi_core::harness::{self, ExperimentConfig};
use rhi_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e @ (Error::NonFinite(_) | Error::Divergence { .. } | Error::TrialAborted { .. }) => {
            PyArithmeticError::new_err(e.to_string())
        }
        e => PyValueError::new_err(e.to_string()),
    }
}

fn kv_from(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<KvConfig> {
    let mut kv = KvConfig::new();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            kv.set(&key, v.str()?.to_str()?);
        }
    }
    Ok(kv)
}

fn env_from(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<EnvConfig> {
    EnvConfig::from_kv(&kv_from(overrides)?).map_err(py_err)
}

/// Hand position `(x, y)` in metres for the given joint angles.
#[pyfunction]
#[pyo3(signature = (shoulder, elbow, config=None))]
fn forward_kinematics(shoulder: f64, elbow: f64, config: Option<&Bound<'_, PyDict>>) -> PyResult<(f64, f64)> {
    let env = env_from(config)?;
    let p = arm::forward_kinematics(JointAngles::new(shoulder, elbow), &env.geometry);
    Ok((p.x, p.y))
}

/// `[[∂x/∂q1, ∂x/∂q2], [∂y/∂q1, ∂y/∂q2]]`.
#[pyfunction]
#[pyo3(signature = (shoulder, elbow, config=None))]
fn fk_jacobian(shoulder: f64, elbow: f64, config: Option<&Bound<'_, PyDict>>) -> PyResult<[[f64; 2]; 2]> {
    let env = env_from(config)?;
    Ok(arm::fk_jacobian(JointAngles::new(shoulder, elbow), &env.geometry))
}

/// Rest posture `(shoulder, elbow)` of the (possibly overridden) config.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn rest_posture(config: Option<&Bound<'_, PyDict>>) -> PyResult<(f64, f64)> {
    let env = env_from(config)?;
    Ok((env.rest.shoulder, env.rest.elbow))
}

/// Renders the arm, shifted horizontally by `offset_dx` metres. Returns the
/// row-major pixels (row 0 at the top) and the side length.
#[pyfunction]
#[pyo3(signature = (shoulder, elbow, offset_dx=0.0, config=None))]
fn render(
    shoulder: f64,
    elbow: f64,
    offset_dx: f64,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<(Vec<f64>, usize)> {
    let env = env_from(config)?;
    let img = env.render(JointAngles::new(shoulder, elbow), offset_dx).map_err(py_err)?;
    let side = img.width();
    Ok((img.into_pixels(), side))
}

/// Renders a `grid × grid` joint-angle dataset, saves it to `path` and
/// returns its content hash.
#[pyfunction]
#[pyo3(signature = (path, grid=50, config=None))]
fn generate_dataset(path: PathBuf, grid: usize, config: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let env = env_from(config)?;
    let ds = Dataset::generate([grid, grid], &env, false).map_err(py_err)?;
    ds.save(&path).map_err(py_err)?;
    Ok(ds.content_hash())
}

/// Trains a `"decoder"` or `"vae"` on the dataset at `dataset` and saves the
/// model to `out`. Training keys (`train_epochs`, `train_lr`, ...) and
/// environment keys may be overridden.
#[pyfunction]
#[pyo3(signature = (kind, dataset, out, config=None))]
fn train_model(
    py: Python<'_>,
    kind: &str,
    dataset: PathBuf,
    out: PathBuf,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<VisualModel> {
    let kv = kv_from(config)?;
    let kind: ModelKind = kind.parse().map_err(py_err)?;
    let env = EnvConfig::from_kv(&kv).map_err(py_err)?;
    let cfg = TrainConfig::from_kv(&kv).map_err(py_err)?;
    let ds = Dataset::load(&dataset).map_err(py_err)?;
    let model = py
        .detach(|| generative::train(kind, &ds, &env, &cfg, |_| {}))
        .map_err(py_err)?;
    model.save(&out).map_err(py_err)?;
    Ok(VisualModel { inner: model })
}

/// A trained visual generative model (decoder or VAE).
#[pyclass(frozen)]
struct VisualModel {
    inner: generative::VisualModel,
}

#[pymethods]
impl VisualModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(VisualModel {
            inner: generative::VisualModel::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    /// Per-pixel MSE on the training grid at the end of training.
    #[getter]
    fn final_loss(&self) -> f64 {
        self.inner.meta.final_loss
    }

    #[getter]
    fn weight_hash(&self) -> String {
        self.inner.weight_hash()
    }

    /// Predicted image for the belief; returns `(pixels, clamped)`.
    fn predict(&self, shoulder: f64, elbow: f64) -> PyResult<(Vec<f64>, bool)> {
        let p = self.inner.predict_visual(JointAngles::new(shoulder, elbow)).map_err(py_err)?;
        Ok((p.image.into_pixels(), p.clamped))
    }

    /// `∂g/∂μᵀ · weighted_error`, in 1/rad.
    fn adjoint(&self, shoulder: f64, elbow: f64, weighted_error: Vec<f64>) -> PyResult<[f64; 2]> {
        self.inner
            .visual_adjoint(JointAngles::new(shoulder, elbow), &weighted_error)
            .map_err(py_err)
    }

    /// The two Jacobian columns `∂g/∂μ_i` as flat pixel lists.
    fn jacobian(&self, shoulder: f64, elbow: f64) -> PyResult<[Vec<f64>; 2]> {
        let j = self.inner.jacobian_image(JointAngles::new(shoulder, elbow)).map_err(py_err)?;
        Ok(j.columns)
    }

    /// Encoder `(mean, logvar)` for one image; VAE only.
    fn encode(&self, image: Vec<f64>) -> PyResult<([f64; 2], [f64; 2])> {
        let out = self.inner.encode(&[image.as_slice()]).map_err(py_err)?;
        Ok(out[0])
    }

    fn __repr__(&self) -> String {
        format!(
            "VisualModel(kind={}, resolution={}, final_loss={:.3e})",
            self.inner.kind(),
            self.inner.resolution(),
            self.inner.meta.final_loss
        )
    }
}

fn causal_params(config: Option<&Bound<'_, PyDict>>) -> PyResult<CausalParams> {
    let kv = kv_from(config)?;
    Ok(AgentConfig::from_kv(&kv).map_err(py_err)?.causal)
}

/// Posterior γ after a visual event at `t_v` and tactile event at `t_t`.
#[pyfunction]
#[pyo3(signature = (gamma, t_v, t_t, config=None))]
fn event_update(gamma: f64, t_v: f64, t_t: f64, config: Option<&Bound<'_, PyDict>>) -> PyResult<f64> {
    let params = causal_params(config)?;
    let ev = StimulationEvent::new(t_v, t_t).map_err(py_err)?;
    let b = causal::event_update(CausalBelief::new(gamma).map_err(py_err)?, &ev, &params).map_err(py_err)?;
    Ok(b.gamma)
}

/// γ decayed to time `t` after the last event completed at `last_event`.
#[pyfunction]
#[pyo3(signature = (gamma, last_event, t, config=None))]
fn decay_update(gamma: f64, last_event: f64, t: f64, config: Option<&Bound<'_, PyDict>>) -> PyResult<f64> {
    let params = causal_params(config)?;
    let belief = CausalBelief {
        last_event_time: Some(last_event),
        ..CausalBelief::new(gamma).map_err(py_err)?
    };
    Ok(causal::decay_update(belief, t, &params).map_err(py_err)?.gamma)
}

/// Seed of one trial, derived from the master seed.
#[pyfunction]
fn child_seed(master: u64, condition: &str, mode: &str, trial: usize) -> PyResult<u64> {
    let c: Condition = condition.parse().map_err(py_err)?;
    let m: StimMode = mode.parse().map_err(py_err)?;
    Ok(harness::child_seed(master, c, m, trial))
}

/// Runs one clamped-arm trial. Returns a dict of trace columns (lists) plus
/// `aborted` (reason or None).
#[pyfunction]
#[pyo3(signature = (model, condition, mode, seed, config=None))]
fn run_trial<'py>(
    py: Python<'py>,
    model: &VisualModel,
    condition: &str,
    mode: &str,
    seed: u64,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let kv = kv_from(config)?;
    let setup = TrialSetup {
        env: EnvConfig::from_kv(&kv).map_err(py_err)?,
        agent: AgentConfig::from_kv(&kv).map_err(py_err)?,
        condition: condition.parse().map_err(py_err)?,
        mode: mode.parse().map_err(py_err)?,
        seed,
    };
    let trace = py.detach(|| core_run_trial(&setup, &model.inner)).map_err(py_err)?;
    let r = &trace.records;
    let cols: [(&str, Vec<f64>); 13] = [
        (TRACE_COLUMNS[0], r.iter().map(|x| x.iter as f64).collect()),
        (TRACE_COLUMNS[1], r.iter().map(|x| x.t).collect()),
        (TRACE_COLUMNS[2], r.iter().map(|x| x.mu[0]).collect()),
        (TRACE_COLUMNS[3], r.iter().map(|x| x.mu[1]).collect()),
        (TRACE_COLUMNS[4], r.iter().map(|x| x.s_p[0]).collect()),
        (TRACE_COLUMNS[5], r.iter().map(|x| x.s_p[1]).collect()),
        (TRACE_COLUMNS[6], r.iter().map(|x| x.action[0]).collect()),
        (TRACE_COLUMNS[7], r.iter().map(|x| x.action[1]).collect()),
        (TRACE_COLUMNS[8], r.iter().map(|x| x.gamma).collect()),
        (TRACE_COLUMNS[9], r.iter().map(|x| x.free_energy).collect()),
        (TRACE_COLUMNS[10], r.iter().map(|x| x.ee_mu[0]).collect()),
        (TRACE_COLUMNS[11], r.iter().map(|x| x.ee_mu[1]).collect()),
        (TRACE_COLUMNS[12], r.iter().map(|x| x.ee_accel_x).collect()),
    ];
    let out = PyDict::new(py);
    for (k, v) in cols {
        out.set_item(k, v)?;
    }
    out.set_item(TRACE_COLUMNS[13], r.iter().map(|x| x.oob).collect::<Vec<_>>())?;
    out.set_item("aborted", trace.aborted)?;
    Ok(out)
}

/// Runs a full experiment (all config keys accepted, e.g. `model_path`,
/// `out_dir`, `run_id`, `trials_per_cell`) and writes its outputs. Returns
/// `(run_dir, summary_csv_text)`.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn run_experiment(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<(PathBuf, String)> {
    let kv = kv_from(config)?;
    let cfg = ExperimentConfig::from_kv(&kv).map_err(py_err)?;
    let (_, dir) = py.detach(|| harness::run_experiment(&cfg)).map_err(py_err)?;
    let summary = std::fs::read_to_string(dir.join("summary.csv")).map_err(|e| py_err(e.into()))?;
    Ok((dir, summary))
}

/// Default values of every flat config key.
#[pyfunction]
fn default_config() -> HashMap<String, String> {
    let kv = ExperimentConfig::default().to_kv();
    let mut out: HashMap<String, String> = kv
        .keys()
        .map(|k| (k.to_string(), kv.get_str(k).unwrap_or_default().to_string()))
        .collect();
    let mut t = KvConfig::new();
    TrainConfig::default().write_kv(&mut t);
    for k in t.keys() {
        out.insert(k.to_string(), t.get_str(k).unwrap_or_default().to_string());
    }
    out
}

#[pymodule]
fn rhi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<VisualModel>()?;
    m.add_function(wrap_pyfunction!(forward_kinematics, m)?)?;
    m.add_function(wrap_pyfunction!(fk_jacobian, m)?)?;
    m.add_function(wrap_pyfunction!(rest_posture, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(event_update, m)?)?;
    m.add_function(wrap_pyfunction!(decay_update, m)?)?;
    m.add_function(wrap_pyfunction!(child_seed, m)?)?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
