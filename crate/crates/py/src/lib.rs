//! Python module `firesense`: datasets, models, training, evaluation and
//! the analysis tools. Arrays cross the boundary as flat lists.

use std::collections::HashMap;
use std::path::PathBuf;

use firesense_core::analysis::{copy_prev_probs, export_attention, importance_report, mc_predict};
use firesense_core::checks::run_suite;
use firesense_core::config::RunConfig;
use firesense_core::data::{self, generate_synthetic, split, Direction, SyntheticConfig, N_CHANNELS};
use firesense_core::eval::{self, MetricsReport, Protocol};
use firesense_core::losses::{composite_loss, LossConfig};
use firesense_core::prepared::{predict, Preprocessing, PreparedSet};
use firesense_core::train::{init_seed, Checkpoint, Trainer};
use firesense_core::{Graph, Mode, ModelInstance, Pcg32, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn data_err(e: data::DataError) -> PyErr {
    match e {
        data::DataError::Io(io) => PyIOError::new_err(io.to_string()),
        other => value_err(other),
    }
}

fn train_err(e: firesense_core::train::TrainError) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        value_err(e)
    }
}

fn protocol(name: &str) -> PyResult<Protocol> {
    name.parse().map_err(value_err)
}

/// Samples of 12 input channels plus a {-1, 0, 1} label raster.
#[pyclass(name = "Dataset", module = "firesense", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Deterministic synthetic patches.
    #[staticmethod]
    #[pyo3(signature = (n, seed=0, size=64, spread_bias="E", unknown_prob=0.05))]
    fn synthetic(n: usize, seed: u64, size: usize, spread_bias: &str, unknown_prob: f64) -> PyResult<Self> {
        let spread_bias: Direction = spread_bias.parse().map_err(value_err)?;
        let cfg = SyntheticConfig { h: size, w: size, spread_bias, unknown_prob };
        Ok(Self { inner: generate_synthetic(n, seed, &cfg) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: data::read_file(path).map_err(data_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::write_file(&self.inner, path).map_err(data_err)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        data::encode(&self.inner).map_err(data_err)
    }

    #[staticmethod]
    fn from_bytes(bytes: Vec<u8>) -> PyResult<Self> {
        Ok(Self { inner: data::decode(&bytes).map_err(data_err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn h(&self) -> usize {
        self.inner.h
    }

    #[getter]
    fn w(&self) -> usize {
        self.inner.w
    }

    fn ids(&self) -> Vec<u64> {
        self.inner.samples.iter().map(|s| s.id).collect()
    }

    fn channel(&self, index: usize, channel: usize) -> PyResult<Vec<f32>> {
        let s = self.inner.samples.get(index).ok_or_else(|| value_err("sample index out of range"))?;
        if channel >= N_CHANNELS {
            return Err(value_err("channel index out of range"));
        }
        Ok(s.channel(channel, self.inner.hw()).to_vec())
    }

    fn labels(&self, index: usize) -> PyResult<Vec<i8>> {
        let s = self.inner.samples.get(index).ok_or_else(|| value_err("sample index out of range"))?;
        Ok(s.y.clone())
    }

    /// Seeded 8:1:1 split into `(train, val, test)`.
    fn split(&self, seed: u64) -> PyResult<(Self, Self, Self)> {
        let s = split(self.inner.len(), seed).map_err(data_err)?;
        let part = |idx: &[usize]| Self { inner: self.inner.subset(idx) };
        Ok((part(&s.train), part(&s.val), part(&s.test)))
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, h={}, w={})", self.inner.len(), self.inner.h, self.inner.w)
    }
}

/// A network together with the preprocessing it was trained with.
#[pyclass(name = "Model", module = "firesense")]
struct PyModel {
    inner: ModelInstance<f32>,
    prep: Option<Preprocessing>,
}

impl PyModel {
    fn prepared(&self, ds: &PyDataset) -> PyResult<PreparedSet> {
        let prep = self
            .prep
            .as_ref()
            .ok_or_else(|| value_err("model has no preprocessing; train it or load a checkpoint"))?;
        prep.apply(&ds.inner).map_err(data_err)
    }

    fn single(&self, ds: &PyDataset, index: usize) -> PyResult<Tensor<f32>> {
        let set = self.prepared(ds)?;
        if index >= set.len() {
            return Err(value_err("sample index out of range"));
        }
        Tensor::new(vec![N_CHANNELS, set.h, set.w], set.sample_x(index).to_vec()).map_err(value_err)
    }
}

#[pymethods]
impl PyModel {
    /// Freshly initialized network. `config` uses the `key=value` run format.
    #[new]
    #[pyo3(signature = (config="", seed=0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let run = RunConfig::from_text(config).map_err(value_err)?;
        let inner = ModelInstance::build(run.model, init_seed(seed)).map_err(value_err)?;
        Ok(Self { inner, prep: None })
    }

    /// Best-validation weights of a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(train_err)?;
        Ok(Self {
            inner: ck.best_model().map_err(train_err)?,
            prep: ck.preprocessing(),
        })
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.config.arch.to_string()
    }

    fn param_count(&self) -> PyResult<u64> {
        Ok(self.inner.count_params().map_err(value_err)?.total_params)
    }

    #[pyo3(signature = (h=64, w=64))]
    fn flops(&self, h: usize, w: usize) -> PyResult<u64> {
        Ok(self.inner.count_flops(h, w).map_err(value_err)?.total_flops)
    }

    /// Per-layer `(name, kind, params, flops)` rows.
    #[pyo3(signature = (h=64, w=64))]
    fn cost_table(&self, h: usize, w: usize) -> PyResult<Vec<(String, String, u64, u64)>> {
        let t = self.inner.count_flops(h, w).map_err(value_err)?;
        Ok(t.rows.into_iter().map(|r| (r.name, r.kind.to_string(), r.params, r.flops)).collect())
    }

    /// Fire probabilities for every pixel of every sample, sample-major.
    #[pyo3(signature = (dataset, batch=16))]
    fn predict(&self, dataset: &PyDataset, batch: usize) -> PyResult<Vec<f32>> {
        let set = self.prepared(dataset)?;
        predict(&self.inner, &set, batch.max(1)).map_err(value_err)
    }

    /// Best-threshold metrics under `protocol` ("clean" or "inflated").
    #[pyo3(signature = (dataset, protocol="clean", batch=16))]
    fn evaluate(&self, dataset: &PyDataset, protocol: &str, batch: usize) -> PyResult<HashMap<String, f64>> {
        let set = self.prepared(dataset)?;
        let probs = predict(&self.inner, &set, batch.max(1)).map_err(value_err)?;
        metrics(&probs, &set.prev, &set.y, protocol, None)
    }

    /// MC-dropout `(mean, std)` rasters for one sample.
    #[pyo3(signature = (dataset, index, passes=20, seed=0))]
    fn uncertainty(&self, dataset: &PyDataset, index: usize, passes: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let u = mc_predict(&self.inner, &self.single(dataset, index)?, passes, seed).map_err(value_err)?;
        Ok((u.mean, u.std))
    }

    /// The three attention gates for one sample, finest first.
    fn attention(&self, dataset: &PyDataset, index: usize) -> PyResult<Vec<Vec<f32>>> {
        let maps = export_attention(&self.inner, &self.single(dataset, index)?).map_err(value_err)?;
        Ok(maps.into_iter().map(|r| r.data).collect())
    }

    /// `(channel name, delta F1)` per input channel.
    #[pyo3(signature = (dataset, threshold=None, batch=16))]
    fn importance(&self, dataset: &PyDataset, threshold: Option<f64>, batch: usize) -> PyResult<Vec<(String, f64)>> {
        let set = self.prepared(dataset)?;
        let stats = &self.prep.as_ref().expect("prepared() checked this").stats;
        let r = importance_report(&self.inner, &set, stats, threshold, batch.max(1)).map_err(value_err)?;
        Ok(r.rows.into_iter().map(|row| (row.name.to_string(), row.delta_f1)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(arch={})", self.inner.config.arch)
    }
}

fn metrics(probs: &[f32], prev: &[bool], y: &[i8], protocol_name: &str, threshold: Option<f64>) -> PyResult<HashMap<String, f64>> {
    let p = protocol(protocol_name)?;
    let m = match threshold {
        Some(t) => MetricsReport::at_threshold(probs, prev, y, p, t),
        None => eval::evaluate(probs, prev, y, p).map(|(m, _)| m),
    }
    .map_err(value_err)?;
    let c = m.confusion;
    Ok(HashMap::from([
        ("threshold".to_string(), m.threshold),
        ("precision".to_string(), m.precision),
        ("recall".to_string(), m.recall),
        ("f1".to_string(), m.f1),
        ("auc_pr".to_string(), m.auc_pr.unwrap_or(f64::NAN)),
        ("tp".to_string(), c.tp as f64),
        ("fp".to_string(), c.fp as f64),
        ("fn".to_string(), c.fn_ as f64),
        ("tn".to_string(), c.tn as f64),
    ]))
}

/// Train on `train`, early-stopping on `val`. Returns the best model and
/// the per-epoch history as dicts.
#[pyfunction]
#[pyo3(signature = (train, val, config=""))]
fn train(train: &PyDataset, val: &PyDataset, config: &str) -> PyResult<(PyModel, Vec<HashMap<String, f64>>)> {
    let run = RunConfig::from_text(config).map_err(value_err)?;
    let prep = Preprocessing::fit(&train.inner, run.smoothing).map_err(data_err)?;
    let (tr, va) = (
        prep.apply(&train.inner).map_err(data_err)?,
        prep.apply(&val.inner).map_err(data_err)?,
    );
    let model = ModelInstance::build(run.model, init_seed(run.train.seed)).map_err(value_err)?;
    let mut t = Trainer::new(model, run.train).map_err(train_err)?;
    t.run(&tr, &va).map_err(train_err)?;
    let (best, outcome) = t.finish();
    let history = outcome
        .history
        .iter()
        .map(|r| {
            HashMap::from([
                ("epoch".to_string(), r.epoch as f64),
                ("lr".to_string(), r.lr),
                ("loss".to_string(), r.loss),
                ("wbce".to_string(), r.wbce),
                ("dice".to_string(), r.dice),
                ("focal".to_string(), r.focal),
                ("val_f1".to_string(), r.val_f1),
            ])
        })
        .collect();
    Ok((PyModel { inner: best, prep: Some(prep) }, history))
}

/// Metrics of arbitrary probabilities against labels and the previous-day mask.
#[pyfunction]
#[pyo3(signature = (probs, prev, target, protocol="clean", threshold=None))]
fn evaluate(probs: Vec<f32>, prev: Vec<bool>, target: Vec<i8>, protocol: &str, threshold: Option<f64>) -> PyResult<HashMap<String, f64>> {
    metrics(&probs, &prev, &target, protocol, threshold)
}

/// `(clean F1, inflated F1, inflation %)`, the percentage `None` when clean F1 is 0.
#[pyfunction]
fn inflation_audit(probs: Vec<f32>, prev: Vec<bool>, target: Vec<i8>) -> PyResult<(f64, f64, Option<f64>)> {
    let r = eval::inflation_audit("model", &probs, &prev, &target).map_err(value_err)?;
    Ok((r.clean.f1, r.inflated.f1, r.inflation_pct))
}

/// Copy-previous-mask predictions with the matching `(prev, target)` rasters.
#[pyfunction]
fn copy_prev(dataset: &PyDataset) -> PyResult<(Vec<f32>, Vec<bool>, Vec<i8>)> {
    let prep = Preprocessing {
        stats: data::NormStats {
            mean: vec![0.0; N_CHANNELS],
            std: vec![1.0; N_CHANNELS],
        },
        smoothing: data::Smoothing::none(),
    };
    let set = prep.apply(&dataset.inner).map_err(data_err)?;
    Ok((copy_prev_probs(&set), set.prev, set.y))
}

/// Composite loss terms of `[n, 1, h, w]` logits against soft targets
/// (negative target = masked).
#[pyfunction]
#[pyo3(signature = (logits, targets, n, h, w, config=""))]
fn loss(logits: Vec<f64>, targets: Vec<f64>, n: usize, h: usize, w: usize, config: &str) -> PyResult<HashMap<String, f64>> {
    let cfg: LossConfig = RunConfig::from_text(config).map_err(value_err)?.train.loss;
    let shape = vec![n, 1, h, w];
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::new(shape.clone(), logits).map_err(value_err)?);
    let t = Tensor::new(shape, targets).map_err(value_err)?;
    let l = composite_loss(&mut g, z, &t, &cfg).map_err(value_err)?;
    let v = l.values(&g);
    Ok(HashMap::from([
        ("total".to_string(), v.total),
        ("wbce".to_string(), v.wbce),
        ("dice".to_string(), v.dice),
        ("focal".to_string(), v.focal),
    ]))
}

/// `(family, max relative error, passed)` for every op family.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let rows = run_suite(seed).map_err(value_err)?;
    Ok(rows.into_iter().map(|r| {
        let ok = r.passed();
        (r.family, r.report.max_rel_error, ok)
    }).collect())
}

/// Sigmoid probabilities of a raw `[n, 12, h, w]` normalized input.
#[pyfunction]
fn forward(model: &PyModel, x: Vec<f32>, n: usize, h: usize, w: usize) -> PyResult<Vec<f32>> {
    let x = Tensor::new(vec![n, N_CHANNELS, h, w], x).map_err(value_err)?;
    let p = model.inner.predict_probs(&x, Mode::Eval, &mut Pcg32::new(0)).map_err(value_err)?;
    Ok(p.data().to_vec())
}

#[pymodule]
fn firesense(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(inflation_audit, m)?)?;
    m.add_function(wrap_pyfunction!(copy_prev, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add("CHANNEL_NAMES", data::CHANNEL_NAMES.to_vec())?;
    Ok(())
}
