//! `tsembed`: Python access to the embedding pipeline.
//!
//! Tensors cross the boundary as nested lists (`[rows][cols]`), vectors as
//! flat lists. Reports come back as dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;
use test_embed::data::{load_dataset, save_dataset};
use test_embed::prototypes::{fixed_word_prototypes, nearest_words, pca_prototypes, prototype_coords};
use test_embed::synth::{self, Suite};
use test_embed::{contrast, pipeline, promptlm, Checkpoint, RunConfig, Segments, Tape, Tensor};

fn err(e: test_embed::Error) -> PyErr {
    match e {
        test_embed::Error::Io(_) | test_embed::Error::File { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A frozen vocabulary embedding matrix with token names.
#[pyclass(name = "Vocab", module = "tsembed")]
struct PyVocab {
    inner: test_embed::VocabMatrix,
}

#[pymethods]
impl PyVocab {
    #[staticmethod]
    fn synthetic(size: usize, width: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: test_embed::VocabMatrix::synthetic(size, width, seed).map_err(err)? })
    }

    /// The built-in vocabulary used when a config names none.
    #[staticmethod]
    fn builtin(width: usize) -> PyResult<Self> {
        Ok(Self { inner: pipeline::default_vocab(width).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: test_embed::VocabMatrix::load(path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn embedding(&self, word: &str) -> PyResult<Vec<f32>> {
        Ok(self.inner.row(word).map_err(err)?.to_vec())
    }

    /// `n` most cosine-similar tokens as `(word, cosine)` pairs.
    fn nearest(&self, e: Vec<f32>, n: usize) -> PyResult<Vec<(String, f32)>> {
        nearest_words(&Tensor::vector(e), &self.inner, n).map_err(err)
    }

    /// Top-`k` principal directions, `[k][width]`.
    fn pca_prototypes(&self, k: usize) -> PyResult<Vec<Vec<f32>>> {
        Ok(rows(&pca_prototypes(&self.inner, k).map_err(err)?.vectors))
    }

    fn word_prototypes(&self, words: Vec<String>) -> PyResult<Vec<Vec<f32>>> {
        Ok(rows(&fixed_word_prototypes(&self.inner, &words).map_err(err)?.vectors))
    }

    fn __repr__(&self) -> String {
        format!("Vocab(size={}, width={})", self.inner.len(), self.inner.width())
    }
}

/// Trained causal convolutional encoder.
#[pyclass(name = "Encoder", module = "tsembed")]
struct PyEncoder {
    inner: test_embed::Encoder,
}

#[pymethods]
impl PyEncoder {
    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    /// Embedding of one token given as `[channels][steps]`.
    fn encode(&self, token: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
        Ok(self.inner.encode(&matrix(token)?).map_err(err)?.into_data())
    }

    /// Output at every step, `[embed_dim][steps]`.
    fn encode_steps(&self, token: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        Ok(rows(&self.inner.encode_steps(&matrix(token)?).map_err(err)?))
    }
}

/// The frozen toy language model.
#[pyclass(name = "FrozenLM", module = "tsembed")]
struct PyFrozenLM {
    inner: promptlm::FrozenLM,
}

#[pymethods]
impl PyFrozenLM {
    #[staticmethod]
    fn builtin(width: usize) -> PyResult<Self> {
        Ok(Self { inner: pipeline::default_lm(width).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: promptlm::FrozenLM::load(path).map_err(err)? })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Runs one sequence `[steps][width]` through the layers.
    fn forward(&self, x: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let x = matrix(x)?;
        let n = x.rows();
        let mut tape = Tape::new();
        let vars = self.inner.bind(&mut tape);
        let xv = tape.constant(x);
        let y = self.inner.forward(&mut tape, &vars, xv, &Segments::single(n)).map_err(err)?;
        Ok(rows(tape.value(y)))
    }
}

/// A phase-1 or phase-2 checkpoint.
#[pyclass(name = "Checkpoint", module = "tsembed")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn phase(&self) -> PyResult<u32> {
        self.inner.phase().map_err(err)
    }

    /// The configuration text stored with the encoder.
    #[getter]
    fn config(&self) -> PyResult<String> {
        Ok(self.inner.config().map_err(err)?.to_text())
    }

    /// SHA-256 of the records under `prefix` (all records by default).
    #[pyo3(signature = (prefix = ""))]
    fn checksum(&self, prefix: &str) -> String {
        self.inner.container.checksum(prefix)
    }

    fn encoder(&self) -> PyResult<PyEncoder> {
        Ok(PyEncoder { inner: self.inner.encoder().map_err(err)? })
    }

    fn evaluate<'py>(&self, py: Python<'py>, data: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let ds = load_dataset(data).map_err(err)?;
        to_py(py, &pipeline::evaluate(&self.inner, &ds).map_err(err)?)
    }

    fn match_words<'py>(&self, py: Python<'py>, data: PathBuf, vocab: &PyVocab, n: usize) -> PyResult<Bound<'py, PyAny>> {
        let ds = load_dataset(data).map_err(err)?;
        to_py(py, &pipeline::match_words(&self.inner, &ds, &vocab.inner, n).map_err(err)?)
    }
}

/// Writes a synthetic suite (`"cls3"` or `"ar2"`); returns the series count.
#[pyfunction]
#[pyo3(signature = (suite, out, seed = 0))]
fn gen_data(suite: &str, out: PathBuf, seed: u64) -> PyResult<usize> {
    let suite: Suite = suite.parse().map_err(err)?;
    let ds = synth::generate(suite, seed).map_err(err)?;
    save_dataset(out, &ds).map_err(err)?;
    Ok(ds.len())
}

fn events<'py>(py: Python<'py>, log: Vec<Value>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &log)
}

/// Phase 1 from a config file. Returns `(checkpoint, events)`.
#[pyfunction]
fn train_encoder<'py>(py: Python<'py>, config: PathBuf) -> PyResult<(PyCheckpoint, Bound<'py, PyAny>)> {
    let cfg = RunConfig::load(config).map_err(err)?;
    let mut log = Vec::new();
    let ck = pipeline::train_phase1(&cfg, &mut |e| log.push(serde_json::to_value(e).unwrap_or(Value::Null)))
        .map_err(err)?;
    Ok((PyCheckpoint { inner: ck }, events(py, log)?))
}

/// Phase 2 on top of a phase-1 checkpoint. Returns `(checkpoint, events)`.
#[pyfunction]
fn train_prompt<'py>(py: Python<'py>, config: PathBuf, encoder: &PyCheckpoint) -> PyResult<(PyCheckpoint, Bound<'py, PyAny>)> {
    let cfg = RunConfig::load(config).map_err(err)?;
    let mut log = Vec::new();
    let ck = pipeline::train_phase2(&cfg, &encoder.inner, &mut |e| {
        log.push(serde_json::to_value(e).unwrap_or(Value::Null))
    })
    .map_err(err)?;
    Ok((PyCheckpoint { inner: ck }, events(py, log)?))
}

/// Coordinates of `e` along each prototype row.
#[pyfunction]
fn prototype_coordinates(e: Vec<f32>, prototypes: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
    let tp = test_embed::PrototypeSet::new(matrix(prototypes)?).map_err(err)?;
    Ok(prototype_coords(&Tensor::vector(e), &tp).map_err(err)?.into_data())
}

fn scalar_loss(f: impl FnOnce(&mut Tape) -> test_embed::Result<test_embed::Var>) -> PyResult<f32> {
    let mut tape = Tape::new();
    let v = f(&mut tape).map_err(err)?;
    Ok(tape.value(v).item())
}

/// Instance-wise InfoNCE of queries against positive keys and negatives.
#[pyfunction]
#[pyo3(signature = (q, k, negatives, tau = 0.1))]
fn instance_loss(q: Vec<Vec<f32>>, k: Vec<Vec<f32>>, negatives: Vec<Vec<f32>>, tau: f32) -> PyResult<f32> {
    let (q, k, n) = (matrix(q)?, matrix(k)?, matrix(negatives)?);
    scalar_loss(|t| {
        let (q, k, n) = (t.constant(q), t.constant(k), t.constant(n));
        contrast::instance_loss_projected(t, q, k, n, tau)
    })
}

/// Feature-wise contrast over embedding columns.
#[pyfunction]
#[pyo3(signature = (weak, strong, negatives, tau = 0.5))]
fn feature_loss(weak: Vec<Vec<f32>>, strong: Vec<Vec<f32>>, negatives: Vec<Vec<f32>>, tau: f32) -> PyResult<f32> {
    let (w, s, n) = (matrix(weak)?, matrix(strong)?, matrix(negatives)?);
    scalar_loss(|t| {
        let (w, s, n) = (t.constant(w), t.constant(s), t.constant(n));
        contrast::feature_loss(t, w, s, n, tau)
    })
}

/// `−mean cos(tp, e)`.
#[pyfunction]
fn text_alignment(e: Vec<Vec<f32>>, prototypes: Vec<Vec<f32>>) -> PyResult<f32> {
    let (e, tp) = (matrix(e)?, matrix(prototypes)?);
    scalar_loss(|t| {
        let e = t.constant(e);
        contrast::text_alignment(t, e, &tp)
    })
}

#[pymodule]
fn tsembed(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyFrozenLM>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_encoder, m)?)?;
    m.add_function(wrap_pyfunction!(train_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(prototype_coordinates, m)?)?;
    m.add_function(wrap_pyfunction!(instance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(feature_loss, m)?)?;
    m.add_function(wrap_pyfunction!(text_alignment, m)?)?;
    Ok(())
}
