//! Python module `pybectra`: lattice losses, metrics, and decoding with a
//! trained model directory.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use bectra::decode::{decode_bectra, Vocabs};
use bectra::harness::pipeline::{load_vocabs, Layout};
use bectra::lattice::{self, FrameLogProbs, LatticeLogProbs, LossStatus};
use bectra::model::ModelParams;
use bectra::numerics::Tensor;
use bectra::training::Checkpoint;

fn py_err(e: bectra::Error) -> PyErr {
    match e {
        bectra::Error::Io(e) => PyIOError::new_err(e.to_string()),
        bectra::Error::MissingArtifact { .. } => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn flatten<T: Copy>(rows: &[Vec<T>]) -> PyResult<(usize, usize, Vec<T>)> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Ok((rows.len(), cols, rows.iter().flatten().copied().collect()))
}

/// CTC negative log-likelihood of `target` under frame log-probabilities
/// (blank is the last column). Returns `(nll, grad, feasible)`.
#[pyfunction]
fn ctc_loss(log_probs: Vec<Vec<f64>>, target: Vec<u32>) -> PyResult<(f64, Vec<Vec<f64>>, bool)> {
    let (frames, classes, data) = flatten(&log_probs)?;
    let lp = FrameLogProbs::new(frames, classes, data).map_err(py_err)?;
    let r = lattice::ctc_loss(&lp, &target).map_err(py_err)?;
    let grad = r.grad.chunks(classes.max(1)).map(<[f64]>::to_vec).collect();
    Ok((r.nll, grad, r.status == LossStatus::Ok))
}

/// Transducer negative log-likelihood; `log_probs[t][u]` is the distribution
/// at frame `t` after `u` labels (blank last).
#[pyfunction]
fn transducer_loss(log_probs: Vec<Vec<Vec<f64>>>, target: Vec<u32>) -> PyResult<f64> {
    let frames = log_probs.len();
    let states = log_probs.first().map_or(0, Vec::len);
    let mut rows = Vec::with_capacity(frames * states);
    for per_frame in &log_probs {
        if per_frame.len() != states {
            return Err(PyValueError::new_err("ragged lattice"));
        }
        rows.extend(per_frame.iter().cloned());
    }
    let (_, classes, data) = flatten(&rows)?;
    let lp = LatticeLogProbs::new(frames, states, classes, data).map_err(py_err)?;
    Ok(lattice::transducer_loss(&lp, &target).map_err(py_err)?.nll)
}

/// Word-level edit counts of `hypothesis` against `reference`.
#[pyfunction]
fn word_errors<'py>(
    py: Python<'py>,
    hypothesis: &str,
    reference: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let c = bectra::harness::metrics::word_errors(hypothesis, reference);
    let d = PyDict::new(py);
    d.set_item("distance", c.distance)?;
    d.set_item("substitutions", c.substitutions)?;
    d.set_item("insertions", c.insertions)?;
    d.set_item("deletions", c.deletions)?;
    d.set_item("reference_len", c.reference_len)?;
    Ok(d)
}

#[pyfunction]
fn mask_count(length: usize, k: usize, total: usize) -> PyResult<usize> {
    bectra::masking::mask_count(length, k, total).map_err(py_err)
}

/// Runs the command-line interface with `argv` (program name first) and
/// returns its exit code.
#[pyfunction]
fn cli(argv: Vec<String>) -> i32 {
    bectra::harness::cli_main(argv)
}

/// A trained model with its vocabularies.
#[pyclass]
struct Recognizer {
    params: ModelParams<f32>,
    vocabs: Vocabs,
    max_symbols: usize,
}

#[pymethods]
impl Recognizer {
    /// Loads `<out_dir>/vocab/*` and a checkpoint (default: the averaged one).
    #[new]
    #[pyo3(signature = (out_dir, checkpoint=None, max_symbols=5))]
    fn new(out_dir: PathBuf, checkpoint: Option<PathBuf>, max_symbols: usize) -> PyResult<Self> {
        let layout = Layout::new(out_dir);
        let vocabs = load_vocabs(&layout).map_err(py_err)?;
        let path = checkpoint.unwrap_or_else(|| layout.averaged());
        let params = Checkpoint::load(&path).map_err(py_err)?.params;
        Ok(Self {
            params,
            vocabs,
            max_symbols,
        })
    }

    /// Decodes a `T × F` feature matrix; returns the text and the refinement
    /// trace as `(k, text, masked)` tuples.
    #[pyo3(signature = (features, iterations=10, beam=5))]
    fn decode(
        &self,
        features: Vec<Vec<f32>>,
        iterations: usize,
        beam: usize,
    ) -> PyResult<(String, Vec<(usize, String, Vec<bool>)>)> {
        let (rows, cols, data) = flatten(&features)?;
        let feats = Tensor::matrix(rows, cols, data).map_err(py_err)?;
        let out = decode_bectra(
            &self.params,
            &self.vocabs,
            &feats,
            iterations,
            beam,
            self.max_symbols,
        )
        .map_err(py_err)?;
        let trace = out
            .refinement
            .trace
            .into_iter()
            .map(|r| (r.k, r.text, r.masked))
            .collect();
        Ok((self.vocabs.asr.detokenize(&out.hypothesis.tokens), trace))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }
}

#[pymodule]
fn pybectra(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(transducer_loss, m)?)?;
    m.add_function(wrap_pyfunction!(word_errors, m)?)?;
    m.add_function(wrap_pyfunction!(mask_count, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add_class::<Recognizer>()?;
    Ok(())
}
