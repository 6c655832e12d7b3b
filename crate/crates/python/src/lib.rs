//! Python module `lst_py`: corpora, training, evaluation and the graph
//! matching solver.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use lst_core::data::{generate, greedy_sample, parse_conll, SynthSpec, TaggedCorpus};
use lst_core::gw::gromov_wasserstein_distances;
use lst_core::pipeline::{self, predict_tags, Checkpoint, TrainConfig};
use lst_core::{GwSettings, LabelGraph, Matrix};

fn err(e: lst_core::Error) -> PyErr {
    match e {
        lst_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn config(json: Option<&str>) -> PyResult<TrainConfig> {
    match json {
        Some(text) => TrainConfig::from_json(text).map_err(err),
        None => Ok(TrainConfig::default()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

/// A BIO-tagged corpus.
#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: TaggedCorpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_conll(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Self::parse(&text)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.label_set.clone()
    }

    #[getter]
    fn repairs(&self) -> usize {
        self.inner.repairs
    }

    fn sentences(&self) -> Vec<(Vec<String>, Vec<String>)> {
        self.inner
            .sentences
            .iter()
            .map(|s| (s.tokens.clone(), s.tags.clone()))
            .collect()
    }

    fn to_conll(&self) -> String {
        self.inner.to_conll()
    }

    fn sample(&self, k: usize, seed: u64) -> Self {
        Self {
            inner: greedy_sample(&self.inner, k, seed),
        }
    }
}

/// A trained tagger checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.tagger.labels().to_vec()
    }

    #[getter]
    fn is_target(&self) -> bool {
        self.inner.kind == pipeline::CheckpointKind::Target
    }

    fn sha256(&self) -> PyResult<String> {
        self.inner.sha256().map_err(err)
    }

    /// Source label graph as export JSON, if this is a fine-tuned model.
    fn source_graph_json(&self) -> Option<String> {
        self.inner.tagger.source_graph.as_ref().map(|g| g.to_export_json())
    }

    fn predict(&self, tokens: Vec<String>) -> PyResult<Vec<String>> {
        let t = &self.inner.tagger;
        let adjacency = t.fusion_adjacency().map_err(err)?;
        predict_tags(t, &tokens, adjacency.as_ref()).map_err(err)
    }

    /// Micro precision, recall and F1 as a JSON string.
    fn evaluate(&self, corpus: &PyCorpus) -> PyResult<String> {
        let m = pipeline::evaluate(&self.inner.tagger, &corpus.inner).map_err(err)?;
        serde_json::to_string(&m).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyfunction]
#[pyo3(signature = (corpus, config_json=None))]
fn train_source(corpus: &PyCorpus, config_json: Option<&str>) -> PyResult<PyModel> {
    let (ck, _) = pipeline::train_source(&corpus.inner, &config(config_json)?).map_err(err)?;
    Ok(PyModel { inner: ck })
}

#[pyfunction]
#[pyo3(signature = (source, corpus, config_json=None))]
fn finetune(source: &PyModel, corpus: &PyCorpus, config_json: Option<&str>) -> PyResult<PyModel> {
    let out = pipeline::finetune(&source.inner.tagger, &corpus.inner, &config(config_json)?)
        .map_err(err)?;
    Ok(PyModel {
        inner: out.checkpoint,
    })
}

/// Synthetic corpora keyed by split name.
#[pyfunction]
#[pyo3(signature = (spec_json=None))]
fn synth(spec_json: Option<&str>) -> PyResult<Vec<(String, PyCorpus)>> {
    let spec: SynthSpec = match spec_json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SynthSpec::default(),
    };
    let c = generate(&spec).map_err(err)?;
    Ok(vec![
        ("source_train".into(), PyCorpus { inner: c.source_train }),
        ("target_train".into(), PyCorpus { inner: c.target_train }),
        ("target_dev".into(), PyCorpus { inner: c.target_dev }),
        ("target_test".into(), PyCorpus { inner: c.target_test }),
    ])
}

/// Label graph export JSON from probability rows.
#[pyfunction]
#[pyo3(signature = (labels, rows, threshold=1.5))]
fn label_graph(labels: Vec<String>, rows: Vec<Vec<f64>>, threshold: f64) -> PyResult<String> {
    let g = LabelGraph::build(labels, &matrix(rows)?, threshold).map_err(err)?;
    Ok(g.to_export_json())
}

/// Gromov-Wasserstein value and transport plan between two distance matrices.
#[pyfunction]
#[pyo3(signature = (d_s, d_t, epsilon=0.05, outer_iter=20, inner_iter=200, tol=1e-6, restarts=true))]
fn gromov_wasserstein(
    d_s: Vec<Vec<f64>>,
    d_t: Vec<Vec<f64>>,
    epsilon: f64,
    outer_iter: usize,
    inner_iter: usize,
    tol: f64,
    restarts: bool,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let settings = GwSettings {
        epsilon,
        outer_iter,
        inner_iter,
        tol,
        anchored_restarts: restarts,
    };
    let res = gromov_wasserstein_distances(&matrix(d_s)?, &matrix(d_t)?, &settings).map_err(err)?;
    Ok((res.value, res.plan.matrix.to_rows()))
}

#[pymodule]
fn lst_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_source, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(label_graph, m)?)?;
    m.add_function(wrap_pyfunction!(gromov_wasserstein, m)?)?;
    Ok(())
}
