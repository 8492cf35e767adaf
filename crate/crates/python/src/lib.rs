//! Python bindings: corpus generation, training, evaluation, embedding, and
//! the core disentanglement primitives.

use std::collections::BTreeMap;
use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use discover::config::Config;
use discover::error::DiscoverError;
use discover::gadm::{self, TransitionMetric};
use discover::retrieval::{self, SplitPart};
use discover::synthcover::{self, io as corpus_io, split_scenarios, CorpusSplit};
use discover::training;

fn to_py_err(e: DiscoverError) -> PyErr {
    match e {
        DiscoverError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_metric(name: &str) -> PyResult<TransitionMetric> {
    match name {
        "euclidean" => Ok(TransitionMetric::Euclidean),
        "manhattan" => Ok(TransitionMetric::Manhattan),
        "cosine" => Ok(TransitionMetric::Cosine),
        _ => Err(PyValueError::new_err(format!(
            "metric must be euclidean|manhattan|cosine, got {name:?}"
        ))),
    }
}

fn config_from_overrides(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Config> {
    let mut config = Config::default();
    if let Some(dict) = overrides {
        for (key, value) in dict.iter() {
            let key: String = key.extract()?;
            let value: String = value.str()?.extract()?;
            config.set(&key, &value).map_err(to_py_err)?;
        }
    }
    config.validate().map_err(to_py_err)?;
    Ok(config)
}

/// A synthetic cover-song corpus held in memory.
#[pyclass]
struct Corpus {
    inner: synthcover::Corpus,
}

#[pymethods]
impl Corpus {
    /// Generate a corpus from flat config overrides (same keys as the CLI
    /// config files, e.g. {"data.n_songs": "50"}).
    #[staticmethod]
    #[pyo3(signature = (overrides=None))]
    fn generate(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Corpus> {
        let config = config_from_overrides(overrides)?;
        let inner = synthcover::generate_corpus(&config.data).map_err(to_py_err)?;
        Ok(Corpus { inner })
    }

    /// Load a corpus directory written by `discover gen-data` or `save`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Corpus> {
        let inner = corpus_io::load_corpus(Path::new(path)).map_err(to_py_err)?;
        Ok(Corpus { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        corpus_io::save_corpus(&self.inner, Path::new(path)).map_err(to_py_err)
    }

    #[getter]
    fn n_songs(&self) -> usize {
        self.inner.songs.len()
    }

    #[getter]
    fn n_recordings(&self) -> usize {
        self.inner.n_recordings()
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// Train/valid/test recording ids for the configured scenario.
    #[pyo3(signature = (scenario=None))]
    fn split(&self, scenario: Option<u8>) -> PyResult<Split> {
        let d = &self.inner.config;
        let inner = split_scenarios(
            &self.inner,
            d.ratios(),
            scenario.unwrap_or(d.scenario),
            d.seen_fraction,
            d.seed,
        )
        .map_err(to_py_err)?;
        Ok(Split { inner })
    }
}

/// Train/valid/test recording ids for one evaluation scenario.
#[pyclass]
struct Split {
    inner: CorpusSplit,
}

#[pymethods]
impl Split {
    #[getter]
    fn train(&self) -> Vec<u32> {
        self.inner.train.clone()
    }

    #[getter]
    fn valid(&self) -> Vec<u32> {
        self.inner.valid.clone()
    }

    #[getter]
    fn test(&self) -> Vec<u32> {
        self.inner.test.clone()
    }

    #[getter]
    fn scenario(&self) -> u8 {
        self.inner.scenario
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }
}

/// A trained (or initialized) model.
#[pyclass]
struct Model {
    state: training::TrainState,
    history: Vec<training::EpochRecord>,
}

#[pymethods]
impl Model {
    /// Train on a corpus and split; overrides use the flat config keys.
    #[staticmethod]
    #[pyo3(signature = (corpus, split, overrides=None))]
    fn train(
        corpus: &Corpus,
        split: &Split,
        overrides: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Model> {
        let mut config = config_from_overrides(overrides)?;
        config.data = corpus.inner.config.clone();
        let outcome = training::train(&config, &corpus.inner, &split.inner).map_err(to_py_err)?;
        if let Some(msg) = outcome.diverged {
            return Err(PyValueError::new_err(format!("training diverged: {msg}")));
        }
        Ok(Model {
            state: outcome.best_state,
            history: outcome.history,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let state = discover::checkpoint::load(Path::new(path)).map_err(to_py_err)?;
        Ok(Model {
            state,
            history: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        discover::checkpoint::save(&self.state, Path::new(path)).map_err(to_py_err)
    }

    /// Evaluate retrieval on one split part; returns a metrics dict.
    #[pyo3(signature = (corpus, split, part="test"))]
    fn evaluate(
        &self,
        py: Python<'_>,
        corpus: &Corpus,
        split: &Split,
        part: &str,
    ) -> PyResult<PyObject> {
        let part: SplitPart = part.parse().map_err(to_py_err)?;
        let (report, _) =
            retrieval::evaluate(&self.state.encoder, &corpus.inner, &split.inner, part)
                .map_err(to_py_err)?;
        let dict = PyDict::new(py);
        dict.set_item("map", report.map)?;
        dict.set_item("p_at_10", report.p_at_10)?;
        dict.set_item("mr1", report.mr1)?;
        dict.set_item("n_queries", report.n_queries)?;
        dict.set_item("skipped_queries", report.skipped_queries)?;
        dict.set_item("scenario", report.scenario)?;
        dict.set_item("split_digest", report.split_digest)?;
        Ok(dict.into())
    }

    /// Embed recordings by id (all recordings when ids is None).
    #[pyo3(signature = (corpus, ids=None))]
    fn embed(&self, corpus: &Corpus, ids: Option<Vec<u32>>) -> PyResult<Vec<(u32, Vec<f64>)>> {
        let ids = ids.unwrap_or_else(|| {
            corpus
                .inner
                .recordings
                .iter()
                .map(|r| r.recording_id)
                .collect()
        });
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let rep = self
                .state
                .encode_plain(&corpus.inner, &[id])
                .map_err(to_py_err)?;
            out.push((id, rep.into_iter().next().unwrap()));
        }
        Ok(out)
    }

    /// Per-epoch loss terms and validation MAP from the training run.
    fn history(&self, py: Python<'_>) -> PyResult<Vec<PyObject>> {
        let mut out = Vec::with_capacity(self.history.len());
        for record in &self.history {
            let dict = PyDict::new(py);
            dict.set_item("epoch", record.epoch)?;
            dict.set_item("l_task", record.l_task)?;
            dict.set_item("l_trans", record.l_trans)?;
            dict.set_item("l_mi", record.l_mi)?;
            dict.set_item("l_zcls", record.l_zcls)?;
            dict.set_item("l_adv", record.l_adv)?;
            dict.set_item("l_1", record.l_1)?;
            dict.set_item("l_d1", record.l_d1)?;
            dict.set_item("l_q", record.l_q)?;
            dict.set_item("l_2", record.l_2)?;
            dict.set_item("val_map", record.val_map)?;
            out.push(dict.into());
        }
        Ok(out)
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.state.class_of_song.len()
    }
}

/// Metric distance between two representations.
#[pyfunction]
fn transition_cost(x: Vec<f64>, x_plus: Vec<f64>, metric: &str) -> PyResult<f64> {
    gadm::transition_cost(&x, &x_plus, parse_metric(metric)?).map_err(to_py_err)
}

/// Gradient of the transition cost with respect to the first argument;
/// returns (gradient, degenerate_flag).
#[pyfunction]
fn variant_gradient(x: Vec<f64>, x_plus: Vec<f64>, metric: &str) -> PyResult<(Vec<f64>, bool)> {
    let g = gadm::variant_gradient(&x, &x_plus, parse_metric(metric)?).map_err(to_py_err)?;
    Ok((g.g, g.degenerate))
}

/// Softmax-derived attenuation mask over a gradient vector.
#[pyfunction]
fn build_mask(gradient: Vec<f64>, percentile: f64) -> PyResult<Vec<f64>> {
    Ok(gadm::build_mask(&gradient, percentile)
        .map_err(to_py_err)?
        .m)
}

/// Average precision of a ranked relevance pattern (true = relevant).
#[pyfunction]
fn average_precision(ranked_relevance: Vec<bool>, n_relevant: usize) -> PyResult<f64> {
    if n_relevant == 0 {
        return Err(PyValueError::new_err("n_relevant must be positive"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, rel) in ranked_relevance.iter().enumerate() {
        if *rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / n_relevant as f64)
}

/// Default configuration as a flat {key: value} dict.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<PyObject> {
    let dict = PyDict::new(py);
    let snapshot: BTreeMap<String, String> = Config::default().snapshot();
    for (k, v) in snapshot {
        dict.set_item(k, v)?;
    }
    Ok(dict.into())
}

#[pymodule]
fn discover_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Split>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(transition_cost, m)?)?;
    m.add_function(wrap_pyfunction!(variant_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(build_mask, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
