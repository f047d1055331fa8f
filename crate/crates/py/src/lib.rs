//! Python bindings: vocabulary, schedules, feature files, training,
//! sampling and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use pfxd::checkpoint::load_checkpoint;
use pfxd::data::{read_features, toy_dataset, toy_vocabulary, write_features, FeatureRecord};
use pfxd::metrics::{bleu_n, distinct_n, evaluate, vocab_usage};
use pfxd::schedule::{make_schedule, ScheduleKind};
use pfxd::select::{cosine_similarity, Generator as CoreGenerator, ToyTextEncoder};
use pfxd::training::{fit, TrainConfig};
use pfxd::vocab::{detokenize, encode, Vocabulary as CoreVocabulary};
use pfxd::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Vocabulary", module = "pfxd")]
#[derive(Clone)]
struct Vocabulary(CoreVocabulary);

#[pymethods]
impl Vocabulary {
    #[new]
    fn new(words: Vec<String>) -> PyResult<Self> {
        CoreVocabulary::from_words(words).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn toy() -> Self {
        Self(toy_vocabulary())
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreVocabulary::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    fn tokens(&self) -> Vec<String> {
        self.0.tokens().to_vec()
    }

    fn id(&self, token: &str) -> Option<usize> {
        self.0.id(token)
    }

    #[pyo3(signature = (text, k=16))]
    fn encode(&self, text: &str, k: usize) -> PyResult<Vec<usize>> {
        encode(text, &self.0, k)
            .map(|s| s.ids().to_vec())
            .map_err(py_err)
    }

    fn decode(&self, ids: Vec<usize>) -> PyResult<String> {
        let seq = pfxd::vocab::TokenSequence::new(ids, self.0.len()).map_err(py_err)?;
        Ok(detokenize(&seq, &self.0))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Returns `(beta, alpha, alpha_bar)` lists indexed from timestep 1.
#[pyfunction]
#[pyo3(signature = (kind, steps=1000, beta_min=0.01, beta_max=0.03))]
fn schedule(
    kind: &str,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let kind: ScheduleKind = kind.parse().map_err(py_err)?;
    let s = make_schedule(kind, steps, beta_min, beta_max).map_err(py_err)?;
    Ok((
        s.betas().to_vec(),
        s.alphas().to_vec(),
        s.alpha_bars().to_vec(),
    ))
}

type RecordTuple = (String, Vec<f64>, Vec<String>);

fn to_tuples(records: Vec<FeatureRecord>) -> Vec<RecordTuple> {
    records
        .into_iter()
        .map(|r| (r.id, r.feat, r.captions))
        .collect()
}

fn from_tuples(records: Vec<RecordTuple>) -> Vec<FeatureRecord> {
    records
        .into_iter()
        .map(|(id, feat, captions)| FeatureRecord { id, feat, captions })
        .collect()
}

/// Toy scenes as `(id, feature, captions)` tuples.
#[pyfunction]
#[pyo3(signature = (count, seed=0))]
fn toy_records(count: usize, seed: u64) -> Vec<RecordTuple> {
    to_tuples(
        toy_dataset(count, seed)
            .into_iter()
            .map(|(_, r)| r)
            .collect(),
    )
}

#[pyfunction]
fn load_features(path: PathBuf) -> PyResult<Vec<RecordTuple>> {
    read_features(&path).map(to_tuples).map_err(py_err)
}

#[pyfunction]
fn save_features(path: PathBuf, records: Vec<RecordTuple>) -> PyResult<()> {
    write_features(&path, &from_tuples(records)).map_err(py_err)
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Trains on the records and writes a checkpoint. `config` is a JSON object
/// with training keys; omitted keys take their defaults (the tuned desk
/// settings when `tuned`). Returns the final loss.
#[pyfunction]
#[pyo3(signature = (records, vocab, out, config=None, tuned=false))]
fn train(
    py: Python<'_>,
    records: Vec<RecordTuple>,
    vocab: &Vocabulary,
    out: PathBuf,
    config: Option<&str>,
    tuned: bool,
) -> PyResult<Option<f64>> {
    let mut cfg = if tuned {
        TrainConfig::tuned()
    } else {
        TrainConfig::default()
    };
    if let Some(j) = config {
        let bad = |e: serde_json::Error| PyValueError::new_err(e.to_string());
        let mut base = serde_json::to_value(&cfg).map_err(bad)?;
        merge(&mut base, serde_json::from_str(j).map_err(bad)?);
        cfg = serde_json::from_value(base).map_err(bad)?;
    }
    let records = from_tuples(records);
    if let Some(r) = records.first() {
        cfg.model.feat_dim = r.feat.len();
    }
    let vocab = vocab.0.clone();
    let state = py
        .allow_threads(|| fit(&cfg, &records, &vocab, &out))
        .map_err(py_err)?;
    Ok(state.last_loss.map(|l| l.total))
}

#[pyclass(name = "Generator", module = "pfxd")]
struct Generator(CoreGenerator);

#[pymethods]
impl Generator {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(py_err)?;
        CoreGenerator::from_checkpoint(ck).map(Self).map_err(py_err)
    }

    /// Candidate captions for one feature, candidate `i` seeded `seed + i`.
    #[pyo3(signature = (feat, n=5, eval_steps=50, seed=0))]
    fn candidates(
        &self,
        py: Python<'_>,
        feat: Vec<f64>,
        n: usize,
        eval_steps: usize,
        seed: u64,
    ) -> PyResult<Vec<String>> {
        let c = py
            .allow_threads(|| self.0.generate_candidates(&feat, n, eval_steps, seed))
            .map_err(py_err)?;
        Ok(c.into_iter().map(|c| c.caption).collect())
    }

    /// The candidate closest to `feat` under the toy text encoder.
    #[pyo3(signature = (feat, n=5, eval_steps=50, seed=0))]
    fn caption(
        &self,
        py: Python<'_>,
        feat: Vec<f64>,
        n: usize,
        eval_steps: usize,
        seed: u64,
    ) -> PyResult<String> {
        py.allow_threads(|| self.0.caption(&feat, n, eval_steps, seed, &ToyTextEncoder))
            .map(|s| s.chosen().caption.clone())
            .map_err(py_err)
    }

    /// Evaluation report as a dict-shaped JSON string.
    #[pyo3(signature = (records, n=5, eval_steps=50, seed=0))]
    fn evaluate(
        &self,
        py: Python<'_>,
        records: Vec<RecordTuple>,
        n: usize,
        eval_steps: usize,
        seed: u64,
    ) -> PyResult<String> {
        let records = from_tuples(records);
        let ev = py
            .allow_threads(|| {
                evaluate(
                    &self.0,
                    &records,
                    n,
                    eval_steps,
                    seed,
                    &ToyTextEncoder,
                    false,
                )
            })
            .map_err(py_err)?;
        serde_json::to_string(&ev.report).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyfunction]
#[pyo3(signature = (hypotheses, references, max_n=4))]
fn bleu(hypotheses: Vec<String>, references: Vec<Vec<String>>, max_n: usize) -> PyResult<f64> {
    bleu_n(&hypotheses, &references, max_n).map_err(py_err)
}

#[pyfunction]
fn distinct(captions: Vec<String>, n: usize) -> PyResult<f64> {
    distinct_n(&captions, n).map_err(py_err)
}

#[pyfunction]
fn vocabulary_usage(captions: Vec<String>, vocab: &Vocabulary) -> f64 {
    vocab_usage(&captions, &vocab.0)
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    cosine_similarity(&a, &b).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "pfxd")]
fn pfxd_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Generator>()?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(toy_records, m)?)?;
    m.add_function(wrap_pyfunction!(load_features, m)?)?;
    m.add_function(wrap_pyfunction!(save_features, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(distinct, m)?)?;
    m.add_function(wrap_pyfunction!(vocabulary_usage, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    Ok(())
}
