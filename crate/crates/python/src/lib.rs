//! Python bindings for `iospe`.
//!
//! Records such as products, selling points and log events cross the
//! boundary as plain dicts with the same field names as the JSONL formats.

use std::path::PathBuf;

use chrono::{DateTime, Utc};
use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use iospe::corpus::{HumanSellingPoint, ProductRecord};
use iospe::generator::{self, DecodeConfig, DecodeMode, GeneratorHyper, GeneratorModel};
use iospe::personalization::{self, CustomerProfile, EmbeddingTable};
use iospe::pipeline::{self, AssignRequest, Models, PipelineConfig, SellingPoint, Snapshot};
use iospe::screener::{self, ScreenerHyper, ScreenerModel};
use iospe::supervision::{self, EventRecord, TimeWindow};
use iospe::synthetic::{self, RewritePair};

fn err(e: iospe::Error) -> PyErr {
    match e {
        iospe::Error::NotFound(m) => PyKeyError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn window(start: Option<&str>, end: Option<&str>) -> PyResult<TimeWindow> {
    let parse = |s: &str| {
        DateTime::parse_from_rfc3339(s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| PyValueError::new_err(format!("invalid timestamp {s:?}: {e}")))
    };
    Ok(TimeWindow {
        start: start.map(parse).transpose()?,
        end: end.map(parse).transpose()?,
    })
}

const COARSE_FILE: &str = "coarse.json";
const GENERATOR_FILE: &str = "generator.json";
const FINE_FILE: &str = "fine.json";
const EMBEDDINGS_FILE: &str = "embeddings.txt";

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    iospe::corpus::tokenize(text)
}

#[pyfunction]
#[pyo3(signature = (text, split_commas = false))]
fn split_sentences(text: &str, split_commas: bool) -> Vec<String> {
    iospe::corpus::split_sentences(text, split_commas)
}

#[pyfunction]
fn normalize_text(text: &str) -> String {
    iospe::corpus::normalize_text(text)
}

#[pyfunction]
fn relative_increase(base_clk: f64, base_exp: f64, ctrl_clk: f64, ctrl_exp: f64) -> PyResult<f64> {
    supervision::relative_increase(base_clk, base_exp, ctrl_clk, ctrl_exp).map_err(err)
}

/// Segment name for a stream key: baseline, experimental, core or transition.
#[pyfunction]
fn split_stream(py: Python<'_>, key: &str) -> PyResult<String> {
    to_py(py, &supervision::split_stream(key))?.extract()
}

#[pyfunction]
fn stream_bucket(key: &str) -> u64 {
    supervision::stream_bucket(key)
}

#[pyfunction]
fn cosine_similarity(h: Vec<f64>, g: Vec<f64>) -> PyResult<f64> {
    personalization::cosine_similarity(&h, &g).map_err(err)
}

#[pyfunction]
fn selling_point_id(sku_id: &str, text: &str) -> String {
    pipeline::selling_point_id(sku_id, text)
}

/// Aggregates log events per selling point; inconsistent keys are dropped.
#[pyfunction]
#[pyo3(signature = (events, start = None, end = None))]
fn aggregate<'py>(
    events: &Bound<'py, PyAny>,
    start: Option<&str>,
    end: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let records: Vec<EventRecord> = from_py(events)?;
    let out = supervision::aggregate(&records, &window(start, end)?);
    to_py(events.py(), &out.aggregates)
}

#[pyfunction]
fn pool_load(py: Python<'_>, path: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &pipeline::pool_load(path).map_err(err)?)
}

#[pyfunction]
fn pool_save(pool: &Bound<'_, PyAny>, path: PathBuf) -> PyResult<()> {
    let pool: Vec<SellingPoint> = from_py(pool)?;
    pipeline::pool_save(&pool, path).map_err(err)
}

/// Deterministic synthetic corpus as a dict of record lists.
#[pyfunction]
#[pyo3(signature = (n_products = 200, seed = 2024))]
fn synthetic_corpus(py: Python<'_>, n_products: usize, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    let c = synthetic::product_corpus(n_products, seed);
    let out = pyo3::types::PyDict::new(py);
    out.set_item("products", to_py(py, &c.products)?)?;
    out.set_item("human_selling_points", to_py(py, &c.human_selling_points)?)?;
    out.set_item("pairs", to_py(py, &c.pairs)?)?;
    out.set_item("profiles", to_py(py, &c.profiles)?)?;
    Ok(out.into_any())
}

#[pyclass(name = "Screener", module = "iospe", skip_from_py_object)]
#[derive(Clone)]
struct PyScreener {
    inner: ScreenerModel,
}

#[pymethods]
impl PyScreener {
    /// Trains a fresh screener. `hyper` takes the same keys as the
    /// `screener` section of the pipeline config.
    #[staticmethod]
    #[pyo3(signature = (positives, negatives, hyper = None))]
    fn train(positives: Vec<String>, negatives: Vec<String>, hyper: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let hyper: ScreenerHyper = hyper.map(from_py).transpose()?.unwrap_or_default();
        let inner = screener::train_screener(&positives, &negatives, &hyper).map_err(err)?;
        Ok(PyScreener { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyScreener {
            inner: ScreenerModel::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn score(&self, text: &str) -> PyResult<f64> {
        self.inner.score(text).map_err(err)
    }

    /// Top `k` texts as `(text, score)`, best first; unscoreable texts are skipped.
    fn rank(&self, texts: Vec<String>, k: usize) -> Vec<(String, f64)> {
        screener::rank_top_k(&self.inner, &texts, k)
            .into_iter()
            .map(|c| (c.candidate, c.score))
            .collect()
    }

    fn fine_tune(&mut self, positives: Vec<String>, negatives: Vec<String>, epochs: usize, lr: f64) -> PyResult<Vec<f64>> {
        self.inner.fine_tune(&positives, &negatives, epochs, lr).map_err(err)
    }

    fn save_embeddings(&self, path: PathBuf) -> PyResult<()> {
        EmbeddingTable::from_screener(&self.inner).save(path).map_err(err)
    }
}

#[pyclass(name = "Generator", module = "iospe", skip_from_py_object)]
#[derive(Clone)]
struct PyGenerator {
    inner: GeneratorModel,
}

#[pymethods]
impl PyGenerator {
    /// Trains on `(source, target)` pairs. `hyper` takes the keys of the
    /// `generator` config section.
    #[staticmethod]
    #[pyo3(signature = (pairs, hyper = None))]
    fn train(pairs: Vec<(String, String)>, hyper: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let hyper: GeneratorHyper = hyper.map(from_py).transpose()?.unwrap_or_default();
        Ok(PyGenerator {
            inner: generator::train_generator(&pairs, &hyper).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGenerator {
            inner: GeneratorModel::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[pyo3(signature = (text, mode = "greedy", beam_width = 4, max_len = 16))]
    fn generate(&self, text: &str, mode: &str, beam_width: usize, max_len: usize) -> PyResult<String> {
        let mode = match mode {
            "greedy" => DecodeMode::Greedy,
            "beam" => DecodeMode::Beam,
            other => return Err(PyValueError::new_err(format!("unknown decode mode {other:?}"))),
        };
        let cfg = DecodeConfig {
            mode,
            beam_width,
            max_len,
            ..DecodeConfig::default()
        };
        generator::generate(&self.inner, text, &cfg).map_err(err)
    }
}

/// Trained coarse screener, generator and fine screener plus the config
/// that drives extraction.
#[pyclass(name = "Pipeline", module = "iospe")]
struct PyPipeline {
    config: PipelineConfig,
    models: Option<Models>,
}

impl PyPipeline {
    fn models(&self) -> PyResult<&Models> {
        self.models
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("pipeline has no models; call train or load first"))
    }
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config = None, seed = None))]
    fn new(config: Option<&Bound<'_, PyAny>>, seed: Option<u64>) -> PyResult<Self> {
        let mut config: PipelineConfig = config.map(from_py).transpose()?.unwrap_or_default();
        if let Some(seed) = seed {
            config = config.with_seed(seed);
        }
        config.validate().map_err(err)?;
        Ok(PyPipeline { config, models: None })
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.config)
    }

    /// Trains all three models and returns the sharpening round reports.
    fn train<'py>(
        &mut self,
        products: &Bound<'py, PyAny>,
        human: &Bound<'py, PyAny>,
        pairs: &Bound<'py, PyAny>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let py = products.py();
        let products: Vec<ProductRecord> = from_py(products)?;
        let human: Vec<HumanSellingPoint> = from_py(human)?;
        let pairs: Vec<RewritePair> = from_py(pairs)?;
        let (models, reports) = pipeline::train_models(&products, &human, &pairs, &self.config).map_err(err)?;
        self.models = Some(models);
        to_py(py, &reports)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        let m = self.models()?;
        std::fs::create_dir_all(&dir).map_err(|e| PyValueError::new_err(e.to_string()))?;
        m.coarse.save(dir.join(COARSE_FILE)).map_err(err)?;
        m.generator.save(dir.join(GENERATOR_FILE)).map_err(err)?;
        m.fine.save(dir.join(FINE_FILE)).map_err(err)?;
        EmbeddingTable::from_screener(&m.fine).save(dir.join(EMBEDDINGS_FILE)).map_err(err)
    }

    /// Loads `coarse.json`, `generator.json` and `fine.json` from `dir`.
    fn load(&mut self, dir: PathBuf) -> PyResult<()> {
        self.models = Some(Models {
            coarse: ScreenerModel::load(dir.join(COARSE_FILE)).map_err(err)?,
            generator: GeneratorModel::load(dir.join(GENERATOR_FILE)).map_err(err)?,
            fine: ScreenerModel::load(dir.join(FINE_FILE)).map_err(err)?,
        });
        Ok(())
    }

    #[getter]
    fn fine(&self) -> PyResult<PyScreener> {
        Ok(PyScreener {
            inner: self.models()?.fine.clone(),
        })
    }

    /// Selling points for one product record.
    fn extract<'py>(&self, product: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        let py = product.py();
        let product: ProductRecord = from_py(product)?;
        let points = pipeline::extract_selling_points(&product, self.models()?, &self.config).map_err(err)?;
        to_py(py, &points)
    }

    /// Selling point pool for a list of product records.
    fn extract_pool<'py>(&self, products: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        let py = products.py();
        let products: Vec<ProductRecord> = from_py(products)?;
        let pool = pipeline::extract_pool(&products, self.models()?, &self.config).map_err(err)?;
        to_py(py, &pool)
    }

    /// Picks one pool entry of `sku_id` for `customer_id`, using the fine
    /// screener's token embeddings. Raises `KeyError` for an unknown sku.
    fn assign<'py>(
        &self,
        pool: &Bound<'py, PyAny>,
        profiles: &Bound<'py, PyAny>,
        customer_id: String,
        sku_id: String,
    ) -> PyResult<Bound<'py, PyAny>> {
        let py = pool.py();
        let pool: Vec<SellingPoint> = from_py(pool)?;
        let profiles: Vec<CustomerProfile> = from_py(profiles)?;
        let snapshot = Snapshot::new(pool, profiles, EmbeddingTable::from_screener(&self.models()?.fine));
        let resp = pipeline::serve_assign(&snapshot, &AssignRequest { customer_id, sku_id }).map_err(err)?;
        to_py(py, &resp)
    }

    /// Offline optimization from log events. Updates the fine screener in
    /// place and returns `(pool, report)`.
    #[pyo3(signature = (events, pool, start = None, end = None))]
    fn optimize<'py>(
        &mut self,
        events: &Bound<'py, PyAny>,
        pool: &Bound<'py, PyAny>,
        start: Option<&str>,
        end: Option<&str>,
    ) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
        let py = pool.py();
        let records: Vec<EventRecord> = from_py(events)?;
        let mut pool: Vec<SellingPoint> = from_py(pool)?;
        let window = window(start, end)?;
        let config = self.config.clone();
        let models = self
            .models
            .as_mut()
            .ok_or_else(|| PyValueError::new_err("pipeline has no models; call train or load first"))?;
        let report =
            pipeline::run_offline_optimization(&records, &window, &mut pool, &mut models.fine, &config).map_err(err)?;
        Ok((to_py(py, &pool)?, to_py(py, &report)?))
    }
}

#[pymodule(name = "iospe")]
fn iospe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(split_sentences, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(relative_increase, m)?)?;
    m.add_function(wrap_pyfunction!(split_stream, m)?)?;
    m.add_function(wrap_pyfunction!(stream_bucket, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(selling_point_id, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(pool_load, m)?)?;
    m.add_function(wrap_pyfunction!(pool_save, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_class::<PyScreener>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyPipeline>()?;
    Ok(())
}
