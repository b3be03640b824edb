//! Python module `nnkg`: graph bundles, query sampling, training, ranking
//! and evaluation backed by `nnkg-core`.

use std::collections::HashMap;
use std::path::PathBuf;

use nnkg_core::bundle::Bundle as CoreBundle;
use nnkg_core::eval::{evaluate, rank_query};
use nnkg_core::kg::{Split, Triple};
use nnkg_core::ops::{Family, ModelConfig};
use nnkg_core::query::{ground_truth_answers, parse_query as parse, QueryStructure};
use nnkg_core::sampler::{load_samples, sample_queries, save_samples, EvalSplit, QuerySample, SamplerConfig};
use nnkg_core::synth::{toy_triples, TOY_ENTITIES, TOY_RELATIONS};
use nnkg_core::train::{train, TrainConfig, TrainHooks, Trainer, TrainingSet};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn split(name: &str) -> PyResult<Split> {
    name.parse().map_err(value_err)
}

/// A knowledge graph with nested train, valid and test splits.
#[pyclass(module = "nnkg")]
struct Bundle {
    inner: CoreBundle,
}

#[pymethods]
impl Bundle {
    /// Reads train.txt, valid.txt and test.txt from `dir`.
    #[staticmethod]
    fn ingest(dir: PathBuf) -> PyResult<Self> {
        CoreBundle::ingest(&dir).map(|inner| Bundle { inner }).map_err(io_err)
    }

    /// Loads a bundle written by `save` or by `nnkg ingest`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        CoreBundle::load(&dir).map(|inner| Bundle { inner }).map_err(io_err)
    }

    /// The 200-entity synthetic benchmark.
    #[staticmethod]
    #[pyo3(signature = (seed = 1))]
    fn toy(seed: u64) -> PyResult<Self> {
        let parts: [Vec<Triple>; 3] = toy_triples(seed);
        CoreBundle::from_triples(TOY_ENTITIES as usize, TOY_RELATIONS as usize, &parts, None)
            .map(|inner| Bundle { inner })
            .map_err(value_err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(io_err)
    }

    #[getter]
    fn entity_count(&self) -> usize {
        self.inner.entity_count()
    }

    /// Relation ids, inverses included.
    #[getter]
    fn relation_count(&self) -> usize {
        self.inner.relation_count()
    }

    fn stats(&self) -> String {
        self.inner.stats()
    }

    fn entity_name(&self, id: u32) -> String {
        self.inner.entity_name(id)
    }

    /// Exact answers of `query` on the graph of `split`.
    #[pyo3(signature = (query, split_name = "test"))]
    fn answers(&self, query: &str, split_name: &str) -> PyResult<Vec<u32>> {
        let q = parse(query).map_err(value_err)?;
        let g = self.inner.splits.graph(split(split_name)?);
        Ok(ground_truth_answers(g, q.root()).iter().map(|e| e.0).collect())
    }

    /// Samples `count` queries of one structure with answers on `split_name`.
    #[pyo3(signature = (structure, count, seed = 0, split_name = "train", require_hard = false))]
    fn sample(&self, structure: &str, count: usize, seed: u64, split_name: &str, require_hard: bool) -> PyResult<Queries> {
        let s: QueryStructure = structure.parse().map_err(value_err)?;
        let mut cfg = SamplerConfig::new(s, count, seed);
        cfg.require_hard = require_hard;
        let report = sample_queries(&self.inner.splits, &cfg, split(split_name)?);
        Ok(Queries { samples: report.samples })
    }
}

/// Query samples with their train, valid and test answer sets.
#[pyclass(module = "nnkg")]
struct Queries {
    samples: Vec<QuerySample>,
}

#[pymethods]
impl Queries {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_samples(&path).map(|samples| Queries { samples }).map_err(io_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_samples(&path, &self.samples).map_err(io_err)
    }

    /// Concatenation of two query lists.
    fn __add__(&self, other: &Queries) -> Queries {
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Queries { samples }
    }

    fn __len__(&self) -> usize {
        self.samples.len()
    }

    /// Query expressions, in file order.
    fn expressions(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.query.to_string()).collect()
    }

    fn lines(&self) -> Vec<String> {
        self.samples.iter().map(QuerySample::to_line).collect()
    }
}

/// A model together with its optimizer state.
#[pyclass(module = "nnkg")]
struct Model {
    trainer: Trainer<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (family, dim, entity_count, relation_count, seed = 0, init_bound = None, hidden_dim = None))]
    fn new(
        family: &str,
        dim: usize,
        entity_count: usize,
        relation_count: usize,
        seed: u64,
        init_bound: Option<f64>,
        hidden_dim: Option<usize>,
    ) -> PyResult<Self> {
        let family: Family = family.parse().map_err(value_err)?;
        let mut model = ModelConfig::new(family, dim);
        if let Some(b) = init_bound {
            model.init_bound = b;
        }
        if let Some(h) = hidden_dim {
            model.hidden_dim = h;
        }
        let cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        Trainer::new(model, entity_count, relation_count, cfg)
            .map(|trainer| Model { trainer })
            .map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Trainer::load_checkpoint(&path).map(|trainer| Model { trainer }).map_err(io_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.trainer.save_checkpoint(&path).map_err(io_err)
    }

    #[getter]
    fn family(&self) -> String {
        self.trainer.model().family().to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.trainer.model().dim()
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.trainer.iteration()
    }

    /// Runs `iterations` more optimizer steps and returns their losses.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (queries, iterations, batch_size = 512, learning_rate = 1e-3, margin = 24.0, negatives = 128))]
    fn train(
        &mut self,
        py: Python<'_>,
        queries: &Queries,
        iterations: u64,
        batch_size: usize,
        learning_rate: f64,
        margin: f64,
        negatives: usize,
    ) -> PyResult<Vec<f64>> {
        let start = self.trainer.iteration();
        let cfg = self.trainer.config_mut();
        cfg.iterations = start + iterations;
        cfg.batch_size = batch_size;
        cfg.learning_rate = learning_rate;
        cfg.margin = margin;
        cfg.negatives = negatives;
        cfg.eval_every = 0;
        cfg.checkpoint_every = 0;
        let data = TrainingSet::new(&queries.samples, &[]).map_err(value_err)?;
        let trainer = &mut self.trainer;
        py.detach(|| train(trainer, &data, &mut TrainHooks::default()))
            .map(|r| r.losses)
            .map_err(value_err)
    }

    /// One embedding per DNF conjunct.
    fn embed(&self, query: &str) -> PyResult<Vec<Vec<f32>>> {
        let q = parse(query).map_err(value_err)?;
        self.trainer.model().embed_query(q.root()).map_err(value_err)
    }

    /// The `top_n` nearest entities as `(id, distance)` pairs.
    #[pyo3(signature = (query, top_n = 10))]
    fn rank(&self, query: &str, top_n: usize) -> PyResult<Vec<(u32, f32)>> {
        let q = parse(query).map_err(value_err)?;
        let ranked = rank_query(self.trainer.model(), q.root(), top_n).map_err(value_err)?;
        Ok(ranked.into_iter().map(|(e, d)| (e.0, d)).collect())
    }

    /// Hard-answer metrics per structure tag, plus "average".
    #[pyo3(signature = (queries, split_name = "test", threads = 1))]
    fn evaluate(
        &self,
        queries: &Queries,
        split_name: &str,
        threads: usize,
    ) -> PyResult<HashMap<String, HashMap<&'static str, f64>>> {
        let eval = EvalSplit::try_from(split(split_name)?).map_err(value_err)?;
        let table = evaluate(self.trainer.model(), &queries.samples, eval, threads).map_err(value_err)?;
        let entry = |m: &nnkg_core::eval::Metrics| {
            HashMap::from([("mrr", m.mrr), ("hits1", m.hits[0]), ("hits3", m.hits[1]), ("hits10", m.hits[2])])
        };
        let mut out: HashMap<String, _> = table
            .rows
            .iter()
            .filter_map(|r| r.metrics.as_ref().map(|m| (r.structure.tag().to_string(), entry(m))))
            .collect();
        if let Some(avg) = &table.average {
            out.insert("average".into(), entry(avg));
        }
        Ok(out)
    }
}

/// Structure tag and canonical text of a query expression.
#[pyfunction]
fn parse_query(text: &str) -> PyResult<(String, String)> {
    let q = parse(text).map_err(value_err)?;
    Ok((q.structure().tag().to_string(), q.to_string()))
}

#[pymodule]
fn nnkg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Bundle>()?;
    m.add_class::<Queries>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(parse_query, m)?)?;
    Ok(())
}
