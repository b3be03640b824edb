//! The 200-entity toy benchmark and the two training regimes used on it.
//!
//! `Regime::Smoke` weights 1p heavily so the training split is fitted within
//! 2,000 iterations. `Regime::Paired` uses uniform structure weights and a
//! smaller margin; it is the setting for comparing model families, which
//! differ mostly in how well they generalise to held-out answers.

use std::time::{Duration, Instant};

use nnkg_core::eval::{evaluate_targets, random_baseline, MetricsTable, Targets};
use nnkg_core::kg::{GraphSplits, Split};
use nnkg_core::ops::{Family, ModelConfig};
use nnkg_core::query::QueryStructure;
use nnkg_core::sampler::{sample_queries, EvalSplit, QuerySample, SamplerConfig};
use nnkg_core::synth::toy_benchmark;
use nnkg_core::train::{train, TrainConfig, TrainHooks, Trainer, TrainingSet};

pub const SEED: u64 = 1;
pub const ITERATIONS: u64 = 2000;
pub const DIM: usize = 32;
const TRAIN_QUERIES: usize = 2000;
const TEST_QUERIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Smoke,
    Paired,
}

pub struct Toy {
    pub splits: GraphSplits,
    pub train_queries: Vec<QuerySample>,
    pub test_queries: Vec<QuerySample>,
}

impl Toy {
    /// Training queries for the trainable structures (plus negation ones when
    /// `fol`), and hard-answer test queries for every structure the model is
    /// evaluated on.
    pub fn new(fol: bool) -> Self {
        let splits = toy_benchmark(SEED).expect("toy graph");
        let mut train_structures = QueryStructure::EPFO_TRAIN.to_vec();
        let mut test_structures = QueryStructure::EPFO.to_vec();
        if fol {
            train_structures.extend(QueryStructure::NEGATION);
            test_structures.extend(QueryStructure::NEGATION);
        }
        let mut train_queries = Vec::new();
        for (i, s) in train_structures.iter().enumerate() {
            let cfg = SamplerConfig::new(*s, TRAIN_QUERIES, SEED * 100 + i as u64);
            train_queries.extend(sample_queries(&splits, &cfg, Split::Train).samples);
        }
        let mut test_queries = Vec::new();
        for (i, s) in test_structures.iter().enumerate() {
            let mut cfg = SamplerConfig::new(*s, TEST_QUERIES, SEED * 100 + 50 + i as u64);
            cfg.require_hard = true;
            test_queries.extend(sample_queries(&splits, &cfg, Split::Test).samples);
        }
        Toy {
            splits,
            train_queries,
            test_queries,
        }
    }

    pub fn of(&self, structure: QueryStructure) -> Vec<QuerySample> {
        self.train_queries
            .iter()
            .filter(|s| s.query.structure() == structure)
            .cloned()
            .collect()
    }
}

pub fn configs(family: Family, regime: Regime, fol: bool) -> (ModelConfig, TrainConfig) {
    let mut model = ModelConfig::new(family, DIM);
    model.hidden_dim = 128;
    model.init_bound = 0.5;
    let (margin, learning_rate, batch_size, mut weights) = match regime {
        Regime::Smoke => (
            4.0,
            4e-3,
            1024,
            vec![
                (QueryStructure::P1, 4.0),
                (QueryStructure::P2, 2.0),
                (QueryStructure::P3, 1.0),
                (QueryStructure::I2, 1.0),
                (QueryStructure::I3, 1.0),
            ],
        ),
        Regime::Paired => (2.0, 1e-2, 512, Vec::new()),
    };
    if fol && !weights.is_empty() {
        weights.extend(QueryStructure::NEGATION.map(|s| (s, 1.0)));
    }
    let train = TrainConfig {
        margin,
        negatives: 32,
        batch_size,
        learning_rate,
        iterations: ITERATIONS,
        structure_weights: weights,
        eval_every: 0,
        seed: SEED,
        ..Default::default()
    };
    (model, train)
}

pub struct Trained {
    pub trainer: Trainer<f32>,
    pub elapsed: Duration,
    pub losses: Vec<f64>,
}

pub fn train_on(toy: &Toy, family: Family, regime: Regime, fol: bool) -> Trained {
    let (model, cfg) = configs(family, regime, fol);
    let data = TrainingSet::new(&toy.train_queries, &cfg.structure_weights).expect("training set");
    let mut trainer =
        Trainer::<f32>::new(model, toy.splits.entity_count(), toy.splits.relation_count(), cfg).expect("trainer");
    let start = Instant::now();
    let report = train(&mut trainer, &data, &mut TrainHooks::default()).expect("training run");
    Trained {
        trainer,
        elapsed: start.elapsed(),
        losses: report.losses,
    }
}

/// Filtered train-split MRR of the training 1p queries.
pub fn train_1p_mrr(toy: &Toy, trained: &Trained) -> f64 {
    let ones = toy.of(QueryStructure::P1);
    evaluate_targets(trained.trainer.model(), &ones, Targets::All(Split::Train), 1)
        .expect("evaluation")
        .get(QueryStructure::P1)
        .expect("1p row")
        .mrr
}

/// Hard-answer test metrics and the matching random-ranking baseline.
pub fn hard_tables(toy: &Toy, trained: &Trained) -> (MetricsTable, MetricsTable) {
    let targets = Targets::Hard(EvalSplit::Test);
    let table = evaluate_targets(trained.trainer.model(), &toy.test_queries, targets, 1).expect("evaluation");
    let base = random_baseline(&toy.test_queries, targets, toy.splits.entity_count());
    (table, base)
}
