//! Trains one model family on the 200-entity synthetic benchmark and prints
//! hard-answer test metrics next to the random-ranking baseline.
//!
//! ```text
//! cargo run --release -p nnkg-core --example toy_benchmark -- mlp 2000
//! FOL=1 cargo run --release -p nnkg-core --example toy_benchmark -- mlp 2000
//! ```
//!
//! `SEED`, `DIM`, `MARGIN`, `LR` and `BATCH` override the defaults.

use std::time::Instant;

use nnkg_core::eval::{evaluate_targets, random_baseline, Targets};
use nnkg_core::kg::Split;
use nnkg_core::ops::{Family, ModelConfig};
use nnkg_core::query::QueryStructure;
use nnkg_core::sampler::{sample_queries, EvalSplit, QuerySample, SamplerConfig};
use nnkg_core::synth::toy_benchmark;
use nnkg_core::train::{train, TrainConfig, TrainHooks, Trainer, TrainingSet};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let family: Family = args.get(1).map(String::as_str).unwrap_or("mlp").parse()?;
    let iterations: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let fol = std::env::var_os("FOL").is_some();
    let seed = env("SEED", 1u64);

    let splits = toy_benchmark(seed)?;
    println!("train facts {}", splits.train.fact_count());
    let mut structures = QueryStructure::EPFO_TRAIN.to_vec();
    let mut test_structures = QueryStructure::EPFO.to_vec();
    if fol {
        structures.extend(QueryStructure::NEGATION);
        test_structures.extend(QueryStructure::NEGATION);
    }
    let mut train_q: Vec<QuerySample> = Vec::new();
    for (i, s) in structures.iter().enumerate() {
        let cfg = SamplerConfig::new(*s, 2000, seed * 100 + i as u64);
        train_q.extend(sample_queries(&splits, &cfg, Split::Train).samples);
    }
    let mut test_q: Vec<QuerySample> = Vec::new();
    for (i, s) in test_structures.iter().enumerate() {
        let mut cfg = SamplerConfig::new(*s, 200, seed * 100 + 50 + i as u64);
        cfg.require_hard = true;
        test_q.extend(sample_queries(&splits, &cfg, Split::Test).samples);
    }

    let mut model = ModelConfig::new(family, env("DIM", 32));
    model.hidden_dim = 128;
    model.init_bound = 0.5;
    let cfg = TrainConfig {
        margin: env("MARGIN", 4.0),
        negatives: 32,
        batch_size: env("BATCH", 1024),
        learning_rate: env("LR", 4e-3),
        iterations,
        eval_every: 0,
        seed,
        ..Default::default()
    };
    let data = TrainingSet::new(&train_q, &[])?;
    let mut trainer = Trainer::<f32>::new(model, splits.entity_count(), splits.relation_count(), cfg)?;
    let start = Instant::now();
    let report = train(&mut trainer, &data, &mut TrainHooks::default())?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!("{family}: {iterations} iterations in {:.1?}, final loss {last:.4}", start.elapsed());

    let train_1p: Vec<QuerySample> =
        train_q.iter().filter(|s| s.query.structure() == QueryStructure::P1).cloned().collect();
    let t = evaluate_targets(trainer.model(), &train_1p, Targets::All(Split::Train), 1)?;
    println!("train 1p MRR {:.4}", t.get(QueryStructure::P1).map_or(f64::NAN, |m| m.mrr));
    let hard = Targets::Hard(EvalSplit::Test);
    let table = evaluate_targets(trainer.model(), &test_q, hard, 1)?;
    let base = random_baseline(&test_q, hard, splits.entity_count());
    println!("test (hard answers):\n{}", table.to_text());
    println!("random baseline:\n{}", base.to_text());
    Ok(())
}
