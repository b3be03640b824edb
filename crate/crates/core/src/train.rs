//! Margin-based negative-sampling objective and the training loop.

use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::eval::{evaluate, EvalError, MetricsTable};
use crate::kg::{EntityId, EntitySet};
use crate::ops::{Mode, Model, ModelConfig, OpsError};
use crate::query::{Query, QueryError, QueryStructure};
use crate::sampler::{EvalSplit, QuerySample};
use crate::tensor::{adam_step, lit, log_sigmoid, sigmoid, AdamConfig, AdamState, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("loss needs at least one negative")]
    NoNegatives,
    #[error("cannot sample negatives: all {0} entities are answers")]
    Unsatisfiable(usize),
    #[error("non-finite loss {loss} at iteration {iteration}{}", diagnostic.as_ref().map(|p| format!(" (state written to {})", p.display())).unwrap_or_default())]
    NonFinite {
        iteration: u64,
        loss: f64,
        diagnostic: Option<PathBuf>,
    },
    #[error("no training queries{0}")]
    EmptyTraining(String),
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub negatives: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: u64,
    /// Relative sampling weight per structure; empty means uniform over the
    /// structures present in the training set.
    pub structure_weights: Vec<(QueryStructure, f64)>,
    /// 0 disables periodic validation.
    pub eval_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 24.0,
            negatives: 128,
            batch_size: 512,
            learning_rate: 1e-4,
            iterations: 300_000,
            structure_weights: Vec::new(),
            eval_every: 10_000,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.margin > 0.0) {
            return bad(format!("margin must be > 0, got {}", self.margin));
        }
        if self.negatives < 1 {
            return bad("negatives must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if let Some((s, w)) = self.structure_weights.iter().find(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
            return bad(format!("weight {w} for {} must be finite and >= 0", s.tag()));
        }
        Ok(())
    }
}

/// Loss of one query and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<F> {
    pub value: F,
    /// One gradient per conjunct embedding.
    pub d_conjuncts: Vec<Vec<F>>,
    pub d_positive: Vec<F>,
    pub d_negatives: Vec<Vec<F>>,
}

/// Nearest conjunct and its Euclidean distance.
fn min_distance<F: Real>(conjuncts: &[&[F]], v: &[F]) -> (usize, F) {
    let mut best = (0, F::infinity());
    for (c, q) in conjuncts.iter().enumerate() {
        let d = v.iter().zip(q.iter()).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<F>().sqrt();
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Adds `scale * d‖v − q‖/dq` to `dq` and its negation to `dv`.
fn distance_grad<F: Real>(v: &[F], q: &[F], dist: F, scale: F, dq: &mut [F], dv: &mut [F]) {
    if dist <= lit(1e-12) {
        return;
    }
    let s = scale / dist;
    for i in 0..v.len() {
        let g = s * (q[i] - v[i]);
        dq[i] += g;
        dv[i] -= g;
    }
}

/// `L = −log σ(γ − D(v)) − (1/k) Σⱼ log σ(D(v′ⱼ) − γ)` where `D(v)` is the
/// Euclidean distance from `v` to the nearest conjunct embedding.
pub fn loss<F: Real>(conjuncts: &[&[F]], positive: &[F], negatives: &[&[F]], margin: F) -> Result<LossValue<F>> {
    if negatives.is_empty() {
        return Err(TrainError::NoNegatives);
    }
    if conjuncts.is_empty() {
        return Err(TrainError::Config("query has no conjunct embedding".into()));
    }
    let d = positive.len();
    let mut dc = vec![vec![F::zero(); d]; conjuncts.len()];
    let mut dpos = vec![F::zero(); d];
    let (c, dist) = min_distance(conjuncts, positive);
    let mut value = -log_sigmoid(margin - dist);
    distance_grad(positive, conjuncts[c], dist, sigmoid(dist - margin), &mut dc[c], &mut dpos);
    let inv_k = lit::<F>(1.0 / negatives.len() as f64);
    let mut dnegs = Vec::with_capacity(negatives.len());
    for n in negatives {
        let mut dn = vec![F::zero(); d];
        let (c, dist) = min_distance(conjuncts, n);
        value -= inv_k * log_sigmoid(dist - margin);
        distance_grad(n, conjuncts[c], dist, -inv_k * sigmoid(margin - dist), &mut dc[c], &mut dn);
        dnegs.push(dn);
    }
    Ok(LossValue {
        value,
        d_conjuncts: dc,
        d_positive: dpos,
        d_negatives: dnegs,
    })
}

/// `k` ids drawn uniformly, with replacement, from the entities outside
/// `answers`.
pub fn sample_negatives<R: Rng + ?Sized>(
    answers: &EntitySet,
    entity_count: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<EntityId>> {
    let free = entity_count.saturating_sub(answers.iter().filter(|e| e.index() < entity_count).count());
    if free == 0 {
        return Err(TrainError::Unsatisfiable(entity_count));
    }
    if answers.len() * 2 <= entity_count {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let e = EntityId(rng.random_range(0..entity_count as u32));
            if !answers.contains(e) {
                out.push(e);
            }
        }
        Ok(out)
    } else {
        let pool = answers.complement(entity_count);
        let pool = pool.as_slice();
        Ok((0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect())
    }
}

struct Pool {
    structure: QueryStructure,
    conjuncts: Vec<Vec<Query>>,
    answers: Vec<EntitySet>,
}

/// Training queries grouped by structure, with the structure sampler.
pub struct TrainingSet {
    pools: Vec<Pool>,
    chooser: WeightedIndex<f64>,
}

impl TrainingSet {
    /// Samples without train answers are dropped.
    pub fn new(samples: &[QuerySample], weights: &[(QueryStructure, f64)]) -> Result<Self> {
        let mut pools: Vec<Pool> = Vec::new();
        for structure in QueryStructure::ALL {
            let mut pool = Pool {
                structure,
                conjuncts: Vec::new(),
                answers: Vec::new(),
            };
            for s in samples.iter().filter(|s| s.query.structure() == structure) {
                if s.answers_train.is_empty() {
                    continue;
                }
                pool.conjuncts.push(s.query.root().to_dnf()?);
                pool.answers.push(s.answers_train.clone());
            }
            if !pool.answers.is_empty() {
                pools.push(pool);
            }
        }
        if pools.is_empty() {
            return Err(TrainError::EmptyTraining(String::new()));
        }
        for (s, _) in weights {
            if !pools.iter().any(|p| p.structure == *s) {
                return Err(TrainError::EmptyTraining(format!(" for weighted structure {}", s.tag())));
            }
        }
        let w: Vec<f64> = if weights.is_empty() {
            vec![1.0; pools.len()]
        } else {
            pools
                .iter()
                .map(|p| weights.iter().find(|(s, _)| *s == p.structure).map_or(0.0, |(_, w)| *w))
                .collect()
        };
        let chooser = WeightedIndex::new(&w).map_err(|e| TrainError::Config(format!("structure weights: {e}")))?;
        Ok(TrainingSet { pools, chooser })
    }

    pub fn structures(&self) -> Vec<QueryStructure> {
        self.pools.iter().map(|p| p.structure).collect()
    }

    pub fn len(&self) -> usize {
        self.pools.iter().map(|p| p.answers.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    /// Mean objective over the batch (including the weighted regularizer).
    pub loss: f64,
    pub regularizer: f64,
}

/// Model, optimizer and sampling state. Two trainers built from the same
/// seed and fed the same data produce bit-identical parameters.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub(crate) model: Model<F>,
    pub(crate) adam: AdamState<F>,
    pub(crate) config: TrainConfig,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) iteration: u64,
}

impl<F: Real> Trainer<F> {
    /// The model is initialized from `config.seed`; the batch sampler uses a
    /// separate stream of the same seed.
    pub fn new(model_config: ModelConfig, entity_count: usize, relation_count: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, entity_count, relation_count, config.seed)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: Model<F>, config: TrainConfig) -> Self {
        let adam = AdamState::new(model.params(), AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Trainer {
            model,
            adam,
            config,
            rng,
            iteration: 0,
        }
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn into_model(self) -> Model<F> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn optimizer(&self) -> &AdamState<F> {
        &self.adam
    }

    /// Draws one batch, accumulates gradients, and applies one Adam update.
    /// A non-finite loss leaves parameters untouched and returns
    /// [`TrainError::NonFinite`].
    pub fn step(&mut self, data: &TrainingSet) -> Result<StepStats> {
        let entity_count = self.model.entity_count();
        let mut batch = Batch::default();
        for _ in 0..self.config.batch_size {
            let pool = &data.pools[data.chooser.sample(&mut self.rng)];
            let qi = self.rng.random_range(0..pool.answers.len());
            let answers = &pool.answers[qi];
            let pos = answers.as_slice()[self.rng.random_range(0..answers.len())];
            let negs = sample_negatives(answers, entity_count, self.config.negatives, &mut self.rng)?;
            batch.push(&pool.conjuncts[qi], pos, negs);
        }
        let non_finite = |iteration, loss: f64| TrainError::NonFinite {
            iteration,
            loss,
            diagnostic: None,
        };
        let (value, reg) = match objective(&mut self.model, &batch, self.config.margin, Mode::Train, &mut self.rng) {
            Ok(v) => v,
            Err(TrainError::NonFinite { loss, .. }) => return Err(non_finite(self.iteration, loss)),
            Err(e) => return Err(e),
        };
        if let Err(e) = adam_step(self.model.params_mut(), &mut self.adam, self.config.learning_rate) {
            self.model.params_mut().zero_grad();
            return Err(match e {
                TensorError::NonFinite(_) => non_finite(self.iteration, value.to_f64()),
                other => other.into(),
            });
        }
        self.iteration += 1;
        Ok(StepStats {
            iteration: self.iteration,
            loss: value.to_f64(),
            regularizer: reg.to_f64(),
        })
    }
}

/// Queries with one positive and their negatives, flattened to conjuncts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub conjuncts: Vec<Query>,
    /// Conjunct rows of each element.
    pub spans: Vec<Range<usize>>,
    pub positives: Vec<EntityId>,
    pub negatives: Vec<Vec<EntityId>>,
}

impl Batch {
    pub fn push(&mut self, dnf: &[Query], positive: EntityId, negatives: Vec<EntityId>) {
        self.spans.push(self.conjuncts.len()..self.conjuncts.len() + dnf.len());
        self.conjuncts.extend(dnf.iter().cloned());
        self.positives.push(positive);
        self.negatives.push(negatives);
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Mean loss over the batch plus, for the logic-network family, the weighted
/// regularizer over the batch's query embeddings. Parameter gradients are
/// accumulated into the model. Returns `(objective, mean regularizer)`; on a
/// non-finite objective no gradient is kept.
pub fn objective<F: Real>(
    model: &mut Model<F>,
    batch: &Batch,
    margin: f64,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(F, F)> {
    let b = batch.len();
    if b == 0 {
        return Err(TrainError::Config("empty batch".into()));
    }
    let (q, trace) = model.forward_conjuncts(&batch.conjuncts, mode, rng)?;
    let d = model.dim();
    let margin = lit::<F>(margin);
    let inv_b = lit::<F>(1.0 / b as f64);
    let mut dq = Tensor::zeros(&[batch.conjuncts.len(), d]);
    let mut dent = Tensor::zeros(&[model.entity_count(), d]);
    let mut total = F::zero();
    {
        let table = model.entity_table();
        let add = |dst: &mut [F], g: &[F]| {
            for (o, v) in dst.iter_mut().zip(g) {
                *o += *v * inv_b;
            }
        };
        for i in 0..b {
            let span = batch.spans[i].clone();
            let rows: Vec<&[F]> = span.clone().map(|r| q.row(r)).collect();
            let negs: Vec<&[F]> = batch.negatives[i].iter().map(|e| table.row(e.index())).collect();
            let l = loss(&rows, table.row(batch.positives[i].index()), &negs, margin)?;
            total += l.value;
            for (r, g) in span.zip(&l.d_conjuncts) {
                add(dq.row_mut(r), g);
            }
            add(dent.row_mut(batch.positives[i].index()), &l.d_positive);
            for (e, g) in batch.negatives[i].iter().zip(&l.d_negatives) {
                add(dent.row_mut(e.index()), g);
            }
        }
    }
    let mut value = total * inv_b;
    let mut reg = F::zero();
    let lambda = lit::<F>(model.config().nln_weight);
    if model.logic_constants().is_some() && lambda > F::zero() {
        let (r, dw) = model.logic_regularizer(&q, lambda * inv_b)?;
        reg = r * inv_b;
        value += lambda * reg;
        dq.add_assign(&dw)?;
    }
    if !value.is_finite() {
        model.params_mut().zero_grad();
        return Err(TrainError::NonFinite {
            iteration: 0,
            loss: value.to_f64(),
            diagnostic: None,
        });
    }
    let ent = model.entity_param();
    model.params_mut().accumulate(ent, &dent);
    model.backward_conjuncts(&trace, &dq)?;
    Ok((value, reg))
}

/// Periodic side effects of [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Validation queries, evaluated every `eval_every` iterations.
    pub validation: Option<(&'a [QuerySample], EvalSplit)>,
    /// Directory for scheduled and diagnostic checkpoints.
    pub checkpoint_dir: Option<&'a Path>,
    /// Receives `iteration,kind,value` CSV lines.
    pub log: Option<&'a mut dyn Write>,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub validations: Vec<(u64, MetricsTable)>,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("step-{iteration:08}.ckpt")
}

/// Runs until `config.iterations` steps have been taken in total.
pub fn train<F: Real>(trainer: &mut Trainer<F>, data: &TrainingSet, hooks: &mut TrainHooks<'_>) -> Result<TrainReport> {
    for s in data.structures() {
        trainer.model.check_structure(s)?;
    }
    let mut report = TrainReport {
        losses: Vec::new(),
        validations: Vec::new(),
    };
    while trainer.iteration < trainer.config.iterations {
        let stats = match trainer.step(data) {
            Ok(s) => s,
            Err(TrainError::NonFinite { iteration, loss, .. }) => {
                let diagnostic = match hooks.checkpoint_dir {
                    Some(dir) => {
                        let path = dir.join(format!("diagnostic-{iteration:08}.ckpt"));
                        trainer.save_checkpoint(&path)?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(TrainError::NonFinite {
                    iteration,
                    loss,
                    diagnostic,
                });
            }
            Err(e) => return Err(e),
        };
        report.losses.push(stats.loss);
        if let Some(log) = hooks.log.as_deref_mut() {
            writeln!(log, "{},loss,{:.6}", stats.iteration, stats.loss)?;
            if stats.regularizer != 0.0 {
                writeln!(log, "{},regularizer,{:.6}", stats.iteration, stats.regularizer)?;
            }
        }
        let it = stats.iteration;
        let cfg = &trainer.config;
        if cfg.eval_every > 0 && it % cfg.eval_every == 0 {
            if let Some((samples, split)) = hooks.validation {
                let table = evaluate(&trainer.model, samples, split, hooks.threads)?;
                if let (Some(log), Some(avg)) = (hooks.log.as_deref_mut(), table.average) {
                    writeln!(log, "{it},{}_mrr,{:.6}", split.split(), avg.mrr)?;
                }
                report.validations.push((it, table));
            }
        }
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            if let Some(dir) = hooks.checkpoint_dir {
                trainer.save_checkpoint(&dir.join(checkpoint_name(it)))?;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let q = [0.0f64, 0.0];
        let at = |r: f64| [r, 0.0];
        let l = loss(&[&q], &at(24.0), &[&at(24.0), &at(24.0)], 24.0).unwrap();
        assert!((l.value - 2.0 * 2f64.ln()).abs() < 1e-12);
        let l = loss(&[&q], &at(0.0), &[&at(48.0)], 24.0).unwrap();
        assert!(l.value > 0.0 && l.value < 1e-9);
        assert!(matches!(loss(&[&q], &at(1.0), &[], 24.0), Err(TrainError::NoNegatives)));
    }

    #[test]
    fn union_uses_nearest_conjunct() {
        let (a, b) = ([0.0f64], [10.0]);
        let l = loss(&[&a, &b], &[9.0], &[&[4.0]], 1.0).unwrap();
        assert_eq!(l.d_conjuncts[0][0], -l.d_negatives[0][0]);
        // positive is nearest to the second conjunct
        assert!(l.d_conjuncts[1][0] > 0.0);
    }

    #[test]
    fn forced_negatives() {
        let answers: EntitySet = (0..9).map(EntityId).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = sample_negatives(&answers, 10, 3, &mut rng).unwrap();
        assert_eq!(n, vec![EntityId(9); 3]);
        let all: EntitySet = (0..10).map(EntityId).collect();
        assert!(matches!(
            sample_negatives(&all, 10, 3, &mut rng),
            Err(TrainError::Unsatisfiable(10))
        ));
    }

    #[test]
    fn config_invariants() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.negatives = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            margin: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
