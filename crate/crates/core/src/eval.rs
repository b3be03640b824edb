//! Exact ranking by Euclidean distance and filtered hard-answer metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::kg::{EntityId, EntitySet, Split};
use crate::ops::{Mode, Model, OpsError};
use crate::query::{Query, QueryError, QueryStructure};
use crate::sampler::{EvalSplit, QuerySample};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("target entity {0} is not in the ranked list")]
    TargetMissing(u32),
    #[error("no ranks to average")]
    EmptyRanks,
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

pub const HITS_AT: [usize; 3] = [1, 3, 10];

/// Samples are embedded this many at a time.
const EMBED_CHUNK: usize = 512;

/// `Dist(v; q)` for every entity row: the minimum over conjunct embeddings.
pub fn distances<F: Real>(conjuncts: &[&[F]], table: &Tensor<F>) -> Vec<F> {
    (0..table.rows())
        .map(|e| {
            let row = table.row(e);
            conjuncts
                .iter()
                .map(|q| row.iter().zip(q.iter()).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<F>())
                .fold(F::infinity(), F::min)
                .sqrt()
        })
        .collect()
}

fn by_distance<F: Real>(dist: &[F], a: usize, b: usize) -> Ordering {
    dist[a]
        .partial_cmp(&dist[b])
        .unwrap_or_else(|| dist[a].is_nan().cmp(&dist[b].is_nan()))
        .then(a.cmp(&b))
}

/// All entities sorted by ascending distance, ties broken by id.
pub fn rank_entities<F: Real>(conjuncts: &[&[F]], table: &Tensor<F>) -> Vec<(EntityId, F)> {
    let dist = distances(conjuncts, table);
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|a, b| by_distance(&dist, *a, *b));
    order.into_iter().map(|e| (EntityId(e as u32), dist[e])).collect()
}

/// Position (1-based) of `target` in `order` after deleting every other
/// member of `known`.
pub fn filtered_rank(order: &[EntityId], target: EntityId, known: &EntitySet) -> Result<usize> {
    let mut rank = 1;
    for &e in order {
        if e == target {
            return Ok(rank);
        }
        if !known.contains(e) {
            rank += 1;
        }
    }
    Err(EvalError::TargetMissing(target.0))
}

/// Same as [`filtered_rank`] over the order induced by `dist`, without sorting.
pub fn filtered_rank_by_distance<F: Real>(dist: &[F], target: EntityId, known: &EntitySet) -> usize {
    let t = target.index();
    1 + (0..dist.len())
        .filter(|&e| e != t && by_distance(dist, e, t) == Ordering::Less)
        .filter(|&e| !known.contains(EntityId(e as u32)))
        .count()
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyRanks);
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn hits_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyRanks);
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub mrr: f64,
    /// Hits@1, @3, @10.
    pub hits: [f64; 3],
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Metrics {
            mrr: mrr(ranks)?,
            hits: [
                hits_at_k(ranks, HITS_AT[0])?,
                hits_at_k(ranks, HITS_AT[1])?,
                hits_at_k(ranks, HITS_AT[2])?,
            ],
        })
    }

    fn mean(items: &[Metrics]) -> Option<Metrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut m = Metrics::default();
        for it in items {
            m.mrr += it.mrr;
            for k in 0..3 {
                m.hits[k] += it.hits[k];
            }
        }
        m.mrr /= n;
        for h in &mut m.hits {
            *h /= n;
        }
        Some(m)
    }

    pub fn values(&self) -> [(&'static str, f64); 4] {
        [
            ("mrr", self.mrr),
            ("hits@1", self.hits[0]),
            ("hits@3", self.hits[1]),
            ("hits@10", self.hits[2]),
        ]
    }
}

/// Filtered ranks of one query's hard answers.
#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    pub query: usize,
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureRow {
    pub structure: QueryStructure,
    /// Queries with at least one hard answer.
    pub queries: usize,
    /// `None` when no query of this structure had a hard answer.
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<StructureRow>,
    /// Macro average over rows that have metrics.
    pub average: Option<Metrics>,
}

impl MetricsTable {
    fn from_rows(rows: Vec<StructureRow>) -> Self {
        let present: Vec<Metrics> = rows.iter().filter_map(|r| r.metrics).collect();
        MetricsTable {
            average: Metrics::mean(&present),
            rows,
        }
    }

    pub fn get(&self, structure: QueryStructure) -> Option<Metrics> {
        self.rows.iter().find(|r| r.structure == structure).and_then(|r| r.metrics)
    }

    /// `structure,metric,value` lines with a header; absent rows are omitted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("structure,metric,value\n");
        let rows = self
            .rows
            .iter()
            .filter_map(|r| r.metrics.map(|m| (r.structure.tag(), m)))
            .chain(self.average.map(|m| ("average", m)));
        for (tag, m) in rows {
            for (name, v) in m.values() {
                let _ = writeln!(out, "{tag},{name},{v:.6}");
            }
        }
        out
    }

    /// Plain-text table, one column per structure plus the average, values
    /// in percent.
    pub fn to_text(&self) -> String {
        let mut cols: Vec<(&str, Option<Metrics>)> = self.rows.iter().map(|r| (r.structure.tag(), r.metrics)).collect();
        cols.push(("avg", self.average));
        let mut out = format!("{:<8}", "metric");
        for (tag, _) in &cols {
            let _ = write!(out, "{tag:>7}");
        }
        out.push('\n');
        for (i, name) in ["MRR", "H@1", "H@3", "H@10"].iter().enumerate() {
            let _ = write!(out, "{name:<8}");
            for (_, m) in &cols {
                match m {
                    Some(m) => {
                        let v = if i == 0 { m.mrr } else { m.hits[i - 1] };
                        let _ = write!(out, "{:>7.1}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(out, "{:>7}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn group_by_structure(samples: &[QuerySample]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let pos = QueryStructure::ALL
            .iter()
            .position(|q| *q == s.query.structure())
            .expect("every structure is listed");
        groups.entry(pos).or_default().push(i);
    }
    groups
}

fn query_ranks<F: Real>(conjuncts: &[&[F]], table: &Tensor<F>, targets: &EntitySet, known: &EntitySet) -> Vec<usize> {
    if targets.is_empty() {
        return Vec::new();
    }
    let dist = distances(conjuncts, table);
    targets.iter().map(|v| filtered_rank_by_distance(&dist, v, known)).collect()
}

/// Which answers are ranked, and which are filtered out while ranking them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Targets {
    /// Hard answers of the split, filtered by all of its answers.
    Hard(EvalSplit),
    /// Every answer on the split's graph, filtered by every answer on the
    /// full graph (held-out edges are true facts, not distractors).
    All(Split),
}

impl Targets {
    fn select(self, s: &QuerySample) -> (EntitySet, &EntitySet) {
        match self {
            Targets::Hard(e) => (s.hard_answers(e), s.answers(e.split())),
            Targets::All(split) => (s.answers(split).clone(), s.answers(Split::Test)),
        }
    }
}

fn table_from(samples: &[QuerySample], per_query: &[Option<Metrics>]) -> MetricsTable {
    let rows = group_by_structure(samples)
        .into_iter()
        .map(|(pos, idx)| {
            let items: Vec<Metrics> = idx.iter().filter_map(|&i| per_query[i]).collect();
            StructureRow {
                structure: QueryStructure::ALL[pos],
                queries: items.len(),
                metrics: Metrics::mean(&items),
            }
        })
        .collect();
    MetricsTable::from_rows(rows)
}

/// Filtered metrics over the hard answers of `eval`, one row per structure
/// present in `samples`. Per-query values are averaged over that query's
/// hard answers first.
pub fn evaluate<F: Real>(model: &Model<F>, samples: &[QuerySample], eval: EvalSplit, threads: usize) -> Result<MetricsTable> {
    evaluate_targets(model, samples, Targets::Hard(eval), threads)
}

pub fn evaluate_targets<F: Real>(
    model: &Model<F>,
    samples: &[QuerySample],
    targets: Targets,
    threads: usize,
) -> Result<MetricsTable> {
    let per_query = per_query_metrics(model, samples, targets, threads)?;
    Ok(table_from(samples, &per_query))
}

/// Metrics of each sample, `None` for samples without targets.
pub fn per_query_metrics<F: Real>(
    model: &Model<F>,
    samples: &[QuerySample],
    targets: Targets,
    threads: usize,
) -> Result<Vec<Option<Metrics>>> {
    Ok(rank_results(model, samples, targets, threads)?
        .iter()
        .map(|r| Metrics::from_ranks(&r.ranks).ok())
        .collect())
}

/// Filtered ranks of every target of every sample; `query` indexes `samples`.
/// Samples without targets get an empty rank list.
pub fn rank_results<F: Real>(
    model: &Model<F>,
    samples: &[QuerySample],
    targets: Targets,
    threads: usize,
) -> Result<Vec<RankResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| EvalError::ThreadPool(e.to_string()))?;
    let table = model.entity_table();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(EMBED_CHUNK).enumerate() {
        let mut conjuncts: Vec<Query> = Vec::new();
        let mut spans = Vec::with_capacity(chunk.len());
        for s in chunk {
            let dnf = s.query.root().to_dnf()?;
            spans.push(conjuncts.len()..conjuncts.len() + dnf.len());
            conjuncts.extend(dnf);
        }
        let (emb, _) = model.forward_conjuncts(&conjuncts, Mode::Eval, &mut rng)?;
        let results: Vec<RankResult> = pool.install(|| {
            chunk
                .par_iter()
                .zip(spans.par_iter())
                .enumerate()
                .map(|(i, (s, span))| {
                    let rows: Vec<&[F]> = span.clone().map(|r| emb.row(r)).collect();
                    let (t, known) = targets.select(s);
                    RankResult {
                        query: c * EMBED_CHUNK + i,
                        ranks: query_ranks(&rows, table, &t, known),
                    }
                })
                .collect()
        });
        out.extend(results);
    }
    Ok(out)
}

/// The top `top_n` entities for one query.
pub fn rank_query<F: Real>(model: &Model<F>, query: &Query, top_n: usize) -> Result<Vec<(EntityId, F)>> {
    let embs = model.embed_query(query)?;
    let rows: Vec<&[F]> = embs.iter().map(Vec::as_slice).collect();
    let mut ranked = rank_entities(&rows, model.entity_table());
    ranked.truncate(top_n);
    Ok(ranked)
}

/// Expected metrics of a ranker that orders entities uniformly at random,
/// under the same filtering. For a hard answer competing with `n - 1`
/// unfiltered entities the rank is uniform on `1..=n`, so
/// `E[1/rank] = H_n / n` and `E[hits@k] = min(k, n) / n`.
pub fn random_baseline(samples: &[QuerySample], targets: Targets, entity_count: usize) -> MetricsTable {
    let per_query: Vec<Option<Metrics>> = samples
        .iter()
        .map(|s| {
            let (t, known) = targets.select(s);
            if t.is_empty() {
                return None;
            }
            let n = entity_count - known.len() + 1;
            let harmonic: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
            let nf = n as f64;
            Some(Metrics {
                mrr: harmonic / nf,
                hits: HITS_AT.map(|k| k.min(n) as f64 / nf),
            })
        })
        .collect();
    table_from(samples, &per_query)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[u32]) -> EntitySet {
        ids.iter().map(|&i| EntityId(i)).collect()
    }

    #[test]
    fn metric_examples() {
        assert!((mrr(&[1, 2, 4]).unwrap() - 0.583_333_333).abs() < 1e-6);
        assert_eq!(hits_at_k(&[2], 1).unwrap(), 0.0);
        assert_eq!(hits_at_k(&[2], 3).unwrap(), 1.0);
        let m = Metrics::from_ranks(&[1, 1, 1]).unwrap();
        assert_eq!(m.mrr, 1.0);
        assert_eq!(m.hits, [1.0; 3]);
        assert!(matches!(mrr(&[]), Err(EvalError::EmptyRanks)));
    }

    #[test]
    fn ranking_examples() {
        let table = Tensor::from_vec(&[3, 1], vec![0.1f64, 0.5, 0.2]).unwrap();
        let order = rank_entities(&[&[0.0]], &table);
        let ids: Vec<u32> = order.iter().map(|(e, _)| e.0).collect();
        assert_eq!(ids, vec![0, 2, 1]);

        let order = rank_entities(&[&[0.5]], &table);
        assert_eq!(order[0], (EntityId(1), 0.0));

        // union: exact hit on the second conjunct beats 0.1 from the first
        let table = Tensor::from_vec(&[2, 1], vec![0.1f64, 5.0]).unwrap();
        let order = rank_entities(&[&[0.0], &[5.0]], &table);
        assert_eq!(order[0].0, EntityId(1));
    }

    #[test]
    fn filtered_examples() {
        let order = [EntityId(0), EntityId(1), EntityId(2)];
        assert_eq!(filtered_rank(&order, EntityId(2), &set(&[0, 2])).unwrap(), 2);
        assert_eq!(filtered_rank(&order, EntityId(0), &set(&[0, 1, 2])).unwrap(), 1);
        assert!(filtered_rank(&order, EntityId(7), &set(&[])).is_err());
        let dist = [0.0f32, 1.0, 2.0];
        assert_eq!(filtered_rank_by_distance(&dist, EntityId(2), &set(&[0, 2])), 2);
    }

    #[test]
    fn ties_break_by_id() {
        let dist = [1.0f64, 1.0, 1.0];
        assert_eq!(filtered_rank_by_distance(&dist, EntityId(2), &set(&[])), 3);
        assert_eq!(filtered_rank_by_distance(&dist, EntityId(0), &set(&[])), 1);
    }

    #[test]
    fn text_table_marks_absent_rows() {
        let t = MetricsTable::from_rows(vec![
            StructureRow {
                structure: QueryStructure::P1,
                queries: 1,
                metrics: Some(Metrics::from_ranks(&[2]).unwrap()),
            },
            StructureRow {
                structure: QueryStructure::P2,
                queries: 0,
                metrics: None,
            },
        ]);
        assert_eq!(t.average.unwrap().mrr, 0.5);
        let text = t.to_text();
        assert!(text.contains("50.0") && text.contains('-'));
        assert!(t.to_csv().contains("1p,mrr,0.500000"));
        assert!(!t.to_csv().contains("2p,"));
    }
}
