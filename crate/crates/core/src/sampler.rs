//! Grounded query generation and the query-sample file format.
//!
//! A query is grounded by picking a target entity on the sampling graph and
//! walking the structure backwards from it: every projection follows a random
//! incoming edge of its current target, and every branch of an intersection,
//! union or negation starts from the same target. Answers are then computed
//! exactly on all three graphs and the sample is rejected (and a new target
//! drawn) if it violates the configured limits.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kg::{EntityId, EntitySet, GraphSplits, KnowledgeGraph, Split};
use crate::query::{build_structure, ground_truth_answers, parse_query, Query, QueryError, QueryInstance, QueryStructure};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("line {line}: {source}")]
    Query {
        line: usize,
        #[source]
        source: QueryError,
    },
}

pub const DEFAULT_MAX_ANSWERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    pub structure: QueryStructure,
    pub count: usize,
    pub max_answers: usize,
    pub seed: u64,
    /// Upper bound on grounding attempts before giving up with a partial result.
    pub max_attempts: usize,
    /// Reject queries without hard answers on the sampling split.
    pub require_hard: bool,
}

impl SamplerConfig {
    pub fn new(structure: QueryStructure, count: usize, seed: u64) -> Self {
        SamplerConfig {
            structure,
            count,
            max_answers: DEFAULT_MAX_ANSWERS,
            seed,
            max_attempts: count.saturating_mul(100).max(1000),
            require_hard: false,
        }
    }
}

/// Split on which hard answers are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalSplit {
    Valid,
    Test,
}

impl EvalSplit {
    pub fn split(self) -> Split {
        match self {
            EvalSplit::Valid => Split::Valid,
            EvalSplit::Test => Split::Test,
        }
    }
}

impl TryFrom<Split> for EvalSplit {
    type Error = String;

    fn try_from(s: Split) -> Result<Self, String> {
        match s {
            Split::Valid => Ok(EvalSplit::Valid),
            Split::Test => Ok(EvalSplit::Test),
            Split::Train => Err("evaluation split must be valid or test".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySample {
    pub query: QueryInstance,
    pub answers_train: EntitySet,
    pub answers_valid: EntitySet,
    pub answers_test: EntitySet,
}

impl QuerySample {
    pub fn from_splits(query: QueryInstance, splits: &GraphSplits) -> Self {
        QuerySample {
            answers_train: ground_truth_answers(&splits.train, query.root()),
            answers_valid: ground_truth_answers(&splits.valid, query.root()),
            answers_test: ground_truth_answers(&splits.test, query.root()),
            query,
        }
    }

    pub fn answers(&self, split: Split) -> &EntitySet {
        match split {
            Split::Train => &self.answers_train,
            Split::Valid => &self.answers_valid,
            Split::Test => &self.answers_test,
        }
    }

    /// Answers that only appear once the held-out edges of `eval` are added.
    pub fn hard_answers(&self, eval: EvalSplit) -> EntitySet {
        match eval {
            EvalSplit::Valid => self.answers_valid.difference(&self.answers_train),
            EvalSplit::Test => self.answers_test.difference(&self.answers_valid),
        }
    }

    pub fn is_trivial(&self, eval: EvalSplit) -> bool {
        self.hard_answers(eval).is_empty()
    }

    pub fn is_monotone(&self) -> bool {
        self.answers_train.is_subset(&self.answers_valid) && self.answers_valid.is_subset(&self.answers_test)
    }

    /// `expr<TAB>train<TAB>valid<TAB>test`, answers comma-separated.
    pub fn to_line(&self) -> String {
        let mut s = self.query.to_string();
        for set in [&self.answers_train, &self.answers_valid, &self.answers_test] {
            s.push('\t');
            for (i, e) in set.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write!(s, "{}", e.0).expect("writing to a String cannot fail");
            }
        }
        s
    }

    pub fn from_line(line: &str, line_no: usize) -> Result<Self, SamplerError> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(SamplerError::Format {
                line: line_no,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let query = parse_query(fields[0]).map_err(|source| SamplerError::Query { line: line_no, source })?;
        let mut sets = Vec::with_capacity(3);
        for field in &fields[1..] {
            let mut ids = Vec::new();
            for tok in field.split(',').filter(|t| !t.is_empty()) {
                ids.push(EntityId(tok.trim().parse().map_err(|_| SamplerError::Format {
                    line: line_no,
                    message: format!("bad entity id `{tok}`"),
                })?));
            }
            sets.push(EntitySet::from_unsorted(ids));
        }
        let answers_test = sets.pop().expect("three sets");
        let answers_valid = sets.pop().expect("three sets");
        let answers_train = sets.pop().expect("three sets");
        Ok(QuerySample {
            query,
            answers_train,
            answers_valid,
            answers_test,
        })
    }
}

pub fn write_samples<W: Write>(mut w: W, samples: &[QuerySample]) -> io::Result<()> {
    for s in samples {
        writeln!(w, "{}", s.to_line())?;
    }
    Ok(())
}

pub fn save_samples(path: &Path, samples: &[QuerySample]) -> Result<(), SamplerError> {
    let io_err = |source| SamplerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write_samples(&mut w, samples).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<QuerySample>, SamplerError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| SamplerError::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(QuerySample::from_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn load_samples(path: &Path) -> Result<Vec<QuerySample>, SamplerError> {
    let file = File::open(path).map_err(|source| SamplerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_samples(BufReader::new(file))
}

/// Why grounding attempts were discarded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Rejections {
    pub dead_end: usize,
    pub degenerate: usize,
    pub no_answer: usize,
    pub too_many_answers: usize,
    pub non_monotone: usize,
    pub no_hard_answer: usize,
}

impl Rejections {
    pub fn total(&self) -> usize {
        self.dead_end
            + self.degenerate
            + self.no_answer
            + self.too_many_answers
            + self.non_monotone
            + self.no_hard_answer
    }
}

#[derive(Debug, Clone)]
pub struct SampleReport {
    pub samples: Vec<QuerySample>,
    pub attempts: usize,
    pub rejections: Rejections,
}

impl SampleReport {
    /// Queries requested but not produced within the attempt budget.
    pub fn shortfall(&self, requested: usize) -> usize {
        requested.saturating_sub(self.samples.len())
    }
}

enum Grounding {
    Ok(Query),
    DeadEnd,
    Degenerate,
}

fn ground(template: &Query, target: EntityId, graph: &KnowledgeGraph, rng: &mut ChaCha8Rng) -> Grounding {
    match template {
        Query::Anchor(_) => Grounding::Ok(Query::Anchor(target)),
        Query::Project(child, _) => {
            let degree = graph.out_degree(target);
            if degree == 0 {
                return Grounding::DeadEnd;
            }
            // An edge (target, r', h) stands for the incoming edge (h, r'^1, target).
            let (rel, source) = graph.out_edge(target, rng.random_range(0..degree));
            match ground(child, source, graph, rng) {
                Grounding::Ok(c) => Grounding::Ok(Query::Project(Box::new(c), rel.inverse())),
                other => other,
            }
        }
        Query::Negate(child) => match ground(child, target, graph, rng) {
            Grounding::Ok(c) => Grounding::Ok(Query::Negate(Box::new(c))),
            other => other,
        },
        Query::Intersect(cs) | Query::Union(cs) => {
            let mut out = Vec::with_capacity(cs.len());
            for c in cs {
                match ground(c, target, graph, rng) {
                    Grounding::Ok(q) => {
                        if out.contains(&q) {
                            return Grounding::Degenerate;
                        }
                        out.push(q);
                    }
                    other => return other,
                }
            }
            Grounding::Ok(if matches!(template, Query::Intersect(_)) {
                Query::Intersect(out)
            } else {
                Query::Union(out)
            })
        }
    }
}

/// Generates up to `cfg.count` grounded samples whose anchors are walked on
/// the `target` split's graph. Deterministic for a given seed.
pub fn sample_queries(splits: &GraphSplits, cfg: &SamplerConfig, target: Split) -> SampleReport {
    let graph = splits.graph(target);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = SampleReport {
        samples: Vec::with_capacity(cfg.count),
        attempts: 0,
        rejections: Rejections::default(),
    };
    if cfg.count == 0 {
        return report;
    }
    let candidates: Vec<EntityId> = (0..graph.entity_count() as u32)
        .map(EntityId)
        .filter(|e| graph.out_degree(*e) > 0)
        .collect();
    if candidates.is_empty() {
        return report;
    }
    let (na, nr) = cfg.structure.arity();
    let template = build_structure(
        cfg.structure,
        &vec![EntityId(0); na],
        &vec![Default::default(); nr],
    )
    .expect("template arity matches")
    .root()
    .clone();
    let hard_split = EvalSplit::try_from(target).ok();

    while report.samples.len() < cfg.count && report.attempts < cfg.max_attempts {
        report.attempts += 1;
        let start = candidates[rng.random_range(0..candidates.len())];
        let root = match ground(&template, start, graph, &mut rng) {
            Grounding::Ok(q) => q,
            Grounding::DeadEnd => {
                report.rejections.dead_end += 1;
                continue;
            }
            Grounding::Degenerate => {
                report.rejections.degenerate += 1;
                continue;
            }
        };
        let query = QueryInstance::from_root(root).expect("grounded template keeps its shape");
        let sample = QuerySample::from_splits(query, splits);
        let on_target = sample.answers(target);
        if on_target.is_empty() {
            report.rejections.no_answer += 1;
        } else if on_target.len() > cfg.max_answers {
            report.rejections.too_many_answers += 1;
        } else if !sample.is_monotone() {
            report.rejections.non_monotone += 1;
        } else if cfg.require_hard && hard_split.is_some_and(|h| sample.is_trivial(h)) {
            report.rejections.no_hard_answer += 1;
        } else {
            report.samples.push(sample);
        }
    }
    report
}

/// Key/value manifest describing one generated query file.
pub fn manifest_text(cfg: &SamplerConfig, target: Split, report: &SampleReport, splits: &GraphSplits) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "structure={}", cfg.structure);
    let _ = writeln!(s, "split={target}");
    let _ = writeln!(s, "requested={}", cfg.count);
    let _ = writeln!(s, "emitted={}", report.samples.len());
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "max_answers={}", cfg.max_answers);
    let _ = writeln!(s, "max_attempts={}", cfg.max_attempts);
    let _ = writeln!(s, "require_hard={}", cfg.require_hard);
    let _ = writeln!(s, "attempts={}", report.attempts);
    let _ = writeln!(s, "rejected={}", report.rejections.total());
    for split in Split::ALL {
        let _ = writeln!(s, "{split}_graph_sha256={}", splits.graph(split).content_hash());
    }
    s
}

/// Mean answer count on `split` (used for dataset statistics).
pub fn mean_answer_count(samples: &[QuerySample], split: Split) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.answers(split).len() as f64).sum::<f64>() / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{build_splits, Triple};

    fn toy_splits() -> GraphSplits {
        let train = [
            Triple::new(0, 0, 1),
            Triple::new(0, 0, 2),
            Triple::new(1, 2, 3),
            Triple::new(2, 2, 4),
            Triple::new(4, 0, 5),
        ];
        let valid = [Triple::new(3, 0, 5)];
        let test = [Triple::new(1, 2, 4)];
        build_splits(6, 2, &train, &valid, &test).unwrap()
    }

    #[test]
    fn hard_answer_examples() {
        let q = parse_query("(p 0 (e 0))").unwrap();
        let s = QuerySample {
            query: q.clone(),
            answers_train: EntitySet::from(vec![0]),
            answers_valid: EntitySet::from(vec![0, 1]),
            answers_test: EntitySet::from(vec![0, 1, 2]),
        };
        assert_eq!(s.hard_answers(EvalSplit::Test), EntitySet::from(vec![2]));
        assert_eq!(s.hard_answers(EvalSplit::Valid), EntitySet::from(vec![1]));
        let flat = QuerySample {
            query: q,
            answers_train: EntitySet::from(vec![4]),
            answers_valid: EntitySet::from(vec![4]),
            answers_test: EntitySet::from(vec![4]),
        };
        assert!(flat.is_trivial(EvalSplit::Test));
    }

    #[test]
    fn held_out_edge_completes_two_hop_path() {
        let splits = toy_splits();
        // 0 -r-> 1 -s-> {3} on train/valid; the test edge (1, s, 4) adds 4.
        let q = parse_query("(p 2 (p 0 (e 0)))").unwrap();
        let s = QuerySample::from_splits(q, &splits);
        assert_eq!(s.answers_valid, EntitySet::from(vec![3, 4]));
        assert_eq!(s.answers_test, EntitySet::from(vec![3, 4]));
        let q = parse_query("(p 2 (e 1))").unwrap();
        let s = QuerySample::from_splits(q, &splits);
        assert_eq!(s.hard_answers(EvalSplit::Test), EntitySet::from(vec![4]));
    }

    #[test]
    fn zero_count_is_empty() {
        let splits = toy_splits();
        let report = sample_queries(&splits, &SamplerConfig::new(QueryStructure::P1, 0, 1), Split::Train);
        assert!(report.samples.is_empty());
        assert_eq!(report.attempts, 0);
    }

    #[test]
    fn samples_are_sound_and_deterministic() {
        let splits = toy_splits();
        let cfg = SamplerConfig::new(QueryStructure::P1, 3, 42);
        let a = sample_queries(&splits, &cfg, Split::Train);
        let b = sample_queries(&splits, &cfg, Split::Train);
        assert_eq!(a.samples.len(), 3);
        assert_eq!(a.samples, b.samples);
        for s in &a.samples {
            assert!(!s.answers_train.is_empty());
            assert!(s.is_monotone());
        }
    }

    #[test]
    fn line_roundtrip() {
        let splits = toy_splits();
        let cfg = SamplerConfig::new(QueryStructure::Pi, 4, 3);
        for s in sample_queries(&splits, &cfg, Split::Test).samples {
            assert_eq!(QuerySample::from_line(&s.to_line(), 1).unwrap(), s);
        }
        assert!(QuerySample::from_line("(p 0 (e 1))\t1", 7).is_err());
    }
}
