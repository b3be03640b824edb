//! Flat `key = value` run configuration. One pair per line, `#` starts a
//! comment. Every key has a default; `resolved()` writes them all back out in
//! a form `parse` accepts.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use nnkg_core::kg::Split;
use nnkg_core::ops::ModelConfig;
#[cfg(test)]
use nnkg_core::ops::Family;
use nnkg_core::query::QueryStructure;
use nnkg_core::sampler::{EvalSplit, DEFAULT_MAX_ANSWERS};
use nnkg_core::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("{}unknown key `{key}`", at(*line))]
    UnknownKey { line: Option<usize>, key: String },
    #[error("line {line}: `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("{}bad value for `{key}`: {message}", at(*line))]
    Value {
        line: Option<usize>,
        key: String,
        message: String,
    },
}

fn at(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

pub const KEYS: [&str; 35] = [
    "bundle",
    "queries",
    "checkpoint",
    "family",
    "dim",
    "hidden_dim",
    "mlp_layers",
    "mixer_blocks",
    "mixer_dropout",
    "nln_weight",
    "entity_init",
    "init_bound",
    "margin",
    "negatives",
    "batch_size",
    "learning_rate",
    "iterations",
    "structure_weights",
    "eval_every",
    "checkpoint_every",
    "seed",
    "fol",
    "structures",
    "splits",
    "count",
    "eval_count",
    "max_answers",
    "max_attempts",
    "require_hard",
    "eval_split",
    "threads",
    "resume",
    "top_n",
    "precision",
    "verify",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory written by `ingest`.
    pub bundle: Option<PathBuf>,
    /// Directory of `<split>-<structure>.queries` files.
    pub queries: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Adds the negation structures to the default structure lists.
    pub fol: bool,
    /// Explicit structure list; `None` picks by split and `fol`.
    pub structures: Option<Vec<QueryStructure>>,
    pub splits: Vec<Split>,
    /// Queries per structure sampled on the training graph.
    pub count: usize,
    /// Queries per structure sampled on the validation and test graphs.
    pub eval_count: usize,
    pub max_answers: usize,
    /// 0 uses the sampler default.
    pub max_attempts: usize,
    /// Drop valid/test queries with no hard answer.
    pub require_hard: bool,
    pub eval_split: EvalSplit,
    pub threads: usize,
    pub resume: Option<PathBuf>,
    pub top_n: usize,
    /// Floating point width of the trainer: 32 or 64.
    pub precision: u32,
    /// Re-check generated answers with an independent traversal.
    pub verify: bool,
    explicit: BTreeSet<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            bundle: None,
            queries: None,
            checkpoint: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fol: false,
            structures: None,
            splits: Split::ALL.to_vec(),
            count: 10_000,
            eval_count: 1_000,
            max_answers: DEFAULT_MAX_ANSWERS,
            max_attempts: 0,
            require_hard: true,
            eval_split: EvalSplit::Test,
            threads: 1,
            resume: None,
            top_n: 10,
            precision: 32,
            verify: false,
            explicit: BTreeSet::new(),
        }
    }
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: ToString,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e: T::Err| e.to_string()))
        .collect()
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: ToString,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) && KEYS.contains(&key) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.into(),
                });
            }
            cfg.apply(key, value.trim(), Some(line))?;
        }
        Ok(cfg)
    }

    /// Sets one key, as a command-line override would.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.apply(key, value.trim(), None)
    }

    /// Whether `key` was given in the file or by an override.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    fn apply(&mut self, key: &str, v: &str, line: Option<usize>) -> Result<(), ConfigError> {
        let Some(&name) = KEYS.iter().find(|k| **k == key) else {
            return Err(ConfigError::UnknownKey { line, key: key.into() });
        };
        let bad = |message: String| ConfigError::Value {
            line,
            key: key.into(),
            message,
        };
        let m = &mut self.model;
        let t = &mut self.train;
        match name {
            "bundle" => self.bundle = path(v),
            "queries" => self.queries = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "family" => m.family = v.parse().map_err(|e: nnkg_core::ops::OpsError| bad(e.to_string()))?,
            "dim" => m.dim = num(v).map_err(bad)?,
            "hidden_dim" => m.hidden_dim = num(v).map_err(bad)?,
            "mlp_layers" => m.mlp_layers = num(v).map_err(bad)?,
            "mixer_blocks" => m.mixer_blocks = num(v).map_err(bad)?,
            "mixer_dropout" => m.mixer_dropout = num(v).map_err(bad)?,
            "nln_weight" => m.nln_weight = num(v).map_err(bad)?,
            "entity_init" => {
                m.entity_init = v.parse().map_err(|e: nnkg_core::ops::OpsError| bad(e.to_string()))?
            }
            "init_bound" => m.init_bound = num(v).map_err(bad)?,
            "margin" => t.margin = num(v).map_err(bad)?,
            "negatives" => t.negatives = num(v).map_err(bad)?,
            "batch_size" => t.batch_size = num(v).map_err(bad)?,
            "learning_rate" => t.learning_rate = num(v).map_err(bad)?,
            "iterations" => t.iterations = num(v).map_err(bad)?,
            "structure_weights" => {
                let mut weights = Vec::new();
                for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (s, w) = item
                        .split_once(':')
                        .ok_or_else(|| bad(format!("expected structure:weight, got `{item}`")))?;
                    let s: QueryStructure = s.trim().parse().map_err(|e: nnkg_core::query::QueryError| bad(e.to_string()))?;
                    weights.push((s, num(w.trim()).map_err(bad)?));
                }
                t.structure_weights = weights;
            }
            "eval_every" => t.eval_every = num(v).map_err(bad)?,
            "checkpoint_every" => t.checkpoint_every = num(v).map_err(bad)?,
            "seed" => t.seed = num(v).map_err(bad)?,
            "fol" => self.fol = num(v).map_err(bad)?,
            "structures" => {
                self.structures = match v {
                    "" | "default" => None,
                    "epfo" => Some(QueryStructure::EPFO.to_vec()),
                    "negation" => Some(QueryStructure::NEGATION.to_vec()),
                    "all" => Some(QueryStructure::ALL.to_vec()),
                    _ => Some(list(v).map_err(bad)?),
                }
            }
            "splits" => {
                let splits: Vec<Split> = list(v).map_err(bad)?;
                if splits.is_empty() {
                    return Err(bad("at least one split required".into()));
                }
                self.splits = splits;
            }
            "count" => self.count = num(v).map_err(bad)?,
            "eval_count" => self.eval_count = num(v).map_err(bad)?,
            "max_answers" => self.max_answers = num(v).map_err(bad)?,
            "max_attempts" => self.max_attempts = num(v).map_err(bad)?,
            "require_hard" => self.require_hard = num(v).map_err(bad)?,
            "eval_split" => {
                let s: Split = v.parse().map_err(bad)?;
                self.eval_split = EvalSplit::try_from(s).map_err(bad)?;
            }
            "threads" => {
                self.threads = num(v).map_err(bad)?;
                if self.threads == 0 {
                    return Err(bad("must be >= 1".into()));
                }
            }
            "resume" => self.resume = path(v),
            "top_n" => self.top_n = num(v).map_err(bad)?,
            "precision" => {
                self.precision = num(v).map_err(bad)?;
                if !matches!(self.precision, 32 | 64) {
                    return Err(bad("must be 32 or 64".into()));
                }
            }
            "verify" => self.verify = num(v).map_err(bad)?,
            _ => unreachable!("key list and match arms agree"),
        }
        self.explicit.insert(name);
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        match key {
            "bundle" => show_path(&self.bundle),
            "queries" => show_path(&self.queries),
            "checkpoint" => show_path(&self.checkpoint),
            "family" => m.family.to_string(),
            "dim" => m.dim.to_string(),
            "hidden_dim" => m.hidden_dim.to_string(),
            "mlp_layers" => m.mlp_layers.to_string(),
            "mixer_blocks" => m.mixer_blocks.to_string(),
            "mixer_dropout" => m.mixer_dropout.to_string(),
            "nln_weight" => m.nln_weight.to_string(),
            "entity_init" => m.entity_init.to_string(),
            "init_bound" => m.init_bound.to_string(),
            "margin" => t.margin.to_string(),
            "negatives" => t.negatives.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "iterations" => t.iterations.to_string(),
            "structure_weights" => t
                .structure_weights
                .iter()
                .map(|(s, w)| format!("{s}:{w}"))
                .collect::<Vec<_>>()
                .join(","),
            "eval_every" => t.eval_every.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "seed" => t.seed.to_string(),
            "fol" => self.fol.to_string(),
            "structures" => self.structures.as_deref().map_or_else(|| "default".into(), join),
            "splits" => join(&self.splits),
            "count" => self.count.to_string(),
            "eval_count" => self.eval_count.to_string(),
            "max_answers" => self.max_answers.to_string(),
            "max_attempts" => self.max_attempts.to_string(),
            "require_hard" => self.require_hard.to_string(),
            "eval_split" => self.eval_split.split().to_string(),
            "threads" => self.threads.to_string(),
            "resume" => show_path(&self.resume),
            "top_n" => self.top_n.to_string(),
            "precision" => self.precision.to_string(),
            "verify" => self.verify.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every key with its effective value.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.value(key));
        }
        s
    }

    /// Structures to sample or train on for `split`.
    pub fn structures_for(&self, split: Split) -> Vec<QueryStructure> {
        if let Some(s) = &self.structures {
            return s.clone();
        }
        let mut out = match split {
            Split::Train => QueryStructure::EPFO_TRAIN.to_vec(),
            _ => QueryStructure::EPFO.to_vec(),
        };
        if self.fol {
            out.extend(QueryStructure::NEGATION);
        }
        out
    }

    pub fn count_for(&self, split: Split) -> usize {
        match split {
            Split::Train => self.count,
            _ => self.eval_count,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_use_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.model.dim, 800);
        assert_eq!(
            (c.train.learning_rate, c.train.negatives, c.train.batch_size, c.train.margin),
            (1e-4, 128, 512, 24.0)
        );
        assert_eq!(c.threads, 1);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = RunConfig::parse("# toy\nfamily = mlp-attention\ndim=32 # small\n\nstructure_weights = 1p:4, 2p:2\n").unwrap();
        assert_eq!(c.model.family, Family::MlpAttention);
        assert_eq!(c.model.dim, 32);
        assert_eq!(c.train.structure_weights, vec![(QueryStructure::P1, 4.0), (QueryStructure::P2, 2.0)]);
        assert!(c.is_explicit("dim") && !c.is_explicit("margin"));
        c.set("dim", "64").unwrap();
        assert_eq!(c.model.dim, 64);
    }

    #[test]
    fn rejects_unknown_duplicate_and_bad_values() {
        assert_eq!(
            RunConfig::parse("dim = 3\nlearnin_rate = 1").unwrap_err(),
            ConfigError::UnknownKey {
                line: Some(2),
                key: "learnin_rate".into()
            }
        );
        assert!(matches!(
            RunConfig::parse("dim = 3\ndim = 4"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(RunConfig::parse("dim"), Err(ConfigError::Syntax { line: 1 })));
        let e = RunConfig::parse("\nthreads = 0").unwrap_err();
        assert!(e.to_string().starts_with("line 2: bad value for `threads`"), "{e}");
        assert!(RunConfig::default().set("eval_split", "train").is_err());
        assert!(RunConfig::default().set("nope", "1").is_err());
    }

    #[test]
    fn resolved_reparses_to_same_values() {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("bundle", "/data/fb"),
            ("family", "mlp-2vector"),
            ("structures", "1p,2in"),
            ("structure_weights", "3p:0.5"),
            ("learning_rate", "0.0003"),
            ("eval_split", "valid"),
            ("fol", "true"),
        ] {
            c.set(k, v).unwrap();
        }
        let back = RunConfig::parse(&c.resolved()).unwrap();
        assert_eq!(back.resolved(), c.resolved());
        assert_eq!(back.model, c.model);
        assert_eq!(back.train, c.train);
        assert_eq!(back.structures, c.structures);
    }

    #[test]
    fn default_structures_follow_split_and_fol() {
        let mut c = RunConfig::default();
        assert_eq!(c.structures_for(Split::Train).len(), 5);
        assert_eq!(c.structures_for(Split::Test).len(), 9);
        c.set("fol", "true").unwrap();
        assert_eq!(c.structures_for(Split::Train).len(), 10);
        assert_eq!(c.structures_for(Split::Valid).len(), 14);
    }
}
