//! The subcommands. Each takes the resolved configuration and an output
//! directory, writes `config.resolved` there first, and returns the text
//! meant for stdout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nnkg_core::bundle::{Bundle, BundleError, MANIFEST};
use nnkg_core::checkpoint::CheckpointError;
use nnkg_core::eval::{evaluate, random_baseline, rank_query, EvalError, Targets};
use nnkg_core::kg::Split;
use nnkg_core::ops::OpsError;
use nnkg_core::query::{parse_expr, QueryError, QueryStructure};
use nnkg_core::sampler::{
    load_samples, manifest_text, mean_answer_count, sample_queries, save_samples, QuerySample, SamplerConfig,
    SamplerError,
};
use nnkg_core::tensor::Real;
use nnkg_core::train::{train, TrainError, TrainHooks, Trainer, TrainingSet};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::verify;

pub const BUNDLE_DIR: &str = "bundle";
pub const QUERIES_DIR: &str = "queries";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

impl From<BundleError> for CliError {
    fn from(e: BundleError) -> Self {
        data(e)
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        data(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Mismatch(m) => CliError::Usage(format!("checkpoint does not match the configuration: {m}")),
            other => data(other),
        }
    }
}

impl From<OpsError> for CliError {
    fn from(e: OpsError) -> Self {
        match e {
            OpsError::UnsupportedOperator { .. } | OpsError::Config(_) => CliError::Usage(e.to_string()),
            OpsError::Tensor(t) => CliError::Numeric(t.to_string()),
            other => data(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Ops(o) => o.into(),
            other => data(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
            TrainError::Ops(o) => o.into(),
            TrainError::Eval(o) => o.into(),
            TrainError::Checkpoint(c) => c.into(),
            other => data(other),
        }
    }
}

/// Creates the fixed output layout and records the configuration.
pub fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    for sub in ["checkpoints", "metrics", "logs"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    }
    let path = out.join("config.resolved");
    fs::write(&path, cfg.resolved()).map_err(io_at(&path))
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("`{key}` is not set (use --config or --set {key}=...)")))
}

fn load_bundle(cfg: &RunConfig) -> Result<Bundle> {
    Ok(Bundle::load(required(&cfg.bundle, "bundle")?)?)
}

pub fn query_file(split: Split, structure: QueryStructure) -> String {
    format!("{split}-{}.queries", structure.tag())
}

/// Samples of `split` for each structure, read from the `queries` directory.
fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<QuerySample>> {
    let dir = required(&cfg.queries, "queries")?;
    let mut all = Vec::new();
    for s in cfg.structures_for(split) {
        let path = dir.join(query_file(split, s));
        if !path.is_file() {
            return Err(CliError::Data(format!("missing query file {}", path.display())));
        }
        let samples = load_samples(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if let Some(bad) = samples.iter().position(|q| q.query.structure() != s) {
            return Err(CliError::Data(format!(
                "{}: line {} is not a {s} query",
                path.display(),
                bad + 1
            )));
        }
        all.extend(samples);
    }
    Ok(all)
}

pub fn ingest(cfg: &RunConfig, triples: &Path, out: &Path) -> Result<String> {
    prepare_out(cfg, out)?;
    let bundle = Bundle::ingest(triples)?;
    let dir = out.join(BUNDLE_DIR);
    bundle.save(&dir)?;
    Ok(bundle.stats())
}

/// Sampler seed for one (split, structure) file, so files are independent
/// of which other files are generated alongside them.
fn file_seed(seed: u64, split: Split, structure: QueryStructure) -> u64 {
    let s = QueryStructure::ALL.iter().position(|x| *x == structure).expect("known structure") as u64;
    let p = Split::ALL.iter().position(|x| *x == split).expect("known split") as u64;
    seed.wrapping_mul(1_000_003).wrapping_add(p * 100 + s)
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<String> {
    prepare_out(cfg, out)?;
    let bundle = load_bundle(cfg)?;
    let dir = out.join(QUERIES_DIR);
    fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let mut report = String::new();
    for &split in &cfg.splits {
        for structure in cfg.structures_for(split) {
            let count = cfg.count_for(split);
            let mut sc = SamplerConfig::new(structure, count, file_seed(cfg.train.seed, split, structure));
            sc.max_answers = cfg.max_answers;
            if cfg.max_attempts > 0 {
                sc.max_attempts = cfg.max_attempts;
            }
            sc.require_hard = cfg.require_hard && split != Split::Train;
            let result = sample_queries(&bundle.splits, &sc, split);
            let path = dir.join(query_file(split, structure));
            save_samples(&path, &result.samples)?;
            let manifest = path.with_extension("manifest");
            fs::write(&manifest, manifest_text(&sc, split, &result, &bundle.splits)).map_err(io_at(&manifest))?;
            if cfg.verify {
                let reread = load_samples(&path)?;
                let bad = verify::mismatches(&bundle.splits, &reread);
                if !bad.is_empty() {
                    return Err(CliError::Data(format!(
                        "{}: {} lines disagree with the edge-list traversal (first: line {})",
                        path.display(),
                        bad.len(),
                        bad[0]
                    )));
                }
            }
            let short = result.shortfall(count);
            report += &format!(
                "{split}-{}: {} queries{}\n",
                structure.tag(),
                result.samples.len(),
                if short > 0 { format!(" ({short} short of {count})") } else { String::new() }
            );
        }
    }
    if cfg.verify {
        report += "verify: all answer sets match\n";
    }
    Ok(report)
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<String> {
    match cfg.precision {
        64 => train_with::<f64>(cfg, out),
        _ => train_with::<f32>(cfg, out),
    }
}

fn train_with<F: Real>(cfg: &RunConfig, out: &Path) -> Result<String> {
    prepare_out(cfg, out)?;
    cfg.train.validate()?;
    let bundle = load_bundle(cfg)?;
    let samples = load_split(cfg, Split::Train)?;
    let data = TrainingSet::new(&samples, &cfg.train.structure_weights)?;
    let validation = if cfg.train.eval_every > 0 {
        load_split(cfg, Split::Valid)?
    } else {
        Vec::new()
    };
    let (e, r) = (bundle.entity_count(), bundle.relation_count());
    let mut trainer = match &cfg.resume {
        Some(path) => {
            let mut t = Trainer::<F>::load_checkpoint(path)?;
            t.check_compatible(cfg.model.family, cfg.model.dim, e, r)?;
            *t.config_mut() = cfg.train.clone();
            t
        }
        None => Trainer::<F>::new(cfg.model.clone(), e, r, cfg.train.clone())?,
    };
    let log_path = out.join("logs").join("train.csv");
    let file = fs::File::create(&log_path).map_err(io_at(&log_path))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "iteration,kind,value").map_err(io_at(&log_path))?;
    let ckpt_dir = out.join("checkpoints");
    let start = Instant::now();
    let mut hooks = TrainHooks {
        validation: (!validation.is_empty()).then_some((validation.as_slice(), nnkg_core::sampler::EvalSplit::Valid)),
        checkpoint_dir: Some(&ckpt_dir),
        log: Some(&mut log),
        threads: cfg.threads,
    };
    let result = train(&mut trainer, &data, &mut hooks);
    log.flush().map_err(io_at(&log_path))?;
    let report = result?;
    let final_path = ckpt_dir.join(FINAL_CHECKPOINT);
    trainer.save_checkpoint(&final_path)?;
    // wall-clock time goes to a sidecar so the primary outputs stay reproducible
    let timing = out.join("logs").join("timing.txt");
    fs::write(&timing, format!("train_seconds={:.3}\n", start.elapsed().as_secs_f64())).map_err(io_at(&timing))?;
    let mut msg = format!("iterations={}\n", trainer.iteration());
    if let Some(l) = report.losses.last() {
        msg += &format!("final_loss={l:.6}\n");
    }
    if let Some((it, table)) = report.validations.last() {
        if let Some(avg) = table.average {
            msg += &format!("valid_mrr@{it}={:.4}\n", avg.mrr);
        }
    }
    msg += &format!("checkpoint={}\n", final_path.display());
    Ok(msg)
}

fn load_model<F: Real>(cfg: &RunConfig, entities: Option<usize>) -> Result<Trainer<F>> {
    let path = required(&cfg.checkpoint, "checkpoint")?;
    let t = Trainer::<F>::load_checkpoint(path)?;
    let m = t.model();
    let family = if cfg.is_explicit("family") { cfg.model.family } else { m.family() };
    let dim = if cfg.is_explicit("dim") { cfg.model.dim } else { m.dim() };
    t.check_compatible(family, dim, m.entity_count(), m.relation_count())?;
    if let Some(n) = entities {
        if n != m.entity_count() {
            return Err(CliError::Data(format!(
                "checkpoint has {} entities but the bundle has {n}",
                m.entity_count()
            )));
        }
    }
    Ok(t)
}

pub fn eval_cmd(cfg: &RunConfig, out: &Path) -> Result<String> {
    match cfg.precision {
        64 => eval_with::<f64>(cfg, out),
        _ => eval_with::<f32>(cfg, out),
    }
}

fn eval_with<F: Real>(cfg: &RunConfig, out: &Path) -> Result<String> {
    prepare_out(cfg, out)?;
    let bundle = cfg.bundle.as_ref().map(|_| load_bundle(cfg)).transpose()?;
    let trainer = load_model::<F>(cfg, bundle.as_ref().map(Bundle::entity_count))?;
    let split = cfg.eval_split;
    let samples = load_split(cfg, split.split())?;
    let table = evaluate(trainer.model(), &samples, split, cfg.threads)?;
    let base = random_baseline(&samples, Targets::Hard(split), trainer.model().entity_count());
    let metrics = out.join("metrics");
    for (name, text) in [
        (format!("{}.csv", split.split()), table.to_csv()),
        (format!("{}.txt", split.split()), table.to_text()),
        (format!("{}-random.csv", split.split()), base.to_csv()),
    ] {
        let path = metrics.join(name);
        fs::write(&path, text).map_err(io_at(&path))?;
    }
    Ok(table.to_text())
}

pub fn rank_cmd(cfg: &RunConfig, query: &str, out: &Path) -> Result<String> {
    prepare_out(cfg, out)?;
    let bundle = cfg.bundle.as_ref().map(|_| load_bundle(cfg)).transpose()?;
    let trainer = load_model::<f32>(cfg, bundle.as_ref().map(Bundle::entity_count))?;
    let q = parse_expr(query).map_err(|e: QueryError| CliError::Usage(format!("query: {e}")))?;
    let ranked = rank_query(trainer.model(), &q, cfg.top_n).map_err(|e| match e {
        EvalError::Ops(OpsError::IdOutOfRange { .. }) | EvalError::Query(_) => CliError::Usage(format!("query: {e}")),
        other => other.into(),
    })?;
    let mut s = String::new();
    for (i, (e, d)) in ranked.iter().enumerate() {
        let name = bundle.as_ref().map_or_else(|| e.0.to_string(), |b| b.entity_name(e.0));
        s += &format!("{}\t{name}\t{:.6}\n", i + 1, d.to_f64());
    }
    Ok(s)
}

/// Describes a bundle directory, checkpoint or query file.
pub fn info(path: &Path) -> Result<String> {
    if path.join(MANIFEST).is_file() {
        return Ok(Bundle::load(path)?.stats());
    }
    if !path.is_file() {
        return Err(CliError::Usage(format!("{}: not a bundle, checkpoint or query file", path.display())));
    }
    if path.extension().is_some_and(|x| x == "queries") {
        let samples = load_samples(path)?;
        let mut by: BTreeMap<usize, Vec<QuerySample>> = BTreeMap::new();
        for q in samples {
            let pos = QueryStructure::ALL.iter().position(|s| *s == q.query.structure()).expect("known structure");
            by.entry(pos).or_default().push(q);
        }
        let mut s = String::from("structure,queries,mean_train_answers,mean_test_answers\n");
        for (pos, qs) in by {
            s += &format!(
                "{},{},{:.2},{:.2}\n",
                QueryStructure::ALL[pos],
                qs.len(),
                mean_answer_count(&qs, Split::Train),
                mean_answer_count(&qs, Split::Test)
            );
        }
        return Ok(s);
    }
    let t = Trainer::<f32>::load_checkpoint(path)?;
    let m = t.model();
    Ok(format!(
        "family={}\ndim={}\nentities={}\nrelations={}\niteration={}\n",
        m.family(),
        m.dim(),
        m.entity_count(),
        m.relation_count() / 2,
        t.iteration()
    ))
}
