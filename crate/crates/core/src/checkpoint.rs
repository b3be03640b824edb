//! Binary training checkpoints.
//!
//! Layout (little-endian): magic `NNKG`, `u32` version, a header with the
//! model and training configuration, table sizes and a manifest of parameter
//! names and shapes, then every parameter as a length-prefixed `f32` array in
//! manifest order, the Adam moments and step, the iteration counter and the
//! sampler RNG position. A trailing SHA-256 over everything before it
//! detects truncation and corruption.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ops::{EntityInit, Family, Model, ModelConfig};
use crate::query::QueryStructure;
use crate::tensor::{AdamConfig, Real, Tensor};
use crate::train::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"NNKG";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint is truncated or corrupted (integrity check failed)")]
    Integrity,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor<F: Real>(&mut self, t: &Tensor<F>) {
        self.u64(t.len() as u64);
        for v in t.data() {
            self.0.extend_from_slice(&(Real::to_f64(*v) as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Format("size overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Format("invalid utf-8".into()))
    }
    /// Reads a tensor body into `dst`, which fixes the expected length.
    fn tensor_into<F: Real>(&mut self, dst: &mut Tensor<F>, what: &str) -> Result<()> {
        let n = self.usize()?;
        if n != dst.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{what}: {n} values stored, {} expected",
                dst.len()
            )));
        }
        let bytes = self.take(n * 4)?;
        for (o, c) in dst.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *o = F::from_f64(f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64);
        }
        Ok(())
    }
}

fn write_model_config(w: &mut Writer, c: &ModelConfig) {
    w.str(c.family.name());
    w.u64(c.dim as u64);
    w.u64(c.hidden_dim as u64);
    w.u64(c.mlp_layers as u64);
    w.u64(c.mixer_blocks as u64);
    w.f64(c.mixer_dropout);
    w.f64(c.nln_weight);
    w.u8(match c.entity_init {
        EntityInit::Random => 0,
        EntityInit::Zero => 1,
    });
    w.f64(c.init_bound);
}

fn read_model_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let family: Family = r.str()?.parse().map_err(|e| CheckpointError::Format(format!("{e}")))?;
    Ok(ModelConfig {
        family,
        dim: r.usize()?,
        hidden_dim: r.usize()?,
        mlp_layers: r.usize()?,
        mixer_blocks: r.usize()?,
        mixer_dropout: r.f64()?,
        nln_weight: r.f64()?,
        entity_init: match r.u8()? {
            0 => EntityInit::Random,
            1 => EntityInit::Zero,
            other => return Err(CheckpointError::Format(format!("entity init tag {other}"))),
        },
        init_bound: r.f64()?,
    })
}

fn write_train_config(w: &mut Writer, c: &TrainConfig) {
    w.f64(c.margin);
    w.u64(c.negatives as u64);
    w.u64(c.batch_size as u64);
    w.f64(c.learning_rate);
    w.u64(c.iterations);
    w.u64(c.eval_every);
    w.u64(c.checkpoint_every);
    w.u64(c.seed);
    w.u32(c.structure_weights.len() as u32);
    for (s, wt) in &c.structure_weights {
        w.str(s.tag());
        w.f64(*wt);
    }
}

fn read_train_config(r: &mut Reader<'_>) -> Result<TrainConfig> {
    let mut c = TrainConfig {
        margin: r.f64()?,
        negatives: r.usize()?,
        batch_size: r.usize()?,
        learning_rate: r.f64()?,
        iterations: r.u64()?,
        eval_every: r.u64()?,
        checkpoint_every: r.u64()?,
        seed: r.u64()?,
        structure_weights: Vec::new(),
    };
    for _ in 0..r.u32()? {
        let tag = r.str()?;
        let s: QueryStructure = tag
            .parse()
            .map_err(|_| CheckpointError::Format(format!("unknown structure `{tag}`")))?;
        c.structure_weights.push((s, r.f64()?));
    }
    Ok(c)
}

impl<F: Real> Trainer<F> {
    /// Serializes the full training state. Values are stored as `f32`.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        write_model_config(&mut w, self.model.config());
        w.u64(self.model.entity_count() as u64);
        w.u64(self.model.relation_count() as u64);
        write_train_config(&mut w, &self.config);
        let params = self.model.params();
        w.u32(params.len() as u32);
        for p in params.iter() {
            w.str(&p.name);
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
        }
        for p in params.iter() {
            w.tensor(&p.value);
        }
        let AdamConfig { beta1, beta2, eps } = self.adam.config;
        w.f64(beta1);
        w.f64(beta2);
        w.f64(eps);
        w.u64(self.adam.step);
        for t in self.adam.m.iter().chain(&self.adam.v) {
            w.tensor(t);
        }
        w.u64(self.iteration);
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < 8 + 32 {
            return Err(CheckpointError::Integrity);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Integrity);
        }
        let mut r = Reader { buf: body, pos: 4 };
        let found = r.u32()?;
        if found != VERSION {
            return Err(CheckpointError::Version { found });
        }
        let model_config = read_model_config(&mut r)?;
        let entities = r.usize()?;
        let relations = r.usize()?;
        let train_config = read_train_config(&mut r)?;
        let mut model = Model::<F>::new(model_config, entities, relations, 0)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let count = r.u32()? as usize;
        if count != model.params().len() {
            return Err(CheckpointError::Mismatch(format!(
                "{count} parameters stored, model has {}",
                model.params().len()
            )));
        }
        for p in model.params().iter() {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            if name != p.name || shape != p.value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "parameter `{name}` {shape:?} where `{}` {:?} was expected",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for p in model.params_mut().iter_mut() {
            let what = p.name.clone();
            r.tensor_into(&mut p.value, &what)?;
        }
        let mut trainer = Trainer::from_model(model, train_config);
        trainer.adam.config = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        trainer.adam.step = r.u64()?;
        let Trainer { adam, .. } = &mut trainer;
        for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            r.tensor_into(t, "optimizer moment")?;
        }
        trainer.iteration = r.u64()?;
        let seed: [u8; 32] = r.array()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        trainer.rng = rng;
        if r.pos != body.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(trainer)
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint at `path`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_checkpoint_bytes()).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Refuses a checkpoint whose family, dimension or table sizes differ
    /// from what the caller expects.
    pub fn check_compatible(&self, family: Family, dim: usize, entities: usize, relations: usize) -> Result<()> {
        let m = &self.model;
        let mut problems = Vec::new();
        if m.family() != family {
            problems.push(format!("family {} vs {family}", m.family()));
        }
        if m.dim() != dim {
            problems.push(format!("dim {} vs {dim}", m.dim()));
        }
        if m.entity_count() != entities {
            problems.push(format!("{} entities vs {entities}", m.entity_count()));
        }
        if m.relation_count() != relations {
            problems.push(format!("{} relations vs {relations}", m.relation_count()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::Mismatch(problems.join(", ")))
        }
    }
}
