//! Neural logical operators and the query embedding pipeline.
//!
//! Every operator maps d-dimensional points to a d-dimensional point:
//! projection and intersection take two inputs, negation takes one. A query is
//! embedded by rewriting it to DNF and folding each conjunct bottom-up; anchors
//! read entity rows, relations read relation rows.
//!
//! Batches are processed per query shape: queries with the same canonical
//! shape run through the operators as one matrix per tree node.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kg::{EntityId, RelationId};
use crate::query::{Query, QueryError, QueryStructure};
use crate::tensor::{
    affine_backward, conv1d_backward, conv1d_forward, dropout_backward, dropout_forward, layer_norm_backward,
    layer_norm_forward, lit, maxpool1d_backward, maxpool1d_forward, relu_backward, relu_forward, softmax_backward,
    softmax_forward, LayerNormCache, ParamId, ParamStore, Real, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum OpsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("the {family} family has no {operator} operator")]
    UnsupportedOperator { family: Family, operator: &'static str },
    #[error("intersection needs at least 2 inputs, got {0}")]
    Arity(usize),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{kind} id {id} out of range (count {count})")]
    IdOutOfRange {
        kind: &'static str,
        id: u32,
        count: usize,
    },
    #[error("conjunct contains a union; rewrite to DNF first")]
    UnionInConjunct,
}

pub type Result<T, E = OpsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Mlp,
    Mixer,
    MlpAttention,
    Mlp2Vector,
    Cnn,
    Nln,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Mlp,
        Family::Mixer,
        Family::MlpAttention,
        Family::Mlp2Vector,
        Family::Cnn,
        Family::Nln,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::Mixer => "mlp-mixer",
            Family::MlpAttention => "mlp-attention",
            Family::Mlp2Vector => "mlp-2vector",
            Family::Cnn => "cnn",
            Family::Nln => "nln",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = OpsError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| OpsError::Config(format!("unknown model family `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityInit {
    /// Uniform in `±init_bound`.
    Random,
    Zero,
}

impl FromStr for EntityInit {
    type Err = OpsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(EntityInit::Random),
            "zero" => Ok(EntityInit::Zero),
            other => Err(OpsError::Config(format!("unknown entity init `{other}`"))),
        }
    }
}

impl fmt::Display for EntityInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityInit::Random => "random",
            EntityInit::Zero => "zero",
        })
    }
}

pub const CNN_CHANNELS: usize = 10;
pub const CNN_KERNEL: usize = 6;
pub const CNN_POOL: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub family: Family,
    pub dim: usize,
    /// Width of hidden layers; 0 means `dim`.
    pub hidden_dim: usize,
    pub mlp_layers: usize,
    pub mixer_blocks: usize,
    pub mixer_dropout: f64,
    pub nln_weight: f64,
    pub entity_init: EntityInit,
    /// Half-width of the uniform initialization of entity and relation rows.
    pub init_bound: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::Mlp,
            dim: 800,
            hidden_dim: 0,
            mlp_layers: 2,
            mixer_blocks: 2,
            mixer_dropout: 0.1,
            nln_weight: 0.1,
            entity_init: EntityInit::Random,
            init_bound: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn new(family: Family, dim: usize) -> Self {
        ModelConfig {
            family,
            dim,
            ..Default::default()
        }
    }

    pub fn hidden(&self) -> usize {
        if self.hidden_dim == 0 {
            self.dim
        } else {
            self.hidden_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OpsError::Config(m));
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return bad(format!("embedding dim must be even and >= 2, got {}", self.dim));
        }
        if self.mlp_layers < 1 {
            return bad("mlp_layers must be >= 1".into());
        }
        if self.mixer_blocks < 1 {
            return bad("mixer_blocks must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.mixer_dropout) {
            return bad(format!("mixer_dropout {} not in [0, 1)", self.mixer_dropout));
        }
        if !(self.nln_weight >= 0.0) {
            return bad(format!("nln regularizer weight {} must be >= 0", self.nln_weight));
        }
        if !(self.init_bound > 0.0 && self.init_bound.is_finite()) {
            return bad(format!("init_bound must be > 0, got {}", self.init_bound));
        }
        if self.family == Family::Cnn && self.dim < 2 * (CNN_KERNEL - 1) + CNN_POOL {
            return bad(format!(
                "cnn family needs dim >= {}, got {}",
                2 * (CNN_KERNEL - 1) + CNN_POOL,
                self.dim
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Operator invocations recorded during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpCall {
    Project(RelationId),
    /// One application of the 2-input intersection network, or one attention
    /// pass over all inputs.
    Intersect,
    Negate,
}

struct Ctx<'a> {
    mode: Mode,
    rng: &'a mut dyn RngCore,
    calls: Option<Vec<OpCall>>,
}

impl Ctx<'_> {
    fn record(&mut self, call: OpCall) {
        if let Some(c) = &mut self.calls {
            c.push(call);
        }
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::glorot(fan_in, fan_out, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Linear { w, b }
    }

    fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let w = store.value(self.w);
        if x.cols() != w.rows() {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
            }
            .into());
        }
        let mut y = x.matmul(w)?;
        if let Some(b) = self.b {
            let b = store.value(b).data();
            for i in 0..y.rows() {
                for (v, bj) in y.row_mut(i).iter_mut().zip(b) {
                    *v += *bj;
                }
            }
        }
        Ok(y)
    }

    fn backward<F: Real>(&self, store: &mut ParamStore<F>, x: &Tensor<F>, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let (dx, dw, db) = affine_backward(x, store.value(self.w), dy)?;
        store.accumulate(self.w, &dw);
        if let Some(b) = self.b {
            store.accumulate(b, &db);
        }
        Ok(dx)
    }
}

/// `hidden_layers` × (affine + ReLU) followed by an affine output layer.
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
}

struct MlpCache<F> {
    /// Input of each layer; entries after the first are ReLU outputs.
    inputs: Vec<Tensor<F>>,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        hidden_layers: usize,
        final_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = input;
        for i in 0..hidden_layers {
            layers.push(Linear::new(store, &format!("{name}.{i}"), fan_in, hidden, true, rng));
            fan_in = hidden;
        }
        layers.push(Linear::new(
            store,
            &format!("{name}.{hidden_layers}"),
            fan_in,
            output,
            final_bias,
            rng,
        ));
        Mlp { layers }
    }

    fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, MlpCache<F>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(store, &h)?;
            inputs.push(h);
            h = if i + 1 < self.layers.len() { relu_forward(&y) } else { y };
        }
        Ok((h, MlpCache { inputs }))
    }

    fn backward<F: Real>(&self, store: &mut ParamStore<F>, cache: &MlpCache<F>, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = dy.clone();
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i].backward(store, &cache.inputs[i], &g)?;
            g = if i > 0 { relu_backward(&cache.inputs[i], &dx) } else { dx };
        }
        Ok(g)
    }
}

#[derive(Debug, Clone)]
struct MixerModule {
    ln_gain: ParamId,
    ln_bias: ParamId,
    fc1: Linear,
    fc2: Linear,
}

/// Two inputs as two patches: per-patch affine, `N` residual channel-mixing
/// modules (layer norm, affine, ReLU, affine, dropout), mean over patches and
/// a final affine.
#[derive(Debug, Clone)]
struct Mixer {
    patch: Linear,
    modules: Vec<MixerModule>,
    head: Linear,
    keep: f64,
}

struct MixerModuleCache<F> {
    ln: LayerNormCache<F>,
    normed: Tensor<F>,
    act: Tensor<F>,
    mask: Option<Vec<F>>,
}

struct MixerCache<F> {
    patches: Tensor<F>,
    modules: Vec<MixerModuleCache<F>>,
    pooled: Tensor<F>,
}

impl Mixer {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, h) = (cfg.dim, cfg.hidden());
        let patch = Linear::new(store, &format!("{name}.patch"), d, d, true, rng);
        let modules = (0..cfg.mixer_blocks)
            .map(|i| MixerModule {
                ln_gain: store.add(format!("{name}.mix{i}.ln.gain"), Tensor::filled(&[d], F::one())),
                ln_bias: store.add(format!("{name}.mix{i}.ln.bias"), Tensor::zeros(&[d])),
                fc1: Linear::new(store, &format!("{name}.mix{i}.fc1"), d, h, true, rng),
                fc2: Linear::new(store, &format!("{name}.mix{i}.fc2"), h, d, true, rng),
            })
            .collect();
        let head = Linear::new(store, &format!("{name}.head"), d, d, true, rng);
        Mixer {
            patch,
            modules,
            head,
            keep: 1.0 - cfg.mixer_dropout,
        }
    }

    fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        u: &Tensor<F>,
        v: &Tensor<F>,
        ctx: &mut Ctx<'_>,
    ) -> Result<(Tensor<F>, MixerCache<F>)> {
        let b = u.rows();
        let d = u.cols();
        // row 2i holds patch u_i, row 2i+1 holds v_i
        let mut patches = Tensor::zeros(&[2 * b, d]);
        for i in 0..b {
            patches.row_mut(2 * i).copy_from_slice(u.row(i));
            patches.row_mut(2 * i + 1).copy_from_slice(v.row(i));
        }
        let mut h = self.patch.forward(store, &patches)?;
        let mut caches = Vec::with_capacity(self.modules.len());
        for m in &self.modules {
            let (normed, ln) = layer_norm_forward(&h, store.value(m.ln_gain), store.value(m.ln_bias))?;
            let act = relu_forward(&m.fc1.forward(store, &normed)?);
            let mixed = m.fc2.forward(store, &act)?;
            let (dropped, mask) = dropout_forward(&mixed, self.keep, ctx.mode == Mode::Train, &mut *ctx.rng)?;
            h.add_assign(&dropped)?;
            caches.push(MixerModuleCache { ln, normed, act, mask });
        }
        let half = lit::<F>(0.5);
        let mut pooled = Tensor::zeros(&[b, d]);
        for i in 0..b {
            let (p0, p1) = (h.row(2 * i).to_vec(), h.row(2 * i + 1).to_vec());
            for (o, (x, y)) in pooled.row_mut(i).iter_mut().zip(p0.iter().zip(&p1)) {
                *o = (*x + *y) * half;
            }
        }
        let out = self.head.forward(store, &pooled)?;
        Ok((
            out,
            MixerCache {
                patches,
                modules: caches,
                pooled,
            },
        ))
    }

    fn backward<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        cache: &MixerCache<F>,
        dy: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let dpooled = self.head.backward(store, &cache.pooled, dy)?;
        let (b, d) = (dpooled.rows(), dpooled.cols());
        let half = lit::<F>(0.5);
        let mut dh = Tensor::zeros(&[2 * b, d]);
        for i in 0..b {
            let g: Vec<F> = dpooled.row(i).iter().map(|x| *x * half).collect();
            dh.row_mut(2 * i).copy_from_slice(&g);
            dh.row_mut(2 * i + 1).copy_from_slice(&g);
        }
        for (m, c) in self.modules.iter().zip(&cache.modules).rev() {
            let dmixed = dropout_backward(c.mask.as_deref(), &dh);
            let dact = m.fc2.backward(store, &c.act, &dmixed)?;
            let dpre = relu_backward(&c.act, &dact);
            let dnormed = m.fc1.backward(store, &c.normed, &dpre)?;
            let (dx, dgain, dbias) = layer_norm_backward(&c.ln, store.value(m.ln_gain), &dnormed);
            store.accumulate(m.ln_gain, &dgain);
            store.accumulate(m.ln_bias, &dbias);
            dh.add_assign(&dx)?;
        }
        let dpatches = self.patch.backward(store, &cache.patches, &dh)?;
        let mut du = Tensor::zeros(&[b, d]);
        let mut dv = Tensor::zeros(&[b, d]);
        for i in 0..b {
            du.row_mut(i).copy_from_slice(dpatches.row(2 * i));
            dv.row_mut(i).copy_from_slice(dpatches.row(2 * i + 1));
        }
        Ok((du, dv))
    }
}

/// Two convolution layers (1→10→10 channels, kernel 6, each followed by ReLU)
/// and a max-pool of width 6, flattening to `10 * ((d - 10) / 6)` features.
#[derive(Debug, Clone)]
struct ConvStack {
    c1w: ParamId,
    c1b: ParamId,
    c2w: ParamId,
    c2b: ParamId,
}

struct ConvCache<F> {
    input: Tensor<F>,
    y1: Tensor<F>,
    y2: Tensor<F>,
    argmax: Vec<usize>,
}

impl ConvStack {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, rng: &mut ChaCha8Rng) -> Self {
        let bound1 = (6.0 / ((1 + CNN_CHANNELS) * CNN_KERNEL) as f64).sqrt();
        let bound2 = (6.0 / ((CNN_CHANNELS + CNN_CHANNELS) * CNN_KERNEL) as f64).sqrt();
        ConvStack {
            c1w: store.add(
                format!("{name}.conv1.weight"),
                Tensor::uniform(&[CNN_CHANNELS, 1, CNN_KERNEL], bound1, rng),
            ),
            c1b: store.add(format!("{name}.conv1.bias"), Tensor::zeros(&[CNN_CHANNELS])),
            c2w: store.add(
                format!("{name}.conv2.weight"),
                Tensor::uniform(&[CNN_CHANNELS, CNN_CHANNELS, CNN_KERNEL], bound2, rng),
            ),
            c2b: store.add(format!("{name}.conv2.bias"), Tensor::zeros(&[CNN_CHANNELS])),
        }
    }

    fn features(dim: usize) -> usize {
        CNN_CHANNELS * ((dim - 2 * (CNN_KERNEL - 1)) / CNN_POOL)
    }

    fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, ConvCache<F>)> {
        let (n, d) = (x.rows(), x.cols());
        let input = x.clone().reshape(&[n, 1, d])?;
        let y1 = relu_forward(&conv1d_forward(&input, store.value(self.c1w), store.value(self.c1b))?);
        let y2 = relu_forward(&conv1d_forward(&y1, store.value(self.c2w), store.value(self.c2b))?);
        let (pooled, argmax) = maxpool1d_forward(&y2, CNN_POOL)?;
        let feats = pooled.len() / n.max(1);
        let out = pooled.reshape(&[n, feats])?;
        Ok((out, ConvCache { input, y1, y2, argmax }))
    }

    fn backward<F: Real>(&self, store: &mut ParamStore<F>, cache: &ConvCache<F>, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let dpool = maxpool1d_backward(cache.y2.shape(), &cache.argmax, dy);
        let d2 = relu_backward(&cache.y2, &dpool);
        let (dy1, dw2, db2) = conv1d_backward(&cache.y1, store.value(self.c2w), &d2);
        store.accumulate(self.c2w, &dw2);
        store.accumulate(self.c2b, &db2);
        let d1 = relu_backward(&cache.y1, &dy1);
        let (dx, dw1, db1) = conv1d_backward(&cache.input, store.value(self.c1w), &d1);
        store.accumulate(self.c1w, &dw1);
        store.accumulate(self.c1b, &db1);
        let (n, d) = (dx.shape()[0], dx.shape()[2]);
        Ok(dx.reshape(&[n, d])?)
    }
}

/// Conv stack on each input (shared weights), concatenated, then three
/// affine layers with ReLU between them.
#[derive(Debug, Clone)]
struct CnnNet {
    conv: ConvStack,
    fc: Mlp,
    inputs: usize,
}

struct CnnCache<F> {
    conv: ConvCache<F>,
    fc: MlpCache<F>,
}

impl CnnNet {
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = ConvStack::new(store, name, rng);
        let feats = ConvStack::features(cfg.dim) * inputs;
        let fc = Mlp::new(store, &format!("{name}.fc"), feats, cfg.hidden(), cfg.dim, 2, true, rng);
        CnnNet { conv, fc, inputs }
    }

    fn forward<F: Real>(&self, store: &ParamStore<F>, xs: &[&Tensor<F>]) -> Result<(Tensor<F>, CnnCache<F>)> {
        let b = xs[0].rows();
        let stacked = Tensor::stack_rows(xs)?;
        let (feats, conv) = self.conv.forward(store, &stacked)?;
        let parts = feats.split_rows(b);
        let mut joined = parts[0].clone();
        for p in &parts[1..] {
            joined = Tensor::concat_cols(&joined, p)?;
        }
        let (out, fc) = self.fc.forward(store, &joined)?;
        Ok((out, CnnCache { conv, fc }))
    }

    fn backward<F: Real>(&self, store: &mut ParamStore<F>, cache: &CnnCache<F>, dy: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let djoined = self.fc.backward(store, &cache.fc, dy)?;
        let per = djoined.cols() / self.inputs;
        let mut parts = Vec::with_capacity(self.inputs);
        let mut rest = djoined;
        for _ in 0..self.inputs - 1 {
            let (a, b) = rest.split_cols(per);
            parts.push(a);
            rest = b;
        }
        parts.push(rest);
        let refs: Vec<&Tensor<F>> = parts.iter().collect();
        let dfeats = Tensor::stack_rows(&refs)?;
        let dx = self.conv.backward(store, &cache.conv, &dfeats)?;
        let b = dy.rows();
        Ok(dx.split_rows(b))
    }
}

/// A network taking two d-vectors.
#[derive(Debug, Clone)]
enum BinaryNet {
    Mlp(Mlp),
    Mixer(Mixer),
    Cnn(CnnNet),
}

enum BinaryCache<F> {
    Mlp(MlpCache<F>),
    Mixer(MixerCache<F>),
    Cnn(CnnCache<F>),
}

impl BinaryNet {
    fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        u: &Tensor<F>,
        v: &Tensor<F>,
        ctx: &mut Ctx<'_>,
    ) -> Result<(Tensor<F>, BinaryCache<F>)> {
        match self {
            BinaryNet::Mlp(m) => {
                let x = Tensor::concat_cols(u, v)?;
                let (y, c) = m.forward(store, &x)?;
                Ok((y, BinaryCache::Mlp(c)))
            }
            BinaryNet::Mixer(m) => {
                let (y, c) = m.forward(store, u, v, ctx)?;
                Ok((y, BinaryCache::Mixer(c)))
            }
            BinaryNet::Cnn(m) => {
                let (y, c) = m.forward(store, &[u, v])?;
                Ok((y, BinaryCache::Cnn(c)))
            }
        }
    }

    fn backward<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        cache: &BinaryCache<F>,
        dy: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        match (self, cache) {
            (BinaryNet::Mlp(m), BinaryCache::Mlp(c)) => {
                let dx = m.backward(store, c, dy)?;
                let left = dx.cols() / 2;
                Ok(dx.split_cols(left))
            }
            (BinaryNet::Mixer(m), BinaryCache::Mixer(c)) => m.backward(store, c, dy),
            (BinaryNet::Cnn(m), BinaryCache::Cnn(c)) => {
                let mut parts = m.backward(store, c, dy)?;
                let dv = parts.pop().expect("two inputs");
                let du = parts.pop().expect("two inputs");
                Ok((du, dv))
            }
            _ => unreachable!("cache built by the same network"),
        }
    }
}

/// Permutation-invariant attentive aggregation: a shared perceptron scores
/// each input, softmax over inputs, output `Σ aᵢ W xᵢ`.
#[derive(Debug, Clone)]
struct Attention {
    score: Mlp,
    value: Linear,
}

struct AttentionCache<F> {
    stacked: Tensor<F>,
    score: MlpCache<F>,
    weights: Tensor<F>,
    values: Tensor<F>,
}

impl Attention {
    fn forward<F: Real>(&self, store: &ParamStore<F>, xs: &[&Tensor<F>]) -> Result<(Tensor<F>, AttentionCache<F>)> {
        let (n, b, d) = (xs.len(), xs[0].rows(), xs[0].cols());
        let stacked = Tensor::stack_rows(xs)?;
        let (scores, score) = self.score.forward(store, &stacked)?;
        let mut logits = Tensor::zeros(&[b, n]);
        for i in 0..n {
            for r in 0..b {
                logits.row_mut(r)[i] = scores.data()[i * b + r];
            }
        }
        let weights = softmax_forward(&logits);
        let values = self.value.forward(store, &stacked)?;
        let mut out = Tensor::zeros(&[b, d]);
        for i in 0..n {
            for r in 0..b {
                let a = weights.row(r)[i];
                let v = values.row(i * b + r).to_vec();
                for (o, x) in out.row_mut(r).iter_mut().zip(&v) {
                    *o += a * *x;
                }
            }
        }
        Ok((
            out,
            AttentionCache {
                stacked,
                score,
                weights,
                values,
            },
        ))
    }

    fn backward<F: Real>(&self, store: &mut ParamStore<F>, cache: &AttentionCache<F>, dy: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let (b, d) = (dy.rows(), dy.cols());
        let n = cache.weights.cols();
        let mut dvalues = Tensor::zeros(&[n * b, d]);
        let mut dweights = Tensor::zeros(&[b, n]);
        for i in 0..n {
            for r in 0..b {
                let a = cache.weights.row(r)[i];
                let g = dy.row(r);
                let v = cache.values.row(i * b + r);
                dweights.row_mut(r)[i] = g.iter().zip(v).map(|(x, y)| *x * *y).sum();
                for (o, x) in dvalues.row_mut(i * b + r).iter_mut().zip(g) {
                    *o = a * *x;
                }
            }
        }
        let dlogits = softmax_backward(&cache.weights, &dweights);
        let mut dscores = Tensor::zeros(&[n * b, 1]);
        for i in 0..n {
            for r in 0..b {
                dscores.data_mut()[i * b + r] = dlogits.row(r)[i];
            }
        }
        let mut dx = self.value.backward(store, &cache.stacked, &dvalues)?;
        dx.add_assign(&self.score.backward(store, &cache.score, &dscores)?)?;
        Ok(dx.split_rows(b))
    }
}

#[derive(Debug, Clone)]
enum Projection {
    Net(BinaryNet),
    /// `R_r · s` with one `d × d` matrix per relation, stored row-major as
    /// rows of a `[relations, d * d]` table.
    RelationMatrix(ParamId),
}

#[derive(Debug, Clone)]
enum Intersection {
    Fold(BinaryNet),
    Attention(Attention),
}

#[derive(Debug, Clone)]
enum Negation {
    Mlp(Mlp),
    Cnn(CnnNet),
    Unsupported,
}

#[derive(Debug, Clone)]
struct OperatorSet {
    projection: Projection,
    intersection: Intersection,
    negation: Negation,
}

enum ProjCache<F> {
    Net(BinaryCache<F>),
    Matrix(Tensor<F>),
}

enum InterCache<F> {
    Fold(Vec<BinaryCache<F>>),
    Attention(AttentionCache<F>),
}

enum NegCache<F> {
    Mlp(MlpCache<F>),
    Cnn(CnnCache<F>),
}

enum Trace<F> {
    Anchor(Vec<usize>),
    Project {
        child: Box<Trace<F>>,
        rels: Vec<usize>,
        cache: ProjCache<F>,
    },
    Intersect {
        children: Vec<Trace<F>>,
        cache: InterCache<F>,
    },
    Negate {
        child: Box<Trace<F>>,
        cache: NegCache<F>,
    },
}

#[derive(Debug, Clone)]
struct LogicConstants {
    truth: ParamId,
    falsity: ParamId,
}

/// Embedding tables plus one operator set (two for the 2-vector family).
#[derive(Debug, Clone)]
pub struct Model<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    entities: ParamId,
    relations: ParamId,
    sets: Vec<OperatorSet>,
    logic: Option<LogicConstants>,
}

/// Forward state of a batch, needed for the backward pass.
pub struct BatchTrace<F> {
    groups: Vec<GroupTrace<F>>,
    rows: usize,
}

struct GroupTrace<F> {
    rows: Vec<usize>,
    per_set: Vec<Trace<F>>,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, entity_count: usize, relation_count: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let entities = params.add(
            "entity_embedding",
            match config.entity_init {
                EntityInit::Random => Tensor::uniform(&[entity_count, d], config.init_bound, &mut rng),
                EntityInit::Zero => Tensor::zeros(&[entity_count, d]),
            },
        );
        let relations = params.add(
            "relation_embedding",
            Tensor::uniform(&[relation_count, d], config.init_bound, &mut rng),
        );
        let set_count = if config.family == Family::Mlp2Vector { 2 } else { 1 };
        let mut sets = Vec::with_capacity(set_count);
        for s in 0..set_count {
            let prefix = if set_count == 1 {
                String::new()
            } else {
                format!("{}.", ["a", "b"][s])
            };
            sets.push(Self::build_set(&mut params, &prefix, &config, relation_count, &mut rng));
        }
        let logic = (config.family == Family::Nln).then(|| LogicConstants {
            truth: params.add("logic.true", Tensor::filled(&[d], F::one())),
            falsity: params.add("logic.false", Tensor::filled(&[d], -F::one())),
        });
        Ok(Model {
            config,
            params,
            entities,
            relations,
            sets,
            logic,
        })
    }

    fn build_set(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &ModelConfig,
        relation_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> OperatorSet {
        let (d, h, k) = (cfg.dim, cfg.hidden(), cfg.mlp_layers);
        let mlp2 = |store: &mut ParamStore<F>, name: &str, rng: &mut ChaCha8Rng| {
            BinaryNet::Mlp(Mlp::new(store, &format!("{prefix}{name}"), 2 * d, h, d, k, true, rng))
        };
        let mlp1 = |store: &mut ParamStore<F>, name: &str, rng: &mut ChaCha8Rng| {
            Mlp::new(store, &format!("{prefix}{name}"), d, h, d, k, true, rng)
        };
        match cfg.family {
            Family::Mlp | Family::Mlp2Vector => OperatorSet {
                projection: Projection::Net(mlp2(store, "projection", rng)),
                intersection: Intersection::Fold(mlp2(store, "intersection", rng)),
                negation: Negation::Mlp(mlp1(store, "negation", rng)),
            },
            Family::MlpAttention => {
                let projection = Projection::Net(mlp2(store, "projection", rng));
                let score = Mlp::new(store, &format!("{prefix}intersection.score"), d, h, 1, 1, true, rng);
                let value = Linear::new(store, &format!("{prefix}intersection.value"), d, d, false, rng);
                OperatorSet {
                    projection,
                    intersection: Intersection::Attention(Attention { score, value }),
                    negation: Negation::Mlp(mlp1(store, "negation", rng)),
                }
            }
            Family::Mixer => OperatorSet {
                projection: Projection::Net(BinaryNet::Mixer(Mixer::new(store, &format!("{prefix}projection"), cfg, rng))),
                intersection: Intersection::Fold(BinaryNet::Mixer(Mixer::new(
                    store,
                    &format!("{prefix}intersection"),
                    cfg,
                    rng,
                ))),
                negation: Negation::Unsupported,
            },
            Family::Cnn => OperatorSet {
                projection: Projection::Net(BinaryNet::Cnn(CnnNet::new(store, &format!("{prefix}projection"), 2, cfg, rng))),
                intersection: Intersection::Fold(BinaryNet::Cnn(CnnNet::new(
                    store,
                    &format!("{prefix}intersection"),
                    2,
                    cfg,
                    rng,
                ))),
                negation: Negation::Cnn(CnnNet::new(store, &format!("{prefix}negation"), 1, cfg, rng)),
            },
            Family::Nln => {
                let bound = (6.0 / (2 * d) as f64).sqrt();
                let mats = store.add(
                    format!("{prefix}projection.relation_matrices"),
                    Tensor::uniform(&[relation_count, d * d], bound, rng),
                );
                // AND(u, v) = H2 · relu(H1 [u|v] + b): no bias on the output layer
                let and = Mlp::new(store, &format!("{prefix}intersection.and"), 2 * d, d, d, 1, false, rng);
                OperatorSet {
                    projection: Projection::RelationMatrix(mats),
                    intersection: Intersection::Fold(BinaryNet::Mlp(and)),
                    negation: Negation::Mlp(mlp1(store, "negation", rng)),
                }
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn entity_count(&self) -> usize {
        self.params.value(self.entities).rows()
    }

    pub fn relation_count(&self) -> usize {
        self.params.value(self.relations).rows()
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn entity_table(&self) -> &Tensor<F> {
        self.params.value(self.entities)
    }

    pub fn entity_param(&self) -> ParamId {
        self.entities
    }

    pub fn relation_table(&self) -> &Tensor<F> {
        self.params.value(self.relations)
    }

    pub fn relation_param(&self) -> ParamId {
        self.relations
    }

    pub fn entity_row(&self, e: EntityId) -> &[F] {
        self.entity_table().row(e.index())
    }

    /// Number of operator sets (2 for the 2-vector family).
    pub fn operator_sets(&self) -> usize {
        self.sets.len()
    }

    fn check_row(&self, v: &[F]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(TensorError::Shape {
                op: "operator input",
                detail: format!("expected dim {}, got {}", self.dim(), v.len()),
            }
            .into());
        }
        Ok(())
    }

    fn eval_ctx(rng: &mut ChaCha8Rng) -> Ctx<'_> {
        Ctx {
            mode: Mode::Eval,
            rng,
            calls: None,
        }
    }

    /// Projection of one point along `r` (first operator set, eval mode).
    pub fn project(&self, s: &[F], r: RelationId) -> Result<Vec<F>> {
        self.check_row(s)?;
        self.check_relation(r)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Self::eval_ctx(&mut rng);
        let (y, _) = self.apply_projection(&self.sets[0], &Tensor::row_vector(s.to_vec()), &[r.index()], &mut ctx)?;
        Ok(y.into_vec())
    }

    /// Intersection of ≥ 2 points in the given order (first operator set).
    pub fn intersect(&self, inputs: &[Vec<F>]) -> Result<Vec<F>> {
        for v in inputs {
            self.check_row(v)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Self::eval_ctx(&mut rng);
        let xs: Vec<Tensor<F>> = inputs.iter().map(|v| Tensor::row_vector(v.clone())).collect();
        let (y, _) = self.apply_intersection(&self.sets[0], &xs, &mut ctx)?;
        Ok(y.into_vec())
    }

    pub fn negate(&self, s: &[F]) -> Result<Vec<F>> {
        self.check_row(s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Self::eval_ctx(&mut rng);
        let (y, _) = self.apply_negation(&self.sets[0], &Tensor::row_vector(s.to_vec()), &mut ctx)?;
        Ok(y.into_vec())
    }

    /// The 2-input network of the projection operator applied to `(u, v)`
    /// directly, without a relation lookup.
    pub fn projection_network(&self, u: &[F], v: &[F], mode: Mode, seed: u64) -> Result<Vec<F>> {
        self.check_row(u)?;
        self.check_row(v)?;
        let Projection::Net(net) = &self.sets[0].projection else {
            return Err(OpsError::UnsupportedOperator {
                family: self.family(),
                operator: "two-input projection network",
            });
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = Ctx {
            mode,
            rng: &mut rng,
            calls: None,
        };
        let (y, _) = net.forward(
            &self.params,
            &Tensor::row_vector(u.to_vec()),
            &Tensor::row_vector(v.to_vec()),
            &mut ctx,
        )?;
        Ok(y.into_vec())
    }

    /// `AND(u, v)` of the logic-network family.
    /// Fails with the unsupported-operator error when `structure` needs an
    /// operator this family lacks.
    pub fn check_structure(&self, structure: QueryStructure) -> Result<()> {
        if structure.has_negation() && matches!(self.sets[0].negation, Negation::Unsupported) {
            return Err(OpsError::UnsupportedOperator {
                family: self.family(),
                operator: "negation",
            });
        }
        Ok(())
    }

    pub fn nln_and(&self, u: &[F], v: &[F]) -> Result<Vec<F>> {
        if self.logic.is_none() {
            return Err(OpsError::UnsupportedOperator {
                family: self.family(),
                operator: "logical AND",
            });
        }
        self.intersect(&[u.to_vec(), v.to_vec()])
    }

    pub fn logic_constants(&self) -> Option<(&[F], &[F])> {
        self.logic
            .as_ref()
            .map(|l| (self.params.value(l.truth).data(), self.params.value(l.falsity).data()))
    }

    fn check_relation(&self, r: RelationId) -> Result<()> {
        if r.index() >= self.relation_count() {
            return Err(OpsError::IdOutOfRange {
                kind: "relation",
                id: r.0,
                count: self.relation_count(),
            });
        }
        Ok(())
    }

    fn apply_projection(
        &self,
        set: &OperatorSet,
        s: &Tensor<F>,
        rels: &[usize],
        ctx: &mut Ctx<'_>,
    ) -> Result<(Tensor<F>, ProjCache<F>)> {
        match &set.projection {
            Projection::Net(net) => {
                let r = self.relation_table().gather_rows(rels);
                let (y, c) = net.forward(&self.params, s, &r, ctx)?;
                Ok((y, ProjCache::Net(c)))
            }
            Projection::RelationMatrix(mats) => {
                let d = self.dim();
                let table = self.params.value(*mats);
                let mut y = Tensor::zeros(&[s.rows(), d]);
                for (i, &r) in rels.iter().enumerate() {
                    let m = table.row(r);
                    let x = s.row(i).to_vec();
                    for (o, mrow) in y.row_mut(i).iter_mut().zip(m.chunks(d)) {
                        *o = mrow.iter().zip(&x).map(|(a, b)| *a * *b).sum();
                    }
                }
                Ok((y, ProjCache::Matrix(s.clone())))
            }
        }
    }

    /// Returns `(ds, drel_rows)`.
    fn projection_backward(
        set: &OperatorSet,
        store: &mut ParamStore<F>,
        cache: &ProjCache<F>,
        rels: &[usize],
        dy: &Tensor<F>,
    ) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
        match (&set.projection, cache) {
            (Projection::Net(net), ProjCache::Net(c)) => {
                let (ds, dr) = net.backward(store, c, dy)?;
                Ok((ds, Some(dr)))
            }
            (Projection::RelationMatrix(mats), ProjCache::Matrix(s)) => {
                let d = dy.cols();
                let mut ds = Tensor::zeros(&[dy.rows(), d]);
                let mut dm = Tensor::zeros(store.value(*mats).shape());
                {
                    let table = store.value(*mats);
                    for (i, &r) in rels.iter().enumerate() {
                        let m = table.row(r);
                        let g = dy.row(i).to_vec();
                        let x = s.row(i);
                        let dsr = ds.row_mut(i);
                        for (row, gi) in g.iter().enumerate() {
                            for col in 0..d {
                                dsr[col] += m[row * d + col] * *gi;
                            }
                        }
                        let dmr = dm.row_mut(r);
                        for (row, gi) in g.iter().enumerate() {
                            for col in 0..d {
                                dmr[row * d + col] += *gi * x[col];
                            }
                        }
                    }
                }
                store.accumulate(*mats, &dm);
                Ok((ds, None))
            }
            _ => unreachable!("cache built by the same operator"),
        }
    }

    fn apply_intersection(
        &self,
        set: &OperatorSet,
        xs: &[Tensor<F>],
        ctx: &mut Ctx<'_>,
    ) -> Result<(Tensor<F>, InterCache<F>)> {
        if xs.len() < 2 {
            return Err(OpsError::Arity(xs.len()));
        }
        match &set.intersection {
            Intersection::Fold(net) => {
                let mut acc = xs[0].clone();
                let mut caches = Vec::with_capacity(xs.len() - 1);
                for x in &xs[1..] {
                    ctx.record(OpCall::Intersect);
                    let (y, c) = net.forward(&self.params, &acc, x, ctx)?;
                    caches.push(c);
                    acc = y;
                }
                Ok((acc, InterCache::Fold(caches)))
            }
            Intersection::Attention(att) => {
                ctx.record(OpCall::Intersect);
                let refs: Vec<&Tensor<F>> = xs.iter().collect();
                let (y, c) = att.forward(&self.params, &refs)?;
                Ok((y, InterCache::Attention(c)))
            }
        }
    }

    fn intersection_backward(
        set: &OperatorSet,
        store: &mut ParamStore<F>,
        cache: &InterCache<F>,
        dy: &Tensor<F>,
    ) -> Result<Vec<Tensor<F>>> {
        match (&set.intersection, cache) {
            (Intersection::Fold(net), InterCache::Fold(caches)) => {
                let mut out = vec![Tensor::zeros(&[0]); caches.len() + 1];
                let mut g = dy.clone();
                for (i, c) in caches.iter().enumerate().rev() {
                    let (dacc, dx) = net.backward(store, c, &g)?;
                    out[i + 1] = dx;
                    g = dacc;
                }
                out[0] = g;
                Ok(out)
            }
            (Intersection::Attention(att), InterCache::Attention(c)) => att.backward(store, c, dy),
            _ => unreachable!("cache built by the same operator"),
        }
    }

    fn apply_negation(&self, set: &OperatorSet, x: &Tensor<F>, ctx: &mut Ctx<'_>) -> Result<(Tensor<F>, NegCache<F>)> {
        ctx.record(OpCall::Negate);
        match &set.negation {
            Negation::Mlp(m) => {
                let (y, c) = m.forward(&self.params, x)?;
                Ok((y, NegCache::Mlp(c)))
            }
            Negation::Cnn(m) => {
                let (y, c) = m.forward(&self.params, &[x])?;
                Ok((y, NegCache::Cnn(c)))
            }
            Negation::Unsupported => Err(OpsError::UnsupportedOperator {
                family: self.family(),
                operator: "negation",
            }),
        }
    }

    fn negation_backward(set: &OperatorSet, store: &mut ParamStore<F>, cache: &NegCache<F>, dy: &Tensor<F>) -> Result<Tensor<F>> {
        match (&set.negation, cache) {
            (Negation::Mlp(m), NegCache::Mlp(c)) => m.backward(store, c, dy),
            (Negation::Cnn(m), NegCache::Cnn(c)) => Ok(m.backward(store, c, dy)?.pop().expect("one input")),
            _ => unreachable!("cache built by the same operator"),
        }
    }

    /// Forward over `nodes`, which all share one shape.
    fn forward_nodes(&self, set: &OperatorSet, nodes: &[&Query], ctx: &mut Ctx<'_>) -> Result<(Tensor<F>, Trace<F>)> {
        match nodes[0] {
            Query::Anchor(_) => {
                let mut ids = Vec::with_capacity(nodes.len());
                for n in nodes {
                    let Query::Anchor(e) = n else { unreachable!("same shape") };
                    if e.index() >= self.entity_count() {
                        return Err(OpsError::IdOutOfRange {
                            kind: "entity",
                            id: e.0,
                            count: self.entity_count(),
                        });
                    }
                    ids.push(e.index());
                }
                Ok((self.entity_table().gather_rows(&ids), Trace::Anchor(ids)))
            }
            Query::Project(..) => {
                let mut children = Vec::with_capacity(nodes.len());
                let mut rels = Vec::with_capacity(nodes.len());
                for n in nodes {
                    let Query::Project(c, r) = n else { unreachable!("same shape") };
                    self.check_relation(*r)?;
                    children.push(c.as_ref());
                    rels.push(r.index());
                }
                let (s, child) = self.forward_nodes(set, &children, ctx)?;
                if let Some(calls) = &mut ctx.calls {
                    if let Query::Project(_, r) = nodes[0] {
                        calls.push(OpCall::Project(*r));
                    }
                }
                let (y, cache) = self.apply_projection(set, &s, &rels, ctx)?;
                Ok((
                    y,
                    Trace::Project {
                        child: Box::new(child),
                        rels,
                        cache,
                    },
                ))
            }
            Query::Intersect(first) => {
                let arity = first.len();
                let mut inputs = Vec::with_capacity(arity);
                let mut traces = Vec::with_capacity(arity);
                for j in 0..arity {
                    let col: Vec<&Query> = nodes
                        .iter()
                        .map(|n| match n {
                            Query::Intersect(cs) => &cs[j],
                            _ => unreachable!("same shape"),
                        })
                        .collect();
                    let (x, t) = self.forward_nodes(set, &col, ctx)?;
                    inputs.push(x);
                    traces.push(t);
                }
                let (y, cache) = self.apply_intersection(set, &inputs, ctx)?;
                Ok((
                    y,
                    Trace::Intersect {
                        children: traces,
                        cache,
                    },
                ))
            }
            Query::Negate(_) => {
                let children: Vec<&Query> = nodes
                    .iter()
                    .map(|n| match n {
                        Query::Negate(c) => c.as_ref(),
                        _ => unreachable!("same shape"),
                    })
                    .collect();
                let (x, child) = self.forward_nodes(set, &children, ctx)?;
                let (y, cache) = self.apply_negation(set, &x, ctx)?;
                Ok((
                    y,
                    Trace::Negate {
                        child: Box::new(child),
                        cache,
                    },
                ))
            }
            Query::Union(_) => Err(OpsError::UnionInConjunct),
        }
    }

    fn backward_nodes(
        set: &OperatorSet,
        store: &mut ParamStore<F>,
        entities: ParamId,
        relations: ParamId,
        trace: &Trace<F>,
        dy: &Tensor<F>,
    ) -> Result<()> {
        match trace {
            Trace::Anchor(ids) => {
                store.grad_mut(entities).scatter_add_rows(ids, dy);
                Ok(())
            }
            Trace::Project { child, rels, cache } => {
                let (ds, dr) = Self::projection_backward(set, store, cache, rels, dy)?;
                if let Some(dr) = dr {
                    store.grad_mut(relations).scatter_add_rows(rels, &dr);
                }
                Self::backward_nodes(set, store, entities, relations, child, &ds)
            }
            Trace::Intersect { children, cache } => {
                let dxs = Self::intersection_backward(set, store, cache, dy)?;
                for (c, dx) in children.iter().zip(&dxs) {
                    Self::backward_nodes(set, store, entities, relations, c, dx)?;
                }
                Ok(())
            }
            Trace::Negate { child, cache } => {
                let dx = Self::negation_backward(set, store, cache, dy)?;
                Self::backward_nodes(set, store, entities, relations, child, &dx)
            }
        }
    }

    fn forward_conjuncts_inner(
        &self,
        conjuncts: &[Query],
        ctx: &mut Ctx<'_>,
    ) -> Result<(Tensor<F>, BatchTrace<F>)> {
        let canon: Vec<Query> = conjuncts.iter().map(Query::canonical).collect();
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, q) in canon.iter().enumerate() {
            if q.contains_union() {
                return Err(OpsError::UnionInConjunct);
            }
            groups.entry(q.shape()).or_default().push(i);
        }
        let d = self.dim();
        let mut out = Tensor::zeros(&[conjuncts.len(), d]);
        let mut traces = Vec::with_capacity(groups.len());
        let inv = lit::<F>(1.0 / self.sets.len() as f64);
        for rows in groups.into_values() {
            let nodes: Vec<&Query> = rows.iter().map(|&i| &canon[i]).collect();
            let mut per_set = Vec::with_capacity(self.sets.len());
            let mut sum: Option<Tensor<F>> = None;
            for set in &self.sets {
                let (y, t) = self.forward_nodes(set, &nodes, ctx)?;
                per_set.push(t);
                match &mut sum {
                    None => sum = Some(y),
                    Some(s) => s.add_assign(&y)?,
                }
            }
            let mut y = sum.expect("at least one operator set");
            if self.sets.len() > 1 {
                y.scale(inv);
            }
            for (j, &r) in rows.iter().enumerate() {
                out.row_mut(r).copy_from_slice(y.row(j));
            }
            traces.push(GroupTrace { rows, per_set });
        }
        Ok((
            out,
            BatchTrace {
                groups: traces,
                rows: conjuncts.len(),
            },
        ))
    }

    /// Embeds union-free conjuncts, one output row per conjunct. Conjuncts are
    /// canonicalized and grouped by shape internally; for the 2-vector family
    /// each row is the mean of the two operator sets' embeddings.
    pub fn forward_conjuncts(
        &self,
        conjuncts: &[Query],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<F>, BatchTrace<F>)> {
        let mut ctx = Ctx { mode, rng, calls: None };
        self.forward_conjuncts_inner(conjuncts, &mut ctx)
    }

    /// Accumulates parameter gradients for `dq`, the loss gradient w.r.t. the
    /// rows returned by [`Model::forward_conjuncts`].
    pub fn backward_conjuncts(&mut self, trace: &BatchTrace<F>, dq: &Tensor<F>) -> Result<()> {
        if dq.rows() != trace.rows || dq.cols() != self.dim() {
            return Err(TensorError::Shape {
                op: "backward_conjuncts",
                detail: format!("gradient {:?} for {} rows", dq.shape(), trace.rows),
            }
            .into());
        }
        let Model {
            params,
            sets,
            entities,
            relations,
            ..
        } = self;
        let inv = lit::<F>(1.0 / sets.len() as f64);
        for g in &trace.groups {
            let mut dy = dq.gather_rows(&g.rows);
            if sets.len() > 1 {
                dy.scale(inv);
            }
            for (set, t) in sets.iter().zip(&g.per_set) {
                Self::backward_nodes(set, params, *entities, *relations, t, &dy)?;
            }
        }
        Ok(())
    }

    /// One embedding per DNF conjunct, in eval mode.
    pub fn embed_query(&self, query: &Query) -> Result<Vec<Vec<F>>> {
        let conjuncts = query.to_dnf()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, _) = self.forward_conjuncts(&conjuncts, Mode::Eval, &mut rng)?;
        Ok((0..y.rows()).map(|i| y.row(i).to_vec()).collect())
    }

    /// As [`Model::embed_query`], also returning the operator calls made.
    /// Calls are recorded for the first operator set only.
    pub fn embed_query_traced(&self, query: &Query) -> Result<(Vec<Vec<F>>, Vec<OpCall>)> {
        let conjuncts = query.to_dnf()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx {
            mode: Mode::Eval,
            rng: &mut rng,
            calls: Some(Vec::new()),
        };
        let mut out = Vec::new();
        let mut calls = Vec::new();
        for c in &conjuncts {
            let canon = c.canonical();
            let (y, _) = self.forward_nodes(&self.sets[0], &[&canon], &mut ctx)?;
            calls.extend(ctx.calls.replace(Vec::new()).unwrap_or_default());
            out.push(y.into_vec());
        }
        if self.sets.len() > 1 {
            return Ok((self.embed_query(query)?, calls));
        }
        Ok((out, calls))
    }

    /// Embedding computed by a single operator set (`0` or `1` for the
    /// 2-vector family).
    pub fn embed_with_set(&self, query: &Query, set: usize) -> Result<Vec<Vec<F>>> {
        let set = self.sets.get(set).ok_or_else(|| OpsError::Config(format!("no operator set {set}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Self::eval_ctx(&mut rng);
        query
            .to_dnf()?
            .iter()
            .map(|c| {
                let canon = c.canonical();
                self.forward_nodes(set, &[&canon], &mut ctx).map(|(y, _)| y.into_vec())
            })
            .collect()
    }

    /// Copies every parameter of operator set `from` into operator set `to`.
    pub fn copy_operator_set(&mut self, from: usize, to: usize) -> Result<()> {
        if from >= self.sets.len() || to >= self.sets.len() {
            return Err(OpsError::Config("operator set out of range".into()));
        }
        let prefix_from = format!("{}.", ["a", "b"][from]);
        let prefix_to = format!("{}.", ["a", "b"][to]);
        let sources: Vec<(String, Tensor<F>)> = self
            .params
            .iter()
            .filter_map(|p| {
                p.name
                    .strip_prefix(&prefix_from)
                    .map(|rest| (format!("{prefix_to}{rest}"), p.value.clone()))
            })
            .collect();
        for (name, value) in sources {
            if let Some(p) = self.params.iter_mut().find(|p| p.name == name) {
                p.value = value;
            }
        }
        Ok(())
    }

    /// Logic regularizer of the NLN family over the rows of `w`:
    /// `Σ_w [1 - Sim(AND(w,T), w)] + [1 - Sim(AND(w,F), F)] + [1 - Sim(AND(w,w), w)]
    ///  + [1 - Sim(AND(w, NOT w), F)]` with `Sim(x, y) = 1 / (1 + ‖x - y‖)`.
    /// Returns the value and its gradient w.r.t. `w`, accumulating
    /// `weight ×` the parameter gradients.
    pub fn logic_regularizer(&mut self, w: &Tensor<F>, weight: F) -> Result<(F, Tensor<F>)> {
        let Some(logic) = self.logic.clone() else {
            return Err(OpsError::UnsupportedOperator {
                family: self.family(),
                operator: "logic regularizer",
            });
        };
        let n = w.rows();
        let d = self.dim();
        let broadcast = |v: &Tensor<F>| {
            let mut t = Tensor::zeros(&[n, d]);
            for i in 0..n {
                t.row_mut(i).copy_from_slice(v.data());
            }
            t
        };
        let t = broadcast(self.params.value(logic.truth));
        let f = broadcast(self.params.value(logic.falsity));
        let set = &self.sets[0];
        let Intersection::Fold(and) = &set.intersection else {
            unreachable!("nln uses a fold intersection")
        };
        let Negation::Mlp(not) = &set.negation else {
            unreachable!("nln uses an mlp negation")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Self::eval_ctx(&mut rng);
        let (a1, c1) = and.forward(&self.params, w, &t, &mut ctx)?;
        let (a2, c2) = and.forward(&self.params, w, &f, &mut ctx)?;
        let (a3, c3) = and.forward(&self.params, w, w, &mut ctx)?;
        let (nw, cn) = not.forward(&self.params, w)?;
        let (a4, c4) = and.forward(&self.params, w, &nw, &mut ctx)?;

        let mut value = F::zero();
        // d(1 - Sim(x, y))/dx for each row pair
        let dissim = |x: &Tensor<F>, y: &Tensor<F>, value: &mut F| {
            let mut gx = Tensor::zeros(&[n, d]);
            for i in 0..n {
                let dist = x
                    .row(i)
                    .iter()
                    .zip(y.row(i))
                    .map(|(a, b)| (*a - *b) * (*a - *b))
                    .sum::<F>()
                    .sqrt();
                let one = F::one();
                *value += one - one / (one + dist);
                if dist > lit(1e-12) {
                    let s = one / (dist * (one + dist) * (one + dist));
                    for (g, (a, b)) in gx.row_mut(i).iter_mut().zip(x.row(i).iter().zip(y.row(i))) {
                        *g = s * (*a - *b);
                    }
                }
            }
            gx
        };
        let g1 = dissim(&a1, w, &mut value);
        let g2 = dissim(&a2, &f, &mut value);
        let g3 = dissim(&a3, w, &mut value);
        let g4 = dissim(&a4, &f, &mut value);

        let scaled = |mut g: Tensor<F>| {
            g.scale(weight);
            g
        };
        let (g1, g2, g3, g4) = (scaled(g1), scaled(g2), scaled(g3), scaled(g4));
        let store = &mut self.params;
        let mut dw = Tensor::zeros(&[n, d]);
        let mut dt = Tensor::zeros(&[n, d]);
        let mut df = Tensor::zeros(&[n, d]);
        // r1: x = AND(w, T), y = w
        let (dw1, dt1) = and.backward(store, &c1, &g1)?;
        dw.add_assign(&dw1)?;
        dt.add_assign(&dt1)?;
        dw.add_assign(&g1.map(|v| -v))?;
        // r2: x = AND(w, F), y = F
        let (dw2, df2) = and.backward(store, &c2, &g2)?;
        dw.add_assign(&dw2)?;
        df.add_assign(&df2)?;
        df.add_assign(&g2.map(|v| -v))?;
        // r3: x = AND(w, w), y = w
        let (dwa, dwb) = and.backward(store, &c3, &g3)?;
        dw.add_assign(&dwa)?;
        dw.add_assign(&dwb)?;
        dw.add_assign(&g3.map(|v| -v))?;
        // r4: x = AND(w, NOT w), y = F
        let (dw4, dnw) = and.backward(store, &c4, &g4)?;
        dw.add_assign(&dw4)?;
        dw.add_assign(&not.backward(store, &cn, &dnw)?)?;
        df.add_assign(&g4.map(|v| -v))?;

        store.accumulate(logic.truth, &dt.sum_rows());
        store.accumulate(logic.falsity, &df.sum_rows());
        Ok((value, dw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::parse_query;

    fn model(family: Family, dim: usize) -> Model<f64> {
        Model::new(ModelConfig::new(family, dim), 6, 4, 7).unwrap()
    }

    #[test]
    fn output_dims() {
        for family in Family::ALL {
            let m = model(family, 16);
            let s = m.entity_row(EntityId(1)).to_vec();
            assert_eq!(m.project(&s, RelationId(2)).unwrap().len(), 16, "{family}");
            assert_eq!(m.intersect(&[s.clone(), s.clone(), s.clone()]).unwrap().len(), 16);
            if family != Family::Mixer {
                assert_eq!(m.negate(&s).unwrap().len(), 16);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(Family::Mlp, 7).validate().is_err());
        assert!(ModelConfig::new(Family::Cnn, 8).validate().is_err());
        let mut c = ModelConfig::new(Family::Nln, 8);
        c.nln_weight = -1.0;
        assert!(c.validate().is_err());
        assert_eq!("mlp-mixer".parse::<Family>().unwrap(), Family::Mixer);
    }

    #[test]
    fn mixer_rejects_negation() {
        let m = model(Family::Mixer, 8);
        let s = m.entity_row(EntityId(0)).to_vec();
        assert!(matches!(
            m.negate(&s),
            Err(OpsError::UnsupportedOperator { operator: "negation", .. })
        ));
        let q = parse_query("(i (p 0 (e 1)) (n (p 2 (e 3))))").unwrap();
        assert!(matches!(
            m.embed_query(q.root()),
            Err(OpsError::UnsupportedOperator { .. })
        ));
    }

    #[test]
    fn intersect_arity() {
        let m = model(Family::Mlp, 8);
        let s = m.entity_row(EntityId(0)).to_vec();
        assert!(matches!(m.intersect(&[s]), Err(OpsError::Arity(1))));
    }

    #[test]
    fn relation_matrix_identity() {
        let mut m = model(Family::Nln, 4);
        let ident = Tensor::<f64>::identity(4).into_vec();
        let mats = m
            .params()
            .iter()
            .position(|p| p.name.ends_with("relation_matrices"))
            .unwrap();
        let id = m.params().ids().nth(mats).unwrap();
        m.params_mut().value_mut(id).row_mut(3).copy_from_slice(&ident);
        let s = vec![0.5, -1.0, 2.0, 3.0];
        assert_eq!(m.project(&s, RelationId(3)).unwrap(), s);
    }

    #[test]
    fn union_yields_two_embeddings() {
        let m = model(Family::Mlp, 8);
        let q = parse_query("(u (p 0 (e 1)) (p 2 (e 3)))").unwrap();
        let embs = m.embed_query(q.root()).unwrap();
        assert_eq!(embs.len(), 2);
        let one = m.embed_query(parse_query("(p 2 (e 3))").unwrap().root()).unwrap();
        assert_eq!(embs[1], one[0]);
    }

    #[test]
    fn pi_trace_and_fold_counts() {
        let m = model(Family::Mlp, 8);
        let q = parse_query("(i (p 2 (p 0 (e 1))) (p 3 (e 4)))").unwrap();
        let (embs, calls) = m.embed_query_traced(q.root()).unwrap();
        let (r0, r2, r3) = (RelationId(0), RelationId(2), RelationId(3));
        // canonical child order puts the single hop first
        assert_eq!(
            calls,
            vec![OpCall::Project(r3), OpCall::Project(r0), OpCall::Project(r2), OpCall::Intersect]
        );
        let path = m.project(&m.project(m.entity_row(EntityId(1)), r0).unwrap(), r2).unwrap();
        let side = m.project(m.entity_row(EntityId(4)), r3).unwrap();
        assert_eq!(embs, vec![m.intersect(&[side, path]).unwrap()]);

        // an n-way intersection folds as n - 1 pairwise calls, attention is one pass
        let three = parse_query("(i (p 0 (e 1)) (p 1 (e 2)) (p 3 (e 4)))").unwrap();
        for (family, folds) in [(Family::Mlp, 2), (Family::Cnn, 2), (Family::Nln, 2), (Family::MlpAttention, 1)] {
            let (_, calls) = model(family, 16).embed_query_traced(three.root()).unwrap();
            let n = calls.iter().filter(|c| **c == OpCall::Intersect).count();
            assert_eq!(n, folds, "{family:?}");
        }
    }

    #[test]
    fn regularizer_nonnegative() {
        let mut m = model(Family::Nln, 8);
        let w = m.entity_table().gather_rows(&[0, 1, 2]);
        let (v, dw) = m.logic_regularizer(&w, 1.0).unwrap();
        assert!(v >= 0.0 && v <= 12.0);
        assert_eq!(dw.shape(), &[3, 8]);
    }
}
