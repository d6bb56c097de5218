//! Small pre-norm decoder-only transformer with named linear injection
//! points. Stands in for a full-size LLM: every linear projection that LoRA
//! can target goes through [`Adaptation::project`].

mod train;
pub mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, seeded_random_matrix, softmax_in_place, Distribution, Matrix};

pub(crate) use train::{batch_gradients, side_project};
pub use train::{
    sequence_loss, train_backbone, BackboneTrainConfig, ForwardCache, Gradients, SideAdapter,
    TrainingSequence,
};
pub use vocab::{split_tokens, TokenId, Vocab};

pub const BACKBONE_FORMAT_VERSION: u32 = 1;
const RMS_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    /// Desk-scale default: big enough that per-layer matmuls dominate a
    /// decode step, small enough for CPU test runs.
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            ffn_dim: 256,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone {name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count: embeddings, per-layer attention and FFN
    /// projections, and the output head. RMS norms carry no parameters.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.ffn_dim;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + d * self.vocab_size
    }

    /// `(in, out)` shape of the weight behind a projection.
    pub fn projection_shape(&self, projection: Projection) -> (usize, usize) {
        let d = self.d_model;
        match projection {
            Projection::FfnUp => (d, self.ffn_dim),
            Projection::FfnDown => (self.ffn_dim, d),
            _ => (d, d),
        }
    }
}

/// Linear projection kinds inside one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::FfnUp,
        Projection::FfnDown,
    ];
    pub const ATTENTION: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
            Projection::FfnUp => "ffn_up",
            Projection::FfnDown => "ffn_down",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Which projections LoRA adapters attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionTargets {
    #[default]
    Attention,
    AttentionAndFfn,
}

impl InjectionTargets {
    pub fn projections(self) -> &'static [Projection] {
        match self {
            InjectionTargets::Attention => &Projection::ATTENTION,
            InjectionTargets::AttentionAndFfn => &Projection::ALL,
        }
    }
}

/// A named linear layer, rendered as `layer{i}.{projection}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InjectionPoint {
    pub layer_index: usize,
    pub projection: Projection,
}

impl InjectionPoint {
    pub fn new(layer_index: usize, projection: Projection) -> Self {
        Self {
            layer_index,
            projection,
        }
    }

    /// Dense index over all six projections of every layer.
    #[inline]
    pub fn slot(self) -> usize {
        self.layer_index * Projection::ALL.len() + self.projection.index()
    }

    pub fn slot_count(n_layers: usize) -> usize {
        n_layers * Projection::ALL.len()
    }

    pub fn name(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for InjectionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer_index, self.projection.as_str())
    }
}

impl FromStr for InjectionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Lookup(format!("injection point `{s}`"));
        let rest = s.strip_prefix("layer").ok_or_else(bad)?;
        let (idx, proj) = rest.split_once('.').ok_or_else(bad)?;
        let layer_index = idx.parse().map_err(|_| bad())?;
        let projection = Projection::ALL
            .into_iter()
            .find(|p| p.as_str() == proj)
            .ok_or_else(bad)?;
        Ok(Self::new(layer_index, projection))
    }
}

/// Hook through which every injectable projection is computed.
///
/// Implementations return `x · weight` plus whatever adapter contribution
/// they add for `point`.
pub trait Adaptation {
    fn project(&self, point: InjectionPoint, x: &Matrix, weight: &Matrix) -> Result<Matrix>;
}

/// Plain base-model projection.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoAdaptation;

impl Adaptation for NoAdaptation {
    fn project(&self, _point: InjectionPoint, x: &Matrix, weight: &Matrix) -> Result<Matrix> {
        matmul(x, weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
    pub ffn_up: Matrix,
    pub ffn_down: Matrix,
}

impl LayerWeights {
    pub fn get(&self, p: Projection) -> &Matrix {
        match p {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
            Projection::Output => &self.output,
            Projection::FfnUp => &self.ffn_up,
            Projection::FfnDown => &self.ffn_down,
        }
    }

    pub fn get_mut(&mut self, p: Projection) -> &mut Matrix {
        match p {
            Projection::Query => &mut self.query,
            Projection::Key => &mut self.key,
            Projection::Value => &mut self.value,
            Projection::Output => &mut self.output,
            Projection::FfnUp => &mut self.ffn_up,
            Projection::FfnDown => &mut self.ffn_down,
        }
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lm_head: Matrix,
}

impl BackboneWeights {
    pub fn zeros_like(config: &BackboneConfig) -> Self {
        let (d, v, f) = (config.d_model, config.vocab_size, config.ffn_dim);
        Self {
            token_embedding: Matrix::zeros(v, d),
            position_embedding: Matrix::zeros(config.max_seq_len, d),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights {
                    query: Matrix::zeros(d, d),
                    key: Matrix::zeros(d, d),
                    value: Matrix::zeros(d, d),
                    output: Matrix::zeros(d, d),
                    ffn_up: Matrix::zeros(d, f),
                    ffn_down: Matrix::zeros(f, d),
                })
                .collect(),
            lm_head: Matrix::zeros(d, v),
        }
    }

    fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for p in Projection::ALL {
                out.push((InjectionPoint::new(i, p).name(), layer.get(p)));
            }
        }
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let LayerWeights {
                query,
                key,
                value,
                output,
                ffn_up,
                ffn_down,
            } = layer;
            for (p, m) in Projection::ALL
                .into_iter()
                .zip([query, key, value, output, ffn_up, ffn_down])
            {
                out.push((InjectionPoint::new(i, p).name(), m));
            }
        }
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f32, other: &BackboneWeights) -> Result<()> {
        let others = other.named();
        for ((_, dst), (_, src)) in self.named_mut().into_iter().zip(others) {
            dst.axpy(alpha, src)?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }
}

/// Incremental decoding state: per-layer key/value cache.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl DecodeState {
    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    weights: BackboneWeights,
}

#[derive(Serialize, Deserialize)]
struct BackboneCheckpoint {
    format_version: u32,
    config: BackboneConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocab>,
    weights: BTreeMap<String, Matrix>,
}

impl Backbone {
    /// Seeded random initialization (fan-in scaled projections).
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let (d, v, f) = (config.d_model, config.vocab_size, config.ffn_dim);
        let mut seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut next = |rows: usize, cols: usize, std: f32| {
            seed = seed.wrapping_add(1);
            seeded_random_matrix(rows, cols, seed, Distribution::Gaussian { std })
        };
        let token_embedding = next(v, d, 1.0);
        let position_embedding = next(config.max_seq_len, d, 0.5);
        let layers = (0..config.n_layers)
            .map(|_| {
                let sd = 1.0 / (d as f32).sqrt();
                LayerWeights {
                    query: next(d, d, sd),
                    key: next(d, d, sd),
                    value: next(d, d, sd),
                    output: next(d, d, sd),
                    ffn_up: next(d, f, sd),
                    ffn_down: next(f, d, 1.0 / (f as f32).sqrt()),
                }
            })
            .collect();
        let lm_head = next(d, v, 1.0 / (d as f32).sqrt());
        Ok(Self {
            config,
            weights: BackboneWeights {
                token_embedding,
                position_embedding,
                layers,
                lm_head,
            },
        })
    }

    pub fn from_weights(config: BackboneConfig, weights: BackboneWeights) -> Result<Self> {
        config.validate()?;
        let expected = BackboneWeights::zeros_like(&config);
        for ((name, want), (_, got)) in expected.named().into_iter().zip(weights.named()) {
            if want.shape() != got.shape() {
                return Err(Error::Config(format!(
                    "weight {name} has shape {:?}, config requires {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        if expected.layers.len() != weights.layers.len() {
            return Err(Error::Config("layer count differs from config".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &BackboneWeights {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut BackboneWeights {
        &mut self.weights
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.parameter_count()
    }

    pub fn weight(&self, point: InjectionPoint) -> Result<&Matrix> {
        self.weights
            .layers
            .get(point.layer_index)
            .map(|l| l.get(point.projection))
            .ok_or_else(|| Error::Lookup(format!("injection point `{point}`")))
    }

    pub fn weight_mut(&mut self, point: InjectionPoint) -> Result<&mut Matrix> {
        self.weights
            .layers
            .get_mut(point.layer_index)
            .map(|l| l.get_mut(point.projection))
            .ok_or_else(|| Error::Lookup(format!("injection point `{point}`")))
    }

    /// Names of every injection point, `layer{i}.{projection}`, layer-major.
    pub fn list_injection_points(&self, targets: InjectionTargets) -> Vec<InjectionPoint> {
        (0..self.config.n_layers)
            .flat_map(|l| {
                targets
                    .projections()
                    .iter()
                    .map(move |&p| InjectionPoint::new(l, p))
            })
            .collect()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Full-sequence logits `[len × vocab_size]` for the base model.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Matrix> {
        self.forward_with(tokens, &NoAdaptation)
    }

    /// Full-sequence logits with every projection routed through `adaptation`.
    pub fn forward_with(&self, tokens: &[TokenId], adaptation: &dyn Adaptation) -> Result<Matrix> {
        Ok(self.forward_impl(tokens, adaptation, false)?.0)
    }

    pub fn start_decode(&self) -> DecodeState {
        let n = self.config.n_layers;
        DecodeState {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Feeds one token at the next position and returns its logits.
    pub fn step(
        &self,
        state: &mut DecodeState,
        token: TokenId,
        adaptation: &dyn Adaptation,
    ) -> Result<Vec<f32>> {
        let cfg = &self.config;
        if state.len >= cfg.max_seq_len {
            return Err(Error::Input(format!(
                "context full: max_seq_len {} reached",
                cfg.max_seq_len
            )));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {token} out of range for vocab size {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let pos = state.len;
        let inv_sqrt = 1.0 / (dh as f32).sqrt();

        let mut x: Vec<f32> = self
            .weights
            .token_embedding
            .row(token as usize)
            .iter()
            .zip(self.weights.position_embedding.row(pos))
            .map(|(a, b)| a + b)
            .collect();

        let mut scores = vec![0.0f32; pos + 1];
        for (l, layer) in self.weights.layers.iter().enumerate() {
            let n1 = Matrix::row_vector(&rms_norm_row(&x).0);
            let q = adaptation.project(InjectionPoint::new(l, Projection::Query), &n1, &layer.query)?;
            let k = adaptation.project(InjectionPoint::new(l, Projection::Key), &n1, &layer.key)?;
            let v = adaptation.project(InjectionPoint::new(l, Projection::Value), &n1, &layer.value)?;
            state.keys[l].extend_from_slice(k.data());
            state.values[l].extend_from_slice(v.data());
            let keys = &state.keys[l];
            let values = &state.values[l];

            let mut attn = vec![0.0f32; d];
            for h in 0..cfg.n_heads {
                let qh = &q.data()[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                    *s = dot(qh, kh) * inv_sqrt;
                }
                softmax_in_place(&mut scores);
                let out = &mut attn[h * dh..(h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(vh) {
                        *o += p * vv;
                    }
                }
            }
            let o = adaptation.project(
                InjectionPoint::new(l, Projection::Output),
                &Matrix::row_vector(&attn),
                &layer.output,
            )?;
            add_in_place(&mut x, o.data());

            let n2 = Matrix::row_vector(&rms_norm_row(&x).0);
            let mut u = adaptation.project(InjectionPoint::new(l, Projection::FfnUp), &n2, &layer.ffn_up)?;
            relu_in_place(u.data_mut());
            let f = adaptation.project(InjectionPoint::new(l, Projection::FfnDown), &u, &layer.ffn_down)?;
            add_in_place(&mut x, f.data());
        }
        state.len += 1;

        let nf = Matrix::row_vector(&rms_norm_row(&x).0);
        Ok(matmul(&nf, &self.weights.lm_head)?.into_data())
    }

    /// Greedy decoding. Invokes `on_token(position, token)` after each
    /// emitted token and stops after `max_new` tokens, at `stop`, or when
    /// the context window is full.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        stop: Option<TokenId>,
        adaptation: &dyn Adaptation,
        mut on_token: impl FnMut(usize, TokenId),
    ) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(Error::Input("generate requires a non-empty prompt".into()));
        }
        self.check_tokens(prompt)?;
        let mut out = prompt.to_vec();
        if max_new == 0 {
            return Ok(out);
        }
        let mut state = self.start_decode();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.step(&mut state, t, adaptation)?;
        }
        for emitted in 1..=max_new {
            let next = argmax(&logits) as TokenId;
            out.push(next);
            on_token(out.len() - 1, next);
            if Some(next) == stop || emitted == max_new || state.len() >= self.config.max_seq_len {
                break;
            }
            logits = self.step(&mut state, next, adaptation)?;
        }
        Ok(out)
    }

    /// Shared full-sequence forward. With `keep_cache` the activations
    /// needed by [`Backbone::backward`] are retained.
    pub(crate) fn forward_impl(
        &self,
        tokens: &[TokenId],
        adaptation: &dyn Adaptation,
        keep_cache: bool,
    ) -> Result<(Matrix, Option<ForwardCache>)> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(Error::Input("forward requires at least one token".into()));
        }
        let cfg = &self.config;
        let (t_len, d, dh) = (tokens.len(), cfg.d_model, cfg.head_dim());
        let inv_sqrt = 1.0 / (dh as f32).sqrt();

        let mut x = Matrix::zeros(t_len, d);
        for (t, &tok) in tokens.iter().enumerate() {
            let e = self.weights.token_embedding.row(tok as usize);
            let p = self.weights.position_embedding.row(t);
            for ((o, a), b) in x.row_mut(t).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }

        let mut cache = keep_cache.then(|| ForwardCache::new(tokens));
        for (l, layer) in self.weights.layers.iter().enumerate() {
            let (n1, inv1) = rms_norm(&x);
            let q = adaptation.project(InjectionPoint::new(l, Projection::Query), &n1, &layer.query)?;
            let k = adaptation.project(InjectionPoint::new(l, Projection::Key), &n1, &layer.key)?;
            let v = adaptation.project(InjectionPoint::new(l, Projection::Value), &n1, &layer.value)?;

            let mut ocat = Matrix::zeros(t_len, d);
            let mut probs = Vec::with_capacity(if keep_cache { cfg.n_heads } else { 0 });
            for h in 0..cfg.n_heads {
                let mut p = Matrix::zeros(t_len, t_len);
                for i in 0..t_len {
                    let qh = &q.row(i)[h * dh..(h + 1) * dh];
                    let row = &mut p.row_mut(i)[..=i];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = dot(qh, &k.row(j)[h * dh..(h + 1) * dh]) * inv_sqrt;
                    }
                    softmax_in_place(row);
                    let out = &mut ocat.row_mut(i)[h * dh..(h + 1) * dh];
                    for (j, &pij) in p.row(i)[..=i].iter().enumerate() {
                        for (o, &vv) in out.iter_mut().zip(&v.row(j)[h * dh..(h + 1) * dh]) {
                            *o += pij * vv;
                        }
                    }
                }
                if keep_cache {
                    probs.push(p);
                }
            }
            let attn = adaptation.project(InjectionPoint::new(l, Projection::Output), &ocat, &layer.output)?;
            let x2 = x.add(&attn)?;
            let (n2, inv2) = rms_norm(&x2);
            let u = adaptation.project(InjectionPoint::new(l, Projection::FfnUp), &n2, &layer.ffn_up)?;
            let mut hidden = u.clone();
            relu_in_place(hidden.data_mut());
            let f = adaptation.project(InjectionPoint::new(l, Projection::FfnDown), &hidden, &layer.ffn_down)?;
            let x3 = x2.add(&f)?;
            if let Some(c) = cache.as_mut() {
                c.push_layer(train::LayerCache {
                    x_in: x,
                    n1,
                    inv1,
                    q,
                    k,
                    v,
                    probs,
                    ocat,
                    x2,
                    n2,
                    inv2,
                    u,
                    hidden,
                });
            }
            x = x3;
        }
        let (nf, invf) = rms_norm(&x);
        let logits = matmul(&nf, &self.weights.lm_head)?;
        if let Some(c) = cache.as_mut() {
            c.finish(x, nf, invf);
        }
        Ok((logits, cache))
    }

    pub fn save(&self, path: &Path, vocab: Option<&Vocab>) -> Result<()> {
        let ckpt = BackboneCheckpoint {
            format_version: BACKBONE_FORMAT_VERSION,
            config: self.config,
            vocab: vocab.cloned(),
            weights: self
                .weights
                .named()
                .into_iter()
                .map(|(n, m)| (n, m.clone()))
                .collect(),
        };
        crate::io::write_json(path, &ckpt)
    }

    /// Loads a checkpoint, returning the model and its vocabulary if stored.
    pub fn load(path: &Path) -> Result<(Self, Option<Vocab>)> {
        let ckpt: BackboneCheckpoint = crate::io::read_json(path)?;
        if ckpt.format_version != BACKBONE_FORMAT_VERSION {
            return Err(Error::Version {
                expected: BACKBONE_FORMAT_VERSION,
                found: ckpt.format_version,
            });
        }
        let mut weights = BackboneWeights::zeros_like(&ckpt.config);
        let mut stored = ckpt.weights;
        for (name, slot) in weights.named_mut() {
            *slot = stored
                .remove(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing weight `{name}`")))?;
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Config(format!("checkpoint has unknown weight `{extra}`")));
        }
        Ok((Self::from_weights(ckpt.config, weights)?, ckpt.vocab))
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_in_place(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn relu_in_place(x: &mut [f32]) {
    for v in x {
        *v = v.max(0.0);
    }
}

/// Row RMS normalization without gain; returns `(x · inv, inv)`.
fn rms_norm_row(x: &[f32]) -> (Vec<f32>, f32) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    (x.iter().map(|v| v * inv).collect(), inv)
}

fn rms_norm(x: &Matrix) -> (Matrix, Vec<f32>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut invs = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (row, inv) = rms_norm_row(x.row(r));
        out.row_mut(r).copy_from_slice(&row);
        invs.push(inv);
    }
    (out, invs)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
