//! A small post-LN transformer encoder.

use indexmap::IndexMap;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Sentence,
    Token,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Query,
    Key,
    Value,
    AttentionOutput,
    Intermediate,
    Output,
    Embedding,
    Classifier,
}

impl LayerKind {
    pub const ALL: [LayerKind; 8] = [
        LayerKind::Query,
        LayerKind::Key,
        LayerKind::Value,
        LayerKind::AttentionOutput,
        LayerKind::Intermediate,
        LayerKind::Output,
        LayerKind::Embedding,
        LayerKind::Classifier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Query => "query",
            LayerKind::Key => "key",
            LayerKind::Value => "value",
            LayerKind::AttentionOutput => "attention_output",
            LayerKind::Intermediate => "intermediate",
            LayerKind::Output => "output",
            LayerKind::Embedding => "embedding",
            LayerKind::Classifier => "classifier",
        }
    }

    pub fn tag(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(usize::from(tag)).copied()
    }

    /// Embedding and classifier weights always stay in full precision.
    pub fn is_excluded(self) -> bool {
        matches!(self, LayerKind::Embedding | LayerKind::Classifier)
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub classes: usize,
    pub task: TaskKind,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 32,
            ffn: 64,
            vocab: 64,
            max_len: 16,
            classes: 2,
            task: TaskKind::Sentence,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid("model_config", format!("{name} must be at least 1")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::invalid(
                "model_config",
                format!("hidden {} is not divisible by heads {}", self.hidden, self.heads),
            ));
        }
        if self.vocab < 2 {
            return Err(Error::invalid("model_config", "vocab must include PAD and CLS"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("model_config", format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.hidden, self.ffn);
        let embeddings = self.vocab * d + self.max_len * d + 2 * d;
        let per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d);
        embeddings + self.layers * per_layer + d * self.classes + self.classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub kind: LayerKind,
    pub layer: Option<usize>,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    /// Weight matrices of the attention and feed-forward blocks.
    pub fn is_quantizable(&self) -> bool {
        !self.kind.is_excluded() && self.value.rank() == 2
    }
}

/// Named parameters in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    tensors: IndexMap<String, Param<T>>,
}

pub fn weight_name(layer: usize, block: &str) -> String {
    format!("layer{layer}.{block}.weight")
}

pub fn bias_name(layer: usize, block: &str) -> String {
    format!("layer{layer}.{block}.bias")
}

const BLOCKS: [(&str, LayerKind); 6] = [
    ("query", LayerKind::Query),
    ("key", LayerKind::Key),
    ("value", LayerKind::Value),
    ("attention_output", LayerKind::AttentionOutput),
    ("intermediate", LayerKind::Intermediate),
    ("output", LayerKind::Output),
];

impl<T: Scalar> ModelParams<T> {
    /// Expected tensor layout for `config`, in registration order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, LayerKind, Option<usize>, Vec<usize>)> {
        let (d, f) = (config.hidden, config.ffn);
        let mut out = vec![
            ("embeddings.word".to_string(), LayerKind::Embedding, None, vec![config.vocab, d]),
            ("embeddings.position".to_string(), LayerKind::Embedding, None, vec![config.max_len, d]),
            ("embeddings.ln_gain".to_string(), LayerKind::Embedding, None, vec![d]),
            ("embeddings.ln_bias".to_string(), LayerKind::Embedding, None, vec![d]),
        ];
        for l in 0..config.layers {
            for (block, kind) in BLOCKS {
                let (fan_in, fan_out) = match kind {
                    LayerKind::Intermediate => (d, f),
                    LayerKind::Output => (f, d),
                    _ => (d, d),
                };
                out.push((weight_name(l, block), kind, Some(l), vec![fan_in, fan_out]));
                out.push((bias_name(l, block), kind, Some(l), vec![fan_out]));
                if matches!(kind, LayerKind::AttentionOutput | LayerKind::Output) {
                    out.push((format!("layer{l}.{block}.ln_gain"), kind, Some(l), vec![d]));
                    out.push((format!("layer{l}.{block}.ln_bias"), kind, Some(l), vec![d]));
                }
            }
        }
        out.push(("classifier.weight".to_string(), LayerKind::Classifier, None, vec![d, config.classes]));
        out.push(("classifier.bias".to_string(), LayerKind::Classifier, None, vec![config.classes]));
        out
    }

    /// Builds parameters from named tensors, checking them against the layout.
    pub fn from_tensors(config: ModelConfig, mut named: IndexMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let mut tensors = IndexMap::new();
        for (name, kind, layer, shape) in Self::layout(&config) {
            let value = named
                .shift_remove(&name)
                .ok_or_else(|| Error::invalid("model_params", format!("missing tensor {name}")))?;
            if value.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "model_params",
                    left: value.shape().to_vec(),
                    right: shape,
                });
            }
            tensors.insert(name, Param { kind, layer, value });
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::invalid("model_params", format!("unexpected tensor {extra}")));
        }
        Ok(Self { config, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.tensors.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid("model_params", format!("no tensor named {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::invalid("model_params", format!("no tensor named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|p| p.value.numel()).sum()
    }

    /// Names of the quantizable weight matrices, optionally restricted to one layer.
    pub fn quantizable(&self, layer: Option<usize>) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| p.is_quantizable() && (layer.is_none() || p.layer == layer))
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            kind: p.kind,
                            layer: p.layer,
                            value: p.value.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl ModelParams<f32> {
    /// SHA-256 over every name and value, in order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.iter() {
            h.update(name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Truncated-normal weights (std 0.02), zero biases, unit layer-norm gains.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut named = IndexMap::new();
    for (name, _, _, shape) in ModelParams::<T>::layout(config) {
        let value = if name.ends_with("ln_gain") {
            Tensor::ones(&shape)
        } else if name.ends_with("bias") {
            Tensor::zeros(&shape)
        } else {
            Tensor::from_fn(&shape, |_| T::from_f64_lossy(truncated_normal(&mut rng, 0.02)))
        };
        named.insert(name, value);
    }
    ModelParams::from_tensors(config.clone(), named)
}

/// Equal-length token sequences, row-major `[batch, seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn new(rows: &[&[u32]]) -> Result<Self> {
        let seq = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || seq == 0 {
            return Err(Error::invalid("batch", "batch needs at least one non-empty sequence"));
        }
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::invalid("batch", "sequences in a batch must share one length"));
        }
        Ok(Self {
            tokens: rows.concat(),
            batch: rows.len(),
            seq,
        })
    }
}

/// Parameters bound to a tape, keyed by name.
pub type ParamVars<'t, T> = IndexMap<String, Var<'t, T>>;

/// Binds every parameter as a trainable leaf or as a frozen constant.
pub fn bind<'t, T: Scalar>(params: &ModelParams<T>, tape: &'t Tape<T>, trainable: bool) -> ParamVars<'t, T> {
    params
        .iter()
        .map(|(name, p)| {
            let v = if trainable {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            };
            (name.to_string(), v)
        })
        .collect()
}

pub struct Forward<'t, T: Scalar> {
    /// `[batch, classes]` for sentence tasks, `[batch·seq, classes]` for tagging.
    pub logits: Var<'t, T>,
    /// `trace[l][h]`: per-head attention context, `[batch, seq, head_dim]`.
    pub trace: Vec<Vec<Var<'t, T>>>,
    /// Attention weights, `[batch, seq, seq]`, same indexing as `trace`.
    pub attention: Vec<Vec<Var<'t, T>>>,
    /// Output of each layer, `[batch·seq, hidden]`.
    pub hidden: Vec<Var<'t, T>>,
}

fn lookup<'a, 't, T: Scalar>(vars: &'a ParamVars<'t, T>, name: &str) -> Result<&'a Var<'t, T>> {
    vars.get(name)
        .ok_or_else(|| Error::invalid("encoder_forward", format!("parameter {name} not bound")))
}

fn dropout<'t, T: Scalar>(x: Var<'t, T>, rate: f32, rng: &mut Option<&mut dyn RngCore>) -> Result<Var<'t, T>> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let mask: Vec<bool> = (0..x.value().numel())
                .map(|_| rng.random::<f32>() >= rate)
                .collect();
            x.dropout(&mask, T::from_f64_lossy(f64::from(rate)))
        }
        _ => Ok(x),
    }
}

fn linear<'t, T: Scalar>(x: &Var<'t, T>, vars: &ParamVars<'t, T>, layer: usize, block: &str) -> Result<Var<'t, T>> {
    x.matmul(lookup(vars, &weight_name(layer, block))?)?
        .add_bias(lookup(vars, &bias_name(layer, block))?)
}

/// Runs the encoder. Dropout is active only when `train_rng` is given.
pub fn encoder_forward<'t, T: Scalar>(
    config: &ModelConfig,
    vars: &ParamVars<'t, T>,
    batch: &Batch,
    mut train_rng: Option<&mut dyn RngCore>,
) -> Result<Forward<'t, T>> {
    let (b, n) = (batch.batch, batch.seq);
    if n > config.max_len {
        return Err(Error::invalid(
            "encoder_forward",
            format!("sequence length {n} exceeds max_len {}", config.max_len),
        ));
    }
    if let Some(bad) = batch.tokens.iter().find(|&&t| t as usize >= config.vocab) {
        return Err(Error::invalid(
            "encoder_forward",
            format!("token {bad} out of vocabulary of size {}", config.vocab),
        ));
    }
    let ids: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..b * n).map(|i| i % n).collect();
    let embedded = lookup(vars, "embeddings.word")?
        .gather_rows(&ids)?
        .add(&lookup(vars, "embeddings.position")?.gather_rows(&positions)?)?;
    let eps = T::from_f64_lossy(LN_EPS);
    let mut x = embedded.layer_norm(
        lookup(vars, "embeddings.ln_gain")?,
        lookup(vars, "embeddings.ln_bias")?,
        eps,
    )?;
    x = dropout(x, config.dropout, &mut train_rng)?;

    let dk = config.head_dim();
    let inv_sqrt = T::from_f64_lossy(1.0 / (dk as f64).sqrt());
    let tape = x.tape();
    let mut trace = Vec::with_capacity(config.layers);
    let mut attention = Vec::with_capacity(config.layers);
    let mut hidden = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let q = linear(&x, vars, l, "query")?;
        let k = linear(&x, vars, l, "key")?;
        let v = linear(&x, vars, l, "value")?;
        let mut heads = Vec::with_capacity(config.heads);
        let mut probs = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let split = |t: &Var<'t, T>| t.slice_cols(h * dk, dk)?.reshape(&[b, n, dk]);
            let scores = split(&q)?.bmm(&split(&k)?.transpose()?)?.scale(inv_sqrt);
            let p = scores.softmax(2, T::one())?;
            heads.push(p.bmm(&split(&v)?)?);
            probs.push(p);
        }
        let flat: Vec<Var<'t, T>> = heads
            .iter()
            .map(|a| a.reshape(&[b * n, dk]))
            .collect::<Result<_>>()?;
        let context = tape.concat(&flat)?;
        let attn_out = dropout(linear(&context, vars, l, "attention_output")?, config.dropout, &mut train_rng)?;
        let h1 = attn_out.add(&x)?.layer_norm(
            lookup(vars, &format!("layer{l}.attention_output.ln_gain"))?,
            lookup(vars, &format!("layer{l}.attention_output.ln_bias"))?,
            eps,
        )?;
        let inter = linear(&h1, vars, l, "intermediate")?.gelu();
        let out = dropout(linear(&inter, vars, l, "output")?, config.dropout, &mut train_rng)?;
        x = out.add(&h1)?.layer_norm(
            lookup(vars, &format!("layer{l}.output.ln_gain"))?,
            lookup(vars, &format!("layer{l}.output.ln_bias"))?,
            eps,
        )?;
        trace.push(heads);
        attention.push(probs);
        hidden.push(x);
    }

    let pooled = match config.task {
        TaskKind::Sentence => x.gather_rows(&(0..b).map(|i| i * n).collect::<Vec<_>>())?,
        TaskKind::Token => x,
    };
    let logits = pooled
        .matmul(lookup(vars, "classifier.weight")?)?
        .add_bias(lookup(vars, "classifier.bias")?)?;
    Ok(Forward {
        logits,
        trace,
        attention,
        hidden,
    })
}

/// Row-wise softmax of the eval-mode logits.
pub fn predict<T: Scalar>(params: &ModelParams<T>, batch: &Batch) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let vars = bind(params, &tape, false);
    let out = encoder_forward(&params.config, &vars, batch, None)?;
    let probs = out.logits.softmax(1, T::one())?;
    let value = (*probs.value()).clone();
    Ok(value)
}

/// Eval-mode logits.
pub fn logits<T: Scalar>(params: &ModelParams<T>, batch: &Batch) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let vars = bind(params, &tape, false);
    let out = encoder_forward(&params.config, &vars, batch, None)?;
    let value = (*out.logits.value()).clone();
    Ok(value)
}

pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    t.data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
