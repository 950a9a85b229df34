//! Message-level twin: next-message prediction over interleaved signaling
//! dialogue with a causal Transformer or an LSTM baseline.
//!
//! Training reads whole tokenized traces and cuts random windows of
//! `context_length + MAX_MESSAGE_TOKENS` tokens. The loss covers only the
//! tokens of control-plane messages, which are the messages the twin has
//! to emit. Prediction is greedy decoding of one message after a history
//! of at most `context_length` tokens.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msgcodec::{
    decode_message, encode_message, CodecError, Cause, DialogueSample, IeKey, IeValue, InformationElement,
    MessageDataset, MessageTrace, MessageType, SignalingMessage, TokenId, Vocabulary, MAX_MESSAGE_TOKENS,
};
use crate::netsim::{generate_signaling_trace, AdmissionAction, AdmissionState, GreedyPolicy, SimConfig, SimError};
use crate::nncore::layers::dropout_mask;
use crate::nncore::{
    cross_entropy, Activation, AdamConfig, AdamState, CausalSelfAttention, Checkpoint, Dense, Embedding, LayerNorm,
    Lstm, NnError, ParameterSet, Tensor,
};
use crate::policytwin::PolicyNet;

#[derive(Debug, Error)]
pub enum MsgTwinError {
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("held-out data shares traces with the training data")]
    TraceLeak,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

type Result<T> = std::result::Result<T, MsgTwinError>;

fn mismatch(msg: impl Into<String>) -> MsgTwinError {
    MsgTwinError::ConfigMismatch(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_layers: 4,
            num_heads: 4,
            model_dim: 128,
            ff_dim: 512,
            context_length: 256,
            vocab_size: Vocabulary::default().len(),
            dropout_rate: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return Err(mismatch("transformer sizes must be positive"));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(mismatch(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.context_length == 0 || self.vocab_size == 0 {
            return Err(mismatch("context_length and vocab_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(mismatch("dropout_rate must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub context_length: usize,
    pub vocab_size: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            num_layers: 2,
            hidden_dim: 256,
            embed_dim: 128,
            context_length: 256,
            vocab_size: Vocabulary::default().len(),
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(mismatch("lstm sizes must be positive"));
        }
        if self.context_length == 0 || self.vocab_size == 0 {
            return Err(mismatch("context_length and vocab_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Lstm(LstmConfig),
}

impl ModelConfig {
    pub fn label(&self) -> &'static str {
        match self {
            ModelConfig::Transformer(_) => "transformer",
            ModelConfig::Lstm(_) => "lstm",
        }
    }

    pub fn context_length(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.context_length,
            ModelConfig::Lstm(c) => c.context_length,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.vocab_size,
            ModelConfig::Lstm(c) => c.vocab_size,
        }
    }

    pub fn num_layers(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.num_layers,
            ModelConfig::Lstm(c) => c.num_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Transformer(c) => c.validate(),
            ModelConfig::Lstm(c) => c.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Steps between loss-history points and checkpoints.
    pub eval_interval: usize,
    /// Number of lower layers held fixed. The embeddings count as part of
    /// the first layer. `num_layers + 1` also freezes the output head.
    pub freeze_prefix_layers: usize,
    pub max_grad_norm: f64,
    /// Linear warm-up length in steps.
    pub warmup_steps: usize,
    /// Learning-rate multiplier reached at the last step by cosine decay.
    /// 1.0 keeps the rate constant after warm-up.
    pub final_lr_fraction: f64,
    /// Where periodic checkpoints go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            total_steps: 2000,
            seed: 0,
            eval_interval: 100,
            freeze_prefix_layers: 0,
            max_grad_norm: 1.0,
            warmup_steps: 0,
            final_lr_fraction: 1.0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.total_steps == 0 {
            return Err(mismatch("total_steps must be > 0"));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(mismatch("batch_size and eval_interval must be > 0"));
        }
        if self.freeze_prefix_layers > model.num_layers() + 1 {
            return Err(mismatch(format!(
                "freeze_prefix_layers {} exceeds the {} layers of the model",
                self.freeze_prefix_layers,
                model.num_layers()
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(mismatch("learning_rate must be > 0 and final_lr_fraction in [0, 1]"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

struct Block {
    ln1: LayerNorm,
    attention: CausalSelfAttention,
    ln2: LayerNorm,
    ff_in: Dense,
    ff_out: Dense,
}

/// Pre-norm decoder-only Transformer with fixed sinusoidal positions.
pub struct TransformerLm {
    pub config: TransformerConfig,
    tokens: Embedding,
    /// `[context_length + MAX_MESSAGE_TOKENS, model_dim]`, not trained.
    positions: Tensor,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    head: Dense,
}

struct BlockCache {
    ln1: crate::nncore::layers::LayerNormCache,
    attention: crate::nncore::attention::AttentionCache,
    attn_mask: Option<Vec<f64>>,
    ln2: crate::nncore::layers::LayerNormCache,
    normed2: Tensor,
    ff_pre: Tensor,
    ff_act: Tensor,
    ff_mask: Option<Vec<f64>>,
}

struct TransformerCache {
    ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    ln_final: crate::nncore::layers::LayerNormCache,
    normed: Tensor,
}

fn apply_mask(t: &mut Tensor, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in t.data_mut().iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len {
        for j in 0..dim {
            let rate = 10000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
            let angle = t as f64 * rate;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_matrix(len, dim, data)
}

impl TransformerLm {
    fn new(config: TransformerConfig, params: &mut ParameterSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let tokens = Embedding::new(params, "emb", config.vocab_size, d, 0.5, rng);
        let positions = sinusoidal_positions(config.context_length + MAX_MESSAGE_TOKENS, d);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let name = format!("block{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(params, &format!("{name}.ln1"), d),
                attention: CausalSelfAttention::new(params, &format!("{name}.att"), d, config.num_heads, rng)?,
                ln2: LayerNorm::new(params, &format!("{name}.ln2"), d),
                ff_in: Dense::new(params, &format!("{name}.ff1"), d, config.ff_dim, rng),
                ff_out: Dense::new(params, &format!("{name}.ff2"), config.ff_dim, d, rng),
            });
        }
        let ln_final = LayerNorm::new(params, "ln_f", d);
        let head = Dense::new(params, "head", d, config.vocab_size, rng);
        Ok(TransformerLm { config, tokens, positions, blocks, ln_final, head })
    }

    fn forward(
        &self,
        params: &ParameterSet,
        ids: &[usize],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, TransformerCache)> {
        let max_len = self.positions.rows();
        if ids.len() > max_len {
            return Err(mismatch(format!("sequence of {} tokens exceeds {max_len} positions", ids.len())));
        }
        let mut x = self.tokens.forward(params, ids)?;
        for (t, row) in x.data_mut().chunks_mut(self.config.model_dim).enumerate() {
            for (v, p) in row.iter_mut().zip(self.positions.row(t)) {
                *v += p;
            }
        }
        let rate = self.config.dropout_rate;
        let mut rng = dropout.filter(|_| rate > 0.0);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (n1, ln1) = b.ln1.forward(params, &x)?;
            let (mut a, attention) = b.attention.forward(params, &n1)?;
            let attn_mask = rng.as_mut().map(|r| dropout_mask(a.len(), rate, &mut **r));
            apply_mask(&mut a, &attn_mask);
            let mut x1 = x.clone();
            x1.add_assign(&a);
            let (normed2, ln2) = b.ln2.forward(params, &x1)?;
            let ff_pre = b.ff_in.forward(params, &normed2)?;
            let ff_act = Activation::Gelu.forward(&ff_pre);
            let mut f = b.ff_out.forward(params, &ff_act)?;
            let ff_mask = rng.as_mut().map(|r| dropout_mask(f.len(), rate, &mut **r));
            apply_mask(&mut f, &ff_mask);
            let mut x2 = x1;
            x2.add_assign(&f);
            caches.push(BlockCache { ln1, attention, attn_mask, ln2, normed2, ff_pre, ff_act, ff_mask });
            x = x2;
        }
        let (normed, ln_final) = self.ln_final.forward(params, &x)?;
        let logits = self.head.forward(params, &normed)?;
        Ok((logits, TransformerCache { ids: ids.to_vec(), blocks: caches, ln_final, normed }))
    }

    fn backward(&self, params: &mut ParameterSet, cache: &TransformerCache, dlogits: &Tensor) {
        let dn = self.head.backward(params, &cache.normed, dlogits);
        let mut dx = self.ln_final.backward(params, &cache.ln_final, &dn);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut df = dx.clone();
            apply_mask(&mut df, &c.ff_mask);
            let dact = b.ff_out.backward(params, &c.ff_act, &df);
            let dpre = Activation::Gelu.backward(&c.ff_pre, &dact);
            let dn2 = b.ff_in.backward(params, &c.normed2, &dpre);
            let mut dx1 = b.ln2.backward(params, &c.ln2, &dn2);
            dx1.add_assign(&dx);
            let mut da = dx1.clone();
            apply_mask(&mut da, &c.attn_mask);
            let dn1 = b.attention.backward(params, &c.attention, &da);
            let mut dx0 = b.ln1.backward(params, &c.ln1, &dn1);
            dx0.add_assign(&dx1);
            dx = dx0;
        }
        self.tokens.backward(params, &cache.ids, &dx);
    }

    fn frozen_prefixes(&self, k: usize) -> Vec<String> {
        let mut out = Vec::new();
        if k > 0 {
            out.push("emb.".into());
        }
        for i in 0..k.min(self.config.num_layers) {
            out.push(format!("block{i}."));
        }
        if k > self.config.num_layers {
            out.push("ln_f.".into());
            out.push("head.".into());
        }
        out
    }
}

/// Token embedding, stacked LSTMs and a linear read-out.
pub struct LstmLm {
    pub config: LstmConfig,
    tokens: Embedding,
    layers: Vec<Lstm>,
    head: Dense,
}

struct LstmLmCache {
    ids: Vec<usize>,
    layers: Vec<crate::nncore::lstm::LstmCache>,
    top: Tensor,
}

impl LstmLm {
    fn new(config: LstmConfig, params: &mut ParameterSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let tokens = Embedding::new(params, "emb", config.vocab_size, config.embed_dim, 0.1, rng);
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let inputs = if i == 0 { config.embed_dim } else { config.hidden_dim };
            layers.push(Lstm::new(params, &format!("lstm{i}"), inputs, config.hidden_dim, true, rng));
        }
        let head = Dense::new(params, "head", config.hidden_dim, config.vocab_size, rng);
        Ok(LstmLm { config, tokens, layers, head })
    }

    fn forward(&self, params: &ParameterSet, ids: &[usize]) -> Result<(Tensor, LstmLmCache)> {
        let mut x = self.tokens.forward(params, ids)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (h, c) = l.forward(params, &x)?;
            caches.push(c);
            x = h;
        }
        let logits = self.head.forward(params, &x)?;
        Ok((logits, LstmLmCache { ids: ids.to_vec(), layers: caches, top: x }))
    }

    fn backward(&self, params: &mut ParameterSet, cache: &LstmLmCache, dlogits: &Tensor) {
        let mut dx = self.head.backward(params, &cache.top, dlogits);
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            dx = l.backward(params, c, &dx);
        }
        self.tokens.backward(params, &cache.ids, &dx);
    }

    fn frozen_prefixes(&self, k: usize) -> Vec<String> {
        let mut out = Vec::new();
        if k > 0 {
            out.push("emb.".into());
        }
        for i in 0..k.min(self.config.num_layers) {
            out.push(format!("lstm{i}."));
        }
        if k > self.config.num_layers {
            out.push("head.".into());
        }
        out
    }
}

enum Network {
    Transformer(TransformerLm),
    Lstm(LstmLm),
}

/// A trained or untrained next-message model together with its weights
/// and the digests of the traces it was trained on.
pub struct MessageModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
    /// Digests of every trace seen in training, used to reject leaky
    /// evaluations.
    pub trained_on: Vec<String>,
    network: Network,
}

impl MessageModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let network = match config {
            ModelConfig::Transformer(c) => Network::Transformer(TransformerLm::new(c.clone(), &mut params, &mut rng)?),
            ModelConfig::Lstm(c) => Network::Lstm(LstmLm::new(c.clone(), &mut params, &mut rng)?),
        };
        Ok(MessageModel { config: config.clone(), params, trained_on: Vec::new(), network })
    }

    pub fn label(&self) -> &'static str {
        self.config.label()
    }

    pub fn context_length(&self) -> usize {
        self.config.context_length()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Next-token logits for every position, shape `[T, V]`.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(match &self.network {
            Network::Transformer(m) => m.forward(&self.params, &ids, None)?.0,
            Network::Lstm(m) => m.forward(&self.params, &ids)?.0,
        })
    }

    /// Masked next-token loss of one window. Gradients are accumulated into
    /// `params` scaled by `weight`.
    pub fn accumulate_window(
        &mut self,
        inputs: &[TokenId],
        targets: &[TokenId],
        mask: &[bool],
        weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let tgt: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        match &self.network {
            Network::Transformer(m) => {
                let (logits, cache) = m.forward(&self.params, &ids, Some(rng))?;
                let (loss, mut dl) = cross_entropy(&logits, &tgt, mask)?;
                dl.scale(weight);
                m.backward(&mut self.params, &cache, &dl);
                Ok(loss)
            }
            Network::Lstm(m) => {
                let (logits, cache) = m.forward(&self.params, &ids)?;
                let (loss, mut dl) = cross_entropy(&logits, &tgt, mask)?;
                dl.scale(weight);
                m.backward(&mut self.params, &cache, &dl);
                Ok(loss)
            }
        }
    }

    fn window_loss(&self, inputs: &[TokenId], targets: &[TokenId], mask: &[bool]) -> Result<f64> {
        let logits = self.logits(inputs)?;
        let tgt: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        Ok(cross_entropy(&logits, &tgt, mask)?.0)
    }

    /// Marks the lower `k` layers frozen and everything else trainable.
    pub fn freeze_prefix_layers(&mut self, k: usize) {
        let prefixes = match &self.network {
            Network::Transformer(m) => m.frozen_prefixes(k),
            Network::Lstm(m) => m.frozen_prefixes(k),
        };
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let frozen = prefixes.iter().any(|p| self.params.name(id).starts_with(p.as_str()));
            self.params.set_frozen(id, frozen);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "message_model".to_string());
        match &self.config {
            ModelConfig::Transformer(c) => {
                meta.insert("arch".into(), "transformer".into());
                meta.insert("num_layers".into(), c.num_layers.to_string());
                meta.insert("num_heads".into(), c.num_heads.to_string());
                meta.insert("model_dim".into(), c.model_dim.to_string());
                meta.insert("ff_dim".into(), c.ff_dim.to_string());
                meta.insert("context_length".into(), c.context_length.to_string());
                meta.insert("vocab_size".into(), c.vocab_size.to_string());
                meta.insert("dropout_rate".into(), format!("{:?}", c.dropout_rate));
            }
            ModelConfig::Lstm(c) => {
                meta.insert("arch".into(), "lstm".into());
                meta.insert("num_layers".into(), c.num_layers.to_string());
                meta.insert("hidden_dim".into(), c.hidden_dim.to_string());
                meta.insert("embed_dim".into(), c.embed_dim.to_string());
                meta.insert("context_length".into(), c.context_length.to_string());
                meta.insert("vocab_size".into(), c.vocab_size.to_string());
            }
        }
        meta.insert("trained_on".into(), self.trained_on.join(","));
        Checkpoint::from_params(&self.params, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        let field = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| mismatch(format!("checkpoint metadata lacks a valid `{k}`")))
        };
        let config = match meta.get("arch").map(String::as_str) {
            Some("transformer") => ModelConfig::Transformer(TransformerConfig {
                num_layers: field("num_layers")?,
                num_heads: field("num_heads")?,
                model_dim: field("model_dim")?,
                ff_dim: field("ff_dim")?,
                context_length: field("context_length")?,
                vocab_size: field("vocab_size")?,
                dropout_rate: meta
                    .get("dropout_rate")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| mismatch("checkpoint metadata lacks `dropout_rate`"))?,
            }),
            Some("lstm") => ModelConfig::Lstm(LstmConfig {
                num_layers: field("num_layers")?,
                hidden_dim: field("hidden_dim")?,
                embed_dim: field("embed_dim")?,
                context_length: field("context_length")?,
                vocab_size: field("vocab_size")?,
            }),
            other => return Err(mismatch(format!("checkpoint is not a message model (arch {other:?})"))),
        };
        let mut model = MessageModel::new(&config, 0)?;
        ckpt.restore_into(&mut model.params)?;
        model.trained_on = meta
            .get("trained_on")
            .map(|s| s.split(',').filter(|d| !d.is_empty()).map(String::from).collect())
            .unwrap_or_default();
        Ok(model)
    }
}

/// Tokenized traces kept whole, with a flag per token marking
/// control-plane message tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenCorpus {
    pub streams: Vec<Vec<TokenId>>,
    pub control_plane: Vec<Vec<bool>>,
    pub trace_digests: Vec<String>,
    pub vocab_size: usize,
}

impl TokenCorpus {
    pub fn from_traces(traces: &[MessageTrace], vocab: &Vocabulary) -> Result<Self> {
        let mut out = TokenCorpus { vocab_size: vocab.len(), ..Default::default() };
        for t in traces {
            let mut stream = vec![vocab.bos()];
            let mut cp = vec![false];
            for m in &t.messages {
                let enc = encode_message(m, vocab)?;
                cp.extend(std::iter::repeat_n(m.is_control_plane(), enc.len()));
                stream.extend(enc);
            }
            out.streams.push(stream);
            out.control_plane.push(cp);
            out.trace_digests.push(t.digest());
        }
        Ok(out)
    }

    pub fn total_tokens(&self) -> usize {
        self.streams.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.iter().all(|s| s.len() < 2)
    }

    /// Random window `(inputs, targets, mask)` of at most `len` inputs.
    fn window(&self, len: usize, rng: &mut ChaCha8Rng) -> (Vec<TokenId>, Vec<TokenId>, Vec<bool>) {
        let total: usize = self.streams.iter().map(|s| s.len().saturating_sub(1)).sum();
        let mut pick = rng.random_range(0..total);
        let mut k = 0;
        for (i, s) in self.streams.iter().enumerate() {
            let n = s.len().saturating_sub(1);
            if pick < n {
                k = i;
                break;
            }
            pick -= n;
        }
        let s = &self.streams[k];
        let cp = &self.control_plane[k];
        let w = len.min(s.len() - 1);
        let start = rng.random_range(0..=s.len() - 1 - w);
        (s[start..start + w].to_vec(), s[start + 1..start + w + 1].to_vec(), cp[start + 1..start + w + 1].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub label: String,
    /// Mean training loss over each `eval_interval` block.
    pub loss_history: Vec<LossPoint>,
    pub final_loss: f64,
}

fn window_len(model: &MessageModel) -> usize {
    model.context_length() + MAX_MESSAGE_TOKENS
}

/// Next-token training on random windows with Adam and gradient
/// clipping. Frozen parameters follow `cfg.freeze_prefix_layers`.
pub fn train_message_twin(model: &mut MessageModel, corpus: &TokenCorpus, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate(&model.config)?;
    if corpus.is_empty() {
        return Err(MsgTwinError::EmptyInput("training corpus".into()));
    }
    if corpus.vocab_size != model.config.vocab_size() {
        return Err(mismatch(format!(
            "corpus vocabulary has {} tokens, model expects {}",
            corpus.vocab_size,
            model.config.vocab_size()
        )));
    }
    model.freeze_prefix_layers(cfg.freeze_prefix_layers);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(cfg.learning_rate));
    let len = window_len(model);
    let mut history = Vec::new();
    let mut block_sum = 0.0;
    let mut block_n = 0usize;
    for step in 0..cfg.total_steps {
        model.params.zero_grads();
        let batch: Vec<_> = (0..cfg.batch_size).map(|_| corpus.window(len, &mut rng)).collect();
        let counted = batch.iter().filter(|(_, _, m)| m.iter().any(|&b| b)).count();
        let mut loss = 0.0;
        if counted > 0 {
            let weight = 1.0 / counted as f64;
            for (x, y, m) in &batch {
                if m.iter().any(|&b| b) {
                    loss += weight * model.accumulate_window(x, y, m, weight, &mut rng)?;
                }
            }
            if cfg.max_grad_norm > 0.0 {
                model.params.clip_grad_norm(cfg.max_grad_norm);
            }
            adam.config.learning_rate = cfg.lr_at(step);
            adam.step(&mut model.params);
            block_sum += loss;
            block_n += 1;
        }
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.total_steps {
            let mean = if block_n > 0 { block_sum / block_n as f64 } else { 0.0 };
            history.push(LossPoint { step: step + 1, loss: mean });
            block_sum = 0.0;
            block_n = 0;
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(NnError::from)?;
                model.to_checkpoint().save(&dir.join(format!("{}_step{:06}.ckpt", model.label(), step + 1)))?;
            }
        }
    }
    model.params.freeze_where(|_| false);
    let mut seen: HashSet<String> = model.trained_on.iter().cloned().collect();
    for d in &corpus.trace_digests {
        if seen.insert(d.clone()) {
            model.trained_on.push(d.clone());
        }
    }
    let final_loss = history.last().map_or(0.0, |p| p.loss);
    Ok(TrainReport { label: model.label().to_string(), loss_history: history, final_loss })
}

/// Mean masked loss over `windows` fixed random windows of `corpus`.
pub fn corpus_loss(model: &MessageModel, corpus: &TokenCorpus, windows: usize, seed: u64) -> Result<f64> {
    if corpus.is_empty() || windows == 0 {
        return Err(MsgTwinError::EmptyInput("loss corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = window_len(model);
    let mut sum = 0.0;
    let mut n = 0usize;
    for _ in 0..windows {
        let (x, y, m) = corpus.window(len, &mut rng);
        if m.iter().any(|&b| b) {
            sum += model.window_loss(&x, &y, &m)?;
            n += 1;
        }
    }
    Ok(if n > 0 { sum / n as f64 } else { 0.0 })
}

/// Decides the accept/reject outcome of a session establishment in place
/// of the language model.
pub trait AdmissionOverride {
    fn admit(&self, candidate: &SignalingMessage) -> bool;
}

/// The policy-level twin's decision for a caller-supplied admission state:
/// accept when its feasibility-masked choice admits any request, reject
/// when it defers.
pub struct PolicyTwinOverride<'a> {
    pub net: &'a PolicyNet,
    pub state: &'a AdmissionState,
    pub config: &'a SimConfig,
}

impl AdmissionOverride for PolicyTwinOverride<'_> {
    fn admit(&self, _candidate: &SignalingMessage) -> bool {
        !matches!(self.net.act(self.state, self.config), AdmissionAction::Defer)
    }
}

/// Result of decoding one message.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Generated tokens, separator included when one was produced.
    pub tokens: Vec<TokenId>,
    /// `Err` holds the reason the tokens are not a schema-valid message.
    pub message: std::result::Result<SignalingMessage, String>,
    pub overridden: bool,
}

impl Prediction {
    pub fn is_failure(&self) -> bool {
        self.message.is_err()
    }
}

fn truncate_history<'a>(history: &'a [TokenId], context: usize) -> &'a [TokenId] {
    &history[history.len().saturating_sub(context)..]
}

fn argmax_row(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

fn greedy_continue(model: &MessageModel, history: &[TokenId], mut out: Vec<TokenId>, sep: TokenId) -> Result<Vec<TokenId>> {
    while out.last() != Some(&sep) && out.len() < MAX_MESSAGE_TOKENS {
        let mut seq = history.to_vec();
        seq.extend_from_slice(&out);
        let logits = model.logits(&seq)?;
        out.push(argmax_row(logits.row(logits.rows() - 1)));
    }
    Ok(out)
}

/// Greedy decoding. `target`, when given, is only used to run the
/// teacher-forced prefix in one pass; the output is identical to plain
/// greedy decoding because the model is causal.
fn decode_tokens(
    model: &MessageModel,
    history: &[TokenId],
    target: Option<&[TokenId]>,
    vocab: &Vocabulary,
) -> Result<Vec<TokenId>> {
    let bos = [vocab.bos()];
    let history = truncate_history(history, model.context_length());
    let history = if history.is_empty() { &bos[..] } else { history };
    let Some(target) = target.filter(|t| !t.is_empty()) else {
        return greedy_continue(model, history, Vec::new(), vocab.sep());
    };
    let mut seq = history.to_vec();
    seq.extend_from_slice(&target[..target.len() - 1]);
    let logits = model.logits(&seq)?;
    let mut out = Vec::new();
    for i in 0..target.len() {
        let tok = argmax_row(logits.row(history.len() - 1 + i));
        out.push(tok);
        if tok != target[i] || tok == vocab.sep() {
            break;
        }
    }
    greedy_continue(model, history, out, vocab.sep())
}

/// Messages fully contained in `history`, oldest first.
fn history_messages(history: &[TokenId], vocab: &Vocabulary) -> Vec<SignalingMessage> {
    history
        .split_inclusive(|&t| t == vocab.sep())
        .filter_map(|seg| {
            let seg = seg.strip_prefix(&[vocab.bos()]).unwrap_or(seg);
            decode_message(seg, vocab).ok()
        })
        .collect()
}

fn override_outcome(
    msg: SignalingMessage,
    admit: bool,
    history: &[TokenId],
    vocab: &Vocabulary,
    config: &SimConfig,
) -> std::result::Result<SignalingMessage, String> {
    let (ue, session) = match (msg.ie(IeKey::UeId), msg.ie(IeKey::SessionId)) {
        (Some(u), Some(s)) => (u, s),
        _ => return Err("decoded outcome lacks UE or session identity".into()),
    };
    let ie = |key, value| InformationElement { key, value };
    if !admit {
        return Ok(SignalingMessage::new(
            MessageType::PduSessionEstablishmentReject,
            msg.ue_id,
            vec![ie(IeKey::UeId, ue), ie(IeKey::SessionId, session), ie(IeKey::Cause, IeValue::Cause(Cause::InsufficientResources))],
        ));
    }
    let request = history_messages(history, vocab).into_iter().rev().find(|m| {
        m.msg_type == MessageType::PduSessionEstablishmentRequest
            && m.ie(IeKey::UeId) == Some(ue)
            && m.ie(IeKey::SessionId) == Some(session)
    });
    let Some(request) = request else {
        return Err("no session request in the history to build an accept from".into());
    };
    let (Some(IeValue::Slice(slice)), Some(qos)) = (request.ie(IeKey::SliceId), request.ie(IeKey::QosProfile)) else {
        return Err("session request lacks slice or QoS".into());
    };
    let grant = config.profile(slice).demand.total().min(u32::from(vocab.id_pool()) - 1) as u16;
    Ok(SignalingMessage::new(
        MessageType::PduSessionEstablishmentAccept,
        msg.ue_id,
        vec![
            ie(IeKey::UeId, ue),
            ie(IeKey::SessionId, session),
            ie(IeKey::SliceId, IeValue::Slice(slice)),
            ie(IeKey::QosProfile, qos),
            ie(IeKey::ResourceGrant, IeValue::Int(grant)),
        ],
    ))
}

fn finish_prediction(
    tokens: Vec<TokenId>,
    history: &[TokenId],
    vocab: &Vocabulary,
    policy: Option<(&dyn AdmissionOverride, &SimConfig)>,
) -> Prediction {
    let decoded = decode_message(&tokens, vocab)
        .map_err(|e| e.to_string())
        .and_then(|m| m.validate(vocab.id_pool()).map(|_| m).map_err(|e| e.to_string()));
    let Ok(msg) = decoded else {
        return Prediction { tokens, message: decoded, overridden: false };
    };
    let outcome = matches!(msg.msg_type, MessageType::PduSessionEstablishmentAccept | MessageType::PduSessionEstablishmentReject);
    match policy {
        Some((oracle, config)) if outcome => {
            let admit = oracle.admit(&msg);
            let message = override_outcome(msg, admit, history, vocab, config);
            let tokens = match &message {
                Ok(m) => encode_message(m, vocab).unwrap_or(tokens),
                Err(_) => tokens,
            };
            Prediction { tokens, message, overridden: true }
        }
        _ => Prediction { tokens, message: Ok(msg), overridden: false },
    }
}

/// Greedy next-message prediction. An empty history is treated as a lone
/// BOS token. With a policy override, a decoded session accept or reject
/// is replaced by the override's decision and its IEs are rebuilt from the
/// history.
pub fn predict_next_message(
    model: &MessageModel,
    history: &[TokenId],
    vocab: &Vocabulary,
    policy: Option<(&dyn AdmissionOverride, &SimConfig)>,
) -> Result<Prediction> {
    let tokens = decode_tokens(model, history, None, vocab)?;
    Ok(finish_prediction(tokens, history, vocab, policy))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub message_accuracy: f64,
    pub token_accuracy: f64,
    pub ie_recall: f64,
    /// Reported as 0 when no IE was predicted at all; see
    /// `precision_undefined`.
    pub ie_precision: f64,
    pub precision_undefined: bool,
    pub decode_failure_rate: f64,
    /// Fraction of registration-accept targets predicted with the right
    /// type and UE, `None` when there were none.
    pub registration_accept_match: Option<f64>,
}

fn ie_set(msg: &SignalingMessage) -> Vec<InformationElement> {
    msg.ies.clone()
}

/// Scores predictions against target encodings. IE counts are
/// micro-averaged over `key=value` pairs; decode failures predict no IEs.
pub fn score_predictions(pairs: &[(Prediction, Vec<TokenId>)], vocab: &Vocabulary) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(MsgTwinError::EmptyInput("no predictions to score".into()));
    }
    let mut exact = 0usize;
    let mut tok_hits = 0usize;
    let mut tok_total = 0usize;
    let mut hit = 0usize;
    let mut target_ies = 0usize;
    let mut predicted_ies = 0usize;
    let mut failures = 0usize;
    let mut reg = (0usize, 0usize);
    for (pred, target) in pairs {
        let want = decode_message(target, vocab)?;
        if pred.tokens == *target {
            exact += 1;
        }
        tok_total += target.len();
        tok_hits += target.iter().zip(&pred.tokens).filter(|(a, b)| a == b).count();
        let want_ies = ie_set(&want);
        target_ies += want_ies.len();
        match &pred.message {
            Ok(got) => {
                let got_ies = ie_set(got);
                predicted_ies += got_ies.len();
                hit += got_ies.iter().filter(|ie| want_ies.contains(ie)).count();
            }
            Err(_) => failures += 1,
        }
        if want.msg_type == MessageType::RegistrationAccept {
            reg.1 += 1;
            if pred.message.as_ref().is_ok_and(|m| m.msg_type == want.msg_type && m.ue_id == want.ue_id) {
                reg.0 += 1;
            }
        }
    }
    let n = pairs.len() as f64;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalMetrics {
        samples: pairs.len(),
        message_accuracy: exact as f64 / n,
        token_accuracy: ratio(tok_hits, tok_total),
        ie_recall: ratio(hit, target_ies),
        ie_precision: ratio(hit, predicted_ies),
        precision_undefined: predicted_ies == 0,
        decode_failure_rate: failures as f64 / n,
        registration_accept_match: (reg.1 > 0).then(|| ratio(reg.0, reg.1)),
    })
}

/// Indices of at most `max` samples spread evenly over `0..n`.
fn spread(n: usize, max: usize) -> Vec<usize> {
    if max == 0 || n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Greedy predictions for every (or an evenly spread subset of at most
/// `max_samples`) held-out sample, paired with the target.
pub fn predict_dataset(
    model: &MessageModel,
    dataset: &MessageDataset,
    vocab: &Vocabulary,
    max_samples: usize,
) -> Result<Vec<(Prediction, Vec<TokenId>)>> {
    if !dataset.disjoint_from(&model.trained_on) {
        return Err(MsgTwinError::TraceLeak);
    }
    let mut out = Vec::new();
    for i in spread(dataset.samples.len(), max_samples) {
        let DialogueSample { history, target } = &dataset.samples[i];
        let tokens = decode_tokens(model, history, Some(target), vocab)?;
        out.push((finish_prediction(tokens, history, vocab, None), target.clone()));
    }
    Ok(out)
}

/// Greedy evaluation on a held-out dataset whose traces the model has
/// never trained on. `max_samples = 0` scores every sample.
pub fn evaluate(model: &MessageModel, dataset: &MessageDataset, vocab: &Vocabulary, max_samples: usize) -> Result<EvalMetrics> {
    if dataset.context_length != model.context_length() {
        return Err(mismatch(format!(
            "dataset context {} differs from model context {}",
            dataset.context_length,
            model.context_length()
        )));
    }
    score_predictions(&predict_dataset(model, dataset, vocab, max_samples)?, vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub max_concurrent_ues: usize,
    pub seed: u64,
    pub parameters: usize,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub loss_curves: Vec<(String, Vec<LossPoint>)>,
}

/// Traffic and data settings for a concurrency sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ue_levels: Vec<usize>,
    /// Offered load as a fraction of the concurrency cap. Arrival rates
    /// are rescaled per level so the contention stays comparable.
    pub load_factor: f64,
    pub train_episodes: usize,
    pub test_episodes: usize,
    /// Episode horizon in seconds for sweep traces.
    pub horizon: f64,
    /// Held-out samples scored per model, evenly spread. 0 scores all.
    pub max_eval_samples: usize,
    pub seeds: Vec<u64>,
    /// Largest allowed relative parameter-count difference between the
    /// compared models.
    pub max_param_gap: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ue_levels: vec![4, 8, 16, 32],
            load_factor: 0.6,
            train_episodes: 180,
            test_episodes: 20,
            horizon: 100.0,
            max_eval_samples: 1000,
            seeds: vec![0, 1, 2, 3, 4],
            max_param_gap: 0.1,
        }
    }
}

/// Simulator settings for one concurrency level.
pub fn level_config(base: &SimConfig, level: usize, sweep: &SweepConfig) -> SimConfig {
    let load = base.offered_load();
    let scale = if load > 0.0 { sweep.load_factor * level as f64 / load } else { 1.0 };
    let mut cfg = base.with_arrival_scale(scale);
    cfg.max_concurrent_ues = level;
    cfg.horizon = sweep.horizon;
    cfg
}

/// Greedy-policy traces for episodes seeded `first_seed..first_seed + n`.
pub fn generate_traces(cfg: &SimConfig, first_seed: u64, n: usize) -> Result<Vec<MessageTrace>> {
    (0..n as u64)
        .map(|k| {
            let mut greedy = GreedyPolicy::new(cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(first_seed + k);
            Ok(generate_signaling_trace(cfg, &mut greedy, &mut rng)?)
        })
        .collect()
}

/// Relative parameter-count gap `|a - b| / max(a, b)`.
pub fn parameter_gap(a: usize, b: usize) -> f64 {
    a.abs_diff(b) as f64 / a.max(b).max(1) as f64
}

/// Data for one level: training corpus and held-out dataset. Training
/// and held-out episodes use disjoint seed ranges.
pub fn level_data(
    base: &SimConfig,
    level: usize,
    sweep: &SweepConfig,
    context_length: usize,
    vocab: &Vocabulary,
) -> Result<(TokenCorpus, MessageDataset)> {
    let cfg = level_config(base, level, sweep);
    let seed0 = base.seed.wrapping_add(1_000_000 * level as u64);
    let train = generate_traces(&cfg, seed0, sweep.train_episodes)?;
    let test = generate_traces(&cfg, seed0 + 500_000, sweep.test_episodes)?;
    let corpus = TokenCorpus::from_traces(&train, vocab)?;
    let held_out = MessageDataset::from_traces(&test, context_length, vocab)?;
    if !held_out.disjoint_from(&corpus.trace_digests) {
        return Err(MsgTwinError::TraceLeak);
    }
    Ok((corpus, held_out))
}

/// A model to sweep and the training settings it uses. Learning rates
/// may differ per architecture; step and batch budgets should match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepModel {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Trains and evaluates every model at every level for every seed. Models
/// are checked for matched parameter budgets first.
pub fn concurrency_sweep(models: &[SweepModel], base: &SimConfig, sweep: &SweepConfig) -> Result<EvalReport> {
    concurrency_sweep_with(models, base, sweep, |_| {})
}

/// [`concurrency_sweep`] that reports each finished row to `progress`.
pub fn concurrency_sweep_with(
    models: &[SweepModel],
    base: &SimConfig,
    sweep: &SweepConfig,
    mut progress: impl FnMut(&EvalRow),
) -> Result<EvalReport> {
    if sweep.ue_levels.is_empty() || models.is_empty() || sweep.seeds.is_empty() {
        return Err(MsgTwinError::EmptyInput("sweep needs levels, models and seeds".into()));
    }
    let cfgs: Vec<ModelConfig> = models.iter().map(|m| m.model.clone()).collect();
    check_matched_budgets(&cfgs, sweep.max_param_gap)?;
    let context = cfgs[0].context_length();
    if cfgs.iter().any(|m| m.context_length() != context) {
        return Err(mismatch("swept models must share one context length"));
    }
    for m in models {
        m.train.validate(&m.model)?;
    }
    let vocab = Vocabulary::default();
    let mut report = EvalReport::default();
    for &level in &sweep.ue_levels {
        let (corpus, held_out) = level_data(base, level, sweep, context, &vocab)?;
        for &seed in &sweep.seeds {
            for m in models {
                let (row, train) = run_one(&m.model, &corpus, &held_out, &m.train, seed, sweep.max_eval_samples, &vocab)?;
                let row = EvalRow { max_concurrent_ues: level, ..row };
                progress(&row);
                report.loss_curves.push((format!("{}_ue{level}_seed{seed}", m.model.label()), train.loss_history));
                report.rows.push(row);
            }
        }
    }
    Ok(report)
}

pub fn check_matched_budgets(model_cfgs: &[ModelConfig], max_gap: f64) -> Result<Vec<usize>> {
    let counts = model_cfgs
        .iter()
        .map(|c| MessageModel::new(c, 0).map(|m| m.num_parameters()))
        .collect::<Result<Vec<_>>>()?;
    for (i, &a) in counts.iter().enumerate() {
        for &b in &counts[i + 1..] {
            if parameter_gap(a, b) >= max_gap {
                return Err(mismatch(format!("parameter budgets {a} and {b} differ by more than {max_gap}")));
            }
        }
    }
    Ok(counts)
}

/// Trains one model on `corpus` with the given seed and scores it.
pub fn run_one(
    cfg: &ModelConfig,
    corpus: &TokenCorpus,
    held_out: &MessageDataset,
    train_cfg: &TrainConfig,
    seed: u64,
    max_eval_samples: usize,
    vocab: &Vocabulary,
) -> Result<(EvalRow, TrainReport)> {
    let mut model = MessageModel::new(cfg, seed)?;
    let tc = TrainConfig { seed, ..train_cfg.clone() };
    let report = train_message_twin(&mut model, corpus, &tc)?;
    let metrics = evaluate(&model, held_out, vocab, max_eval_samples)?;
    let row = EvalRow { model: cfg.label().to_string(), max_concurrent_ues: 0, seed, parameters: model.num_parameters(), metrics };
    Ok((row, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub loss_before: f64,
    pub loss_after: f64,
    /// False when training made the loss worse and the original weights
    /// were kept.
    pub adopted: bool,
    pub train: TrainReport,
}

/// Adapts `model` to `corpus` with the lower layers frozen. The loss is
/// measured on fixed windows of `corpus` before and after; if it got
/// worse the original weights are restored.
pub fn fine_tune(model: &mut MessageModel, corpus: &TokenCorpus, cfg: &TrainConfig, loss_windows: usize) -> Result<FineTuneReport> {
    cfg.validate(&model.config)?;
    let loss_before = corpus_loss(model, corpus, loss_windows, cfg.seed ^ 0x5eed)?;
    let saved = model.params.clone();
    let saved_digests = model.trained_on.clone();
    let train = train_message_twin(model, corpus, cfg)?;
    let loss_after = corpus_loss(model, corpus, loss_windows, cfg.seed ^ 0x5eed)?;
    let adopted = loss_after <= loss_before;
    if !adopted {
        model.params = saved;
        model.trained_on = saved_digests;
    }
    Ok(FineTuneReport { loss_before, loss_after: loss_after.min(loss_before), adopted, train })
}
