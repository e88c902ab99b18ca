//! Byte-level decoder-only transformer.
//!
//! Pre-norm blocks (attention then GELU MLP), learned absolute positions and
//! an untied output head. Linear weights are stored `out_features ×
//! in_features`, so a projection is `x · Wᵀ`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Gradients, Graph, ParamId, Tensor, Var};
use crate::optim::{AdamParams, AdamState, ParamStore};
use crate::rng::SeededRng;
use crate::{Error, Result};

pub type TokenId = usize;

/// Beginning-of-sequence marker; never produced by [`encode`].
pub const BOS: TokenId = 256;
/// End-of-sequence marker; generation stops when it is predicted.
pub const EOS: TokenId = 257;
/// 256 raw bytes plus the two reserved ids.
pub const VOCAB_SIZE: usize = 258;

/// Maps every byte to its own id.
pub fn encode(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| b as TokenId).collect()
}

pub fn decode(tokens: &[TokenId]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::invalid(format!("token {t} is not a byte")))
        })
        .collect()
}

/// Lossy UTF-8 view of a decoded token sequence.
pub fn decode_lossy(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 4, d_model: 64, d_ff: 256, vocab_size: VOCAB_SIZE, max_seq_len: 128, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::invalid("max_seq_len must be at least 2"));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::invalid(format!("vocab_size must cover the {VOCAB_SIZE} byte-level ids")));
        }
        Ok(())
    }

    pub fn num_slots(&self) -> usize {
        GLOBAL_SLOTS + self.n_layers * LAYER_SLOTS
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalWeight {
    TokenEmbedding,
    PositionEmbedding,
    FinalNormGain,
    FinalNormBias,
    OutputHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerWeight {
    AttnNormGain,
    AttnNormBias,
    Query,
    Key,
    Value,
    AttnOut,
    MlpNormGain,
    MlpNormBias,
    MlpUp,
    MlpUpBias,
    MlpDown,
    MlpDownBias,
}

const GLOBALS: [GlobalWeight; 5] = [
    GlobalWeight::TokenEmbedding,
    GlobalWeight::PositionEmbedding,
    GlobalWeight::FinalNormGain,
    GlobalWeight::FinalNormBias,
    GlobalWeight::OutputHead,
];

const LAYER_WEIGHTS: [LayerWeight; 12] = [
    LayerWeight::AttnNormGain,
    LayerWeight::AttnNormBias,
    LayerWeight::Query,
    LayerWeight::Key,
    LayerWeight::Value,
    LayerWeight::AttnOut,
    LayerWeight::MlpNormGain,
    LayerWeight::MlpNormBias,
    LayerWeight::MlpUp,
    LayerWeight::MlpUpBias,
    LayerWeight::MlpDown,
    LayerWeight::MlpDownBias,
];

const GLOBAL_SLOTS: usize = GLOBALS.len();
const LAYER_SLOTS: usize = LAYER_WEIGHTS.len();

/// Address of one base weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSlot {
    Global(GlobalWeight),
    Layer(usize, LayerWeight),
}

impl WeightSlot {
    pub fn index(self) -> usize {
        match self {
            WeightSlot::Global(w) => GLOBALS.iter().position(|&x| x == w).unwrap(),
            WeightSlot::Layer(l, w) => {
                GLOBAL_SLOTS + l * LAYER_SLOTS + LAYER_WEIGHTS.iter().position(|&x| x == w).unwrap()
            }
        }
    }

    pub fn from_index(idx: usize, n_layers: usize) -> Option<Self> {
        if idx < GLOBAL_SLOTS {
            return Some(WeightSlot::Global(GLOBALS[idx]));
        }
        let rel = idx - GLOBAL_SLOTS;
        let layer = rel / LAYER_SLOTS;
        (layer < n_layers).then(|| WeightSlot::Layer(layer, LAYER_WEIGHTS[rel % LAYER_SLOTS]))
    }

    /// Base parameters use their slot index as [`ParamId`].
    pub fn param_id(self) -> ParamId {
        ParamId(self.index())
    }

    pub fn name(self) -> String {
        match self {
            WeightSlot::Global(w) => String::from(match w {
                GlobalWeight::TokenEmbedding => "tok_emb",
                GlobalWeight::PositionEmbedding => "pos_emb",
                GlobalWeight::FinalNormGain => "ln_f.gain",
                GlobalWeight::FinalNormBias => "ln_f.bias",
                GlobalWeight::OutputHead => "head",
            }),
            WeightSlot::Layer(l, w) => {
                let s = match w {
                    LayerWeight::AttnNormGain => "ln1.gain",
                    LayerWeight::AttnNormBias => "ln1.bias",
                    LayerWeight::Query => "attn.w_q",
                    LayerWeight::Key => "attn.w_k",
                    LayerWeight::Value => "attn.w_v",
                    LayerWeight::AttnOut => "attn.w_o",
                    LayerWeight::MlpNormGain => "ln2.gain",
                    LayerWeight::MlpNormBias => "ln2.bias",
                    LayerWeight::MlpUp => "mlp.w_up",
                    LayerWeight::MlpUpBias => "mlp.b_up",
                    LayerWeight::MlpDown => "mlp.w_down",
                    LayerWeight::MlpDownBias => "mlp.b_down",
                };
                format!("layers.{l}.{s}")
            }
        }
    }

    fn shape(self, c: &ModelConfig) -> Vec<usize> {
        let d = c.d_model;
        match self {
            WeightSlot::Global(GlobalWeight::TokenEmbedding) => vec![c.vocab_size, d],
            WeightSlot::Global(GlobalWeight::PositionEmbedding) => vec![c.max_seq_len, d],
            WeightSlot::Global(GlobalWeight::FinalNormGain | GlobalWeight::FinalNormBias) => vec![d],
            WeightSlot::Global(GlobalWeight::OutputHead) => vec![c.vocab_size, d],
            WeightSlot::Layer(_, w) => match w {
                LayerWeight::AttnNormGain
                | LayerWeight::AttnNormBias
                | LayerWeight::MlpNormGain
                | LayerWeight::MlpNormBias
                | LayerWeight::MlpDownBias => vec![d],
                LayerWeight::Query | LayerWeight::Key | LayerWeight::Value | LayerWeight::AttnOut => {
                    vec![d, d]
                }
                LayerWeight::MlpUp => vec![c.d_ff, d],
                LayerWeight::MlpUpBias => vec![c.d_ff],
                LayerWeight::MlpDown => vec![d, c.d_ff],
            },
        }
    }

    fn is_gain(self) -> bool {
        matches!(
            self,
            WeightSlot::Global(GlobalWeight::FinalNormGain)
                | WeightSlot::Layer(_, LayerWeight::AttnNormGain | LayerWeight::MlpNormGain)
        )
    }

    fn is_bias(self) -> bool {
        matches!(
            self,
            WeightSlot::Global(GlobalWeight::FinalNormBias)
                | WeightSlot::Layer(
                    _,
                    LayerWeight::AttnNormBias
                        | LayerWeight::MlpNormBias
                        | LayerWeight::MlpUpBias
                        | LayerWeight::MlpDownBias
                )
        )
    }
}

/// Std of the Gaussian used for every matrix and embedding at init.
pub const INIT_STD: f64 = 0.02;

/// The full parameter set Θ together with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl LanguageModel {
    /// Seeded initialization: N(0, 0.02²) weights, unit gains, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derived(config.seed, 0x6d_6f64_656c);
        let params = (0..config.num_slots())
            .map(|i| {
                let slot = WeightSlot::from_index(i, config.n_layers).unwrap();
                let shape = slot.shape(&config);
                if slot.is_gain() {
                    Tensor::from_fn(&shape, |_| 1.0)
                } else if slot.is_bias() {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::from_fn(&shape, |_| INIT_STD * rng.normal())
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored tensors (e.g. a checkpoint).
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.num_slots() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                config.num_slots(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let slot = WeightSlot::from_index(i, config.n_layers).unwrap();
            if p.shape() != slot.shape(&config).as_slice() {
                return Err(Error::shape(format!(
                    "{}: expected {:?}, got {:?}",
                    slot.name(),
                    slot.shape(&config),
                    p.shape()
                )));
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("{} has non-finite entries", slot.name())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weight(&self, slot: WeightSlot) -> &Tensor {
        &self.params[slot.index()]
    }

    pub fn weight_mut(&mut self, slot: WeightSlot) -> &mut Tensor {
        &mut self.params[slot.index()]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// `(name, tensor)` pairs in slot order.
    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor)> + '_ {
        self.params
            .iter()
            .enumerate()
            .map(move |(i, t)| (WeightSlot::from_index(i, self.config.n_layers).unwrap().name(), t))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        checksum_tensors(self.params.iter())
    }

    /// Logits (T×V) for `tokens`, binding weights through `source`.
    pub fn forward_with<S: WeightSource + ?Sized>(
        &self,
        g: &mut Graph,
        tokens: &[TokenId],
        source: &S,
    ) -> Result<Var> {
        let c = &self.config;
        let t = tokens.len();
        if t == 0 || t > c.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {t} outside 1..={}",
                c.max_seq_len
            )));
        }
        let tok = source.bind(g, self, WeightSlot::Global(GlobalWeight::TokenEmbedding))?;
        let pos = source.bind(g, self, WeightSlot::Global(GlobalWeight::PositionEmbedding))?;
        let te = g.embedding_gather(tok, tokens)?;
        let positions: Vec<usize> = (0..t).collect();
        let pe = g.embedding_gather(pos, &positions)?;
        let mut x = g.add(te, pe)?;

        for l in 0..c.n_layers {
            let w = |lw| WeightSlot::Layer(l, lw);
            let g1 = source.bind(g, self, w(LayerWeight::AttnNormGain))?;
            let b1 = source.bind(g, self, w(LayerWeight::AttnNormBias))?;
            let h = g.layer_norm(x, g1, b1)?;
            let wq = source.bind(g, self, w(LayerWeight::Query))?;
            let wk = source.bind(g, self, w(LayerWeight::Key))?;
            let wv = source.bind(g, self, w(LayerWeight::Value))?;
            let wo = source.bind(g, self, w(LayerWeight::AttnOut))?;
            let q = g.matmul_nt(h, wq)?;
            let k = g.matmul_nt(h, wk)?;
            let v = g.matmul_nt(h, wv)?;
            let scores = g.causal_attention_scores(q, k, c.n_heads)?;
            let probs = g.row_softmax(scores);
            let mixed = g.head_mix(probs, v, c.n_heads)?;
            let attn = g.matmul_nt(mixed, wo)?;
            x = g.add(x, attn)?;

            let g2 = source.bind(g, self, w(LayerWeight::MlpNormGain))?;
            let b2 = source.bind(g, self, w(LayerWeight::MlpNormBias))?;
            let h = g.layer_norm(x, g2, b2)?;
            let up = source.bind(g, self, w(LayerWeight::MlpUp))?;
            let up_b = source.bind(g, self, w(LayerWeight::MlpUpBias))?;
            let down = source.bind(g, self, w(LayerWeight::MlpDown))?;
            let down_b = source.bind(g, self, w(LayerWeight::MlpDownBias))?;
            let u = g.matmul_nt(h, up)?;
            let u = g.add_row(u, up_b)?;
            let u = g.gelu(u);
            let dn = g.matmul_nt(u, down)?;
            let dn = g.add_row(dn, down_b)?;
            x = g.add(x, dn)?;
        }

        let gf = source.bind(g, self, WeightSlot::Global(GlobalWeight::FinalNormGain))?;
        let bf = source.bind(g, self, WeightSlot::Global(GlobalWeight::FinalNormBias))?;
        let h = g.layer_norm(x, gf, bf)?;
        let head = source.bind(g, self, WeightSlot::Global(GlobalWeight::OutputHead))?;
        g.matmul_nt(h, head)
    }
}

pub(crate) fn checksum_tensors<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for &d in t.shape() {
            h = fnv(h, &(d as u64).to_le_bytes());
        }
        for v in t.data() {
            h = fnv(h, &v.to_bits().to_le_bytes());
        }
    }
    h
}

fn fnv(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Decides how each base weight enters a forward graph.
pub trait WeightSource {
    fn bind(&self, g: &mut Graph, model: &LanguageModel, slot: WeightSlot) -> Result<Var>;
}

/// Binds the model's own weights, either frozen or as trainable parameters.
#[derive(Clone, Copy, Debug)]
pub struct BaseWeights {
    pub trainable: bool,
}

impl WeightSource for BaseWeights {
    fn bind(&self, g: &mut Graph, model: &LanguageModel, slot: WeightSlot) -> Result<Var> {
        let t = model.weight(slot).clone();
        Ok(if self.trainable { g.param(slot.param_id(), t) } else { g.constant(t) })
    }
}

/// Which leaves a forward pass registers as parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Everything constant; inference only.
    Frozen,
    /// The model's trainable set (adapter only for LoRA models).
    Trainable,
    /// Every parameter, including frozen base weights.
    All,
}

/// A causal LM that adaptation loops can evaluate and update.
pub trait CausalLm: ParamStore {
    fn config(&self) -> &ModelConfig;

    /// Logits (T×V) for `tokens`.
    fn logits(&self, g: &mut Graph, tokens: &[TokenId], mode: GradMode) -> Result<Var>;

    /// Ids the optimizer may update.
    fn trainable_ids(&self) -> Vec<ParamId>;
}

impl ParamStore for LanguageModel {
    fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.params.get_mut(id.0)
    }
}

impl CausalLm for LanguageModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits(&self, g: &mut Graph, tokens: &[TokenId], mode: GradMode) -> Result<Var> {
        let trainable = !matches!(mode, GradMode::Frozen);
        self.forward_with(g, tokens, &BaseWeights { trainable })
    }

    fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }
}

/// Logit row predicting the token after `prefix`.
pub fn next_token_logits<M: CausalLm + ?Sized>(model: &M, prefix: &[TokenId]) -> Result<Vec<f64>> {
    if prefix.is_empty() {
        return Err(Error::invalid("prefix must be nonempty"));
    }
    if prefix.len() > model.config().max_seq_len {
        return Err(Error::invalid(format!(
            "prefix length {} exceeds max_seq_len {}",
            prefix.len(),
            model.config().max_seq_len
        )));
    }
    let mut g = Graph::new();
    let logits = model.logits(&mut g, prefix, GradMode::Frozen)?;
    let v = g.value(logits);
    Ok(v.row(v.rows() - 1).to_vec())
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Temperature-0 decoding. Returns `prompt` followed by up to
/// `max_new_tokens` generated ids; stops before emitting [`EOS`]. When the
/// sequence outgrows the context, only the most recent `max_seq_len` tokens
/// are fed.
pub fn greedy_generate<M: CausalLm + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    max_new_tokens: usize,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must be nonempty"));
    }
    let mut seq = prompt.to_vec();
    let window = model.config().max_seq_len;
    for _ in 0..max_new_tokens {
        let start = seq.len().saturating_sub(window);
        let row = next_token_logits(model, &seq[start..])?;
        let next = argmax(&row);
        if next == EOS {
            break;
        }
        seq.push(next);
    }
    Ok(seq)
}

/// Mean NLL of a full sequence (first token is context only).
pub fn sequence_nll<M: CausalLm + ?Sized>(model: &M, seq: &[TokenId]) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::invalid("need at least two tokens to score a sequence"));
    }
    let mut g = Graph::new();
    let logits = model.logits(&mut g, &seq[..seq.len() - 1], GradMode::Frozen)?;
    let targets: Vec<Option<usize>> = seq[1..].iter().map(|&t| Some(t)).collect();
    let nll = g.cross_entropy(logits, &targets)?;
    Ok(g.scalar(nll))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PretrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Tokens per training window (inputs); at most `max_seq_len`.
    pub window: usize,
    pub seed: u64,
    pub adam: AdamParams,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self { steps: 600, lr: 3e-3, batch_size: 8, window: 64, seed: 0, adam: AdamParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PretrainReport {
    /// Mean NLL of the fixed evaluation windows before training.
    pub initial_nll: f64,
    pub final_nll: f64,
    /// Per-step batch loss.
    pub losses: Vec<f64>,
}

fn framed(doc: &[TokenId]) -> Vec<TokenId> {
    let mut s = Vec::with_capacity(doc.len() + 2);
    s.push(BOS);
    s.extend_from_slice(doc);
    s.push(EOS);
    s
}

/// Random window of at most `window + 1` tokens from `BOS doc EOS`.
fn sample_window(doc: &[TokenId], window: usize, rng: &mut SeededRng) -> Vec<TokenId> {
    let s = framed(doc);
    if s.len() <= window + 1 {
        return s;
    }
    let start = rng.below(s.len() - window);
    s[start..start + window + 1].to_vec()
}

fn batch_nll(model: &LanguageModel, windows: &[Vec<TokenId>]) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        total += sequence_nll(model, w)?;
    }
    Ok(total / windows.len() as f64)
}

/// Trains a freshly initialized model on `corpus` (documents without
/// BOS/EOS; both are added) with Adam at a constant learning rate.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &[Vec<TokenId>],
    opts: &PretrainOptions,
) -> Result<(LanguageModel, PretrainReport)> {
    let docs: Vec<&Vec<TokenId>> = corpus.iter().filter(|d| !d.is_empty()).collect();
    if docs.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if opts.batch_size == 0 || opts.window == 0 || opts.window > config.max_seq_len {
        return Err(Error::invalid(format!(
            "batch_size must be positive and window within 1..={}",
            config.max_seq_len
        )));
    }
    let mut model = LanguageModel::new(config.clone())?;

    let mut eval_rng = SeededRng::derived(opts.seed, 1);
    let eval_windows: Vec<Vec<TokenId>> = docs
        .iter()
        .take(16)
        .map(|d| sample_window(d, opts.window, &mut eval_rng))
        .collect();
    let initial_nll = batch_nll(&model, &eval_windows)?;

    let mut rng = SeededRng::derived(opts.seed, 2);
    let mut adam = AdamState::new(opts.adam);
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let mut grads = Gradients::new();
        let mut loss = 0.0;
        for _ in 0..opts.batch_size {
            let doc = docs[rng.below(docs.len())];
            let w = sample_window(doc, opts.window, &mut rng);
            let mut g = Graph::new();
            let logits = model.logits(&mut g, &w[..w.len() - 1], GradMode::Trainable)?;
            let targets: Vec<Option<usize>> = w[1..].iter().map(|&t| Some(t)).collect();
            let nll = g.cross_entropy(logits, &targets)?;
            loss += g.scalar(nll);
            grads.accumulate(&g.backward(nll)?, 1.0 / opts.batch_size as f64);
        }
        losses.push(loss / opts.batch_size as f64);
        adam.step(&grads, opts.lr, &mut model)?;
    }

    let final_nll = batch_nll(&model, &eval_windows)?;
    Ok((model, PretrainReport { initial_nll, final_nll, losses }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { n_layers: 1, n_heads: 2, d_model: 16, d_ff: 32, max_seq_len: 24, ..ModelConfig::default() }
    }

    #[test]
    fn encode_decode() {
        assert!(encode(b"").is_empty());
        assert_eq!(encode(b"ab"), vec![97, 98]);
        let s = "déjà".as_bytes();
        assert_eq!(decode(&encode(s)).unwrap(), s);
        assert!(decode(&[97, BOS]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { d_model: 30, n_heads: 4, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { max_seq_len: 1, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn slot_indices_round_trip() {
        let c = ModelConfig::default();
        for i in 0..c.num_slots() {
            assert_eq!(WeightSlot::from_index(i, c.n_layers).unwrap().index(), i);
        }
        assert!(WeightSlot::from_index(c.num_slots(), c.n_layers).is_none());
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut m = LanguageModel::new(tiny()).unwrap();
        m.weight_mut(WeightSlot::Global(GlobalWeight::OutputHead)).fill(0.0);
        let row = next_token_logits(&m, &[BOS, 97, 98]).unwrap();
        assert!(row.iter().all(|&v| v == row[0]));
    }

    #[test]
    fn overlong_prefix_is_rejected() {
        let m = LanguageModel::new(tiny()).unwrap();
        assert!(next_token_logits(&m, &[1; 25]).is_err());
        assert!(next_token_logits(&m, &[]).is_err());
    }

    #[test]
    fn later_tokens_do_not_change_earlier_logits() {
        let m = LanguageModel::new(tiny()).unwrap();
        let mut g = Graph::new();
        let a = m.logits(&mut g, &[BOS, 5, 6, 7], GradMode::Frozen).unwrap();
        let b = m.logits(&mut g, &[BOS, 5, 6, 200, 9], GradMode::Frozen).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(a).row(r), g.value(b).row(r));
        }
    }

    #[test]
    fn greedy_generate_edge_cases() {
        let mut m = LanguageModel::new(tiny()).unwrap();
        assert_eq!(greedy_generate(&m, &[BOS, 1], 0).unwrap(), vec![BOS, 1]);
        m.weight_mut(WeightSlot::Global(GlobalWeight::OutputHead)).fill(0.0);
        assert_eq!(greedy_generate(&m, &[BOS], 4).unwrap(), vec![BOS, 0, 0, 0, 0]);
        assert!(greedy_generate(&m, &[], 3).is_err());
    }

    #[test]
    fn pretrain_rejects_empty_corpus() {
        assert!(pretrain(&tiny(), &[], &PretrainOptions::default()).is_err());
        assert!(pretrain(&tiny(), &[vec![]], &PretrainOptions::default()).is_err());
    }

    #[test]
    fn pretrain_zero_steps_is_init() {
        let opts = PretrainOptions { steps: 0, window: 16, ..PretrainOptions::default() };
        let (m, _) = pretrain(&tiny(), &[encode(b"hello")], &opts).unwrap();
        assert_eq!(m, LanguageModel::new(tiny()).unwrap());
    }

    #[test]
    fn checksum_tracks_changes() {
        let mut m = LanguageModel::new(tiny()).unwrap();
        let c0 = m.checksum();
        assert_eq!(c0, m.clone().checksum());
        m.weight_mut(WeightSlot::Layer(0, LayerWeight::Query)).data_mut()[0] += 1e-12;
        assert_ne!(c0, m.checksum());
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = LanguageModel::new(tiny()).unwrap();
        let mut ps = m.params().to_vec();
        assert!(LanguageModel::from_params(tiny(), ps.clone()).is_ok());
        ps[0] = Tensor::zeros(&[3, 3]);
        assert!(LanguageModel::from_params(tiny(), ps).is_err());
    }
}
