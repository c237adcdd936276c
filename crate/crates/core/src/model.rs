//! Multi-embedding transformer encoder-decoder with a hybrid deterministic and
//! quantile output head.
//!
//! All forward functions work on batches: encoder tokens are laid out as
//! `[batch * input_len, d_emb]` and decoder tokens as `[batch * output_len, d_emb]`,
//! one sample after another.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kpi::{Features, TrainingSample, MAX_CARRIERS, N_DET, N_FEATURES};
use crate::tape::{Tape, Var, MASKED};
use crate::tensor::{ParamId, ParamStore, Tensor, TensorError};
use crate::time::CalendarIndex;

/// Layer-norm epsilon.
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(&'static str),
    #[error("expected {expected} {what}, got {actual}")]
    Length { what: &'static str, expected: usize, actual: usize },
    #[error("{field} index {index} outside table of {rows} rows")]
    Meta { field: &'static str, index: usize, rows: usize },
    #[error("parameter {name}: {problem}")]
    Manifest { name: String, problem: String },
}

type Result<T, E = ModelError> = core::result::Result<T, E>;

/// Architecture configuration. [`Default`] is the reference configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub d_emb: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f32,
    /// Encoder window length `N`.
    pub input_len: usize,
    /// Decoder block length `M`.
    pub output_len: usize,
    pub quantiles: Vec<f32>,
    pub n_features: usize,
    pub n_det: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            d_emb: 64,
            encoder_layers: 2,
            decoder_layers: 3,
            heads: 8,
            d_ff: 256,
            dropout: 0.1,
            input_len: 4,
            output_len: 2,
            quantiles: vec![0.1, 0.5, 0.9],
            n_features: N_FEATURES,
            n_det: N_DET,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m| Err(ModelError::Hyperparams(m));
        if self.d_emb == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad("d_emb, heads and d_ff must be positive");
        }
        if !self.d_emb.is_multiple_of(self.heads) {
            return bad("d_emb must be divisible by heads");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("at least one encoder and one decoder layer are required");
        }
        if self.input_len == 0 || self.output_len == 0 {
            return bad("input_len and output_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.n_features != N_FEATURES || self.n_det != self.n_features - 1 {
            return bad("the model expects 9 features of which 8 are deterministic");
        }
        let q = &self.quantiles;
        if q.len() != 3 || q[1] != 0.5 {
            return bad("quantiles must be three levels with the median in the middle");
        }
        if !q.iter().all(|&v| v > 0.0 && v < 1.0) || !q.windows(2).all(|w| w[0] < w[1]) {
            return bad("quantiles must be strictly increasing inside (0, 1)");
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.n_det + self.quantiles.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.heads
    }
}

/// Closed-form number of scalar parameters for `hp`.
pub fn param_count(hp: &Hyperparams) -> usize {
    let d = hp.d_emb;
    let linear = |i: usize, o: usize| i * o + o;
    let attention = 4 * linear(d, d);
    let ff = linear(d, hp.d_ff) + linear(hp.d_ff, d);
    let norm = 2 * d;
    let embed = linear(hp.n_features, d)
        + (hp.input_len + hp.output_len + 12 + 7 + 24 + 4 + MAX_CARRIERS) * d;
    let encoder = hp.encoder_layers * (attention + ff + 2 * norm);
    let decoder = hp.decoder_layers * (2 * attention + ff + 3 * norm);
    embed + encoder + decoder + linear(d, hp.head_width())
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Attention,
    ff: FeedForward,
    norm1: Norm,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Attention,
    cross_attn: Attention,
    ff: FeedForward,
    norm1: Norm,
    norm2: Norm,
    norm3: Norm,
}

/// Learned token-embedding tables.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    proj: Linear,
    enc_pos: ParamId,
    dec_pos: ParamId,
    month: ParamId,
    weekday: ParamId,
    hour: ParamId,
    minute: ParamId,
    carrier: ParamId,
}

impl EmbeddingTables {
    /// Ids of the categorical and positional tables, for inspection.
    pub fn tables(&self) -> [(&'static str, ParamId); 7] {
        [
            ("enc_pos", self.enc_pos),
            ("dec_pos", self.dec_pos),
            ("month", self.month),
            ("weekday", self.weekday),
            ("hour", self.hour),
            ("minute", self.minute),
            ("carrier", self.carrier),
        ]
    }

    pub fn projection(&self) -> (ParamId, ParamId) {
        (self.proj.weight, self.proj.bias)
    }
}

/// Which positional table a token sequence uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Forward-pass mode. Dropout is active only in [`Mode::Train`].
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Batched model input: continuous features and calendar metadata for the
/// encoder window and decoder block of every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub batch: usize,
    pub encoder_features: Vec<Features>,
    pub encoder_meta: Vec<CalendarIndex>,
    pub decoder_features: Vec<Features>,
    pub decoder_meta: Vec<CalendarIndex>,
}

impl ModelInput {
    /// Teacher forcing: decoder step `k` receives the true vector of step
    /// `k - 1`; step 0 receives zeros.
    pub fn teacher_forced(samples: &[&TrainingSample]) -> Self {
        let mut input = Self {
            batch: samples.len(),
            encoder_features: Vec::new(),
            encoder_meta: Vec::new(),
            decoder_features: Vec::new(),
            decoder_meta: Vec::new(),
        };
        for s in samples {
            input.encoder_features.extend_from_slice(&s.encoder_inputs);
            input.encoder_meta.extend_from_slice(&s.encoder_meta);
            input.decoder_features.push([0.0; N_FEATURES]);
            let m = s.decoder_targets.len();
            input.decoder_features.extend_from_slice(&s.decoder_targets[..m - 1]);
            input.decoder_meta.extend_from_slice(&s.decoder_meta);
        }
        input
    }

    /// Inference block: one window, zero continuous decoder inputs.
    pub fn block(window: &[Features], window_meta: &[CalendarIndex], future_meta: &[CalendarIndex]) -> Self {
        Self {
            batch: 1,
            encoder_features: window.to_vec(),
            encoder_meta: window_meta.to_vec(),
            decoder_features: vec![[0.0; N_FEATURES]; future_meta.len()],
            decoder_meta: future_meta.to_vec(),
        }
    }
}

/// Per-step deterministic KPI predictions and residual-PRB quantiles.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// `[steps, n_det]`, normalized units.
    pub det: Tensor,
    /// `[steps, 3]`, ordered as the configured quantile levels.
    pub quantiles: Tensor,
}

impl DecoderOutput {
    pub fn steps(&self) -> usize {
        self.det.shape()[0]
    }

    pub fn det_row(&self, step: usize) -> &[f32] {
        let n = self.det.shape()[1];
        &self.det.data()[step * n..(step + 1) * n]
    }

    pub fn quantile_row(&self, step: usize) -> &[f32] {
        let n = self.quantiles.shape()[1];
        &self.quantiles.data()[step * n..(step + 1) * n]
    }

    /// Sorts each step's quantiles ascending and clips them to `[0, 1]`.
    pub fn enforce_quantile_order(&mut self) {
        let n = self.quantiles.shape()[1];
        for row in self.quantiles.data_mut().chunks_exact_mut(n) {
            row.sort_by(f32::total_cmp);
            row.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }

    fn from_head(head: &Tensor, n_det: usize) -> Self {
        let w = head.shape()[1];
        let rows = head.shape()[0];
        let mut det = Vec::with_capacity(rows * n_det);
        let mut q = Vec::with_capacity(rows * (w - n_det));
        for row in head.data().chunks_exact(w) {
            det.extend_from_slice(&row[..n_det]);
            q.extend_from_slice(&row[n_det..]);
        }
        Self {
            det: Tensor::from_vec(&[rows, n_det], det).expect("sizes agree"),
            quantiles: Tensor::from_vec(&[rows, w - n_det], q).expect("sizes agree"),
        }
    }
}

/// The forecasting model: hyperparameters plus every learnable tensor.
#[derive(Debug, Clone)]
pub struct RupFormer {
    hp: Hyperparams,
    params: ParamStore,
    embed: EmbeddingTables,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    head: Linear,
}

struct Builder<'r> {
    store: ParamStore,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, shape: &[usize], bound: f32) -> ParamId {
        let t = match self.rng.as_deref_mut() {
            Some(rng) => Tensor::uniform(shape, bound, rng),
            None => Tensor::zeros(shape),
        };
        self.store.insert(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f32) -> ParamId {
        self.store.insert(name, Tensor::full(shape, value))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / libm::sqrtf(fan_in as f32);
        Linear {
            weight: self.tensor(format!("{name}.weight"), &[fan_in, fan_out], bound),
            bias: self.tensor(format!("{name}.bias"), &[fan_out], bound),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.constant(format!("{name}.gain"), &[d], 1.0),
            bias: self.constant(format!("{name}.bias"), &[d], 0.0),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ff(&mut self, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }
}

impl RupFormer {
    /// Builds a model with freshly initialized weights drawn from `seed`.
    pub fn new(hp: Hyperparams, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(hp, Some(&mut rng))
    }

    /// Builds a model whose learnable tensors are all zero (norm gains are 1).
    /// Used as a target for loading stored weights.
    pub fn zeroed(hp: Hyperparams) -> Result<Self> {
        Self::build(hp, None)
    }

    fn build(hp: Hyperparams, rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        hp.validate()?;
        let d = hp.d_emb;
        let mut b = Builder { store: ParamStore::new(), rng };
        let table_bound = 1.0 / libm::sqrtf(d as f32);
        let embed = EmbeddingTables {
            proj: b.linear("embed.proj", hp.n_features, d),
            enc_pos: b.tensor("embed.enc_pos".into(), &[hp.input_len, d], table_bound),
            dec_pos: b.tensor("embed.dec_pos".into(), &[hp.output_len, d], table_bound),
            month: b.tensor("embed.month".into(), &[12, d], table_bound),
            weekday: b.tensor("embed.weekday".into(), &[7, d], table_bound),
            hour: b.tensor("embed.hour".into(), &[24, d], table_bound),
            minute: b.tensor("embed.minute".into(), &[4, d], table_bound),
            carrier: b.tensor("embed.carrier".into(), &[MAX_CARRIERS, d], table_bound),
        };
        let encoder = (0..hp.encoder_layers)
            .map(|i| EncoderLayer {
                attn: b.attention(&format!("encoder.{i}.self_attn"), d),
                ff: b.ff(&format!("encoder.{i}.ff"), d, hp.d_ff),
                norm1: b.norm(&format!("encoder.{i}.norm1"), d),
                norm2: b.norm(&format!("encoder.{i}.norm2"), d),
            })
            .collect();
        let decoder = (0..hp.decoder_layers)
            .map(|i| DecoderLayer {
                self_attn: b.attention(&format!("decoder.{i}.self_attn"), d),
                cross_attn: b.attention(&format!("decoder.{i}.cross_attn"), d),
                ff: b.ff(&format!("decoder.{i}.ff"), d, hp.d_ff),
                norm1: b.norm(&format!("decoder.{i}.norm1"), d),
                norm2: b.norm(&format!("decoder.{i}.norm2"), d),
                norm3: b.norm(&format!("decoder.{i}.norm3"), d),
            })
            .collect();
        let head = b.linear("head", d, hp.head_width());
        Ok(Self { hp, params: b.store, embed, encoder, decoder, head })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding_tables(&self) -> &EmbeddingTables {
        &self.embed
    }

    /// Overwrites one tensor by manifest name, checking its shape.
    pub fn set_param(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let id = self.params.find(name).ok_or_else(|| ModelError::Manifest {
            name: name.into(),
            problem: "unknown tensor".into(),
        })?;
        let t = self.params.get_mut(id);
        if t.shape() != shape || data.len() != t.numel() {
            return Err(ModelError::Manifest {
                name: name.into(),
                problem: format!("shape {:?} does not match expected {:?}", shape, t.shape()),
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    fn linear<'a>(&'a self, tape: &mut Tape<'a>, x: Var, l: Linear) -> Result<Var> {
        let w = tape.param(&self.params, l.weight);
        let b = tape.param(&self.params, l.bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }

    fn norm<'a>(&'a self, tape: &mut Tape<'a>, x: Var, n: Norm) -> Result<Var> {
        let g = tape.param(&self.params, n.gain);
        let b = tape.param(&self.params, n.bias);
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }

    fn dropout(&self, tape: &mut Tape<'_>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        Ok(match mode {
            Mode::Eval => x,
            Mode::Train(rng) => tape.dropout(x, self.hp.dropout, true, &mut **rng)?,
        })
    }

    /// Token representations: projected features plus positional, calendar
    /// and carrier embeddings, followed by dropout.
    pub fn embed_tokens<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        features: &[Features],
        meta: &[CalendarIndex],
        side: Side,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let seq = match side {
            Side::Encoder => self.hp.input_len,
            Side::Decoder => self.hp.output_len,
        };
        if features.len() != meta.len() {
            return Err(ModelError::Length { what: "metadata rows", expected: features.len(), actual: meta.len() });
        }
        if features.is_empty() || !features.len().is_multiple_of(seq) {
            return Err(ModelError::Length { what: "tokens (multiple of sequence length)", expected: seq, actual: features.len() });
        }
        check_meta(meta)?;
        let flat: Vec<f32> = features.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::from_vec(&[features.len(), N_FEATURES], flat)?);
        let mut acc = self.linear(tape, x, self.embed.proj)?;

        let positions: Vec<usize> = (0..features.len()).map(|i| i % seq).collect();
        let pos_table = match side {
            Side::Encoder => self.embed.enc_pos,
            Side::Decoder => self.embed.dec_pos,
        };
        let lookups: [(ParamId, Vec<usize>); 6] = [
            (pos_table, positions),
            (self.embed.month, meta.iter().map(|m| m.month).collect()),
            (self.embed.weekday, meta.iter().map(|m| m.weekday).collect()),
            (self.embed.hour, meta.iter().map(|m| m.hour).collect()),
            (self.embed.minute, meta.iter().map(|m| m.minute_slot).collect()),
            (self.embed.carrier, meta.iter().map(|m| m.carrier).collect()),
        ];
        for (table, idx) in lookups {
            let t = tape.param(&self.params, table);
            let rows = tape.embedding(t, &idx)?;
            acc = tape.add(acc, rows)?;
        }
        self.dropout(tape, acc, mode)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        query: Var,
        memory: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        mask: Option<&Tensor>,
        a: Attention,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let (h, dh, d) = (self.hp.heads, self.hp.head_dim(), self.hp.d_emb);
        let split = |tape: &mut Tape<'a>, x: Var, len: usize| -> Result<Var> {
            let r = tape.reshape(x, &[batch, len, h, dh])?;
            let p = tape.permute_0213(r)?;
            Ok(tape.reshape(p, &[batch * h, len, dh])?)
        };
        let q = self.linear(tape, query, a.q)?;
        let k = self.linear(tape, memory, a.k)?;
        let v = self.linear(tape, memory, a.v)?;
        let q = split(tape, q, lq)?;
        let k = split(tape, k, lk)?;
        let v = split(tape, v, lk)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrtf(dh as f32))?;
        let weights = tape.softmax_lastdim(scores, mask)?;
        let weights = self.dropout(tape, weights, mode)?;
        let ctx = tape.batch_matmul(weights, v, false)?;
        let ctx = tape.reshape(ctx, &[batch, h, lq, dh])?;
        let ctx = tape.permute_0213(ctx)?;
        let ctx = tape.reshape(ctx, &[batch * lq, d])?;
        self.linear(tape, ctx, a.o)
    }

    fn feed_forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, ff: FeedForward, mode: &mut Mode<'_>) -> Result<Var> {
        let h = self.linear(tape, x, ff.up)?;
        let h = tape.relu(h)?;
        let h = self.dropout(tape, h, mode)?;
        self.linear(tape, h, ff.down)
    }

    fn residual_norm<'a>(&'a self, tape: &mut Tape<'a>, x: Var, sub: Var, n: Norm, mode: &mut Mode<'_>) -> Result<Var> {
        let sub = self.dropout(tape, sub, mode)?;
        let sum = tape.add(x, sub)?;
        self.norm(tape, sum, n)
    }

    /// Post-norm encoder stack with unmasked self-attention.
    pub fn encode<'a>(&'a self, tape: &mut Tape<'a>, tokens: Var, batch: usize, mode: &mut Mode<'_>) -> Result<Var> {
        let n = self.hp.input_len;
        self.expect_rows(tape, tokens, batch * n)?;
        let mut x = tokens;
        for layer in &self.encoder {
            let a = self.attention(tape, x, x, batch, n, n, None, layer.attn, mode)?;
            x = self.residual_norm(tape, x, a, layer.norm1, mode)?;
            let f = self.feed_forward(tape, x, layer.ff, mode)?;
            x = self.residual_norm(tape, x, f, layer.norm2, mode)?;
        }
        Ok(x)
    }

    /// Decoder stack (causal self-attention, cross-attention over `memory`,
    /// feed-forward) followed by the output head. Returns the raw head output
    /// `[batch * output_len, n_det + 3]`.
    pub fn decode<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        memory: Var,
        tokens: Var,
        batch: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let (n, m) = (self.hp.input_len, self.hp.output_len);
        self.expect_rows(tape, memory, batch * n)?;
        self.expect_rows(tape, tokens, batch * m)?;
        let mask = causal_mask(m);
        let mut y = tokens;
        for layer in &self.decoder {
            let s = self.attention(tape, y, y, batch, m, m, Some(&mask), layer.self_attn, mode)?;
            y = self.residual_norm(tape, y, s, layer.norm1, mode)?;
            let c = self.attention(tape, y, memory, batch, m, n, None, layer.cross_attn, mode)?;
            y = self.residual_norm(tape, y, c, layer.norm2, mode)?;
            let f = self.feed_forward(tape, y, layer.ff, mode)?;
            y = self.residual_norm(tape, y, f, layer.norm3, mode)?;
        }
        self.linear(tape, y, self.head)
    }

    /// Records the full forward pass and returns the raw head output.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, input: &ModelInput, mode: &mut Mode<'_>) -> Result<Var> {
        let (n, m, b) = (self.hp.input_len, self.hp.output_len, input.batch);
        if input.encoder_features.len() != b * n {
            return Err(ModelError::Length { what: "encoder rows", expected: b * n, actual: input.encoder_features.len() });
        }
        if input.decoder_features.len() != b * m {
            return Err(ModelError::Length { what: "decoder rows", expected: b * m, actual: input.decoder_features.len() });
        }
        let enc = self.embed_tokens(tape, &input.encoder_features, &input.encoder_meta, Side::Encoder, mode)?;
        let z = self.encode(tape, enc, b, mode)?;
        let dec = self.embed_tokens(tape, &input.decoder_features, &input.decoder_meta, Side::Decoder, mode)?;
        self.decode(tape, z, dec, b, mode)
    }

    /// Raw (unsorted, unclipped) outputs under teacher forcing.
    pub fn forward_training(&self, samples: &[&TrainingSample], mode: &mut Mode<'_>) -> Result<DecoderOutput> {
        let input = ModelInput::teacher_forced(samples);
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &input, mode)?;
        Ok(DecoderOutput::from_head(&tape.to_tensor(out), self.hp.n_det))
    }

    /// One inference block: all `M` continuous decoder inputs are zero, the
    /// quantiles are sorted and clipped to `[0, 1]`.
    pub fn forward_block(
        &self,
        window: &[Features],
        window_meta: &[CalendarIndex],
        future_meta: &[CalendarIndex],
    ) -> Result<DecoderOutput> {
        let input = ModelInput::block(window, window_meta, future_meta);
        let mut out = self.forward_raw(&input)?;
        out.enforce_quantile_order();
        Ok(out)
    }

    /// Inference-mode forward pass without quantile post-processing.
    pub fn forward_raw(&self, input: &ModelInput) -> Result<DecoderOutput> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, &mut Mode::Eval)?;
        Ok(DecoderOutput::from_head(&tape.to_tensor(out), self.hp.n_det))
    }

    fn expect_rows(&self, tape: &Tape<'_>, v: Var, rows: usize) -> Result<()> {
        let s = tape.shape(v);
        if s.len() != 2 || s[0] != rows || s[1] != self.hp.d_emb {
            return Err(ModelError::Length { what: "token rows", expected: rows, actual: s[0] });
        }
        Ok(())
    }
}

/// Additive mask letting position `i` attend only to positions `<= i`.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASKED;
        }
    }
    Tensor::from_vec(&[len, len], data).expect("square mask")
}

fn check_meta(meta: &[CalendarIndex]) -> Result<()> {
    for m in meta {
        for (field, index, rows) in [
            ("month", m.month, 12),
            ("weekday", m.weekday, 7),
            ("hour", m.hour, 24),
            ("minute", m.minute_slot, 4),
            ("carrier", m.carrier, MAX_CARRIERS),
        ] {
            if index >= rows {
                return Err(ModelError::Meta { field, index, rows });
            }
        }
    }
    Ok(())
}
