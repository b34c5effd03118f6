//! The translator: BiLSTM over word-level EEG features, a ReLU projection to
//! the model width, and a pre-norm transformer encoder-decoder with learned
//! positions and an output layer tied to the word embedding.

use std::fmt;
use std::str::FromStr;

use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::layers::{AttentionMask, DecoderLayer, EncoderLayer, Initializer, LayerNormParams, LinearParams, LstmParams};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::training::cross_entropy;

/// Word table init std. The output layer is tied to this table behind a
/// final layer norm, so fresh logits have std `WORD_INIT_STD * sqrt(d)`.
pub const WORD_INIT_STD: f64 = 0.005;
/// Positional table init std.
pub const POS_INIT_STD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input feature size per word.
    pub f: usize,
    /// LSTM hidden size per direction.
    pub h: usize,
    pub bidirectional: bool,
    /// LSTM layers.
    pub lstm_layers: usize,
    /// Transformer width.
    pub d: usize,
    /// Vocabulary size including the reserved tokens.
    pub vocab: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Longest sequence the positional table covers.
    pub maxlen: usize,
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the default CLI run.
    pub fn toy(vocab: usize) -> Self {
        Self {
            f: crate::data::FEATURE_DIM,
            h: 64,
            bidirectional: true,
            lstm_layers: 2,
            d: 64,
            vocab,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_dim: 256,
            maxlen: 64,
        }
    }

    /// Full-size encoder dimensions (f=840, h=256, L=2, d=1024) with a
    /// twelve-layer transformer.
    pub fn full_size(vocab: usize) -> Self {
        Self {
            f: crate::data::FEATURE_DIM,
            h: 256,
            bidirectional: true,
            lstm_layers: 2,
            d: 1024,
            vocab,
            enc_layers: 12,
            dec_layers: 12,
            heads: 16,
            ffn_dim: 4096,
            maxlen: 1024,
        }
    }

    pub fn lstm_out(&self) -> usize {
        self.h * if self.bidirectional { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("f", self.f),
            ("h", self.h),
            ("L", self.lstm_layers),
            ("d", self.d),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("maxlen", self.maxlen),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("model config: {name} must be at least 1")));
            }
        }
        if self.vocab <= PAD + 1 {
            return Err(Error::contract(format!(
                "model config: vocabulary of {} cannot hold the reserved tokens",
                self.vocab
            )));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "model config: {} heads do not divide d = {}",
                self.heads, self.d
            )));
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::contract(format!("model config: {key} expects an integer, got {value:?}")))
        };
        match key {
            "f" => self.f = num()?,
            "h" => self.h = num()?,
            "b" => {
                self.bidirectional = match value {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(Error::contract(format!("model config: b expects 0 or 1, got {value:?}"))),
                }
            }
            "L" => self.lstm_layers = num()?,
            "d" => self.d = num()?,
            "V" => self.vocab = num()?,
            "enc_layers" => self.enc_layers = num()?,
            "dec_layers" => self.dec_layers = num()?,
            "heads" => self.heads = num()?,
            "ffn_dim" => self.ffn_dim = num()?,
            "maxlen" => self.maxlen = num()?,
            _ => return Err(Error::contract(format!("unknown model config key {key:?}"))),
        }
        Ok(())
    }
}

/// Canonical form: one `key=value` per line in a fixed order.
impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "f={}", self.f)?;
        writeln!(f, "h={}", self.h)?;
        writeln!(f, "b={}", u8::from(self.bidirectional))?;
        writeln!(f, "L={}", self.lstm_layers)?;
        writeln!(f, "d={}", self.d)?;
        writeln!(f, "V={}", self.vocab)?;
        writeln!(f, "enc_layers={}", self.enc_layers)?;
        writeln!(f, "dec_layers={}", self.dec_layers)?;
        writeln!(f, "heads={}", self.heads)?;
        writeln!(f, "ffn_dim={}", self.ffn_dim)?;
        writeln!(f, "maxlen={}", self.maxlen)
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = ModelConfig::toy(0);
        let mut seen = std::collections::HashSet::new();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("model config line without '=': {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
            seen.insert(k.trim().to_owned());
        }
        for key in ["f", "h", "b", "L", "d", "V", "enc_layers", "dec_layers", "heads", "ffn_dim", "maxlen"] {
            if !seen.contains(key) {
                return Err(Error::Format(format!("model config is missing {key}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }
}

/// Parameter-name prefixes trained in stage 1.
pub const STAGE1_TRAINABLE: [&str; 5] = ["lstm.", "proj.", "bart.embed.word", "bart.embed.pos", "bart.encoder.0."];

pub fn stage1_trainable(name: &str) -> bool {
    STAGE1_TRAINABLE.iter().any(|p| name.starts_with(p))
}

pub struct ForwardOutput {
    pub loss: Var,
    /// `[B×(T_y−1)×V]`, aligned with the shifted labels.
    pub logits: Var,
}

/// Encoder output for one sentence, kept for step-wise decoding.
#[derive(Clone, Debug)]
pub struct EncodedSource<T> {
    /// `[1×T×d]`
    pub memory: Tensor<T>,
    pub real: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct R1Translator<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParameterStore<T>,
    pub lstm: LstmParams,
    pub proj: LinearParams,
    pub word: ParamId,
    pub pos: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub encoder_ln: LayerNormParams,
    pub decoder_ln: LayerNormParams,
}

impl<T: Real> R1Translator<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut init = Initializer::new(seed);
        let c = &config;
        let lstm = LstmParams::register(&mut store, "lstm", c.f, c.h, c.lstm_layers, c.bidirectional, &mut init)?;
        let proj = LinearParams::register(&mut store, "proj", c.lstm_out(), c.d, &mut init)?;
        let table = |init: &mut Initializer, rows: usize, std: f64| -> Tensor<T> {
            let mut t = init.scaled_normal(&[rows, c.d], 1);
            for v in t.data_mut() {
                *v *= T::of(std);
            }
            t
        };
        let word = store.add("bart.embed.word", table(&mut init, c.vocab, WORD_INIT_STD))?;
        let pos = store.add("bart.embed.pos", table(&mut init, c.maxlen, POS_INIT_STD))?;
        let encoder = (0..c.enc_layers)
            .map(|i| EncoderLayer::register(&mut store, &format!("bart.encoder.{i}"), c.d, c.heads, c.ffn_dim, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..c.dec_layers)
            .map(|i| DecoderLayer::register(&mut store, &format!("bart.decoder.{i}"), c.d, c.heads, c.ffn_dim, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let encoder_ln = LayerNormParams::register(&mut store, "bart.encoder.ln", c.d)?;
        let decoder_ln = LayerNormParams::register(&mut store, "bart.decoder.ln", c.d)?;
        Ok(Self {
            config,
            store,
            lstm,
            proj,
            word,
            pos,
            encoder,
            decoder,
            encoder_ln,
            decoder_ln,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.numel()
    }

    pub fn set_stage_trainable(&mut self, stage: Stage) {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let trainable = match stage {
                Stage::Stage1 => stage1_trainable(self.store.name(id)),
                Stage::Stage2 => true,
            };
            self.store.set_trainable(id, trainable);
        }
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len > self.config.maxlen {
            return Err(Error::contract(format!(
                "{what} length {len} exceeds maxlen {}",
                self.config.maxlen
            )));
        }
        Ok(())
    }

    fn positions(&self, g: &mut Graph<T>, batch: usize, len: usize) -> Result<Var> {
        let table = g.param(&self.store, self.pos);
        let ids: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        g.embedding(table, &ids, &[batch, len])
    }

    /// Runs the EEG encoder stack; returns `[B×T×d]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Var> {
        if batch.mask.len() != batch.inv_mask.len()
            || batch.mask.iter().zip(&batch.inv_mask).any(|(m, i)| m + i != 1)
        {
            return Err(Error::contract("batch masks are inconsistent (M̄ must equal 1 − M)"));
        }
        self.check_len(batch.time, "EEG sequence")?;
        let (b, t) = (batch.batch, batch.time);
        let eeg = g.constant(batch.eeg_tensor());
        let h = self.lstm.forward(g, &self.store, eeg, &batch.padded())?;
        let z = self.proj.forward(g, &self.store, h)?;
        let z = g.relu(z)?;
        let pos = self.positions(g, b, t)?;
        let mut x = g.add(z, pos)?;
        let mask = AttentionMask::key_padding(&batch.real(), b, t);
        for layer in &self.encoder {
            x = layer.forward(g, &self.store, x, &mask)?;
        }
        self.encoder_ln.forward(g, &self.store, x)
    }

    /// Decoder over `ids[N×P]` given encoder memory `[N×T×d]`; returns hidden
    /// states `[N×P×d]`.
    fn decode_graph(&self, g: &mut Graph<T>, ids: &[usize], n: usize, p: usize, memory: Var, real: &[bool]) -> Result<Var> {
        self.check_len(p, "decoder input")?;
        let table = g.param(&self.store, self.word);
        let emb = g.embedding(table, ids, &[n, p])?;
        let pos = self.positions(g, n, p)?;
        let mut y = g.add(emb, pos)?;
        let self_mask = AttentionMask::causal(n, p);
        let cross_mask = AttentionMask::key_padding(real, n, p);
        for layer in &self.decoder {
            y = layer.forward(g, &self.store, y, memory, &self_mask, &cross_mask)?;
        }
        self.decoder_ln.forward(g, &self.store, y)
    }

    fn project_vocab(&self, g: &mut Graph<T>, hidden: Var) -> Result<Var> {
        let table = g.param(&self.store, self.word);
        g.linear(hidden, table, None)
    }

    /// Teacher-forced pass: decoder input is the target row without its last
    /// position, labels are the row without BOS; PAD labels are ignored.
    pub fn forward_loss(&self, g: &mut Graph<T>, batch: &Batch) -> Result<ForwardOutput> {
        if batch.target_len < 2 {
            return Err(Error::contract("targets need at least BOS and one label"));
        }
        let (b, ty) = (batch.batch, batch.target_len - 1);
        let memory = self.encode_graph(g, batch)?;
        let mut inputs = Vec::with_capacity(b * ty);
        let mut labels = Vec::with_capacity(b * ty);
        for r in 0..b {
            let row = batch.target_row(r);
            inputs.extend_from_slice(&row[..ty]);
            labels.extend_from_slice(&row[1..]);
        }
        let hidden = self.decode_graph(g, &inputs, b, ty, memory, &batch.real())?;
        let logits = self.project_vocab(g, hidden)?;
        let loss = cross_entropy(g, logits, &labels, PAD)?;
        Ok(ForwardOutput { loss, logits })
    }

    /// Mean loss of `batch` without building gradients.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::inference();
        let out = self.forward_loss(&mut g, batch)?;
        Ok(g.value(out.loss).data()[0].as_f64())
    }

    /// Encoder memory per sentence of `batch`.
    pub fn encode(&self, batch: &Batch) -> Result<Vec<EncodedSource<T>>> {
        let mut g = Graph::inference();
        let memory = self.encode_graph(&mut g, batch)?;
        let mem = g.value(memory);
        let (t, d) = (batch.time, self.config.d);
        let real = batch.real();
        Ok((0..batch.batch)
            .map(|r| EncodedSource {
                memory: Tensor::new([1, t, d], mem.data()[r * t * d..(r + 1) * t * d].to_vec())
                    .expect("memory slice"),
                real: real[r * t..(r + 1) * t].to_vec(),
            })
            .collect())
    }

    /// Log-probabilities of the next token after each of the equal-length
    /// `prefixes`.
    pub fn next_log_probs(&self, src: &EncodedSource<T>, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let p = prefixes[0].len();
        if p == 0 || prefixes.iter().any(|x| x.len() != p) {
            return Err(Error::contract("prefixes must be non-empty and of equal length"));
        }
        let (t, d) = (src.real.len(), self.config.d);
        let mut mem = Vec::with_capacity(n * t * d);
        let mut real = Vec::with_capacity(n * t);
        for _ in 0..n {
            mem.extend_from_slice(src.memory.data());
            real.extend_from_slice(&src.real);
        }
        let mut g = Graph::inference();
        let memory = g.constant(Tensor::new([n, t, d], mem)?);
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let hidden = self.decode_graph(&mut g, &ids, n, p, memory, &real)?;
        let last = g.slice(hidden, 1, p - 1, 1)?;
        let logits = self.project_vocab(&mut g, last)?;
        let logp = g.log_softmax(logits)?;
        let v = self.config.vocab;
        Ok(g.value(logp)
            .data()
            .chunks(v)
            .map(|row| row.iter().map(|x| x.as_f64()).collect())
            .collect())
    }

    pub fn cast<U: Real>(&self) -> R1Translator<U> {
        R1Translator {
            config: self.config.clone(),
            store: self.store.cast(),
            lstm: self.lstm.clone(),
            proj: self.proj.clone(),
            word: self.word,
            pos: self.pos,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            encoder_ln: self.encoder_ln.clone(),
            decoder_ln: self.decoder_ln.clone(),
        }
    }
}
