//! Sentence-level EEG records, vocabulary, batching, splits and the
//! synthetic/noise-control dataset generators.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BANDS: usize = 8;
pub const CHANNELS: usize = 105;
/// Per-word feature size: 8 frequency bands × 105 channels.
pub const FEATURE_DIM: usize = BANDS * CHANNELS;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<s>", "</s>", "<pad>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordFeatures {
    pub token: String,
    pub eeg: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EegSentenceRecord {
    pub sentence_id: String,
    pub text: String,
    pub words: Vec<WordFeatures>,
}

impl EegSentenceRecord {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Deserialize)]
struct RawWord {
    token: String,
    eeg: Vec<serde_json::Value>,
}

#[derive(Deserialize)]
struct RawRecord {
    sentence_id: String,
    text: String,
    words: Vec<RawWord>,
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub records: Vec<EegSentenceRecord>,
    /// Sentences dropped for missing or non-finite features.
    pub excluded: usize,
}

fn feature_value(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64().filter(|x| x.is_finite()),
        _ => None,
    }
}

/// Reads JSON-lines records. Sentences with any missing or non-finite
/// feature are dropped; every kept word vector is z-scored over its own
/// entries.
pub fn load_dataset(path: impl AsRef<Path>, feature_dim: usize) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut excluded = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.words.is_empty() {
            return Err(Error::Schema(format!(
                "line {line_no}: sentence {} has no words",
                raw.sentence_id
            )));
        }
        let mut words = Vec::with_capacity(raw.words.len());
        let mut invalid = false;
        for w in raw.words {
            if w.eeg.len() != feature_dim {
                return Err(Error::Schema(format!(
                    "line {line_no}: word {:?} has {} features, expected {feature_dim}",
                    w.token,
                    w.eeg.len()
                )));
            }
            let values: Option<Vec<f64>> = w.eeg.iter().map(feature_value).collect();
            match values {
                Some(v) => words.push(WordFeatures {
                    token: w.token,
                    eeg: normalize_word(&v),
                }),
                None => invalid = true,
            }
        }
        if invalid {
            excluded += 1;
            continue;
        }
        records.push(EegSentenceRecord {
            sentence_id: raw.sentence_id,
            text: raw.text,
            words,
        });
    }
    log::info!(
        "loaded {} sentences from {} ({} excluded for invalid features)",
        records.len(),
        path.display(),
        excluded
    );
    Ok(LoadedDataset { records, excluded })
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[EegSentenceRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Z-score over the vector's own entries; a zero spread divides by 1.
pub fn normalize_word(v: &[f64]) -> Vec<f32> {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 0.0 { std } else { 1.0 };
    v.iter().map(|x| ((x - mean) / scale) as f32).collect()
}

pub fn normalize_records(records: &mut [EegSentenceRecord]) {
    for w in records.iter_mut().flat_map(|r| r.words.iter_mut()) {
        let v: Vec<f64> = w.eeg.iter().map(|&x| x as f64).collect();
        w.eeg = normalize_word(&v);
    }
}

// ---- vocabulary ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Schema("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, skipping BOS/EOS/PAD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, BOS | EOS | PAD))
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = self.tokens.join("\n");
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(body.lines().map(str::to_owned).collect())
    }
}

/// Frequency-sorted vocabulary (ties alphabetical) over whitespace tokens.
/// Tokens seen fewer than `min_count` times are left out and map to UNK.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], min_count: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in texts {
        for tok in t.as_ref().split_whitespace() {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(tok, c)| c >= min_count && !RESERVED.contains(&tok))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(entries.into_iter().map(|(t, _)| t.to_owned()))
        .collect();
    Vocabulary::from_tokens(tokens)
}

// ---- batching --------------------------------------------------------------

/// Padded mini-batch. `mask[b·T + t]` is 1 on real timesteps (M) and
/// `inv_mask` is its complement (M̄, 1 on padding).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub time: usize,
    pub features: usize,
    /// `[B×T×f]`; rows at padded timesteps are zero.
    pub eeg: Vec<f32>,
    pub mask: Vec<u8>,
    pub inv_mask: Vec<u8>,
    /// `[B×T_y]` ids: BOS, tokens, EOS, then PAD.
    pub targets: Vec<usize>,
    pub target_len: usize,
    pub sentence_ids: Vec<String>,
    pub texts: Vec<String>,
}

impl Batch {
    pub fn eeg_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.eeg.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new([self.batch, self.time, self.features], data).expect("batch shape")
    }

    pub fn padded(&self) -> Vec<bool> {
        self.inv_mask.iter().map(|&m| m == 1).collect()
    }

    pub fn real(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m == 1).collect()
    }

    /// Number of real EEG timesteps per sentence.
    pub fn lengths(&self) -> Vec<usize> {
        self.mask
            .chunks(self.time)
            .map(|row| row.iter().filter(|&&m| m == 1).count())
            .collect()
    }

    pub fn target_row(&self, b: usize) -> &[usize] {
        &self.targets[b * self.target_len..(b + 1) * self.target_len]
    }

    /// Real word vectors of sentence `b`, padding stripped.
    pub fn unpad_eeg(&self, b: usize) -> Vec<Vec<f32>> {
        let len = self.lengths()[b];
        (0..len)
            .map(|t| {
                let start = (b * self.time + t) * self.features;
                self.eeg[start..start + self.features].to_vec()
            })
            .collect()
    }
}

/// Pads EEG to the batch's longest sentence and wraps targets as
/// BOS … EOS followed by PAD. Over-long inputs are an error, never truncated.
pub fn build_batch(
    records: &[&EegSentenceRecord],
    vocab: &Vocabulary,
    max_t: usize,
    max_ty: usize,
) -> Result<Batch> {
    let first = records
        .first()
        .ok_or_else(|| Error::contract("cannot batch zero records"))?;
    let features = first
        .words
        .first()
        .ok_or_else(|| Error::contract("record without words"))?
        .eeg
        .len();
    let encoded: Vec<Vec<usize>> = records.iter().map(|r| vocab.encode(&r.text)).collect();
    for (r, ids) in records.iter().zip(&encoded) {
        if r.words.len() > max_t {
            return Err(Error::contract(format!(
                "sentence {} has {} timesteps, more than max_T = {max_t} (truncation refused)",
                r.sentence_id,
                r.words.len()
            )));
        }
        if ids.len() + 2 > max_ty {
            return Err(Error::contract(format!(
                "sentence {} needs {} target positions, more than max_Ty = {max_ty} (truncation refused)",
                r.sentence_id,
                ids.len() + 2
            )));
        }
        if r.words.iter().any(|w| w.eeg.len() != features) {
            return Err(Error::Schema(format!(
                "sentence {} mixes feature sizes",
                r.sentence_id
            )));
        }
        if r.words.is_empty() {
            return Err(Error::contract(format!("sentence {} has no words", r.sentence_id)));
        }
    }
    let batch = records.len();
    let time = records.iter().map(|r| r.words.len()).max().unwrap_or(0);
    let target_len = encoded.iter().map(|ids| ids.len() + 2).max().unwrap_or(2);

    let mut eeg = vec![0.0f32; batch * time * features];
    let mut mask = vec![0u8; batch * time];
    let mut targets = vec![PAD; batch * target_len];
    for (b, (r, ids)) in records.iter().zip(&encoded).enumerate() {
        for (t, w) in r.words.iter().enumerate() {
            let start = (b * time + t) * features;
            eeg[start..start + features].copy_from_slice(&w.eeg);
            mask[b * time + t] = 1;
        }
        let row = &mut targets[b * target_len..(b + 1) * target_len];
        row[0] = BOS;
        row[1..=ids.len()].copy_from_slice(ids);
        row[ids.len() + 1] = EOS;
    }
    let inv_mask = mask.iter().map(|m| 1 - m).collect();
    Ok(Batch {
        batch,
        time,
        features,
        eeg,
        mask,
        inv_mask,
        targets,
        target_len,
        sentence_ids: records.iter().map(|r| r.sentence_id.clone()).collect(),
        texts: records.iter().map(|r| r.text.clone()).collect(),
    })
}

// ---- splits ----------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<EegSentenceRecord>,
    pub dev: Vec<EegSentenceRecord>,
    pub test: Vec<EegSentenceRecord>,
}

fn ids(rs: &[EegSentenceRecord]) -> Vec<&str> {
    rs.iter().map(|r| r.sentence_id.as_str()).collect()
}

#[derive(Serialize)]
struct SplitManifest<'a> {
    train: Vec<&'a str>,
    dev: Vec<&'a str>,
    test: Vec<&'a str>,
}

impl DatasetSplit {
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let manifest = SplitManifest {
            train: ids(&self.train),
            dev: ids(&self.dev),
            test: ids(&self.test),
        };
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// 80/10/10 split over unique sentence texts; every record sharing a text
/// lands in the same partition.
pub fn split_dataset(records: &[EegSentenceRecord], seed: u64) -> Result<DatasetSplit> {
    let mut texts: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for r in records {
        if seen.insert(r.text.as_str()) {
            texts.push(&r.text);
        }
    }
    let unique = texts.len();
    if unique < 10 {
        return Err(Error::contract(format!(
            "need at least 10 distinct sentences to split, got {unique}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    texts.shuffle(&mut rng);
    let n_train = (unique as f64 * 0.8).round() as usize;
    let n_dev = (unique as f64 * 0.1).round() as usize;
    let mut part: HashMap<&str, usize> = HashMap::new();
    for (i, t) in texts.iter().enumerate() {
        let p = if i < n_train {
            0
        } else if i < n_train + n_dev {
            1
        } else {
            2
        };
        part.insert(t, p);
    }
    let mut split = DatasetSplit::default();
    for r in records {
        match part[r.text.as_str()] {
            0 => split.train.push(r.clone()),
            1 => split.dev.push(r.clone()),
            _ => split.test.push(r.clone()),
        }
    }
    Ok(split)
}

// ---- synthetic data --------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Number of distinct content words.
    pub vocab_size: usize,
    pub n_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub feature_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 30,
            n_sentences: 600,
            min_len: 3,
            max_len: 8,
            noise_std: 0.1,
            seed: 0,
            feature_dim: FEATURE_DIM,
        }
    }
}

pub fn synth_token(i: usize) -> String {
    format!("w{i:02}")
}

/// Sentences of uniformly drawn words whose features are a fixed secret
/// embedding of the word plus Gaussian noise, so the text is recoverable
/// from the features.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Vec<EegSentenceRecord>> {
    if cfg.vocab_size < 4 {
        return Err(Error::contract("synthetic vocabulary needs at least 4 words"));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::contract(format!(
            "invalid sentence length range {}..={}",
            cfg.min_len, cfg.max_len
        )));
    }
    if cfg.noise_std < 0.0 || !cfg.noise_std.is_finite() {
        return Err(Error::contract("noise_std must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let secret: Vec<Vec<f64>> = (0..cfg.vocab_size)
        .map(|_| (0..cfg.feature_dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut records = Vec::with_capacity(cfg.n_sentences);
    for s in 0..cfg.n_sentences {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let tok = rng.random_range(0..cfg.vocab_size);
            let eeg = secret[tok]
                .iter()
                .map(|&v| (v + cfg.noise_std * unit.sample(&mut rng)) as f32)
                .collect();
            words.push(WordFeatures {
                token: synth_token(tok),
                eeg,
            });
        }
        let text = words.iter().map(|w| w.token.as_str()).collect::<Vec<_>>().join(" ");
        records.push(EegSentenceRecord {
            sentence_id: format!("synth-{s:05}"),
            text,
            words,
        });
    }
    Ok(records)
}

/// Permutes word feature vectors across the whole corpus while keeping
/// every text fixed: marginal feature statistics survive, the
/// feature→token mapping does not.
pub fn noise_control(records: &[EegSentenceRecord], seed: u64) -> Vec<EegSentenceRecord> {
    let mut pool: Vec<Vec<f32>> = records
        .iter()
        .flat_map(|r| r.words.iter().map(|w| w.eeg.clone()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut pool = pool.into_iter();
    records
        .iter()
        .map(|r| EegSentenceRecord {
            sentence_id: r.sentence_id.clone(),
            text: r.text.clone(),
            words: r
                .words
                .iter()
                .map(|w| WordFeatures {
                    token: w.token.clone(),
                    eeg: pool.next().expect("one vector per word"),
                })
                .collect(),
        })
        .collect()
}
