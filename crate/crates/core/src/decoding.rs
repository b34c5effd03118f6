//! Teacher-forced prediction and free-running generation (greedy and beam).

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{Batch, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{EncodedSource, R1Translator};
use crate::tensor::{Graph, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    TeacherForced,
    Greedy,
    Beam,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::TeacherForced => "tf",
            DecodeMode::Greedy => "greedy",
            DecodeMode::Beam => "beam",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tf" | "teacher_forced" => Ok(DecodeMode::TeacherForced),
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" => Ok(DecodeMode::Beam),
            _ => Err(Error::contract(format!("unknown decode mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    /// Maximum generated tokens after BOS, EOS included.
    pub max_len: usize,
    /// Exponent `α` of the length normaliser `len^α`; 0 ranks by raw
    /// log-probability.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Beam,
            beam_width: 4,
            max_len: 32,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        match self.mode {
            DecodeMode::Beam if self.beam_width < 2 => {
                Err(Error::contract("beam mode needs beam_width ≥ 2 (use greedy for width 1)"))
            }
            _ if self.beam_width == 0 => Err(Error::contract("beam_width must be at least 1")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// BOS-prefixed; ends with EOS iff `finished`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens after BOS, EOS included.
    pub fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Content tokens only.
    pub fn content(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }

    fn score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            self.log_prob
        } else {
            self.log_prob / (self.generated().max(1) as f64).powf(length_penalty)
        }
    }
}

/// Next-token log-probabilities for a single source.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// One distribution per prefix; all prefixes have equal length.
    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Tokens never emitted by decoding.
pub fn is_banned(token: usize) -> bool {
    token == BOS || token == PAD
}

/// Appends the argmax token (ties to the smallest id) until EOS or
/// `max_len` generated tokens.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    };
    while hyp.generated() < max_len {
        let lp = scorer.log_probs(std::slice::from_ref(&hyp.tokens))?.remove(0);
        let mut best: Option<(usize, f64)> = None;
        for (tok, &v) in lp.iter().enumerate() {
            if is_banned(tok) {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((tok, v));
            }
        }
        let (tok, v) = best.ok_or_else(|| Error::contract("no decodable token in the vocabulary"))?;
        hyp.tokens.push(tok);
        hyp.log_prob += v;
        if tok == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .partial_cmp(&a.score(alpha))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Keeps the `beam_width` best expansions per step; expansions ending in EOS
/// retire to a finished pool. Returns the best finished hypothesis, or the
/// best unfinished one when nothing finished within `max_len`.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    beam_width: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    if beam_width == 0 {
        return Err(Error::contract("beam_width must be at least 1"));
    }
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let dists = scorer.log_probs(&prefixes)?;
        let mut candidates = Vec::with_capacity(live.len() * scorer.vocab_size());
        for (h, lp) in live.iter().zip(&dists) {
            for (tok, &v) in lp.iter().enumerate() {
                if is_banned(tok) {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + v,
                    finished: tok == EOS,
                });
            }
        }
        if candidates.is_empty() {
            return Err(Error::contract("no decodable token in the vocabulary"));
        }
        candidates.sort_by(|a, b| rank(a, b, length_penalty));
        candidates.truncate(beam_width);
        let (done, open): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|h| h.finished);
        pool.extend(done);
        live = open;
        if live.is_empty() {
            break;
        }
    }
    let source = if pool.is_empty() { live } else { pool };
    source
        .into_iter()
        .min_by(|a, b| rank(a, b, length_penalty))
        .ok_or_else(|| Error::contract("beam search produced no hypothesis"))
}

/// Decoding against one encoded sentence.
pub struct SourceScorer<'a, T: Real> {
    pub model: &'a R1Translator<T>,
    pub source: &'a EncodedSource<T>,
}

impl<T: Real> StepScorer for SourceScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab
    }

    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.model.next_log_probs(self.source, prefixes)
    }
}

/// Free-running generation for every sentence of `batch`, in parallel over
/// sentences.
pub fn generate<T: Real>(model: &R1Translator<T>, batch: &Batch, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    if cfg.max_len > model.config.maxlen {
        return Err(Error::contract(format!(
            "decode max_len {} exceeds model maxlen {}",
            cfg.max_len, model.config.maxlen
        )));
    }
    if cfg.mode == DecodeMode::TeacherForced {
        return Err(Error::contract("teacher-forced mode does not generate; use teacher_forced_predict"));
    }
    let sources = model.encode(batch)?;
    sources
        .par_iter()
        .map(|source| {
            let scorer = SourceScorer { model, source };
            match cfg.mode {
                DecodeMode::Beam => beam_search(&scorer, cfg.beam_width, cfg.max_len, cfg.length_penalty),
                _ => greedy_decode(&scorer, cfg.max_len),
            }
        })
        .collect()
}

/// Per position, the argmax prediction given the ground-truth prefix.
/// Rows are BOS-prefixed and as long as the target rows; positions whose
/// label is PAD emit PAD.
pub fn teacher_forced_predict<T: Real>(model: &R1Translator<T>, batch: &Batch) -> Result<Vec<Vec<usize>>> {
    if batch.target_len < 2 || batch.targets.len() != batch.batch * batch.target_len {
        return Err(Error::contract("teacher-forced prediction needs target sequences"));
    }
    let mut g = Graph::inference();
    let out = model.forward_loss(&mut g, batch)?;
    let logits = g.value(out.logits);
    let (ty, v) = (batch.target_len - 1, model.config.vocab);
    Ok((0..batch.batch)
        .map(|b| {
            let labels = &batch.target_row(b)[1..];
            let mut row = Vec::with_capacity(ty + 1);
            row.push(BOS);
            for (t, &label) in labels.iter().enumerate() {
                if label == PAD {
                    row.push(PAD);
                    continue;
                }
                let scores = &logits.data()[(b * ty + t) * v..(b * ty + t + 1) * v];
                let mut best = (EOS, T::neg_infinity());
                for (tok, &s) in scores.iter().enumerate() {
                    if !is_banned(tok) && s > best.1 {
                        best = (tok, s);
                    }
                }
                row.push(best.0);
            }
            row
        })
        .collect())
}

/// Content of a teacher-forced row: tokens after BOS up to the first EOS or
/// PAD.
pub fn tf_content(row: &[usize]) -> &[usize] {
    let body = &row[1.min(row.len())..];
    let end = body.iter().position(|&t| t == EOS || t == PAD).unwrap_or(body.len());
    &body[..end]
}
