//! BLEU-N, sacre-style corpus BLEU, ROUGE-1/2/L, WER and CER.
//!
//! Tokens are whitespace-split and case-sensitive. BLEU zero-match orders
//! are floored at [`BLEU_EPSILON`] before the log; orders for which the
//! hypothesis corpus has no n-grams at all are left out of the mean.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLEU_EPSILON: f64 = 1e-9;

pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Whitespace split, then every ASCII punctuation character becomes its own
/// token. Case is kept.
pub fn sacre_tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in s.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if c.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Clipped overlap: each hypothesis n-gram counts at most as often as it
/// occurs in the reference.
fn clipped_overlap<S: AsRef<str>>(reference: &[S], hypothesis: &[S], n: usize) -> (usize, usize, usize) {
    let r = ngram_counts(reference, n);
    let h = ngram_counts(hypothesis, n);
    let overlap = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (
        overlap,
        hypothesis.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

/// A reference/hypothesis token pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedPair<S = String> {
    pub reference: Vec<S>,
    pub hypothesis: Vec<S>,
}

impl TokenizedPair<String> {
    pub fn from_words(reference: &str, hypothesis: &str) -> Self {
        Self {
            reference: reference.split_whitespace().map(str::to_owned).collect(),
            hypothesis: hypothesis.split_whitespace().map(str::to_owned).collect(),
        }
    }

    pub fn from_sacre(reference: &str, hypothesis: &str) -> Self {
        Self {
            reference: sacre_tokenize(reference),
            hypothesis: sacre_tokenize(hypothesis),
        }
    }
}

/// Corpus-level clipped precision for order `n`: `(matches, total)`.
pub fn modified_precision<S: AsRef<str>>(pairs: &[TokenizedPair<S>], n: usize) -> (usize, usize) {
    pairs.iter().fold((0, 0), |(m, t), p| {
        let (o, h, _) = clipped_overlap(&p.reference, &p.hypothesis, n);
        (m + o, t + h)
    })
}

/// `exp(1 − r/c)` when the hypothesis corpus is shorter than the reference
/// corpus, else 1.
pub fn brevity_penalty(ref_len: usize, hyp_len: usize) -> f64 {
    if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus BLEU over orders `1..=n`, as a percentage.
pub fn bleu_n<S: AsRef<str>>(pairs: &[TokenizedPair<S>], n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("BLEU over an empty corpus"));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::contract(format!("BLEU order must be in 1..=4, got {n}")));
    }
    let ref_len: usize = pairs.iter().map(|p| p.reference.len()).sum();
    let hyp_len: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    let bp = brevity_penalty(ref_len, hyp_len);
    if bp == 0.0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for k in 1..=n {
        let (matches, total) = modified_precision(pairs, k);
        if total == 0 {
            continue;
        }
        let p = if matches == 0 { BLEU_EPSILON } else { matches as f64 / total as f64 };
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// BLEU-4 over raw strings with the fixed punctuation-splitting tokenizer.
pub fn corpus_bleu_sacre<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> Result<f64> {
    let tokenized: Vec<_> = pairs
        .iter()
        .map(|(r, h)| TokenizedPair::from_sacre(r.as_ref(), h.as_ref()))
        .collect();
    bleu_n(&tokenized, 4)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl RougeScore {
    fn from_counts(overlap: usize, hyp: usize, reference: usize) -> Self {
        if hyp == 0 || reference == 0 {
            return Self::default();
        }
        let precision = overlap as f64 / hyp as f64;
        let recall = overlap as f64 / reference as f64;
        let f = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f }
    }

    pub fn mean(scores: &[RougeScore]) -> RougeScore {
        let n = scores.len().max(1) as f64;
        RougeScore {
            precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
            recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
            f: scores.iter().map(|s| s.f).sum::<f64>() / n,
        }
    }
}

pub fn rouge_n<S: AsRef<str>>(pair: &TokenizedPair<S>, n: usize) -> Result<RougeScore> {
    if !(1..=2).contains(&n) {
        return Err(Error::contract(format!("ROUGE-N order must be 1 or 2, got {n}")));
    }
    let (overlap, h, r) = clipped_overlap(&pair.reference, &pair.hypothesis, n);
    Ok(RougeScore::from_counts(overlap, h, r))
}

pub fn lcs_len<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(pair: &TokenizedPair<S>) -> RougeScore {
    let r: Vec<&str> = pair.reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = pair.hypothesis.iter().map(AsRef::as_ref).collect();
    RougeScore::from_counts(lcs_len(&r, &h), h.len(), r.len())
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<A: PartialEq>(reference: &[A], hypothesis: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Word edits divided by reference length; exceeds 1 with many insertions.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let (r, h) = (words(reference), words(hypothesis));
    if r.is_empty() {
        return Err(Error::contract("WER with an empty reference"));
    }
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Character edits (spaces included) divided by reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    if r.is_empty() {
        return Err(Error::contract("CER with an empty reference"));
    }
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Total edits over total reference length.
pub fn corpus_wer<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> Result<f64> {
    corpus_rate(pairs, |s| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>())
}

pub fn corpus_cer<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> Result<f64> {
    corpus_rate(pairs, |s| s.chars().map(String::from).collect::<Vec<_>>())
}

fn corpus_rate<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)], split: impl Fn(&str) -> Vec<String>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("error rate over an empty corpus"));
    }
    let (mut edits, mut len) = (0usize, 0usize);
    for (r, h) in pairs {
        let (r, h) = (split(r.as_ref()), split(h.as_ref()));
        if r.is_empty() {
            return Err(Error::contract("error rate with an empty reference"));
        }
        edits += edit_distance(&r, &h);
        len += r.len();
    }
    Ok(edits as f64 / len as f64)
}

/// One row of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub mode: String,
    pub metric: String,
    pub submetric: String,
    pub value: f64,
}

/// BLEU-1..4, ROUGE-1/2/L P/R/F, sacre-style corpus BLEU, corpus WER and CER
/// for `(reference, hypothesis)` strings: 16 rows. BLEU and ROUGE are in
/// percent, WER and CER are rates.
pub fn metric_table<R: AsRef<str> + Sync, H: AsRef<str> + Sync>(
    model: &str,
    mode: &str,
    pairs: &[(R, H)],
) -> Result<Vec<MetricRow>> {
    let tokenized: Vec<_> = pairs
        .iter()
        .map(|(r, h)| TokenizedPair::from_words(r.as_ref(), h.as_ref()))
        .collect();
    let row = |metric: &str, submetric: &str, value: f64| MetricRow {
        model: model.to_owned(),
        mode: mode.to_owned(),
        metric: metric.to_owned(),
        submetric: submetric.to_owned(),
        value,
    };
    let mut rows = Vec::with_capacity(16);
    for n in 1..=4 {
        rows.push(row("bleu", &n.to_string(), bleu_n(&tokenized, n)?));
    }
    let mut rouge = |name: &str, scores: Vec<RougeScore>| {
        let m = RougeScore::mean(&scores);
        rows.push(row(name, "p", 100.0 * m.precision));
        rows.push(row(name, "r", 100.0 * m.recall));
        rows.push(row(name, "f", 100.0 * m.f));
    };
    rouge("rouge1", tokenized.iter().map(|p| rouge_n(p, 1)).collect::<Result<_>>()?);
    rouge("rouge2", tokenized.iter().map(|p| rouge_n(p, 2)).collect::<Result<_>>()?);
    rouge("rougeL", tokenized.iter().map(rouge_l).collect());
    rows.push(row("sacrebleu", "corpus", corpus_bleu_sacre(pairs)?));
    rows.push(row("wer", "corpus", corpus_wer(pairs)?));
    rows.push(row("cer", "corpus", corpus_cer(pairs)?));
    Ok(rows)
}

/// Whether larger values of `metric` are better.
pub fn higher_is_better(metric: &str) -> bool {
    !matches!(metric, "wer" | "cer")
}

pub fn write_metric_csv(path: impl AsRef<std::path::Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metric_csv(path: impl AsRef<std::path::Path>) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(r: &str, h: &str) -> TokenizedPair {
        TokenizedPair::from_words(r, h)
    }

    #[test]
    fn identical_corpus_scores_100() {
        let pairs = [pair("the cat sat on the mat", "the cat sat on the mat"), pair("a b", "a b")];
        for n in 1..=4 {
            assert_eq!(bleu_n(&pairs, n).unwrap(), 100.0);
        }
        assert_eq!(corpus_bleu_sacre(&[("Hello, world.", "Hello, world.")]).unwrap(), 100.0);
    }

    #[test]
    fn clipping_example() {
        let pairs = [pair("the cat sat", "the the the the")];
        assert_eq!(modified_precision(&pairs, 1), (1, 4));
    }

    #[test]
    fn brevity_penalty_for_half_length() {
        assert!((brevity_penalty(6, 3) - (-1f64).exp()).abs() < 1e-15);
        // Unigram-only BLEU of a matching half-length hypothesis is exactly
        // the penalty.
        let pairs = [pair("a b c d", "a b")];
        assert!((bleu_n(&pairs, 1).unwrap() - 100.0 * (-1f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn disjoint_pair_hits_epsilon_floor() {
        let b = corpus_bleu_sacre(&[("a b c d", "w x y z")]).unwrap();
        assert!(b > 0.0 && b < 1e-6, "{b}");
    }

    #[test]
    fn sacre_single_pair_matches_bleu4() {
        let (r, h) = ("the cat, the dog.", "the cat, a dog!");
        let tok = TokenizedPair::from_sacre(r, h);
        assert_eq!(tok.reference, ["the", "cat", ",", "the", "dog", "."]);
        assert_eq!(corpus_bleu_sacre(&[(r, h)]).unwrap(), bleu_n(&[tok], 4).unwrap());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(bleu_n::<String>(&[], 2).is_err());
        assert!(corpus_bleu_sacre::<&str, &str>(&[]).is_err());
    }

    #[test]
    fn rouge_examples() {
        let s = rouge_n(&pair("the cat sat", "the cat"), 1).unwrap();
        assert!((s.precision - 1.0).abs() < 1e-12);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f - 0.8).abs() < 1e-12);
        assert_eq!(rouge_n(&pair("a b c", "c b a"), 2).unwrap(), RougeScore::default());
        let same = rouge_n(&pair("x y z", "x y z"), 2).unwrap();
        assert_eq!((same.precision, same.recall, same.f), (1.0, 1.0, 1.0));
        assert_eq!(rouge_n(&pair("a b", "a"), 2).unwrap(), RougeScore::default());
    }

    #[test]
    fn rouge_l_examples() {
        let s = rouge_l(&pair("a b c d", "a c b d"));
        assert_eq!((s.precision, s.recall), (0.75, 0.75));
        let s = rouge_l(&pair("a b", "b a"));
        assert_eq!((s.precision, s.recall), (0.5, 0.5));
        assert_eq!(rouge_l(&pair("a b", "a b")).f, 1.0);
        assert_eq!(rouge_l(&pair("a b", "")), RougeScore::default());
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(wer("a b c", "a b c").unwrap(), 0.0);
        assert!((wer("a b c", "a x c").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer("a b c", "").unwrap(), 1.0);
        assert!(wer("", "a").is_err());
        assert!(wer("a", "a b c d").unwrap() > 1.0);
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert!((cer("abc", "abd").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer("ab", "abab").unwrap(), 1.0);
        assert_eq!(cer("a b", "ab").unwrap(), 1.0 / 3.0);
        assert!(cer("", "x").is_err());
    }

    #[test]
    fn corpus_rates_pool_edits() {
        let pairs = [("a b c d", "a b c d"), ("e f", "x f")];
        assert!((corpus_wer(&pairs).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn metric_table_has_sixteen_rows_and_round_trips() {
        let pairs = [("a b c", "a b d"), ("x y", "x y")];
        let rows = metric_table("m", "tf", &pairs).unwrap();
        assert_eq!(rows.len(), 16);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_metric_csv(f.path(), &rows).unwrap();
        assert_eq!(read_metric_csv(f.path()).unwrap(), rows);
        let header = std::fs::read_to_string(f.path()).unwrap();
        assert!(header.starts_with("model,mode,metric,submetric,value\n"));
    }
}
