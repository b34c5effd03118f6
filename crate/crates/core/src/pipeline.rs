//! End-to-end workflows shared by the command-line tool and the test
//! suites: data preparation, training and two-mode evaluation.

use std::path::Path;

use rayon::prelude::*;

use crate::data::{
    build_vocab, load_dataset, noise_control, split_dataset, synthesize_dataset, DatasetSplit, EegSentenceRecord,
    SynthConfig, Vocabulary, EOS, PAD,
};
use crate::decoding::{generate, teacher_forced_predict, tf_content, DecodeConfig};
use crate::error::{Error, Result};
use crate::metrics::{metric_table, MetricRow};
use crate::model::{ModelConfig, R1Translator};
use crate::tensor::Real;
use crate::training::{make_batches, train_two_stage, EpochLog, TrainOutcome, TwoStageConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    File { path: std::path::PathBuf, feature_dim: usize },
    Synth(SynthConfig),
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<EegSentenceRecord>> {
        match self {
            DataSource::File { path, feature_dim } => Ok(load_dataset(path, *feature_dim)?.records),
            DataSource::Synth(cfg) => synthesize_dataset(cfg),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            DataSource::File { feature_dim, .. } => *feature_dim,
            DataSource::Synth(cfg) => cfg.feature_dim,
        }
    }
}

/// Parses `k=v,k=v` synthetic-data settings on top of the defaults. Keys:
/// `vocab`, `n`, `min_len`, `max_len`, `noise`, `seed`, `f`.
pub fn parse_synth_spec(spec: &str) -> Result<SynthConfig> {
    let mut cfg = SynthConfig::default();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("synthetic setting {item:?} is not key=value")))?;
        let bad = || Error::contract(format!("synthetic setting {k} has invalid value {v:?}"));
        match k.trim() {
            "vocab" => cfg.vocab_size = v.parse().map_err(|_| bad())?,
            "n" => cfg.n_sentences = v.parse().map_err(|_| bad())?,
            "min_len" => cfg.min_len = v.parse().map_err(|_| bad())?,
            "max_len" => cfg.max_len = v.parse().map_err(|_| bad())?,
            "noise" => cfg.noise_std = v.parse().map_err(|_| bad())?,
            "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
            "f" => cfg.feature_dim = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::contract(format!("unknown synthetic setting {k:?}"))),
        }
    }
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
}

/// Optionally applies the noise control, splits by sentence text and builds
/// the vocabulary from the training texts.
pub fn prepare_data(records: &[EegSentenceRecord], noise: bool, seed: u64) -> Result<PreparedData> {
    let records = if noise {
        noise_control(records, seed)
    } else {
        records.to_vec()
    };
    let split = split_dataset(&records, seed)?;
    let texts: Vec<&str> = split.train.iter().map(|r| r.text.as_str()).collect();
    let vocab = build_vocab(&texts, 1)?;
    Ok(PreparedData { split, vocab })
}

pub fn train_model(
    data: &PreparedData,
    mut model_cfg: ModelConfig,
    train_cfg: &TwoStageConfig,
    on_epoch: impl FnMut(&EpochLog, &R1Translator<f32>),
) -> Result<TrainOutcome<f32>> {
    model_cfg.vocab = data.vocab.len();
    let mut model = R1Translator::<f32>::new(model_cfg, train_cfg.seed)?;
    train_two_stage(&mut model, &data.split.train, &data.split.dev, &data.vocab, train_cfg, on_epoch)
}

/// Teacher-forced and free-running outputs for one evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub sentence_ids: Vec<String>,
    pub references: Vec<String>,
    pub tf_predictions: Vec<String>,
    pub free_predictions: Vec<String>,
    /// Share of content-token positions predicted correctly under teacher
    /// forcing (EOS and padding excluded).
    pub token_accuracy: f64,
    /// Share of free-running outputs identical to the reference.
    pub exact_match: f64,
}

pub fn evaluate<T: Real>(
    model: &R1Translator<T>,
    records: &[EegSentenceRecord],
    vocab: &Vocabulary,
    decode: &DecodeConfig,
    batch_size: usize,
) -> Result<Evaluation> {
    decode.validate()?;
    if records.is_empty() {
        return Err(Error::contract("evaluation over an empty set"));
    }
    let refs: Vec<_> = records.iter().collect();
    let batches = make_batches(&refs, vocab, batch_size, model.config.maxlen)?;
    let per_batch: Vec<_> = batches
        .par_iter()
        .map(|batch| -> Result<_> {
            let tf = teacher_forced_predict(model, batch)?;
            let free = generate(model, batch, decode)?;
            let (mut correct, mut total) = (0usize, 0usize);
            for (b, row) in tf.iter().enumerate() {
                for (&pred, &label) in row[1..].iter().zip(&batch.target_row(b)[1..]) {
                    if label != EOS && label != PAD {
                        total += 1;
                        correct += usize::from(pred == label);
                    }
                }
            }
            let tf_text: Vec<String> = tf.iter().map(|r| vocab.decode(tf_content(r))).collect();
            let free_text: Vec<String> = free.iter().map(|h| vocab.decode(h.content())).collect();
            Ok((tf_text, free_text, correct, total))
        })
        .collect::<Result<_>>()?;

    let mut eval = Evaluation {
        sentence_ids: records.iter().map(|r| r.sentence_id.clone()).collect(),
        references: records.iter().map(|r| r.text.clone()).collect(),
        tf_predictions: Vec::new(),
        free_predictions: Vec::new(),
        token_accuracy: 0.0,
        exact_match: 0.0,
    };
    let (mut correct, mut total) = (0, 0);
    for (tf, free, c, t) in per_batch {
        eval.tf_predictions.extend(tf);
        eval.free_predictions.extend(free);
        correct += c;
        total += t;
    }
    eval.token_accuracy = correct as f64 / total.max(1) as f64;
    let exact = eval
        .references
        .iter()
        .zip(&eval.free_predictions)
        .filter(|(r, h)| r.split_whitespace().eq(h.split_whitespace()))
        .count();
    eval.exact_match = exact as f64 / records.len() as f64;
    Ok(eval)
}

impl Evaluation {
    pub fn pairs(&self, teacher_forced: bool) -> Vec<(&str, &str)> {
        let hyps = if teacher_forced { &self.tf_predictions } else { &self.free_predictions };
        self.references.iter().map(String::as_str).zip(hyps.iter().map(String::as_str)).collect()
    }

    /// Full metric table in both modes (`tf` and `free`): 32 rows.
    pub fn metric_rows(&self, model: &str) -> Result<Vec<MetricRow>> {
        let mut rows = metric_table(model, "tf", &self.pairs(true))?;
        rows.extend(metric_table(model, "free", &self.pairs(false))?);
        Ok(rows)
    }

    /// `target, predicted with teacher forcing, predicted` triples as CSV.
    pub fn write_triples(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["sentence_id", "target", "predicted_tf", "predicted"])?;
        for i in 0..self.references.len() {
            w.write_record([
                &self.sentence_ids[i],
                &self.references[i],
                &self.tf_predictions[i],
                &self.free_predictions[i],
            ])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_spec_parsing() {
        let cfg = parse_synth_spec("vocab=20,n=500, noise=0.5").unwrap();
        assert_eq!((cfg.vocab_size, cfg.n_sentences, cfg.noise_std), (20, 500, 0.5));
        assert!(parse_synth_spec("bogus=1").is_err());
        assert!(parse_synth_spec("n=x").is_err());
        assert!(parse_synth_spec("n").is_err());
    }

    #[test]
    fn untrained_model_evaluates_in_both_modes() {
        let synth = SynthConfig {
            vocab_size: 5,
            n_sentences: 30,
            min_len: 2,
            max_len: 4,
            noise_std: 0.1,
            seed: 1,
            feature_dim: 8,
        };
        let data = prepare_data(&synthesize_dataset(&synth).unwrap(), false, 0).unwrap();
        let mut cfg = ModelConfig::toy(data.vocab.len());
        cfg.f = 8;
        cfg.d = 16;
        cfg.h = 8;
        cfg.ffn_dim = 32;
        let model = R1Translator::<f32>::new(cfg, 0).unwrap();
        let decode = DecodeConfig {
            max_len: 6,
            ..DecodeConfig::default()
        };
        let eval = evaluate(&model, &data.split.test, &data.vocab, &decode, 4).unwrap();
        assert_eq!(eval.references.len(), data.split.test.len());
        assert!((0.0..=1.0).contains(&eval.token_accuracy));
        let rows = eval.metric_rows("untrained").unwrap();
        assert_eq!(rows.len(), 32);
        assert_eq!(rows.iter().filter(|r| r.mode == "tf").count(), 16);
    }
}
