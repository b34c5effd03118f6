//! Binary checkpoint: `R1CK` magic, u32 version, a length-prefixed
//! canonical text header (model config, then run metadata), the
//! vocabulary, then one record per parameter (name, dtype, shape,
//! little-endian payload). All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, R1Translator};
use crate::params::ParameterStore;
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"R1CK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the batch-shuffling stream when the checkpoint was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub config: ModelConfig,
    pub params: ParameterStore<T>,
    pub vocab: Vocabulary,
    pub best_val_loss: f64,
    /// 1 or 2; 0 for an untrained initialisation.
    pub stage: u8,
    pub epoch: usize,
    pub rng: RngState,
}

impl<T: Real> Checkpoint<T> {
    pub fn capture(
        model: &R1Translator<T>,
        vocab: &Vocabulary,
        best_val_loss: f64,
        stage: u8,
        epoch: usize,
        rng: RngState,
    ) -> Self {
        let mut params = model.store.clone();
        params.zero_grad();
        Self {
            config: model.config.clone(),
            params,
            vocab: vocab.clone(),
            best_val_loss,
            stage,
            epoch,
            rng,
        }
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn model(&self) -> Result<R1Translator<T>> {
        let mut model = R1Translator::new(self.config.clone(), 0)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    /// Copies parameters into `model`, which must have the same names and
    /// shapes.
    pub fn restore_into(&self, model: &mut R1Translator<T>) -> Result<()> {
        for (_, p) in model.store.iter() {
            let src = self
                .params
                .id(&p.name)
                .ok_or_else(|| Error::Schema(format!("checkpoint has no tensor {}", p.name)))?;
            let have = self.params.value(src).shape();
            if have != p.value.shape() {
                return Err(Error::Schema(format!(
                    "tensor {} has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    have,
                    p.value.shape()
                )));
            }
        }
        if self.params.len() != model.store.len() {
            let extra = self
                .params
                .iter()
                .find(|(_, p)| model.store.id(&p.name).is_none())
                .map(|(_, p)| p.name.clone())
                .unwrap_or_default();
            return Err(Error::Schema(format!("checkpoint tensor {extra} is not part of the model")));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let src = self.params.id(model.store.name(id)).expect("checked above");
            *model.store.value_mut(id) = self.params.value(src).clone();
        }
        Ok(())
    }

    fn header(&self) -> String {
        let mut meta = BTreeMap::new();
        meta.insert("best_val_loss_bits", format!("{:016x}", self.best_val_loss.to_bits()));
        meta.insert("stage", self.stage.to_string());
        meta.insert("epoch", self.epoch.to_string());
        meta.insert("rng_seed", self.rng.seed.to_string());
        meta.insert("rng_word_pos", self.rng.word_pos.to_string());
        let mut s = self.config.to_string();
        s.push_str("---\n");
        for (k, v) in meta {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, self.header().as_bytes());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for tok in self.vocab.tokens() {
            put_bytes(&mut out, tok.as_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            put_bytes(&mut out, p.name.as_bytes());
            out.push(T::DTYPE.tag());
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header = r.string()?;
        let (config_text, meta_text) = header
            .split_once("---\n")
            .ok_or_else(|| Error::Format("checkpoint header lacks a metadata block".into()))?;
        let config: ModelConfig = config_text.parse()?;
        let meta: BTreeMap<&str, &str> = meta_text.lines().filter_map(|l| l.split_once('=')).collect();
        let field = |k: &str| -> Result<&str> {
            meta.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")))
        };
        let bad = |k: &str| Error::Format(format!("checkpoint metadata field {k} is malformed"));
        let best_val_loss = f64::from_bits(
            u64::from_str_radix(field("best_val_loss_bits")?, 16).map_err(|_| bad("best_val_loss_bits"))?,
        );
        let stage = field("stage")?.parse().map_err(|_| bad("stage"))?;
        let epoch = field("epoch")?.parse().map_err(|_| bad("epoch"))?;
        let rng = RngState {
            seed: field("rng_seed")?.parse().map_err(|_| bad("rng_seed"))?,
            word_pos: field("rng_word_pos")?.parse().map_err(|_| bad("rng_word_pos"))?,
        };

        let n_vocab = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n_vocab.min(1 << 20));
        for _ in 0..n_vocab {
            tokens.push(r.string()?);
        }
        let vocab = Vocabulary::from_tokens(tokens)?;

        let n_params = r.u32()? as usize;
        let mut params = ParameterStore::new();
        for _ in 0..n_params {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
            if dtype != T::DTYPE {
                return Err(Error::Schema(format!(
                    "tensor {name} is stored as {dtype:?} but {:?} was requested",
                    T::DTYPE
                )));
            }
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel.checked_mul(dtype.size()).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = payload.chunks_exact(dtype.size()).map(T::read_le).collect();
            params.add(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            params,
            vocab,
            best_val_loss,
            stage,
            epoch,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}
