//! Loss, SGD with momentum, the step learning-rate schedule and the
//! two-stage training loop.

mod checkpoint;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_batch, Batch, EegSentenceRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{R1Translator, Stage};
use crate::params::ParameterStore;
use crate::tensor::{Graph, Real, Var};

/// Mean negative log-likelihood of `targets` under `logits[..×V]`, over
/// positions whose target is not `pad_id`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
    let logp = g.log_softmax(logits)?;
    let labels: Vec<Option<usize>> = targets.iter().map(|&t| (t != pad_id).then_some(t)).collect();
    g.nll(logp, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub eta: f64,
    pub mu: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::contract(format!("momentum must lie in [0, 1), got {}", self.mu)));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter that was trainable at creation.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParameterStore<T>) -> Self {
        Self {
            velocity: store
                .ids()
                .map(|id| store.is_trainable(id).then(|| vec![T::zero(); store.value(id).numel()]))
                .collect(),
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&[T]> {
        self.velocity.get(index).and_then(|v| v.as_deref())
    }

    pub fn tracked(&self) -> usize {
        self.velocity.iter().filter(|v| v.is_some()).count()
    }
}

/// `v ← μ·v + η·g`, then `θ ← θ − v`, for every trainable parameter.
pub fn sgd_step<T: Real>(store: &mut ParameterStore<T>, state: &mut OptimizerState<T>, cfg: &SgdConfig) -> Result<()> {
    let (eta, mu) = (T::of(cfg.eta), T::of(cfg.mu));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let name = store.name(id).to_owned();
        let velocity = state
            .velocity
            .get_mut(id.index())
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::contract(format!("no optimizer state for trainable parameter {name}")))?;
        let p = store.get_mut(id);
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::contract(format!("trainable parameter {name} has no gradient")))?;
        for ((theta, v), &g) in p.value.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad.data()) {
            *v = mu * *v + eta * g;
            *theta -= *v;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulerConfig {
    pub gamma: f64,
    pub step_size: usize,
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::contract(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.step_size == 0 {
            return Err(Error::contract("scheduler step_size must be at least 1"));
        }
        Ok(())
    }
}

/// `η·γ^⌊epoch/step_size⌋`.
pub fn scheduled_lr(eta: f64, epoch: usize, cfg: &SchedulerConfig) -> f64 {
    let decays = (epoch / cfg.step_size.max(1)) as i32;
    eta * cfg.gamma.powi(decays)
}

/// A model with a scalar training loss over batches of type `Batch`.
pub trait Objective<T: Real> {
    type Batch;

    fn store(&self) -> &ParameterStore<T>;
    fn store_mut(&mut self) -> &mut ParameterStore<T>;
    fn loss(&self, g: &mut Graph<T>, batch: &Self::Batch) -> Result<Var>;
}

impl<T: Real> Objective<T> for R1Translator<T> {
    type Batch = Batch;

    fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    fn loss(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Var> {
        Ok(self.forward_loss(g, batch)?.loss)
    }
}

/// One pass over `batches`: zero grads, forward, backward, SGD step per
/// batch. Returns the mean batch loss.
pub fn epoch_train<T: Real, M: Objective<T>>(
    model: &mut M,
    batches: &[M::Batch],
    state: &mut OptimizerState<T>,
    sgd: &SgdConfig,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::contract("training epoch over an empty loader"));
    }
    let mut total = 0.0;
    for (i, batch) in batches.iter().enumerate() {
        model.store_mut().zero_grad();
        let mut g = Graph::new();
        let loss = model.loss(&mut g, batch)?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            log::error!("non-finite training loss {value} at batch {i}; aborting epoch");
            return Err(Error::NonFinite { op: "training loss" });
        }
        g.backward(loss)?;
        model.store_mut().accumulate_grads(&g);
        sgd_step(model.store_mut(), state, sgd)?;
        total += value;
    }
    Ok(total / batches.len() as f64)
}

/// Mean batch loss without parameter updates.
pub fn evaluate_loss<T: Real, M: Objective<T>>(model: &M, batches: &[M::Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::contract("evaluation over an empty loader"));
    }
    let mut total = 0.0;
    for batch in batches {
        let mut g = Graph::inference();
        let loss = model.loss(&mut g, batch)?;
        total += g.value(loss).data()[0].as_f64();
    }
    Ok(total / batches.len() as f64)
}

/// Splits `records` into consecutive batches of `batch_size` in the given
/// order; the last batch may be smaller.
pub fn make_batches(
    records: &[&EegSentenceRecord],
    vocab: &Vocabulary,
    batch_size: usize,
    maxlen: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    records
        .chunks(batch_size)
        .map(|chunk| build_batch(chunk, vocab, maxlen, maxlen + 1))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub eta_stage1: f64,
    pub eta_stage2: f64,
    pub mu: f64,
    pub gamma: f64,
    pub step_stage1: usize,
    pub step_stage2: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Learning rate for from-scratch training of the toy-size model.
pub const FROM_SCRATCH_LR: f64 = 0.02;
/// Learning rate for fine-tuning a pretrained seq2seq model.
pub const FINE_TUNE_LR: f64 = 2e-5;

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 20,
            epochs_stage2: 30,
            eta_stage1: FROM_SCRATCH_LR,
            eta_stage2: FROM_SCRATCH_LR,
            mu: 0.9,
            gamma: 0.1,
            step_stage1: 20,
            step_stage2: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TwoStageConfig {
    /// Schedule for a pretrained seq2seq model: same epochs and steps with
    /// the fine-tuning learning rate in both stages.
    pub fn fine_tune() -> Self {
        Self {
            eta_stage1: FINE_TUNE_LR,
            eta_stage2: FINE_TUNE_LR,
            ..Self::default()
        }
    }

    fn stage(&self, stage: Stage) -> (usize, SgdConfig, SchedulerConfig) {
        match stage {
            Stage::Stage1 => (
                self.epochs_stage1,
                SgdConfig {
                    eta: self.eta_stage1,
                    mu: self.mu,
                },
                SchedulerConfig {
                    gamma: self.gamma,
                    step_size: self.step_stage1,
                },
            ),
            Stage::Stage2 => (
                self.epochs_stage2,
                SgdConfig {
                    eta: self.eta_stage2,
                    mu: self.mu,
                },
                SchedulerConfig {
                    gamma: self.gamma,
                    step_size: self.step_stage2,
                },
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for stage in [Stage::Stage1, Stage::Stage2] {
            let (_, sgd, sched) = self.stage(stage);
            sgd.validate()?;
            sched.validate()?;
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn write_training_log(path: impl AsRef<Path>, rows: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub best: Checkpoint<T>,
    pub log: Vec<EpochLog>,
}

/// Two-stage schedule: stage 1 trains only the stage-1 groups, stage 2
/// unfreezes everything with a fresh optimizer. Validation loss is measured
/// after every epoch and the lowest one is kept as the best checkpoint.
/// `on_epoch` sees the model after each epoch.
pub fn train_two_stage<T: Real>(
    model: &mut R1Translator<T>,
    train: &[EegSentenceRecord],
    val: &[EegSentenceRecord],
    vocab: &Vocabulary,
    cfg: &TwoStageConfig,
    mut on_epoch: impl FnMut(&EpochLog, &R1Translator<T>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("training needs non-empty train and validation sets"));
    }
    let train_ids: std::collections::HashSet<&str> = train.iter().map(|r| r.sentence_id.as_str()).collect();
    if val.iter().any(|r| train_ids.contains(r.sentence_id.as_str())) {
        return Err(Error::contract("train and validation sets overlap"));
    }
    if vocab.len() != model.config.vocab {
        return Err(Error::contract(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config.vocab
        )));
    }
    let maxlen = model.config.maxlen;
    let val_refs: Vec<_> = val.iter().collect();
    let val_batches = make_batches(&val_refs, vocab, cfg.batch_size, maxlen)?;
    let mut order: Vec<&EegSentenceRecord> = train.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Checkpoint<T>> = None;
    let mut log = Vec::new();

    for stage in [Stage::Stage1, Stage::Stage2] {
        let (epochs, base, sched) = cfg.stage(stage);
        if epochs == 0 {
            continue;
        }
        model.set_stage_trainable(stage);
        let mut state = OptimizerState::new(&model.store);
        log::info!(
            "stage {}: {} of {} parameter tensors trainable",
            stage.number(),
            model.store.trainable_count(),
            model.store.len()
        );
        for epoch in 0..epochs {
            let lr = scheduled_lr(base.eta, epoch, &sched);
            order.shuffle(&mut rng);
            let batches = make_batches(&order, vocab, cfg.batch_size, maxlen)?;
            let sgd = SgdConfig { eta: lr, mu: base.mu };
            let train_loss = epoch_train(model, &batches, &mut state, &sgd)?;
            let val_loss = evaluate_loss(model, &val_batches)?;
            let row = EpochLog {
                stage: stage.number(),
                epoch,
                lr,
                train_loss,
                val_loss,
            };
            log::info!(
                "stage {} epoch {epoch:>3} lr {lr:.3e} train {train_loss:.5} val {val_loss:.5}",
                stage.number()
            );
            if best.as_ref().is_none_or(|b| val_loss < b.best_val_loss) {
                best = Some(Checkpoint::capture(
                    model,
                    vocab,
                    val_loss,
                    stage.number(),
                    epoch,
                    RngState::of(cfg.seed, &rng),
                ));
            }
            on_epoch(&row, model);
            log.push(row);
        }
    }
    let best = match best {
        Some(b) => b,
        None => {
            let val_loss = evaluate_loss(model, &val_batches)?;
            Checkpoint::capture(model, vocab, val_loss, 0, 0, RngState::of(cfg.seed, &rng))
        }
    };
    Ok(TrainOutcome { best, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PAD;
    use crate::tensor::Tensor;

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros([1, 3, 4]));
        let loss = cross_entropy(&mut g, logits, &[0, 1, 3], PAD).unwrap();
        assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);

        let mut data = vec![0.0; 12];
        for (r, t) in [0usize, 1, 3].iter().enumerate() {
            data[r * 4 + t] = 20.0;
        }
        let logits = g.constant(Tensor::from_f64([3, 4], &data).unwrap());
        let loss = cross_entropy(&mut g, logits, &[0, 1, 3], PAD).unwrap();
        assert!(g.value(loss).data()[0] < 1e-6);

        let logits = g.constant(crate::layers::test_util::random_tensor(&[6, 4], 1));
        let base = cross_entropy(&mut g, logits, &[0, 1, 3, PAD, PAD, PAD], PAD).unwrap();
        let wide = g.constant(crate::layers::test_util::random_tensor(&[6, 4], 1));
        let same = cross_entropy(&mut g, wide, &[0, 1, 3, PAD, PAD, PAD], PAD).unwrap();
        assert_eq!(g.value(base).data(), g.value(same).data());
        let short = g.slice(logits, 0, 0, 3).unwrap();
        let unpadded = cross_entropy(&mut g, short, &[0, 1, 3], PAD).unwrap();
        assert_eq!(g.value(base).data(), g.value(unpadded).data());

        let all_pad = cross_entropy(&mut g, logits, &[PAD; 6], PAD);
        assert!(matches!(all_pad, Err(Error::Contract(_))));
    }

    fn scalar_store(theta: f64) -> (ParameterStore<f64>, crate::params::ParamId) {
        let mut store = ParameterStore::new();
        let id = store.add("theta", Tensor::scalar(theta)).unwrap();
        (store, id)
    }

    #[test]
    fn sgd_examples() {
        let (mut store, id) = scalar_store(1.0);
        let mut state = OptimizerState::new(&store);
        store.get_mut(id).grad = Some(Tensor::scalar(1.0));
        sgd_step(&mut store, &mut state, &SgdConfig { eta: 0.1, mu: 0.0 }).unwrap();
        assert!((store.value(id).data()[0] - 0.9).abs() < 1e-15);

        let (mut store, id) = scalar_store(1.0);
        let mut state = OptimizerState::new(&store);
        let cfg = SgdConfig { eta: 0.1, mu: 0.9 };
        store.get_mut(id).grad = Some(Tensor::scalar(1.0));
        sgd_step(&mut store, &mut state, &cfg).unwrap();
        assert!((state.velocity(0).unwrap()[0] - 0.1).abs() < 1e-15);
        assert!((store.value(id).data()[0] - 0.9).abs() < 1e-15);
        sgd_step(&mut store, &mut state, &cfg).unwrap();
        assert!((state.velocity(0).unwrap()[0] - 0.19).abs() < 1e-15);
        assert!((store.value(id).data()[0] - 0.71).abs() < 1e-15);

        let (mut store, id) = scalar_store(0.3);
        let mut state = OptimizerState::new(&store);
        store.get_mut(id).grad = Some(Tensor::scalar(0.0));
        sgd_step(&mut store, &mut state, &cfg).unwrap();
        assert_eq!(store.value(id).data()[0], 0.3);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let (mut store, _) = scalar_store(1.0);
        let mut state = OptimizerState::new(&store);
        let err = sgd_step(&mut store, &mut state, &SgdConfig { eta: 0.1, mu: 0.9 });
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_parameters_get_no_velocity() {
        let (mut store, id) = scalar_store(1.0);
        store.set_trainable(id, false);
        let mut state = OptimizerState::new(&store);
        assert_eq!(state.tracked(), 0);
        sgd_step(&mut store, &mut state, &SgdConfig { eta: 0.1, mu: 0.9 }).unwrap();
        assert_eq!(store.value(id).data()[0], 1.0);
    }

    #[test]
    fn scheduler_examples() {
        let cfg = SchedulerConfig { gamma: 0.1, step_size: 20 };
        assert_eq!(scheduled_lr(2e-5, 19, &cfg), 2e-5);
        assert!((scheduled_lr(2e-5, 20, &cfg) - 2e-6).abs() < 1e-20);
        let flat = SchedulerConfig { gamma: 1.0, step_size: 3 };
        assert!((0..50).all(|e| scheduled_lr(0.5, e, &flat) == 0.5));
    }

    /// `L(θ) = ½(θ·x − y)²` averaged over a fixed batch.
    struct LinearToy {
        store: ParameterStore<f64>,
        theta: crate::params::ParamId,
    }

    impl Objective<f64> for LinearToy {
        type Batch = (Vec<f64>, Vec<f64>);

        fn store(&self) -> &ParameterStore<f64> {
            &self.store
        }

        fn store_mut(&mut self) -> &mut ParameterStore<f64> {
            &mut self.store
        }

        fn loss(&self, g: &mut Graph<f64>, (x, y): &Self::Batch) -> Result<Var> {
            let n = x.len();
            let theta = g.param(&self.store, self.theta);
            let xs = g.constant(Tensor::from_f64([n, 1], x)?);
            let ys = g.constant(Tensor::from_f64([n], y)?);
            let pred = g.linear(xs, theta, None)?;
            let pred = g.reshape(pred, &[n])?;
            let r = g.sub(pred, ys)?;
            let sq = g.mul(r, r)?;
            let m = g.mean(sq)?;
            g.scale(m, 0.5)
        }
    }

    fn linear_toy() -> LinearToy {
        let mut store = ParameterStore::new();
        let theta = store.add("theta", Tensor::from_f64([1, 1], &[0.0]).unwrap()).unwrap();
        LinearToy { store, theta }
    }

    #[test]
    fn convex_toy_loss_decreases_every_epoch() {
        let mut toy = linear_toy();
        let batches = vec![(vec![1.0, 2.0, -1.0], vec![2.0, 4.0, -2.0]), (vec![0.5, 3.0], vec![1.0, 6.0])];
        let mut state = OptimizerState::new(&toy.store);
        let sgd = SgdConfig { eta: 0.01, mu: 0.0 };
        let mut prev = evaluate_loss(&toy, &batches).unwrap();
        for _ in 0..5 {
            epoch_train(&mut toy, &batches, &mut state, &sgd).unwrap();
            let now = evaluate_loss(&toy, &batches).unwrap();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn epoch_train_edge_cases() {
        let mut toy = linear_toy();
        let mut state = OptimizerState::new(&toy.store);
        let sgd = SgdConfig { eta: 0.01, mu: 0.9 };
        assert!(epoch_train(&mut toy, &[], &mut state, &sgd).is_err());
        let batch = (vec![1.0, 2.0], vec![3.0, 1.0]);
        let before = evaluate_loss(&toy, std::slice::from_ref(&batch)).unwrap();
        let mean = epoch_train(&mut toy, std::slice::from_ref(&batch), &mut state, &sgd).unwrap();
        assert_eq!(mean, before);
    }

    #[test]
    fn nan_loss_aborts_the_epoch() {
        let mut toy = linear_toy();
        let mut state = OptimizerState::new(&toy.store);
        let batch = (vec![1.0], vec![f64::NAN]);
        let err = epoch_train(&mut toy, &[batch], &mut state, &SgdConfig { eta: 0.1, mu: 0.0 });
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig { eta: 0.0, mu: 0.5 }.validate().is_err());
        assert!(SgdConfig { eta: 0.1, mu: 1.0 }.validate().is_err());
        assert!(SchedulerConfig { gamma: 0.0, step_size: 1 }.validate().is_err());
        assert!(SchedulerConfig { gamma: 0.5, step_size: 0 }.validate().is_err());
        assert!(TwoStageConfig::default().validate().is_ok());
        assert!(TwoStageConfig::fine_tune().validate().is_ok());
    }
}
