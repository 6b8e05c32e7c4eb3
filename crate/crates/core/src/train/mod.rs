//! Optimizer, schedule, clipping and the epoch loop with early stopping.

mod checkpoint;
mod optim;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::{augment_flip, soft_labels, DataError};
use crate::eval::{confusion, prf1, Protocol};
use crate::losses::{composite_loss, LossConfig};
use crate::models::ModelInstance;
use crate::nn::{Mode, ParamStore};
use crate::prepared::{predict, PreparedSet};
use crate::rng::{derive_seed, Pcg32};
use crate::tensor::{Graph, Tensor, TensorError};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_gradients, cosine_lr, global_norm, AdamParams, AdamState, ADAM_EPS, BETA1, BETA2};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite value in {op} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        op: &'static str,
    },
    #[error("invalid training setup: {0}")]
    Invalid(String),
}

impl TrainError {
    /// NaN/Inf anywhere in the numerics.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient(_)
                | TrainError::NonFiniteLoss { .. }
                | TrainError::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub eta_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Overrides the seed of the dropout stream only.
    pub dropout_seed: Option<u64>,
    pub augment: bool,
    pub soft_labels: bool,
    /// Stop as soon as validation F1 reaches this value.
    pub target_f1: Option<f64>,
    pub val_threshold: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 128,
            max_epochs: 100,
            patience: 15,
            clip_norm: None,
            eta_min: 1e-6,
            weight_decay: 0.0,
            seed: 0,
            dropout_seed: None,
            augment: true,
            soft_labels: true,
            target_f1: None,
            val_threshold: 0.5,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        let bad = |m: &str| Err(TrainError::Invalid(m.to_string()));
        if !(self.lr > 0.0) || !(self.eta_min >= 0.0) || self.eta_min > self.lr {
            return bad("need lr > 0 and 0 <= eta_min <= lr");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if self.patience > self.max_epochs {
            return bad("patience must not exceed max_epochs");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) || !(self.weight_decay >= 0.0) {
            return bad("clip_norm must be positive and weight_decay nonnegative");
        }
        Ok(())
    }
}

/// Seed used to initialize model weights for a run seeded with `seed`.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, 0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub wbce: f64,
    pub dice: f64,
    pub focal: f64,
    pub val_f1: f64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,loss,wbce,dice,focal,val_f1";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.loss, r.wbce, r.dice, r.focal, r.val_f1
        ));
    }
    s
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub adam: AdamState,
    pub best_f1: f64,
    pub best_epoch: Option<usize>,
    pub best_store: Option<ParamStore<f32>>,
    pub since_best: usize,
    pub reached_target: Option<usize>,
    pub finished: bool,
    pub data_rng: Pcg32,
    pub aug_rng: Pcg32,
    pub dropout_rng: Pcg32,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            adam: AdamState::new(),
            best_f1: f64::NEG_INFINITY,
            best_epoch: None,
            best_store: None,
            since_best: 0,
            reached_target: None,
            finished: false,
            data_rng: Pcg32::derived(cfg.seed, 1),
            aug_rng: Pcg32::derived(cfg.seed, 2),
            dropout_rng: Pcg32::derived(cfg.dropout_seed.unwrap_or(cfg.seed), 3),
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best_f1: f64,
    pub best_epoch: Option<usize>,
    /// First epoch whose validation F1 reached `target_f1`.
    pub reached_target: Option<usize>,
}

pub struct Trainer {
    pub model: ModelInstance<f32>,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model: ModelInstance<f32>, config: TrainConfig) -> TrainResult<Self> {
        config.validate()?;
        let state = TrainState::new(&config);
        Ok(Self { model, config, state })
    }

    pub fn from_parts(model: ModelInstance<f32>, config: TrainConfig, state: TrainState) -> TrainResult<Self> {
        config.validate()?;
        Ok(Self { model, config, state })
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    fn train_step(&mut self, train: &PreparedSet, chunk: &[usize], epoch: usize, batch: usize, lr: f64) -> TrainResult<[f64; 4]> {
        let (h, w, hw) = (train.h, train.w, train.hw());
        let numerical = |e: TensorError| match e {
            TensorError::NonFinite { op } => TrainError::NonFiniteLoss { epoch, batch, op },
            other => TrainError::Tensor(other),
        };
        let mut x = train.batch(chunk)?;
        let per_x = x.len() / chunk.len();
        let mut targets = Vec::with_capacity(chunk.len() * hw);
        for (k, &i) in chunk.iter().enumerate() {
            let mut y = train.sample_y(i).to_vec();
            if self.config.augment {
                let xs = &mut x.data_mut()[k * per_x..(k + 1) * per_x];
                augment_flip(xs, &mut y, h, w, &mut self.state.aug_rng);
            }
            if self.config.soft_labels {
                targets.extend(soft_labels(&y, &mut self.state.aug_rng));
            } else {
                targets.extend(y.iter().map(|&v| f32::from(v)));
            }
        }
        let targets = Tensor::new(vec![chunk.len(), 1, h, w], targets)?;

        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self
            .model
            .forward(&mut g, xv, Mode::Train, &mut self.state.dropout_rng)
            .map_err(numerical)?;
        let loss = composite_loss(&mut g, out.logits, &targets, &self.config.loss).map_err(numerical)?;
        let values = loss.values(&g);
        let grads = g.backward(loss.total).map_err(numerical)?;
        let mut flat: Vec<Tensor<f32>> = Vec::new();
        for (name, p) in self.model.store.params() {
            let var = out.record.param_vars.get(name).copied();
            flat.push(match var.and_then(|v| grads.get(v)) {
                Some(t) => t.clone(),
                None => Tensor::zeros(p.shape()),
            });
        }
        if let Some(max) = self.config.clip_norm {
            clip_gradients(&mut flat, max);
        }
        let hp = AdamParams {
            lr,
            weight_decay: self.config.weight_decay,
        };
        self.state.adam.step(
            self.model.store.params_mut().zip(flat.iter()).map(|((n, p), g)| (n, p, g)),
            hp,
        )?;
        self.model.store.apply_bn_updates(&out.record.bn_updates)?;
        Ok([values.total, values.wbce, values.dice, values.focal])
    }

    /// Validation F1 at the fixed threshold, clean protocol.
    pub fn validation_f1(&self, val: &PreparedSet) -> TrainResult<f64> {
        let probs = predict(&self.model, val, self.config.batch_size)?;
        let c = confusion(&probs, &val.prev, &val.y, Protocol::Clean, self.config.val_threshold)
            .map_err(|e| TrainError::Invalid(e.to_string()))?;
        Ok(prf1(&c).2)
    }

    /// Run one epoch and update early-stopping state.
    pub fn run_epoch(&mut self, train: &PreparedSet, val: &PreparedSet) -> TrainResult<EpochRecord> {
        if self.state.finished {
            return Err(TrainError::Invalid("training already finished".into()));
        }
        if train.is_empty() || val.is_empty() {
            return Err(TrainError::Invalid("empty training or validation split".into()));
        }
        let epoch = self.state.epoch;
        let lr = cosine_lr(epoch, self.config.max_epochs, self.config.lr, self.config.eta_min)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.state.data_rng);
        let mut sums = [0.0f64; 4];
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let v = self.train_step(train, chunk, epoch, b, lr)?;
            for (s, x) in sums.iter_mut().zip(v) {
                *s += x * chunk.len() as f64;
            }
        }
        let n = train.len() as f64;
        let val_f1 = self.validation_f1(val)?;
        let rec = EpochRecord {
            epoch,
            lr,
            loss: sums[0] / n,
            wbce: sums[1] / n,
            dice: sums[2] / n,
            focal: sums[3] / n,
            val_f1,
        };
        let st = &mut self.state;
        st.history.push(rec);
        if val_f1 > st.best_f1 {
            st.best_f1 = val_f1;
            st.best_epoch = Some(epoch);
            st.best_store = Some(self.model.store.clone());
            st.since_best = 0;
        } else {
            st.since_best += 1;
        }
        if st.reached_target.is_none() && self.config.target_f1.is_some_and(|t| val_f1 >= t) {
            st.reached_target = Some(epoch);
        }
        st.epoch += 1;
        st.finished = st.since_best >= self.config.patience
            || st.reached_target.is_some()
            || st.epoch >= self.config.max_epochs;
        Ok(rec)
    }

    pub fn run(&mut self, train: &PreparedSet, val: &PreparedSet) -> TrainResult<()> {
        while !self.state.finished {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    /// Hand back the best-validation model and the run summary.
    pub fn finish(mut self) -> (ModelInstance<f32>, FitOutcome) {
        if let Some(best) = self.state.best_store.take() {
            self.model.store = best;
        }
        let outcome = FitOutcome {
            history: self.state.history,
            best_f1: self.state.best_f1,
            best_epoch: self.state.best_epoch,
            reached_target: self.state.reached_target,
        };
        (self.model, outcome)
    }
}

/// Train until early stopping, the epoch budget or `target_f1`.
pub fn fit(
    model: ModelInstance<f32>,
    train: &PreparedSet,
    val: &PreparedSet,
    config: &TrainConfig,
) -> TrainResult<(ModelInstance<f32>, FitOutcome)> {
    let mut t = Trainer::new(model, config.clone())?;
    t.run(train, val)?;
    Ok(t.finish())
}
