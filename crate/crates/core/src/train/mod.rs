//! Mini-batch training with Adam, cross-entropy loss and early stopping on
//! validation loss.

mod backprop;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backprop::{batch_loss, loss_and_grad, update_running_stats, Batch, BnBatchStats, LossAndGrad};

use crate::feat::{apply_cmvn, compute_global_cmvn, CmvnMode, CmvnStats, FeatError, FeatureSequence};
use crate::nn::{classify_frames, ModelWeights, NnError, Real};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("malformed batch: {0}")]
    MalformedBatch(String),
    #[error("sample {sample} has {frames} frames, the model needs at least {min}")]
    SampleTooShort { sample: usize, frames: usize, min: usize },
    #[error("non-finite loss for sample {sample} of the batch")]
    NonFiniteLoss { sample: usize },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feat(#[from] FeatError),
}

/// How features are normalized before training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CmvnKind {
    None,
    #[default]
    Global,
    Utterance,
}

impl std::str::FromStr for CmvnKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "global" => Ok(Self::Global),
            "utterance" => Ok(Self::Utterance),
            other => Err(format!("unknown cmvn mode '{other}' (expected none, global or utterance)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub early_stop_patience: usize,
    pub bn_momentum: f64,
    pub seed: u64,
    pub cmvn_mode: CmvnKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 30,
            early_stop_patience: 10,
            bn_momentum: 0.9,
            seed: 0,
            cmvn_mode: CmvnKind::Global,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch norm momentum must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureSequence,
    pub label: usize,
}

/// Un-normalized training and validation splits.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Adam state for every learnable tensor, in layout order.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new<T: Real>(weights: &ModelWeights<T>, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = weights
            .tensors()
            .into_iter()
            .filter(|(info, _)| info.learnable)
            .map(|(_, s)| s.len())
            .collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step<T: Real>(&mut self, weights: &mut ModelWeights<T>, grads: &ModelWeights<T>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let grad_tensors: Vec<&[T]> = grads
            .tensors()
            .into_iter()
            .filter(|(info, _)| info.learnable)
            .map(|(_, s)| s)
            .collect();
        for (k, ((_, w), g)) in weights.learnable_mut().into_iter().zip(grad_tensors).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..w.len() {
                let gi = g[i].to_f64().expect("finite gradient");
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let upd = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                w[i] -= T::from_f64_lossy(upd);
            }
        }
    }
}

/// Splits `lengths` into shuffled batches of similar length. A trailing
/// single-sample batch is folded into its neighbour since batch statistics
/// over one sample are degenerate.
pub fn make_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    let bucket = batch_size * 8;
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for chunk in idx.chunks(bucket) {
        let mut chunk = chunk.to_vec();
        chunk.sort_by_key(|&i| lengths[i]);
        batches.extend(chunk.chunks(batch_size).map(|c| c.to_vec()));
    }
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_error_rate: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_error_rate";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6}",
            self.epoch, self.train_loss, self.val_loss, self.val_error_rate
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub weights: ModelWeights<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
    /// Global statistics from the training split when `cmvn_mode` is global.
    pub cmvn: Option<CmvnStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub error_rate: f64,
    pub correct: usize,
    pub total: usize,
}

/// Inference-mode loss and error rate.
pub fn evaluate<T: Real>(weights: &ModelWeights<T>, examples: &[Example]) -> Result<EvalReport, TrainError> {
    let results: Vec<(f64, bool)> = examples
        .par_iter()
        .map(|ex| {
            let post = classify_frames(ex.features.frames(), weights)?;
            let p = post.probs[ex.label].to_f64().unwrap_or(0.0);
            Ok((-(p.max(1e-12)).ln(), post.argmax() == ex.label))
        })
        .collect::<Result<_, TrainError>>()?;
    let total = results.len();
    let correct = results.iter().filter(|r| r.1).count();
    let loss = results.iter().map(|r| r.0).sum::<f64>() / total.max(1) as f64;
    Ok(EvalReport {
        loss,
        error_rate: if total == 0 { 0.0 } else { 1.0 - correct as f64 / total as f64 },
        correct,
        total,
    })
}

/// Normalizes both splits: global statistics come from `train` only.
pub fn normalize_splits(
    train: &[Example],
    val: &[Example],
    kind: CmvnKind,
) -> Result<(Vec<Example>, Vec<Example>, Option<CmvnStats>), TrainError> {
    let stats = match kind {
        CmvnKind::Global => {
            let seqs: Vec<FeatureSequence> = train.iter().map(|e| e.features.clone()).collect();
            Some(compute_global_cmvn(&seqs)?)
        }
        _ => None,
    };
    let norm = |exs: &[Example]| -> Result<Vec<Example>, TrainError> {
        exs.iter()
            .map(|e| {
                let mode = match (kind, &stats) {
                    (CmvnKind::Global, Some(s)) => CmvnMode::Global(s),
                    (CmvnKind::Utterance, _) => CmvnMode::Utterance,
                    _ => CmvnMode::None,
                };
                Ok(Example {
                    features: apply_cmvn(&e.features, mode)?,
                    label: e.label,
                })
            })
            .collect()
    };
    Ok((norm(train)?, norm(val)?, stats))
}

/// Runs one optimisation step on `batch` and returns its training loss.
pub fn train_step(
    weights: &mut ModelWeights<f32>,
    adam: &mut Adam,
    batch: &Batch,
    bn_momentum: f32,
) -> Result<f64, TrainError> {
    let lg = loss_and_grad(batch, weights)?;
    adam.step(weights, &lg.grads);
    update_running_stats(weights, &lg.bn_stats, bn_momentum);
    Ok(f64::from(lg.loss))
}

/// Normalizes the splits per `cfg.cmvn_mode` and trains. `on_epoch` sees
/// every epoch's metrics as soon as they are known.
pub fn train(
    init: ModelWeights<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let (train_set, val_set, cmvn) = normalize_splits(&data.train, &data.val, cfg.cmvn_mode)?;
    let mut weights = init;
    let mut adam = Adam::new(&weights, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lengths: Vec<usize> = train_set.iter().map(|e| e.features.len()).collect();
    let momentum = cfg.bn_momentum as f32;

    let mut best = (f64::INFINITY, 0usize, weights.clone());
    let mut since_best = 0;
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in make_batches(&lengths, cfg.batch_size, &mut rng) {
            let seqs: Vec<&FeatureSequence> = idx.iter().map(|&i| &train_set[i].features).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train_set[i].label).collect();
            let batch = Batch::from_sequences(&seqs, &labels)?;
            let loss = train_step(&mut weights, &mut adam, &batch, momentum).map_err(|e| match e {
                TrainError::NonFiniteLoss { sample } => TrainError::NonFiniteLoss { sample: idx[sample] },
                TrainError::SampleTooShort { sample, frames, min } => TrainError::SampleTooShort {
                    sample: idx[sample],
                    frames,
                    min,
                },
                other => other,
            })?;
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let val = evaluate(&weights, &val_set)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss: val.loss,
            val_error_rate: val.error_rate,
        };
        on_epoch(&m);
        history.push(m);
        if val.loss < best.0 {
            best = (val.loss, epoch, weights.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        weights: best.2,
        best_epoch: best.1,
        history,
        cmvn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn batches_cover_every_index_once() {
        let lengths: Vec<usize> = (0..100).map(|i| 80 + (i * 37) % 150).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&lengths, 32, &mut rng);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() >= 2 && b.len() <= 33));
    }

    #[test]
    fn lone_trailing_sample_is_merged() {
        let lengths = vec![100; 33];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = make_batches(&lengths, 32, &mut rng);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 33);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cmvn_kind_parses() {
        assert_eq!("global".parse::<CmvnKind>().unwrap(), CmvnKind::Global);
        assert!("both".parse::<CmvnKind>().is_err());
    }

    proptest! {
        #[test]
        fn batch_sizes_bounded(n in 2usize..200, bs in 2usize..40, seed in 0u64..50) {
            let lengths: Vec<usize> = (0..n).map(|i| 60 + i % 17).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batches = make_batches(&lengths, bs, &mut rng);
            prop_assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), n);
            prop_assert!(batches.iter().all(|b| b.len() >= 2 && b.len() <= bs + 1));
        }
    }
}
