//! Adam optimizer and the two training stages: supervised pretraining on the
//! full training distribution, and fine-tuning on the retrieved local
//! manifold with the combined supervised + preference objective (or its
//! supervised-only ablation).
//!
//! Both stages are bit-reproducible: seeded shuffles, sequential gradient
//! reduction, and a deterministic optimizer. Reference logits are computed
//! once per retrieved record at the start of fine-tuning since the reference
//! policy is frozen.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{EapoError, Result};
use crate::model::{Classifier, ReferencePolicy};
use crate::objectives::{eapo_batch, BaseLoss, EapoWeights, PairItem, SftItem};
use crate::retrieval::{ExtremeSubset, LocalManifold};

/// Bias-corrected Adam state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    /// Canonical constants: beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_constants(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0) {
            return Err(EapoError::InvalidConfig(
                "adam betas must lie in (0, 1)".into(),
            ));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(EapoError::InvalidConfig(
                "adam epsilon must be positive".into(),
            ));
        }
        Ok(Self {
            beta1,
            beta2,
            epsilon,
            ..Self::new(len)
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(EapoError::DimensionMismatch {
                expected: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
            return Err(EapoError::NonFiniteInput(format!("gradient value {bad}")));
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(EapoError::InvalidConfig(format!(
                "learning rate must be nonnegative, got {lr}"
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Optional periodic checkpointing during a training run: every `interval`
/// completed epochs the current model is written to
/// `<dir>/<prefix>_epoch_NNNN.json` in the checkpoint format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSpec {
    pub dir: std::path::PathBuf,
    pub interval: usize,
}

impl CheckpointSpec {
    fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(EapoError::InvalidConfig(
                "checkpoint interval must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn write(&self, prefix: &str, epoch: usize, model: &Classifier) -> Result<()> {
        if !(epoch + 1).is_multiple_of(self.interval) {
            return Ok(());
        }
        fs::create_dir_all(&self.dir).map_err(|e| EapoError::Io {
            path: self.dir.display().to_string(),
            source: e,
        })?;
        model.save_checkpoint(&self.dir.join(format!("{prefix}_epoch_{:04}.json", epoch + 1)))
    }
}

/// Stage-1 configuration: empirical risk minimization over the full
/// training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub loss: BaseLoss,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub checkpoint: Option<CheckpointSpec>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: BaseLoss::Focal(Default::default()),
            epochs: 50,
            learning_rate: 0.005,
            batch_size: 256,
            checkpoint: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(EapoError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(EapoError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(EapoError::InvalidConfig(
                "pretrain learning rate must be positive".into(),
            ));
        }
        if let BaseLoss::Focal(p) = self.loss {
            p.validate()?;
        }
        if let Some(spec) = &self.checkpoint {
            spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Eapo,
    SftOnly,
}

/// Stage-2 configuration: retrieval width `k` plus the combined-objective
/// weights and schedule. `SftOnly` reproduces the supervised-only ablation
/// and is defined as exactly the combined objective with both preference
/// weights at zero. Retrieval is transductive over the full unlabeled test
/// set unless `query_subsample` caps the number of query points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub k: usize,
    pub weights: EapoWeights,
    pub sft_loss: BaseLoss,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mode: FinetuneMode,
    pub query_subsample: Option<usize>,
    pub checkpoint: Option<CheckpointSpec>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            k: 5,
            weights: EapoWeights::default(),
            sft_loss: BaseLoss::Focal(Default::default()),
            epochs: 100,
            learning_rate: 1e-4,
            batch_size: 256,
            mode: FinetuneMode::Eapo,
            query_subsample: None,
            checkpoint: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(EapoError::ZeroK);
        }
        if self.epochs == 0 {
            return Err(EapoError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(EapoError::InvalidConfig("batch_size must be >= 1".into()));
        }
        // Zero is allowed: a null update leaves the model unchanged.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(EapoError::InvalidConfig(
                "finetune learning rate must be nonnegative".into(),
            ));
        }
        if self.query_subsample == Some(0) {
            return Err(EapoError::InvalidConfig(
                "query_subsample must be >= 1 when set".into(),
            ));
        }
        if let Some(spec) = &self.checkpoint {
            spec.validate()?;
        }
        self.weights.validate()?;
        if let BaseLoss::Focal(p) = self.sft_loss {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub metric: Option<f64>,
}

/// Per-epoch training record plus any warnings surfaced during the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub warnings: Vec<String>,
}

impl TrainHistory {
    /// Delimited (epoch, loss, metric) table.
    pub fn export_table(&self, path: &Path, delimiter: char) -> Result<()> {
        let d = delimiter;
        let mut out = format!("epoch{d}loss{d}metric\n");
        for e in &self.epochs {
            let metric = e.metric.map_or_else(String::new, |m| m.to_string());
            let _ = writeln!(out, "{}{d}{}{d}{metric}", e.epoch, e.mean_loss);
        }
        fs::write(path, out).map_err(|e| EapoError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Stage 1: seeded-shuffle mini-batch Adam on the selected supervised loss.
pub fn pretrain(
    mut model: Classifier,
    train: &Dataset,
    cfg: &PretrainConfig,
) -> Result<(Classifier, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(EapoError::EmptyDataset);
    }
    if train.dim() != model.dim() {
        return Err(EapoError::DimensionMismatch {
            expected: model.dim(),
            got: train.dim(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.parameters().len());
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let n = train.len() as f64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = vec![0.0; model.parameters().len()];
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let rec = &train.records()[idx];
                let cache = model.forward_cached(&rec.features)?;
                let loss = cfg.loss.eval(cache.logit(), rec.label)?;
                if !loss.value.is_finite() {
                    return Err(EapoError::NonFiniteLoss {
                        epoch,
                        step,
                        detail: format!("record {idx} loss {}", loss.value),
                    });
                }
                loss_sum += loss.value;
                cache.accumulate_backward(scale * loss.dvalue_dlogit, &mut grad);
            }
            adam.step(model.parameters_mut(), &grad, cfg.learning_rate)?;
        }
        history.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n,
            metric: None,
        });
        if let Some(spec) = &cfg.checkpoint {
            spec.write("pretrain", epoch, &model)?;
        }
    }
    model.record_seed(cfg.seed);
    Ok((model, history))
}

/// Stage 2: fine-tune on the local manifold. Each step takes one mini-batch
/// of manifold records serving both the supervised term and the local
/// preference term, plus an extreme-pair mini-batch (the full subset when it
/// fits in one batch), and applies a single Adam update.
pub fn finetune(
    mut model: Classifier,
    reference: &ReferencePolicy,
    manifold: &LocalManifold,
    extreme: &ExtremeSubset,
    cfg: &FinetuneConfig,
) -> Result<(Classifier, TrainHistory)> {
    cfg.validate()?;
    if manifold.is_empty() {
        return Err(EapoError::EmptyManifold);
    }
    if reference.dim() != model.dim() {
        return Err(EapoError::DimensionMismatch {
            expected: model.dim(),
            got: reference.dim(),
        });
    }
    if manifold.records()[0].features.len() != model.dim() {
        return Err(EapoError::DimensionMismatch {
            expected: model.dim(),
            got: manifold.records()[0].features.len(),
        });
    }

    let mut history = TrainHistory::default();
    if extreme.is_empty() {
        history
            .warnings
            .push("extreme subset is empty; its preference term contributes zero".into());
    }

    let weights = match cfg.mode {
        FinetuneMode::Eapo => cfg.weights,
        FinetuneMode::SftOnly => EapoWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..cfg.weights
        },
    };

    // The reference is frozen, so its logits are fixed for the whole run.
    let ref_local: Vec<f64> = manifold
        .records()
        .iter()
        .map(|r| reference.logit(&r.features))
        .collect::<Result<_>>()?;
    let ref_extreme: Vec<f64> = extreme
        .records()
        .iter()
        .map(|r| reference.logit(&r.features))
        .collect::<Result<_>>()?;

    // Independent shuffle streams keep the manifold schedule identical
    // whether or not the extreme subset is populated.
    let mut rng_local = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng_extreme = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_extreme.set_stream(1);

    let mut adam = AdamState::new(model.parameters().len());
    let mut local_order: Vec<usize> = (0..manifold.len()).collect();
    let mut extreme_order: Vec<usize> = (0..extreme.len()).collect();
    let extreme_chunks = extreme_order.chunks(cfg.batch_size).count().max(1);

    for epoch in 0..cfg.epochs {
        local_order.shuffle(&mut rng_local);
        extreme_order.shuffle(&mut rng_extreme);
        let mut value_sum = 0.0;
        let mut steps = 0usize;

        for (step, batch) in local_order.chunks(cfg.batch_size).enumerate() {
            let extreme_batch: &[usize] = if extreme_order.is_empty() {
                &[]
            } else if extreme_order.len() <= cfg.batch_size {
                &extreme_order
            } else {
                extreme_order
                    .chunks(cfg.batch_size)
                    .nth(step % extreme_chunks)
                    .unwrap_or(&[])
            };

            let mut grad = vec![0.0; model.parameters().len()];
            let value;
            {
                let mut local_caches = Vec::with_capacity(batch.len());
                let mut sft_items = Vec::with_capacity(batch.len());
                let mut local_pairs = Vec::with_capacity(batch.len());
                for &idx in batch {
                    let rec = &manifold.records()[idx];
                    let cache = model.forward_cached(&rec.features)?;
                    sft_items.push(SftItem {
                        logit: cache.logit(),
                        label: rec.label,
                    });
                    local_pairs.push(PairItem {
                        logit_theta: cache.logit(),
                        logit_ref: ref_local[idx],
                        y_plus: rec.label,
                    });
                    local_caches.push(cache);
                }
                let mut extreme_caches = Vec::with_capacity(extreme_batch.len());
                let mut extreme_pairs = Vec::with_capacity(extreme_batch.len());
                for &idx in extreme_batch {
                    let rec = &extreme.records()[idx];
                    let cache = model.forward_cached(&rec.features)?;
                    extreme_pairs.push(PairItem {
                        logit_theta: cache.logit(),
                        logit_ref: ref_extreme[idx],
                        y_plus: rec.label,
                    });
                    extreme_caches.push(cache);
                }

                let out = eapo_batch(
                    &sft_items,
                    &local_pairs,
                    &extreme_pairs,
                    &weights,
                    &cfg.sft_loss,
                )?;
                if !out.value.is_finite() {
                    return Err(EapoError::NonFiniteLoss {
                        epoch,
                        step,
                        detail: format!("combined objective {}", out.value),
                    });
                }
                for (i, cache) in local_caches.iter().enumerate() {
                    cache.accumulate_backward(out.sft_grads[i] + out.local_grads[i], &mut grad);
                }
                for (j, cache) in extreme_caches.iter().enumerate() {
                    cache.accumulate_backward(out.extreme_grads[j], &mut grad);
                }
                value = out.value;
            }
            adam.step(model.parameters_mut(), &grad, cfg.learning_rate)?;
            value_sum += value;
            steps += 1;
        }

        history.epochs.push(EpochStats {
            epoch,
            mean_loss: value_sum / steps as f64,
            metric: None,
        });
        if let Some(spec) = &cfg.checkpoint {
            spec.write("finetune", epoch, &model)?;
        }
    }
    model.record_seed(cfg.seed);
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Record, SyntheticConfig};
    use crate::evaluation::roc_auc;
    use crate::model::ModelKind;
    use crate::retrieval::{build_local_manifold, extract_extreme};
    use rand::Rng;

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut state = AdamState::new(3);
        let mut params = vec![1.0, -2.0, 0.5];
        state.step(&mut params, &[0.0, 0.0, 0.0], 0.1).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut state = AdamState::new(2);
        let mut params = vec![0.0, 0.0];
        state.step(&mut params, &[0.5, -3.0], 0.01).unwrap();
        assert!((params[0] - (-0.01)).abs() < 1e-6);
        assert!((params[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_two_step_hand_unrolled() {
        let mut state = AdamState::new(1);
        let mut params = vec![0.0];
        state.step(&mut params, &[1.0], 0.1).unwrap();
        state.step(&mut params, &[1.0], 0.1).unwrap();
        assert!((params[0] - (-0.2)).abs() < 1e-6, "got {}", params[0]);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut state = AdamState::new(2);
        let mut params = vec![0.0, 0.0];
        assert!(state.step(&mut params, &[1.0], 0.1).is_err());
        assert!(state.step(&mut params, &[f64::NAN, 0.0], 0.1).is_err());
        assert!(AdamState::with_constants(2, 1.5, 0.999, 1e-8).is_err());
    }

    fn separable_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        while records.len() < n {
            let x = [rng.random_range(-1.0..1.0f64), rng.random_range(-1.0..1.0f64)];
            let margin = x[0] + x[1];
            if margin.abs() < 0.2 {
                continue;
            }
            records.push(Record {
                features: x.to_vec(),
                label: u8::from(margin > 0.0),
                intensity: None,
                index: records.len(),
            });
        }
        Dataset::new(2, records).unwrap()
    }

    #[test]
    fn pretrain_is_deterministic() {
        let train = separable_dataset(200, 40);
        let cfg = PretrainConfig {
            loss: BaseLoss::Bce,
            epochs: 5,
            learning_rate: 0.01,
            batch_size: 32,
            checkpoint: None,
            seed: 9,
        };
        let init = Classifier::init(ModelKind::Mlp, 2, &[4], 1).unwrap();
        let (a, ha) = pretrain(init.clone(), &train, &cfg).unwrap();
        let (b, hb) = pretrain(init, &train, &cfg).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_eq!(ha, hb);
        assert_eq!(ha.epochs.len(), cfg.epochs);
    }

    #[test]
    fn pretrain_separates_separable_data() {
        let train = separable_dataset(300, 41);
        let cfg = PretrainConfig {
            loss: BaseLoss::Bce,
            epochs: 50,
            learning_rate: 0.05,
            batch_size: 64,
            checkpoint: None,
            seed: 2,
        };
        let init = Classifier::init(ModelKind::Logistic, 2, &[], 3).unwrap();
        let (model, history) = pretrain(init, &train, &cfg).unwrap();
        let scores: Vec<f64> = train
            .records()
            .iter()
            .map(|r| model.forward(&r.features).unwrap())
            .collect();
        let labels: Vec<u8> = train.records().iter().map(|r| r.label).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!(auc > 0.99, "train auc {auc}");
        // Converged: mean loss non-increasing over the last 10 epochs.
        let tail = &history.epochs[history.epochs.len() - 10..];
        for pair in tail.windows(2) {
            assert!(pair[1].mean_loss <= pair[0].mean_loss + 1e-3);
        }
    }

    #[test]
    fn interval_checkpoints_are_written_and_loadable() {
        let train = separable_dataset(60, 45);
        let dir = tempfile::tempdir().unwrap();
        let cfg = PretrainConfig {
            loss: BaseLoss::Bce,
            epochs: 5,
            learning_rate: 0.01,
            batch_size: 16,
            checkpoint: Some(CheckpointSpec {
                dir: dir.path().to_path_buf(),
                interval: 2,
            }),
            seed: 3,
        };
        let init = Classifier::init(ModelKind::Logistic, 2, &[], 4).unwrap();
        let (trained, _) = pretrain(init, &train, &cfg).unwrap();
        // Epochs 2 and 4 hit the interval.
        let written: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(written.len(), 2, "{written:?}");
        assert!(written.contains(&"pretrain_epoch_0002.json".to_string()));
        assert!(written.contains(&"pretrain_epoch_0004.json".to_string()));
        let mid = Classifier::load_checkpoint(&dir.path().join("pretrain_epoch_0004.json")).unwrap();
        assert_eq!(mid.dim(), trained.dim());
        assert_ne!(mid.parameters(), trained.parameters());
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        // An absurd learning rate blows the parameters up; the run must
        // abort with an error rather than emit non-finite checkpoints.
        let train = separable_dataset(100, 42);
        let cfg = PretrainConfig {
            loss: BaseLoss::Bce,
            epochs: 50,
            learning_rate: 1e200,
            batch_size: 16,
            checkpoint: None,
            seed: 1,
        };
        let init = Classifier::init(ModelKind::Mlp, 2, &[4], 1).unwrap();
        let err = pretrain(init, &train, &cfg).unwrap_err();
        assert!(matches!(
            err,
            EapoError::NonFiniteLoss { .. } | EapoError::NonFiniteInput(_)
        ));
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let ds = Dataset::new(2, vec![]).unwrap();
        let model = Classifier::init(ModelKind::Logistic, 2, &[], 0).unwrap();
        assert!(matches!(
            pretrain(model, &ds, &PretrainConfig::default()),
            Err(EapoError::EmptyDataset)
        ));
    }

    fn finetune_fixture(seed: u64) -> (Classifier, ReferencePolicy, LocalManifold, ExtremeSubset) {
        let cfg = SyntheticConfig {
            n_train: 150,
            n_test: 40,
            positive_rate: 0.3,
            seed,
            ..Default::default()
        };
        let (train, test) = generate_synthetic(&cfg).unwrap();
        let queries: Vec<Vec<f64>> = test.records().iter().map(|r| r.features.clone()).collect();
        let manifold = build_local_manifold(&queries, &train, 4).unwrap();
        let extreme = extract_extreme(&manifold);
        assert!(!extreme.is_empty());
        let model = Classifier::init(ModelKind::Mlp, cfg.dim, &[4], seed).unwrap();
        let reference = model.freeze_reference();
        (model, reference, manifold, extreme)
    }

    #[test]
    fn finetune_is_deterministic() {
        let (model, reference, manifold, extreme) = finetune_fixture(49);
        let cfg = FinetuneConfig {
            epochs: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let (a, ha) = finetune(model.clone(), &reference, &manifold, &extreme, &cfg).unwrap();
        let (b, hb) = finetune(model, &reference, &manifold, &extreme, &cfg).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_eq!(ha, hb);
    }

    #[test]
    fn finetune_zero_lr_is_identity() {
        let (model, reference, manifold, extreme) = finetune_fixture(50);
        let before = model.parameters().to_vec();
        let cfg = FinetuneConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 16,
            ..Default::default()
        };
        let (out, _) = finetune(model, &reference, &manifold, &extreme, &cfg).unwrap();
        assert_eq!(out.parameters(), before.as_slice());
    }

    #[test]
    fn finetune_empty_extreme_matches_lambda2_zero() {
        let (model, reference, manifold, extreme) = finetune_fixture(51);
        // An empty subset extracted from an all-negative manifold.
        let empty = {
            let all_negative: Vec<Record> = manifold
                .records()
                .iter()
                .map(|r| Record {
                    features: r.features.clone(),
                    label: 0,
                    intensity: None,
                    index: r.index,
                })
                .collect();
            let m = LocalManifold::from_records(all_negative, 1).unwrap();
            extract_extreme(&m)
        };
        assert!(empty.is_empty());

        let with_weight = FinetuneConfig {
            epochs: 4,
            batch_size: 16,
            ..Default::default()
        };
        let zero_weight = FinetuneConfig {
            weights: EapoWeights {
                lambda2: 0.0,
                ..Default::default()
            },
            ..with_weight.clone()
        };
        let (a, ha) = finetune(
            model.clone(),
            &reference,
            &manifold,
            &empty,
            &with_weight,
        )
        .unwrap();
        let (b, _) = finetune(model, &reference, &manifold, &extreme, &zero_weight).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert!(!ha.warnings.is_empty());
    }

    #[test]
    fn sft_only_equals_zero_lambdas() {
        let (model, reference, manifold, extreme) = finetune_fixture(52);
        let eapo_cfg = FinetuneConfig {
            weights: EapoWeights {
                beta: 0.1,
                lambda1: 0.0,
                lambda2: 0.0,
            },
            mode: FinetuneMode::Eapo,
            epochs: 5,
            batch_size: 16,
            ..Default::default()
        };
        let sft_cfg = FinetuneConfig {
            weights: EapoWeights::default(),
            mode: FinetuneMode::SftOnly,
            ..eapo_cfg.clone()
        };
        let (a, _) = finetune(model.clone(), &reference, &manifold, &extreme, &eapo_cfg).unwrap();
        let (b, _) = finetune(model, &reference, &manifold, &extreme, &sft_cfg).unwrap();
        assert_eq!(a.parameters(), b.parameters());
    }

    #[test]
    fn finetune_leaves_reference_frozen() {
        let (model, reference, manifold, extreme) = finetune_fixture(53);
        let ref_before = reference.snapshot().parameters().to_vec();
        let cfg = FinetuneConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let (out, _) = finetune(model, &reference, &manifold, &extreme, &cfg).unwrap();
        assert_eq!(reference.snapshot().parameters(), ref_before.as_slice());
        assert_ne!(out.parameters(), ref_before.as_slice());
    }

    #[test]
    fn finetune_rejects_empty_manifold() {
        let (model, reference, _, extreme) = finetune_fixture(54);
        let empty = LocalManifold::from_records(vec![], 0).unwrap();
        let out = finetune(model, &reference, &empty, &extreme, &FinetuneConfig::default());
        assert!(matches!(out, Err(EapoError::EmptyManifold)));
    }

    /// Full-batch combined objective of `model` on a manifold + extreme pair,
    /// the same quantity one optimizer step sees.
    fn full_batch_objective(
        model: &Classifier,
        reference: &ReferencePolicy,
        manifold: &LocalManifold,
        extreme: &ExtremeSubset,
        weights: &EapoWeights,
        base: &BaseLoss,
    ) -> f64 {
        let mut sft = Vec::new();
        let mut local = Vec::new();
        let mut extreme_pairs = Vec::new();
        for rec in manifold.records() {
            let z = model.forward(&rec.features).unwrap();
            let zr = reference.logit(&rec.features).unwrap();
            sft.push(SftItem {
                logit: z,
                label: rec.label,
            });
            local.push(PairItem {
                logit_theta: z,
                logit_ref: zr,
                y_plus: rec.label,
            });
        }
        for rec in extreme.records() {
            extreme_pairs.push(PairItem {
                logit_theta: model.forward(&rec.features).unwrap(),
                logit_ref: reference.logit(&rec.features).unwrap(),
                y_plus: rec.label,
            });
        }
        eapo_batch(&sft, &local, &extreme_pairs, weights, base)
            .unwrap()
            .value
    }

    /// The assembled parameter gradient of one full-batch step.
    fn full_batch_gradient(
        model: &Classifier,
        reference: &ReferencePolicy,
        manifold: &LocalManifold,
        extreme: &ExtremeSubset,
        weights: &EapoWeights,
        base: &BaseLoss,
    ) -> Vec<f64> {
        let mut sft = Vec::new();
        let mut local = Vec::new();
        let mut extreme_pairs = Vec::new();
        let mut caches = Vec::new();
        for rec in manifold.records() {
            let cache = model.forward_cached(&rec.features).unwrap();
            let zr = reference.logit(&rec.features).unwrap();
            sft.push(SftItem {
                logit: cache.logit(),
                label: rec.label,
            });
            local.push(PairItem {
                logit_theta: cache.logit(),
                logit_ref: zr,
                y_plus: rec.label,
            });
            caches.push(cache);
        }
        let mut extreme_caches = Vec::new();
        for rec in extreme.records() {
            let cache = model.forward_cached(&rec.features).unwrap();
            extreme_pairs.push(PairItem {
                logit_theta: cache.logit(),
                logit_ref: reference.logit(&rec.features).unwrap(),
                y_plus: rec.label,
            });
            extreme_caches.push(cache);
        }
        let out = eapo_batch(&sft, &local, &extreme_pairs, weights, base).unwrap();
        let mut grad = vec![0.0; model.parameters().len()];
        for (i, cache) in caches.iter().enumerate() {
            cache.accumulate_backward(out.sft_grads[i] + out.local_grads[i], &mut grad);
        }
        for (j, cache) in extreme_caches.iter().enumerate() {
            cache.accumulate_backward(out.extreme_grads[j], &mut grad);
        }
        grad
    }

    fn tiny_fixture(seed: u64) -> (Classifier, ReferencePolicy, LocalManifold, ExtremeSubset) {
        let cfg = SyntheticConfig {
            dim: 3,
            n_train: 30,
            n_test: 8,
            positive_rate: 0.4,
            seed,
            ..Default::default()
        };
        let (train, test) = generate_synthetic(&cfg).unwrap();
        let queries: Vec<Vec<f64>> = test.records().iter().map(|r| r.features.clone()).collect();
        let manifold = build_local_manifold(&queries, &train, 2).unwrap();
        let extreme = extract_extreme(&manifold);
        let model = Classifier::init(ModelKind::Mlp, 3, &[4], seed ^ 0xabc).unwrap();
        let reference = Classifier::init(ModelKind::Mlp, 3, &[4], seed ^ 0xdef)
            .unwrap()
            .freeze_reference();
        (model, reference, manifold, extreme)
    }

    #[test]
    fn assembled_gradient_matches_finite_differences() {
        let weights = EapoWeights::default();
        let base = BaseLoss::Focal(Default::default());
        let h = 1e-5;
        for seed in 0..5u64 {
            let (mut model, reference, manifold, extreme) = tiny_fixture(60 + seed);
            let analytic =
                full_batch_gradient(&model, &reference, &manifold, &extreme, &weights, &base);
            for (j, &expected) in analytic.iter().enumerate() {
                let orig = model.parameters()[j];
                model.parameters_mut()[j] = orig + h;
                let plus =
                    full_batch_objective(&model, &reference, &manifold, &extreme, &weights, &base);
                model.parameters_mut()[j] = orig - h;
                let minus =
                    full_batch_objective(&model, &reference, &manifold, &extreme, &weights, &base);
                model.parameters_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let denom = expected.abs().max(1e-7);
                assert!(
                    ((expected - numeric) / denom).abs() < 1e-4,
                    "seed {seed} param {j}: {expected} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn single_full_batch_step_does_not_increase_objective() {
        let weights = EapoWeights::default();
        let base = BaseLoss::Focal(Default::default());
        for seed in 0..20u64 {
            let (mut model, reference, manifold, extreme) = tiny_fixture(80 + seed);
            let before =
                full_batch_objective(&model, &reference, &manifold, &extreme, &weights, &base);
            let grad =
                full_batch_gradient(&model, &reference, &manifold, &extreme, &weights, &base);
            let mut adam = AdamState::new(grad.len());
            adam.step(model.parameters_mut(), &grad, 1e-4).unwrap();
            let after =
                full_batch_objective(&model, &reference, &manifold, &extreme, &weights, &base);
            assert!(
                after <= before + 1e-10,
                "seed {seed}: {before} -> {after}"
            );
        }
    }

    #[test]
    fn epoch_history_and_export() {
        let (model, reference, manifold, extreme) = finetune_fixture(55);
        let cfg = FinetuneConfig {
            epochs: 3,
            batch_size: 32,
            ..Default::default()
        };
        let (_, history) = finetune(model, &reference, &manifold, &extreme, &cfg).unwrap();
        assert_eq!(history.epochs.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        history.export_table(&path, ',').unwrap();
        let body = fs::read_to_string(&path).unwrap();
        assert_eq!(body.lines().count(), 4);
    }
}
