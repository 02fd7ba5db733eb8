//! The mini-batch training loop.
//!
//! [`run_epoch`] is the single implementation of "one epoch of SGD": shuffle,
//! batch, augment, forward, loss, backward, update. Both plain training
//! ([`fit`]) and the width-expansion driver run epochs through it, so a
//! driver whose extra machinery is inert (e.g. an expansion threshold nothing
//! can reach) produces bit-identical parameters to plain training.
//!
//! The `on_step` hook runs after every optimizer step and may interrupt the
//! epoch; it draws nothing from the random stream, so its presence never
//! perturbs shuffling or augmentation.

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::data::{augment_batch, Dataset};
use crate::error::{Error, Result};
use crate::net::{backward, cross_entropy, forward_eval, forward_train, ParamStore, accuracy};
use crate::optim::{sgd_step, TrainConfig, Velocity};
use crate::rng::Rng;

/// Train-time augmentation switches. Both off means batches pass through
/// untouched (and nothing is drawn from the random stream for them).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentConfig {
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub max_shift: usize,
}

/// Decision returned by the per-step hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepControl {
    Continue,
    /// Stop the epoch after this step (the caller will restructure the
    /// network and start a fresh epoch).
    Interrupt,
}

/// What an epoch did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpochOutcome {
    Completed(EpochSummary),
    Interrupted { batches_done: usize },
}

/// Sample-weighted training loss and accuracy over the epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub loss: f64,
    pub accuracy: f64,
}

/// One epoch of SGD over `data`. Draw order per epoch: one shuffle, then per
/// batch the augmentation draws (if enabled). `steps` counts optimizer steps
/// cumulatively across epochs. `on_step` runs after each step.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch(
    arch: &ArchSpec,
    store: &mut ParamStore,
    velocity: &mut Velocity,
    data: &Dataset,
    cfg: &TrainConfig,
    lr: f64,
    augment: &AugmentConfig,
    rng: &mut Rng,
    steps: &mut u64,
    mut on_step: impl FnMut(&ArchSpec, &ParamStore, u64) -> Result<StepControl>,
) -> Result<EpochOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArg("cannot train on an empty dataset".into()));
    }
    let mut indices: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut indices);

    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut samples = 0usize;
    for (batch_idx, chunk) in indices.chunks(cfg.batch_size).enumerate() {
        let (images, labels) = data.batch(chunk);
        let images = augment_batch(&images, rng, augment.flip, augment.max_shift);
        let (logits, cache) = forward_train(arch, store, &images)?;
        let (loss, dlogits) = cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss became non-finite ({loss}) at step {steps}"
            )));
        }
        let grads = backward(arch, store, &cache, &dlogits)?;
        sgd_step(store, &grads, velocity, lr, cfg)?;
        *steps += 1;
        loss_sum += loss * chunk.len() as f64;
        acc_sum += accuracy(&logits, &labels)? * chunk.len() as f64;
        samples += chunk.len();
        if on_step(arch, store, *steps)? == StepControl::Interrupt {
            return Ok(EpochOutcome::Interrupted { batches_done: batch_idx + 1 });
        }
    }
    Ok(EpochOutcome::Completed(EpochSummary {
        loss: loss_sum / samples as f64,
        accuracy: acc_sum / samples as f64,
    }))
}

/// Loss and accuracy over `data` in evaluation mode (running statistics, no
/// augmentation, no parameter changes).
pub fn evaluate(
    arch: &ArchSpec,
    store: &ParamStore,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArg("cannot evaluate on an empty dataset".into()));
    }
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (images, labels) = data.batch(chunk);
        let logits = forward_eval(arch, store, &images)?;
        let (loss, _) = cross_entropy(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        acc_sum += accuracy(&logits, &labels)? * chunk.len() as f64;
    }
    Ok((loss_sum / data.len() as f64, acc_sum / data.len() as f64))
}

/// Per-epoch record of a plain training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub store: ParamStore,
    pub velocity: Velocity,
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
}

fn check_data(arch: &ArchSpec, data: &Dataset) -> Result<()> {
    if data.input_shape() != arch.input_shape {
        return Err(Error::Config(format!(
            "dataset samples are {:?}, architecture expects {:?}",
            data.input_shape(),
            arch.input_shape
        )));
    }
    if data.num_classes != arch.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, architecture expects {}",
            data.num_classes, arch.num_classes
        )));
    }
    Ok(())
}

/// Train `arch` from a fresh seed-determined initialization for the full
/// epoch budget. `eval_every = k` evaluates on `test` after every k-th epoch
/// and after the last one; 0 disables evaluation.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    arch: &ArchSpec,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    seed: u64,
    eval_every: usize,
) -> Result<FitResult> {
    cfg.validate()?;
    check_data(arch, train_data)?;
    if let Some(test) = test_data {
        check_data(arch, test)?;
    }
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::init(arch, &mut rng)?;
    let mut velocity = Velocity::zeros_like(&store);
    let mut steps = 0u64;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let outcome = run_epoch(
            arch, &mut store, &mut velocity, train_data, cfg, lr, augment, &mut rng, &mut steps,
            |_, _, _| Ok(StepControl::Continue),
        )?;
        let EpochOutcome::Completed(summary) = outcome else {
            unreachable!("the no-op hook never interrupts");
        };
        let mut record = EpochRecord {
            epoch,
            lr,
            train_loss: summary.loss,
            train_accuracy: summary.accuracy,
            test_loss: None,
            test_accuracy: None,
        };
        if let Some(test) = test_data {
            let due = eval_every > 0 && ((epoch + 1) % eval_every == 0 || epoch + 1 == cfg.epochs);
            if due {
                let (loss, acc) = evaluate(arch, &store, test, cfg.batch_size)?;
                record.test_loss = Some(loss);
                record.test_accuracy = Some(acc);
            }
        }
        epochs.push(record);
    }
    Ok(FitResult { store, velocity, epochs, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerSpec;
    use crate::data::{gen_synthetic, Normalizer, SyntheticTaskSpec};

    fn small_task() -> (Dataset, Dataset) {
        let spec = SyntheticTaskSpec {
            classes: 2,
            image_size: 8,
            n_train: 64,
            n_test: 32,
            difficulty: 0.1,
            seed: 1,
        };
        let (train, test) = gen_synthetic(&spec).unwrap();
        let norm = Normalizer::fit(&train);
        (norm.apply(&train).unwrap(), norm.apply(&test).unwrap())
    }

    fn small_arch() -> ArchSpec {
        ArchSpec {
            input_shape: [1, 8, 8],
            num_classes: 2,
            bn_epsilon: 1e-3,
            layers: vec![
                LayerSpec::conv(4, (3, 3), 1, 1),
                LayerSpec::batchnorm(),
                LayerSpec::relu(),
                LayerSpec::maxpool((2, 2), 2),
                LayerSpec::flatten(),
                LayerSpec::linear(8),
                LayerSpec::batchnorm(),
                LayerSpec::relu(),
                LayerSpec::linear(2),
            ],
        }
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr0: 0.05,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            batch_size: 16,
            epochs,
            schedule: vec![],
        }
    }

    #[test]
    fn fit_learns_the_easy_task() {
        let (train, test) = small_task();
        let result = fit(
            &small_arch(), &train, Some(&test), &small_cfg(12), &AugmentConfig::default(), 3, 4,
        )
        .unwrap();
        let first = &result.epochs[0];
        let last = result.epochs.last().unwrap();
        assert!(last.train_loss < first.train_loss, "loss did not drop");
        assert!(
            last.test_accuracy.unwrap() > 0.9,
            "test accuracy {:?}",
            last.test_accuracy
        );
        assert_eq!(result.steps, 12 * 4); // 64 samples / 16 per batch
    }

    #[test]
    fn fit_is_bit_deterministic_per_seed() {
        let (train, _) = small_task();
        let run = |seed| {
            fit(&small_arch(), &train, None, &small_cfg(3), &AugmentConfig::default(), seed, 0)
                .unwrap()
        };
        let a = run(9);
        let b = run(9);
        let c = run(10);
        assert_eq!(a.store, b.store);
        for (ra, rb) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
        }
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn augmentation_changes_the_run_but_stays_deterministic() {
        let (train, _) = small_task();
        let aug = AugmentConfig { flip: true, max_shift: 1 };
        let a = fit(&small_arch(), &train, None, &small_cfg(2), &aug, 5, 0).unwrap();
        let b = fit(&small_arch(), &train, None, &small_cfg(2), &aug, 5, 0).unwrap();
        let plain = fit(&small_arch(), &train, None, &small_cfg(2), &AugmentConfig::default(), 5, 0).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, plain.store);
    }

    #[test]
    fn interrupting_hook_stops_mid_epoch() {
        let (train, _) = small_task();
        let arch = small_arch();
        let cfg = small_cfg(1);
        let run_steps = |limit: u64| -> (ParamStore, usize) {
            let mut rng = Rng::new(21);
            let mut store = ParamStore::init(&arch, &mut rng).unwrap();
            let mut velocity = Velocity::zeros_like(&store);
            let mut steps = 0u64;
            let outcome = run_epoch(
                &arch, &mut store, &mut velocity, &train, &cfg, 0.05,
                &AugmentConfig::default(), &mut rng, &mut steps,
                |_, _, s| Ok(if s >= limit { StepControl::Interrupt } else { StepControl::Continue }),
            )
            .unwrap();
            let EpochOutcome::Interrupted { batches_done } = outcome else {
                panic!("expected interruption");
            };
            (store, batches_done)
        };
        let (store2, done2) = run_steps(2);
        assert_eq!(done2, 2);
        // An identically seeded run interrupted later agrees after two steps
        // only if the first two steps were identical; check via a fresh run
        // interrupted at the same point.
        let (store2b, _) = run_steps(2);
        assert_eq!(store2, store2b);
    }

    #[test]
    fn zero_lr_epoch_leaves_weights_unchanged() {
        let (train, _) = small_task();
        let arch = small_arch();
        let cfg = small_cfg(1);
        let mut rng = Rng::new(31);
        let mut store = ParamStore::init(&arch, &mut rng).unwrap();
        let before = store.clone();
        let mut velocity = Velocity::zeros_like(&store);
        let mut steps = 0;
        run_epoch(
            &arch, &mut store, &mut velocity, &train, &cfg, 0.0,
            &AugmentConfig::default(), &mut rng, &mut steps,
            |_, _, _| Ok(StepControl::Continue),
        )
        .unwrap();
        // Learnable parameters untouched; only batchnorm running statistics
        // moved (they always track training batches).
        for (p, q) in store.params().iter().zip(before.params().iter()) {
            assert_eq!(p.tensor.data(), q.tensor.data(), "{} changed", p.name);
        }
    }

    #[test]
    fn evaluate_is_deterministic() {
        let (train, test) = small_task();
        let arch = small_arch();
        let result = fit(&arch, &train, None, &small_cfg(2), &AugmentConfig::default(), 7, 0).unwrap();
        let (l1, a1) = evaluate(&arch, &result.store, &test, 16).unwrap();
        let (l2, a2) = evaluate(&arch, &result.store, &test, 16).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(a1.to_bits(), a2.to_bits());
    }

    #[test]
    fn fit_rejects_mismatched_dataset() {
        let (train, _) = small_task();
        let mut arch = small_arch();
        arch.input_shape = [1, 10, 10];
        arch.layers[0] = LayerSpec::conv(4, (3, 3), 1, 1);
        assert!(fit(&arch, &train, None, &small_cfg(1), &AugmentConfig::default(), 1, 0).is_err());
    }
}
