//! Width expansion driven by weight drift.
//!
//! Training starts with every growable layer at width 1. After every
//! optimizer step the drift score of each feature (see
//! [`metrics`](crate::metrics)) is checked; when every feature of a layer has
//! drifted past the threshold, the layer has no spare capacity left, so its
//! width grows by `f_exp` and the whole network is re-initialized and trained
//! from scratch (epoch counter and learning-rate schedule reset, momentum
//! cleared, drift baselines recaptured). Once training runs event-free for a
//! configured fraction of the epoch budget, expansion switches off and the
//! remaining schedule completes undisturbed — the final stretch after the
//! last re-initialization *is* the from-scratch training of the found
//! architecture.
//!
//! Every epoch is executed by [`train::run_epoch`](crate::train::run_epoch),
//! and all randomness (initializations, shuffles, augmentation) comes from
//! one seeded stream. A run whose threshold can never fire therefore produces
//! bit-identical parameters to [`train::fit`](crate::train::fit).

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self_resemblance, InitSnapshot};
use crate::net::ParamStore;
use crate::optim::{TrainConfig, Velocity};
use crate::rng::Rng;
use crate::train::{evaluate, run_epoch, AugmentConfig, EpochOutcome, StepControl};

/// Which reading of the expansion test to apply to a layer's drift scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    /// Expand when even the least-drifted feature exceeds epsilon:
    /// `min(c) > epsilon`. The default.
    #[serde(rename = "prose")]
    Prose,
    /// Expand when no feature is still fully correlated with its start:
    /// `max(c) < 1 - epsilon`.
    #[serde(rename = "printed")]
    Printed,
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Condition> {
        match s {
            "prose" => Ok(Condition::Prose),
            "printed" => Ok(Condition::Printed),
            other => Err(Error::Config(format!(
                "unknown condition {other:?}; expected prose or printed"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    /// Drift threshold.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Features added to a layer per expansion event.
    #[serde(default = "default_f_exp")]
    pub f_exp: usize,
    /// Fraction of the epoch budget that must pass event-free before
    /// expansion switches off for good.
    #[serde(default = "default_stability_fraction")]
    pub stability_fraction: f64,
    /// Hard cap on any layer's width; capped layers stop triggering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_width: Option<usize>,
    #[serde(default = "default_condition")]
    pub condition: Condition,
}

fn default_epsilon() -> f64 {
    1e-6
}

fn default_f_exp() -> usize {
    1
}

fn default_stability_fraction() -> f64 {
    0.5
}

fn default_condition() -> Condition {
    Condition::Prose
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            epsilon: default_epsilon(),
            f_exp: default_f_exp(),
            stability_fraction: default_stability_fraction(),
            max_width: None,
            condition: default_condition(),
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        // Infinite epsilon is allowed: it disables expansion outright.
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if self.f_exp == 0 {
            return Err(Error::Config("f_exp must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.stability_fraction) {
            return Err(Error::Config(format!(
                "stability_fraction must be in [0, 1], got {}",
                self.stability_fraction
            )));
        }
        if self.max_width == Some(0) {
            return Err(Error::Config("max_width must be >= 1".into()));
        }
        Ok(())
    }
}

/// One layer's width change within an expansion event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerExpansion {
    pub layer: usize,
    pub from: usize,
    pub to: usize,
}

/// Everything a run emits, one JSON object per line in the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    /// An expansion event: the listed layers grew and training restarted.
    Expansion {
        /// Epochs completed since the run began (restarts included).
        wall_epoch: usize,
        /// Epochs since the last re-initialization when the event fired.
        t: usize,
        /// Cumulative optimizer steps at the event.
        step: u64,
        layers: Vec<LayerExpansion>,
        /// Widths of all growable layers after the event.
        widths: Vec<usize>,
    },
    /// Expansion switched off: the run was event-free long enough.
    Stability { wall_epoch: usize, t: usize, step: u64 },
    /// A completed epoch.
    Epoch {
        wall_epoch: usize,
        t: usize,
        step: u64,
        lr: f64,
        train_loss: f64,
        train_accuracy: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        test_loss: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        test_accuracy: Option<f64>,
        params: usize,
        widths: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct ExpansionResult {
    /// Architecture with the discovered widths.
    pub arch: ArchSpec,
    pub store: ParamStore,
    pub velocity: Velocity,
    /// Weight snapshot from the last re-initialization.
    pub snapshot: InitSnapshot,
    pub log: Vec<LogRecord>,
    pub expansions: usize,
    /// Total epochs run, restarts included.
    pub wall_epochs: usize,
    pub steps: u64,
}

/// Grow `layers` (and everything coupled to them) by `f_exp`, respecting
/// `max_width`. Returns the new architecture and the changes actually made.
pub fn expand_widths(
    arch: &ArchSpec,
    layers: &[usize],
    f_exp: usize,
    max_width: Option<usize>,
) -> (ArchSpec, Vec<LayerExpansion>) {
    let mut grown = arch.clone();
    // Collect the full set of layers to grow: the triggering layers plus all
    // members of their coupling groups.
    let mut to_grow: Vec<usize> = Vec::new();
    for &l in layers {
        if !to_grow.contains(&l) {
            to_grow.push(l);
        }
        if let Some(g) = arch.layers[l].couple_group {
            for (i, spec) in arch.layers.iter().enumerate() {
                if spec.couple_group == Some(g) && !to_grow.contains(&i) {
                    to_grow.push(i);
                }
            }
        }
    }
    to_grow.sort_unstable();
    let mut changes = Vec::new();
    for l in to_grow {
        let from = grown.layers[l].width.expect("growable layers have widths");
        let mut to = from + f_exp;
        if let Some(cap) = max_width {
            to = to.min(cap);
        }
        if to > from {
            grown.layers[l].width = Some(to);
            changes.push(LayerExpansion { layer: l, from, to });
        }
    }
    (grown, changes)
}

/// Check one layer's drift scores against the expansion condition. Degenerate
/// scores (constant slices) never count as drifted.
fn layer_triggers(cfg: &ExpansionConfig, scores: &[f64], degenerate: &[bool]) -> bool {
    let live: Vec<f64> = scores
        .iter()
        .zip(degenerate)
        .filter(|(_, &d)| !d)
        .map(|(&s, _)| s)
        .collect();
    if live.is_empty() {
        return false;
    }
    match cfg.condition {
        Condition::Prose => live.iter().cloned().fold(f64::INFINITY, f64::min) > cfg.epsilon,
        Condition::Printed => live.iter().cloned().fold(f64::NEG_INFINITY, f64::max) < 1.0 - cfg.epsilon,
    }
}

/// Run drift-driven width expansion. Growable widths are reset to 1 before
/// training starts; the returned architecture carries the widths the run
/// settled on.
#[allow(clippy::too_many_arguments)]
pub fn run_expansion(
    template: &ArchSpec,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    cfg: &TrainConfig,
    expansion: &ExpansionConfig,
    augment: &AugmentConfig,
    seed: u64,
    eval_every: usize,
) -> Result<ExpansionResult> {
    cfg.validate()?;
    expansion.validate()?;
    let mut arch = template.with_unit_widths();
    arch.validate()?;

    let mut rng = Rng::new(seed);
    let mut store = ParamStore::init(&arch, &mut rng)?;
    let mut velocity = Velocity::zeros_like(&store);
    let mut snapshot = InitSnapshot::capture(&arch, &store);

    let mut log: Vec<LogRecord> = Vec::new();
    let mut expansions = 0usize;
    let mut steps = 0u64;
    let mut wall_epoch = 0usize; // completed epochs, restarts included
    let mut t = 0usize; // epochs since the last re-initialization
    let mut active = true; // expansion checks enabled
    let stability_epochs =
        (expansion.stability_fraction * cfg.epochs as f64).ceil() as usize;

    while t < cfg.epochs {
        let lr = cfg.lr_at(t);
        // Layers the condition may still grow this epoch.
        let candidates: Vec<usize> = if active {
            arch.expandable_layers()
                .into_iter()
                .filter(|&l| match expansion.max_width {
                    Some(cap) => arch.layers[l].width.expect("expandable") < cap,
                    None => true,
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut triggered: Vec<usize> = Vec::new();
        let outcome = {
            let snapshot_ref = &snapshot;
            let candidates_ref = &candidates;
            let triggered_ref = &mut triggered;
            run_epoch(
                &arch, &mut store, &mut velocity, train_data, cfg, lr, augment, &mut rng,
                &mut steps,
                |arch_now, store_now, _| {
                    for &l in candidates_ref {
                        let iv = self_resemblance(store_now, snapshot_ref, l)?;
                        if layer_triggers(expansion, &iv.scores, &iv.degenerate) {
                            triggered_ref.push(l);
                        }
                    }
                    let _ = arch_now;
                    Ok(if triggered_ref.is_empty() {
                        StepControl::Continue
                    } else {
                        StepControl::Interrupt
                    })
                },
            )?
        };

        match outcome {
            EpochOutcome::Interrupted { .. } => {
                let (grown, changes) = expand_widths(
                    &arch,
                    &triggered,
                    expansion.f_exp,
                    expansion.max_width,
                );
                debug_assert!(
                    !changes.is_empty(),
                    "triggering layers were pre-filtered to be below the cap"
                );
                arch = grown;
                expansions += 1;
                log.push(LogRecord::Expansion {
                    wall_epoch,
                    t,
                    step: steps,
                    layers: changes,
                    widths: arch.widths(),
                });
                // Full restart: fresh parameters (drawn from the ongoing
                // stream), cleared momentum, new drift baseline, schedule
                // back to the start.
                store = ParamStore::init(&arch, &mut rng)?;
                velocity = Velocity::zeros_like(&store);
                snapshot = InitSnapshot::capture(&arch, &store);
                t = 0;
            }
            EpochOutcome::Completed(summary) => {
                wall_epoch += 1;
                t += 1;
                let (test_loss, test_accuracy) = match test_data {
                    Some(test)
                        if eval_every > 0
                            && (t.is_multiple_of(eval_every) || t == cfg.epochs) =>
                    {
                        let (l, a) = evaluate(&arch, &store, test, cfg.batch_size)?;
                        (Some(l), Some(a))
                    }
                    _ => (None, None),
                };
                log.push(LogRecord::Epoch {
                    wall_epoch,
                    t,
                    step: steps,
                    lr,
                    train_loss: summary.loss,
                    train_accuracy: summary.accuracy,
                    test_loss,
                    test_accuracy,
                    params: store.param_count(),
                    widths: arch.widths(),
                });
                if active && t >= stability_epochs {
                    active = false;
                    log.push(LogRecord::Stability { wall_epoch, t, step: steps });
                }
            }
        }
    }

    Ok(ExpansionResult {
        arch,
        store,
        velocity,
        snapshot,
        log,
        expansions,
        wall_epochs: wall_epoch,
        steps,
    })
}
