//! Per-feature importance scores.
//!
//! The central score is *self-resemblance drift*: one minus the normalized
//! cross-correlation (Pearson) between a feature's weight slice now and the
//! same slice at initialization. A feature that has not moved — or has only
//! been rescaled and shifted, as weight decay does — scores 0; a feature whose
//! weights decorrelated from their start scores near 1; a sign flip scores 2.
//! Scores always land in [0, 2].
//!
//! Two cheaper scores support pruning comparisons: the L1 norm of the weight
//! slice, and the feature's mean activation over a dataset.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, LayerKind};
use crate::error::{Error, Result};
use crate::net::{forward_eval_cached, ParamStore};
use crate::tensor::Tensor;

/// Relative variance floor below which a weight slice counts as constant and
/// its correlation with anything is undefined.
const DEGENERATE_REL: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "self_resemblance")]
    SelfResemblance,
    #[serde(rename = "l1_norm")]
    L1Norm,
    #[serde(rename = "mean_activation")]
    MeanActivation,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::SelfResemblance => "self_resemblance",
            Metric::L1Norm => "l1_norm",
            Metric::MeanActivation => "mean_activation",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Metric> {
        match s {
            "self_resemblance" => Ok(Metric::SelfResemblance),
            "l1_norm" => Ok(Metric::L1Norm),
            "mean_activation" => Ok(Metric::MeanActivation),
            other => Err(Error::Config(format!(
                "unknown metric {other:?}; expected self_resemblance, l1_norm or mean_activation"
            ))),
        }
    }
}

/// Scores for every feature of one layer. `degenerate[f]` marks features
/// whose score is a placeholder because the quantity is undefined (constant
/// weight slice); such features never count as drifted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub layer: usize,
    pub metric: Metric,
    pub scores: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// Importance of every prunable layer at one point in training, as written to
/// JSON reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// Optimizer steps taken when the report was made.
    pub step: u64,
    pub metric: Metric,
    pub layers: Vec<ImportanceVector>,
}

/// Drift of one feature: 1 - Pearson correlation between its weight slice now
/// and at initialization. Returns (score, degenerate).
pub fn resemblance_drift(current: &[f64], initial: &[f64]) -> (f64, bool) {
    debug_assert_eq!(current.len(), initial.len());
    let n = current.len() as f64;
    let mean_c: f64 = current.iter().sum::<f64>() / n;
    let mean_i: f64 = initial.iter().sum::<f64>() / n;
    let mut cc = 0.0;
    let mut ci = 0.0;
    let mut ii = 0.0;
    let mut sq_c = 0.0;
    let mut sq_i = 0.0;
    for (&c, &i) in current.iter().zip(initial) {
        let dc = c - mean_c;
        let di = i - mean_i;
        cc += dc * dc;
        ci += dc * di;
        ii += di * di;
        sq_c += c * c;
        sq_i += i * i;
    }
    // A slice with (numerically) no variance around its mean has no defined
    // correlation; single-element slices always land here.
    if cc <= DEGENERATE_REL * sq_c.max(1e-300) || ii <= DEGENERATE_REL * sq_i.max(1e-300) {
        return (0.0, true);
    }
    let r = (ci / (cc.sqrt() * ii.sqrt())).clamp(-1.0, 1.0);
    (1.0 - r, false)
}

/// Copies of the weight tensors taken at (re-)initialization, keyed by layer
/// index. The drift metric compares against these.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSnapshot {
    pub weights: BTreeMap<usize, Tensor>,
}

impl InitSnapshot {
    /// Capture every weighted layer's weight tensor.
    pub fn capture(arch: &ArchSpec, store: &ParamStore) -> InitSnapshot {
        let mut weights = BTreeMap::new();
        for i in arch.weighted_layers() {
            let w = store.layers[i].weight().expect("weighted layers have weights");
            weights.insert(i, w.clone());
        }
        InitSnapshot { weights }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"WSNP")?;
        w.write_all(&(self.weights.len() as u32).to_le_bytes())?;
        for (layer, tensor) in &self.weights {
            w.write_all(&(*layer as u64).to_le_bytes())?;
            tensor.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<InitSnapshot> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"WSNP" {
            return Err(Error::Numeric("not a snapshot stream".into()));
        }
        let mut count = [0u8; 4];
        r.read_exact(&mut count)?;
        let mut weights = BTreeMap::new();
        for _ in 0..u32::from_le_bytes(count) {
            let mut layer = [0u8; 8];
            r.read_exact(&mut layer)?;
            weights.insert(u64::from_le_bytes(layer) as usize, Tensor::read_from(r)?);
        }
        Ok(InitSnapshot { weights })
    }
}

/// Layers whose features are scored: weighted layers except the terminal
/// classifier.
pub fn scored_layers(arch: &ArchSpec) -> Vec<usize> {
    let last = arch.layers.len() - 1;
    arch.weighted_layers().into_iter().filter(|&i| i != last).collect()
}

/// Drift scores for one layer against the snapshot.
pub fn self_resemblance(
    store: &ParamStore,
    snapshot: &InitSnapshot,
    layer: usize,
) -> Result<ImportanceVector> {
    let weight = store.layers[layer]
        .weight()
        .ok_or_else(|| Error::InvalidArg(format!("layer {layer} has no weight tensor")))?;
    let initial = snapshot
        .weights
        .get(&layer)
        .ok_or_else(|| Error::Numeric(format!("snapshot has no entry for layer {layer}")))?;
    if initial.shape() != weight.shape() {
        return Err(Error::Numeric(format!(
            "snapshot for layer {layer} has shape {:?}, weights have {:?}; snapshot is stale",
            initial.shape(),
            weight.shape()
        )));
    }
    let features = weight.shape()[0];
    let mut scores = Vec::with_capacity(features);
    let mut degenerate = Vec::with_capacity(features);
    for f in 0..features {
        let (score, degen) = resemblance_drift(weight.feature(f), initial.feature(f));
        scores.push(score);
        degenerate.push(degen);
    }
    Ok(ImportanceVector { layer, metric: Metric::SelfResemblance, scores, degenerate })
}

/// Drift scores for every scored layer.
pub fn self_resemblance_all(
    arch: &ArchSpec,
    store: &ParamStore,
    snapshot: &InitSnapshot,
) -> Result<Vec<ImportanceVector>> {
    scored_layers(arch)
        .into_iter()
        .map(|i| self_resemblance(store, snapshot, i))
        .collect()
}

/// Sum of absolute weights of each feature slice.
pub fn l1_importance(store: &ParamStore, layer: usize) -> Result<ImportanceVector> {
    let weight = store.layers[layer]
        .weight()
        .ok_or_else(|| Error::InvalidArg(format!("layer {layer} has no weight tensor")))?;
    let features = weight.shape()[0];
    let scores: Vec<f64> = (0..features)
        .map(|f| weight.feature(f).iter().map(|v| v.abs()).sum())
        .collect();
    Ok(ImportanceVector {
        layer,
        metric: Metric::L1Norm,
        scores,
        degenerate: vec![false; features],
    })
}

pub fn l1_importance_all(arch: &ArchSpec, store: &ParamStore) -> Result<Vec<ImportanceVector>> {
    scored_layers(arch).into_iter().map(|i| l1_importance(store, i)).collect()
}

/// Mean activation of each feature over all `batches`, evaluated with running
/// statistics. The activation of a feature is the output of the
/// batchnorm/relu run directly following its layer (the layer's own output if
/// nothing follows), averaged over samples and spatial positions.
pub fn mean_activation_all(
    arch: &ArchSpec,
    store: &ParamStore,
    batches: impl IntoIterator<Item = Tensor>,
) -> Result<Vec<ImportanceVector>> {
    let layers = scored_layers(arch);
    // Layer whose output carries each scored layer's activation.
    let act_of: Vec<usize> = layers
        .iter()
        .map(|&i| {
            let mut j = i;
            while j + 1 < arch.layers.len()
                && matches!(arch.layers[j + 1].kind, LayerKind::BatchNorm | LayerKind::Relu)
            {
                j += 1;
            }
            j
        })
        .collect();

    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = vec![0; layers.len()];
    let mut seen_any = false;
    for batch in batches {
        seen_any = true;
        let (_, cache) = forward_eval_cached(arch, store, &batch)?;
        for (k, &j) in act_of.iter().enumerate() {
            let out = &cache.outputs[j];
            let channels = out.shape()[1];
            if sums.len() <= k {
                sums.push(vec![0.0; channels]);
            }
            let od = out.data();
            let n = out.shape()[0];
            let inner: usize = out.shape()[2..].iter().product();
            for ni in 0..n {
                for (c, sum) in sums[k].iter_mut().enumerate() {
                    let base = (ni * channels + c) * inner;
                    for s in 0..inner {
                        *sum += od[base + s];
                    }
                }
            }
            counts[k] += n * inner;
        }
    }
    if !seen_any {
        return Err(Error::InvalidArg("mean_activation_all needs at least one batch".into()));
    }
    Ok(layers
        .iter()
        .enumerate()
        .map(|(k, &layer)| {
            let features = sums[k].len();
            ImportanceVector {
                layer,
                metric: Metric::MeanActivation,
                scores: sums[k].iter().map(|s| s / counts[k] as f64).collect(),
                degenerate: vec![false; features],
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerSpec;
    use crate::rng::Rng;

    #[test]
    fn identical_slices_have_zero_drift() {
        let w = vec![0.3, -1.2, 0.7, 2.5];
        let (c, degen) = resemblance_drift(&w, &w);
        assert!(!degen);
        assert!(c.abs() < 1e-12, "drift {c}");
    }

    #[test]
    fn positive_affine_images_have_zero_drift() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let w: Vec<f64> = (0..16).map(|_| rng.normal(0.0, 1.0)).collect();
            let a = rng.uniform(0.1, 5.0);
            let b = rng.uniform(-3.0, 3.0);
            let scaled: Vec<f64> = w.iter().map(|v| a * v + b).collect();
            let (c, degen) = resemblance_drift(&scaled, &w);
            assert!(!degen);
            assert!(c.abs() < 1e-9, "drift {c} for a={a} b={b}");
        }
    }

    #[test]
    fn negated_slice_has_drift_two() {
        let w = vec![0.3, -1.2, 0.7, 2.5];
        let neg: Vec<f64> = w.iter().map(|v| -v).collect();
        let (c, degen) = resemblance_drift(&neg, &w);
        assert!(!degen);
        assert!((c - 2.0).abs() < 1e-12, "drift {c}");
    }

    #[test]
    fn drift_is_bounded() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let n = 1 + rng.below(12);
            let a: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 10.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 10.0)).collect();
            let (c, _) = resemblance_drift(&a, &b);
            assert!((0.0..=2.0).contains(&c), "drift {c} out of range");
        }
    }

    #[test]
    fn constant_and_single_element_slices_are_degenerate() {
        let (c, degen) = resemblance_drift(&[1.5], &[0.3]);
        assert!(degen);
        assert_eq!(c, 0.0);
        let (c, degen) = resemblance_drift(&[2.0, 2.0, 2.0], &[0.1, 0.5, -0.2]);
        assert!(degen);
        assert_eq!(c, 0.0);
        let (_, degen) = resemblance_drift(&[0.1, 0.5, -0.2], &[2.0, 2.0, 2.0]);
        assert!(degen, "degeneracy must be symmetric in the arguments");
    }

    fn tiny_arch() -> ArchSpec {
        ArchSpec {
            input_shape: [1, 4, 4],
            num_classes: 2,
            bn_epsilon: 1e-3,
            layers: vec![
                LayerSpec::conv(3, (3, 3), 1, 1),
                LayerSpec::batchnorm(),
                LayerSpec::relu(),
                LayerSpec::flatten(),
                LayerSpec::linear(4),
                LayerSpec::relu(),
                LayerSpec::linear(2),
            ],
        }
    }

    #[test]
    fn scored_layers_exclude_terminal_classifier() {
        let arch = tiny_arch();
        assert_eq!(scored_layers(&arch), vec![0, 4]);
    }

    #[test]
    fn layer_drift_tracks_modified_features() {
        let arch = tiny_arch();
        let mut rng = Rng::new(7);
        let mut store = ParamStore::init(&arch, &mut rng).unwrap();
        let snapshot = InitSnapshot::capture(&arch, &store);
        // Feature 1 of the conv gets fresh weights; others only rescale.
        if let crate::net::LayerParams::Conv { weight, .. } = &mut store.layers[0] {
            rng.fill_normal(weight.feature_mut(1), 0.0, 1.0);
            for v in weight.feature_mut(2) {
                *v *= 0.5;
            }
        }
        let iv = self_resemblance(&store, &snapshot, 0).unwrap();
        assert!(iv.scores[0].abs() < 1e-12, "untouched feature drifted: {}", iv.scores[0]);
        assert!(iv.scores[1] > 0.2, "rewritten feature should drift: {}", iv.scores[1]);
        assert!(iv.scores[2].abs() < 1e-9, "rescaled feature drifted: {}", iv.scores[2]);
    }

    #[test]
    fn stale_snapshot_is_rejected() {
        let arch = tiny_arch();
        let mut rng = Rng::new(7);
        let store = ParamStore::init(&arch, &mut rng).unwrap();
        let mut wide = arch.clone();
        wide.layers[0].width = Some(5);
        let wide_store = ParamStore::init(&wide, &mut rng).unwrap();
        let stale = InitSnapshot::capture(&arch, &store);
        assert!(self_resemblance(&wide_store, &stale, 0).is_err());
    }

    #[test]
    fn snapshot_io_round_trip() {
        let arch = tiny_arch();
        let mut rng = Rng::new(9);
        let store = ParamStore::init(&arch, &mut rng).unwrap();
        let snap = InitSnapshot::capture(&arch, &store);
        let mut buf = Vec::new();
        snap.write_to(&mut buf).unwrap();
        let back = InitSnapshot::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, snap);
    }

    #[test]
    fn l1_importance_matches_hand_sum() {
        let arch = tiny_arch();
        let mut store = ParamStore::init(&arch, &mut Rng::new(11)).unwrap();
        if let crate::net::LayerParams::Linear { weight, .. } = &mut store.layers[4] {
            for (i, v) in weight.data_mut().iter_mut().enumerate() {
                *v = if i % 2 == 0 { 0.5 } else { -1.0 };
            }
        }
        let iv = l1_importance(&store, 4).unwrap();
        // Each linear feature has 48 inputs: 24 * 0.5 + 24 * 1.0 = 36.
        for s in &iv.scores {
            assert!((s - 36.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_activation_is_post_relu_channel_mean() {
        // One conv feature forced hugely positive pre-activation, one hugely
        // negative: after relu the negative one must average exactly zero.
        let arch = ArchSpec {
            input_shape: [1, 4, 4],
            num_classes: 2,
            bn_epsilon: 1e-3,
            layers: vec![
                LayerSpec::conv(2, (1, 1), 1, 0),
                LayerSpec::relu(),
                LayerSpec::flatten(),
                LayerSpec::linear(2),
            ],
        };
        let mut rng = Rng::new(13);
        let mut store = ParamStore::init(&arch, &mut rng).unwrap();
        if let crate::net::LayerParams::Conv { weight, bias } = &mut store.layers[0] {
            weight.data_mut().copy_from_slice(&[1.0, 1.0]);
            bias.data_mut().copy_from_slice(&[100.0, -100.0]);
        }
        let mut x = Tensor::zeros(&[3, 1, 4, 4]);
        rng.fill_normal(x.data_mut(), 0.0, 1.0);
        let ivs = mean_activation_all(&arch, &store, vec![x.clone()]).unwrap();
        assert_eq!(ivs.len(), 1);
        let scores = &ivs[0].scores;
        // Feature 0: relu(x + 100) = x + 100, so its mean is mean(x) + 100.
        let mean_x: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
        assert!((scores[0] - (mean_x + 100.0)).abs() < 1e-9, "{}", scores[0]);
        assert_eq!(scores[1], 0.0);
    }

    #[test]
    fn metric_names_parse_and_serialize() {
        for m in [Metric::SelfResemblance, Metric::L1Norm, Metric::MeanActivation] {
            let parsed: Metric = m.name().parse().unwrap();
            assert_eq!(parsed, m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("banana".parse::<Metric>().is_err());
    }
}
