//! Importance-ordered feature removal.
//!
//! Pruning removes one output feature of one layer: its weight slice and bias
//! entry, the matching channel of any batchnorm that follows, and the slice
//! of the next weighted layer that consumed it (column block if a flatten
//! sits in between). The surviving parameters are untouched, so the pruned
//! network computes exactly what the original computes on the retained
//! features.
//!
//! [`prune_curve`] repeatedly removes the globally least-important feature
//! (re-scoring after every removal, since scores change as the network
//! shrinks), refreshing batchnorm running statistics and evaluating after
//! each step.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, DataShape, LayerKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    l1_importance_all, mean_activation_all, self_resemblance_all, ImportanceVector, InitSnapshot,
    Metric,
};
use crate::net::{recompute_bn_stats, LayerParams, ParamStore};
use crate::tensor::Tensor;
use crate::train::evaluate;

/// Remove slice `f` along axis 0.
fn remove_axis0(t: &Tensor, f: usize) -> Tensor {
    let features = t.shape()[0];
    let inner = t.len() / features;
    let mut shape = t.shape().to_vec();
    shape[0] = features - 1;
    let mut data = Vec::with_capacity((features - 1) * inner);
    data.extend_from_slice(&t.data()[..f * inner]);
    data.extend_from_slice(&t.data()[(f + 1) * inner..]);
    Tensor::from_vec(&shape, data).expect("sized above")
}

/// Remove slice `c` along axis 1 (input channel of a conv weight).
fn remove_axis1(t: &Tensor, c: usize) -> Tensor {
    let outer = t.shape()[0];
    let channels = t.shape()[1];
    let inner: usize = t.shape()[2..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[1] = channels - 1;
    let mut data = Vec::with_capacity(outer * (channels - 1) * inner);
    for o in 0..outer {
        let base = o * channels * inner;
        data.extend_from_slice(&t.data()[base..base + c * inner]);
        data.extend_from_slice(&t.data()[base + (c + 1) * inner..base + channels * inner]);
    }
    Tensor::from_vec(&shape, data).expect("sized above")
}

/// Remove columns `[start, end)` of a `[rows, cols]` matrix.
fn remove_columns(t: &Tensor, start: usize, end: usize) -> Tensor {
    let rows = t.shape()[0];
    let cols = t.shape()[1];
    let kept = cols - (end - start);
    let mut data = Vec::with_capacity(rows * kept);
    for r in 0..rows {
        let base = r * cols;
        data.extend_from_slice(&t.data()[base..base + start]);
        data.extend_from_slice(&t.data()[base + end..base + cols]);
    }
    Tensor::from_vec(&[rows, kept], data).expect("sized above")
}

/// How the consumer of a pruned feature sees that feature: which of its input
/// slices must go.
enum ConsumerCut {
    /// Conv (or classifier-conv) input channel.
    Channel(usize),
    /// Column block of a linear weight: `feature * spatial .. (feature+1) * spatial`.
    Columns { start: usize, end: usize },
}

/// Plan the surgery for removing feature `feature` of layer `layer`: the
/// batchnorm layers to shrink and the consumer cut. Pure function of the
/// architecture, shared by store and snapshot surgery.
fn plan_cut(arch: &ArchSpec, layer: usize, feature: usize) -> Result<(Vec<usize>, usize, ConsumerCut)> {
    let spec = &arch.layers[layer];
    if !matches!(spec.kind, LayerKind::Conv | LayerKind::Linear) {
        return Err(Error::InvalidArg(format!(
            "layer {layer} ({}) has no prunable features",
            spec.kind.name()
        )));
    }
    if layer + 1 == arch.layers.len() {
        return Err(Error::InvalidArg("cannot prune the classifier's output features".into()));
    }
    if spec.couple_group.is_some() {
        return Err(Error::InvalidArg(format!(
            "layer {layer} is width-coupled; prune is not defined for coupled layers"
        )));
    }
    let width = spec.width.expect("conv/linear have widths");
    if feature >= width {
        return Err(Error::InvalidArg(format!(
            "layer {layer} has {width} features, no feature {feature}"
        )));
    }
    if width == 1 {
        return Err(Error::InvalidArg(format!(
            "layer {layer} has a single feature left; removing it would sever the network"
        )));
    }

    let plan = arch.shape_plan()?;
    let mut bn_layers = Vec::new();
    let mut consumer = None;
    for j in layer + 1..arch.layers.len() {
        match arch.layers[j].kind {
            LayerKind::BatchNorm => bn_layers.push(j),
            LayerKind::Relu | LayerKind::MaxPool | LayerKind::Flatten => {}
            LayerKind::Conv | LayerKind::Linear | LayerKind::ClassifierConv => {
                consumer = Some(j);
                break;
            }
        }
    }
    let consumer = consumer.expect("a terminal classifier always exists");
    let cut = match arch.layers[consumer].kind {
        LayerKind::Conv | LayerKind::ClassifierConv => ConsumerCut::Channel(feature),
        LayerKind::Linear => {
            // Spatial extent of one channel at the consumer's input: 1 if the
            // producing layer was already flat, H*W if a flatten intervened.
            let spatial = match &plan.outputs[layer] {
                DataShape::Flat(_) => 1,
                DataShape::Map(_, h, w) => h * w,
            };
            // Pooling between producer and flatten changes the extent; use
            // the flatten layer's input if one exists.
            let spatial = arch.layers[layer + 1..consumer]
                .iter()
                .position(|l| l.kind == LayerKind::Flatten)
                .map(|off| match &plan.inputs[layer + 1 + off] {
                    DataShape::Map(_, h, w) => h * w,
                    DataShape::Flat(_) => 1,
                })
                .unwrap_or(spatial);
            ConsumerCut::Columns { start: feature * spatial, end: (feature + 1) * spatial }
        }
        _ => unreachable!("consumer search stops only at weighted layers"),
    };
    Ok((bn_layers, consumer, cut))
}

/// Remove output feature `feature` of layer `layer`, returning the shrunken
/// architecture and parameters. The original pair is untouched.
pub fn prune_feature(
    arch: &ArchSpec,
    store: &ParamStore,
    layer: usize,
    feature: usize,
) -> Result<(ArchSpec, ParamStore)> {
    let (bn_layers, consumer, cut) = plan_cut(arch, layer, feature)?;

    let mut new_arch = arch.clone();
    let width = arch.layers[layer].width.expect("checked in plan_cut");
    new_arch.layers[layer].width = Some(width - 1);

    let mut layers = store.layers.clone();
    match &store.layers[layer] {
        LayerParams::Conv { weight, bias } => {
            layers[layer] = LayerParams::Conv {
                weight: remove_axis0(weight, feature),
                bias: remove_axis0(bias, feature),
            };
        }
        LayerParams::Linear { weight, bias } => {
            layers[layer] = LayerParams::Linear {
                weight: remove_axis0(weight, feature),
                bias: remove_axis0(bias, feature),
            };
        }
        _ => unreachable!("plan_cut only passes conv/linear layers"),
    }
    for &j in &bn_layers {
        let LayerParams::BatchNorm { gamma, beta, running_mean, running_var } = &store.layers[j] else {
            unreachable!("architecture says layer {j} is batchnorm");
        };
        layers[j] = LayerParams::BatchNorm {
            gamma: remove_axis0(gamma, feature),
            beta: remove_axis0(beta, feature),
            running_mean: remove_axis0(running_mean, feature),
            running_var: remove_axis0(running_var, feature),
        };
    }
    match (&store.layers[consumer], &cut) {
        (LayerParams::Conv { weight, bias }, ConsumerCut::Channel(c)) => {
            layers[consumer] = LayerParams::Conv {
                weight: remove_axis1(weight, *c),
                bias: bias.clone(),
            };
        }
        (LayerParams::Linear { weight, bias }, ConsumerCut::Columns { start, end }) => {
            layers[consumer] = LayerParams::Linear {
                weight: remove_columns(weight, *start, *end),
                bias: bias.clone(),
            };
        }
        _ => unreachable!("cut kind matches consumer kind by construction"),
    }

    let new_store = ParamStore { layers };
    new_store.check_shapes(&new_arch)?;
    Ok((new_arch, new_store))
}

/// Mirror [`prune_feature`]'s surgery on a weight snapshot, so drift scores
/// of surviving features keep comparing like with like. `arch` is the
/// architecture *before* the prune.
pub fn prune_snapshot(
    snapshot: &InitSnapshot,
    arch: &ArchSpec,
    layer: usize,
    feature: usize,
) -> Result<InitSnapshot> {
    let (_, consumer, cut) = plan_cut(arch, layer, feature)?;
    let mut weights = snapshot.weights.clone();
    if let Some(w) = weights.get_mut(&layer) {
        *w = remove_axis0(w, feature);
    }
    if let Some(w) = weights.get_mut(&consumer) {
        *w = match &cut {
            ConsumerCut::Channel(c) => remove_axis1(w, *c),
            ConsumerCut::Columns { start, end } => remove_columns(w, *start, *end),
        };
    }
    Ok(InitSnapshot { weights })
}

/// Compute importance under `metric` for every scored layer.
pub fn compute_importance(
    arch: &ArchSpec,
    store: &ParamStore,
    metric: Metric,
    snapshot: Option<&InitSnapshot>,
    activation_data: Option<(&Dataset, usize)>,
) -> Result<Vec<ImportanceVector>> {
    match metric {
        Metric::SelfResemblance => {
            let snapshot = snapshot.ok_or_else(|| {
                Error::InvalidArg("self_resemblance scoring needs the initialization snapshot".into())
            })?;
            self_resemblance_all(arch, store, snapshot)
        }
        Metric::L1Norm => l1_importance_all(arch, store),
        Metric::MeanActivation => {
            let (data, batch_size) = activation_data.ok_or_else(|| {
                Error::InvalidArg("mean_activation scoring needs a dataset".into())
            })?;
            mean_activation_all(arch, store, data.image_batches(batch_size))
        }
    }
}

/// Features a curve may remove, least important first: ascending score, ties
/// by (layer, feature). Width-1 and width-coupled layers are excluded.
pub fn rank_features(arch: &ArchSpec, importance: &[ImportanceVector]) -> Vec<(f64, usize, usize)> {
    let mut ranked = Vec::new();
    for iv in importance {
        let spec = &arch.layers[iv.layer];
        if spec.couple_group.is_some() || spec.width == Some(1) {
            continue;
        }
        for (f, &score) in iv.scores.iter().enumerate() {
            ranked.push((score, iv.layer, f));
        }
    }
    ranked.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    ranked
}

/// Network state before any removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBaseline {
    pub params: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub widths: Vec<usize>,
}

/// One removal step of a prune curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePoint {
    /// Features removed so far, this one included.
    pub removed: usize,
    pub layer: usize,
    /// Feature index at the moment of removal (indices shift as earlier
    /// features of the same layer disappear).
    pub feature: usize,
    pub score: f64,
    pub params: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneCurve {
    pub metric: Metric,
    pub baseline: CurveBaseline,
    pub points: Vec<PrunePoint>,
}

/// Greedily remove the least-important feature until `max_removals` (or no
/// removable feature is left), re-scoring after every removal. Batchnorm
/// running statistics are recomputed over `stat_data` and the network is
/// evaluated on `eval_data` after each step. Returns the curve plus the final
/// shrunken network.
#[allow(clippy::too_many_arguments)]
pub fn prune_curve(
    arch: &ArchSpec,
    store: &ParamStore,
    metric: Metric,
    snapshot: Option<&InitSnapshot>,
    stat_data: &Dataset,
    eval_data: &Dataset,
    batch_size: usize,
    max_removals: Option<usize>,
) -> Result<(PruneCurve, ArchSpec, ParamStore)> {
    let mut arch = arch.clone();
    let mut store = store.clone();
    let mut snapshot = snapshot.cloned();

    let (loss, acc) = evaluate(&arch, &store, eval_data, batch_size)?;
    let baseline = CurveBaseline {
        params: store.param_count(),
        test_loss: loss,
        test_accuracy: acc,
        widths: arch.widths(),
    };

    let mut points = Vec::new();
    let budget = max_removals.unwrap_or(usize::MAX);
    while points.len() < budget {
        let importance = compute_importance(
            &arch,
            &store,
            metric,
            snapshot.as_ref(),
            Some((stat_data, batch_size)),
        )?;
        let ranked = rank_features(&arch, &importance);
        let Some(&(score, layer, feature)) = ranked.first() else {
            break; // every remaining layer is down to one feature
        };
        let (new_arch, new_store) = prune_feature(&arch, &store, layer, feature)?;
        if let Some(snap) = &snapshot {
            snapshot = Some(prune_snapshot(snap, &arch, layer, feature)?);
        }
        arch = new_arch;
        store = new_store;
        recompute_bn_stats(&arch, &mut store, stat_data.image_batches(batch_size))?;
        let (loss, acc) = evaluate(&arch, &store, eval_data, batch_size)?;
        points.push(PrunePoint {
            removed: points.len() + 1,
            layer,
            feature,
            score,
            params: store.param_count(),
            test_loss: loss,
            test_accuracy: acc,
            widths: arch.widths(),
        });
    }

    Ok((PruneCurve { metric, baseline, points }, arch, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerSpec;
    use crate::data::{gen_synthetic, Normalizer, SyntheticTaskSpec};
    use crate::net::{forward_eval, ParamStore};
    use crate::rng::Rng;
    use crate::train::{fit, AugmentConfig};
    use crate::optim::TrainConfig;

    #[test]
    fn remove_helpers_cut_the_right_slices() {
        let t = Tensor::from_vec(&[3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        assert_eq!(remove_axis0(&t, 1).data(), &[0.0, 1.0, 20.0, 21.0]);
        assert_eq!(remove_columns(&t, 0, 1).data(), &[1.0, 11.0, 21.0]);
        let c = Tensor::from_vec(&[2, 3, 1, 1], vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]).unwrap();
        let cut = remove_axis1(&c, 1);
        assert_eq!(cut.shape(), &[2, 2, 1, 1]);
        assert_eq!(cut.data(), &[0.0, 2.0, 10.0, 12.0]);
    }

    fn conv_tower() -> ArchSpec {
        ArchSpec {
            input_shape: [1, 6, 6],
            num_classes: 2,
            bn_epsilon: 1e-3,
            layers: vec![
                LayerSpec::conv(3, (3, 3), 1, 1),
                LayerSpec::batchnorm(),
                LayerSpec::relu(),
                LayerSpec::maxpool((2, 2), 2),
                LayerSpec::conv(4, (3, 3), 1, 1),
                LayerSpec::batchnorm(),
                LayerSpec::relu(),
                LayerSpec::flatten(),
                LayerSpec::linear(2),
            ],
        }
    }

    #[test]
    fn pruning_conv_cuts_bn_and_consumer_channel() {
        let arch = conv_tower();
        let store = ParamStore::init(&arch, &mut Rng::new(1)).unwrap();
        let (pa, ps) = prune_feature(&arch, &store, 0, 1).unwrap();
        assert_eq!(pa.layers[0].width, Some(2));
        pa.validate().unwrap();
        ps.check_shapes(&pa).unwrap();
        // Surviving slices are bit-identical to the originals.
        let w0 = store.layers[0].weight().unwrap();
        let w0p = ps.layers[0].weight().unwrap();
        assert_eq!(w0p.feature(0), w0.feature(0));
        assert_eq!(w0p.feature(1), w0.feature(2));
        // Consumer conv lost input channel 1.
        let w4 = store.layers[4].weight().unwrap();
        let w4p = ps.layers[4].weight().unwrap();
        assert_eq!(w4p.shape(), &[4, 2, 3, 3]);
        // Channel 0 kept, channel 2 shifted into slot 1.
        assert_eq!(&w4p.feature(0)[..9], &w4.feature(0)[..9]);
        assert_eq!(&w4p.feature(0)[9..18], &w4.feature(0)[18..27]);
    }

    #[test]
    fn pruning_before_flatten_removes_column_block() {
        let arch = conv_tower();
        let store = ParamStore::init(&arch, &mut Rng::new(2)).unwrap();
        // Prune a feature of the second conv (input to the flattened linear).
        let (pa, ps) = prune_feature(&arch, &store, 4, 2).unwrap();
        pa.validate().unwrap();
        ps.check_shapes(&pa).unwrap();
        // Feature maps at the flatten are 3x3, so 9 columns per channel.
        let w = store.layers[8].weight().unwrap(); // [2, 4*9]
        let wp = ps.layers[8].weight().unwrap(); // [2, 3*9]
        assert_eq!(wp.shape(), &[2, 27]);
        for row in 0..2 {
            assert_eq!(&wp.data()[row * 27..row * 27 + 18], &w.data()[row * 36..row * 36 + 18]);
            assert_eq!(&wp.data()[row * 27 + 18..row * 27 + 27], &w.data()[row * 36 + 27..row * 36 + 36]);
        }
    }

    #[test]
    fn pruning_a_disconnected_feature_preserves_logits() {
        // Zero every path out of conv feature 1; pruning it must then change
        // nothing about the function the network computes.
        let arch = conv_tower();
        let mut store = ParamStore::init(&arch, &mut Rng::new(3)).unwrap();
        if let LayerParams::Conv { weight, .. } = &mut store.layers[4] {
            // Input channel 1 of the consumer conv: zero it in every feature.
            let inner = 9;
            let channels = 3;
            for f in 0..4 {
                let base = f * channels * inner + inner;
                weight.data_mut()[base..base + inner].fill(0.0);
            }
        }
        let mut x = Tensor::zeros(&[5, 1, 6, 6]);
        Rng::new(4).fill_normal(x.data_mut(), 0.0, 1.0);
        let before = forward_eval(&arch, &store, &x).unwrap();
        let (pa, ps) = prune_feature(&arch, &store, 0, 1).unwrap();
        let after = forward_eval(&pa, &ps, &x).unwrap();
        let diff = before
            .data()
            .iter()
            .zip(after.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "logits moved by {diff}");
    }

    #[test]
    fn prune_refusals() {
        let arch = conv_tower();
        let store = ParamStore::init(&arch, &mut Rng::new(5)).unwrap();
        // Classifier features are not prunable.
        assert!(prune_feature(&arch, &store, 8, 0).is_err());
        // Nonexistent feature.
        assert!(prune_feature(&arch, &store, 0, 3).is_err());
        // Width-1 layer.
        let mut narrow = arch.clone();
        narrow.layers[0].width = Some(1);
        let nstore = ParamStore::init(&narrow, &mut Rng::new(5)).unwrap();
        assert!(prune_feature(&narrow, &nstore, 0, 0).is_err());
        // Coupled layer.
        let mut coupled = arch.clone();
        coupled.layers[0].couple_group = Some(1);
        coupled.layers[0].width = Some(4);
        let cstore = ParamStore::init(&coupled, &mut Rng::new(5)).unwrap();
        assert!(prune_feature(&coupled, &cstore, 0, 0).is_err());
    }

    #[test]
    fn snapshot_surgery_tracks_store_surgery() {
        let arch = conv_tower();
        let store = ParamStore::init(&arch, &mut Rng::new(6)).unwrap();
        let snap = InitSnapshot::capture(&arch, &store);
        let (pa, ps) = prune_feature(&arch, &store, 0, 0).unwrap();
        let psnap = prune_snapshot(&snap, &arch, 0, 0).unwrap();
        // Drift of an untrained net against its own snapshot is zero.
        let ivs = self_resemblance_all(&pa, &ps, &psnap).unwrap();
        for iv in ivs {
            for (s, d) in iv.scores.iter().zip(&iv.degenerate) {
                assert!(*d || s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_features_sorts_ascending_with_layer_ties() {
        let arch = conv_tower();
        let importance = vec![
            ImportanceVector {
                layer: 0,
                metric: Metric::L1Norm,
                scores: vec![0.5, 0.1, 0.5],
                degenerate: vec![false; 3],
            },
            ImportanceVector {
                layer: 4,
                metric: Metric::L1Norm,
                scores: vec![0.1, 0.9, 0.5, 0.2],
                degenerate: vec![false; 4],
            },
        ];
        let ranked = rank_features(&arch, &importance);
        assert_eq!(ranked[0], (0.1, 0, 1)); // tie on 0.1 resolves to lower layer
        assert_eq!(ranked[1], (0.1, 4, 0));
        assert_eq!(ranked[2], (0.2, 4, 3));
        // Tie on 0.5: (0,0) before (0,2) before (4,2).
        assert_eq!(ranked[3], (0.5, 0, 0));
        assert_eq!(ranked[4], (0.5, 0, 2));
        assert_eq!(ranked[5], (0.5, 4, 2));
    }

    #[test]
    fn prune_curve_walks_down_to_unit_widths() {
        let spec = SyntheticTaskSpec {
            classes: 2,
            image_size: 6,
            n_train: 32,
            n_test: 16,
            difficulty: 0.2,
            seed: 8,
        };
        let (train, test) = gen_synthetic(&spec).unwrap();
        let norm = Normalizer::fit(&train);
        let train = norm.apply(&train).unwrap();
        let test = norm.apply(&test).unwrap();
        let arch = conv_tower();
        let cfg = TrainConfig {
            lr0: 0.05,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            batch_size: 16,
            epochs: 2,
            schedule: vec![],
        };
        let result = fit(&arch, &train, None, &cfg, &AugmentConfig::default(), 2, 0).unwrap();
        let (curve, final_arch, final_store) = prune_curve(
            &arch, &result.store, Metric::L1Norm, None, &train, &test, 16, None,
        )
        .unwrap();
        // 3 + 4 features, two must survive (one per layer): 5 removals.
        assert_eq!(curve.points.len(), 5);
        assert_eq!(final_arch.widths(), vec![1, 1]);
        final_store.check_shapes(&final_arch).unwrap();
        for (i, p) in curve.points.iter().enumerate() {
            assert_eq!(p.removed, i + 1);
        }
        // Parameter counts strictly decrease.
        let mut prev = curve.baseline.params;
        for p in &curve.points {
            assert!(p.params < prev);
            prev = p.params;
        }
        // Deterministic.
        let (curve2, _, _) = prune_curve(
            &arch, &result.store, Metric::L1Norm, None, &train, &test, 16, None,
        )
        .unwrap();
        assert_eq!(curve, curve2);
    }

    #[test]
    fn prune_curve_respects_budget_and_metric_requirements() {
        let arch = conv_tower();
        let store = ParamStore::init(&arch, &mut Rng::new(9)).unwrap();
        let spec = SyntheticTaskSpec {
            classes: 2,
            image_size: 6,
            n_train: 16,
            n_test: 8,
            difficulty: 0.2,
            seed: 10,
        };
        let (train, test) = gen_synthetic(&spec).unwrap();
        let (curve, ..) = prune_curve(
            &arch, &store, Metric::L1Norm, None, &train, &test, 8, Some(2),
        )
        .unwrap();
        assert_eq!(curve.points.len(), 2);
        // Drift metric without a snapshot is an error.
        assert!(prune_curve(
            &arch, &store, Metric::SelfResemblance, None, &train, &test, 8, Some(1),
        )
        .is_err());
    }
}
