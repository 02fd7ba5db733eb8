//! Central finite-difference verification of the analytic gradients.
//!
//! `backward` differentiates the batch-statistics forward pass, so the
//! reference here is the loss of `forward_batchstats` under single-parameter
//! perturbations. Both network styles are covered: the pooled/flattened one
//! and the all-convolutional one with a terminal classifier convolution.

use widenet::arch::{ArchSpec, LayerSpec};
use widenet::net::{backward, cross_entropy, forward_batchstats, ParamStore};
use widenet::rng::Rng;
use widenet::tensor::Tensor;

/// Loss of the batch-statistics forward pass on a fixed batch.
fn loss(arch: &ArchSpec, store: &ParamStore, x: &Tensor, labels: &[usize]) -> f64 {
    let (logits, _) = forward_batchstats(arch, store, x).unwrap();
    cross_entropy(&logits, labels).unwrap().0
}

/// Compare analytic gradients against central differences on `samples`
/// randomly chosen parameters. Returns (fraction within `tol`, worst relative
/// error).
fn gradcheck(arch: &ArchSpec, seed: u64, samples: usize, h: f64, tol: f64) -> (f64, f64) {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::init(arch, &mut rng).unwrap();
    // Random biases and batchnorm shifts so no gradient path is trivially
    // zero or symmetric.
    for p in store.params_mut() {
        if p.name == "bias" || p.name == "beta" {
            rng.fill_normal(p.tensor.data_mut(), 0.0, 0.5);
        }
        if p.name == "gamma" {
            for g in p.tensor.data_mut() {
                *g = 1.0 + 0.3 * rng.uniform(-1.0, 1.0);
            }
        }
    }
    let n = 4;
    let mut x = Tensor::zeros(&[n, arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]]);
    rng.fill_normal(x.data_mut(), 0.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(arch.num_classes)).collect();

    let (logits, cache) = forward_batchstats(arch, &store, &x).unwrap();
    let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
    let grads = backward(arch, &store, &cache, &dlogits).unwrap();

    let total: usize = store.params().iter().map(|p| p.tensor.len()).sum();
    let mut ok = 0usize;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let flat = rng.below(total);
        // Locate the tensor and offset for this flat index.
        let (slot, offset) = {
            let mut rest = flat;
            let mut found = None;
            for (k, p) in store.params().iter().enumerate() {
                if rest < p.tensor.len() {
                    found = Some((k, rest));
                    break;
                }
                rest -= p.tensor.len();
            }
            found.unwrap()
        };
        let analytic = grads.params()[slot].tensor.data()[offset];
        let orig = store.params()[slot].tensor.data()[offset];

        store.params_mut()[slot].tensor.data_mut()[offset] = orig + h;
        let up = loss(arch, &store, &x, &labels);
        store.params_mut()[slot].tensor.data_mut()[offset] = orig - h;
        let down = loss(arch, &store, &x, &labels);
        store.params_mut()[slot].tensor.data_mut()[offset] = orig;

        let numeric = (up - down) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs());
        let rel = if denom < 1e-10 {
            0.0
        } else {
            (analytic - numeric).abs() / denom
        };
        worst = worst.max(rel);
        if rel < tol {
            ok += 1;
        }
    }
    (ok as f64 / samples as f64, worst)
}

fn pooled_arch() -> ArchSpec {
    ArchSpec {
        input_shape: [2, 8, 8],
        num_classes: 3,
        bn_epsilon: 1e-3,
        layers: vec![
            LayerSpec::conv(4, (3, 3), 1, 1),
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::maxpool((2, 2), 2),
            LayerSpec::conv(5, (3, 3), 1, 0),
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::flatten(),
            LayerSpec::linear(6),
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::linear(3),
        ],
    }
}

fn all_conv_arch() -> ArchSpec {
    ArchSpec {
        input_shape: [2, 6, 6],
        num_classes: 3,
        bn_epsilon: 1e-3,
        layers: vec![
            LayerSpec::conv(4, (3, 3), 2, 1), // strided conv in place of pooling
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::classifier_conv(),
        ],
    }
}

#[test]
fn gradients_match_finite_differences_pooled_net() {
    let (frac, worst) = gradcheck(&pooled_arch(), 101, 150, 1e-5, 1e-4);
    assert!(frac >= 0.99, "only {:.1}% within 1e-4", frac * 100.0);
    assert!(worst < 1e-2, "worst relative error {worst}");
}

#[test]
fn gradients_match_finite_differences_all_conv_net() {
    let (frac, worst) = gradcheck(&all_conv_arch(), 202, 150, 1e-5, 1e-4);
    assert!(frac >= 0.99, "only {:.1}% within 1e-4", frac * 100.0);
    assert!(worst < 1e-2, "worst relative error {worst}");
}

#[test]
fn gradients_match_on_overlapping_pool_windows() {
    // 3x3 stride-2 pooling revisits input elements from several windows;
    // their gradient contributions must accumulate.
    let arch = ArchSpec {
        input_shape: [1, 7, 7],
        num_classes: 2,
        bn_epsilon: 1e-3,
        layers: vec![
            LayerSpec::conv(3, (3, 3), 1, 1),
            LayerSpec::relu(),
            LayerSpec::maxpool((3, 3), 2),
            LayerSpec::flatten(),
            LayerSpec::linear(2),
        ],
    };
    let (frac, worst) = gradcheck(&arch, 303, 120, 1e-5, 1e-4);
    assert!(frac >= 0.99, "only {:.1}% within 1e-4", frac * 100.0);
    assert!(worst < 1e-2, "worst relative error {worst}");
}
