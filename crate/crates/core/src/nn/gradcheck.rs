//! Central-difference gradient checks for layers in `f64`.

use super::param::{Layer, Mode};
use super::tensor::Tensor;

const STEP: f64 = 1e-6;
const MAX_PROBES: usize = 48;

fn probe_indices(len: usize) -> Vec<usize> {
    if len <= MAX_PROBES {
        (0..len).collect()
    } else {
        (0..MAX_PROBES).map(|i| i * (len - 1) / (MAX_PROBES - 1)).collect()
    }
}

fn weights(len: usize) -> Vec<f64> {
    (0..len).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect()
}

fn loss(layer: &mut dyn Layer<f64>, x: &Tensor<f64>) -> f64 {
    let y = layer.forward(x.clone(), Mode::Train);
    y.data().iter().zip(weights(y.numel())).map(|(a, b)| a * b).sum()
}

fn perturb(layer: &mut dyn Layer<f64>, which: usize, idx: usize, delta: f64) {
    let mut k = 0;
    layer.visit(&mut |p| {
        if p.trainable {
            if k == which {
                p.value[idx] += delta;
            }
            k += 1;
        }
    });
}

fn assert_close(what: &str, analytic: f64, numeric: f64, tol: f64) {
    let scale = analytic.abs().max(numeric.abs());
    assert!(
        (analytic - numeric).abs() <= tol * scale + 1e-8,
        "{what}: analytic {analytic:e} vs numeric {numeric:e}"
    );
}

/// Compares backward-pass gradients of `Σ wᵢ·yᵢ` against central differences
/// for a sample of input elements and of every trainable parameter.
pub fn check_layer(layer: &mut dyn Layer<f64>, x: Tensor<f64>, tol: f64) {
    layer.zero_grad();
    let y = layer.forward(x.clone(), Mode::Train);
    let dy = Tensor::from_vec(y.shape(), weights(y.numel()));
    let dx = layer.backward(dy);
    assert_eq!(dx.shape(), x.shape(), "input gradient shape");

    let mut grads = Vec::new();
    layer.visit(&mut |p| {
        if p.trainable {
            grads.push((p.name.clone(), p.grad.clone()));
        }
    });

    for i in probe_indices(x.numel()) {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let lp = loss(layer, &xp);
        xp.data_mut()[i] -= 2.0 * STEP;
        let lm = loss(layer, &xp);
        assert_close(&format!("input[{i}]"), dx.data()[i], (lp - lm) / (2.0 * STEP), tol);
    }
    for (k, (name, g)) in grads.iter().enumerate() {
        for i in probe_indices(g.len()) {
            perturb(layer, k, i, STEP);
            let lp = loss(layer, &x);
            perturb(layer, k, i, -2.0 * STEP);
            let lm = loss(layer, &x);
            perturb(layer, k, i, STEP);
            assert_close(&format!("{name}[{i}]"), g[i], (lp - lm) / (2.0 * STEP), tol);
        }
    }
}
