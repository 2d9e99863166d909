#![allow(dead_code)]

use mtf_core::nn::{ParamStore, BN_EPS, LN_EPS};
use mtf_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Replaces every bias and layer-norm/batch-norm affine term (and BN running
/// statistics) with random values so reference checks see no zeros.
pub fn randomize_affine(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.params().keys().cloned().collect();
    for name in names {
        let shape = store.param(&name).unwrap().shape().to_vec();
        if name.ends_with(".bias") || name.ends_with(".beta") {
            store.set_param(&name, Tensor::from_fn(&shape, |_| rng.random_range(-0.3..0.3))).unwrap();
        } else if name.ends_with(".gamma") {
            store.set_param(&name, Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5))).unwrap();
        }
    }
    let buffers: Vec<(String, Vec<usize>)> = store.buffers().iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect();
    for (name, shape) in buffers {
        let t = if name.ends_with("running_mean") {
            Tensor::from_fn(&shape, |_| rng.random_range(-0.5..0.5))
        } else {
            Tensor::from_fn(&shape, |_| rng.random_range(0.5..2.0))
        };
        store.insert_buffer(name, t);
    }
}

pub fn zero_prefix(store: &mut ParamStore<f64>, prefix: &str) {
    let names: Vec<String> = store.params().keys().filter(|k| k.starts_with(prefix)).cloned().collect();
    for name in names {
        let shape = store.param(&name).unwrap().shape().to_vec();
        store.set_param(&name, Tensor::zeros(&shape)).unwrap();
    }
}

pub fn zero_biases(store: &mut ParamStore<f64>) {
    let names: Vec<String> = store.params().keys().filter(|k| k.ends_with(".bias")).cloned().collect();
    for name in names {
        let shape = store.param(&name).unwrap().shape().to_vec();
        store.set_param(&name, Tensor::zeros(&shape)).unwrap();
    }
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `x W + b` written as explicit loops.
pub fn linear(store: &ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.param(&format!("{name}.weight")).unwrap();
    let (i, o) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), i, "{name}");
    let b = store.param(&format!("{name}.bias")).unwrap().data();
    (0..o).map(|col| b[col] + (0..i).map(|r| x[r] * w.data()[r * o + col]).sum::<f64>()).collect()
}

pub fn layer_norm(store: &ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let gamma = store.param(&format!("{name}.gamma")).unwrap().data();
    let beta = store.param(&format!("{name}.beta")).unwrap().data();
    x.iter().enumerate().map(|(c, v)| (v - mean) / (var + LN_EPS).sqrt() * gamma[c] + beta[c]).collect()
}

pub fn bn_eval(store: &ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let mean = store.buffer(&format!("{name}.running_mean")).unwrap().data();
    let var = store.buffer(&format!("{name}.running_var")).unwrap().data();
    let gamma = store.param(&format!("{name}.gamma")).unwrap().data();
    let beta = store.param(&format!("{name}.beta")).unwrap().data();
    (0..x.len()).map(|c| (x[c] - mean[c]) / (var[c] + BN_EPS).sqrt() * gamma[c] + beta[c]).collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
