#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segslu::feat::FeatureSequence;
use segslu::nn::{Architecture, BlockSpec, ModelWeights};
use segslu::train::{batch_loss, Batch};

/// Two-block, eight-channel model with the same layer kinds as the full one.
pub fn tiny_arch(num_intents: usize) -> Architecture {
    Architecture {
        input_dim: 41,
        blocks: vec![
            BlockSpec { conv_channels: 8, proj_channels: 8 },
            BlockSpec { conv_channels: 8, proj_channels: 8 },
        ],
        hidden: vec![8, 8],
        num_intents,
    }
}

pub fn random_sequence(frames: usize, rng: &mut ChaCha8Rng) -> FeatureSequence {
    FeatureSequence::new(
        (0..frames)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0)))
            .collect(),
    )
    .unwrap()
}

pub fn random_sequences(lengths: &[usize], seed: u64) -> Vec<FeatureSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lengths.iter().map(|&n| random_sequence(n, &mut rng)).collect()
}

/// Central-difference gradient of the training-mode batch loss for every
/// learnable tensor, in layout order.
pub fn numeric_gradients(batch: &Batch, weights: &ModelWeights<f64>, h: f64) -> Vec<(String, Vec<f64>)> {
    let mut w = weights.clone();
    let names: Vec<(String, usize)> = w
        .tensors()
        .into_iter()
        .filter(|(info, _)| info.learnable)
        .map(|(info, s)| (info.name, s.len()))
        .collect();
    let mut out = Vec::new();
    for (k, (name, len)) in names.into_iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = w.learnable_mut()[k].1[i];
            w.learnable_mut()[k].1[i] = orig + h;
            let plus = batch_loss(batch, &w).unwrap();
            w.learnable_mut()[k].1[i] = orig - h;
            let minus = batch_loss(batch, &w).unwrap();
            w.learnable_mut()[k].1[i] = orig;
            *gi = (plus - minus) / (2.0 * h);
        }
        out.push((name, g));
    }
    out
}

/// Below this norm a gradient tensor counts as identically zero (biases
/// feeding a batch norm), and the plain difference norm is reported instead.
pub const VANISHING_NORM: f64 = 1e-6;

/// ||a - b|| / max(||a||, ||b||), or ||a - b|| when both gradients vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < VANISHING_NORM {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Per-tensor relative error between backprop and central differences.
pub fn gradient_check(batch: &Batch, weights: &ModelWeights<f64>, h: f64) -> Vec<(String, f64)> {
    let analytic = segslu::train::loss_and_grad(batch, weights).unwrap().grads;
    let analytic: Vec<Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .filter(|(info, _)| info.learnable)
        .map(|(_, s)| s.to_vec())
        .collect();
    numeric_gradients(batch, weights, h)
        .into_iter()
        .zip(analytic)
        .map(|((name, n), a)| {
            (name, relative_error(&a, &n))
        })
        .collect()
}
