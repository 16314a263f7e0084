mod common;

use common::{gradient_check, random_sequences, tiny_arch};
use segslu::feat::FeatureSequence;
use segslu::nn::ModelWeights;
use segslu::train::Batch;

/// Step at which central-difference truncation and rounding error both sit
/// far below the tolerance for this model.
const STEP: f64 = 1e-6;

fn batch(lengths: &[usize], labels: &[usize], pad_to: usize, seed: u64) -> Batch {
    let seqs = random_sequences(lengths, seed);
    let refs: Vec<&FeatureSequence> = seqs.iter().collect();
    Batch::padded_to(&refs, labels, pad_to, -7.0).unwrap()
}

#[test]
fn backprop_matches_finite_differences() {
    let w = ModelWeights::<f64>::init(tiny_arch(5), 11).unwrap();
    let b = batch(&[70, 70, 70], &[0, 3, 4], 70, 12);
    let errs = gradient_check(&b, &w, STEP);
    assert_eq!(errs.len(), 2 * 8 + 2 * 4 + 2);
    for (name, e) in errs {
        assert!(e < 1e-4, "{name} relative error {e}");
    }
}

#[test]
fn backprop_matches_finite_differences_with_mixed_lengths() {
    let w = ModelWeights::<f64>::init(tiny_arch(4), 21).unwrap();
    let b = batch(&[40, 70, 55, 62], &[1, 2, 3, 0], 80, 22);
    for (name, e) in gradient_check(&b, &w, STEP) {
        assert!(e < 1e-4, "{name} relative error {e}");
    }
}

#[test]
fn finite_difference_error_shrinks_with_step() {
    let w = ModelWeights::<f64>::init(tiny_arch(5), 11).unwrap();
    let b = batch(&[70, 70, 70], &[0, 3, 4], 70, 12);
    let coarse = gradient_check(&b, &w, 1e-3);
    let fine = gradient_check(&b, &w, 1e-4);
    for ((name, ec), (_, ef)) in coarse.iter().zip(&fine) {
        // second-order convergence: a 10x smaller step cuts the error ~100x
        assert!(*ef < 1e-6 || *ef < ec / 30.0, "{name}: {ec:.3e} -> {ef:.3e}");
    }
}
