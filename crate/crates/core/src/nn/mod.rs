//! Tensor primitives and the convolutional intent network.
//!
//! Four blocks of (4-tap conv, BN, ReLU, 2x1 max-pool, 1x1 conv, BN, ReLU)
//! turn a (time, 41, 1) feature map into a (t', 1, 256) map, which is
//! max-pooled over time into a 256-value embedding. Three dense+BN+ReLU
//! layers and a softmax layer map the embedding to intent posteriors.
//! All convolutions are valid (no padding) and pooling drops a trailing odd
//! step, so 100 input frames yield 3 final positions.

mod layers;
mod model;
mod tensor;

use thiserror::Error;

pub use layers::{
    batchnorm_infer, global_max_pool, maxpool_time, relu_inplace, softmax, BatchNorm, Conv2d, ConvGeom,
    Dense, BN_EPS,
};
pub(crate) use layers::{
    conv_backward, conv_forward, global_max_pool_with_argmax,
    maxpool_time_with_argmax,
};
pub use model::{
    build_paper_model, classify_frames, conv_stack_forward, conv_stack_trace, frames_to_tensor,
    head_forward, head_trace, output_length, Activation, Architecture, BlockSpec, ConvBlock,
    ConvStackOutput, HiddenLayer, IntentPosterior, LayerKind, LayerSpec, ModelWeights, PooledVector,
    TensorInfo, BLOCK_KERNEL_TIME,
};
pub use tensor::{Real, Tensor3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel {kernel:?} larger than input {input:?}")]
    KernelTooLarge {
        kernel: (usize, usize),
        input: (usize, usize),
    },
    #[error("max-pooling needs at least 2 time steps, got {time}")]
    PoolInputTooShort { time: usize },
    #[error("segment of {frames} frames is shorter than the {min}-frame receptive field")]
    SegmentTooShort { frames: usize, min: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(t: usize, seed: u64) -> Tensor3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_vec(t, 41, 1, (0..t * 41).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Random BN statistics so that ReLUs are not trivially dead or alive.
    fn randomized_model(seed: u64) -> ModelWeights<f32> {
        let (_, mut w) = build_paper_model(31, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for (info, data) in w.tensors_mut() {
            if info.name.contains(".bn.") || info.name.ends_with("bias") {
                let (lo, hi) = if info.name.ends_with("running_var") { (0.5, 2.0) } else { (-0.3, 0.3) };
                data.iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
            }
        }
        w
    }

    #[test]
    fn shape_chain_for_100_frames() {
        let w = randomized_model(1);
        let (maps, out) = conv_stack_trace(&random_input(100, 2), &w).unwrap();
        let dims: Vec<(usize, usize, usize)> = maps.iter().map(|m| m.dims()).collect();
        assert_eq!(
            dims,
            vec![
                (97, 1, 128),
                (48, 1, 128),
                (48, 1, 64),
                (45, 1, 128),
                (22, 1, 128),
                (22, 1, 64),
                (19, 1, 128),
                (9, 1, 128),
                (9, 1, 64),
                (6, 1, 256),
                (3, 1, 256),
                (3, 1, 256),
            ]
        );
        assert_eq!(out.feature_map.dims(), (3, 1, 256));
        assert_eq!(out.pooled.len(), 256);
        let (acts, logits) = head_trace(&out.pooled, &w).unwrap();
        let widths: Vec<usize> = acts.iter().map(|a| a.len()).collect();
        assert_eq!(widths, vec![256, 196, 128]);
        assert_eq!(logits.len(), 31);
    }

    #[test]
    fn minimum_segment() {
        let w = randomized_model(3);
        let out = conv_stack_forward(&random_input(61, 4), &w).unwrap();
        assert_eq!(out.feature_map.dims(), (1, 1, 256));
        assert_eq!(
            conv_stack_forward(&random_input(60, 4), &w).unwrap_err(),
            NnError::SegmentTooShort { frames: 60, min: 61 }
        );
    }

    #[test]
    fn layer_list_has_17_entries() {
        let (specs, _) = build_paper_model(31, 0).unwrap();
        assert_eq!(specs.len(), 17);
        let count = |k| specs.iter().filter(|s| s.kind == k).count();
        assert_eq!(count(LayerKind::Conv2d), 8);
        assert_eq!(count(LayerKind::MaxPool), 4);
        assert_eq!(count(LayerKind::GlobalMaxPool), 1);
        assert_eq!(count(LayerKind::Dense), 4);
        let convs: Vec<(usize, usize, usize)> = specs
            .iter()
            .filter(|s| s.kind == LayerKind::Conv2d)
            .map(|s| (s.kernel.0, s.kernel.1, s.out_channels))
            .collect();
        assert_eq!(
            convs,
            vec![(4, 41, 128), (1, 1, 64), (4, 1, 128), (1, 1, 64), (4, 1, 128), (1, 1, 64), (4, 1, 256), (1, 1, 256)]
        );
        assert_eq!(specs.last().unwrap().activation, Activation::Softmax);
        assert!(!specs.last().unwrap().has_batchnorm);
    }

    #[test]
    fn parameter_count_matches_shape_oracle() {
        // (kernel scalars, outputs, has BN) straight from the layer table
        let table: [(usize, usize, bool); 12] = [
            (4 * 41, 128, true),
            (128, 64, true),
            (4 * 64, 128, true),
            (128, 64, true),
            (4 * 64, 128, true),
            (128, 64, true),
            (4 * 64, 256, true),
            (256, 256, true),
            (256, 256, true),
            (256, 196, true),
            (196, 128, true),
            (128, 31, false),
        ];
        let oracle: usize = table
            .iter()
            .map(|&(k, o, bn)| k * o + o + if bn { 2 * o } else { 0 })
            .sum();
        assert_eq!(oracle, 391_979);
        let (specs, w) = build_paper_model(31, 0).unwrap();
        assert_eq!(specs.iter().map(LayerSpec::learnable_parameters).sum::<usize>(), oracle);
        assert_eq!(w.learnable_parameter_count(), oracle);
        // plus running mean/var for 11 BN layers
        assert_eq!(w.total_scalar_count(), oracle + 2 * (128 + 64) * 3 + 2 * 512 + 2 * (256 + 196 + 128));
    }

    #[test]
    fn output_length_closed_form() {
        assert_eq!(output_length(100), Ok(3));
        assert_eq!(output_length(61), Ok(1));
        assert!(output_length(60).is_err());
        let arch = Architecture::standard(31);
        assert_eq!(arch.min_frames(), 61);
        assert_eq!(arch.cumulative_stride(), 16);
        for n in 61..=2000 {
            assert_eq!(arch.output_length(n), Some(output_length(n).unwrap()), "n = {n}");
        }
        assert_eq!(arch.output_length(60), None);
    }

    #[test]
    fn receptive_field_and_stride_by_perturbation() {
        let w = randomized_model(5);
        let n = 160;
        let base = random_input(n, 6);
        let ref_map = conv_stack_forward(&base, &w).unwrap().feature_map;
        let positions = ref_map.time();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let j = rng.gen_range(0..n);
            let mut x = base.clone();
            for f in 0..41 {
                let v = x.get(j, f, 0);
                x.set(j, f, 0, v + 25.0 * if f % 2 == 0 { 1.0 } else { -1.0 });
            }
            let map = conv_stack_forward(&x, &w).unwrap().feature_map;
            for p in 0..positions {
                let changed = map.row(p) != ref_map.row(p);
                let inside = 16 * p <= j && j <= 16 * p + 60;
                assert_eq!(changed, inside, "frame {j}, position {p}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let w = randomized_model(8);
        let x = random_input(137, 9);
        let a = conv_stack_forward(&x, &w).unwrap();
        let b = conv_stack_forward(&x, &w).unwrap();
        assert_eq!(a.pooled, b.pooled);
        assert_eq!(head_forward(&a.pooled, &w).unwrap(), head_forward(&b.pooled, &w).unwrap());
    }

    #[test]
    fn zero_output_layer_gives_uniform_posterior() {
        let mut w = randomized_model(10);
        w.output.weight.iter_mut().for_each(|v| *v = 0.0);
        w.output.bias.iter_mut().for_each(|v| *v = 0.0);
        let pooled = conv_stack_forward(&random_input(80, 11), &w).unwrap().pooled;
        let post = head_forward(&pooled, &w).unwrap();
        for p in post.probs {
            assert!((p - 1.0 / 31.0).abs() < 1e-7);
        }
    }

    #[test]
    fn logit_shift_leaves_posterior_unchanged() {
        let mut w = randomized_model(12);
        let pooled = conv_stack_forward(&random_input(90, 13), &w).unwrap().pooled;
        let before = head_forward(&pooled, &w).unwrap();
        w.output.bias.iter_mut().for_each(|v| *v += 3.75);
        let after = head_forward(&pooled, &w).unwrap();
        for (a, b) in before.probs.iter().zip(&after.probs) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn head_rejects_wrong_width() {
        let w = randomized_model(14);
        assert!(matches!(
            head_forward(&PooledVector(vec![0.0f32; 255]), &w),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn architecture_validation() {
        assert!(build_paper_model(1, 0).is_err());
        assert!(build_paper_model(2, 0).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn posterior_is_a_distribution(seed in 0u64..1000, len in 61usize..200) {
            let w = randomized_model(seed % 4);
            let post = head_forward(&conv_stack_forward(&random_input(len, seed), &w).unwrap().pooled, &w).unwrap();
            let s: f32 = post.probs.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(post.probs.iter().all(|&p| p > 0.0 && p < 1.0));
        }

        #[test]
        fn global_pool_ignores_time_order(seed in 0u64..1000, t in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..t * 6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let map = Tensor3::from_vec(t, 1, 6, data).unwrap();
            let mut order: Vec<usize> = (0..t).collect();
            for i in (1..t).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let shuffled: Vec<f32> = order.iter().flat_map(|&r| map.row(r).to_vec()).collect();
            let shuffled = Tensor3::from_vec(t, 1, 6, shuffled).unwrap();
            prop_assert_eq!(global_max_pool(&map).unwrap(), global_max_pool(&shuffled).unwrap());
        }
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let c: Vec<f32> = (0..8).map(|k| k as f32 * 0.5).collect();
        let data: Vec<f32> = (0..5).flat_map(|_| c.clone()).collect();
        let map = Tensor3::from_vec(5, 1, 8, data).unwrap();
        assert_eq!(global_max_pool(&map).unwrap(), c);
    }
}
