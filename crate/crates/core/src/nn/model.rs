use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    global_max_pool, maxpool_time, relu_inplace, softmax, BatchNorm, Conv2d, ConvGeom, Dense,
};
use super::tensor::{Real, Tensor3};
use super::NnError;
use crate::feat::{FeatureFrame, FEATURE_DIM};

/// Time extent of the first convolution in every block.
pub const BLOCK_KERNEL_TIME: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub conv_channels: usize,
    pub proj_channels: usize,
}

/// Layer widths of the network. The full-size model is
/// `Architecture::standard(31)`; smaller instances keep the same layer kinds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub blocks: Vec<BlockSpec>,
    pub hidden: Vec<usize>,
    pub num_intents: usize,
}

impl Architecture {
    pub fn standard(num_intents: usize) -> Self {
        let block = |conv_channels, proj_channels| BlockSpec {
            conv_channels,
            proj_channels,
        };
        Self {
            input_dim: FEATURE_DIM,
            blocks: vec![block(128, 64), block(128, 64), block(128, 64), block(256, 256)],
            hidden: vec![256, 196, 128],
            num_intents,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.num_intents < 2 {
            return Err(NnError::InvalidArchitecture("need at least 2 intents".into()));
        }
        if self.blocks.is_empty() || self.input_dim == 0 {
            return Err(NnError::InvalidArchitecture("need at least one conv block".into()));
        }
        let zero_block = self
            .blocks
            .iter()
            .any(|b| b.conv_channels == 0 || b.proj_channels == 0);
        if zero_block || self.hidden.contains(&0) {
            return Err(NnError::InvalidArchitecture("zero-width layer".into()));
        }
        Ok(())
    }

    /// Channels of the pooled embedding.
    pub fn pooled_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.proj_channels)
    }

    /// Time steps after one block: valid conv then floor pooling.
    fn block_length(t: usize) -> Option<usize> {
        let t = t.checked_sub(BLOCK_KERNEL_TIME - 1)?;
        (t >= 2).then_some(t / 2)
    }

    /// Final conv-stack time positions for `num_frames` input frames,
    /// following the layers one by one.
    pub fn output_length(&self, num_frames: usize) -> Option<usize> {
        self.blocks
            .iter()
            .try_fold(num_frames, |t, _| Self::block_length(t))
            .filter(|&t| t >= 1)
    }

    /// Smallest input length that yields one output position.
    pub fn min_frames(&self) -> usize {
        self.blocks
            .iter()
            .fold(1, |t, _| 2 * t + BLOCK_KERNEL_TIME - 1)
    }

    /// Input frames between adjacent final positions.
    pub fn cumulative_stride(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut in_ch = 1;
        for (i, b) in self.blocks.iter().enumerate() {
            let k_freq = if i == 0 { self.input_dim } else { 1 };
            out.push(LayerSpec::conv(BLOCK_KERNEL_TIME, k_freq, in_ch, b.conv_channels));
            out.push(LayerSpec::pool(LayerKind::MaxPool, b.conv_channels));
            out.push(LayerSpec::conv(1, 1, b.conv_channels, b.proj_channels));
            in_ch = b.proj_channels;
        }
        out.push(LayerSpec::pool(LayerKind::GlobalMaxPool, in_ch));
        for &h in &self.hidden {
            out.push(LayerSpec::dense(in_ch, h, Activation::Relu));
            in_ch = h;
        }
        out.push(LayerSpec::dense(in_ch, self.num_intents, Activation::Softmax));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    MaxPool,
    Dense,
    GlobalMaxPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// (time, freq) extent; (2, 1) for max-pooling, (1, 1) for dense.
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_batchnorm: bool,
    pub activation: Activation,
}

impl LayerSpec {
    fn conv(k_time: usize, k_freq: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            kernel: (k_time, k_freq),
            in_channels,
            out_channels,
            has_batchnorm: true,
            activation: Activation::Relu,
        }
    }

    fn pool(kind: LayerKind, channels: usize) -> Self {
        Self {
            kind,
            kernel: if kind == LayerKind::MaxPool { (2, 1) } else { (0, 0) },
            in_channels: channels,
            out_channels: channels,
            has_batchnorm: false,
            activation: Activation::None,
        }
    }

    fn dense(in_channels: usize, out_channels: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense,
            kernel: (1, 1),
            in_channels,
            out_channels,
            has_batchnorm: activation == Activation::Relu,
            activation,
        }
    }

    /// Learnable scalars of this layer (BN gamma/beta included, running
    /// statistics excluded).
    pub fn learnable_parameters(&self) -> usize {
        let (kt, kf) = self.kernel;
        let bn = if self.has_batchnorm { 2 * self.out_channels } else { 0 };
        match self.kind {
            LayerKind::Conv2d | LayerKind::Dense => {
                kt * kf * self.in_channels * self.out_channels + self.out_channels + bn
            }
            _ => 0,
        }
    }
}

/// conv -> BN -> ReLU -> pool -> 1x1 conv -> BN -> ReLU
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub conv_bn: BatchNorm<T>,
    pub proj: Conv2d<T>,
    pub proj_bn: BatchNorm<T>,
}

/// dense -> BN -> ReLU
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer<T> {
    pub dense: Dense<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub arch: Architecture,
    pub blocks: Vec<ConvBlock<T>>,
    pub hidden: Vec<HiddenLayer<T>>,
    pub output: Dense<T>,
}

/// Name, shape and learnability of every tensor in serialization order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub learnable: bool,
}

fn push_conv_info(out: &mut Vec<TensorInfo>, name: &str, g: &ConvGeom) {
    out.push(TensorInfo {
        name: format!("{name}.kernel"),
        shape: vec![g.k_time, g.k_freq, g.in_ch, g.out_ch],
        learnable: true,
    });
    out.push(TensorInfo {
        name: format!("{name}.bias"),
        shape: vec![g.out_ch],
        learnable: true,
    });
}

fn push_dense_info(out: &mut Vec<TensorInfo>, name: &str, in_dim: usize, out_dim: usize) {
    out.push(TensorInfo {
        name: format!("{name}.weight"),
        shape: vec![in_dim, out_dim],
        learnable: true,
    });
    out.push(TensorInfo {
        name: format!("{name}.bias"),
        shape: vec![out_dim],
        learnable: true,
    });
}

fn push_bn_info(out: &mut Vec<TensorInfo>, name: &str, n: usize) {
    for (field, learnable) in [("gamma", true), ("beta", true), ("running_mean", false), ("running_var", false)] {
        out.push(TensorInfo {
            name: format!("{name}.bn.{field}"),
            shape: vec![n],
            learnable,
        });
    }
}

impl Architecture {
    /// Tensor layout implied by the architecture alone.
    pub fn tensor_layout(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        let mut in_ch = 1;
        for (i, b) in self.blocks.iter().enumerate() {
            let k_freq = if i == 0 { self.input_dim } else { 1 };
            let conv = ConvGeom {
                k_time: BLOCK_KERNEL_TIME,
                k_freq,
                in_ch,
                out_ch: b.conv_channels,
            };
            push_conv_info(&mut out, &format!("block{i}.conv"), &conv);
            push_bn_info(&mut out, &format!("block{i}.conv"), b.conv_channels);
            let proj = ConvGeom {
                k_time: 1,
                k_freq: 1,
                in_ch: b.conv_channels,
                out_ch: b.proj_channels,
            };
            push_conv_info(&mut out, &format!("block{i}.proj"), &proj);
            push_bn_info(&mut out, &format!("block{i}.proj"), b.proj_channels);
            in_ch = b.proj_channels;
        }
        for (i, &h) in self.hidden.iter().enumerate() {
            push_dense_info(&mut out, &format!("hidden{i}"), in_ch, h);
            push_bn_info(&mut out, &format!("hidden{i}"), h);
            in_ch = h;
        }
        push_dense_info(&mut out, "output", in_ch, self.num_intents);
        out
    }
}

fn bn_slices<T>(bn: &BatchNorm<T>) -> [&[T]; 4] {
    [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
}

fn bn_slices_mut<T>(bn: &mut BatchNorm<T>) -> [&mut [T]; 4] {
    [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var]
}

impl<T: Real> ModelWeights<T> {
    /// He-uniform weights, unit BN scale, deterministic in `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 1;
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for (i, b) in arch.blocks.iter().enumerate() {
            let k_freq = if i == 0 { arch.input_dim } else { 1 };
            let conv = Conv2d::he_uniform(
                ConvGeom {
                    k_time: BLOCK_KERNEL_TIME,
                    k_freq,
                    in_ch,
                    out_ch: b.conv_channels,
                },
                &mut rng,
            );
            let proj = Conv2d::he_uniform(
                ConvGeom {
                    k_time: 1,
                    k_freq: 1,
                    in_ch: b.conv_channels,
                    out_ch: b.proj_channels,
                },
                &mut rng,
            );
            blocks.push(ConvBlock {
                conv,
                conv_bn: BatchNorm::new(b.conv_channels),
                proj,
                proj_bn: BatchNorm::new(b.proj_channels),
            });
            in_ch = b.proj_channels;
        }
        let mut hidden = Vec::with_capacity(arch.hidden.len());
        for &h in &arch.hidden {
            hidden.push(HiddenLayer {
                dense: Dense::he_uniform(in_ch, h, &mut rng),
                bn: BatchNorm::new(h),
            });
            in_ch = h;
        }
        let output = Dense::he_uniform(in_ch, arch.num_intents, &mut rng);
        Ok(Self {
            arch,
            blocks,
            hidden,
            output,
        })
    }

    /// Data of every tensor, in the order of [`Architecture::tensor_layout`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv.kernel[..], &b.conv.bias[..]]);
            out.extend(bn_slices(&b.conv_bn));
            out.extend([&b.proj.kernel[..], &b.proj.bias[..]]);
            out.extend(bn_slices(&b.proj_bn));
        }
        for h in &self.hidden {
            out.extend([&h.dense.weight[..], &h.dense.bias[..]]);
            out.extend(bn_slices(&h.bn));
        }
        out.extend([&self.output.weight[..], &self.output.bias[..]]);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.conv.kernel[..], &mut b.conv.bias[..]]);
            out.extend(bn_slices_mut(&mut b.conv_bn));
            out.extend([&mut b.proj.kernel[..], &mut b.proj.bias[..]]);
            out.extend(bn_slices_mut(&mut b.proj_bn));
        }
        for h in &mut self.hidden {
            out.extend([&mut h.dense.weight[..], &mut h.dense.bias[..]]);
            out.extend(bn_slices_mut(&mut h.bn));
        }
        out.extend([&mut self.output.weight[..], &mut self.output.bias[..]]);
        out
    }

    pub fn tensors(&self) -> Vec<(TensorInfo, &[T])> {
        self.arch.tensor_layout().into_iter().zip(self.slices()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(TensorInfo, &mut [T])> {
        let layout = self.arch.tensor_layout();
        layout.into_iter().zip(self.slices_mut()).collect()
    }

    /// Learnable tensors only, mutable, in layout order.
    pub fn learnable_mut(&mut self) -> Vec<(TensorInfo, &mut [T])> {
        self.tensors_mut().into_iter().filter(|(i, _)| i.learnable).collect()
    }

    pub fn learnable_parameter_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(info, _)| info.learnable)
            .map(|(_, d)| d.len())
            .sum()
    }

    pub fn total_scalar_count(&self) -> usize {
        self.slices().iter().map(|d| d.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            arch: self.arch.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    conv: b.conv.cast(),
                    conv_bn: b.conv_bn.cast(),
                    proj: b.proj.cast(),
                    proj_bn: b.proj_bn.cast(),
                })
                .collect(),
            hidden: self
                .hidden
                .iter()
                .map(|h| HiddenLayer {
                    dense: h.dense.cast(),
                    bn: h.bn.cast(),
                })
                .collect(),
            output: self.output.cast(),
        }
    }
}

impl<T: Real> ModelWeights<T> {
    /// Rebuilds weights from per-tensor data in layout order.
    pub fn from_tensors(arch: Architecture, data: Vec<Vec<T>>) -> Result<Self, NnError> {
        let mut w = Self::init(arch, 0)?;
        let layout = w.arch.tensor_layout();
        if layout.len() != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                layout.len(),
                data.len()
            )));
        }
        for ((info, dst), src) in layout.iter().zip(w.slices_mut()).zip(data) {
            if dst.len() != src.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "{}: expected {} values, got {}",
                    info.name,
                    dst.len(),
                    src.len()
                )));
            }
            dst.copy_from_slice(&src);
        }
        if w
            .tensors()
            .iter()
            .any(|(info, d)| info.name.ends_with("running_var") && d.iter().any(|v| *v < T::zero()))
        {
            return Err(NnError::ShapeMismatch("negative running variance".into()));
        }
        Ok(w)
    }
}

/// Builds the layer list and freshly initialised weights of the full-size model.
pub fn build_paper_model(num_intents: usize, seed: u64) -> Result<(Vec<LayerSpec>, ModelWeights<f32>), NnError> {
    let arch = Architecture::standard(num_intents);
    let specs = arch.layer_specs();
    Ok((specs, ModelWeights::init(arch, seed)?))
}

/// Closed form of the full-size model's final time positions:
/// `floor((n - 61) / 16) + 1`.
pub fn output_length(num_frames: usize) -> Result<usize, NnError> {
    if num_frames < 61 {
        return Err(NnError::SegmentTooShort {
            frames: num_frames,
            min: 61,
        });
    }
    Ok((num_frames - 61) / 16 + 1)
}

/// Global max-pooled conv-stack embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector<T>(pub Vec<T>);

impl<T: Real> PooledVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentPosterior<T> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> IntentPosterior<T> {
    pub fn from_logits(logits: Vec<T>) -> Self {
        let probs = softmax(&logits);
        Self { logits, probs }
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }
}

#[derive(Debug, Clone)]
pub struct ConvStackOutput<T> {
    /// Final (time, 1, channels) map before global pooling.
    pub feature_map: Tensor3<T>,
    pub pooled: PooledVector<T>,
}

/// Packs frames into a (time, dim, 1) input map.
pub fn frames_to_tensor<T: Real>(frames: &[FeatureFrame]) -> Tensor3<T> {
    let data = frames
        .iter()
        .flat_map(|f| f.iter().map(|&v| T::from_f64_lossy(v)))
        .collect();
    Tensor3::from_vec(frames.len(), FEATURE_DIM, 1, data).expect("dims match frame layout")
}

fn check_input<T: Real>(input: &Tensor3<T>, weights: &ModelWeights<T>) -> Result<(), NnError> {
    let (t, f, c) = input.dims();
    if f != weights.arch.input_dim || c != 1 {
        return Err(NnError::ShapeMismatch(format!(
            "input map ({t}, {f}, {c}) does not match input dim {}",
            weights.arch.input_dim
        )));
    }
    let min = weights.arch.min_frames();
    if t < min {
        return Err(NnError::SegmentTooShort { frames: t, min });
    }
    Ok(())
}

fn block_forward<T: Real>(
    block: &ConvBlock<T>,
    x: &Tensor3<T>,
    trace: &mut Option<&mut Vec<Tensor3<T>>>,
) -> Result<Tensor3<T>, NnError> {
    let mut h = block.conv.forward(x)?;
    block.conv_bn.infer_inplace(&mut h)?;
    relu_inplace(h.data_mut());
    if let Some(t) = trace.as_mut() {
        t.push(h.clone());
    }
    let p = maxpool_time(&h)?;
    if let Some(t) = trace.as_mut() {
        t.push(p.clone());
    }
    let mut h = block.proj.forward(&p)?;
    block.proj_bn.infer_inplace(&mut h)?;
    relu_inplace(h.data_mut());
    if let Some(t) = trace.as_mut() {
        t.push(h.clone());
    }
    Ok(h)
}

fn stack_forward<T: Real>(
    input: &Tensor3<T>,
    weights: &ModelWeights<T>,
    mut trace: Option<&mut Vec<Tensor3<T>>>,
) -> Result<ConvStackOutput<T>, NnError> {
    check_input(input, weights)?;
    let mut blocks = weights.blocks.iter();
    let first = blocks.next().expect("validated architecture has blocks");
    let mut x = block_forward(first, input, &mut trace)?;
    for b in blocks {
        x = block_forward(b, &x, &mut trace)?;
    }
    let pooled = PooledVector(global_max_pool(&x)?);
    Ok(ConvStackOutput {
        feature_map: x,
        pooled,
    })
}

/// Inference forward of the convolutional blocks on a (time, dim, 1)
/// input, followed by global max-pooling over time.
pub fn conv_stack_forward<T: Real>(input: &Tensor3<T>, weights: &ModelWeights<T>) -> Result<ConvStackOutput<T>, NnError> {
    stack_forward(input, weights, None)
}

/// As [`conv_stack_forward`], also returning the output of every conv and
/// pooling layer in order (conv, pool, 1x1 conv per block).
pub fn conv_stack_trace<T: Real>(
    input: &Tensor3<T>,
    weights: &ModelWeights<T>,
) -> Result<(Vec<Tensor3<T>>, ConvStackOutput<T>), NnError> {
    let mut maps = Vec::new();
    let out = stack_forward(input, weights, Some(&mut maps))?;
    Ok((maps, out))
}

/// Hidden-layer activations and final logits for one pooled vector.
pub fn head_trace<T: Real>(pooled: &PooledVector<T>, weights: &ModelWeights<T>) -> Result<(Vec<Vec<T>>, Vec<T>), NnError> {
    if pooled.len() != weights.arch.pooled_dim() {
        return Err(NnError::ShapeMismatch(format!(
            "pooled vector has {} values, head expects {}",
            pooled.len(),
            weights.arch.pooled_dim()
        )));
    }
    let mut acts = Vec::with_capacity(weights.hidden.len());
    let mut x = pooled.0.clone();
    for h in &weights.hidden {
        let z = h.dense.forward_vec(&x)?;
        let mut t = Tensor3::from_vec(1, 1, z.len(), z).map_err(|_| NnError::NonFinite)?;
        h.bn.infer_inplace(&mut t)?;
        x = t.into_data();
        relu_inplace(&mut x);
        acts.push(x.clone());
    }
    let logits = weights.output.forward_vec(&x)?;
    Ok((acts, logits))
}

/// Fully connected head: hidden dense+BN+ReLU layers, then softmax.
pub fn head_forward<T: Real>(pooled: &PooledVector<T>, weights: &ModelWeights<T>) -> Result<IntentPosterior<T>, NnError> {
    let (_, logits) = head_trace(pooled, weights)?;
    Ok(IntentPosterior::from_logits(logits))
}

/// Conv stack, global pooling and head over a whole frame sequence.
pub fn classify_frames<T: Real>(frames: &[FeatureFrame], weights: &ModelWeights<T>) -> Result<IntentPosterior<T>, NnError> {
    let out = conv_stack_forward(&frames_to_tensor(frames), weights)?;
    head_forward(&out.pooled, weights)
}
