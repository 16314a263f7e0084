//! Training-mode forward and backward pass.
//!
//! Batch norm uses per-batch statistics over every valid (sample, time)
//! position for conv layers and over the batch rows for dense layers. Each
//! sample is run at its own valid length, so padding never enters a
//! convolution, a batch statistic or the global max.

use rayon::prelude::*;

use super::TrainError;
use crate::feat::{FeatureFrame, FeatureSequence};
use crate::nn::{
    conv_backward, conv_forward, frames_to_tensor, global_max_pool_with_argmax, maxpool_time_with_argmax,
    relu_inplace, softmax, BatchNorm, ConvGeom, ModelWeights, Real, Tensor3, BN_EPS,
};

/// Padded mini-batch: `frames` holds `len() * max_len * dim` values, of which
/// only the first `valid[i]` frames of sample `i` are meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    frames: Vec<f64>,
    max_len: usize,
    dim: usize,
    valid: Vec<usize>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(frames: Vec<f64>, max_len: usize, dim: usize, valid: Vec<usize>, labels: Vec<usize>) -> Result<Self, TrainError> {
        if valid.len() != labels.len() || valid.is_empty() {
            return Err(TrainError::MalformedBatch(format!(
                "{} valid counts for {} labels",
                valid.len(),
                labels.len()
            )));
        }
        if frames.len() != valid.len() * max_len * dim {
            return Err(TrainError::MalformedBatch(format!(
                "{} values for {} samples of {max_len} x {dim}",
                frames.len(),
                valid.len()
            )));
        }
        if let Some(i) = valid.iter().position(|&v| v > max_len) {
            return Err(TrainError::MalformedBatch(format!(
                "sample {i} claims {} valid frames of {max_len}",
                valid[i]
            )));
        }
        Ok(Self {
            frames,
            max_len,
            dim,
            valid,
            labels,
        })
    }

    /// Pads every sequence to the longest one with zeros.
    pub fn from_sequences(seqs: &[&FeatureSequence], labels: &[usize]) -> Result<Self, TrainError> {
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        Self::padded_to(seqs, labels, max_len, 0.0)
    }

    pub fn padded_to(seqs: &[&FeatureSequence], labels: &[usize], max_len: usize, pad: f64) -> Result<Self, TrainError> {
        let dim = crate::feat::FEATURE_DIM;
        let mut frames = Vec::with_capacity(seqs.len() * max_len * dim);
        for s in seqs {
            if s.len() > max_len {
                return Err(TrainError::MalformedBatch(format!("sequence of {} > pad length {max_len}", s.len())));
            }
            for f in s.frames() {
                frames.extend_from_slice(f);
            }
            frames.resize(frames.len() + (max_len - s.len()) * dim, pad);
        }
        Self::new(frames, max_len, dim, seqs.iter().map(|s| s.len()).collect(), labels.to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn valid(&self) -> &[usize] {
        &self.valid
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn sample<T: Real>(&self, i: usize) -> Tensor3<T> {
        let start = i * self.max_len * self.dim;
        let frames: Vec<FeatureFrame> = self.frames[start..start + self.valid[i] * self.dim]
            .chunks_exact(self.dim)
            .map(|c| {
                let mut f = [0.0; crate::feat::FEATURE_DIM];
                f.copy_from_slice(c);
                f
            })
            .collect();
        frames_to_tensor(&frames)
    }
}

/// Batch statistics of one BN layer, used for the running-average update.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate.
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LossAndGrad<T> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    pub per_sample_loss: Vec<T>,
    /// Same shape as the model; running-stat slots are zero.
    pub grads: ModelWeights<T>,
    /// One entry per BN layer in model order (blocks, then hidden).
    pub bn_stats: Vec<BnBatchStats<T>>,
    pub correct: usize,
}

pub(crate) struct BnCache<T> {
    xhat: Vec<Tensor3<T>>,
    inv_std: Vec<T>,
    count: usize,
    pub(crate) stats: BnBatchStats<T>,
}

/// Normalizes `xs` in place with statistics pooled over all their
/// positions, then applies gamma and beta.
pub(crate) fn bn_train_forward<T: Real>(xs: &mut [Tensor3<T>], bn: &BatchNorm<T>) -> BnCache<T> {
    let c = bn.channels();
    let mut sum = vec![T::zero(); c];
    let mut count = 0usize;
    for x in xs.iter() {
        for px in x.data().chunks_exact(c) {
            for k in 0..c {
                sum[k] += px[k];
            }
            count += 1;
        }
    }
    let n = T::from_usize(count).expect("count fits");
    let mean: Vec<T> = sum.iter().map(|&s| s / n).collect();
    let mut sq = vec![T::zero(); c];
    for x in xs.iter() {
        for px in x.data().chunks_exact(c) {
            for k in 0..c {
                let d = px[k] - mean[k];
                sq[k] += d * d;
            }
        }
    }
    let biased_var: Vec<T> = sq.iter().map(|&s| s / n).collect();
    let unbiased = if count > 1 {
        let n1 = T::from_usize(count - 1).expect("count fits");
        sq.iter().map(|&s| s / n1).collect()
    } else {
        biased_var.clone()
    };
    let eps = T::from_f64_lossy(BN_EPS);
    let inv_std: Vec<T> = biased_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(xs.len());
    for x in xs.iter_mut() {
        for px in x.data_mut().chunks_exact_mut(c) {
            for k in 0..c {
                px[k] = (px[k] - mean[k]) * inv_std[k];
            }
        }
        xhat.push(x.clone());
        for px in x.data_mut().chunks_exact_mut(c) {
            for k in 0..c {
                px[k] = px[k] * bn.gamma[k] + bn.beta[k];
            }
        }
    }
    BnCache {
        xhat,
        inv_std,
        count,
        stats: BnBatchStats { mean, var: unbiased },
    }
}

/// Turns output gradients into input gradients in place.
fn bn_train_backward<T: Real>(dys: &mut [Tensor3<T>], cache: &BnCache<T>, bn: &BatchNorm<T>, dgamma: &mut [T], dbeta: &mut [T]) {
    let c = bn.channels();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for (dy, xh) in dys.iter().zip(&cache.xhat) {
        for (g, x) in dy.data().chunks_exact(c).zip(xh.data().chunks_exact(c)) {
            for k in 0..c {
                sum_dy[k] += g[k];
                sum_dy_xhat[k] += g[k] * x[k];
            }
        }
    }
    for k in 0..c {
        dgamma[k] += sum_dy_xhat[k];
        dbeta[k] += sum_dy[k];
    }
    let n = T::from_usize(cache.count).expect("count fits");
    let scale: Vec<T> = (0..c).map(|k| bn.gamma[k] * cache.inv_std[k] / n).collect();
    for (dy, xh) in dys.iter_mut().zip(&cache.xhat) {
        for (g, x) in dy.data_mut().chunks_exact_mut(c).zip(xh.data().chunks_exact(c)) {
            for k in 0..c {
                g[k] = scale[k] * (n * g[k] - sum_dy[k] - x[k] * sum_dy_xhat[k]);
            }
        }
    }
}

/// Routes each pooled gradient back to the time step that won its pair.
fn maxpool_time_backward<T: Real>(input_dims: (usize, usize, usize), second: &[bool], grad_out: &Tensor3<T>) -> Tensor3<T> {
    let (t, f, c) = input_dims;
    let mut d = Tensor3::zeros(t, f, c);
    let w = f * c;
    for p in 0..grad_out.time() {
        let src = grad_out.row(p);
        for k in 0..w {
            let t = 2 * p + usize::from(second[p * w + k]);
            d.data_mut()[t * w + k] = src[k];
        }
    }
    d
}

/// Each channel's gradient goes to the single position that held its max.
fn global_max_pool_backward<T: Real>(input_dims: (usize, usize, usize), arg: &[usize], grad: &[T]) -> Tensor3<T> {
    let (t, f, c) = input_dims;
    let mut d = Tensor3::zeros(t, f, c);
    for ch in 0..c {
        d.data_mut()[arg[ch] * c + ch] += grad[ch];
    }
    d
}

fn relu_backward<T: Real>(dy: &mut Tensor3<T>, out: &Tensor3<T>) {
    for (g, &a) in dy.data_mut().iter_mut().zip(out.data()) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn relu_all<T: Real>(xs: &mut [Tensor3<T>]) {
    xs.iter_mut().for_each(|x| relu_inplace(x.data_mut()));
}

fn conv_all<T: Real>(geom: &ConvGeom, kernel: &[T], bias: &[T], xs: &[Tensor3<T>]) -> Result<Vec<Tensor3<T>>, TrainError> {
    xs.par_iter()
        .map(|x| conv_forward(geom, kernel, bias, x).map_err(TrainError::from))
        .collect()
}

/// Per-sample conv backward, gradients reduced in sample order.
fn conv_backward_all<T: Real>(
    geom: &ConvGeom,
    kernel: &[T],
    inputs: &[Tensor3<T>],
    grads_out: &[Tensor3<T>],
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
    want_input_grad: bool,
) -> Vec<Tensor3<T>> {
    let parts: Vec<(Vec<T>, Vec<T>, Option<Tensor3<T>>)> = inputs
        .par_iter()
        .zip(grads_out.par_iter())
        .map(|(x, g)| {
            let mut gk = vec![T::zero(); kernel.len()];
            let mut gb = vec![T::zero(); geom.out_ch];
            let gi = conv_backward(geom, kernel, x, g, &mut gk, &mut gb, want_input_grad);
            (gk, gb, gi)
        })
        .collect();
    let mut out = Vec::with_capacity(parts.len());
    for (gk, gb, gi) in parts {
        for (a, b) in grad_kernel.iter_mut().zip(&gk) {
            *a += *b;
        }
        for (a, b) in grad_bias.iter_mut().zip(&gb) {
            *a += *b;
        }
        if let Some(gi) = gi {
            out.push(gi);
        }
    }
    out
}

struct BlockCache<T> {
    bn1: BnCache<T>,
    act1: Vec<Tensor3<T>>,
    pool_arg: Vec<Vec<bool>>,
    pooled: Vec<Tensor3<T>>,
    bn2: BnCache<T>,
}

struct HeadCache<T> {
    input: Tensor3<T>,
    bn: BnCache<T>,
    out: Tensor3<T>,
}

struct ForwardState<T> {
    inputs: Vec<Tensor3<T>>,
    blocks: Vec<BlockCache<T>>,
    block_outputs: Vec<Vec<Tensor3<T>>>,
    pool_arg: Vec<Vec<usize>>,
    hidden: Vec<HeadCache<T>>,
    output_input: Tensor3<T>,
    probs: Vec<Vec<T>>,
    per_sample_loss: Vec<T>,
    correct: usize,
}

fn forward<T: Real>(batch: &Batch, w: &ModelWeights<T>) -> Result<ForwardState<T>, TrainError> {
    if batch.dim != w.arch.input_dim {
        return Err(TrainError::MalformedBatch(format!(
            "batch frames have {} dims, model expects {}",
            batch.dim, w.arch.input_dim
        )));
    }
    let min = w.arch.min_frames();
    if let Some(i) = batch.valid.iter().position(|&v| v < min) {
        return Err(TrainError::SampleTooShort {
            sample: i,
            frames: batch.valid[i],
            min,
        });
    }
    if let Some(i) = batch.labels.iter().position(|&l| l >= w.arch.num_intents) {
        return Err(TrainError::MalformedBatch(format!(
            "label {} of sample {i} out of range",
            batch.labels[i]
        )));
    }
    let inputs: Vec<Tensor3<T>> = (0..batch.len()).map(|i| batch.sample(i)).collect();

    let mut blocks = Vec::with_capacity(w.blocks.len());
    let mut block_outputs: Vec<Vec<Tensor3<T>>> = Vec::with_capacity(w.blocks.len());
    for (bi, b) in w.blocks.iter().enumerate() {
        let x = if bi == 0 { &inputs } else { &block_outputs[bi - 1] };
        let mut h = conv_all(&b.conv.geom, &b.conv.kernel, &b.conv.bias, x)?;
        let bn1 = bn_train_forward(&mut h, &b.conv_bn);
        relu_all(&mut h);
        let (pooled, pool_arg): (Vec<_>, Vec<_>) = h
            .iter()
            .map(|a| maxpool_time_with_argmax(a).map_err(TrainError::from))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .unzip();
        let mut h2 = conv_all(&b.proj.geom, &b.proj.kernel, &b.proj.bias, &pooled)?;
        let bn2 = bn_train_forward(&mut h2, &b.proj_bn);
        relu_all(&mut h2);
        blocks.push(BlockCache {
            bn1,
            act1: h,
            pool_arg,
            pooled,
            bn2,
        });
        block_outputs.push(h2);
    }

    let c = w.arch.pooled_dim();
    let b = batch.len();
    let mut head_input = Tensor3::zeros(b, 1, c);
    let mut pool_arg = Vec::with_capacity(b);
    for (i, map) in block_outputs.last().expect("blocks").iter().enumerate() {
        let (v, arg) = global_max_pool_with_argmax(map)?;
        head_input.row_mut(i).copy_from_slice(&v);
        pool_arg.push(arg);
    }

    let mut hidden = Vec::with_capacity(w.hidden.len());
    let mut x = head_input;
    for h in &w.hidden {
        let z = h.dense.forward_rows(&x)?;
        let mut zs = vec![z];
        let bn = bn_train_forward(&mut zs, &h.bn);
        let mut out = zs.pop().expect("one tensor");
        relu_inplace(out.data_mut());
        hidden.push(HeadCache {
            input: x,
            bn,
            out: out.clone(),
        });
        x = out;
    }
    let logits = w.output.forward_rows(&x)?;
    let mut probs = Vec::with_capacity(b);
    let mut per_sample_loss = Vec::with_capacity(b);
    let mut correct = 0;
    for i in 0..b {
        let z = logits.row(i);
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        let loss = lse - z[batch.labels[i]];
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { sample: i });
        }
        let p = softmax(z);
        let argmax = (0..p.len()).fold(0, |a, k| if p[k] > p[a] { k } else { a });
        if argmax == batch.labels[i] {
            correct += 1;
        }
        per_sample_loss.push(loss);
        probs.push(p);
    }
    Ok(ForwardState {
        inputs,
        blocks,
        block_outputs,
        pool_arg,
        hidden,
        output_input: x,
        probs,
        per_sample_loss,
        correct,
    })
}

fn mean_loss<T: Real>(per_sample: &[T]) -> T {
    per_sample.iter().copied().sum::<T>() / T::from_usize(per_sample.len()).expect("batch size fits")
}

/// Training-mode loss only (no gradients).
pub fn batch_loss<T: Real>(batch: &Batch, weights: &ModelWeights<T>) -> Result<T, TrainError> {
    Ok(mean_loss(&forward(batch, weights)?.per_sample_loss))
}

fn zeroed<T: Real>(w: &ModelWeights<T>) -> ModelWeights<T> {
    let mut g = w.clone();
    for s in g.slices_mut() {
        s.iter_mut().for_each(|v| *v = T::zero());
    }
    g
}

/// Mean cross-entropy of the batch and its gradient for every learnable
/// tensor.
pub fn loss_and_grad<T: Real>(batch: &Batch, w: &ModelWeights<T>) -> Result<LossAndGrad<T>, TrainError> {
    let st = forward(batch, w)?;
    let mut g = zeroed(w);
    let b = batch.len();
    let inv_b = T::one() / T::from_usize(b).expect("batch size fits");

    let k = w.arch.num_intents;
    let mut dlogits = Tensor3::zeros(b, 1, k);
    for i in 0..b {
        let row = dlogits.row_mut(i);
        for (j, &p) in st.probs[i].iter().enumerate() {
            row[j] = p * inv_b;
        }
        row[batch.labels[i]] -= inv_b;
    }

    let mut dx = conv_backward(
        &w.output.geom(),
        &w.output.weight,
        &st.output_input,
        &dlogits,
        &mut g.output.weight,
        &mut g.output.bias,
        true,
    )
    .expect("input grad requested");
    for (li, (h, cache)) in w.hidden.iter().zip(&st.hidden).enumerate().rev() {
        relu_backward(&mut dx, &cache.out);
        let mut dz = vec![dx];
        let gh = &mut g.hidden[li];
        bn_train_backward(&mut dz, &cache.bn, &h.bn, &mut gh.bn.gamma, &mut gh.bn.beta);
        dx = conv_backward(
            &h.dense.geom(),
            &h.dense.weight,
            &cache.input,
            &dz[0],
            &mut gh.dense.weight,
            &mut gh.dense.bias,
            true,
        )
        .expect("input grad requested");
    }

    // global max-pool routes to the winning row of each sample
    let last = st.block_outputs.last().expect("blocks");
    let mut dmaps: Vec<Tensor3<T>> = last
        .iter()
        .enumerate()
        .map(|(i, map)| global_max_pool_backward(map.dims(), &st.pool_arg[i], dx.row(i)))
        .collect();

    for bi in (0..w.blocks.len()).rev() {
        let blk = &w.blocks[bi];
        let cache = &st.blocks[bi];
        let gb = &mut g.blocks[bi];
        for (d, out) in dmaps.iter_mut().zip(&st.block_outputs[bi]) {
            relu_backward(d, out);
        }
        bn_train_backward(&mut dmaps, &cache.bn2, &blk.proj_bn, &mut gb.proj_bn.gamma, &mut gb.proj_bn.beta);
        let dpooled = conv_backward_all(
            &blk.proj.geom,
            &blk.proj.kernel,
            &cache.pooled,
            &dmaps,
            &mut gb.proj.kernel,
            &mut gb.proj.bias,
            true,
        );
        let mut dact: Vec<Tensor3<T>> = dpooled
            .iter()
            .zip(&cache.act1)
            .zip(&cache.pool_arg)
            .map(|((dp, act), arg)| {
                let mut d = maxpool_time_backward(act.dims(), arg, dp);
                relu_backward(&mut d, act);
                d
            })
            .collect();
        bn_train_backward(&mut dact, &cache.bn1, &blk.conv_bn, &mut gb.conv_bn.gamma, &mut gb.conv_bn.beta);
        let inputs = if bi == 0 { &st.inputs } else { &st.block_outputs[bi - 1] };
        dmaps = conv_backward_all(
            &blk.conv.geom,
            &blk.conv.kernel,
            inputs,
            &dact,
            &mut gb.conv.kernel,
            &mut gb.conv.bias,
            bi > 0,
        );
    }

    let mut bn_stats = Vec::new();
    for blk in &st.blocks {
        bn_stats.push(blk.bn1.stats.clone());
        bn_stats.push(blk.bn2.stats.clone());
    }
    for h in &st.hidden {
        bn_stats.push(h.bn.stats.clone());
    }
    Ok(LossAndGrad {
        loss: mean_loss(&st.per_sample_loss),
        per_sample_loss: st.per_sample_loss,
        grads: g,
        bn_stats,
        correct: st.correct,
    })
}

/// `running = momentum * running + (1 - momentum) * batch` for every BN layer.
pub fn update_running_stats<T: Real>(w: &mut ModelWeights<T>, stats: &[BnBatchStats<T>], momentum: T) {
    let mut layers: Vec<&mut BatchNorm<T>> = Vec::new();
    for b in &mut w.blocks {
        layers.push(&mut b.conv_bn);
        layers.push(&mut b.proj_bn);
    }
    for h in &mut w.hidden {
        layers.push(&mut h.bn);
    }
    for (bn, s) in layers.into_iter().zip(stats) {
        for k in 0..bn.channels() {
            bn.running_mean[k] = momentum * bn.running_mean[k] + (T::one() - momentum) * s.mean[k];
            bn.running_var[k] = momentum * bn.running_var[k] + (T::one() - momentum) * s.var[k];
        }
    }
}
