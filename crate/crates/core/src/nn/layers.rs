//! Layer primitives shared by inference and training: valid convolution,
//! dense, batch norm, ReLU, pairwise time max-pooling and global max-pooling.

use rand::Rng;

use super::tensor::{axpy, dot, Real, Tensor3};
use super::NnError;

pub const BN_EPS: f64 = 1e-5;

/// Kernel geometry. Weights are laid out `[k_time][k_freq][in_ch][out_ch]`
/// so that for a fixed output position and time tap the input slice and the
/// kernel rows it multiplies are both contiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k_time: usize,
    pub k_freq: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvGeom {
    pub fn fan_in(&self) -> usize {
        self.k_time * self.k_freq * self.in_ch
    }

    pub fn kernel_len(&self) -> usize {
        self.fan_in() * self.out_ch
    }

    pub fn output_dims(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize), NnError> {
        let (t, f, c) = input;
        if c != self.in_ch {
            return Err(NnError::ShapeMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        if t < self.k_time || f < self.k_freq {
            return Err(NnError::KernelTooLarge {
                kernel: (self.k_time, self.k_freq),
                input: (t, f),
            });
        }
        Ok((t - self.k_time + 1, f - self.k_freq + 1, self.out_ch))
    }
}

/// Valid, stride-1 2D convolution (cross-correlation) over (time, freq).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub geom: ConvGeom,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(geom: ConvGeom) -> Self {
        Self {
            geom,
            kernel: vec![T::zero(); geom.kernel_len()],
            bias: vec![T::zero(); geom.out_ch],
        }
    }

    /// He-uniform initialisation (limit `sqrt(6 / fan_in)`), zero bias.
    pub fn he_uniform<R: Rng>(geom: ConvGeom, rng: &mut R) -> Self {
        let mut c = Self::zeros(geom);
        he_fill(&mut c.kernel, geom.fan_in(), rng);
        c
    }

    pub fn forward(&self, input: &Tensor3<T>) -> Result<Tensor3<T>, NnError> {
        conv_forward(&self.geom, &self.kernel, &self.bias, input)
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            geom: self.geom,
            kernel: cast_vec(&self.kernel),
            bias: cast_vec(&self.bias),
        }
    }
}

/// Fully connected layer; weight is `[in_dim][out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn he_uniform<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut d = Self::zeros(in_dim, out_dim);
        he_fill(&mut d.weight, in_dim, rng);
        d
    }

    /// Same arithmetic as a 1x1 convolution over a (rows, 1, in_dim) map.
    pub fn geom(&self) -> ConvGeom {
        ConvGeom {
            k_time: 1,
            k_freq: 1,
            in_ch: self.in_dim,
            out_ch: self.out_dim,
        }
    }

    pub fn forward_vec(&self, x: &[T]) -> Result<Vec<T>, NnError> {
        if x.len() != self.in_dim {
            return Err(NnError::ShapeMismatch(format!(
                "dense expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let mut out = self.bias.clone();
        for (j, &v) in x.iter().enumerate() {
            if v != T::zero() {
                axpy(&mut out, v, &self.weight[j * self.out_dim..(j + 1) * self.out_dim]);
            }
        }
        Ok(out)
    }

    /// Applies the layer to every row of a (rows, 1, in_dim) map.
    pub fn forward_rows(&self, x: &Tensor3<T>) -> Result<Tensor3<T>, NnError> {
        conv_forward(&self.geom(), &self.weight, &self.bias, x)
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

/// Batch-norm parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn infer_inplace(&self, x: &mut Tensor3<T>) -> Result<(), NnError> {
        batchnorm_infer_inplace(x, &self.gamma, &self.beta, &self.running_mean, &self.running_var)
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: cast_vec(&self.gamma),
            beta: cast_vec(&self.beta),
            running_mean: cast_vec(&self.running_mean),
            running_var: cast_vec(&self.running_var),
        }
    }
}

pub(crate) fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter()
        .map(|x| U::from_f64_lossy(x.to_f64().expect("finite")))
        .collect()
}

fn he_fill<T: Real, R: Rng>(w: &mut [T], fan_in: usize, rng: &mut R) {
    let limit = (6.0 / fan_in as f64).sqrt();
    for v in w {
        *v = T::from_f64_lossy(rng.gen_range(-limit..limit));
    }
}

pub(crate) fn conv_forward<T: Real>(
    geom: &ConvGeom,
    kernel: &[T],
    bias: &[T],
    input: &Tensor3<T>,
) -> Result<Tensor3<T>, NnError> {
    let (t_out, f_out, c_out) = geom.output_dims(input.dims())?;
    let mut out = Tensor3::zeros(t_out, f_out, c_out);
    let c_in = geom.in_ch;
    let tap = geom.k_freq * c_in;
    let in_row = input.row_len();
    let data = input.data();
    let out_data = out.data_mut();
    for t in 0..t_out {
        for fo in 0..f_out {
            let o = &mut out_data[(t * f_out + fo) * c_out..(t * f_out + fo + 1) * c_out];
            o.copy_from_slice(bias);
            for dt in 0..geom.k_time {
                let start = (t + dt) * in_row + fo * c_in;
                let src = &data[start..start + tap];
                let k_base = dt * tap;
                for (j, &x) in src.iter().enumerate() {
                    if x != T::zero() {
                        let row = (k_base + j) * c_out;
                        axpy(o, x, &kernel[row..row + c_out]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv_forward`]: accumulates kernel and bias gradients
/// and returns the input gradient when `want_input_grad` is set.
pub(crate) fn conv_backward<T: Real>(
    geom: &ConvGeom,
    kernel: &[T],
    input: &Tensor3<T>,
    grad_out: &Tensor3<T>,
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
    want_input_grad: bool,
) -> Option<Tensor3<T>> {
    let (t_out, f_out, c_out) = grad_out.dims();
    let c_in = geom.in_ch;
    let tap = geom.k_freq * c_in;
    let in_row = input.row_len();
    let data = input.data();
    let mut grad_in = want_input_grad.then(|| Tensor3::zeros(input.time(), input.freq(), c_in));
    for t in 0..t_out {
        for fo in 0..f_out {
            let g = &grad_out.data()[(t * f_out + fo) * c_out..(t * f_out + fo + 1) * c_out];
            for (b, &v) in grad_bias.iter_mut().zip(g) {
                *b += v;
            }
            for dt in 0..geom.k_time {
                let start = (t + dt) * in_row + fo * c_in;
                let k_base = dt * tap;
                for j in 0..tap {
                    let x = data[start + j];
                    let row = (k_base + j) * c_out;
                    if x != T::zero() {
                        axpy(&mut grad_kernel[row..row + c_out], x, g);
                    }
                    if let Some(gi) = grad_in.as_mut() {
                        gi.data_mut()[start + j] += dot(&kernel[row..row + c_out], g);
                    }
                }
            }
        }
    }
    grad_in
}

/// Inference-mode batch norm over the channel (last) axis.
pub fn batchnorm_infer<T: Real>(
    input: &Tensor3<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
) -> Result<Tensor3<T>, NnError> {
    let mut out = input.clone();
    batchnorm_infer_inplace(&mut out, gamma, beta, mean, var)?;
    Ok(out)
}

pub(crate) fn batchnorm_infer_inplace<T: Real>(
    x: &mut Tensor3<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
) -> Result<(), NnError> {
    let c = x.channels();
    if [gamma.len(), beta.len(), mean.len(), var.len()].iter().any(|&n| n != c) {
        return Err(NnError::ShapeMismatch(format!(
            "batch norm over {c} channels given parameters of lengths {}/{}/{}/{}",
            gamma.len(),
            beta.len(),
            mean.len(),
            var.len()
        )));
    }
    let eps = T::from_f64_lossy(BN_EPS);
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    for px in x.data_mut().chunks_exact_mut(c) {
        for k in 0..c {
            px[k] = (px[k] - mean[k]) * inv[k] * gamma[k] + beta[k];
        }
    }
    Ok(())
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Max-pooling with a 2x1 kernel and stride 2 along time; a trailing odd
/// time step is dropped.
pub fn maxpool_time<T: Real>(input: &Tensor3<T>) -> Result<Tensor3<T>, NnError> {
    maxpool_time_with_argmax(input).map(|(out, _)| out)
}

/// As [`maxpool_time`], also reporting for every output value whether the
/// second element of its pair won (ties go to the first).
pub(crate) fn maxpool_time_with_argmax<T: Real>(input: &Tensor3<T>) -> Result<(Tensor3<T>, Vec<bool>), NnError> {
    let (t, f, c) = input.dims();
    if t < 2 {
        return Err(NnError::PoolInputTooShort { time: t });
    }
    let t_out = t / 2;
    let w = f * c;
    let mut out = Tensor3::zeros(t_out, f, c);
    let mut second = vec![false; t_out * w];
    for p in 0..t_out {
        let a = input.row(2 * p);
        let b = input.row(2 * p + 1);
        let o = out.row_mut(p);
        for k in 0..w {
            if b[k] > a[k] {
                o[k] = b[k];
                second[p * w + k] = true;
            } else {
                o[k] = a[k];
            }
        }
    }
    Ok((out, second))
}

/// Per-channel maximum over every (time, freq) position.
pub fn global_max_pool<T: Real>(input: &Tensor3<T>) -> Result<Vec<T>, NnError> {
    global_max_pool_with_argmax(input).map(|(v, _)| v)
}

/// Returns the pooled vector and, per channel, the flat row index that won
/// (first occurrence on ties).
pub(crate) fn global_max_pool_with_argmax<T: Real>(input: &Tensor3<T>) -> Result<(Vec<T>, Vec<usize>), NnError> {
    let c = input.channels();
    let rows = input.time() * input.freq();
    if rows == 0 {
        return Err(NnError::EmptyInput);
    }
    let mut best = input.data()[..c].to_vec();
    let mut arg = vec![0usize; c];
    for (r, px) in input.data().chunks_exact(c).enumerate().skip(1) {
        for k in 0..c {
            if px[k] > best[k] {
                best[k] = px[k];
                arg[k] = r;
            }
        }
    }
    Ok((best, arg))
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / s).collect()
}
