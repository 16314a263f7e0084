use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use super::NnError;

/// Floating point element type the network can run in (`f32` for
/// deployment and training, `f64` for gradient checking).
pub trait Real:
    Float + FromPrimitive + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + Debug + Default + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + Debug + Default + 'static
{
}

/// Feature map laid out row-major as (time, freq, channels).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    time: usize,
    freq: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(time: usize, freq: usize, channels: usize) -> Self {
        Self {
            time,
            freq,
            channels,
            data: vec![T::zero(); time * freq * channels],
        }
    }

    pub fn from_vec(time: usize, freq: usize, channels: usize, data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != time * freq * channels {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for dims ({time}, {freq}, {channels})",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(Self {
            time,
            freq,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.time, self.freq, self.channels)
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn freq(&self) -> usize {
        self.freq
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Values per time step (`freq * channels`).
    pub fn row_len(&self) -> usize {
        self.freq * self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[T] {
        let w = self.row_len();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [T] {
        let w = self.row_len();
        &mut self.data[t * w..(t + 1) * w]
    }

    pub fn get(&self, t: usize, f: usize, c: usize) -> T {
        self.data[(t * self.freq + f) * self.channels + c]
    }

    pub fn set(&mut self, t: usize, f: usize, c: usize, v: T) {
        self.data[(t * self.freq + f) * self.channels + c] = v;
    }

    /// Copy of time steps `start..end`.
    pub fn slice_time(&self, start: usize, end: usize) -> Self {
        let w = self.row_len();
        Self {
            time: end - start,
            freq: self.freq,
            channels: self.channels,
            data: self.data[start * w..end * w].to_vec(),
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor3<U> {
        Tensor3 {
            time: self.time,
            freq: self.freq,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // eight independent partial sums so the loop vectorizes
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}
