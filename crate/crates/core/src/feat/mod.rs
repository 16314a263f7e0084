//! Acoustic front end: 40 log mel filterbank energies plus log frame energy.
//!
//! Frames are 25 ms long with a 10 ms hop at 16 kHz (400 / 160 samples).
//! Each frame is Hamming windowed, zero-padded to 512 points and turned into
//! a magnitude spectrum, which is weighted by 40 triangular HTK-mel filters
//! spanning 0-8000 Hz. No padding is applied at either end of the signal, so
//! `n` samples yield `1 + (n - 400) / 160` frames.

mod cmvn;
mod mel;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

pub use cmvn::{apply_cmvn, compute_global_cmvn, CmvnMode, CmvnStats, CMVN_STD_FLOOR};
pub use mel::{hz_to_mel, mel_center_frequencies, mel_to_hz, MelFilterbank};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400;
pub const FRAME_HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_FILTERS: usize = 40;
/// 40 filterbank values followed by the frame energy.
pub const FEATURE_DIM: usize = NUM_FILTERS + 1;
pub const FRAMES_PER_SECOND: f64 = SAMPLE_RATE as f64 / FRAME_HOP as f64;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatError {
    #[error("audio buffer is empty")]
    EmptyAudio,
    #[error("unsupported sample rate {found} Hz (expected {SAMPLE_RATE} Hz)")]
    WrongSampleRate { found: u32 },
    #[error("audio too short: {samples} samples, need at least {FRAME_LEN}")]
    AudioTooShort { samples: usize },
    #[error("empty corpus: no frames to compute statistics from")]
    EmptyCorpus,
    #[error("utterance CMVN needs at least 2 frames, got {frames}")]
    UtteranceTooShort { frames: usize },
    #[error("feature sequence is empty")]
    EmptySequence,
    #[error("non-finite feature value at frame {frame}, dimension {dim}")]
    NonFinite { frame: usize, dim: usize },
}

/// Mono 16-bit PCM at 16 kHz.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioBuffer {
    samples: Vec<i16>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<i16>, sample_rate: u32) -> Result<Self, FeatError> {
        if sample_rate != SAMPLE_RATE {
            return Err(FeatError::WrongSampleRate { found: sample_rate });
        }
        if samples.is_empty() {
            return Err(FeatError::EmptyAudio);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[i16] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<i16> {
        self.samples
    }
}

pub type FeatureFrame = [f64; FEATURE_DIM];

/// Ordered frames of one utterance (or of a prefix of a stream).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<FeatureFrame>,
}

impl FeatureSequence {
    pub fn new(frames: Vec<FeatureFrame>) -> Result<Self, FeatError> {
        if frames.is_empty() {
            return Err(FeatError::EmptySequence);
        }
        for (i, f) in frames.iter().enumerate() {
            if let Some(d) = f.iter().position(|v| !v.is_finite()) {
                return Err(FeatError::NonFinite { frame: i, dim: d });
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[FeatureFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_hop_seconds(&self) -> f64 {
        FRAME_HOP as f64 / SAMPLE_RATE as f64
    }

    pub fn frame_len_seconds(&self) -> f64 {
        FRAME_LEN as f64 / SAMPLE_RATE as f64
    }

    pub fn into_frames(self) -> Vec<FeatureFrame> {
        self.frames
    }
}

/// Number of frames produced for `num_samples` samples.
pub fn frame_count(num_samples: usize) -> usize {
    if num_samples < FRAME_LEN {
        0
    } else {
        1 + (num_samples - FRAME_LEN) / FRAME_HOP
    }
}

/// Reusable extractor holding the window, filterbank and FFT plan.
pub struct FeatureExtractor {
    window: Vec<f64>,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").finish_non_exhaustive()
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let window = (0..FRAME_LEN)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LEN - 1) as f64).cos()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Self {
            window,
            filterbank: MelFilterbank::new(NUM_FILTERS, FFT_SIZE, SAMPLE_RATE as f64, 0.0, 8000.0),
            fft,
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Computes one feature frame from exactly `FRAME_LEN` samples.
    pub fn frame(&self, samples: &[i16]) -> FeatureFrame {
        debug_assert_eq!(samples.len(), FRAME_LEN);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut energy = 0.0;
        for ((slot, &s), &w) in buf.iter_mut().zip(samples).zip(&self.window) {
            let v = s as f64 * w;
            energy += v * v;
            slot.re = v;
        }
        self.fft.process(&mut buf);
        let magnitude: Vec<f64> = buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm()).collect();

        let mut out = [0.0; FEATURE_DIM];
        for (slot, e) in out.iter_mut().zip(self.filterbank.apply(&magnitude)) {
            *slot = (e + LOG_FLOOR).ln();
        }
        out[NUM_FILTERS] = (energy + LOG_FLOOR).ln();
        out
    }

    pub fn extract(&self, audio: &AudioBuffer) -> Result<FeatureSequence, FeatError> {
        if audio.sample_rate() != SAMPLE_RATE {
            return Err(FeatError::WrongSampleRate {
                found: audio.sample_rate(),
            });
        }
        let samples = audio.samples();
        if samples.len() < FRAME_LEN {
            return Err(FeatError::AudioTooShort {
                samples: samples.len(),
            });
        }
        let frames = (0..frame_count(samples.len()))
            .map(|i| self.frame(&samples[i * FRAME_HOP..i * FRAME_HOP + FRAME_LEN]))
            .collect();
        Ok(FeatureSequence { frames })
    }
}

/// One-shot feature extraction with a freshly planned extractor.
pub fn extract_features(audio: &AudioBuffer) -> Result<FeatureSequence, FeatError> {
    FeatureExtractor::new().extract(audio)
}

/// Incremental extractor: samples go in as they arrive, frames come out as
/// soon as their 400 samples are available. Produces exactly the frames
/// `extract_features` would produce on the concatenated input.
#[derive(Debug)]
pub struct StreamingExtractor {
    extractor: FeatureExtractor,
    pending: Vec<i16>,
}

impl Default for StreamingExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl StreamingExtractor {
    pub fn new() -> Self {
        Self {
            extractor: FeatureExtractor::new(),
            pending: Vec::with_capacity(FRAME_LEN * 2),
        }
    }

    pub fn push(&mut self, samples: &[i16], out: &mut Vec<FeatureFrame>) {
        self.pending.extend_from_slice(samples);
        let mut start = 0;
        while self.pending.len() - start >= FRAME_LEN {
            out.push(self.extractor.frame(&self.pending[start..start + FRAME_LEN]));
            start += FRAME_HOP;
        }
        self.pending.drain(..start);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, n: usize) -> Vec<i16> {
        (0..n)
            .map(|i| {
                (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                    .round() as i16
            })
            .collect()
    }

    fn noise(n: usize, seed: u64) -> Vec<i16> {
        // xorshift, multiples of 4 so that halving stays exact
        let mut s = seed.max(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (((s % 4001) as i64 - 2000) * 4) as i16
            })
            .collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let audio = AudioBuffer::new(sine(440.0, 3000.0, 16_000), SAMPLE_RATE).unwrap();
        let seq = extract_features(&audio).unwrap();
        assert_eq!(seq.len(), 98);
        assert!(seq.frames().iter().all(|f| f.len() == 41));
    }

    #[test]
    fn exactly_one_frame() {
        let audio = AudioBuffer::new(noise(400, 3), SAMPLE_RATE).unwrap();
        assert_eq!(extract_features(&audio).unwrap().len(), 1);
    }

    #[test]
    fn frame_count_formula_holds_for_all_lengths() {
        let ex = FeatureExtractor::new();
        let base = noise(2000, 11);
        for n in 400..=2000 {
            let audio = AudioBuffer::new(base[..n].to_vec(), SAMPLE_RATE).unwrap();
            assert_eq!(ex.extract(&audio).unwrap().len(), 1 + (n - 400) / 160, "n = {n}");
        }
    }

    #[test]
    fn short_and_wrong_rate_rejected() {
        let audio = AudioBuffer::new(vec![1; 399], SAMPLE_RATE).unwrap();
        assert_eq!(
            extract_features(&audio),
            Err(FeatError::AudioTooShort { samples: 399 })
        );
        assert_eq!(
            AudioBuffer::new(vec![1; 1000], 8000),
            Err(FeatError::WrongSampleRate { found: 8000 })
        );
        assert_eq!(AudioBuffer::new(vec![], SAMPLE_RATE), Err(FeatError::EmptyAudio));
    }

    #[test]
    fn sine_peaks_at_nearest_filter() {
        // oracle: filter centres straight from the HTK mel formula
        let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let centres: Vec<f64> = (1..=40)
            .map(|m| 700.0 * (10f64.powf(top * m as f64 / 41.0 / 2595.0) - 1.0))
            .collect();
        let nearest = centres
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;

        let audio = AudioBuffer::new(sine(1000.0, 8000.0, 16_000), SAMPLE_RATE).unwrap();
        let seq = extract_features(&audio).unwrap();
        for frame in seq.frames() {
            let argmax = frame[..40]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn energy_shifts_by_twice_log_gain() {
        let base = noise(4000, 5);
        let ex = FeatureExtractor::new();
        let f0 = ex
            .extract(&AudioBuffer::new(base.clone(), SAMPLE_RATE).unwrap())
            .unwrap();
        for g in [0.25f64, 0.5, 2.0, 3.0] {
            let scaled: Vec<i16> = base.iter().map(|&s| (s as f64 * g) as i16).collect();
            let fg = ex.extract(&AudioBuffer::new(scaled, SAMPLE_RATE).unwrap()).unwrap();
            for (a, b) in f0.frames().iter().zip(fg.frames()) {
                assert!((b[40] - a[40] - 2.0 * g.ln()).abs() < 1e-6);
                if g < 1.0 {
                    assert!(b[..40].iter().zip(&a[..40]).all(|(x, y)| x < y));
                }
            }
        }
    }

    #[test]
    fn streaming_matches_batch() {
        let samples = noise(7321, 9);
        let audio = AudioBuffer::new(samples.clone(), SAMPLE_RATE).unwrap();
        let batch = extract_features(&audio).unwrap();
        let mut stream = StreamingExtractor::new();
        let mut frames = Vec::new();
        for chunk in samples.chunks(97) {
            stream.push(chunk, &mut frames);
        }
        assert_eq!(frames, batch.frames());
    }
}
