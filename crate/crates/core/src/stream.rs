//! Segment-by-segment inference.
//!
//! Every `step` seconds the conv stack is run on the most recent `segment`
//! seconds of frames, and the pooled vectors of all segments are merged by
//! an elementwise max. When the stream ends, a last window anchored at the
//! final frame is processed (unless the regular schedule already ended
//! there) and the merged vector goes through the head. Only that tail work
//! remains after the last sample arrives.
//!
//! With [`Alignment::Stride16`] window starts are rounded down to multiples
//! of the cumulative stride, so every per-segment output coincides with a
//! full-signal output and the streaming embedding is bounded above by the
//! full-signal one.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::feat::{
    CmvnStats, FeatError, FeatureExtractor, FeatureFrame, FeatureSequence, StreamingExtractor,
    AudioBuffer, FRAMES_PER_SECOND,
};
use crate::nn::{
    conv_stack_forward, frames_to_tensor, head_forward, IntentPosterior, ModelWeights, NnError,
    PooledVector, Real,
};

/// Smallest segment the full-size model accepts.
pub const MIN_SEGMENT_FRAMES: usize = 61;
pub const ALIGN_FRAMES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("utterance too short: {frames} frames, need at least {min}")]
    UtteranceTooShort { frames: usize, min: usize },
    #[error("invalid stream config: {0}")]
    InvalidConfig(String),
    #[error("stream already finished")]
    Finished,
    #[error("stream worker disconnected")]
    Disconnected,
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    #[default]
    Free,
    Stride16,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StreamConfig {
    pub segment_seconds: f64,
    pub step_seconds: f64,
    pub alignment: Alignment,
}

impl StreamConfig {
    pub fn new(segment_seconds: f64, step_seconds: f64) -> Result<Self, StreamError> {
        let cfg = Self {
            segment_seconds,
            step_seconds,
            alignment: Alignment::Free,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_alignment(mut self, alignment: Alignment) -> Self {
        self.alignment = alignment;
        self
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        if !self.segment_seconds.is_finite() || self.segment_frames() < MIN_SEGMENT_FRAMES {
            return Err(StreamError::InvalidConfig(format!(
                "segment of {} s is shorter than {MIN_SEGMENT_FRAMES} frames",
                self.segment_seconds
            )));
        }
        if !self.step_seconds.is_finite() || self.step_frames() == 0 {
            return Err(StreamError::InvalidConfig(format!(
                "step of {} s is not positive",
                self.step_seconds
            )));
        }
        Ok(())
    }

    pub fn segment_frames(&self) -> usize {
        seconds_to_frames(self.segment_seconds)
    }

    pub fn step_frames(&self) -> usize {
        seconds_to_frames(self.step_seconds)
    }
}

fn seconds_to_frames(s: f64) -> usize {
    if s <= 0.0 {
        0
    } else {
        (s * FRAMES_PER_SECOND).round() as usize
    }
}

/// Half-open frame range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Incremental window scheduler.
#[derive(Debug, Clone)]
pub struct Segmenter {
    segment: usize,
    step: usize,
    alignment: Alignment,
    next_end: usize,
    last_end: Option<usize>,
}

impl Segmenter {
    pub fn new(cfg: &StreamConfig) -> Result<Self, StreamError> {
        cfg.validate()?;
        Ok(Self {
            segment: cfg.segment_frames(),
            step: cfg.step_frames(),
            alignment: cfg.alignment,
            next_end: cfg.segment_frames(),
            last_end: None,
        })
    }

    fn window_ending_at(&self, end: usize) -> Window {
        let mut start = end.saturating_sub(self.segment);
        if self.alignment == Alignment::Stride16 {
            start -= start % ALIGN_FRAMES;
        }
        Window { start, end }
    }

    /// Windows that became complete now that `available` frames exist.
    pub fn advance(&mut self, available: usize) -> Vec<Window> {
        let mut out = Vec::new();
        while self.next_end <= available {
            out.push(self.window_ending_at(self.next_end));
            self.last_end = Some(self.next_end);
            self.next_end += self.step;
        }
        out
    }

    /// Remaining windows once the stream ends with `total` frames.
    pub fn finish(&mut self, total: usize) -> Result<Vec<Window>, StreamError> {
        if total < MIN_SEGMENT_FRAMES {
            return Err(StreamError::UtteranceTooShort {
                frames: total,
                min: MIN_SEGMENT_FRAMES,
            });
        }
        let mut out = self.advance(total);
        if self.last_end != Some(total) {
            out.push(self.window_ending_at(total));
            self.last_end = Some(total);
        }
        Ok(out)
    }
}

/// All windows for a stream of `num_frames` frames.
pub fn segment_stream(num_frames: usize, cfg: &StreamConfig) -> Result<Vec<Window>, StreamError> {
    if num_frames < MIN_SEGMENT_FRAMES {
        return Err(StreamError::UtteranceTooShort {
            frames: num_frames,
            min: MIN_SEGMENT_FRAMES,
        });
    }
    Segmenter::new(cfg)?.finish(num_frames)
}

/// Running elementwise max of pooled vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxAccumulator<T> {
    running: Vec<T>,
    segments_seen: usize,
}

impl<T: Real> MaxAccumulator<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            running: vec![T::neg_infinity(); dim],
            segments_seen: 0,
        }
    }

    pub fn accumulate(&mut self, r: &PooledVector<T>) {
        for (acc, &v) in self.running.iter_mut().zip(r.as_slice()) {
            if v > *acc {
                *acc = v;
            }
        }
        self.segments_seen += 1;
    }

    pub fn running(&self) -> &[T] {
        &self.running
    }

    pub fn segments_seen(&self) -> usize {
        self.segments_seen
    }

    pub fn pooled(&self) -> PooledVector<T> {
        PooledVector(self.running.clone())
    }
}

/// Seconds of compute for each processed window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentTiming {
    pub window: Window,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct StreamOutcome<T> {
    pub posterior: IntentPosterior<T>,
    pub pooled: PooledVector<T>,
    pub segments: Vec<SegmentTiming>,
}

/// Consumer side of a stream: owns the frame buffer, the scheduler and the
/// accumulator, and runs the conv stack as soon as a window completes.
pub struct StreamSession<'w, T> {
    weights: &'w ModelWeights<T>,
    segmenter: Segmenter,
    frames: Vec<FeatureFrame>,
    acc: MaxAccumulator<T>,
    segments: Vec<SegmentTiming>,
    finished: bool,
}

impl<'w, T: Real> StreamSession<'w, T> {
    pub fn new(weights: &'w ModelWeights<T>, cfg: &StreamConfig) -> Result<Self, StreamError> {
        let min = weights.arch.min_frames();
        if cfg.segment_frames() < min {
            return Err(StreamError::InvalidConfig(format!(
                "segment of {} frames is below the model's {min}-frame receptive field",
                cfg.segment_frames()
            )));
        }
        Ok(Self {
            weights,
            segmenter: Segmenter::new(cfg)?,
            frames: Vec::new(),
            acc: MaxAccumulator::new(weights.arch.pooled_dim()),
            segments: Vec::new(),
            finished: false,
        })
    }

    fn run_window(&mut self, w: Window) -> Result<(), StreamError> {
        let start = Instant::now();
        let out = conv_stack_forward(&frames_to_tensor(&self.frames[w.start..w.end]), self.weights)?;
        self.acc.accumulate(&out.pooled);
        self.segments.push(SegmentTiming {
            window: w,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    pub fn push_frame(&mut self, frame: FeatureFrame) -> Result<(), StreamError> {
        self.push_frames(std::slice::from_ref(&frame))
    }

    pub fn push_frames(&mut self, frames: &[FeatureFrame]) -> Result<(), StreamError> {
        if self.finished {
            return Err(StreamError::Finished);
        }
        self.frames.extend_from_slice(frames);
        for w in self.segmenter.advance(self.frames.len()) {
            self.run_window(w)?;
        }
        Ok(())
    }

    pub fn frames_received(&self) -> usize {
        self.frames.len()
    }

    pub fn accumulator(&self) -> &MaxAccumulator<T> {
        &self.acc
    }

    /// End of stream: processes the tail window and runs the head.
    pub fn finish(&mut self) -> Result<StreamOutcome<T>, StreamError> {
        if self.finished {
            return Err(StreamError::Finished);
        }
        self.finished = true;
        for w in self.segmenter.finish(self.frames.len())? {
            self.run_window(w)?;
        }
        let pooled = self.acc.pooled();
        let posterior = head_forward(&pooled, self.weights)?;
        Ok(StreamOutcome {
            posterior,
            pooled,
            segments: std::mem::take(&mut self.segments),
        })
    }
}

/// Runs the conv stack over explicit windows (in the given order), merges
/// by max and applies the head.
pub fn classify_windows<T: Real>(
    frames: &[FeatureFrame],
    windows: &[Window],
    weights: &ModelWeights<T>,
) -> Result<(IntentPosterior<T>, PooledVector<T>), StreamError> {
    let mut acc = MaxAccumulator::new(weights.arch.pooled_dim());
    for w in windows {
        acc.accumulate(&conv_stack_forward(&frames_to_tensor(&frames[w.start..w.end]), weights)?.pooled);
    }
    let pooled = acc.pooled();
    Ok((head_forward(&pooled, weights)?, pooled))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    /// Full-signal compute after the last sample.
    pub beta_seconds: f64,
    /// Streaming compute after the last sample.
    pub alpha_seconds: f64,
    pub ratio_percent: f64,
    pub per_segment_times: Vec<f64>,
}

impl LatencyReport {
    pub fn new(beta_seconds: f64, alpha_seconds: f64, per_segment_times: Vec<f64>) -> Self {
        let ratio_percent = if beta_seconds > 0.0 {
            100.0 * alpha_seconds / beta_seconds
        } else {
            f64::NAN
        };
        Self {
            beta_seconds,
            alpha_seconds,
            ratio_percent,
            per_segment_times,
        }
    }
}

/// Whole utterance at once; returns the posterior and the forward time.
pub fn full_classify<T: Real>(
    frames: &FeatureSequence,
    weights: &ModelWeights<T>,
) -> Result<(IntentPosterior<T>, f64), StreamError> {
    let min = weights.arch.min_frames();
    if frames.len() < min {
        return Err(StreamError::UtteranceTooShort {
            frames: frames.len(),
            min,
        });
    }
    let start = Instant::now();
    let out = conv_stack_forward(&frames_to_tensor(frames.frames()), weights)?;
    let post = head_forward(&out.pooled, weights)?;
    Ok((post, start.elapsed().as_secs_f64()))
}

/// Feeds frames one at a time to a [`StreamSession`]. `alpha` runs from the
/// moment the last frame is handed over to the posterior being available;
/// `beta` is a full-signal forward on the same frames.
pub fn stream_classify<T: Real>(
    frames: &FeatureSequence,
    cfg: &StreamConfig,
    weights: &ModelWeights<T>,
) -> Result<(StreamOutcome<T>, LatencyReport), StreamError> {
    if frames.len() < MIN_SEGMENT_FRAMES {
        return Err(StreamError::UtteranceTooShort {
            frames: frames.len(),
            min: MIN_SEGMENT_FRAMES,
        });
    }
    let mut session = StreamSession::new(weights, cfg)?;
    let (last, head) = frames.frames().split_last().expect("non-empty sequence");
    for f in head {
        session.push_frame(*f)?;
    }
    let t0 = Instant::now();
    session.push_frame(*last)?;
    let outcome = session.finish()?;
    let alpha = t0.elapsed().as_secs_f64();
    let (_, beta) = full_classify(frames, weights)?;
    let per_segment = outcome.segments.iter().map(|s| s.seconds).collect();
    Ok((outcome, LatencyReport::new(beta, alpha, per_segment)))
}

/// Audio-level front end for streaming: samples in, normalized frames to a
/// session as soon as they exist. Utterance CMVN cannot be applied causally,
/// so only global statistics (or none) are accepted.
pub struct AudioStream<'w, T> {
    extractor: StreamingExtractor,
    cmvn: Option<&'w CmvnStats>,
    session: StreamSession<'w, T>,
    scratch: Vec<FeatureFrame>,
}

impl<'w, T: Real> AudioStream<'w, T> {
    pub fn new(weights: &'w ModelWeights<T>, cfg: &StreamConfig, cmvn: Option<&'w CmvnStats>) -> Result<Self, StreamError> {
        Ok(Self {
            extractor: StreamingExtractor::new(),
            cmvn,
            session: StreamSession::new(weights, cfg)?,
            scratch: Vec::new(),
        })
    }

    pub fn push_samples(&mut self, samples: &[i16]) -> Result<(), StreamError> {
        self.scratch.clear();
        self.extractor.push(samples, &mut self.scratch);
        if let Some(stats) = self.cmvn {
            for f in &mut self.scratch {
                *f = stats.normalize_frame(f);
            }
        }
        self.session.push_frames(&self.scratch)
    }

    pub fn finish(&mut self) -> Result<StreamOutcome<T>, StreamError> {
        self.session.finish()
    }
}

/// Full-signal pipeline on raw audio: features, CMVN, forward.
pub fn full_classify_audio<T: Real>(
    audio: &AudioBuffer,
    weights: &ModelWeights<T>,
    cmvn: Option<&CmvnStats>,
    extractor: &FeatureExtractor,
) -> Result<IntentPosterior<T>, StreamError> {
    let mut seq = extractor.extract(audio)?;
    if let Some(stats) = cmvn {
        seq = FeatureSequence::new(seq.frames().iter().map(|f| stats.normalize_frame(f)).collect())?;
    }
    Ok(full_classify(&seq, weights)?.0)
}

/// One timed latency measurement on raw audio.
///
/// Audio is delivered in `chunk` sized pieces; every segment whose frames
/// are complete is processed before the next chunk is delivered, which is
/// what happens in real time whenever per-segment compute is shorter than
/// the step. Both `alpha` and `beta` include feature extraction and CMVN.
pub fn measure_latency<T: Real>(
    audio: &AudioBuffer,
    cfg: &StreamConfig,
    weights: &ModelWeights<T>,
    cmvn: Option<&CmvnStats>,
    chunk: usize,
) -> Result<(IntentPosterior<T>, IntentPosterior<T>, LatencyReport), StreamError> {
    let samples = audio.samples();
    let chunk = chunk.max(1);
    let mut stream = AudioStream::new(weights, cfg, cmvn)?;
    let split = samples.len().saturating_sub(chunk);
    for piece in samples[..split].chunks(chunk) {
        stream.push_samples(piece)?;
    }
    let t0 = Instant::now();
    stream.push_samples(&samples[split..])?;
    let outcome = stream.finish()?;
    let alpha = t0.elapsed().as_secs_f64();

    let extractor = FeatureExtractor::new();
    let t1 = Instant::now();
    let full = full_classify_audio(audio, weights, cmvn, &extractor)?;
    let beta = t1.elapsed().as_secs_f64();

    let per_segment = outcome.segments.iter().map(|s| s.seconds).collect();
    Ok((outcome.posterior, full, LatencyReport::new(beta, alpha, per_segment)))
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub config: StreamConfig,
    pub repeats: usize,
    pub audio_seconds: f64,
    pub median: LatencyReport,
    /// Largest per-segment compute time seen, against the step duration.
    pub max_segment_seconds: f64,
    pub realtime_ok: bool,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Repeats [`measure_latency`] and reports medians. `realtime_ok` records
/// whether each segment's compute fit within one step of audio, the
/// condition under which the overlapped schedule is attainable live.
pub fn bench_latency<T: Real>(
    audio: &AudioBuffer,
    cfg: &StreamConfig,
    weights: &ModelWeights<T>,
    cmvn: Option<&CmvnStats>,
    repeats: usize,
) -> Result<BenchSummary, StreamError> {
    let repeats = repeats.max(1);
    let mut alphas = Vec::with_capacity(repeats);
    let mut betas = Vec::with_capacity(repeats);
    let mut per_segment: Vec<Vec<f64>> = Vec::new();
    let mut max_segment = 0.0f64;
    for _ in 0..repeats {
        let (_, _, r) = measure_latency(audio, cfg, weights, cmvn, crate::feat::FRAME_HOP)?;
        alphas.push(r.alpha_seconds);
        betas.push(r.beta_seconds);
        max_segment = r.per_segment_times.iter().copied().fold(max_segment, f64::max);
        per_segment.push(r.per_segment_times);
    }
    let n_seg = per_segment[0].len();
    let seg_medians = (0..n_seg)
        .map(|i| median(&mut per_segment.iter().map(|v| v[i]).collect::<Vec<_>>()))
        .collect();
    let report = LatencyReport::new(median(&mut betas), median(&mut alphas), seg_medians);
    Ok(BenchSummary {
        config: *cfg,
        repeats,
        audio_seconds: audio.duration_seconds(),
        median: report,
        max_segment_seconds: max_segment,
        realtime_ok: max_segment < cfg.step_seconds,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum StreamMessage {
    Frame(FeatureFrame),
    EndOfStream,
}

/// Inference consumer running on its own thread, fed through a bounded
/// channel. Frames must arrive in order; the stream ends only on an explicit
/// [`StreamMessage::EndOfStream`].
pub struct StreamWorker<T> {
    sender: SyncSender<StreamMessage>,
    handle: JoinHandle<Result<StreamOutcome<T>, StreamError>>,
}

impl<T: Real> StreamWorker<T> {
    pub fn spawn(weights: Arc<ModelWeights<T>>, cfg: StreamConfig, capacity: usize) -> Result<Self, StreamError> {
        // fail fast on bad config before the thread exists
        StreamSession::new(&weights, &cfg)?;
        let (sender, receiver) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || consume(&weights, &cfg, receiver));
        Ok(Self { sender, handle })
    }

    pub fn send(&self, frame: FeatureFrame) -> Result<(), StreamError> {
        self.sender
            .send(StreamMessage::Frame(frame))
            .map_err(|_| StreamError::Disconnected)
    }

    pub fn finish(self) -> Result<StreamOutcome<T>, StreamError> {
        // the worker may already have exited with an error; join reports it
        let _ = self.sender.send(StreamMessage::EndOfStream);
        self.handle.join().map_err(|_| StreamError::Disconnected)?
    }
}

fn consume<T: Real>(
    weights: &ModelWeights<T>,
    cfg: &StreamConfig,
    rx: Receiver<StreamMessage>,
) -> Result<StreamOutcome<T>, StreamError> {
    let mut session = StreamSession::new(weights, cfg)?;
    loop {
        match rx.recv().map_err(|_| StreamError::Disconnected)? {
            StreamMessage::Frame(f) => session.push_frame(f)?,
            StreamMessage::EndOfStream => return session.finish(),
        }
    }
}
