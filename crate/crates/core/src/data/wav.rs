use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::DataError;
use crate::feat::{AudioBuffer, SAMPLE_RATE};

fn wav_err(path: &Path, e: hound::Error) -> DataError {
    match e {
        hound::Error::IoError(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DataError::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Reads a RIFF/WAVE file holding 16 kHz mono 16-bit PCM.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, DataError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let p = path.to_path_buf();
    if spec.sample_format == SampleFormat::Float {
        return Err(DataError::FloatFormat { path: p });
    }
    if spec.channels != 1 {
        return Err(DataError::Channels { path: p, found: spec.channels });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(DataError::SampleRate {
            path: p,
            found: spec.sample_rate,
        });
    }
    if spec.bits_per_sample != 16 {
        return Err(DataError::BitsPerSample {
            path: p,
            found: spec.bits_per_sample,
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    AudioBuffer::new(samples, SAMPLE_RATE).map_err(|source| DataError::Features { path: p, source })
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<(), DataError> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    let mut i16w = w.get_i16_writer(audio.len() as u32);
    for &s in audio.samples() {
        i16w.write_sample(s);
    }
    i16w.flush().map_err(|e| wav_err(path, e))?;
    w.finalize().map_err(|e| wav_err(path, e))
}
