//! Dataset ingestion: WAV files, CSV manifests, the synthetic tone-motif
//! corpus and additive noise at a target SNR.

mod manifest;
mod noise;
mod toy;
mod wav;

use std::path::PathBuf;

use rayon::prelude::*;
use thiserror::Error;

pub use manifest::{load_csv_manifest, load_fluent_manifest, load_manifest, write_manifest, Manifest, ManifestEntry, Split};
pub use noise::{mean_square, mix_noise, noise_scale, realized_snr_db};
pub use toy::{generate_toy_corpus, motif_frequencies, toy_utterance, ToyCorpusSpec};
pub use wav::{read_wav, write_wav};

use crate::feat::{extract_features, FeatError};
use crate::train::Example;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed WAV: {message}")]
    Wav { path: PathBuf, message: String },
    #[error("{path}: header field channels = {found}, expected 1 (mono)")]
    Channels { path: PathBuf, found: u16 },
    #[error("{path}: header field sample_rate = {found} Hz, expected 16000 Hz")]
    SampleRate { path: PathBuf, found: u32 },
    #[error("{path}: header field bits_per_sample = {found}, expected 16")]
    BitsPerSample { path: PathBuf, found: u16 },
    #[error("{path}: header field audio_format is IEEE float, expected integer PCM")]
    FloatFormat { path: PathBuf },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path}: missing column '{column}'")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}: unknown label '{label}'")]
    UnknownLabel { path: PathBuf, row: usize, label: String },
    #[error("{path}: row {row}: unknown split '{split}' (expected train, val or test)")]
    UnknownSplit { path: PathBuf, row: usize, split: String },
    #[error("clean signal is silent, SNR is undefined")]
    SilentSignal,
    #[error("noise signal is silent, it cannot be scaled to an SNR")]
    SilentNoise,
    #[error("invalid SNR {0} dB")]
    InvalidSnr(f64),
    #[error("invalid toy corpus spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Features {
        path: PathBuf,
        #[source]
        source: FeatError,
    },
}

/// Reads and featurizes every entry, in parallel, preserving order.
pub fn load_examples<'a>(entries: impl IntoIterator<Item = &'a ManifestEntry>) -> Result<Vec<Example>, DataError> {
    let entries: Vec<&ManifestEntry> = entries.into_iter().collect();
    entries
        .par_iter()
        .map(|e| {
            let audio = read_wav(&e.path)?;
            let features = extract_features(&audio).map_err(|source| DataError::Features {
                path: e.path.clone(),
                source,
            })?;
            Ok(Example {
                features,
                label: e.label_id,
            })
        })
        .collect()
}
