use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{load_csv_manifest, write_manifest, write_wav, DataError, Manifest, Split};
use crate::feat::{AudioBuffer, SAMPLE_RATE};

const LOWEST_TONE_HZ: f64 = 300.0;
const HIGHEST_TONE_HZ: f64 = 3500.0;
const TONES_PER_MOTIF: usize = 3;
const FADE_SAMPLES: usize = 160;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            samples_per_class: 100,
            min_duration: 0.8,
            max_duration: 2.5,
            seed: 0,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::InvalidSpec(format!("{} classes, need at least 2", self.num_classes)));
        }
        if self.samples_per_class == 0 {
            return Err(DataError::InvalidSpec("zero samples per class".into()));
        }
        if !(self.min_duration >= 0.7 && self.min_duration <= self.max_duration) {
            return Err(DataError::InvalidSpec(format!(
                "duration range [{}, {}] s must be ordered and at least 0.7 s",
                self.min_duration, self.max_duration
            )));
        }
        Ok(())
    }
}

/// Class `c` of `n` plays tones `c`, `c + n` and `c + 2n` from a
/// log-spaced ladder, so no two classes share a frequency.
pub fn motif_frequencies(class: usize, num_classes: usize) -> [f64; TONES_PER_MOTIF] {
    let steps = (TONES_PER_MOTIF * num_classes - 1) as f64;
    let ratio = (HIGHEST_TONE_HZ / LOWEST_TONE_HZ).powf(1.0 / steps);
    std::array::from_fn(|k| LOWEST_TONE_HZ * ratio.powi((class + k * num_classes) as i32))
}

/// One utterance: the class motif as consecutive tones of equal length at a
/// random amplitude and phase, over a white-noise floor.
pub fn toy_utterance(class: usize, num_classes: usize, duration: f64, rng: &mut ChaCha8Rng) -> AudioBuffer {
    let n = (duration * f64::from(SAMPLE_RATE)).round() as usize;
    let amp = rng.gen_range(2000.0..12000.0);
    let sigma = rng.gen_range(50.0..300.0);
    let lead = rng.gen_range(0..=n / 10);
    let tail = rng.gen_range(0..=n / 10);
    let body = n - lead - tail;
    let seg = body / TONES_PER_MOTIF;
    let freqs = motif_frequencies(class, num_classes);
    let phases: [f64; TONES_PER_MOTIF] = std::array::from_fn(|_| rng.gen_range(0.0..2.0 * PI));
    let floor = Normal::new(0.0, sigma).expect("positive sigma");
    let samples = (0..n)
        .map(|i| {
            let mut v = floor.sample(rng);
            if i >= lead && i < lead + seg * TONES_PER_MOTIF {
                let k = (i - lead) / seg;
                let j = (i - lead) % seg;
                let env = (j.min(seg - 1 - j) as f64 / FADE_SAMPLES as f64).min(1.0);
                let t = i as f64 / f64::from(SAMPLE_RATE);
                v += amp * env * (2.0 * PI * freqs[k] * t + phases[k]).sin();
            }
            v.round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
        })
        .collect();
    AudioBuffer::new(samples, SAMPLE_RATE).expect("non-empty 16 kHz buffer")
}

/// Writes `wav/*.wav` and `manifest.csv` under `out_dir` and returns the
/// loaded manifest. Splits are 70/15/15 over one seeded shuffle.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, out_dir: impl AsRef<Path>) -> Result<Manifest, DataError> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|source| DataError::Io {
        path: wav_dir.clone(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        for i in 0..spec.samples_per_class {
            let duration = rng.gen_range(spec.min_duration..=spec.max_duration);
            let audio = toy_utterance(class, spec.num_classes, duration, &mut rng);
            let rel = format!("wav/motif_{class}_{i:04}.wav");
            write_wav(out_dir.join(&rel), &audio)?;
            rows.push((rel, format!("motif_{class}")));
        }
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng);
    let n = rows.len();
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let rows: Vec<(String, String, Split)> = rows.into_iter().zip(split).map(|((p, l), s)| (p, l, s)).collect();
    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &rows)?;
    load_csv_manifest(&manifest_path, out_dir, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_wav;

    #[test]
    fn motifs_never_share_a_frequency() {
        let mut all: Vec<f64> = (0..8).flat_map(|c| motif_frequencies(c, 8)).collect();
        all.sort_by(f64::total_cmp);
        assert!((all[0] - 300.0).abs() < 1e-9 && (all[23] - 3500.0).abs() < 1e-6);
        assert!(all.windows(2).all(|w| w[1] / w[0] > 1.1));
    }

    #[test]
    fn utterance_has_requested_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(toy_utterance(3, 8, 1.25, &mut rng).len(), 20_000);
    }

    #[test]
    fn small_corpus_is_deterministic_with_split_counts() {
        let spec = ToyCorpusSpec {
            num_classes: 4,
            samples_per_class: 5,
            seed: 9,
            ..ToyCorpusSpec::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_toy_corpus(&spec, a.path()).unwrap();
        generate_toy_corpus(&spec, b.path()).unwrap();
        assert_eq!(ma.entries.len(), 20);
        assert_eq!(ma.num_classes(), 4);
        let counts: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().map(|&s| ma.split(s).count()).collect();
        assert_eq!(counts, vec![14, 3, 3]);
        for e in &ma.entries {
            let rel = e.path.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(&e.path).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
            let d = read_wav(&e.path).unwrap().duration_seconds();
            assert!((0.8 - 1e-4..=2.5 + 1e-4).contains(&d));
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.csv")).unwrap(),
            std::fs::read(b.path().join("manifest.csv")).unwrap()
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let s = ToyCorpusSpec {
            num_classes: 1,
            ..ToyCorpusSpec::default()
        };
        assert!(s.validate().is_err());
        let s = ToyCorpusSpec {
            min_duration: 0.3,
            ..ToyCorpusSpec::default()
        };
        assert!(s.validate().is_err());
    }
}
