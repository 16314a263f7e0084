//! Cepstral mean and variance normalization.

use super::{FeatError, FeatureFrame, FeatureSequence, FEATURE_DIM};

pub const CMVN_STD_FLOOR: f64 = 1e-8;

/// Per-dimension mean and standard deviation pooled over a training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

impl CmvnStats {
    /// Identity statistics (mean 0, std 1).
    pub fn identity() -> Self {
        Self {
            mean: [0.0; FEATURE_DIM],
            std: [1.0; FEATURE_DIM],
        }
    }

    pub fn normalize_frame(&self, frame: &FeatureFrame) -> FeatureFrame {
        let mut out = [0.0; FEATURE_DIM];
        for k in 0..FEATURE_DIM {
            out[k] = (frame[k] - self.mean[k]) / self.std[k];
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub enum CmvnMode<'a> {
    None,
    Global(&'a CmvnStats),
    Utterance,
}

fn stats_of<'a>(frames: impl Iterator<Item = &'a FeatureFrame> + Clone) -> Option<CmvnStats> {
    let mut count = 0usize;
    let mut sum = [0.0; FEATURE_DIM];
    for f in frames.clone() {
        count += 1;
        for k in 0..FEATURE_DIM {
            sum[k] += f[k];
        }
    }
    if count == 0 {
        return None;
    }
    let n = count as f64;
    let mean = sum.map(|s| s / n);
    let mut sq = [0.0; FEATURE_DIM];
    for f in frames {
        for k in 0..FEATURE_DIM {
            let d = f[k] - mean[k];
            sq[k] += d * d;
        }
    }
    let std = sq.map(|s| (s / n).sqrt().max(CMVN_STD_FLOOR));
    Some(CmvnStats { mean, std })
}

/// Global statistics over every frame of every utterance in `corpus`.
pub fn compute_global_cmvn(corpus: &[FeatureSequence]) -> Result<CmvnStats, FeatError> {
    stats_of(corpus.iter().flat_map(|s| s.frames().iter())).ok_or(FeatError::EmptyCorpus)
}

pub fn apply_cmvn(seq: &FeatureSequence, mode: CmvnMode<'_>) -> Result<FeatureSequence, FeatError> {
    let stats = match mode {
        CmvnMode::None => return Ok(seq.clone()),
        CmvnMode::Global(stats) => stats.clone(),
        CmvnMode::Utterance => {
            if seq.len() < 2 {
                return Err(FeatError::UtteranceTooShort { frames: seq.len() });
            }
            stats_of(seq.frames().iter()).ok_or(FeatError::EmptySequence)?
        }
    };
    FeatureSequence::new(seq.frames().iter().map(|f| stats.normalize_frame(f)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(frames: Vec<FeatureFrame>) -> FeatureSequence {
        FeatureSequence::new(frames).unwrap()
    }

    fn column_stats(s: &FeatureSequence, k: usize) -> (f64, f64) {
        let n = s.len() as f64;
        let m = s.frames().iter().map(|f| f[k]).sum::<f64>() / n;
        let v = s.frames().iter().map(|f| (f[k] - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    }

    #[test]
    fn constant_corpus_hits_floor() {
        let c = [3.5; FEATURE_DIM];
        let stats = compute_global_cmvn(&[seq(vec![c; 7])]).unwrap();
        assert_eq!(stats.mean, c);
        assert_eq!(stats.std, [CMVN_STD_FLOOR; FEATURE_DIM]);
    }

    #[test]
    fn two_frame_stats() {
        let stats = compute_global_cmvn(&[seq(vec![[0.0; FEATURE_DIM], [2.0; FEATURE_DIM]])]).unwrap();
        assert_eq!(stats.mean, [1.0; FEATURE_DIM]);
        assert_eq!(stats.std, [1.0; FEATURE_DIM]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert_eq!(compute_global_cmvn(&[]), Err(FeatError::EmptyCorpus));
    }

    #[test]
    fn none_and_identity_global_are_identity() {
        let s = seq((0..5).map(|i| [i as f64 * 0.3 - 1.0; FEATURE_DIM]).collect());
        assert_eq!(apply_cmvn(&s, CmvnMode::None).unwrap(), s);
        assert_eq!(apply_cmvn(&s, CmvnMode::Global(&CmvnStats::identity())).unwrap(), s);
    }

    #[test]
    fn utterance_mode_needs_two_frames() {
        let s = seq(vec![[1.0; FEATURE_DIM]]);
        assert_eq!(
            apply_cmvn(&s, CmvnMode::Utterance),
            Err(FeatError::UtteranceTooShort { frames: 1 })
        );
    }

    fn arb_seq(min: usize) -> impl Strategy<Value = FeatureSequence> {
        prop::collection::vec(prop::array::uniform32(-50.0f64..50.0), min..40).prop_map(|rows| {
            seq(rows
                .into_iter()
                .map(|r| {
                    let mut f = [0.0; FEATURE_DIM];
                    for k in 0..FEATURE_DIM {
                        f[k] = r[k % 32] * (1.0 + k as f64 * 0.01) + k as f64;
                    }
                    f
                })
                .collect())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn utterance_mode_standardizes_and_is_idempotent(s in arb_seq(2)) {
            let once = apply_cmvn(&s, CmvnMode::Utterance).unwrap();
            let twice = apply_cmvn(&once, CmvnMode::Utterance).unwrap();
            for k in 0..FEATURE_DIM {
                let (m, sd) = column_stats(&s, k);
                if sd < 1e-6 { continue; }
                let (m1, s1) = column_stats(&once, k);
                prop_assert!(m1.abs() < 1e-6 && (s1 - 1.0).abs() < 1e-6, "{} {} {}", m, m1, s1);
            }
            for (a, b) in once.frames().iter().zip(twice.frames()) {
                for k in 0..FEATURE_DIM {
                    prop_assert!((a[k] - b[k]).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn global_mode_is_causal(s in arb_seq(3), cut in 1usize..3) {
            let stats = compute_global_cmvn(std::slice::from_ref(&s)).unwrap();
            let whole = apply_cmvn(&s, CmvnMode::Global(&stats)).unwrap();
            let prefix = seq(s.frames()[..cut].to_vec());
            let part = apply_cmvn(&prefix, CmvnMode::Global(&stats)).unwrap();
            prop_assert_eq!(part.frames(), &whole.frames()[..cut]);
        }
    }
}
