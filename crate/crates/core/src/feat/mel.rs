/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of `num_filters` filters equally spaced in mel
/// between `low_hz` and `high_hz`.
pub fn mel_center_frequencies(num_filters: usize, low_hz: f64, high_hz: f64) -> Vec<f64> {
    mel_edges(num_filters, low_hz, high_hz)[1..=num_filters].to_vec()
}

fn mel_edges(num_filters: usize, low_hz: f64, high_hz: f64) -> Vec<f64> {
    let lo = hz_to_mel(low_hz);
    let hi = hz_to_mel(high_hz);
    (0..num_filters + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (num_filters + 1) as f64))
        .collect()
}

#[derive(Debug, Clone)]
struct Filter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Triangular filters evaluated at FFT bin frequencies, stored sparsely.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    filters: Vec<Filter>,
    num_bins: usize,
}

impl MelFilterbank {
    pub fn new(num_filters: usize, fft_size: usize, sample_rate: f64, low_hz: f64, high_hz: f64) -> Self {
        let edges = mel_edges(num_filters, low_hz, high_hz);
        let num_bins = fft_size / 2 + 1;
        let bin_hz = sample_rate / fft_size as f64;
        let filters = (0..num_filters)
            .map(|m| {
                let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut first_bin = None;
                let mut weights = Vec::new();
                for k in 0..num_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f > left && f <= centre {
                        (f - left) / (centre - left)
                    } else if f > centre && f < right {
                        (right - f) / (right - centre)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first_bin.get_or_insert(k);
                        weights.push(w);
                    } else if first_bin.is_some() {
                        break;
                    }
                }
                Filter {
                    first_bin: first_bin.unwrap_or(0),
                    weights,
                }
            })
            .collect();
        Self { filters, num_bins }
    }

    pub fn num_filters(&self) -> usize {
        self.filters.len()
    }

    /// Dense weight row of filter `m`, one entry per spectrum bin.
    pub fn dense_row(&self, m: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_bins];
        let f = &self.filters[m];
        row[f.first_bin..f.first_bin + f.weights.len()].copy_from_slice(&f.weights);
        row
    }

    pub fn apply<'a>(&'a self, spectrum: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        debug_assert_eq!(spectrum.len(), self.num_bins);
        self.filters.iter().map(move |f| {
            f.weights
                .iter()
                .zip(&spectrum[f.first_bin..])
                .map(|(w, s)| w * s)
                .sum()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_round_trip() {
        for hz in [0.0, 100.0, 1000.0, 4000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
    }

    #[test]
    fn every_filter_covers_a_bin() {
        let fb = MelFilterbank::new(40, 512, 16_000.0, 0.0, 8000.0);
        for m in 0..40 {
            let row = fb.dense_row(m);
            assert!(row.iter().any(|&w| w > 0.0), "filter {m} empty");
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn centres_increase() {
        let c = mel_center_frequencies(40, 0.0, 8000.0);
        assert_eq!(c.len(), 40);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(c[39] < 8000.0);
    }
}
