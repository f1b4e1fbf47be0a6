use crate::dsp::{FFT_SIZE, N_MELS, SAMPLE_RATE};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters spaced uniformly on the mel scale between 0 Hz and
/// Nyquist, evaluated on the bins of a `FFT_SIZE`-point power spectrum.
/// Filters are unnormalized (peak weight 1).
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// Per filter: first bin index and the weights from there on.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new(N_MELS, FFT_SIZE, SAMPLE_RATE as f64, 0.0, SAMPLE_RATE as f64 / 2.0)
    }
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: f64, f_min: f64, f_max: f64) -> Self {
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = fft_size / 2 + 1;
        let bin_hz = sample_rate / fft_size as f64;
        let filters = (0..n_mels)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                let start = weights.first().map_or(0, |&(k, _)| k);
                (start, weights.into_iter().map(|(_, w)| w).collect())
            })
            .collect();
        MelFilterbank {
            filters,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// Filter energies of a one-sided power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|(start, w)| w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum())
            .collect()
    }
}
