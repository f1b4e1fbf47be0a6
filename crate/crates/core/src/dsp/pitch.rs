//! One-pass NCCF pitch and voicing per analysis frame.
//!
//! For a frame `x` of `WIN_LEN` samples the comparison window is the first
//! `W = WIN_LEN − MAX_LAG` samples, so every lag is scored over the same
//! number of products:
//!
//! ```text
//! nccf(l) = Σ_{n<W} x[n]·x[n+l] / sqrt(Σ_{n<W} x[n]² · Σ_{n<W} x[n+l]²)
//! ```
//!
//! Lags span 60–400 Hz. The chosen lag is the shortest local maximum whose
//! score reaches `OCTAVE_RATIO` of the global maximum, which keeps exact
//! multiples of the period from winning on numerical ties. Frames whose
//! best score is below `VOICING_THRESHOLD` are unvoiced and report `f0 = 0`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::dsp::{FFT_SIZE, SAMPLE_RATE, WIN_LEN};

pub const F0_MIN: f64 = 60.0;
pub const F0_MAX: f64 = 400.0;
pub const MIN_LAG: usize = 40; // 16000 / 400
pub const MAX_LAG: usize = 266; // floor(16000 / 60)
pub const NCCF_WINDOW: usize = WIN_LEN - MAX_LAG;
pub const VOICING_THRESHOLD: f64 = 0.3;
pub const OCTAVE_RATIO: f64 = 0.97;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitchFrame {
    pub f0: f64,
    pub nccf: f64,
}

/// Picks pitch from NCCF scores for lags `MIN_LAG..=MAX_LAG`.
pub fn select_lag(scores: &[f64]) -> PitchFrame {
    debug_assert_eq!(scores.len(), MAX_LAG - MIN_LAG + 1);
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if best < VOICING_THRESHOLD {
        return PitchFrame { f0: 0.0, nccf: best };
    }
    let last = scores.len() - 1;
    let chosen = (0..scores.len())
        .find(|&i| {
            let s = scores[i];
            s >= OCTAVE_RATIO * best
                && (i == 0 || s >= scores[i - 1])
                && (i == last || s >= scores[i + 1])
        })
        .unwrap_or(0);
    PitchFrame {
        f0: SAMPLE_RATE as f64 / (chosen + MIN_LAG) as f64,
        nccf: scores[chosen],
    }
}

/// FFT-based NCCF for all lags of one frame.
#[derive(Clone)]
pub struct NccfAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl Default for NccfAnalyzer {
    fn default() -> Self {
        let mut planner = FftPlanner::new();
        NccfAnalyzer {
            fft: planner.plan_fft_forward(FFT_SIZE),
            ifft: planner.plan_fft_inverse(FFT_SIZE),
        }
    }
}

impl NccfAnalyzer {
    pub fn scores(&self, frame: &[f64]) -> Vec<f64> {
        debug_assert_eq!(frame.len(), WIN_LEN);
        // Circular correlation is exact here: NCCF_WINDOW + MAX_LAG < FFT_SIZE.
        let mut head: Vec<Complex<f64>> = (0..FFT_SIZE)
            .map(|i| Complex::new(if i < NCCF_WINDOW { frame[i] } else { 0.0 }, 0.0))
            .collect();
        let mut full: Vec<Complex<f64>> = (0..FFT_SIZE)
            .map(|i| Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        self.fft.process(&mut head);
        self.fft.process(&mut full);
        let mut cross: Vec<Complex<f64>> = head.iter().zip(&full).map(|(a, b)| a.conj() * b).collect();
        self.ifft.process(&mut cross);

        let mut prefix = Vec::with_capacity(WIN_LEN + 1);
        prefix.push(0.0);
        for &v in frame {
            prefix.push(prefix.last().unwrap() + v * v);
        }
        let e0 = prefix[NCCF_WINDOW];
        (MIN_LAG..=MAX_LAG)
            .map(|l| {
                let num = cross[l].re / FFT_SIZE as f64;
                let el = prefix[l + NCCF_WINDOW] - prefix[l];
                let d = (e0 * el).sqrt();
                if d > 1e-20 {
                    (num / d).clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn analyze(&self, frame: &[f64]) -> PitchFrame {
        select_lag(&self.scores(frame))
    }
}
