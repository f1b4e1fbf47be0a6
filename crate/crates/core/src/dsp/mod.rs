//! 16 kHz waveform → 43-channel frame features.
//!
//! Channel layout per frame (40 ms window, 10 ms hop):
//!
//! | channels | content                                   |
//! |----------|-------------------------------------------|
//! | 0..=39   | natural-log mel filterbank energies       |
//! | 40       | log frame energy, `½·ln(Σ s² + 1e-10)`    |
//! | 41       | f0 in Hz (0 when unvoiced)                |
//! | 42       | NCCF at the selected lag, in `[-1, 1]`    |
//!
//! No normalization of any kind is applied; features are absolute.

mod mel;
mod pitch;
mod resample;
mod wav;

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use pitch::{
    select_lag, NccfAnalyzer, PitchFrame, F0_MAX, F0_MIN, MAX_LAG, MIN_LAG, NCCF_WINDOW, OCTAVE_RATIO,
    VOICING_THRESHOLD,
};
pub use resample::{resample, ZERO_CROSSINGS};
pub use wav::{read_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;
/// 40 ms at 16 kHz.
pub const WIN_LEN: usize = 640;
/// 10 ms at 16 kHz.
pub const HOP_LEN: usize = 160;
pub const FFT_SIZE: usize = 1024;
pub const N_MELS: usize = 40;
pub const N_CHANNELS: usize = 43;
pub const CH_ENERGY: usize = 40;
pub const CH_F0: usize = 41;
pub const CH_NCCF: usize = 42;
pub const POWER_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Length("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("waveform samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
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

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Converts to 16 kHz with the windowed-sinc resampler.
    pub fn to_16k(self) -> Result<Self> {
        if self.sample_rate == SAMPLE_RATE {
            return Ok(self);
        }
        let step = self.sample_rate as f64 / SAMPLE_RATE as f64;
        Waveform::new(resample(&self.samples, step)?, SAMPLE_RATE)
    }
}

/// `T × 43` row-major frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * N_CHANNELS {
            return Err(Error::Dimension(format!(
                "{} values for {frames} frames of {N_CHANNELS} channels",
                data.len()
            )));
        }
        Ok(FeatureMatrix { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        N_CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * N_CHANNELS..(t + 1) * N_CHANNELS]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(c).step_by(N_CHANNELS).copied()
    }
}

/// Number of full 40 ms frames at a 10 ms hop.
pub fn frame_count(n_samples: usize) -> Result<usize> {
    if n_samples < WIN_LEN {
        return Err(Error::Length(format!(
            "{n_samples} samples is shorter than one {WIN_LEN}-sample window"
        )));
    }
    Ok((n_samples - WIN_LEN) / HOP_LEN + 1)
}

pub fn frame_signal(w: &Waveform) -> Result<Vec<&[f64]>> {
    let t = frame_count(w.len())?;
    Ok((0..t).map(|i| &w.samples()[i * HOP_LEN..i * HOP_LEN + WIN_LEN]).collect())
}

/// Reusable FFT plans, window and filterbank.
#[derive(Clone)]
pub struct FeatureExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    mel: MelFilterbank,
    nccf: NccfAnalyzer,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        let window = (0..WIN_LEN)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WIN_LEN as f64).cos())
            .collect();
        FeatureExtractor {
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
            window,
            mel: MelFilterbank::default(),
            nccf: NccfAnalyzer::default(),
        }
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.mel
    }

    /// Periodic-Hann-windowed, zero-padded power spectrum (`FFT_SIZE/2 + 1` bins).
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = (0..FFT_SIZE)
            .map(|i| {
                let v = if i < frame.len() { frame[i] * self.window[i] } else { 0.0 };
                Complex::new(v, 0.0)
            })
            .collect();
        self.fft.process(&mut buf);
        buf[..=FFT_SIZE / 2].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn log_mel_fbank(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != WIN_LEN {
            return Err(Error::Length(format!("frame of {} samples, expected {WIN_LEN}", frame.len())));
        }
        let energies = self.mel.apply(&self.power_spectrum(frame));
        Ok(energies.into_iter().map(|e| e.max(POWER_FLOOR).ln()).collect())
    }

    pub fn nccf_pitch(&self, w: &Waveform) -> Result<Vec<PitchFrame>> {
        Ok(frame_signal(w)?.into_iter().map(|f| self.nccf.analyze(f)).collect())
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.sample_rate() != SAMPLE_RATE {
            return Err(Error::Parameter(format!(
                "features need {SAMPLE_RATE} Hz input, got {}",
                w.sample_rate()
            )));
        }
        let frames = frame_signal(w)?;
        let mut data = Vec::with_capacity(frames.len() * N_CHANNELS);
        for f in &frames {
            data.extend(self.log_mel_fbank(f)?);
            data.push(log_energy(f));
            let p = self.nccf.analyze(f);
            data.push(p.f0);
            data.push(p.nccf);
        }
        FeatureMatrix::new(frames.len(), data)
    }
}

/// `½·ln(Σ s² + 1e-10)`: the log of the frame's root energy, so doubling the
/// amplitude adds exactly `ln 2`.
pub fn log_energy(frame: &[f64]) -> f64 {
    0.5 * (frame.iter().map(|v| v * v).sum::<f64>() + POWER_FLOOR).ln()
}

pub fn log_mel_fbank(frame: &[f64]) -> Result<Vec<f64>> {
    FeatureExtractor::default().log_mel_fbank(frame)
}

pub fn nccf_pitch(w: &Waveform) -> Result<Vec<PitchFrame>> {
    FeatureExtractor::default().nccf_pitch(w)
}

pub fn extract_features(w: &Waveform) -> Result<FeatureMatrix> {
    FeatureExtractor::default().extract(w)
}

/// Feature file magic; the layout is
/// `magic(8) | version u32 | frames u64 | channels u32 | frames×channels f64`,
/// all little-endian, row-major.
pub const FEATURE_MAGIC: &[u8; 8] = b"MENANFEA";
pub const FEATURE_VERSION: u32 = 1;

impl FeatureMatrix {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 8);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u64).to_le_bytes());
        out.extend_from_slice(&(N_CHANNELS as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8], path: &Path) -> Result<Self> {
        if b.len() < 24 || &b[..8] != FEATURE_MAGIC {
            return Err(Error::format(path, "not a feature file"));
        }
        let version = u32::from_le_bytes(b[8..12].try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(Error::format(path, format!("unsupported feature version {version}")));
        }
        let frames = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
        let channels = u32::from_le_bytes(b[20..24].try_into().unwrap()) as usize;
        if channels != N_CHANNELS {
            return Err(Error::format(path, format!("{channels} channels, expected {N_CHANNELS}")));
        }
        let body = &b[24..];
        if body.len() != frames * channels * 8 {
            return Err(Error::format(path, "feature payload size does not match header"));
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        FeatureMatrix::new(frames, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&b, path)
    }
}
