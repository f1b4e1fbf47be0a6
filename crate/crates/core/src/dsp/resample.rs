//! Band-limited resampling with a Hann-windowed sinc kernel.
//!
//! The kernel spans `ZERO_CROSSINGS` zero crossings on each side of the
//! output position. When decimating, the cutoff drops to the output Nyquist
//! and the kernel widens accordingly.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const ZERO_CROSSINGS: usize = 16;

/// Resamples `x` so that output sample `j` sits at input position
/// `j · step`. Output length is `round(len / step)`.
///
/// `step > 1` shortens the signal (speeds it up), `step < 1` stretches it.
/// `step == 1` returns the input unchanged.
pub fn resample(x: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Parameter(format!("resampling step must be positive, got {step}")));
    }
    if step == 1.0 {
        return Ok(x.to_vec());
    }
    let out_len = (x.len() as f64 / step).round() as usize;
    let cutoff = (1.0 / step).min(1.0);
    let half = ZERO_CROSSINGS as f64 / cutoff;
    let n = x.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let pos = j as f64 * step;
        let lo = ((pos - half).ceil() as isize).max(0);
        let hi = ((pos + half).floor() as isize).min(n - 1);
        let mut acc = 0.0;
        for k in lo..=hi {
            let d = pos - k as f64;
            acc += x[k as usize] * kernel(d, cutoff, half);
        }
        out.push(acc);
    }
    Ok(out)
}

fn kernel(d: f64, cutoff: f64, half: f64) -> f64 {
    let window = 0.5 + 0.5 * (PI * d / half).cos();
    let arg = PI * cutoff * d;
    let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
    cutoff * sinc * window
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_step() {
        let x = vec![0.1, -0.4, 0.9];
        assert_eq!(resample(&x, 1.0).unwrap(), x);
    }

    #[test]
    fn lengths_follow_the_step() {
        let x = vec![0.0; 160_000];
        assert_eq!(resample(&x, 0.8).unwrap().len(), 200_000);
        assert_eq!(resample(&x, 1.25).unwrap().len(), 128_000);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(matches!(resample(&[1.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(resample(&[1.0], -1.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn dc_is_preserved_away_from_edges() {
        let x = vec![0.5; 4000];
        let y = resample(&x, 1.1).unwrap();
        for v in &y[100..y.len() - 100] {
            assert!((v - 0.5).abs() < 5e-3, "{v}");
        }
    }
}
