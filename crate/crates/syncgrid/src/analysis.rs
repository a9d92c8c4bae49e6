//! Spectra, dominant frequency and unit-circle snapshots.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("window of {window} samples exceeds series length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("window must hold at least 2 samples")]
    WindowTooShort,
    #[error("spectrum has no non-zero bin")]
    FlatSpectrum,
    #[error("sample rate must be positive")]
    BadRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Rectangular,
    Hann,
}

/// One-sided magnitude spectrum. Magnitudes are scaled so their squares sum to the
/// energy of the (mean-removed, windowed) input: sum_k mag_k^2 = sum_n x_n^2.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub mags: Vec<f64>,
    pub sample_rate: f64,
    pub window_len: usize,
}

impl Spectrum {
    pub fn resolution(&self) -> f64 {
        self.sample_rate / self.window_len as f64
    }

    /// Peak amplitude of the sinusoid at bin `k` (undoes the energy scaling).
    pub fn amplitude(&self, k: usize) -> f64 {
        let n = self.window_len as f64;
        let edge = k == 0 || (self.window_len % 2 == 0 && k == self.window_len / 2);
        if edge {
            self.mags[k] / n.sqrt()
        } else {
            self.mags[k] * (2.0 / n).sqrt()
        }
    }

    pub fn energy(&self) -> f64 {
        self.mags.iter().map(|m| m * m).sum()
    }

    /// Nearest bin to frequency `f`.
    pub fn bin_of(&self, f: f64) -> usize {
        ((f / self.resolution()).round() as usize).min(self.mags.len() - 1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("freq_hz,magnitude\n");
        for (f, m) in self.freqs.iter().zip(&self.mags) {
            s.push_str(&format!("{},{}\n", crate::simcore::fmt_f64(*f), crate::simcore::fmt_f64(*m)));
        }
        s
    }
}

/// Spectrum of the last `window` samples (all samples when `None`), mean removed.
pub fn fft_spectrum(
    samples: &[f64],
    sample_rate: f64,
    window: Option<usize>,
    kind: Window,
) -> Result<Spectrum, AnalysisError> {
    if !(sample_rate > 0.0) {
        return Err(AnalysisError::BadRate);
    }
    let n = window.unwrap_or(samples.len());
    if n > samples.len() {
        return Err(AnalysisError::WindowTooLong { window: n, len: samples.len() });
    }
    if n < 2 {
        return Err(AnalysisError::WindowTooShort);
    }
    let seg = &samples[samples.len() - n..];
    let mean = seg.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = seg
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let w = match kind {
                Window::Rectangular => 1.0,
                Window::Hann => 0.5 - 0.5 * (2.0 * PI * k as f64 / (n - 1) as f64).cos(),
            };
            Complex64::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let nf = n as f64;
    let mut freqs = Vec::with_capacity(half + 1);
    let mut mags = Vec::with_capacity(half + 1);
    for (k, z) in buf.iter().enumerate().take(half + 1) {
        let edge = k == 0 || (n % 2 == 0 && k == half);
        let weight = if edge { 1.0 } else { 2.0 };
        freqs.push(k as f64 * sample_rate / nf);
        mags.push(z.norm() * (weight / nf).sqrt());
    }
    Ok(Spectrum { freqs, mags, sample_rate, window_len: n })
}

/// Frequency of the largest non-DC bin, refined with a parabola through its neighbours.
pub fn dominant_frequency(s: &Spectrum) -> Result<f64, AnalysisError> {
    if s.mags.len() < 2 {
        return Err(AnalysisError::FlatSpectrum);
    }
    let (k, &m) = s
        .mags
        .iter()
        .enumerate()
        .skip(1)
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    if !(m > 1e-300) {
        return Err(AnalysisError::FlatSpectrum);
    }
    let mut offset = 0.0;
    if k + 1 < s.mags.len() {
        let (a, b, c) = (s.mags[k - 1], s.mags[k], s.mags[k + 1]);
        let den = a - 2.0 * b + c;
        if den.abs() > 1e-300 {
            offset = (0.5 * (a - c) / den).clamp(-0.5, 0.5);
        }
    }
    Ok((k as f64 + offset) * s.resolution())
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CirclePoint {
    pub label: usize,
    pub t: f64,
    pub phase: f64,
    pub x: f64,
    pub y: f64,
}

pub fn circle_snapshot(phases: &[f64], t: f64) -> Vec<CirclePoint> {
    phases
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let w = wrap_angle(p);
            CirclePoint { label: i, t, phase: w, x: w.cos(), y: w.sin() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_peak_bin() {
        let fs = 100.0;
        let f0 = 5.0;
        let x: Vec<f64> = (0..1000).map(|k| (2.0 * PI * f0 * k as f64 / fs).sin()).collect();
        let s = fft_spectrum(&x, fs, None, Window::Rectangular).unwrap();
        let fd = dominant_frequency(&s).unwrap();
        assert!((fd - f0).abs() <= s.resolution());
    }

    #[test]
    fn dc_removed() {
        let s = fft_spectrum(&[3.0; 64], 1.0, None, Window::Rectangular).unwrap();
        assert!(s.mags.iter().all(|m| *m < 1e-10));
        assert_eq!(dominant_frequency(&s), Err(AnalysisError::FlatSpectrum));
    }

    #[test]
    fn window_too_long() {
        assert!(matches!(
            fft_spectrum(&[1.0, 2.0], 1.0, Some(3), Window::Rectangular),
            Err(AnalysisError::WindowTooLong { .. })
        ));
    }

    #[test]
    fn circle_points() {
        let p = circle_snapshot(&[0.0], 0.0);
        assert_eq!((p[0].x, p[0].y), (1.0, 0.0));
        let sq = circle_snapshot(&[0.0, PI / 2.0, PI, 3.0 * PI / 2.0], 1.0);
        assert!((sq[1].y - 1.0).abs() < 1e-12 && (sq[2].x + 1.0).abs() < 1e-12);
        assert!((sq[3].phase + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }
}
