//! HTK-style mel filterbank.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};

/// HTK mel scale: `m = 2595 * log10(1 + f/700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT bins.
///
/// Bands span 0 Hz to Nyquist on the mel scale; each row is a triangle with
/// peak 1 at the band center, sampled at the bin frequencies.
#[derive(Debug, Clone)]
pub struct MelFilterBank {
    n_bands: usize,
    n_bins: usize,
    /// `n_bands x n_bins`, row-major.
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterBank {
    pub fn new(n_bands: usize, n_fft: usize, sample_rate: u32) -> Result<Self> {
        if n_bands == 0 || n_fft < 2 || sample_rate == 0 {
            return Err(Error::Config("mel filterbank: invalid parameters".into()));
        }
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        // n_bands triangles need n_bands + 2 edge points.
        let edges_hz: Vec<f64> = (0..n_bands + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_bands + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;

        let mut weights = vec![0.0; n_bands * n_bins];
        for b in 0..n_bands {
            let (lo, center, hi) = (edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]);
            let mut any = false;
            for k in 0..n_bins {
                let f = bin_hz(k);
                let w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    any = true;
                }
                weights[b * n_bins + k] = w;
            }
            if !any {
                return Err(Error::Config(format!(
                    "mel band {b} has no FFT bin inside its support; increase n_fft"
                )));
            }
        }
        Ok(MelFilterBank {
            n_bands,
            n_bins,
            weights,
            centers_hz: edges_hz[1..=n_bands].to_vec(),
        })
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn band(&self, b: usize) -> &[f64] {
        &self.weights[b * self.n_bins..(b + 1) * self.n_bins]
    }

    /// Center frequency of band `b`, in Hz.
    pub fn center_hz(&self, b: usize) -> f64 {
        self.centers_hz[b]
    }

    /// Apply the filterbank to a magnitude-squared spectrum.
    pub fn apply(&self, power: &[f64]) -> Result<Vec<f64>> {
        if power.len() != self.n_bins {
            return Err(Error::Dimension(format!(
                "filterbank wants {} bins, got {}",
                self.n_bins,
                power.len()
            )));
        }
        Ok((0..self.n_bands)
            .map(|b| self.band(b).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn htk_mel_formula() {
        // 2595 * log10(2)
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((hz_to_mel(0.0)).abs() < 1e-12);
        let f = 1234.5;
        assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
    }

    #[test]
    fn rows_are_contiguous_triangles_peaking_at_centers() {
        let bank = MelFilterBank::new(26, 512, 16_000).unwrap();
        for b in 0..26 {
            let row = bank.band(b);
            assert!(row.iter().all(|&w| w >= 0.0));
            // Single contiguous support.
            let first = row.iter().position(|&w| w > 0.0).unwrap();
            let last = row.iter().rposition(|&w| w > 0.0).unwrap();
            assert!(row[first..=last].iter().all(|&w| w > 0.0), "band {b} support has a hole");
            // Peak bin is the support bin closest to the center frequency.
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let bin_hz = |k: usize| k as f64 * 16_000.0 / 512.0;
            let dist = (bin_hz(argmax) - bank.center_hz(b)).abs();
            let min_dist = (first..=last)
                .map(|k| (bin_hz(k) - bank.center_hz(b)).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(
                dist <= min_dist + 1e-9,
                "band {b}: peak bin {argmax} not nearest to center {:.1} Hz",
                bank.center_hz(b)
            );
        }
    }

    #[test]
    fn white_spectrum_lights_every_band() {
        let bank = MelFilterBank::new(26, 512, 16_000).unwrap();
        let flat = vec![1.0; 257];
        let resp = bank.apply(&flat).unwrap();
        assert!(resp.iter().all(|&v| v > 0.0));
    }
}
