//! Audio frontend: framing, logMel extraction, fixed-length padding and
//! corpus-level normalization.
//!
//! Every utterance ends up as a fixed 750x26 [`LogMelMatrix`] (frames x mel
//! bands): 26 log mel-filterbank energies per 25 ms frame at a 10 ms shift,
//! padded with the per-dimension minimum or center-truncated to 750 frames.

pub mod fft;
pub mod mel;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use fft::next_pow2;
pub use mel::{hz_to_mel, mel_to_hz, MelFilterBank};

/// Fixed number of frames per utterance.
pub const N_FRAMES: usize = 750;
/// Number of mel bands.
pub const N_BANDS: usize = 26;
/// Default frame length in milliseconds.
pub const FRAME_MS: u32 = 25;
/// Default frame shift in milliseconds.
pub const SHIFT_MS: u32 = 10;
/// Floor applied before the log to guard silence.
pub const LOG_FLOOR: f64 = 1e-10;
/// Floor applied to per-dimension standard deviations during corpus
/// normalization.
pub const STD_FLOOR: f64 = 1e-8;

/// Mono audio in `[-1, 1]` at a known sample rate.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("waveform sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Input("waveform has no samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }
}

/// Fixed-size utterance features: 750 frames x 26 mel bands, plus the
/// pre-padding frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelMatrix {
    values: Vec<f64>,
    n_valid_frames: usize,
}

impl LogMelMatrix {
    pub fn new(values: Vec<f64>, n_valid_frames: usize) -> Result<Self> {
        if values.len() != N_FRAMES * N_BANDS {
            return Err(Error::Dimension(format!(
                "logMel matrix must be {N_FRAMES}x{N_BANDS}, got {} values",
                values.len()
            )));
        }
        if n_valid_frames == 0 || n_valid_frames > N_FRAMES {
            return Err(Error::Dimension(format!(
                "n_valid_frames {n_valid_frames} out of range 1..={N_FRAMES}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("logMel matrix contains non-finite values".into()));
        }
        Ok(LogMelMatrix { values, n_valid_frames })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn n_valid_frames(&self) -> usize {
        self.n_valid_frames
    }

    #[inline]
    pub fn at(&self, frame: usize, band: usize) -> f64 {
        self.values[frame * N_BANDS + band]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[N_FRAMES, N_BANDS], self.values.clone()).expect("fixed shape")
    }
}

/// Slice the waveform into Hamming-windowed frames.
///
/// Frame and hop lengths are `round(ms * rate / 1000)` samples; the frame
/// count is `1 + floor((len - frame_len) / hop)`.
pub fn frame_and_window(w: &Waveform, frame_ms: u32, shift_ms: u32) -> Result<Tensor> {
    let frame_len = ((frame_ms as u64 * w.sample_rate as u64 + 500) / 1000) as usize;
    let hop = ((shift_ms as u64 * w.sample_rate as u64 + 500) / 1000) as usize;
    if frame_len == 0 || hop == 0 {
        return Err(Error::Input("frame or shift rounds to zero samples".into()));
    }
    if w.samples.len() < frame_len {
        return Err(Error::Input(format!(
            "waveform of {} samples shorter than one {frame_len}-sample frame",
            w.samples.len()
        )));
    }
    let n_frames = 1 + (w.samples.len() - frame_len) / hop;
    let window: Vec<f64> = (0..frame_len)
        .map(|i| 0.54 - 0.46 * (2.0 * core::f64::consts::PI * i as f64 / (frame_len - 1) as f64).cos())
        .collect();
    let mut data = Vec::with_capacity(n_frames * frame_len);
    for fi in 0..n_frames {
        let start = fi * hop;
        data.extend(w.samples[start..start + frame_len].iter().zip(&window).map(|(s, w)| s * w));
    }
    Tensor::new(&[n_frames, frame_len], data)
}

/// Per-frame logMel energies: magnitude-squared spectrum, filterbank, then
/// `ln(max(e, LOG_FLOOR))`.
pub fn log_mel(frames: &Tensor, bank: &MelFilterBank, n_fft: usize) -> Result<Tensor> {
    if frames.rank() != 2 {
        return Err(Error::Dimension("log_mel: want frames as a rank-2 tensor".into()));
    }
    let frame_len = frames.shape()[1];
    if n_fft < frame_len {
        return Err(Error::Dimension(format!(
            "n_fft {n_fft} smaller than frame length {frame_len}"
        )));
    }
    if !n_fft.is_power_of_two() {
        return Err(Error::Config(format!("n_fft {n_fft} is not a power of two")));
    }
    let n_frames = frames.shape()[0];
    let mut out = Vec::with_capacity(n_frames * bank.n_bands());
    for fi in 0..n_frames {
        let power = fft::power_spectrum(frames.row(fi), n_fft);
        for e in bank.apply(&power)? {
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Tensor::new(&[n_frames, bank.n_bands()], out)
}

/// Fit a variable-length `T x 26` feature matrix to exactly 750 frames.
///
/// Shorter utterances are padded with each column's minimum; longer ones
/// keep the centered 750-frame window starting at `floor((T - 750) / 2)`.
pub fn pad_or_truncate(feats: &Tensor) -> Result<LogMelMatrix> {
    if feats.rank() != 2 || feats.shape()[1] != N_BANDS {
        return Err(Error::Dimension(format!(
            "pad_or_truncate: want T x {N_BANDS}, got {:?}",
            feats.shape()
        )));
    }
    let t = feats.shape()[0];
    if t == 0 {
        return Err(Error::Input("pad_or_truncate: empty input".into()));
    }
    let mut values;
    if t >= N_FRAMES {
        let start = (t - N_FRAMES) / 2;
        values = feats.data()[start * N_BANDS..(start + N_FRAMES) * N_BANDS].to_vec();
    } else {
        values = Vec::with_capacity(N_FRAMES * N_BANDS);
        values.extend_from_slice(feats.data());
        let mut mins = [f64::INFINITY; N_BANDS];
        for r in 0..t {
            for (j, m) in mins.iter_mut().enumerate() {
                *m = m.min(feats.at(r, j));
            }
        }
        for _ in t..N_FRAMES {
            values.extend_from_slice(&mins);
        }
    }
    LogMelMatrix::new(values, t.min(N_FRAMES))
}

/// Full default pipeline for one utterance: frame, logMel, fixed length.
pub fn utterance_features(w: &Waveform) -> Result<LogMelMatrix> {
    let frames = frame_and_window(w, FRAME_MS, SHIFT_MS)?;
    let n_fft = next_pow2(frames.shape()[1]);
    let bank = MelFilterBank::new(N_BANDS, n_fft, w.sample_rate)?;
    let feats = log_mel(&frames, &bank, n_fft)?;
    pad_or_truncate(&feats)
}

/// Per-dimension corpus statistics over valid (non-padded) frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions whose standard deviation hit [`STD_FLOOR`].
    pub floored_dims: Vec<usize>,
}

/// Compute per-dimension mean and (floored) standard deviation over the
/// valid frames of the whole corpus.
pub fn compute_corpus_stats(mats: &[LogMelMatrix]) -> Result<CorpusStats> {
    if mats.is_empty() {
        return Err(Error::Input("corpus statistics need at least one utterance".into()));
    }
    let mut mean = vec![0.0; N_BANDS];
    let mut count = 0usize;
    for m in mats {
        for r in 0..m.n_valid_frames() {
            for (j, mu) in mean.iter_mut().enumerate() {
                *mu += m.at(r, j);
            }
        }
        count += m.n_valid_frames();
    }
    for mu in mean.iter_mut() {
        *mu /= count as f64;
    }
    let mut var = vec![0.0; N_BANDS];
    for m in mats {
        for r in 0..m.n_valid_frames() {
            for (j, v) in var.iter_mut().enumerate() {
                let d = m.at(r, j) - mean[j];
                *v += d * d;
            }
        }
    }
    let mut floored = Vec::new();
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let s = (v / count as f64).sqrt();
            if s < STD_FLOOR {
                floored.push(j);
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    Ok(CorpusStats { mean, std, floored_dims: floored })
}

/// Apply `(x - mean) / std` per dimension to every frame (padding included).
pub fn apply_normalization(mats: &mut [LogMelMatrix], stats: &CorpusStats) {
    for m in mats {
        for (i, v) in m.values_mut().iter_mut().enumerate() {
            let j = i % N_BANDS;
            *v = (*v - stats.mean[j]) / stats.std[j];
        }
    }
}

/// Normalize a corpus to zero mean / unit variance per dimension and return
/// the statistics for reuse on held-out data.
pub fn corpus_normalize(mats: &mut [LogMelMatrix]) -> Result<CorpusStats> {
    if mats.len() < 2 {
        return Err(Error::Input("corpus normalization needs at least 2 utterances".into()));
    }
    let stats = compute_corpus_stats(mats)?;
    apply_normalization(mats, &stats);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, secs: f64, amp: f64) -> Waveform {
        let n = (secs * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * core::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn framing_counts() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let f = frame_and_window(&w, 25, 10).unwrap();
        assert_eq!(f.shape(), &[98, 400]);
        assert!(f.data().iter().all(|&v| v == 0.0));

        let one = Waveform::new(vec![0.1; 400], 16_000).unwrap();
        assert_eq!(frame_and_window(&one, 25, 10).unwrap().shape()[0], 1);

        let short = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(matches!(frame_and_window(&short, 25, 10), Err(Error::Input(_))));
    }

    #[test]
    fn silent_frame_hits_log_floor() {
        let bank = MelFilterBank::new(N_BANDS, 512, 16_000).unwrap();
        let frames = Tensor::zeros(&[1, 400]);
        let lm = log_mel(&frames, &bank, 512).unwrap();
        for &v in lm.data() {
            assert!((v - LOG_FLOOR.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn tone_at_band_center_maximizes_that_band() {
        let bank = MelFilterBank::new(N_BANDS, 512, 16_000).unwrap();
        for &b in &[0usize, 5, 13, 25] {
            let w = tone(bank.center_hz(b), 16_000, 0.5, 0.8);
            let frames = frame_and_window(&w, 25, 10).unwrap();
            let lm = log_mel(&frames, &bank, 512).unwrap();
            // Average energy per band over frames, in the log domain.
            let n = lm.shape()[0];
            let mut avg = [0.0; N_BANDS];
            for r in 0..n {
                for (j, a) in avg.iter_mut().enumerate() {
                    *a += lm.at(r, j);
                }
            }
            let argmax = avg
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, b, "tone at {:.1} Hz", bank.center_hz(b));
        }
    }

    #[test]
    fn pad_uses_column_minima() {
        let mut rows = vec![vec![0.0; N_BANDS]; 2];
        rows[0][0] = 1.0;
        rows[1][0] = 3.0;
        rows[0][5] = -2.0;
        let t = Tensor::from_rows(&rows).unwrap();
        let m = pad_or_truncate(&t).unwrap();
        assert_eq!(m.n_valid_frames(), 2);
        for r in 2..N_FRAMES {
            assert_eq!(m.at(r, 0), 1.0);
            assert_eq!(m.at(r, 5), -2.0);
        }
        // Padding rows never exceed any valid row entry per column.
        for j in 0..N_BANDS {
            let pad = m.at(749, j);
            assert!(pad <= m.at(0, j) && pad <= m.at(1, j));
        }
    }

    #[test]
    fn truncation_keeps_centered_window() {
        let t = 900;
        let data: Vec<f64> = (0..t * N_BANDS).map(|i| (i / N_BANDS) as f64).collect();
        let m = pad_or_truncate(&Tensor::new(&[t, N_BANDS], data).unwrap()).unwrap();
        assert_eq!(m.n_valid_frames(), N_FRAMES);
        assert_eq!(m.at(0, 0), 75.0);
        assert_eq!(m.at(749, 0), 824.0);

        // T = 750 is the identity.
        let data: Vec<f64> = (0..N_FRAMES * N_BANDS).map(|i| i as f64 * 0.01).collect();
        let t750 = Tensor::new(&[N_FRAMES, N_BANDS], data.clone()).unwrap();
        assert_eq!(pad_or_truncate(&t750).unwrap().values(), &data[..]);
    }

    #[test]
    fn corpus_normalization_recomputes_to_zero_mean_unit_variance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut mats: Vec<LogMelMatrix> = (0..4)
            .map(|_| {
                let t = rng.random_range(100..400usize);
                let data: Vec<f64> =
                    (0..t * N_BANDS).map(|i| rng.random_range(-3.0..3.0) + (i % N_BANDS) as f64).collect();
                pad_or_truncate(&Tensor::new(&[t, N_BANDS], data).unwrap()).unwrap()
            })
            .collect();
        let stats = corpus_normalize(&mut mats).unwrap();
        assert!(stats.floored_dims.is_empty());
        let check = compute_corpus_stats(&mats).unwrap();
        for j in 0..N_BANDS {
            assert!(check.mean[j].abs() < 1e-8, "dim {j} mean {}", check.mean[j]);
            assert!((check.std[j] - 1.0).abs() < 1e-8, "dim {j} std {}", check.std[j]);
        }
    }

    #[test]
    fn zero_variance_dimension_maps_to_zero() {
        let make = |c: f64| {
            let data = vec![c; N_FRAMES * N_BANDS];
            LogMelMatrix::new(data, N_FRAMES).unwrap()
        };
        let mut mats = vec![make(4.2), make(4.2)];
        let stats = corpus_normalize(&mut mats).unwrap();
        assert_eq!(stats.floored_dims.len(), N_BANDS);
        for m in &mats {
            assert!(m.values().iter().all(|&v| v == 0.0));
        }
    }
}
