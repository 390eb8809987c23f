//! Log-power Mel spectrogram of one fixed-length window.
//!
//! Frames are Hann-windowed, `fft_size` long and centred at
//! `(t + 0.5) * stft_hop` for `t in 0..n_frames`, so a 4 s window at 16 kHz
//! with a 2000-sample hop yields exactly 32 frames. Frames that reach past
//! either end of the window use reflect padding. The filterbank is
//! Slaney-style (linear below 1 kHz, logarithmic above) with area
//! normalisation, spanning `f_min..f_max` (default 0 Hz to Nyquist). Cells
//! hold `ln(power + log_floor)`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::{reflect_index, FrameFft};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub n_frames: usize,
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub fft_size: usize,
    pub stft_hop: usize,
    pub log_floor: f64,
    pub f_min: f64,
    /// `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 64,
            n_frames: 32,
            window_seconds: 4.0,
            hop_seconds: 0.5,
            fft_size: 1024,
            stft_hop: 2000,
            log_floor: 1e-8,
            f_min: 0.0,
            f_max: None,
        }
    }
}

impl MelConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mel: {m}")));
        if self.sample_rate == 0 || self.n_mels == 0 || self.n_frames == 0 {
            return bad("sample_rate, n_mels and n_frames must be positive");
        }
        if self.fft_size < 2 || self.stft_hop == 0 {
            return bad("fft_size must be >= 2 and stft_hop positive");
        }
        if !(self.window_seconds > 0.0 && self.hop_seconds > 0.0) {
            return bad("window and hop durations must be positive");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        let covered = self.stft_hop * self.n_frames;
        if covered.abs_diff(self.window_samples()) > self.stft_hop {
            return bad("stft_hop * n_frames must cover the window to within one frame");
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max()) {
            return bad("need 0 <= f_min < f_max");
        }
        Ok(())
    }
}

/// `n_mels x n_frames` log-power Mel matrix for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    pub values: Array2<f32>,
    /// Start of the window within its parent recording, seconds.
    pub source_offset: f64,
}

impl MelSpec {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        mel * F_SP
    }
}

/// Band edge frequencies: `n_mels + 2` points equally spaced in Mel.
/// Filter `m` rises from `edges[m]`, peaks at `edges[m + 1]` and falls to
/// `edges[m + 2]`.
pub fn mel_band_edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max());
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// `n_mels x (fft_size/2 + 1)` triangular filters, area-normalised.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let edges = mel_band_edges(cfg);
    let n_bins = cfg.fft_size / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (r - l);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            let w = up.min(down).max(0.0);
            fb[[m, k]] = w * enorm;
        }
    }
    fb
}

/// Log-power Mel spectrogram of exactly one window of audio.
pub fn mel_spectrogram(window: &[f32], cfg: &MelConfig) -> Result<MelSpec> {
    mel_spectrogram_at(window, cfg, 0.0)
}

pub fn mel_spectrogram_at(window: &[f32], cfg: &MelConfig, offset: f64) -> Result<MelSpec> {
    let expected = cfg.window_samples();
    if window.len() != expected {
        return Err(Error::Shape(format!(
            "mel window has {} samples, expected {expected}",
            window.len()
        )));
    }
    if window.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let fft = FrameFft::new(cfg.fft_size);
    let fb = mel_filterbank(cfg);
    let half = (cfg.fft_size / 2) as isize;
    let mut values = Array2::<f32>::zeros((cfg.n_mels, cfg.n_frames));
    for t in 0..cfg.n_frames {
        let center = ((2 * t + 1) * cfg.stft_hop / 2) as isize;
        let start = center - half;
        let spec = fft.spectrum(|i| window[reflect_index(start + i as isize, window.len())] as f64);
        let power: Vec<f64> = spec.iter().map(|c| c.norm_sqr()).collect();
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            values[[m, t]] = (e + cfg.log_floor).ln() as f32;
        }
    }
    Ok(MelSpec {
        values,
        source_offset: offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()) as f32)
            .collect()
    }

    #[test]
    fn default_config_is_valid() {
        MelConfig::default().validate().unwrap();
    }

    #[test]
    fn silence_sits_at_the_floor() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&vec![0.0; 64_000], &cfg).unwrap();
        assert_eq!(m.values.dim(), (64, 32));
        let floor = (cfg.log_floor.ln()) as f32;
        assert!(m.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn sine_peaks_in_the_band_whose_centre_bracket_holds_it() {
        let cfg = MelConfig::default();
        let edges = mel_band_edges(&cfg);
        let centres = &edges[1..=cfg.n_mels];
        // bracket of band m: midpoints to neighbouring centres
        let expected = (0..cfg.n_mels)
            .find(|&m| {
                let lo = if m == 0 { 0.0 } else { (centres[m - 1] + centres[m]) / 2.0 };
                let hi = if m + 1 == cfg.n_mels {
                    f64::INFINITY
                } else {
                    (centres[m] + centres[m + 1]) / 2.0
                };
                (lo..hi).contains(&440.0)
            })
            .unwrap();
        let m = mel_spectrogram(&sine(440.0, 1.0, 64_000), &cfg).unwrap();
        for t in 0..cfg.n_frames {
            let col = m.values.column(t);
            let argmax = (0..cfg.n_mels)
                .fold(0, |b, i| if col[i] > col[b] { i } else { b });
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn noise_gives_finite_fixed_shape() {
        let cfg = MelConfig::default();
        for seed in [1u64, 2] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f32> = (0..64_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = mel_spectrogram(&x, &cfg).unwrap();
            assert_eq!(m.values.dim(), (64, 32));
            assert!(m.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn gain_shifts_log_power_by_twice_log_gain() {
        let cfg = MelConfig::default();
        let a = mel_spectrogram(&sine(1000.0, 1.0, 64_000), &cfg).unwrap();
        let b = mel_spectrogram(&sine(1000.0, 0.5, 64_000), &cfg).unwrap();
        let shift = 2.0 * 0.5f64.ln();
        let floor = cfg.log_floor.ln();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            // cells well above the floor
            if (*y as f64) > floor + 12.0 {
                assert!(((*y - *x) as f64 - shift).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let cfg = MelConfig::default();
        let x = sine(733.0, 0.7, 64_000);
        assert_eq!(mel_spectrogram(&x, &cfg).unwrap(), mel_spectrogram(&x, &cfg).unwrap());
    }

    #[test]
    fn rejects_wrong_length_and_nan() {
        let cfg = MelConfig::default();
        assert!(matches!(mel_spectrogram(&[0.0; 10], &cfg), Err(Error::Shape(_))));
        let mut x = vec![0.0f32; 64_000];
        x[5] = f32::NAN;
        assert!(matches!(mel_spectrogram(&x, &cfg), Err(Error::NonFinite)));
    }

    #[test]
    fn every_filter_covers_some_bins() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg);
        assert!(fb.rows().into_iter().all(|r| r.iter().any(|&w| w > 0.0)));
    }
}
