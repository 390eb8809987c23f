//! STFT helpers and the phase vocoder used for pitch-shift and time-stretch.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::resample;

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Index into `x` with reflect padding (`x[-1] == x[1]`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Forward FFT of windowed real frames.
pub struct FrameFft {
    size: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl FrameFft {
    pub fn new(size: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(size);
        Self {
            size,
            window: hann(size),
            fft,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Spectrum bins `0..=size/2` of one windowed frame. `sample(i)` returns
    /// the `i`-th input sample of the frame.
    pub fn spectrum(&self, sample: impl Fn(usize) -> f64) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = (0..self.size)
            .map(|i| Complex64::new(sample(i) * self.window[i], 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf.truncate(self.size / 2 + 1);
        buf
    }
}

/// Frequency of the strongest bin, averaged over all full frames.
pub fn dominant_frequency(x: &[f32], sample_rate: f64, fft_size: usize) -> f64 {
    let f = FrameFft::new(fft_size);
    let hop = fft_size / 2;
    let mut acc = vec![0.0f64; fft_size / 2 + 1];
    let mut start = 0;
    while start + fft_size <= x.len() {
        let spec = f.spectrum(|i| x[start + i] as f64);
        for (a, c) in acc.iter_mut().zip(&spec) {
            *a += c.norm_sqr();
        }
        start += hop;
    }
    let best = acc
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0;
    best as f64 * sample_rate / fft_size as f64
}

/// Phase-vocoder time stretching.
///
/// `rate > 1` plays faster: the output holds `round(len / rate)` samples.
/// Pitch is preserved up to vocoder artefacts.
pub struct PhaseVocoder {
    fft_size: usize,
    hop: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl PhaseVocoder {
    pub fn new(fft_size: usize, hop: usize) -> Self {
        assert!(hop > 0 && hop <= fft_size / 2, "hop must be in 1..=fft_size/2");
        let mut planner = FftPlanner::new();
        Self {
            fft_size,
            hop,
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
            window: hann(fft_size),
        }
    }

    fn stft(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let pad = self.fft_size / 2;
        let padded_len = x.len() + 2 * pad;
        let n_frames = 1 + padded_len.saturating_sub(self.fft_size).div_ceil(self.hop);
        (0..n_frames)
            .map(|f| {
                let start = f * self.hop;
                let mut buf: Vec<Complex64> = (0..self.fft_size)
                    .map(|i| {
                        let pos = (start + i) as isize - pad as isize;
                        let v = if pos >= 0 && (pos as usize) < x.len() {
                            x[pos as usize]
                        } else {
                            0.0
                        };
                        Complex64::new(v * self.window[i], 0.0)
                    })
                    .collect();
                self.forward.process(&mut buf);
                buf.truncate(self.fft_size / 2 + 1);
                buf
            })
            .collect()
    }

    fn istft(&self, frames: &[Vec<Complex64>], out_len: usize) -> Vec<f64> {
        let pad = self.fft_size / 2;
        let total = (frames.len().saturating_sub(1)) * self.hop + self.fft_size;
        let mut acc = vec![0.0f64; total.max(out_len + 2 * pad)];
        let mut norm = vec![0.0f64; acc.len()];
        let scale = 1.0 / self.fft_size as f64;
        for (f, half) in frames.iter().enumerate() {
            let mut full = vec![Complex64::new(0.0, 0.0); self.fft_size];
            full[..half.len()].copy_from_slice(half);
            for k in 1..self.fft_size / 2 {
                full[self.fft_size - k] = half[k].conj();
            }
            self.inverse.process(&mut full);
            let start = f * self.hop;
            for i in 0..self.fft_size {
                acc[start + i] += full[i].re * scale * self.window[i];
                norm[start + i] += self.window[i] * self.window[i];
            }
        }
        (0..out_len)
            .map(|i| {
                let j = i + pad;
                if j < acc.len() && norm[j] > 1e-8 {
                    acc[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn stretch(&self, x: &[f32], rate: f64) -> Vec<f32> {
        assert!(rate > 0.0, "stretch rate must be positive");
        let out_len = (x.len() as f64 / rate).round() as usize;
        if x.is_empty() || out_len == 0 {
            return vec![0.0; out_len];
        }
        let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let spec = self.stft(&xd);
        let n_bins = self.fft_size / 2 + 1;
        let advance: Vec<f64> = (0..n_bins)
            .map(|k| 2.0 * PI * k as f64 * self.hop as f64 / self.fft_size as f64)
            .collect();
        let polar: Vec<(Vec<f64>, Vec<f64>)> = spec
            .iter()
            .map(|f| (f.iter().map(|c| c.norm()).collect(), f.iter().map(|c| c.arg()).collect()))
            .collect();
        let silent = (vec![0.0; n_bins], vec![0.0; n_bins]);
        let mut phase = polar[0].1.clone();
        let mut out_frames = Vec::new();
        let mut t = 0.0f64;
        while t < spec.len() as f64 {
            let left = t.floor() as usize;
            let alpha = t - left as f64;
            let (ma, pa) = &polar[left];
            let (mb, pb) = polar.get(left + 1).unwrap_or(&silent);
            let frame: Vec<Complex64> = (0..n_bins)
                .map(|k| {
                    let mag = (1.0 - alpha) * ma[k] + alpha * mb[k];
                    Complex64::from_polar(mag, phase[k])
                })
                .collect();
            for k in 0..n_bins {
                let mut d = pb[k] - pa[k] - advance[k];
                d -= 2.0 * PI * (d / (2.0 * PI)).round();
                phase[k] += advance[k] + d;
            }
            out_frames.push(frame);
            t += rate;
        }
        self.istft(&out_frames, out_len)
            .into_iter()
            .map(|v| v as f32)
            .collect()
    }

    /// Shifts pitch by `semitones` while keeping the duration: resample by
    /// `2^(semitones/12)`, then stretch back to the original length.
    pub fn pitch_shift(&self, x: &[f32], sample_rate: f64, semitones: f64) -> Vec<f32> {
        if semitones == 0.0 {
            return x.to_vec();
        }
        let factor = 2f64.powf(semitones / 12.0);
        let shifted = resample(x, sample_rate * factor, sample_rate);
        let rate = shifted.len() as f64 / x.len() as f64;
        let mut out = self.stretch(&shifted, rate);
        out.resize(x.len(), 0.0);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: f64, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate).sin() as f32)
            .collect()
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_edge() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(2, 5), 2);
    }

    #[test]
    fn unit_rate_stretch_preserves_a_sine() {
        let pv = PhaseVocoder::new(1024, 256);
        let x = sine(440.0, 16_000.0, 16_000);
        let y = pv.stretch(&x, 1.0);
        assert_eq!(y.len(), x.len());
        let err = x[1024..15_000]
            .iter()
            .zip(&y[1024..15_000])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-3, "max err {err}");
    }

    #[test]
    fn stretch_keeps_dominant_frequency() {
        let pv = PhaseVocoder::new(1024, 256);
        let x = sine(440.0, 16_000.0, 32_000);
        let y = pv.stretch(&x, 0.8);
        let bin = 16_000.0 / 4096.0;
        assert!((dominant_frequency(&y, 16_000.0, 4096) - 440.0).abs() <= bin);
    }
}
