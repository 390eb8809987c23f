use std::f64::consts::PI;

/// Zero crossings of the sinc kernel on each side at unity cutoff.
const KERNEL_ZEROS: f64 = 16.0;

/// Band-limited resampling with a Blackman-windowed sinc kernel.
///
/// Output length is `round(len * to / from)`. When downsampling the kernel
/// cutoff drops to the output Nyquist frequency.
pub fn resample(input: &[f32], from_rate: f64, to_rate: f64) -> Vec<f32> {
    assert!(from_rate > 0.0 && to_rate > 0.0, "rates must be positive");
    if input.is_empty() {
        return Vec::new();
    }
    let ratio = to_rate / from_rate;
    let out_len = (input.len() as f64 * ratio).round() as usize;
    if (ratio - 1.0).abs() < 1e-12 {
        let mut out = input.to_vec();
        out.resize(out_len, 0.0);
        return out;
    }
    let cutoff = ratio.min(1.0);
    let half_width = KERNEL_ZEROS / cutoff;
    let table = KernelTable::new(cutoff, half_width);
    let step = from_rate / to_rate;
    let n = input.len() as isize;

    (0..out_len)
        .map(|j| {
            let t = j as f64 * step;
            let lo = (t - half_width).ceil() as isize;
            let hi = (t + half_width).floor() as isize;
            let mut acc = 0.0f64;
            for i in lo.max(0)..=hi.min(n - 1) {
                acc += input[i as usize] as f64 * table.at(i as f64 - t);
            }
            acc as f32
        })
        .collect()
}

/// Steps per unit of input time in the tabulated kernel.
const OVERSAMPLE: f64 = 512.0;

/// Kernel sampled on `[0, half_width]`, read back with linear
/// interpolation. The kernel is even, so one side suffices.
struct KernelTable {
    values: Vec<f64>,
}

impl KernelTable {
    fn new(cutoff: f64, half_width: f64) -> Self {
        let len = (half_width * OVERSAMPLE).ceil() as usize + 2;
        let values = (0..len)
            .map(|k| kernel(k as f64 / OVERSAMPLE, cutoff, half_width))
            .collect();
        Self { values }
    }

    fn at(&self, x: f64) -> f64 {
        let pos = x.abs() * OVERSAMPLE;
        let i = pos as usize;
        if i + 1 >= self.values.len() {
            return 0.0;
        }
        let frac = pos - i as f64;
        self.values[i] + frac * (self.values[i + 1] - self.values[i])
    }
}

fn kernel(x: f64, cutoff: f64, half_width: f64) -> f64 {
    let u = x / half_width;
    if u.abs() >= 1.0 {
        return 0.0;
    }
    // Blackman window over [-half_width, half_width]
    let w = 0.42 + 0.5 * (PI * u).cos() + 0.08 * (2.0 * PI * u).cos();
    let arg = PI * cutoff * x;
    let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
    cutoff * sinc * w
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
    fn halving_the_rate_halves_the_length() {
        let x = sine(440.0, 32_000.0, 128_000);
        let y = resample(&x, 32_000.0, 16_000.0);
        assert!((y.len() as i64 - 64_000).abs() <= 1);
    }

    #[test]
    fn in_band_sine_survives_downsampling() {
        let x = sine(1000.0, 32_000.0, 32_000);
        let y = resample(&x, 32_000.0, 16_000.0);
        let expect = sine(1000.0, 16_000.0, y.len());
        // skip the edges where the kernel runs off the signal
        let err = y[200..y.len() - 200]
            .iter()
            .zip(&expect[200..expect.len() - 200])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-2, "max error {err}");
    }

    #[test]
    fn out_of_band_content_is_attenuated() {
        // 12 kHz is above the 8 kHz output Nyquist
        let x = sine(12_000.0, 32_000.0, 32_000);
        let y = resample(&x, 32_000.0, 16_000.0);
        let rms = (y[200..y.len() - 200].iter().map(|v| v * v).sum::<f32>()
            / (y.len() - 400) as f32)
            .sqrt();
        assert!(rms < 1e-2, "rms {rms}");
    }

    #[test]
    fn table_tracks_the_exact_kernel() {
        let t = KernelTable::new(0.7, 16.0 / 0.7);
        for k in 0..2000 {
            let x = k as f64 * 0.0117 - 11.0;
            assert!((t.at(x) - kernel(x, 0.7, 16.0 / 0.7)).abs() < 1e-5);
        }
    }

    #[test]
    fn identity_ratio_copies() {
        let x = sine(300.0, 16_000.0, 1000);
        assert_eq!(resample(&x, 16_000.0, 16_000.0), x);
    }
}
