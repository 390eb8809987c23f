//! Audio ingestion, resampling, segmentation and log-Mel features.

mod mel;
mod resample;

pub use mel::{mel_filterbank, mel_spectrogram, mel_spectrogram_at, mel_to_hz, hz_to_mel, MelConfig, MelSpec};
pub use resample::resample;

use std::path::Path;

use crate::error::{Error, Result};

/// Canonical rate every waveform is brought to after loading.
pub const CANONICAL_RATE: u32 = 16_000;

/// Mono single-precision audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (ss / self.samples.len() as f64).sqrt()
    }

    /// Copy of `[start, start + len)` in seconds; samples beyond the end are zero.
    pub fn slice_seconds(&self, start: f64, len: f64) -> Waveform {
        let sr = self.sample_rate as f64;
        let a = (start * sr).round().max(0.0) as usize;
        let n = (len * sr).round() as usize;
        let mut out = vec![0.0f32; n];
        if a < self.samples.len() {
            let avail = (self.samples.len() - a).min(n);
            out[..avail].copy_from_slice(&self.samples[a..a + avail]);
        }
        Waveform::new(out, self.sample_rate)
    }
}

/// Reads a PCM WAV file (8/16/24/32-bit integer or 32-bit float), mixes it
/// down to mono by channel averaging and resamples to `target_rate`.
pub fn load_audio(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |cause| Error::Wav {
        path: path.to_path_buf(),
        cause,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedEncoding("zero channels".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{fmt:?} with {bits} bits per sample"
            )))
        }
    };
    if interleaved.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().map(|&s| s as f64).sum::<f64>() / channels as f64) as f32)
        .collect();
    let mut samples = if spec.sample_rate == target_rate {
        mono
    } else {
        resample(&mono, spec.sample_rate as f64, target_rate as f64)
    };
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let peak = samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()));
    if peak > 1.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    }
    Ok(Waveform::new(samples, target_rate))
}

/// Writes 32-bit float mono WAV.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |cause| Error::Wav {
        path: path.to_path_buf(),
        cause,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        writer.write_sample(s).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Number of full windows of a recording of `n` samples.
pub fn segment_count(n: usize, cfg: &MelConfig) -> usize {
    let win = cfg.window_samples();
    if n < win {
        0
    } else {
        (n - win) / cfg.hop_samples() + 1
    }
}

/// Cuts a waveform into overlapping windows at `hop_seconds` spacing.
/// Trailing audio shorter than a window is dropped.
pub fn segment<'a>(w: &'a Waveform, cfg: &MelConfig) -> Result<Vec<(f64, &'a [f32])>> {
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    let count = segment_count(w.len(), cfg);
    if count == 0 {
        return Err(Error::TooShort {
            duration: w.duration(),
            required: cfg.window_seconds,
        });
    }
    Ok((0..count)
        .map(|i| {
            let start = i * hop;
            (
                start as f64 / w.sample_rate as f64,
                &w.samples[start..start + win],
            )
        })
        .collect())
}
