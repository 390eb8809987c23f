//! Synthetic positive pairs from source-separated stems.
//!
//! The stems of a track are split into two disjoint, non-empty groups. The
//! query is the sum of the first group. The reference mixes a time-shifted,
//! gain-changed copy of the query with the second group, then pitch-shifts
//! and time-stretches the mixture:
//!
//! ```text
//! x_q = sum(S_q)
//! x_r = aug2(aug1(x_q) + sum(S_r))
//! ```
//!
//! Stretch rates follow the playback convention: `1.5` plays 50% faster and
//! yields a shorter signal. Both members are centre-cropped or zero-padded
//! back to the window length.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_audio, Waveform};
use crate::dsp::PhaseVocoder;
use crate::error::{Error, Result};

pub const STEM_NAMES: [&str; 4] = ["vocals", "drums", "bass", "other"];

pub const VOCODER_FFT: usize = 1024;
pub const VOCODER_HOP: usize = 256;

/// Equal-length stems of one track.
#[derive(Clone, Debug, PartialEq)]
pub struct StemSet {
    pub names: Vec<String>,
    pub stems: Vec<Waveform>,
}

impl StemSet {
    pub fn new(names: Vec<String>, stems: Vec<Waveform>) -> Result<Self> {
        if stems.len() < 2 || names.len() != stems.len() {
            return Err(Error::InvalidArgument(format!(
                "need at least two named stems, got {} stems and {} names",
                stems.len(),
                names.len()
            )));
        }
        let (len, rate) = (stems[0].len(), stems[0].sample_rate);
        if stems.iter().any(|s| s.len() != len || s.sample_rate != rate) {
            return Err(Error::InvalidArgument(
                "stems differ in length or sample rate".into(),
            ));
        }
        Ok(Self { names, stems })
    }

    /// Loads `<dir>/{vocals,drums,bass,other}.wav`, trimming to the
    /// shortest stem.
    pub fn load(dir: impl AsRef<Path>, sample_rate: u32) -> Result<Self> {
        let dir = dir.as_ref();
        let mut stems = STEM_NAMES
            .iter()
            .map(|n| load_audio(dir.join(format!("{n}.wav")), sample_rate))
            .collect::<Result<Vec<_>>>()?;
        let len = stems.iter().map(Waveform::len).min().unwrap_or(0);
        for s in &mut stems {
            s.samples.truncate(len);
        }
        Self::new(STEM_NAMES.iter().map(|s| s.to_string()).collect(), stems)
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.stems[0].sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.stems[0].duration()
    }

    /// Sum of the chosen stems over `[start, start + len)` seconds.
    pub fn mix(&self, which: &[usize], start: f64, len: f64) -> Waveform {
        let mut out = Waveform::silence(
            (len * self.sample_rate() as f64).round() as usize,
            self.sample_rate(),
        );
        for &i in which {
            let seg = self.stems[i].slice_seconds(start, len);
            for (o, s) in out.samples.iter_mut().zip(&seg.samples) {
                *o += s;
            }
        }
        out
    }

    /// Mixture of every stem.
    pub fn full_mix(&self) -> Waveform {
        let all: Vec<usize> = (0..self.len()).collect();
        self.mix(&all, 0.0, self.duration())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugRanges {
    /// Maximum absolute time offset, seconds.
    pub offset_s: f64,
    /// Maximum absolute gain change, dB.
    pub gain_db: f64,
    /// Maximum absolute pitch shift, semitones.
    pub pitch_semitones: f64,
    pub stretch_min: f64,
    pub stretch_max: f64,
}

impl Default for AugRanges {
    fn default() -> Self {
        Self {
            offset_s: 0.25,
            gain_db: 10.0,
            pitch_semitones: 3.0,
            stretch_min: 0.70,
            stretch_max: 1.50,
        }
    }
}

impl AugRanges {
    /// Ranges that leave the signal untouched.
    pub fn identity() -> Self {
        Self {
            offset_s: 0.0,
            gain_db: 0.0,
            pitch_semitones: 0.0,
            stretch_min: 1.0,
            stretch_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.offset_s >= 0.0
            && self.gain_db >= 0.0
            && self.pitch_semitones >= 0.0
            && self.stretch_min > 0.0
            && self.stretch_min <= self.stretch_max
            && [self.offset_s, self.gain_db, self.pitch_semitones, self.stretch_max]
                .iter()
                .all(|v| v.is_finite());
        if !ok {
            return Err(Error::Config(format!("invalid augmentation ranges {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> AugParams {
        let sym = |rng: &mut dyn rand::RngCore, m: f64| {
            if m > 0.0 {
                rng.gen_range(-m..=m)
            } else {
                0.0
            }
        };
        let offset_s = sym(rng, self.offset_s);
        let gain_db = sym(rng, self.gain_db);
        let semitones = sym(rng, self.pitch_semitones);
        let stretch_rate = if self.stretch_max > self.stretch_min {
            rng.gen_range(self.stretch_min..=self.stretch_max)
        } else {
            self.stretch_min
        };
        AugParams {
            offset_s,
            gain_db,
            semitones,
            stretch_rate,
        }
    }

    pub fn contains(&self, p: &AugParams) -> bool {
        p.offset_s.abs() <= self.offset_s
            && p.gain_db.abs() <= self.gain_db
            && p.semitones.abs() <= self.pitch_semitones
            && (self.stretch_min..=self.stretch_max).contains(&p.stretch_rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub offset_s: f64,
    pub gain_db: f64,
    pub semitones: f64,
    pub stretch_rate: f64,
}

/// Indices of the query-side and reference-side stems.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    pub query: Vec<usize>,
    pub reference: Vec<usize>,
}

/// Uniform draw over the `2^K - 2` splits with both sides non-empty.
pub fn partition_stems(k: usize, rng: &mut impl Rng) -> Result<Partition> {
    if !(2..=30).contains(&k) {
        return Err(Error::InvalidArgument(format!(
            "cannot partition {k} stems into two non-empty groups"
        )));
    }
    let mask: u32 = rng.gen_range(1..(1u32 << k) - 1);
    let (query, reference) = (0..k).partition(|&i| mask >> i & 1 == 1);
    Ok(Partition { query, reference })
}

/// Shift by `round(offset_s * rate)` samples with zero fill, then scale by
/// `10^(gain_db / 20)`.
pub fn aug1(x: &Waveform, offset_s: f64, gain_db: f64) -> Waveform {
    let n = x.len();
    let shift = (offset_s * x.sample_rate as f64).round() as isize;
    let gain = 10f64.powf(gain_db / 20.0) as f32;
    let samples = (0..n as isize)
        .map(|i| {
            let src = i - shift;
            if (0..n as isize).contains(&src) {
                x.samples[src as usize] * gain
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples, x.sample_rate)
}

/// Pitch shift, then time stretch. Output holds `round(len / stretch_rate)`
/// samples; zero shift and unit rate return the input unchanged.
pub fn aug2(x: &Waveform, semitones: f64, stretch_rate: f64, ranges: &AugRanges) -> Result<Waveform> {
    if semitones.abs() > ranges.pitch_semitones
        || !(ranges.stretch_min..=ranges.stretch_max).contains(&stretch_rate)
    {
        return Err(Error::InvalidArgument(format!(
            "pitch {semitones} st / stretch {stretch_rate} outside the configured ranges"
        )));
    }
    let pv = PhaseVocoder::new(VOCODER_FFT, VOCODER_HOP);
    let mut y = if semitones != 0.0 {
        pv.pitch_shift(&x.samples, x.sample_rate as f64, semitones)
    } else {
        x.samples.clone()
    };
    if stretch_rate != 1.0 {
        y = pv.stretch(&y, stretch_rate);
    }
    Ok(Waveform::new(y, x.sample_rate))
}

/// Centre-crops or symmetrically zero-pads to `len` samples.
pub fn fit_length(x: &[f32], len: usize) -> Vec<f32> {
    if x.len() >= len {
        let start = (x.len() - len) / 2;
        x[start..start + len].to_vec()
    } else {
        let pad = (len - x.len()) / 2;
        let mut out = vec![0.0; len];
        out[pad..pad + x.len()].copy_from_slice(x);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub start_s: f64,
    pub duration_s: f64,
    pub query_stems: Vec<String>,
    pub reference_stems: Vec<String>,
    pub params: AugParams,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub x_q: Waveform,
    pub x_r: Waveform,
    pub provenance: Provenance,
}

/// Builds one positive pair from `[start, start + dur)` of `stems`. All
/// randomness comes from `seed`.
pub fn generate_pair(
    stems: &StemSet,
    source: &str,
    start: f64,
    dur: f64,
    ranges: &AugRanges,
    seed: u64,
) -> Result<TrainPair> {
    ranges.validate()?;
    if start < 0.0 || start + dur + ranges.offset_s > stems.duration() + 1e-9 {
        return Err(Error::TooShort {
            duration: stems.duration(),
            required: start + dur + ranges.offset_s,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let part = partition_stems(stems.len(), &mut rng)?;
    let params = ranges.sample(&mut rng);
    let len = (dur * stems.sample_rate() as f64).round() as usize;

    let x_q = stems.mix(&part.query, start, dur);
    let mut mixed = aug1(&x_q, params.offset_s, params.gain_db);
    let rest = stems.mix(&part.reference, start, dur);
    for (m, r) in mixed.samples.iter_mut().zip(&rest.samples) {
        *m += r;
    }
    let x_r = aug2(&mixed, params.semitones, params.stretch_rate, ranges)?;
    let names = |ix: &[usize]| ix.iter().map(|&i| stems.names[i].clone()).collect();
    Ok(TrainPair {
        x_q: Waveform::new(fit_length(&x_q.samples, len), x_q.sample_rate),
        x_r: Waveform::new(fit_length(&x_r.samples, len), x_r.sample_rate),
        provenance: Provenance {
            source: source.to_string(),
            start_s: start,
            duration_s: dur,
            query_stems: names(&part.query),
            reference_stems: names(&part.reference),
            params,
            seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::dominant_frequency;
    use std::collections::HashMap;
    use std::f64::consts::PI;

    const SR: u32 = 16_000;

    fn sine(freq: f64, secs: f64) -> Waveform {
        let n = (secs * SR as f64) as usize;
        Waveform::new(
            (0..n)
                .map(|i| (2.0 * PI * freq * i as f64 / SR as f64).sin() as f32 * 0.5)
                .collect(),
            SR,
        )
    }

    fn stems(k: usize, secs: f64) -> StemSet {
        StemSet::new(
            (0..k).map(|i| format!("s{i}")).collect(),
            (0..k).map(|i| sine(200.0 + 150.0 * i as f64, secs)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_stem_partitions_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut first = 0;
        for _ in 0..10_000 {
            let p = partition_stems(2, &mut rng).unwrap();
            assert_eq!(p.query.len(), 1);
            assert_eq!(p.reference.len(), 1);
            first += (p.query == vec![0]) as usize;
        }
        assert!((first as f64 / 10_000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn four_stem_partitions_cover_all_fourteen() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..10_000 {
            let p = partition_stems(4, &mut rng).unwrap();
            assert!(!p.query.is_empty() && !p.reference.is_empty());
            let mut all = [p.query.clone(), p.reference.clone()].concat();
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2, 3]);
            *seen.entry(p.query).or_default() += 1;
        }
        assert_eq!(seen.len(), 14);
        assert!(partition_stems(1, &mut rng).is_err());
    }

    #[test]
    fn aug1_cases() {
        let x = sine(300.0, 1.0);
        assert_eq!(aug1(&x, 0.0, 0.0), x);
        let doubled = aug1(&x, 0.0, 6.0206);
        for (a, b) in x.samples.iter().zip(&doubled.samples) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
        let shifted = aug1(&x, 0.25, 0.0);
        assert_eq!(shifted.len(), x.len());
        assert!(shifted.samples[..4000].iter().all(|&v| v == 0.0));
        assert_eq!(shifted.samples[4000..], x.samples[..x.len() - 4000]);
    }

    #[test]
    fn aug2_identity_and_pitch_and_duration() {
        let r = AugRanges::default();
        let x = sine(440.0, 4.0);
        assert_eq!(aug2(&x, 0.0, 1.0, &r).unwrap(), x);

        let up = aug2(&x, 3.0, 1.0, &r).unwrap();
        assert_eq!(up.len(), x.len());
        let want = 440.0 * 2f64.powf(3.0 / 12.0);
        let f = dominant_frequency(&up.samples, SR as f64, 1024);
        assert!((f - want).abs() <= SR as f64 / 1024.0, "peak at {f}");

        let fast = aug2(&x, 0.0, 1.25, &r).unwrap();
        assert!((fast.duration() - 3.2).abs() <= 256.0 / SR as f64);

        assert!(aug2(&x, 3.5, 1.0, &r).is_err());
        assert!(aug2(&x, 0.0, 1.6, &r).is_err());
    }

    #[test]
    fn identity_ranges_and_silent_reference_stems_copy_the_query() {
        let mut s = stems(4, 6.0);
        for i in 0..4 {
            // silence every stem but one; whichever side it lands on,
            // the other side stays silent only if it is the query
            if i != 0 {
                s.stems[i].samples.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for seed in 0..20 {
            let p = generate_pair(&s, "t", 1.0, 4.0, &AugRanges::identity(), seed).unwrap();
            assert_eq!(p.x_q.len(), 64_000);
            if p.provenance.query_stems.contains(&"s0".to_string()) {
                assert_eq!(p.x_r, p.x_q);
            }
        }
    }

    #[test]
    fn pairs_are_reproducible() {
        let s = stems(4, 6.0);
        let a = generate_pair(&s, "t", 0.5, 4.0, &AugRanges::default(), 42).unwrap();
        let b = generate_pair(&s, "t", 0.5, 4.0, &AugRanges::default(), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x_r.len(), 64_000);
        assert!(AugRanges::default().contains(&a.provenance.params));
        let c = generate_pair(&s, "t", 0.5, 4.0, &AugRanges::default(), 43).unwrap();
        assert_ne!(a.x_r, c.x_r);
    }

    #[test]
    fn gain_scales_rms_of_the_shifted_query() {
        let x = sine(330.0, 4.0);
        let shifted = aug1(&x, 0.1, 0.0);
        let r = AugRanges::default();
        for g in [-10.0, -3.0, 4.5, 10.0] {
            let y = aug2(&aug1(&x, 0.1, g), 0.0, 1.0, &r).unwrap();
            let want = 10f64.powf(g / 20.0) * shifted.rms();
            assert!((y.rms() - want).abs() < 1e-5);
        }
    }

    #[test]
    fn insufficient_duration_is_an_error() {
        let s = stems(2, 4.1);
        assert!(generate_pair(&s, "t", 0.0, 4.0, &AugRanges::default(), 0).is_err());
        assert!(generate_pair(&s, "t", 0.0, 4.0, &AugRanges::identity(), 0).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn sampled_parameters_stay_in_range(seed in 0u64..u64::MAX) {
            let ranges = AugRanges::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                proptest::prop_assert!(ranges.contains(&ranges.sample(&mut rng)));
            }
        }
    }
}
