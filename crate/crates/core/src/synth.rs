//! Procedural multi-stem tracks for tests, the self-test and toy runs.
//!
//! Every track draws its own tempo, key, scale, melody, bass line, chord
//! progression and drum pattern from a seeded RNG, so two seeds give
//! audibly different music while the same seed reproduces the same
//! samples.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::pairgen::{StemSet, STEM_NAMES};

const MAJOR_PENTA: [i32; 5] = [0, 2, 4, 7, 9];
const MINOR_PENTA: [i32; 5] = [0, 3, 5, 7, 10];

fn midi_hz(m: f64) -> f64 {
    440.0 * 2f64.powf((m - 69.0) / 12.0)
}

/// Linear attack, exponential decay.
fn envelope(t: f64, attack: f64, decay: f64) -> f64 {
    if t < 0.0 {
        0.0
    } else if t < attack {
        t / attack
    } else {
        (-(t - attack) / decay).exp()
    }
}

struct Plan {
    beat: f64,
    root: f64,
    melody: Vec<(f64, f64, f64)>,
    bass: Vec<i32>,
    chords: Vec<i32>,
    kick: [bool; 16],
    snare: [bool; 16],
    hat: [bool; 16],
    timbre: f64,
}

impl Plan {
    fn draw(rng: &mut ChaCha8Rng, duration: f64) -> Self {
        let bpm = rng.gen_range(80.0..150.0);
        let beat = 60.0 / bpm;
        let root = rng.gen_range(45..58) as f64;
        let scale = if rng.gen_bool(0.5) {
            &MAJOR_PENTA
        } else {
            &MINOR_PENTA
        };
        let mut melody = Vec::new();
        let mut t = 0.0;
        while t < duration {
            let len = *[0.5, 1.0, 1.0, 1.5, 2.0].choose(rng).unwrap() * beat;
            let degree = rng.gen_range(0..10);
            let rest = rng.gen_bool(0.15);
            if !rest {
                let octave = 12 * (degree / 5) as i32;
                let pitch = root + 12.0 + (scale[degree % 5] + octave) as f64;
                melody.push((t, len, pitch));
            }
            t += len;
        }
        let bass = (0..8).map(|_| scale[rng.gen_range(0..5)]).collect();
        let chords = (0..4).map(|_| scale[rng.gen_range(0..5)]).collect();
        let mut pattern = |p: f64| {
            let mut a = [false; 16];
            for v in a.iter_mut() {
                *v = rng.gen_bool(p);
            }
            a
        };
        let mut kick = pattern(0.25);
        kick[0] = true;
        let mut snare = pattern(0.15);
        snare[4] = true;
        snare[12] = true;
        let hat = pattern(0.6);
        Self {
            beat,
            root,
            melody,
            bass,
            chords,
            kick,
            snare,
            hat,
            timbre: rng.gen_range(0.1..0.6),
        }
    }
}

fn render(n: usize, sr: f64, f: impl Fn(f64) -> f64) -> Vec<f32> {
    (0..n).map(|i| f(i as f64 / sr) as f32).collect()
}

fn vocals(p: &Plan, n: usize, sr: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; n];
    for &(start, len, pitch) in &p.melody {
        let f = midi_hz(pitch);
        let s0 = (start * sr) as usize;
        let s1 = (((start + len) * sr) as usize).min(n);
        for (i, o) in out.iter_mut().enumerate().take(s1).skip(s0) {
            let t = i as f64 / sr - start;
            let vib = 1.0 + 0.004 * (2.0 * PI * 5.5 * t).sin();
            let ph = 2.0 * PI * f * vib * t;
            let env = envelope(t, 0.02, len * 0.8) * (1.0 - (t / len).powi(8));
            *o += (0.3 * env * (ph.sin() + p.timbre * (2.0 * ph).sin() + 0.15 * (3.0 * ph).sin())) as f32;
        }
    }
    out
}

fn bass(p: &Plan, n: usize, sr: f64) -> Vec<f32> {
    render(n, sr, |t| {
        let step = (t / p.beat) as usize;
        let local = t - step as f64 * p.beat;
        let f = midi_hz(p.root - 12.0 + p.bass[step % p.bass.len()] as f64);
        let ph = 2.0 * PI * f * local;
        let wave: f64 = (1..=4).map(|h| (h as f64 * ph).sin() / h as f64).sum();
        0.25 * envelope(local, 0.01, p.beat * 0.6) * wave
    })
}

fn other(p: &Plan, n: usize, sr: f64) -> Vec<f32> {
    let bar = 4.0 * p.beat;
    render(n, sr, |t| {
        let idx = (t / bar) as usize;
        let local = t - idx as f64 * bar;
        let base = p.root + p.chords[idx % p.chords.len()] as f64;
        let amp = 0.08 * envelope(local, 0.15, bar * 1.5);
        [0.0, 4.0, 7.0]
            .iter()
            .map(|&iv| (2.0 * PI * midi_hz(base + iv) * local).sin())
            .sum::<f64>()
            * amp
    })
}

fn drums(p: &Plan, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let step_len = p.beat / 4.0;
    let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let step = (t / step_len) as usize;
            let local = t - step as f64 * step_len;
            let s = step % 16;
            let mut v = 0.0;
            if p.kick[s] {
                let f = 50.0 + 90.0 * (-local * 30.0).exp();
                v += 0.5 * envelope(local, 0.002, 0.12) * (2.0 * PI * f * local).sin();
            }
            if p.snare[s] {
                v += 0.25 * envelope(local, 0.001, 0.08) * (noise[i] + 0.5 * (2.0 * PI * 190.0 * local).sin());
            }
            if p.hat[s] {
                let hp = noise[i] - if i > 0 { noise[i - 1] } else { 0.0 };
                v += 0.1 * envelope(local, 0.001, 0.025) * hp;
            }
            v as f32
        })
        .collect()
}

/// Four-stem track of `duration` seconds.
pub fn track(seed: u64, duration: f64, sample_rate: u32) -> StemSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let n = (duration * sr).round() as usize;
    let plan = Plan::draw(&mut rng, duration);
    let stems = vec![
        vocals(&plan, n, sr),
        drums(&plan, n, sr, &mut rng),
        bass(&plan, n, sr),
        other(&plan, n, sr),
    ];
    StemSet::new(
        STEM_NAMES.iter().map(|s| s.to_string()).collect(),
        stems
            .into_iter()
            .map(|s| Waveform::new(s, sample_rate))
            .collect(),
    )
    .expect("generated stems are consistent")
}

/// Named tracks with seeds `base_seed + i`.
pub fn tracks(count: usize, base_seed: u64, duration: f64, sample_rate: u32) -> Vec<(String, StemSet)> {
    (0..count)
        .map(|i| {
            let seed = base_seed.wrapping_add(i as u64);
            (format!("synth{seed:04}"), track(seed, duration, sample_rate))
        })
        .collect()
}

/// Coloured noise with a slowly wandering level, used as a distractor
/// reference that shares no musical content with any track.
pub fn noise(seed: u64, duration: f64, sample_rate: u32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x006e_6f69_7365);
    let n = (duration * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    // One-pole low-pass with a per-track cutoff sets the colour.
    let cutoff: f64 = rng.gen_range(300.0..4000.0);
    let a = (-2.0 * PI * cutoff / sr).exp();
    let rate: f64 = rng.gen_range(0.1..0.5);
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut y = 0.0;
    let samples = (0..n)
        .map(|i| {
            let white: f64 = rng.gen_range(-1.0..1.0);
            y = a * y + (1.0 - a) * white;
            let level = 0.6 + 0.4 * (2.0 * PI * rate * i as f64 / sr + phase).sin();
            (y * level * 0.8) as f32
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracks_are_reproducible_and_distinct() {
        let a = track(1, 5.0, 16_000);
        assert_eq!(a, track(1, 5.0, 16_000));
        assert_ne!(a, track(2, 5.0, 16_000));
        assert_eq!(a.len(), 4);
        assert_eq!(a.stems[0].len(), 80_000);
    }

    #[test]
    fn every_stem_is_audible_and_bounded() {
        let t = track(7, 8.0, 16_000);
        for s in &t.stems {
            assert!(s.rms() > 1e-3);
            assert!(s.peak() < 1.0);
        }
        assert!(t.full_mix().peak() < 2.0);
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let a = noise(3, 2.0, 16_000);
        assert_eq!(a, noise(3, 2.0, 16_000));
        assert_ne!(a, noise(4, 2.0, 16_000));
        assert_eq!(a.len(), 32_000);
        assert!(a.rms() > 1e-3 && a.peak() < 1.0);
    }
}
