//! Pair sampling shared by both training stages.

use rand::seq::index::sample;
use rand::Rng;

use crate::audio::{mel_spectrogram, MelConfig, MelSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pairgen::{generate_pair, AugRanges, Provenance, StemSet};

/// A named multi-stem track.
pub type Track = (String, StemSet);

/// Where and how to cut one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairJob {
    pub track: usize,
    pub start: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PairFeatures {
    pub query: MelSpec,
    pub reference: MelSpec,
    pub provenance: Provenance,
}

/// `count` track indices: distinct while `count <= n`, otherwise every
/// track once per full round plus a distinct remainder.
pub fn pick_tracks(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let take = (count - out.len()).min(n);
        out.extend(sample(rng, n, take));
    }
    out
}

/// Latest start that leaves room for the window and the offset headroom.
pub fn max_start(stems: &StemSet, window: f64, aug: &AugRanges) -> f64 {
    stems.duration() - window - aug.offset_s
}

pub fn plan_jobs(
    tracks: &[Track],
    pool: &[usize],
    count: usize,
    window: f64,
    aug: &AugRanges,
    rng: &mut impl Rng,
) -> Result<Vec<PairJob>> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no tracks to sample pairs from".into()));
    }
    pick_tracks(pool.len(), count, rng)
        .into_iter()
        .map(|i| {
            let track = pool[i];
            let hi = max_start(&tracks[track].1, window, aug);
            if hi < 0.0 {
                return Err(Error::TooShort {
                    duration: tracks[track].1.duration(),
                    required: window + aug.offset_s,
                });
            }
            Ok(PairJob {
                track,
                start: rng.gen_range(0.0..=hi),
                seed: rng.gen(),
            })
        })
        .collect()
}

pub fn pair_features(
    tracks: &[Track],
    job: &PairJob,
    mel: &MelConfig,
    aug: &AugRanges,
) -> Result<PairFeatures> {
    let (id, stems) = &tracks[job.track];
    let pair = generate_pair(stems, id, job.start, mel.window_seconds, aug, job.seed)?;
    Ok(PairFeatures {
        query: mel_spectrogram(&pair.x_q.samples, mel)?,
        reference: mel_spectrogram(&pair.x_r.samples, mel)?,
        provenance: pair.provenance,
    })
}

pub fn batch_features(
    tracks: &[Track],
    jobs: &[PairJob],
    mel: &MelConfig,
    aug: &AugRanges,
    exec: Exec,
) -> Result<Vec<PairFeatures>> {
    exec.try_map(jobs, |j| pair_features(tracks, j, mel, aug))
}

/// Splits track indices into (train, validation) after a seeded shuffle.
/// At least two tracks stay in training; with fewer than three there is no
/// validation split.
pub fn split_tracks(n: usize, val_fraction: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let order = sample(rng, n, n).into_vec();
    let n_val = if val_fraction > 0.0 {
        ((n as f64 * val_fraction).round() as usize).max(1).min(n.saturating_sub(2))
    } else {
        0
    };
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Sums per-sample gradient lists in input order.
pub fn ordered_sum(per_sample: Vec<Vec<ndarray::Array2<f64>>>) -> Option<Vec<ndarray::Array2<f64>>> {
    let mut it = per_sample.into_iter();
    let mut acc = it.next()?;
    for g in it {
        for (a, b) in acc.iter_mut().zip(g) {
            *a += &b;
        }
    }
    Some(acc)
}
