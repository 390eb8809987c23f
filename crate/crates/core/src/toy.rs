//! Small end-to-end run on synthetic music: train both stages, build a
//! reference collection with noise distractors, then query it with freshly
//! generated pairs. Used by the acceptance suite and handy as a smoke test
//! of the whole pipeline.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::MelConfig;
use crate::classifier::ClassifierConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::average_precision;
use crate::exec::Exec;
use crate::index::IvfPqConfig;
use crate::pairgen::{generate_pair, AugRanges};
use crate::retrieval::{ReferenceDb, RetrievalConfig, Retriever};
use crate::synth;
use crate::training::classifier_stage::pair_auroc;
use crate::training::{train_classifier, train_encoder, ClassifierTrainConfig, EncoderTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub tracks: usize,
    pub noise_tracks: usize,
    pub track_seconds: f64,
    pub query_seconds: f64,
    pub mel: MelConfig,
    pub augment: AugRanges,
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    pub train_encoder: EncoderTrainConfig,
    pub train_classifier: ClassifierTrainConfig,
    pub index: IvfPqConfig,
    pub retrieval: RetrievalConfig,
    pub auroc_pairs: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::tiny();
        Self {
            seed: 0,
            tracks: 16,
            noise_tracks: 16,
            track_seconds: 20.0,
            query_seconds: 8.0,
            mel: MelConfig::default(),
            augment: AugRanges::default(),
            classifier: ClassifierConfig { n_heads: 2 },
            train_encoder: EncoderTrainConfig {
                batch_size: 16,
                steps: 200,
                val_fraction: 0.0,
                ..EncoderTrainConfig::default()
            },
            train_classifier: ClassifierTrainConfig {
                batch_size: 16,
                epochs: 2,
                steps_per_epoch: 25,
                lr: 1e-3,
            },
            index: IvfPqConfig {
                nlist: Some(8),
                m: encoder.fp_dim / 2,
                nbits: 6,
                nprobe: 8,
                ..IvfPqConfig::default()
            },
            retrieval: RetrievalConfig::default(),
            auroc_pairs: 64,
            encoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyQuery {
    pub source: String,
    pub ap: f64,
    /// Top of the returned ranking.
    pub ranking: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyReport {
    pub map: f64,
    pub auroc: f64,
    pub first_loss: f64,
    pub last_loss: f64,
    pub classifier_losses: Vec<f64>,
    pub reference_segments: usize,
    pub queries: Vec<ToyQuery>,
}

pub fn run(cfg: &ToyConfig, exec: Exec) -> Result<ToyReport> {
    if cfg.query_seconds + cfg.augment.offset_s > cfg.track_seconds {
        return Err(Error::InvalidArgument("queries longer than the tracks".into()));
    }
    let sr = cfg.mel.sample_rate;
    let tracks = synth::tracks(cfg.tracks, cfg.seed, cfg.track_seconds, sr);

    let enc_run = train_encoder(
        &tracks,
        &cfg.encoder,
        &cfg.mel,
        &cfg.augment,
        &cfg.train_encoder,
        cfg.seed,
        exec,
    )?;
    let encoder = enc_run.encoder;
    let clf_run = train_classifier(
        &tracks,
        &encoder,
        &cfg.classifier,
        &cfg.mel,
        &cfg.augment,
        &cfg.train_classifier,
        cfg.seed.wrapping_add(1),
        exec,
    )?;
    let classifier = clf_run.classifier;

    let mut db = ReferenceDb::for_encoder(&encoder, cfg.mel.clone());
    for (name, stems) in &tracks {
        db.ingest(name, None, &stems.full_mix(), &encoder, exec)?;
    }
    for i in 0..cfg.noise_tracks {
        let seed = cfg.seed.wrapping_add(10_000 + i as u64);
        let audio = synth::noise(seed, cfg.track_seconds, sr);
        db.ingest(&format!("noise{i:02}"), None, &audio, &encoder, exec)?;
    }
    let index = db.build_index(&cfg.index, exec)?;
    let retriever = Retriever::new(&encoder, &classifier, &index, &db, cfg.retrieval.clone())?;

    // Query seeds come from a stream no training stage draws from.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0071_7565_7279);
    let latest = cfg.track_seconds - cfg.query_seconds - cfg.augment.offset_s;
    let jobs: Vec<(usize, f64, u64)> = (0..tracks.len())
        .map(|i| (i, rng.gen_range(0.0..=latest), rng.gen()))
        .collect();
    let queries = exec.try_map(&jobs, |&(i, start, seed)| {
        let (name, stems) = &tracks[i];
        let pair = generate_pair(stems, name, start, cfg.query_seconds, &cfg.augment, seed)?;
        let result = retriever.query(&pair.x_q, Exec::Sequential)?;
        let ranking: Vec<String> = result.songs.into_iter().map(|s| s.song).collect();
        let relevant: HashSet<String> = [name.clone()].into();
        let ap = average_precision(&ranking, &relevant)?;
        Ok::<_, Error>(ToyQuery {
            source: name.clone(),
            ap,
            ranking: ranking.into_iter().take(5).collect(),
        })
    })?;
    let map = queries.iter().map(|q| q.ap).sum::<f64>() / queries.len().max(1) as f64;

    let auroc = pair_auroc(
        &tracks,
        &encoder,
        &classifier,
        &cfg.mel,
        &cfg.augment,
        cfg.auroc_pairs,
        cfg.seed.wrapping_add(2),
        exec,
    )?;
    Ok(ToyReport {
        map,
        auroc,
        first_loss: enc_run.steps.first().map_or(f64::NAN, |s| s.loss),
        last_loss: enc_run.steps.last().map_or(f64::NAN, |s| s.loss),
        classifier_losses: clf_run.epochs.iter().map(|e| e.mean_loss).collect(),
        reference_segments: db.segment_count(),
        queries,
    })
}
