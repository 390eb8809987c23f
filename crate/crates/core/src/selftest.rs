//! Built-in invariant suite over synthetic data.
//!
//! Every check is seeded and the report carries no timestamps, so two runs
//! with the same seed serialise to identical bytes.

use std::collections::HashSet;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::json;

use crate::audio::{mel_spectrogram, MelConfig, Waveform};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::dsp::{dominant_frequency, PhaseVocoder};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::eval::{average_precision, parse_annotations, write_annotations, AnnotationRecord, Occurrence, SampleType};
use crate::exec::Exec;
use crate::index::{IvfPqConfig, IvfPqIndex, Location};
use crate::pairgen::aug1;
use crate::retrieval::{refine_and_rank, Candidate, FnScorer, ReferenceDb, RetrievalConfig};
use crate::synth;
use crate::training::gradcheck::{self, GradCheckConfig};
use crate::training::losses::nt_xent;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub config_hash: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn check(name: &str, passed: bool, detail: serde_json::Value) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

fn gradients(seed: u64) -> Result<Check> {
    let gc = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let reports = gradcheck::suite(&gc)?;
    let passed = reports.iter().all(|r| r.passed);
    let detail: serde_json::Map<String, serde_json::Value> = reports
        .iter()
        .map(|r| (r.name.clone(), json!(format!("{:.3e}", r.max_rel_err))))
        .collect();
    Ok(check("gradients", passed, detail.into()))
}

fn encoder_contract(seed: u64, exec: Exec) -> Result<Check> {
    let mel = MelConfig::default();
    let enc = Encoder::init(EncoderConfig::full(), seed)?;
    let stems = synth::track(seed, 4.0, mel.sample_rate);
    let spec = mel_spectrogram(&stems.full_mix().samples, &mel)?;
    let specs = vec![spec.clone(), spec];
    let out = enc.forward_batch(&specs, exec)?;
    let seq = enc.forward_batch(&specs, Exec::Sequential)?;
    let (nodes, fp) = &out[0];
    let norm_err = (fp.norm() - 1.0).abs();
    let passed = nodes.dim() == (32, 512)
        && fp.len() == 128
        && norm_err <= 1e-6
        && out == seq
        && out[0] == out[1];
    Ok(check(
        "encoder_contract",
        passed,
        json!({
            "nodes": [nodes.dim().0, nodes.dim().1],
            "fingerprint": fp.len(),
            "norm_error": format!("{norm_err:.2e}"),
            "parallel_matches_sequential": out == seq,
        }),
    ))
}

fn contrastive_closed_forms() -> Result<Check> {
    let eye = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
    let (orth, _, _) = nt_xent(&eye, &eye, 0.05)?;
    let e20 = 20f64.exp();
    let orth_err = (orth + (e20 / (e20 + 2.0)).ln()).abs();
    let same = Array2::from_elem((3, 4), 0.5);
    let (ident, _, _) = nt_xent(&same, &same, 0.05)?;
    let ident_err = (ident - 5f64.ln()).abs();
    Ok(check(
        "contrastive_closed_forms",
        orth_err <= 1e-9 && ident_err <= 1e-9,
        json!({
            "orthogonal_error": format!("{orth_err:.2e}"),
            "identical_error": format!("{ident_err:.2e}"),
        }),
    ))
}

fn index_recall(seed: u64, exec: Exec) -> Result<Check> {
    let (n, dim, queries) = (2048, 32, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = |noise: Option<&[f32]>| -> Vec<f32> {
        let mut v: Vec<f32> = (0..dim)
            .map(|i| {
                let g: f64 = StandardNormal.sample(&mut rng);
                noise.map_or(0.0, |b| b[i]) + g as f32 * if noise.is_some() { 0.5 / (dim as f32).sqrt() } else { 1.0 }
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    };
    let data: Vec<Vec<f32>> = (0..n).map(|_| unit(None)).collect();
    let qs: Vec<Vec<f32>> = (0..queries).map(|i| unit(Some(&data[i * 37]))).collect();
    let flat = Array2::from_shape_fn((n, dim), |(i, j)| data[i][j]);
    let cfg = IvfPqConfig {
        nlist: Some(16),
        m: 8,
        nbits: 8,
        nprobe: 4,
        seed,
        ..IvfPqConfig::default()
    };
    let mut index = IvfPqIndex::train(flat.view(), &cfg, exec)?;
    for (i, v) in data.iter().enumerate() {
        index.add(i as u64, v, Location { song: format!("s{}", i / 16), offset: (i % 16) as f64 * 0.5 })?;
    }
    let mut recalls = Vec::new();
    for nprobe in [1, 4, 16] {
        let mut hits = 0;
        for q in &qs {
            let truth = index.exact_search(q, 1)?[0].id;
            hits += (index.search(q, 1, nprobe)?[0].id == truth) as usize;
        }
        recalls.push(hits as f64 / queries as f64);
    }
    let monotone = recalls.windows(2).all(|w| w[1] >= w[0]);
    let bytes = index.to_bytes();
    let reloaded = IvfPqIndex::from_bytes(&bytes, Some(dim))? == index;
    Ok(check(
        "index_recall",
        monotone && recalls[2] >= 0.99 && reloaded,
        json!({ "recall_at_1": { "1": recalls[0], "4": recalls[1], "16": recalls[2] }, "round_trip": reloaded }),
    ))
}

fn ranking_metrics() -> Result<Check> {
    let rel: HashSet<u32> = [1, 3].into_iter().collect();
    let ap = average_precision(&[1, 2, 3, 4], &rel)?;
    let err = (ap - (1.0 + 2.0 / 3.0) / 2.0).abs();
    Ok(check("average_precision", err <= 1e-12, json!({ "ap_ranks_1_3": format!("{ap:.10}") })))
}

fn aggregation() -> Result<Check> {
    let mut db = ReferenceDb::new("selftest", MelConfig::default());
    let blank = |k: usize| crate::retrieval::EncodedSegment {
        offset: 0.0,
        fingerprint: crate::encoder::Fingerprint(vec![k as f32]),
        nodes: crate::encoder::NodeMatrix(Array2::zeros((1, 1))),
    };
    db.add_song("a", None, vec![blank(0)])?;
    db.add_song("b", None, vec![blank(1), crate::retrieval::EncodedSegment { offset: 0.5, ..blank(2) }])?;
    db.add_song("c", None, vec![blank(3)])?;
    let cands: Vec<Candidate> = [(0, "a"), (1, "b"), (2, "b"), (3, "c")]
        .iter()
        .map(|&(id, song)| Candidate {
            vector_id: id,
            song: song.into(),
            offset: 0.0,
            ann_score: 1.0,
            sources: vec![0],
        })
        .collect();
    // Query segment 1 lifts "a" to 0.9; "c" never reaches the threshold.
    let scores = [[0.2, 0.6, 0.6, 0.49], [0.9, 0.1, 0.1, 0.3]];
    let scorer = FnScorer(move |q: usize, id: u64| scores[q][id as usize]);
    let nodes = vec![crate::encoder::NodeMatrix(Array2::zeros((1, 1))); 2];
    let res = refine_and_rank(&nodes, &cands, &db, &scorer, &RetrievalConfig::default(), Exec::Sequential)?;
    let ranked = res.ranked_ids();
    let passed = ranked == ["b", "a"] && (res.songs[0].score - 1.2).abs() < 1e-12 && res.songs[1].score == 0.9;
    Ok(check("aggregation", passed, json!({ "ranking": ranked })))
}

fn augmentation() -> Result<Check> {
    let sr = 16_000.0;
    let sine: Vec<f32> = (0..64_000)
        .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr).sin() as f32 * 0.5)
        .collect();
    let pv = PhaseVocoder::new(crate::pairgen::VOCODER_FFT, crate::pairgen::VOCODER_HOP);
    let shifted = pv.pitch_shift(&sine, sr, 3.0);
    let peak = dominant_frequency(&shifted, sr, 4096);
    let bin = sr / 4096.0;
    let stretched = pv.stretch(&sine, 1.25);
    let stretched_s = stretched.len() as f64 / sr;
    let w = Waveform::new(sine.clone(), 16_000);
    let louder = aug1(&w, 0.0, 6.0206);
    let gain_err = sine
        .iter()
        .zip(&louder.samples)
        .map(|(a, b)| (2.0 * a - b).abs() as f64)
        .fold(0.0, f64::max);
    let passed = (peak - 523.25).abs() <= bin
        && (stretched_s - 3.2).abs() <= crate::pairgen::VOCODER_HOP as f64 / sr
        && gain_err <= 1e-6;
    Ok(check(
        "augmentation",
        passed,
        json!({
            "pitch_peak_hz": format!("{peak:.2}"),
            "stretched_seconds": format!("{stretched_s:.4}"),
            "gain_error": format!("{gain_err:.2e}"),
        }),
    ))
}

fn annotations() -> Result<Check> {
    let records = vec![AnnotationRecord {
        query_id: "q".into(),
        reference_id: "r".into(),
        occurrences: vec![Occurrence {
            query_start: 1.5,
            query_end: 9.0,
            reference_start: 60.0,
            reference_end: 67.5,
        }],
        sample_type: SampleType::OneNote,
        stretch_ratio: 1.04,
        query_stems: vec!["drums".into()],
        reference_stems: vec!["other".into(), "bass".into()],
        comment: "stab, filtered".into(),
    }];
    let mut buf = Vec::new();
    write_annotations(&mut buf, &records)?;
    let back = parse_annotations(buf.as_slice())?;
    Ok(check("annotation_round_trip", back == records, json!({ "bytes": buf.len() })))
}

fn classifier_range(seed: u64) -> Result<Check> {
    let clf = Classifier::init(ClassifierConfig::default(), 16, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = || {
        crate::encoder::NodeMatrix(Array2::from_shape_fn((8, 16), |_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g as f32
        }))
    };
    let (q, r) = (m(), m());
    let p = clf.classify(&q, &r)?;
    let again = clf.classify(&q, &r)?;
    Ok(check(
        "classifier_range",
        p > 0.0 && p < 1.0 && p == again,
        json!({ "score": format!("{p:.6}") }),
    ))
}

/// Runs every check. `config_hash` is copied into the report.
pub fn run(seed: u64, config_hash: &str, exec: Exec) -> Result<SelftestReport> {
    let checks = vec![
        gradients(seed)?,
        encoder_contract(seed, exec)?,
        contrastive_closed_forms()?,
        index_recall(seed, exec)?,
        ranking_metrics()?,
        aggregation()?,
        augmentation()?,
        annotations()?,
        classifier_range(seed)?,
    ];
    Ok(SelftestReport {
        seed,
        config_hash: config_hash.into(),
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_reproducible() {
        let a = run(3, "h", Exec::Parallel).unwrap();
        for c in &a.checks {
            assert!(c.passed, "{} failed: {}", c.name, c.detail);
        }
        let b = run(3, "h", Exec::Sequential).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }
}
