//! Sequential against data-parallel execution on the three hot loops:
//! batch encoding, batched index search and candidate scoring.

use asid::audio::{mel_spectrogram, segment, MelConfig, MelSpec};
use asid::classifier::{Classifier, ClassifierConfig};
use asid::encoder::{Encoder, EncoderConfig, Fingerprint, NodeMatrix};
use asid::exec::Exec;
use asid::index::{IvfPqConfig, IvfPqIndex, Location};
use asid::retrieval::{refine_and_rank, Candidate, EncodedSegment, ReferenceDb, RetrievalConfig};
use asid::synth;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Array2<f32> {
    let mut m = Array2::from_shape_fn((n, dim), |_| rng.sample::<f32, _>(StandardNormal));
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    m
}

fn specs(count: usize) -> Vec<MelSpec> {
    let mel = MelConfig::default();
    let mix = synth::track(1, 2.0 * count as f64 + 2.0, mel.sample_rate).full_mix();
    segment(&mix, &mel)
        .unwrap()
        .into_iter()
        .take(count)
        .map(|(_, w)| mel_spectrogram(w, &mel).unwrap())
        .collect()
}

fn encode(c: &mut Criterion) {
    let enc = Encoder::init(EncoderConfig::full(), 0).unwrap();
    let batch = specs(8);
    let mut g = c.benchmark_group("encode_batch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| enc.forward_batch(&batch, exec).unwrap())
        });
    }
    g.finish();
}

fn search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = unit_rows(&mut rng, 8192, 128);
    let cfg = IvfPqConfig {
        nlist: Some(64),
        ..IvfPqConfig::default()
    };
    let mut index = IvfPqIndex::train(data.view(), &cfg, Exec::Parallel).unwrap();
    for (i, row) in data.rows().into_iter().enumerate() {
        let loc = Location { song: format!("s{}", i / 64), offset: (i % 64) as f64 * 0.5 };
        index.add(i as u64, row.as_slice().unwrap(), loc).unwrap();
    }
    let queries = unit_rows(&mut rng, 64, 128);
    let mut g = c.benchmark_group("search_batch");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| index.search_batch(queries.view(), 20, 8, exec).unwrap())
        });
    }
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let (nodes, dim) = (32, 512);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let node_matrix = |rng: &mut ChaCha8Rng| {
        NodeMatrix(Array2::from_shape_fn((nodes, dim), |_| rng.sample::<f32, _>(StandardNormal)))
    };
    let mut db = ReferenceDb::new("bench", MelConfig::default());
    let mut candidates = Vec::new();
    for song in 0..16 {
        let segs: Vec<EncodedSegment> = (0..8)
            .map(|k| EncodedSegment {
                offset: k as f64 * 0.5,
                fingerprint: Fingerprint(vec![0.0; 4]),
                nodes: node_matrix(&mut rng),
            })
            .collect();
        db.add_song(&format!("song{song:02}"), None, segs).unwrap();
    }
    for (song, seg) in db.iter_segments() {
        candidates.push(Candidate {
            vector_id: seg.vector_id,
            song: song.to_string(),
            offset: seg.offset,
            ann_score: 1.0,
            sources: vec![0],
        });
    }
    let query: Vec<NodeMatrix> = (0..8).map(|_| node_matrix(&mut rng)).collect();
    let clf = Classifier::init(ClassifierConfig::default(), dim, 3).unwrap();
    let cfg = RetrievalConfig::default();
    let mut g = c.benchmark_group("score_candidates");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| refine_and_rank(&query, &candidates, &db, &clf, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, encode, search, scoring);
criterion_main!(benches);
