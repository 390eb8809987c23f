//! Classifier training on top of a frozen encoder.
//!
//! Every batch holds `B_c` fresh positive pairs. For each query the three
//! references of other pairs whose fingerprints are most similar to it are
//! taken as hard negatives, giving a fixed 1:3 label ratio. The classifier
//! minimises mean binary cross-entropy with constant-rate Adam; the encoder
//! is only read.

use log::info;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelConfig, MelSpec};
use crate::classifier::{classify_tape, Classifier, ClassifierConfig, MhcaParams};
use crate::encoder::{Encoder, Fingerprint, NodeMatrix};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pairgen::AugRanges;
use crate::tape::Tape;
use crate::training::data::{batch_features, ordered_sum, plan_jobs, Track};
use crate::training::losses::bce;
use crate::training::optim::{Adam, Schedule};

/// Negatives mined per positive.
pub const NEGATIVES_PER_POSITIVE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    /// Positive pairs per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 5,
            steps_per_epoch: 100,
            lr: 1e-4,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size <= NEGATIVES_PER_POSITIVE
            || self.epochs == 0
            || self.steps_per_epoch == 0
            || !(self.lr > 0.0)
        {
            return Err(Error::Config(format!(
                "invalid classifier training config {self:?} (batch size must be >= 4)"
            )));
        }
        Ok(())
    }
}

/// For each query `i`, the `per_query` references `j != i` with the highest
/// `sim(z_q[i], z_r[j])`, most similar first, ties to the lower index.
/// Returns `(i, j)` index pairs grouped by query.
pub fn mine_hard_negatives(
    queries: &[Fingerprint],
    references: &[Fingerprint],
    per_query: usize,
) -> Result<Vec<(usize, usize)>> {
    let b = queries.len();
    if b != references.len() || b < per_query + 1 {
        return Err(Error::InvalidArgument(format!(
            "mining {per_query} negatives needs at least {} aligned pairs, got {b}",
            per_query + 1
        )));
    }
    let mut out = Vec::with_capacity(b * per_query);
    for (i, q) in queries.iter().enumerate() {
        let mut others: Vec<(usize, f64)> = (0..b)
            .filter(|&j| j != i)
            .map(|j| (j, q.dot(&references[j])))
            .collect();
        others.sort_by(|a, c| c.1.total_cmp(&a.1).then(a.0.cmp(&c.0)));
        out.extend(others.into_iter().take(per_query).map(|(j, _)| (i, j)));
    }
    Ok(out)
}

/// A scored training example.
#[derive(Clone, Debug)]
pub struct LabelledPair {
    pub query: usize,
    pub reference: usize,
    pub label: f64,
}

/// Positives `(i, i)` followed by the mined negatives.
pub fn build_batch(queries: &[Fingerprint], references: &[Fingerprint]) -> Result<Vec<LabelledPair>> {
    let negatives = mine_hard_negatives(queries, references, NEGATIVES_PER_POSITIVE)?;
    let mut out: Vec<LabelledPair> = (0..queries.len())
        .map(|i| LabelledPair {
            query: i,
            reference: i,
            label: 1.0,
        })
        .collect();
    out.extend(negatives.into_iter().map(|(i, j)| LabelledPair {
        query: i,
        reference: j,
        label: 0.0,
    }));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

pub struct ClassifierRun {
    pub classifier: Classifier,
    pub epochs: Vec<EpochRecord>,
    pub encoder_hash: String,
}

struct Encoded {
    nodes: Array2<f64>,
    fp: Fingerprint,
}

fn encode_all(encoder: &Encoder, specs: &[MelSpec], exec: Exec) -> Result<Vec<Encoded>> {
    exec.try_map(specs, |s| {
        let (n, fp): (NodeMatrix, Fingerprint) = encoder.forward(s)?;
        Ok(Encoded { nodes: n.to_f64(), fp })
    })
}

/// Mean BCE over a labelled batch and its parameter gradients.
pub fn batch_loss(
    params: &MhcaParams,
    n_heads: usize,
    queries: &[Array2<f64>],
    references: &[Array2<f64>],
    batch: &[LabelledPair],
    exec: Exec,
) -> (f64, Vec<Array2<f64>>) {
    let scale = 1.0 / batch.len() as f64;
    let per_pair = exec.map(batch, |p| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let q = tape.leaf(queries[p.query].clone());
        let r = tape.leaf(references[p.reference].clone());
        let s = classify_tape(&mut tape, q, r, &bound, n_heads);
        let (loss, dl_ds) = bce(tape.scalar(s), p.label);
        let grads = tape.backward_with(s, Array2::from_elem((1, 1), dl_ds * scale));
        let g: Vec<Array2<f64>> = bound.iter().into_iter().map(|&id| grads.get(&tape, id)).collect();
        (loss, g)
    });
    let loss = per_pair.iter().map(|(l, _)| l).sum::<f64>() * scale;
    let grads = ordered_sum(per_pair.into_iter().map(|(_, g)| g).collect()).expect("non-empty batch");
    (loss, grads)
}

/// Data-dependent start for the input projections. Encoder nodes share a
/// large common mean and sit far from unit scale; that offset would swamp
/// the query-dependent part of every attention logit and start the output
/// sigmoid saturated. The mean direction is projected out of the query,
/// key and value maps, which are then scaled by the RMS of the centred
/// node entries of the first batch.
fn calibrate(params: &mut MhcaParams, queries: &[Array2<f64>], references: &[Array2<f64>]) {
    let d = params.wq.nrows();
    let mats: Vec<&Array2<f64>> = queries.iter().chain(references).collect();
    let rows: usize = mats.iter().map(|m| m.nrows()).sum();
    if rows == 0 {
        return;
    }
    let mut mean = Array1::<f64>::zeros(d);
    for m in &mats {
        mean += &m.sum_axis(Axis(0));
    }
    mean /= rows as f64;
    let sq: f64 = mats.iter().map(|m| (*m - &mean).mapv(|v| v * v).sum()).sum();
    let rms = (sq / (rows * d) as f64).sqrt();
    if !(rms > 0.0 && rms.is_finite()) {
        return;
    }
    let norm = mean.dot(&mean).sqrt();
    let project = if norm > 0.0 {
        let u = (&mean / norm).insert_axis(Axis(1));
        Array2::eye(d) - u.dot(&u.t())
    } else {
        Array2::eye(d)
    };
    for w in [&mut params.wq, &mut params.wk, &mut params.wv] {
        *w = project.dot(&*w) / rms;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    tracks: &[Track],
    encoder: &Encoder,
    clf_cfg: &ClassifierConfig,
    mel: &MelConfig,
    aug: &AugRanges,
    cfg: &ClassifierTrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<ClassifierRun> {
    cfg.validate()?;
    if tracks.is_empty() {
        return Err(Error::InvalidArgument("no training tracks".into()));
    }
    let encoder_hash = encoder.param_hash();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classifier = Classifier::init(clf_cfg.clone(), encoder.config.node_dim(), rng.gen())?;
    let mut params = classifier.params.clone();
    let mut adam = Adam::new(params.iter());
    let schedule = Schedule::Constant { lr: cfg.lr };
    let pool: Vec<usize> = (0..tracks.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let jobs = plan_jobs(tracks, &pool, cfg.batch_size, mel.window_seconds, aug, &mut rng)?;
            let feats = batch_features(tracks, &jobs, mel, aug, exec)?;
            let (qs, rs): (Vec<MelSpec>, Vec<MelSpec>) =
                feats.into_iter().map(|f| (f.query, f.reference)).unzip();
            let q = encode_all(encoder, &qs, exec)?;
            let r = encode_all(encoder, &rs, exec)?;
            let q_fp: Vec<Fingerprint> = q.iter().map(|e| e.fp.clone()).collect();
            let r_fp: Vec<Fingerprint> = r.iter().map(|e| e.fp.clone()).collect();
            let batch = build_batch(&q_fp, &r_fp)?;
            let q_nodes: Vec<Array2<f64>> = q.into_iter().map(|e| e.nodes).collect();
            let r_nodes: Vec<Array2<f64>> = r.into_iter().map(|e| e.nodes).collect();
            if epoch == 0 && step == 0 {
                calibrate(&mut params, &q_nodes, &r_nodes);
            }
            let (loss, grads) = batch_loss(&params, clf_cfg.n_heads, &q_nodes, &r_nodes, &batch, exec);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: epoch * cfg.steps_per_epoch + step,
                    detail: format!("classifier loss {loss}"),
                });
            }
            adam.update(params.iter_mut(), &grads, schedule.lr(step));
            total += loss;
        }
        let mean_loss = total / cfg.steps_per_epoch as f64;
        info!("classifier epoch {epoch}: mean loss {mean_loss:.4}");
        epochs.push(EpochRecord { epoch, mean_loss });
    }
    classifier = Classifier::new(classifier.config, params)?;
    if encoder.param_hash() != encoder_hash {
        return Err(Error::InvalidArgument(
            "encoder weights changed during classifier training".into(),
        ));
    }
    Ok(ClassifierRun {
        classifier,
        epochs,
        encoder_hash,
    })
}

/// Area under the ROC curve via the Mann-Whitney statistic; ties count
/// one half.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in positives {
        for &n in negatives {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (positives.len() * negatives.len()) as f64)
}

/// Classifier AUROC on fresh pairs: matching pairs against every
/// mismatched query/reference combination from different tracks.
#[allow(clippy::too_many_arguments)]
pub fn pair_auroc(
    tracks: &[Track],
    encoder: &Encoder,
    classifier: &Classifier,
    mel: &MelConfig,
    aug: &AugRanges,
    pairs: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = (0..tracks.len()).collect();
    let jobs = plan_jobs(tracks, &pool, pairs, mel.window_seconds, aug, &mut rng)?;
    let feats = batch_features(tracks, &jobs, mel, aug, exec)?;
    let encoded = exec.try_map(&feats, |f| {
        let (q, _) = encoder.forward(&f.query)?;
        let (r, _) = encoder.forward(&f.reference)?;
        Ok::<_, Error>((classifier.prepare_query(&q)?, classifier.prepare_ref(&r)?))
    })?;
    let n = encoded.len();
    let scores = exec.map_range(n * n, |k| {
        let (i, j) = (k / n, k % n);
        classifier.score_prepared(&encoded[i].0, &encoded[j].1)
    });
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                pos.push(scores[i * n + j]);
            } else if jobs[i].track != jobs[j].track {
                neg.push(scores[i * n + j]);
            }
        }
    }
    auroc(&pos, &neg).ok_or_else(|| Error::InvalidArgument("AUROC needs two tracks".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth;

    fn fp(v: &[f32]) -> Fingerprint {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        Fingerprint(v.iter().map(|x| x / n).collect())
    }

    #[test]
    fn mining_matches_brute_force_top3() {
        // similarity sim[i][j] = q_i . r_j engineered through 4-d one-hots
        let q: Vec<Fingerprint> = (0..4)
            .map(|i| {
                let mut v = [0.0f32; 4];
                v[i] = 1.0;
                Fingerprint(v.to_vec())
            })
            .collect();
        let r = vec![
            fp(&[0.9, 0.1, 0.5, 0.2]),
            fp(&[0.3, 0.8, 0.1, 0.6]),
            fp(&[0.2, 0.4, 0.7, 0.9]),
            fp(&[0.5, 0.3, 0.2, 0.1]),
        ];
        let got = mine_hard_negatives(&q, &r, 3).unwrap();
        assert_eq!(got.len(), 12);
        for i in 0..4 {
            let mut want: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            want.sort_by(|&a, &b| r[b].0[i].total_cmp(&r[a].0[i]).then(a.cmp(&b)));
            let mine: Vec<usize> = got[i * 3..i * 3 + 3].iter().map(|p| p.1).collect();
            assert_eq!(mine, want);
        }
    }

    #[test]
    fn equal_similarities_fall_back_to_index_order() {
        let same: Vec<Fingerprint> = (0..5).map(|_| fp(&[1.0, 1.0])).collect();
        let got = mine_hard_negatives(&same, &same, 3).unwrap();
        assert_eq!(&got[..3], &[(0, 1), (0, 2), (0, 3)]);
        assert_eq!(&got[3..6], &[(1, 0), (1, 2), (1, 3)]);
        assert!(mine_hard_negatives(&same[..3], &same[..3], 3).is_err());
    }

    #[test]
    fn batches_hold_one_positive_per_three_negatives() {
        let fps: Vec<Fingerprint> = (0..6).map(|i| fp(&[1.0, i as f32])).collect();
        let batch = build_batch(&fps, &fps).unwrap();
        let pos = batch.iter().filter(|p| p.label == 1.0).count();
        assert_eq!(pos, 6);
        assert_eq!(batch.len() - pos, 18);
        assert!(batch.iter().all(|p| (p.label == 1.0) == (p.query == p.reference)));
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]), Some(1.0));
        assert_eq!(auroc(&[0.1], &[0.9]), Some(0.0));
        assert_eq!(auroc(&[0.5], &[0.5]), Some(0.5));
        assert_eq!(auroc(&[], &[0.5]), None);
    }

    #[test]
    fn short_run_keeps_the_encoder_frozen() {
        let tracks = synth::tracks(5, 40, 6.0, 16_000);
        let encoder = Encoder::init(EncoderConfig::tiny(), 1).unwrap();
        let before = encoder.clone();
        let cfg = ClassifierTrainConfig {
            batch_size: 4,
            epochs: 2,
            steps_per_epoch: 2,
            lr: 1e-3,
        };
        let run = train_classifier(
            &tracks,
            &encoder,
            &ClassifierConfig { n_heads: 2 },
            &MelConfig::default(),
            &AugRanges::default(),
            &cfg,
            3,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(encoder, before);
        assert_eq!(run.encoder_hash, before.param_hash());
        assert_eq!(run.epochs.len(), 2);
    }
}
