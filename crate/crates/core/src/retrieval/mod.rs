//! Two-stage retrieval: ANN candidates per query segment, then classifier
//! re-scoring with rejection and song-level aggregation.
//!
//! A candidate reference segment gets the maximum classifier score over the
//! query segments in scope. Candidates below the rejection threshold are
//! dropped and a song's score is the sum of its surviving segment scores.

mod db;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use db::{encode_audio, EncodedSegment, ReferenceDb, Segment, Song, DB_MAGIC};

use crate::audio::Waveform;
use crate::classifier::{Classifier, PreparedQuery, PreparedRef};
use crate::encoder::{Encoder, NodeMatrix};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::index::IvfPqIndex;

/// Which query segments a candidate is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryScope {
    /// Every query segment.
    All,
    /// Query segments within this many hops of a segment whose ANN search
    /// returned the candidate. `Near(0)` scores only those segments.
    Near(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub topk_per_segment: usize,
    /// Lists probed per ANN search; `None` uses the index default.
    pub nprobe: Option<usize>,
    pub threshold: f64,
    pub scope: QueryScope,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            topk_per_segment: 20,
            nprobe: None,
            threshold: 0.5,
            scope: QueryScope::All,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topk_per_segment == 0 {
            return Err(Error::Config("topk_per_segment must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub vector_id: u64,
    pub song: String,
    pub offset: f64,
    /// Best approximate similarity over the query segments that found it.
    pub ann_score: f32,
    /// Query segments whose ANN search returned this candidate, ascending.
    pub sources: Vec<usize>,
}

/// Scores query/reference segment pairs. Preparation lets an implementation
/// reuse per-segment work across the many pairs a query produces.
pub trait PairScorer: Sync {
    type Query: Send + Sync;
    type Reference: Send + Sync;

    fn prepare_query(&self, index: usize, nodes: &NodeMatrix) -> Result<Self::Query>;
    fn prepare_reference(&self, vector_id: u64, nodes: &NodeMatrix) -> Result<Self::Reference>;
    fn score(&self, query: &Self::Query, reference: &Self::Reference) -> f64;
}

impl PairScorer for Classifier {
    type Query = PreparedQuery;
    type Reference = PreparedRef;

    fn prepare_query(&self, _: usize, nodes: &NodeMatrix) -> Result<PreparedQuery> {
        Classifier::prepare_query(self, nodes)
    }

    fn prepare_reference(&self, _: u64, nodes: &NodeMatrix) -> Result<PreparedRef> {
        self.prepare_ref(nodes)
    }

    fn score(&self, query: &PreparedQuery, reference: &PreparedRef) -> f64 {
        self.score_prepared(query, reference)
    }
}

/// Scorer driven by identities alone: `f(query segment index, vector id)`.
/// Useful for oracle and stub classifiers.
pub struct FnScorer<F>(pub F);

impl<F: Fn(usize, u64) -> f64 + Sync> PairScorer for FnScorer<F> {
    type Query = usize;
    type Reference = u64;

    fn prepare_query(&self, index: usize, _: &NodeMatrix) -> Result<usize> {
        Ok(index)
    }

    fn prepare_reference(&self, vector_id: u64, _: &NodeMatrix) -> Result<u64> {
        Ok(vector_id)
    }

    fn score(&self, query: &usize, reference: &u64) -> f64 {
        (self.0)(*query, *reference)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentMatch {
    pub vector_id: u64,
    pub offset: f64,
    pub ann_score: f32,
    pub score: f64,
    /// Query segment that produced `score`.
    pub query_segment: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SongMatch {
    pub song: String,
    pub score: f64,
    pub max_segment_score: f64,
    /// Surviving segments by ascending offset.
    pub segments: Vec<SegmentMatch>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub query_segments: usize,
    pub candidates: usize,
    pub songs: Vec<SongMatch>,
}

impl RetrievalResult {
    pub fn ranked_ids(&self) -> Vec<&str> {
        self.songs.iter().map(|s| s.song.as_str()).collect()
    }
}

/// Top `topk` ANN matches of every query fingerprint, merged per vector id
/// keeping the best score. Output is ordered by vector id.
pub fn retrieve_candidates(
    query: &[EncodedSegment],
    index: &IvfPqIndex,
    topk: usize,
    nprobe: usize,
    exec: Exec,
) -> Result<Vec<Candidate>> {
    if index.is_empty() {
        return Err(Error::Index("index is empty".into()));
    }
    let per_segment = exec.try_map(query, |q| index.search(&q.fingerprint.0, topk, nprobe))?;
    let mut merged: BTreeMap<u64, (f32, BTreeSet<usize>)> = BTreeMap::new();
    for (qi, hits) in per_segment.into_iter().enumerate() {
        for hit in hits {
            let entry = merged
                .entry(hit.id)
                .or_insert((f32::NEG_INFINITY, BTreeSet::new()));
            entry.0 = entry.0.max(hit.score);
            entry.1.insert(qi);
        }
    }
    merged
        .into_iter()
        .map(|(id, (ann_score, sources))| {
            let loc = index
                .location(id)
                .ok_or_else(|| Error::Index(format!("vector id {id} has no location")))?;
            Ok(Candidate {
                vector_id: id,
                song: loc.song.clone(),
                offset: loc.offset,
                ann_score,
                sources: sources.into_iter().collect(),
            })
        })
        .collect()
}

fn in_scope(scope: QueryScope, sources: &[usize], qi: usize) -> bool {
    match scope {
        QueryScope::All => true,
        QueryScope::Near(w) => sources.iter().any(|&s| s.abs_diff(qi) <= w),
    }
}

/// Scores candidates against the query segments, drops those below the
/// threshold and ranks songs by summed segment score. Ties go to the higher
/// best segment score, then the lower song id.
pub fn refine_and_rank<S: PairScorer>(
    query: &[NodeMatrix],
    candidates: &[Candidate],
    db: &ReferenceDb,
    scorer: &S,
    config: &RetrievalConfig,
    exec: Exec,
) -> Result<RetrievalResult> {
    let indices: Vec<usize> = (0..query.len()).collect();
    let prepared_q = exec.try_map(&indices, |&i| scorer.prepare_query(i, &query[i]))?;
    let scored = exec.try_map(candidates, |c| {
        let (_, seg) = db
            .segment(c.vector_id)
            .ok_or_else(|| Error::Index(format!("vector id {} not in database", c.vector_id)))?;
        let r = scorer.prepare_reference(c.vector_id, &seg.nodes)?;
        let mut best: Option<(f64, usize)> = None;
        for (qi, q) in prepared_q.iter().enumerate() {
            if !in_scope(config.scope, &c.sources, qi) {
                continue;
            }
            let p = scorer.score(q, &r);
            if best.is_none_or(|(b, _)| p > b) {
                best = Some((p, qi));
            }
        }
        Ok::<_, Error>(best)
    })?;

    let mut by_song: BTreeMap<&str, Vec<SegmentMatch>> = BTreeMap::new();
    for (c, best) in candidates.iter().zip(scored) {
        let Some((score, query_segment)) = best else { continue };
        if score < config.threshold {
            continue;
        }
        by_song.entry(&c.song).or_default().push(SegmentMatch {
            vector_id: c.vector_id,
            offset: c.offset,
            ann_score: c.ann_score,
            score,
            query_segment,
        });
    }
    let mut songs: Vec<SongMatch> = by_song
        .into_iter()
        .map(|(song, mut segments)| {
            segments.sort_by(|a, b| a.offset.total_cmp(&b.offset).then(a.vector_id.cmp(&b.vector_id)));
            SongMatch {
                song: song.to_string(),
                score: segments.iter().map(|s| s.score).sum(),
                max_segment_score: segments.iter().map(|s| s.score).fold(f64::MIN, f64::max),
                segments,
            }
        })
        .collect();
    songs.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.max_segment_score.total_cmp(&a.max_segment_score))
            .then(a.song.cmp(&b.song))
    });
    Ok(RetrievalResult {
        query_segments: query.len(),
        candidates: candidates.len(),
        songs,
    })
}

/// Everything needed to answer queries against a reference collection.
pub struct Retriever<'a, S = Classifier> {
    pub encoder: &'a Encoder,
    pub scorer: &'a S,
    pub index: &'a IvfPqIndex,
    pub db: &'a ReferenceDb,
    pub config: RetrievalConfig,
}

impl<'a, S: PairScorer> Retriever<'a, S> {
    /// Checks that the encoder, database and index belong together.
    pub fn new(
        encoder: &'a Encoder,
        scorer: &'a S,
        index: &'a IvfPqIndex,
        db: &'a ReferenceDb,
        config: RetrievalConfig,
    ) -> Result<Self> {
        config.validate()?;
        let hash = encoder.param_hash();
        if db.encoder_hash != hash {
            return Err(Error::Config(
                "reference database was built with a different encoder".into(),
            ));
        }
        if index.metadata.get("encoder").and_then(|v| v.as_str()) != Some(hash.as_str()) {
            return Err(Error::Config("index was built with a different encoder".into()));
        }
        if index.len() != db.segment_count() {
            return Err(Error::Config(format!(
                "index holds {} vectors but the database has {} segments",
                index.len(),
                db.segment_count()
            )));
        }
        if let Some(nprobe) = config.nprobe {
            if nprobe == 0 || nprobe > index.nlist() {
                return Err(Error::Config(format!(
                    "nprobe {nprobe} outside 1..={}",
                    index.nlist()
                )));
            }
        }
        Ok(Self {
            encoder,
            scorer,
            index,
            db,
            config,
        })
    }

    pub fn query_encoded(&self, query: &[EncodedSegment], exec: Exec) -> Result<RetrievalResult> {
        let nprobe = self.config.nprobe.unwrap_or(self.index.config().nprobe);
        let candidates = retrieve_candidates(
            query,
            self.index,
            self.config.topk_per_segment,
            nprobe,
            exec,
        )?;
        let nodes: Vec<NodeMatrix> = query.iter().map(|q| q.nodes.clone()).collect();
        refine_and_rank(&nodes, &candidates, self.db, self.scorer, &self.config, exec)
    }

    pub fn query(&self, audio: &Waveform, exec: Exec) -> Result<RetrievalResult> {
        let encoded = encode_audio(audio, self.encoder, &self.db.mel, exec)?;
        self.query_encoded(&encoded, exec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelConfig;
    use crate::encoder::{EncoderConfig, Fingerprint};
    use crate::index::IvfPqConfig;
    use ndarray::Array2;

    fn nodes() -> NodeMatrix {
        NodeMatrix(Array2::zeros((2, 4)))
    }

    fn seg(offset: f64, fp: Vec<f32>) -> EncodedSegment {
        EncodedSegment {
            offset,
            fingerprint: Fingerprint(fp),
            nodes: nodes(),
        }
    }

    fn unit(i: usize, dim: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i % dim] = 1.0;
        v
    }

    /// A database of songs whose segments carry basis-vector fingerprints.
    fn toy_db(songs: &[(&str, usize)]) -> ReferenceDb {
        let mut db = ReferenceDb::new("h", MelConfig::default());
        let mut k = 0;
        for &(id, n) in songs {
            let segs = (0..n)
                .map(|i| {
                    k += 1;
                    seg(i as f64 * 0.5, unit(k - 1, 8))
                })
                .collect();
            db.add_song(id, None, segs).unwrap();
        }
        db
    }

    fn candidate(id: u64, song: &str) -> Candidate {
        Candidate {
            vector_id: id,
            song: song.into(),
            offset: 0.5 * id as f64,
            ann_score: 1.0,
            sources: vec![0],
        }
    }

    #[test]
    fn many_moderate_segments_beat_one_strong_segment() {
        let db = toy_db(&[("a", 1), ("b", 2)]);
        let scorer = FnScorer(|_, id| [0.9, 0.6, 0.6][id as usize]);
        let cands = vec![candidate(0, "a"), candidate(1, "b"), candidate(2, "b")];
        let res = refine_and_rank(&[nodes()], &cands, &db, &scorer, &RetrievalConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(res.ranked_ids(), vec!["b", "a"]);
        assert!((res.songs[0].score - 1.2).abs() < 1e-12);
    }

    #[test]
    fn segments_below_threshold_are_rejected() {
        let db = toy_db(&[("a", 1), ("b", 1)]);
        let scorer = FnScorer(|_, id| if id == 0 { 0.49 } else { 0.5 });
        let cands = vec![candidate(0, "a"), candidate(1, "b")];
        let res = refine_and_rank(&[nodes()], &cands, &db, &scorer, &RetrievalConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(res.ranked_ids(), vec!["b"]);
        let empty = refine_and_rank(&[nodes()], &[], &db, &scorer, &RetrievalConfig::default(), Exec::Sequential).unwrap();
        assert!(empty.songs.is_empty());
    }

    #[test]
    fn candidate_takes_best_query_segment() {
        let db = toy_db(&[("a", 1)]);
        let scorer = FnScorer(|q, _| [0.2, 0.8][q]);
        let res = refine_and_rank(&[nodes(), nodes()], &[candidate(0, "a")], &db, &scorer, &RetrievalConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(res.songs[0].segments[0].score, 0.8);
        assert_eq!(res.songs[0].segments[0].query_segment, 1);

        // Restricting to the producing segment (index 0) sees only 0.2.
        let producing = RetrievalConfig { scope: QueryScope::Near(0), ..RetrievalConfig::default() };
        let res = refine_and_rank(&[nodes(), nodes()], &[candidate(0, "a")], &db, &scorer, &producing, Exec::Sequential).unwrap();
        assert!(res.songs.is_empty());
    }

    #[test]
    fn equal_totals_fall_back_to_best_segment_then_id() {
        let db = toy_db(&[("a", 2), ("b", 1), ("c", 1)]);
        let scorer = FnScorer(|_, id| [0.6, 0.6, 0.9, 0.9][id as usize]);
        let cands = vec![candidate(0, "a"), candidate(1, "a"), candidate(2, "b"), candidate(3, "c")];
        let res = refine_and_rank(&[nodes()], &cands, &db, &scorer, &RetrievalConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(res.ranked_ids(), vec!["a", "b", "c"]);
        let tie = FnScorer(|_, id| [0.5, 0.7, 1.2, 0.9][id as usize]);
        let res = refine_and_rank(&[nodes()], &cands, &db, &tie, &RetrievalConfig::default(), Exec::Sequential).unwrap();
        // a = 1.2 (best 0.7), b = 1.2 (best 1.2): b wins on its best segment
        assert_eq!(res.ranked_ids()[..2], ["b", "a"]);
    }

    fn toy_index(db: &ReferenceDb) -> IvfPqIndex {
        let cfg = IvfPqConfig { nlist: Some(1), m: 8, nbits: 1, nprobe: 1, ..IvfPqConfig::default() };
        db.build_index(&cfg, Exec::Sequential).unwrap()
    }

    #[test]
    fn candidates_are_merged_across_query_segments() {
        let db = toy_db(&[("a", 4), ("b", 4)]);
        let index = toy_index(&db);
        let query = vec![seg(0.0, unit(5, 8)), seg(0.5, unit(5, 8)), seg(1.0, unit(2, 8))];
        let cands = retrieve_candidates(&query, &index, 1, 1, Exec::Sequential).unwrap();
        let ids: Vec<u64> = cands.iter().map(|c| c.vector_id).collect();
        assert_eq!(ids, vec![2, 5]);
        assert_eq!(cands[1].sources, vec![0, 1]);
        assert_eq!(cands[1].song, "b");
        assert!(cands.len() <= query.len());
    }

    #[test]
    fn perfect_scorer_ranks_the_source_first() {
        let db = toy_db(&[("a", 4), ("b", 4)]);
        let index = toy_index(&db);
        let query: Vec<EncodedSegment> = (4..8).map(|k| seg(0.0, unit(k, 8))).collect();
        let cands = retrieve_candidates(&query, &index, 3, 1, Exec::Parallel).unwrap();
        let truth = |q: usize, id: u64| if id == q as u64 + 4 { 1.0 } else { 0.0 };
        let nodes: Vec<NodeMatrix> = query.iter().map(|q| q.nodes.clone()).collect();
        let res = refine_and_rank(&nodes, &cands, &db, &FnScorer(truth), &RetrievalConfig::default(), Exec::Parallel).unwrap();
        assert_eq!(res.ranked_ids(), vec!["b"]);
        assert_eq!(res.songs[0].segments.len(), 4);
    }

    #[test]
    fn retriever_rejects_mismatched_artifacts() {
        let enc = Encoder::init(EncoderConfig::tiny(), 0).unwrap();
        let clf = Classifier::init(Default::default(), 16, 0).unwrap();
        let db = toy_db(&[("a", 4), ("b", 4)]);
        let index = toy_index(&db);
        assert!(matches!(
            Retriever::new(&enc, &clf, &index, &db, RetrievalConfig::default()),
            Err(Error::Config(_))
        ));
        let empty = ReferenceDb::new("h", MelConfig::default());
        assert!(empty.build_index(&IvfPqConfig::default(), Exec::Sequential).is_err());
    }
}
