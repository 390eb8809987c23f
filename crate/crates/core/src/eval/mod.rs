//! Evaluation: mAP over annotated query songs, top-N hit rates on cropped
//! queries, and mAP by sample type and time-stretch class.
//!
//! Relevance is song-level. A query's relevant set is every reference id it
//! is annotated against. Hit rates are computed per occurrence. Each
//! occurrence long enough for a crop length yields one crop starting at the
//! occurrence's query start.

mod annotations;
pub mod metrics;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

pub use annotations::{
    parse_annotations, read_annotations, write_annotations, AnnotationRecord, Occurrence,
    SampleType, HEADER,
};
pub use metrics::{average_precision, hit_at, mean_average_precision};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::retrieval::{PairScorer, Retriever};

pub const DEFAULT_LENGTHS: [f64; 5] = [5.0, 7.0, 10.0, 15.0, 20.0];
pub const DEFAULT_TOP_NS: [usize; 3] = [1, 3, 10];
/// Strata with fewer relationships report a count only.
pub const MIN_STRATUM: usize = 3;

/// Anything that turns query audio into a ranked list of reference ids.
pub trait RankSongs: Sync {
    fn rank(&self, audio: &Waveform) -> Result<Vec<String>>;
}

impl<S: PairScorer> RankSongs for Retriever<'_, S> {
    fn rank(&self, audio: &Waveform) -> Result<Vec<String>> {
        // Crops are ranked one at a time from a parallel loop, so the inner
        // pipeline stays sequential.
        let result = self.query(audio, Exec::Sequential)?;
        Ok(result.songs.into_iter().map(|s| s.song).collect())
    }
}

/// Query id to its annotated reference ids.
pub fn relevance(annotations: &[AnnotationRecord]) -> BTreeMap<String, HashSet<String>> {
    let mut out: BTreeMap<String, HashSet<String>> = BTreeMap::new();
    for r in annotations {
        out.entry(r.query_id.clone())
            .or_default()
            .insert(r.reference_id.clone());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryAp {
    pub query: String,
    pub ap: f64,
    pub relevant: Vec<String>,
}

/// mAP over the annotated queries, restricted to relationships accepted by
/// `keep`. Queries left without relationships are skipped.
fn map_over(
    rankings: &BTreeMap<String, Vec<String>>,
    annotations: &[AnnotationRecord],
    keep: impl Fn(&AnnotationRecord) -> bool,
) -> Result<Option<(f64, Vec<QueryAp>)>> {
    let kept: Vec<AnnotationRecord> = annotations.iter().filter(|r| keep(r)).cloned().collect();
    let rel = relevance(&kept);
    if rel.is_empty() {
        return Ok(None);
    }
    let empty = Vec::new();
    let mut per_query = Vec::with_capacity(rel.len());
    for (query, relevant) in &rel {
        let ranking = rankings.get(query).unwrap_or(&empty);
        let ap = average_precision(ranking, relevant)?;
        let mut relevant: Vec<String> = relevant.iter().cloned().collect();
        relevant.sort();
        per_query.push(QueryAp {
            query: query.clone(),
            ap,
            relevant,
        });
    }
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64;
    Ok(Some((map, per_query)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stratum {
    pub name: String,
    /// Annotated relationships in the stratum.
    pub count: usize,
    /// `None` when the stratum is empty or below [`MIN_STRATUM`].
    pub map: Option<f64>,
}

/// Strata by sample type, then by stretch class (`>5%`, `<5%`).
pub fn stratify(
    rankings: &BTreeMap<String, Vec<String>>,
    annotations: &[AnnotationRecord],
) -> Result<Vec<Stratum>> {
    type Keep = Box<dyn Fn(&AnnotationRecord) -> bool>;
    let mut groups: Vec<(String, Keep)> = SampleType::ALL
        .iter()
        .map(|&t| (t.to_string(), Box::new(move |r: &AnnotationRecord| r.sample_type == t) as Keep))
        .collect();
    groups.push((">5%".into(), Box::new(|r| r.is_stretched())));
    groups.push(("<5%".into(), Box::new(|r| !r.is_stretched())));
    groups
        .into_iter()
        .map(|(name, keep)| {
            let count = annotations.iter().filter(|r| keep(r)).count();
            let map = if count >= MIN_STRATUM {
                map_over(rankings, annotations, keep)?.map(|(m, _)| m)
            } else {
                None
            };
            Ok(Stratum { name, count, map })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HitRateTable {
    pub lengths: Vec<f64>,
    pub top_ns: Vec<usize>,
    /// `rates[length][n]`; `None` when no crop of that length was evaluated.
    pub rates: Vec<Vec<Option<f64>>>,
    pub evaluated: Vec<usize>,
    /// Occurrences shorter than the crop length.
    pub skipped: Vec<usize>,
}

/// Per-occurrence top-N hit rates for every crop length.
pub fn compute_hit_rates<P: RankSongs>(
    pipeline: &P,
    annotations: &[AnnotationRecord],
    audio: &HashMap<String, Waveform>,
    lengths: &[f64],
    top_ns: &[usize],
    exec: Exec,
) -> Result<HitRateTable> {
    if lengths.iter().any(|&l| !(l > 0.0)) || top_ns.contains(&0) {
        return Err(Error::InvalidArgument(
            "crop lengths and N must be positive".into(),
        ));
    }
    let rel = relevance(annotations);
    let max_n = top_ns.iter().copied().max().unwrap_or(0);

    struct Crop<'a> {
        length_idx: usize,
        query: &'a str,
        start: f64,
    }
    let mut crops = Vec::new();
    let mut skipped = vec![0usize; lengths.len()];
    for (li, &length) in lengths.iter().enumerate() {
        for record in annotations {
            for occ in &record.occurrences {
                if occ.query_duration() + 1e-9 < length {
                    skipped[li] += 1;
                    continue;
                }
                crops.push(Crop {
                    length_idx: li,
                    query: &record.query_id,
                    start: occ.query_start,
                });
            }
        }
    }
    for c in &crops {
        if !audio.contains_key(c.query) {
            return Err(Error::InvalidArgument(format!("no audio for query {}", c.query)));
        }
    }

    let hits = exec.try_map(&crops, |c| {
        let clip = audio[c.query].slice_seconds(c.start, lengths[c.length_idx]);
        let ranking = pipeline.rank(&clip)?;
        let relevant = &rel[c.query];
        let ranking: Vec<String> = ranking.into_iter().take(max_n).collect();
        Ok::<_, Error>(top_ns.iter().map(|&n| hit_at(&ranking, relevant, n)).collect::<Vec<bool>>())
    })?;

    let mut counts = vec![vec![0usize; top_ns.len()]; lengths.len()];
    let mut evaluated = vec![0usize; lengths.len()];
    for (c, h) in crops.iter().zip(&hits) {
        evaluated[c.length_idx] += 1;
        for (slot, &hit) in counts[c.length_idx].iter_mut().zip(h) {
            *slot += hit as usize;
        }
    }
    let rates = counts
        .iter()
        .zip(&evaluated)
        .map(|(row, &n)| {
            row.iter()
                .map(|&h| (n > 0).then(|| h as f64 / n as f64))
                .collect()
        })
        .collect();
    Ok(HitRateTable {
        lengths: lengths.to_vec(),
        top_ns: top_ns.to_vec(),
        rates,
        evaluated,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub map: f64,
    pub relationships: usize,
    pub per_query: Vec<QueryAp>,
    pub strata: Vec<Stratum>,
    pub hit_rates: Option<HitRateTable>,
}

/// mAP and strata from whole-query rankings (query id to ranked reference ids).
pub fn evaluate_rankings(
    rankings: &BTreeMap<String, Vec<String>>,
    annotations: &[AnnotationRecord],
) -> Result<EvalReport> {
    let (map, per_query) = map_over(rankings, annotations, |_| true)?
        .ok_or_else(|| Error::InvalidArgument("no annotations to evaluate".into()))?;
    Ok(EvalReport {
        map,
        relationships: annotations.len(),
        per_query,
        strata: stratify(rankings, annotations)?,
        hit_rates: None,
    })
}

impl EvalReport {
    /// Plain-text summary for terminals.
    pub fn table(&self) -> String {
        let mut s = format!(
            "mAP {:.4} over {} queries ({} relationships)\n",
            self.map,
            self.per_query.len(),
            self.relationships
        );
        for st in &self.strata {
            let map = st.map.map_or("-".to_string(), |m| format!("{m:.4}"));
            s.push_str(&format!("  {:<9} n={:<4} mAP {map}\n", st.name, st.count));
        }
        if let Some(h) = &self.hit_rates {
            s.push_str("hit rates");
            for n in &h.top_ns {
                s.push_str(&format!("  top-{n:<3}"));
            }
            s.push_str("  crops\n");
            for (li, len) in h.lengths.iter().enumerate() {
                s.push_str(&format!("  {len:>5.1} s "));
                for r in &h.rates[li] {
                    s.push_str(&r.map_or("     -   ".into(), |r| format!("  {r:.3}  ")));
                }
                s.push_str(&format!("  {} (+{} short)\n", h.evaluated[li], h.skipped[li]));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(q: &str, r: &str, t: SampleType, ratio: f64, spans: &[(f64, f64)]) -> AnnotationRecord {
        AnnotationRecord {
            query_id: q.into(),
            reference_id: r.into(),
            occurrences: spans
                .iter()
                .map(|&(a, b)| Occurrence {
                    query_start: a,
                    query_end: b,
                    reference_start: 0.0,
                    reference_end: b - a,
                })
                .collect(),
            sample_type: t,
            stretch_ratio: ratio,
            query_stems: vec![],
            reference_stems: vec![],
            comment: String::new(),
        }
    }

    fn rankings(pairs: &[(&str, &[&str])]) -> BTreeMap<String, Vec<String>> {
        pairs
            .iter()
            .map(|(q, r)| (q.to_string(), r.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn single_stratum_equals_overall() {
        let ann = vec![
            record("q1", "a", SampleType::Riff, 1.0, &[]),
            record("q2", "b", SampleType::Riff, 1.0, &[]),
            record("q3", "c", SampleType::Riff, 1.0, &[]),
        ];
        let r = rankings(&[("q1", &["a"]), ("q2", &["x", "b"]), ("q3", &["c"])]);
        let report = evaluate_rankings(&r, &ann).unwrap();
        let riff = &report.strata[0];
        assert_eq!(riff.count, 3);
        assert_eq!(riff.map, Some(report.map));
        assert!((report.map - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
        assert_eq!(report.strata[1].map, None);
    }

    #[test]
    fn strata_partition_relationships() {
        let ann = vec![
            record("q1", "a", SampleType::Riff, 1.2, &[]),
            record("q1", "b", SampleType::Beat, 1.01, &[]),
            record("q2", "c", SampleType::OneNote, 0.5, &[]),
            record("q3", "d", SampleType::Beat, 1.05, &[]),
        ];
        let r = rankings(&[("q1", &["b", "a"])]);
        let strata = stratify(&r, &ann).unwrap();
        let counts: Vec<(String, usize)> = strata.iter().map(|s| (s.name.clone(), s.count)).collect();
        assert_eq!(
            counts,
            vec![
                ("riff".into(), 1),
                ("beat".into(), 2),
                ("one-note".into(), 1),
                (">5%".into(), 2),
                ("<5%".into(), 2)
            ]
        );
        assert_eq!(strata[..3].iter().map(|s| s.count).sum::<usize>(), ann.len());
        assert!(strata[2].map.is_none());
    }

    struct Fixed(Vec<String>);

    impl RankSongs for Fixed {
        fn rank(&self, _: &Waveform) -> Result<Vec<String>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn hit_rates_follow_the_stub() {
        let ann = vec![
            record("q1", "a", SampleType::Riff, 1.0, &[(0.0, 12.0), (20.0, 26.0)]),
            record("q2", "b", SampleType::Beat, 1.0, &[(3.0, 30.0)]),
        ];
        let audio: HashMap<String, Waveform> = ["q1", "q2"]
            .iter()
            .map(|q| (q.to_string(), Waveform::silence(16_000 * 40, 16_000)))
            .collect();
        let oracle = Fixed(vec!["a".into(), "b".into()]);
        let t = compute_hit_rates(&oracle, &ann, &audio, &[5.0, 10.0, 20.0], &[1, 3], Exec::Parallel).unwrap();
        assert_eq!(t.evaluated, vec![3, 2, 1]);
        assert_eq!(t.skipped, vec![0, 1, 2]);
        // "a" is first, so q1 hits at N=1 and q2 only at N=3.
        assert_eq!(t.rates[0], vec![Some(2.0 / 3.0), Some(1.0)]);
        assert_eq!(t.rates[2], vec![Some(0.0), Some(1.0)]);

        let noise = Fixed(vec!["noise1".into(), "noise2".into()]);
        let t = compute_hit_rates(&noise, &ann, &audio, &DEFAULT_LENGTHS, &DEFAULT_TOP_NS, Exec::Sequential).unwrap();
        assert!(t.rates.iter().flatten().flatten().all(|&r| r == 0.0));

        let mut missing = audio.clone();
        missing.remove("q2");
        assert!(compute_hit_rates(&oracle, &ann, &missing, &[5.0], &[1], Exec::Sequential).is_err());
    }
}
