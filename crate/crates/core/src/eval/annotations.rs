//! Sample-relationship annotations as CSV.
//!
//! Columns, in order:
//!
//! ```text
//! query_id,reference_id,occurrences,sample_type,stretch_ratio,query_stems,reference_stems,comment
//! ```
//!
//! `occurrences` is a `;`-separated list of `qs-qe:rs-re` spans. Times are
//! seconds (`83.5`) or `m:ss` (`1:23.5`). `sample_type` is `riff`, `beat` or
//! `one-note` (`1-note` is accepted). `stretch_ratio` is query tempo over
//! reference tempo. Stem lists are `+`-separated and may be empty.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 8] = [
    "query_id",
    "reference_id",
    "occurrences",
    "sample_type",
    "stretch_ratio",
    "query_stems",
    "reference_stems",
    "comment",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleType {
    Riff,
    Beat,
    OneNote,
}

impl SampleType {
    pub const ALL: [SampleType; 3] = [SampleType::Riff, SampleType::Beat, SampleType::OneNote];

    pub fn as_str(self) -> &'static str {
        match self {
            SampleType::Riff => "riff",
            SampleType::Beat => "beat",
            SampleType::OneNote => "one-note",
        }
    }
}

impl fmt::Display for SampleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SampleType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "riff" => Ok(SampleType::Riff),
            "beat" => Ok(SampleType::Beat),
            "one-note" | "1-note" | "one_note" => Ok(SampleType::OneNote),
            other => Err(format!("unknown sample type {other:?}")),
        }
    }
}

/// One annotated reuse of reference material inside the query, seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    pub query_start: f64,
    pub query_end: f64,
    pub reference_start: f64,
    pub reference_end: f64,
}

impl Occurrence {
    pub fn query_duration(&self) -> f64 {
        self.query_end - self.query_start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub query_id: String,
    pub reference_id: String,
    pub occurrences: Vec<Occurrence>,
    pub sample_type: SampleType,
    pub stretch_ratio: f64,
    pub query_stems: Vec<String>,
    pub reference_stems: Vec<String>,
    pub comment: String,
}

impl AnnotationRecord {
    /// More than 5 % tempo change between reference and query. A ratio of
    /// exactly 1.05 or 0.95 counts as minimal despite float rounding.
    pub fn is_stretched(&self) -> bool {
        (self.stretch_ratio - 1.0).abs() > 0.05 + 1e-9
    }
}

fn parse_time(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let value = match s.split_once(':') {
        Some((m, rest)) => {
            let minutes: u32 = m.parse().map_err(|_| format!("bad minutes in {s:?}"))?;
            let seconds: f64 = rest.parse().map_err(|_| format!("bad seconds in {s:?}"))?;
            if !(0.0..60.0).contains(&seconds) {
                return Err(format!("seconds out of range in {s:?}"));
            }
            minutes as f64 * 60.0 + seconds
        }
        None => s.parse().map_err(|_| format!("bad time {s:?}"))?,
    };
    if !value.is_finite() || value < 0.0 {
        return Err(format!("bad time {s:?}"));
    }
    Ok(value)
}

fn span(start: f64, end: f64, text: &str) -> std::result::Result<(f64, f64), String> {
    if start >= end {
        return Err(format!("{text:?} does not have start < end"));
    }
    Ok((start, end))
}

/// Parses `qs-qe:rs-re`. Splitting on `-` leaves `qe:rs` in the middle;
/// the separating colon is the middle one, since both times use the same
/// notation (zero colons each for seconds, one each for `m:ss`).
fn parse_occurrence(t: &str) -> std::result::Result<Occurrence, String> {
    let bad = || format!("occurrence {t:?} is not qs-qe:rs-re");
    let parts: Vec<&str> = t.split('-').collect();
    let [qs, middle, re] = parts[..] else {
        return Err(bad());
    };
    let colons: Vec<usize> = middle.match_indices(':').map(|(i, _)| i).collect();
    if colons.len().is_multiple_of(2) {
        return Err(bad());
    }
    let sep = colons[colons.len() / 2];
    let (query_start, query_end) = span(parse_time(qs)?, parse_time(&middle[..sep])?, t)?;
    let (reference_start, reference_end) =
        span(parse_time(&middle[sep + 1..])?, parse_time(re)?, t)?;
    Ok(Occurrence {
        query_start,
        query_end,
        reference_start,
        reference_end,
    })
}

fn parse_occurrences(s: &str) -> std::result::Result<Vec<Occurrence>, String> {
    s.split(';')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(parse_occurrence)
        .collect()
}

fn parse_stems(s: &str) -> Vec<String> {
    s.split('+')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn row_error(line: u64, msg: impl Into<String>) -> Error {
    Error::Annotation {
        line,
        msg: msg.into(),
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    row_error(line, e.to_string())
}

pub fn parse_annotations(reader: impl Read) -> Result<Vec<AnnotationRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let got: Vec<&str> = header.iter().collect();
    if got != HEADER {
        return Err(row_error(
            1,
            format!("expected header {}, found {}", HEADER.join(","), got.join(",")),
        ));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("");
        let err = |msg: String| row_error(line, msg);
        let query_id = field(0).to_string();
        let reference_id = field(1).to_string();
        if query_id.is_empty() || reference_id.is_empty() {
            return Err(err("query_id and reference_id are required".into()));
        }
        let occurrences = parse_occurrences(field(2)).map_err(err)?;
        let sample_type = field(3).parse().map_err(err)?;
        let stretch_ratio: f64 = field(4)
            .parse()
            .map_err(|_| err(format!("bad stretch ratio {:?}", field(4))))?;
        if !(stretch_ratio.is_finite() && stretch_ratio > 0.0) {
            return Err(err(format!("stretch ratio must be positive, got {stretch_ratio}")));
        }
        out.push(AnnotationRecord {
            query_id,
            reference_id,
            occurrences,
            sample_type,
            stretch_ratio,
            query_stems: parse_stems(field(5)),
            reference_stems: parse_stems(field(6)),
            comment: field(7).to_string(),
        });
    }
    Ok(out)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(std::fs::File::open(path)?)
}

/// Writes the normalised form: times in plain seconds, lower-case types.
pub fn write_annotations(writer: impl Write, records: &[AnnotationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(HEADER).map_err(io)?;
    for r in records {
        let occ: Vec<String> = r
            .occurrences
            .iter()
            .map(|o| {
                format!(
                    "{}-{}:{}-{}",
                    o.query_start, o.query_end, o.reference_start, o.reference_end
                )
            })
            .collect();
        w.write_record([
            r.query_id.as_str(),
            r.reference_id.as_str(),
            &occ.join(";"),
            r.sample_type.as_str(),
            &r.stretch_ratio.to_string(),
            &r.query_stems.join("+"),
            &r.reference_stems.join("+"),
            r.comment.as_str(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "\
query_id,reference_id,occurrences,sample_type,stretch_ratio,query_stems,reference_stems,comment
q1,r1,0:05-0:12.5:1:00-1:07.5;30-35:80-85,riff,1.02,vocals+drums,other,\"horn line, looped\"
q1,r9,10-14:3-7,beat,0.8,bass,drums,
q2,r2,1.5-2:40-40.5,1-note,1,,other,stab
";

    #[test]
    fn parses_a_well_formed_file() {
        let recs = parse_annotations(GOOD.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        let first = &recs[0];
        assert_eq!(first.occurrences.len(), 2);
        assert_eq!(
            first.occurrences[0],
            Occurrence {
                query_start: 5.0,
                query_end: 12.5,
                reference_start: 60.0,
                reference_end: 67.5
            }
        );
        assert_eq!(first.occurrences[1].reference_end, 85.0);
        assert_eq!(first.query_stems, vec!["vocals", "drums"]);
        assert_eq!(first.comment, "horn line, looped");
        assert_eq!(recs[1].sample_type, SampleType::Beat);
        assert!(recs[1].is_stretched() && !recs[0].is_stretched());
        assert_eq!(recs[2].sample_type, SampleType::OneNote);
        assert!(recs[2].query_stems.is_empty());
    }

    #[test]
    fn reversed_span_names_its_line() {
        let bad = GOOD.replace("10-14:3-7", "14-10:3-7");
        match parse_annotations(bad.as_bytes()) {
            Err(Error::Annotation { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("start < end"), "{msg}");
            }
            other => panic!("expected annotation error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_fields() {
        for (from, to) in [("riff", "loop"), ("0.8", "-0.8"), ("0.8", "0"), ("10-14:3-7", "10:3")] {
            let bad = GOOD.replacen(from, to, 1);
            assert!(
                matches!(parse_annotations(bad.as_bytes()), Err(Error::Annotation { .. })),
                "{to}"
            );
        }
        let header = GOOD.replacen("comment", "notes", 1);
        assert!(matches!(
            parse_annotations(header.as_bytes()),
            Err(Error::Annotation { line: 1, .. })
        ));
    }

    #[test]
    fn write_then_parse_is_lossless() {
        let recs = parse_annotations(GOOD.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_annotations(&mut buf, &recs).unwrap();
        assert_eq!(parse_annotations(buf.as_slice()).unwrap(), recs);
        // Writing the normalised form again is a fixed point.
        let mut again = Vec::new();
        write_annotations(&mut again, &parse_annotations(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(buf, again);
    }
}
