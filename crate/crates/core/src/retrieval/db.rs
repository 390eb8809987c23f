//! Reference database: per-song segment records holding the fingerprint
//! that goes into the ANN index and the node matrix the classifier needs.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::{mel_spectrogram_at, segment, MelConfig, Waveform};
use crate::encoder::{Encoder, Fingerprint, NodeMatrix};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::index::{IvfPqConfig, IvfPqIndex, Location};
use crate::weights::{open, seal};

pub const DB_MAGIC: &[u8; 8] = b"ASIDREFD";

/// One encoded analysis window.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSegment {
    /// Window start in seconds.
    pub offset: f64,
    pub fingerprint: Fingerprint,
    pub nodes: NodeMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub vector_id: u64,
    pub offset: f64,
    pub fingerprint: Fingerprint,
    pub nodes: NodeMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Song {
    pub id: String,
    pub title: Option<String>,
    pub segments: Vec<Segment>,
}

/// Segments `audio` at the configured hop and encodes every window.
pub fn encode_audio(
    audio: &Waveform,
    encoder: &Encoder,
    mel: &MelConfig,
    exec: Exec,
) -> Result<Vec<EncodedSegment>> {
    if audio.sample_rate != mel.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "audio is at {} Hz, features expect {} Hz",
            audio.sample_rate, mel.sample_rate
        )));
    }
    let windows = segment(audio, mel)?;
    exec.try_map(&windows, |&(offset, samples)| {
        let spec = mel_spectrogram_at(samples, mel, offset)?;
        let (nodes, fingerprint) = encoder.forward(&spec)?;
        Ok(EncodedSegment {
            offset,
            fingerprint,
            nodes,
        })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceDb {
    /// Hash of the encoder that produced every stored segment.
    pub encoder_hash: String,
    pub mel: MelConfig,
    songs: Vec<Song>,
    by_song: HashMap<String, usize>,
    by_vector: HashMap<u64, (usize, usize)>,
    next_id: u64,
}

#[derive(Serialize, Deserialize)]
struct SegmentHeader {
    vector_id: u64,
    offset: f64,
}

#[derive(Serialize, Deserialize)]
struct SongHeader {
    id: String,
    title: Option<String>,
    segments: Vec<SegmentHeader>,
}

#[derive(Serialize, Deserialize)]
struct DbHeader {
    encoder_hash: String,
    mel: MelConfig,
    fp_dim: usize,
    node_shape: [usize; 2],
    next_id: u64,
    songs: Vec<SongHeader>,
}

impl ReferenceDb {
    pub fn new(encoder_hash: impl Into<String>, mel: MelConfig) -> Self {
        Self {
            encoder_hash: encoder_hash.into(),
            mel,
            songs: Vec::new(),
            by_song: HashMap::new(),
            by_vector: HashMap::new(),
            next_id: 0,
        }
    }

    pub fn for_encoder(encoder: &Encoder, mel: MelConfig) -> Self {
        Self::new(encoder.param_hash(), mel)
    }

    pub fn songs(&self) -> &[Song] {
        &self.songs
    }

    pub fn song(&self, id: &str) -> Option<&Song> {
        self.by_song.get(id).map(|&i| &self.songs[i])
    }

    pub fn segment_count(&self) -> usize {
        self.by_vector.len()
    }

    pub fn segment(&self, vector_id: u64) -> Option<(&Song, &Segment)> {
        let &(s, g) = self.by_vector.get(&vector_id)?;
        let song = &self.songs[s];
        Some((song, &song.segments[g]))
    }

    /// Segments in insertion order with their song ids.
    pub fn iter_segments(&self) -> impl Iterator<Item = (&str, &Segment)> {
        self.songs
            .iter()
            .flat_map(|s| s.segments.iter().map(move |g| (s.id.as_str(), g)))
    }

    /// Adds a song from already encoded windows and returns the new vector ids.
    pub fn add_song(
        &mut self,
        id: &str,
        title: Option<String>,
        encoded: Vec<EncodedSegment>,
    ) -> Result<Vec<u64>> {
        if self.by_song.contains_key(id) {
            return Err(Error::Duplicate(format!("song {id}")));
        }
        if encoded.is_empty() {
            return Err(Error::InvalidArgument(format!("song {id} has no segments")));
        }
        if encoded.windows(2).any(|w| w[1].offset <= w[0].offset) {
            return Err(Error::InvalidArgument(format!(
                "segment offsets of song {id} are not increasing"
            )));
        }
        if let Some((_, first)) = self.iter_segments().next() {
            let (fp, nodes) = (first.fingerprint.len(), first.nodes.dim());
            if encoded
                .iter()
                .any(|e| e.fingerprint.len() != fp || e.nodes.dim() != nodes)
            {
                return Err(Error::Shape(format!(
                    "segments of song {id} do not match the database shapes"
                )));
            }
        }
        let song_idx = self.songs.len();
        let mut ids = Vec::with_capacity(encoded.len());
        let segments = encoded
            .into_iter()
            .enumerate()
            .map(|(g, e)| {
                let vector_id = self.next_id;
                self.next_id += 1;
                self.by_vector.insert(vector_id, (song_idx, g));
                ids.push(vector_id);
                Segment {
                    vector_id,
                    offset: e.offset,
                    fingerprint: e.fingerprint,
                    nodes: e.nodes,
                }
            })
            .collect();
        self.by_song.insert(id.to_string(), song_idx);
        self.songs.push(Song {
            id: id.to_string(),
            title,
            segments,
        });
        Ok(ids)
    }

    /// Encodes `audio` and stores it under `id`.
    pub fn ingest(
        &mut self,
        id: &str,
        title: Option<String>,
        audio: &Waveform,
        encoder: &Encoder,
        exec: Exec,
    ) -> Result<Vec<u64>> {
        if encoder.param_hash() != self.encoder_hash {
            return Err(Error::Config(
                "encoder differs from the one this database was built with".into(),
            ));
        }
        if self.by_song.contains_key(id) {
            return Err(Error::Duplicate(format!("song {id}")));
        }
        let encoded = encode_audio(audio, encoder, &self.mel, exec)?;
        self.add_song(id, title, encoded)
    }

    /// Fingerprints as rows, in insertion order, with their ids.
    pub fn fingerprint_matrix(&self) -> (Vec<u64>, Array2<f32>) {
        let dim = self
            .iter_segments()
            .next()
            .map_or(0, |(_, g)| g.fingerprint.len());
        let mut ids = Vec::with_capacity(self.segment_count());
        let mut flat = Vec::with_capacity(self.segment_count() * dim);
        for (_, g) in self.iter_segments() {
            ids.push(g.vector_id);
            flat.extend_from_slice(&g.fingerprint.0);
        }
        let rows = ids.len();
        (ids, Array2::from_shape_vec((rows, dim), flat).expect("uniform widths"))
    }

    /// Trains an index on every stored fingerprint and adds them all.
    pub fn build_index(&self, config: &IvfPqConfig, exec: Exec) -> Result<IvfPqIndex> {
        if self.segment_count() == 0 {
            return Err(Error::Index("reference database is empty".into()));
        }
        let (_, matrix) = self.fingerprint_matrix();
        let mut index = IvfPqIndex::train(matrix.view(), config, exec)?;
        for (song, g) in self.iter_segments() {
            index.add(
                g.vector_id,
                &g.fingerprint.0,
                Location {
                    song: song.to_string(),
                    offset: g.offset,
                },
            )?;
        }
        index.metadata = serde_json::json!({ "encoder": self.encoder_hash });
        Ok(index)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let first = self.iter_segments().next().map(|(_, g)| g);
        let header = DbHeader {
            encoder_hash: self.encoder_hash.clone(),
            mel: self.mel.clone(),
            fp_dim: first.map_or(0, |g| g.fingerprint.len()),
            node_shape: first.map_or([0, 0], |g| {
                let (r, c) = g.nodes.dim();
                [r, c]
            }),
            next_id: self.next_id,
            songs: self
                .songs
                .iter()
                .map(|s| SongHeader {
                    id: s.id.clone(),
                    title: s.title.clone(),
                    segments: s
                        .segments
                        .iter()
                        .map(|g| SegmentHeader {
                            vector_id: g.vector_id,
                            offset: g.offset,
                        })
                        .collect(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut data = Vec::new();
        for (_, g) in self.iter_segments() {
            for v in g.fingerprint.0.iter().chain(g.nodes.0.iter()) {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        seal(DB_MAGIC, &header, &data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, data) = open(bytes, DB_MAGIC)?;
        let h: DbHeader = serde_json::from_slice(header)?;
        let [rows, cols] = h.node_shape;
        let per_segment = (h.fp_dim + rows * cols) * 4;
        let total: usize = h.songs.iter().map(|s| s.segments.len()).sum();
        if data.len() != total * per_segment {
            return Err(Error::Format("segment data size does not match header".into()));
        }
        let mut floats = data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
        let mut db = Self::new(h.encoder_hash, h.mel);
        for song in h.songs {
            let idx = db.songs.len();
            if db.by_song.insert(song.id.clone(), idx).is_some() {
                return Err(Error::Format(format!("song {} stored twice", song.id)));
            }
            let mut segments = Vec::with_capacity(song.segments.len());
            for (g, sh) in song.segments.into_iter().enumerate() {
                let fingerprint = Fingerprint(floats.by_ref().take(h.fp_dim).collect());
                let nodes: Vec<f32> = floats.by_ref().take(rows * cols).collect();
                if db.by_vector.insert(sh.vector_id, (idx, g)).is_some() {
                    return Err(Error::Format(format!("vector id {} stored twice", sh.vector_id)));
                }
                segments.push(Segment {
                    vector_id: sh.vector_id,
                    offset: sh.offset,
                    fingerprint,
                    nodes: NodeMatrix(
                        Array2::from_shape_vec((rows, cols), nodes).expect("sized above"),
                    ),
                });
            }
            db.songs.push(Song {
                id: song.id,
                title: song.title,
                segments,
            });
        }
        db.next_id = h.next_id;
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth;

    fn tone(seconds: f64) -> Waveform {
        let n = (seconds * 16_000.0) as usize;
        Waveform::new(
            (0..n).map(|i| (i as f32 * 0.05).sin() * 0.3).collect(),
            16_000,
        )
    }

    #[test]
    fn ten_seconds_become_thirteen_records() {
        let enc = Encoder::init(EncoderConfig::tiny(), 1).unwrap();
        let mut db = ReferenceDb::for_encoder(&enc, MelConfig::default());
        let ids = db.ingest("a", None, &tone(10.0), &enc, Exec::Sequential).unwrap();
        assert_eq!(ids.len(), 13);
        let offsets: Vec<f64> = db.song("a").unwrap().segments.iter().map(|g| g.offset).collect();
        assert_eq!(offsets[1] - offsets[0], 0.5);
        assert!(matches!(
            db.ingest("a", None, &tone(10.0), &enc, Exec::Sequential),
            Err(Error::Duplicate(_))
        ));
        assert!(matches!(
            db.ingest("b", None, &tone(3.0), &enc, Exec::Sequential),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn database_round_trips_and_indexes() {
        let enc = Encoder::init(EncoderConfig::tiny(), 2).unwrap();
        let mut db = ReferenceDb::for_encoder(&enc, MelConfig::default());
        for (id, stems) in synth::tracks(3, 40, 12.0, 16_000) {
            let w = stems.full_mix();
            db.ingest(&id, Some(format!("title {id}")), &w, &enc, Exec::Parallel).unwrap();
        }
        let back = ReferenceDb::from_bytes(&db.to_bytes()).unwrap();
        assert_eq!(back, db);

        let cfg = IvfPqConfig {
            nlist: Some(2),
            m: 4,
            nbits: 2,
            nprobe: 2,
            ..IvfPqConfig::default()
        };
        let index = db.build_index(&cfg, Exec::Sequential).unwrap();
        assert_eq!(index.len(), db.segment_count());
        for (song, g) in db.iter_segments() {
            assert_eq!(index.location(g.vector_id).unwrap().song, song);
        }
    }
}
