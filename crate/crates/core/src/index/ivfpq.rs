use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::kmeans::{argmin_rows, kmeans, sq_distances};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::weights::{open, seal};

pub const INDEX_MAGIC: &[u8; 8] = b"ASIDIVFP";

/// Build and query parameters. `nlist = None` picks [`auto_nlist`] from the
/// training sample size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvfPqConfig {
    pub nlist: Option<usize>,
    /// Number of subquantizers; must divide the vector dimension.
    pub m: usize,
    /// Bits per sub-code, 1 to 8. Each code is stored in one byte.
    pub nbits: u32,
    pub nprobe: usize,
    /// Keep raw vectors next to the codes (needed for re-ranking and for
    /// [`IvfPqIndex::exact_search`]).
    pub keep_raw: bool,
    /// Number of best approximate candidates re-scored exactly; 0 disables.
    pub rerank_depth: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IvfPqConfig {
    fn default() -> Self {
        Self {
            nlist: None,
            m: 16,
            nbits: 8,
            nprobe: 8,
            keep_raw: true,
            rerank_depth: 100,
            kmeans_iters: 25,
            seed: 0,
        }
    }
}

impl IvfPqConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.m == 0 || !dim.is_multiple_of(self.m) {
            return Err(Error::Config(format!(
                "vector dimension {dim} is not divisible by m = {}",
                self.m
            )));
        }
        if !(1..=8).contains(&self.nbits) {
            return Err(Error::Config(format!("nbits must be in 1..=8, got {}", self.nbits)));
        }
        if self.nlist == Some(0) || self.nprobe == 0 {
            return Err(Error::Config("nlist and nprobe must be positive".into()));
        }
        if let Some(nlist) = self.nlist {
            if self.nprobe > nlist {
                return Err(Error::Config(format!(
                    "nprobe {} exceeds nlist {nlist}",
                    self.nprobe
                )));
            }
        }
        if self.rerank_depth > 0 && !self.keep_raw {
            return Err(Error::Config("re-ranking needs keep_raw = true".into()));
        }
        Ok(())
    }

    fn codebook_size(&self) -> usize {
        1 << self.nbits
    }
}

/// `⌈√n⌉` rounded to the nearest power of two (ties upward), capped so
/// that every list gets at least four training vectors.
pub fn auto_nlist(n: usize) -> usize {
    let root = (n as f64).sqrt().ceil().max(1.0) as usize;
    let upper = root.next_power_of_two();
    let lower = (upper / 2).max(1);
    let mut nlist = if root - lower < upper - root { lower } else { upper };
    while nlist > 1 && nlist * 4 > n {
        nlist /= 2;
    }
    nlist
}

/// Where an indexed vector came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub song: String,
    /// Segment start within the song, in seconds.
    pub offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub score: f32,
}

/// Descending score, ties to the lower id.
fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

fn top_hits(mut hits: Vec<Hit>, topk: usize) -> Vec<Hit> {
    if hits.len() > topk {
        hits.select_nth_unstable_by(topk - 1, rank_order);
        hits.truncate(topk);
    }
    hits.sort_unstable_by(rank_order);
    hits
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Brute-force inner-product ranking over `(id, vector)` pairs.
pub fn exact_search<'a>(
    store: impl IntoIterator<Item = (u64, &'a [f32])>,
    query: &[f32],
    topk: usize,
) -> Vec<Hit> {
    if topk == 0 {
        return Vec::new();
    }
    let hits = store
        .into_iter()
        .map(|(id, v)| Hit {
            id,
            score: dot(v, query),
        })
        .collect();
    top_hits(hits, topk)
}

#[derive(Clone, Debug, Default, PartialEq)]
struct InvList {
    ids: Vec<u64>,
    /// `ids.len() × m` sub-codes, row-major.
    codes: Vec<u8>,
    /// `ids.len() × dim` raw vectors when kept.
    raw: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IvfPqIndex {
    config: IvfPqConfig,
    dim: usize,
    nlist: usize,
    centroids: Array2<f32>,
    /// One `2^nbits × dim/m` codebook per subspace.
    codebooks: Vec<Array2<f32>>,
    lists: Vec<InvList>,
    lookup: BTreeMap<u64, Location>,
    positions: HashMap<u64, (usize, usize)>,
    /// Free-form provenance, e.g. the hash of the encoder that produced
    /// the vectors.
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    dim: usize,
    nlist: usize,
    config: IvfPqConfig,
    count: usize,
    list_sizes: Vec<usize>,
    metadata: serde_json::Value,
    lookup: Vec<(u64, Location)>,
}

impl IvfPqIndex {
    /// Learns coarse centroids and residual codebooks from `sample` (one
    /// vector per row). The returned index is empty.
    pub fn train(sample: ArrayView2<f32>, config: &IvfPqConfig, exec: Exec) -> Result<Self> {
        let (n, dim) = sample.dim();
        let mut config = config.clone();
        config.validate(dim)?;
        let nlist = config.nlist.unwrap_or_else(|| auto_nlist(n));
        config.nprobe = config.nprobe.min(nlist);
        let ksub = config.codebook_size();
        let required = nlist.max(ksub) * 4;
        if n < required {
            return Err(Error::Index(format!(
                "insufficient training vectors: have {n}, need at least {required} \
                 (nlist = {nlist}, 2^nbits = {ksub}); lower nbits or nlist"
            )));
        }
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }

        let centroids = kmeans(sample, nlist, config.kmeans_iters, config.seed);
        let assign = argmin_rows(&sq_distances(sample, centroids.view()));
        let mut residuals = sample.to_owned();
        for (mut row, &a) in residuals.rows_mut().into_iter().zip(&assign) {
            row -= &centroids.row(a);
        }
        let dsub = dim / config.m;
        let subspaces: Vec<usize> = (0..config.m).collect();
        let codebooks = exec.map(&subspaces, |&s| {
            let block = residuals.slice(s![.., s * dsub..(s + 1) * dsub]);
            let seed = config.seed.wrapping_add(1 + s as u64);
            kmeans(block, ksub, config.kmeans_iters, seed)
        });

        Ok(Self {
            lists: vec![InvList::default(); nlist],
            config,
            dim,
            nlist,
            centroids,
            codebooks,
            lookup: BTreeMap::new(),
            positions: HashMap::new(),
            metadata: serde_json::Value::Null,
        })
    }

    pub fn config(&self) -> &IvfPqConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nlist(&self) -> usize {
        self.nlist
    }

    pub fn len(&self) -> usize {
        self.lookup.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lookup.is_empty()
    }

    pub fn location(&self, id: u64) -> Option<&Location> {
        self.lookup.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.lookup.keys().copied()
    }

    pub fn centroids(&self) -> ArrayView2<'_, f32> {
        self.centroids.view()
    }

    fn nearest_lists(&self, v: ArrayView1<f32>, count: usize) -> Vec<usize> {
        let mut d: Vec<(f32, usize)> = self
            .centroids
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let diff: f32 = c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                (diff, i)
            })
            .collect();
        d.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(count).map(|(_, i)| i).collect()
    }

    fn encode_residual(&self, residual: &[f32]) -> Vec<u8> {
        let dsub = self.dim / self.config.m;
        residual
            .chunks_exact(dsub)
            .zip(&self.codebooks)
            .map(|(part, book)| {
                let mut best = (f32::INFINITY, 0usize);
                for (j, c) in book.rows().into_iter().enumerate() {
                    let d: f32 = c.iter().zip(part).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                best.1 as u8
            })
            .collect()
    }

    /// Encodes `vector` and appends it to the list of its nearest centroid.
    pub fn add(&mut self, id: u64, vector: &[f32], location: Location) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector has {} components, index expects {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if self.lookup.contains_key(&id) {
            return Err(Error::Duplicate(format!("vector id {id}")));
        }
        let list = self.nearest_lists(ArrayView1::from(vector), 1)[0];
        let residual: Vec<f32> = vector
            .iter()
            .zip(self.centroids.row(list))
            .map(|(v, c)| v - c)
            .collect();
        let code = self.encode_residual(&residual);
        let entry = &mut self.lists[list];
        self.positions.insert(id, (list, entry.ids.len()));
        entry.ids.push(id);
        entry.codes.extend_from_slice(&code);
        if self.config.keep_raw {
            entry.raw.extend_from_slice(vector);
        }
        self.lookup.insert(id, location);
        Ok(())
    }

    /// The stored PQ code of `id`.
    pub fn code(&self, id: u64) -> Option<&[u8]> {
        let &(list, pos) = self.positions.get(&id)?;
        let m = self.config.m;
        Some(&self.lists[list].codes[pos * m..(pos + 1) * m])
    }

    /// Centroid plus decoded residual for `id`.
    pub fn reconstruct(&self, id: u64) -> Option<Vec<f32>> {
        let &(list, _) = self.positions.get(&id)?;
        let mut out = self.centroids.row(list).to_vec();
        let dsub = self.dim / self.config.m;
        for (s, &c) in self.code(id)?.iter().enumerate() {
            let word = self.codebooks[s].row(c as usize);
            for (o, w) in out[s * dsub..(s + 1) * dsub].iter_mut().zip(word) {
                *o += w;
            }
        }
        Some(out)
    }

    /// Raw vector for `id`, when raw vectors are kept.
    pub fn raw(&self, id: u64) -> Option<&[f32]> {
        if !self.config.keep_raw {
            return None;
        }
        let &(list, pos) = self.positions.get(&id)?;
        Some(&self.lists[list].raw[pos * self.dim..(pos + 1) * self.dim])
    }

    /// Ids held in the `nprobe` lists nearest to `query`.
    pub fn scanned_ids(&self, query: &[f32], nprobe: usize) -> Vec<u64> {
        self.nearest_lists(ArrayView1::from(query), nprobe)
            .into_iter()
            .flat_map(|l| self.lists[l].ids.iter().copied())
            .collect()
    }

    fn check_query(&self, query: &[f32], topk: usize, nprobe: usize) -> Result<()> {
        if topk == 0 {
            return Err(Error::InvalidArgument("topk must be at least 1".into()));
        }
        if nprobe == 0 || nprobe > self.nlist {
            return Err(Error::InvalidArgument(format!(
                "nprobe must be in 1..={}, got {nprobe}",
                self.nlist
            )));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!(
                "query has {} components, index expects {}",
                query.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Approximate scores (asymmetric distance computation) for every vector
    /// in the `nprobe` nearest lists, unsorted.
    fn adc_scan(&self, query: &[f32], nprobe: usize) -> Vec<Hit> {
        let m = self.config.m;
        let dsub = self.dim / m;
        let ksub = self.config.codebook_size();
        // lut[s * ksub + j] = <query_s, codeword_j of subspace s>
        let mut lut = vec![0f32; m * ksub];
        for (s, book) in self.codebooks.iter().enumerate() {
            let q = &query[s * dsub..(s + 1) * dsub];
            for (j, word) in book.rows().into_iter().enumerate() {
                lut[s * ksub + j] = word.iter().zip(q).map(|(a, b)| a * b).sum();
            }
        }
        let mut hits = Vec::new();
        for list in self.nearest_lists(ArrayView1::from(query), nprobe) {
            let base = dot(self.centroids.row(list).as_slice().expect("contiguous"), query);
            let entry = &self.lists[list];
            for (id, code) in entry.ids.iter().zip(entry.codes.chunks_exact(m)) {
                let mut score = base;
                for (s, &c) in code.iter().enumerate() {
                    score += lut[s * ksub + c as usize];
                }
                hits.push(Hit { id: *id, score });
            }
        }
        hits
    }

    /// Top `topk` ids by approximate inner product, re-scored exactly over
    /// the configured re-rank depth when raw vectors are kept.
    pub fn search(&self, query: &[f32], topk: usize, nprobe: usize) -> Result<Vec<Hit>> {
        self.search_with(query, topk, nprobe, self.config.rerank_depth)
    }

    /// As [`search`](Self::search) with an explicit re-rank depth
    /// (0 returns the raw ADC ranking).
    pub fn search_with(
        &self,
        query: &[f32],
        topk: usize,
        nprobe: usize,
        rerank_depth: usize,
    ) -> Result<Vec<Hit>> {
        self.check_query(query, topk, nprobe)?;
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let hits = self.adc_scan(query, nprobe);
        if rerank_depth == 0 || !self.config.keep_raw {
            return Ok(top_hits(hits, topk));
        }
        let shortlist = top_hits(hits, rerank_depth.max(topk));
        let rescored = shortlist
            .into_iter()
            .map(|h| Hit {
                id: h.id,
                score: dot(self.raw(h.id).expect("raw kept"), query),
            })
            .collect();
        Ok(top_hits(rescored, topk))
    }

    /// [`search`](Self::search) over the rows of `queries`.
    pub fn search_batch(
        &self,
        queries: ArrayView2<f32>,
        topk: usize,
        nprobe: usize,
        exec: Exec,
    ) -> Result<Vec<Vec<Hit>>> {
        let rows: Vec<Vec<f32>> = queries.rows().into_iter().map(|r| r.to_vec()).collect();
        exec.try_map(&rows, |q| self.search(q, topk, nprobe))
    }

    /// Brute-force ranking over the kept raw vectors.
    pub fn exact_search(&self, query: &[f32], topk: usize) -> Result<Vec<Hit>> {
        if !self.config.keep_raw {
            return Err(Error::Index("exact search needs raw vectors (keep_raw)".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!(
                "query has {} components, index expects {}",
                query.len(),
                self.dim
            )));
        }
        let store = self.lists.iter().flat_map(|l| {
            l.ids
                .iter()
                .copied()
                .zip(l.raw.chunks_exact(self.dim))
        });
        Ok(exact_search(store, query, topk))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = FileHeader {
            dim: self.dim,
            nlist: self.nlist,
            config: self.config.clone(),
            count: self.len(),
            list_sizes: self.lists.iter().map(|l| l.ids.len()).collect(),
            metadata: self.metadata.clone(),
            lookup: self.lookup.iter().map(|(&k, v)| (k, v.clone())).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut data = Vec::new();
        let floats = |data: &mut Vec<u8>, xs: &mut dyn Iterator<Item = &f32>| {
            for x in xs {
                data.extend_from_slice(&x.to_le_bytes());
            }
        };
        floats(&mut data, &mut self.centroids.iter());
        for book in &self.codebooks {
            floats(&mut data, &mut book.iter());
        }
        for list in &self.lists {
            for id in &list.ids {
                data.extend_from_slice(&id.to_le_bytes());
            }
            data.extend_from_slice(&list.codes);
            floats(&mut data, &mut list.raw.iter());
        }
        seal(INDEX_MAGIC, &header, &data)
    }

    /// Parses an index; `expected_dim` rejects indexes built for another
    /// fingerprint size.
    pub fn from_bytes(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self> {
        let (header, data) = open(bytes, INDEX_MAGIC)?;
        let h: FileHeader = serde_json::from_slice(header)?;
        if let Some(dim) = expected_dim {
            if dim != h.dim {
                return Err(Error::Config(format!(
                    "index holds {}-d vectors but {dim}-d fingerprints were expected",
                    h.dim
                )));
            }
        }
        h.config.validate(h.dim)?;
        if h.list_sizes.len() != h.nlist || h.list_sizes.iter().sum::<usize>() != h.count {
            return Err(Error::Format("inconsistent list sizes".into()));
        }
        let m = h.config.m;
        let dsub = h.dim / m;
        let ksub = h.config.codebook_size();
        let mut cur = Cursor { data, pos: 0 };
        let centroids = Array2::from_shape_vec((h.nlist, h.dim), cur.f32s(h.nlist * h.dim)?)
            .expect("sized");
        let mut codebooks = Vec::with_capacity(m);
        for _ in 0..m {
            codebooks.push(Array2::from_shape_vec((ksub, dsub), cur.f32s(ksub * dsub)?).expect("sized"));
        }
        let mut lists = Vec::with_capacity(h.nlist);
        let mut positions = HashMap::with_capacity(h.count);
        for (l, &n) in h.list_sizes.iter().enumerate() {
            let ids = cur.u64s(n)?;
            let codes = cur.bytes(n * m)?.to_vec();
            if codes.iter().any(|&c| c as usize >= ksub) {
                return Err(Error::Format("sub-code out of range".into()));
            }
            let raw = if h.config.keep_raw { cur.f32s(n * h.dim)? } else { Vec::new() };
            for (pos, &id) in ids.iter().enumerate() {
                if positions.insert(id, (l, pos)).is_some() {
                    return Err(Error::Format(format!("vector id {id} stored twice")));
                }
            }
            lists.push(InvList { ids, codes, raw });
        }
        if cur.pos != data.len() {
            return Err(Error::Format("trailing bytes after inverted lists".into()));
        }
        let lookup: BTreeMap<u64, Location> = h.lookup.into_iter().collect();
        if lookup.len() != positions.len() || positions.keys().any(|id| !lookup.contains_key(id)) {
            return Err(Error::Format("lookup table does not cover the stored ids".into()));
        }
        Ok(Self {
            config: h.config,
            dim: h.dim,
            nlist: h.nlist,
            centroids,
            codebooks,
            lists,
            lookup,
            positions,
            metadata: h.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected_dim)
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Format("index data truncated".into()))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .bytes(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        Ok(self
            .bytes(n * 8)?
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
}
