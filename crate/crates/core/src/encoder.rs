//! Graph-neural-network fingerprint encoder.
//!
//! A Mel spectrogram becomes a set of `(time, frequency, amplitude)` points.
//! Rectangular patches of points (optionally overlapping) are flattened and
//! embedded into `N` node vectors. Each block then rebuilds a cosine kNN
//! graph over the current nodes and applies
//!
//! ```text
//! y_i = x_i + relu(W_out · AGG_{j ∈ knn(i)}(W_agg · x_j))     (graph conv)
//! z_i = S·y_i + W_2 · relu(W_1 · y_i + b_1) + b_2              (FFN)
//! ```
//!
//! where `S` is the identity when the block keeps its width and a learned
//! projection when it widens. The final nodes form the node matrix; their
//! mean goes through a two-layer projection head and is L2-normalised into
//! the fingerprint.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::MelSpec;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Reduce, Tape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

impl From<Aggregation> for Reduce {
    fn from(a: Aggregation) -> Self {
        match a {
            Aggregation::Max => Reduce::Max,
            Aggregation::Mean => Reduce::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Input grid; must match the Mel config.
    pub n_mels: usize,
    pub n_frames: usize,
    /// Patch grid. `N = freq_patches * time_patches`.
    pub freq_patches: usize,
    pub time_patches: usize,
    /// Extra cells each patch extends over its stride, per axis.
    pub patch_overlap: usize,
    pub embed_dim: usize,
    /// Output width of each block; the last entry is the node dimension.
    pub block_dims: Vec<usize>,
    pub k: usize,
    pub ffn_mult: usize,
    pub proj_hidden: usize,
    pub fp_dim: usize,
    pub agg: Aggregation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            n_frames: 32,
            freq_patches: 8,
            time_patches: 4,
            patch_overlap: 2,
            embed_dim: 128,
            block_dims: vec![256, 384, 512, 512],
            k: 8,
            ffn_mult: 2,
            proj_hidden: 512,
            fp_dim: 128,
            agg: Aggregation::Max,
        }
    }
}

impl EncoderConfig {
    /// 32 nodes of width 512, 128-d fingerprints.
    pub fn full() -> Self {
        Self::default()
    }

    /// Gradient-check scale: 8 nodes, width 16, two blocks.
    pub fn tiny() -> Self {
        Self {
            freq_patches: 4,
            time_patches: 2,
            patch_overlap: 0,
            embed_dim: 16,
            block_dims: vec![16, 16],
            k: 3,
            proj_hidden: 16,
            fp_dim: 16,
            ..Self::default()
        }
    }

    /// Small model used for the synthetic end-to-end runs.
    pub fn toy() -> Self {
        Self {
            freq_patches: 8,
            time_patches: 4,
            patch_overlap: 2,
            embed_dim: 32,
            block_dims: vec![32, 32],
            k: 4,
            proj_hidden: 64,
            fp_dim: 32,
            ..Self::default()
        }
    }

    pub fn node_count(&self) -> usize {
        self.freq_patches * self.time_patches
    }

    pub fn node_dim(&self) -> usize {
        *self.block_dims.last().unwrap_or(&self.embed_dim)
    }

    pub fn n_blocks(&self) -> usize {
        self.block_dims.len()
    }

    fn patch_extent(&self) -> (usize, usize) {
        (
            self.n_mels / self.freq_patches + self.patch_overlap,
            self.n_frames / self.time_patches + self.patch_overlap,
        )
    }

    /// Points per patch.
    pub fn patch_size(&self) -> usize {
        let (pf, pt) = self.patch_extent();
        pf * pt
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        let dims_ok = [
            self.n_mels,
            self.n_frames,
            self.freq_patches,
            self.time_patches,
            self.embed_dim,
            self.ffn_mult,
            self.proj_hidden,
            self.fp_dim,
        ]
        .iter()
        .all(|&d| d >= 1)
            && self.block_dims.iter().all(|&d| d >= 1);
        if !dims_ok {
            return bad("all dimensions must be >= 1".into());
        }
        if !self.n_mels.is_multiple_of(self.freq_patches) || !self.n_frames.is_multiple_of(self.time_patches) {
            return bad(format!(
                "patch grid {}x{} does not tile the {}x{} input",
                self.freq_patches, self.time_patches, self.n_mels, self.n_frames
            ));
        }
        let (pf, pt) = self.patch_extent();
        if pf > self.n_mels || pt > self.n_frames {
            return bad("patch overlap makes patches larger than the input".into());
        }
        if self.k == 0 || self.k >= self.node_count() {
            return bad(format!(
                "k = {} must be in 1..{} (node count)",
                self.k,
                self.node_count()
            ));
        }
        Ok(())
    }
}

/// `3 x (F*T)` matrix of points. Column `f * T + t` holds the normalised
/// time index, normalised frequency index and amplitude of cell `(f, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Array2<f64>,
    pub n_mels: usize,
    pub n_frames: usize,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }
}

pub fn to_points(spec: &MelSpec) -> PointSet {
    let (f_n, t_n) = spec.values.dim();
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut points = Array2::zeros((3, f_n * t_n));
    for f in 0..f_n {
        for t in 0..t_n {
            let c = f * t_n + t;
            points[[0, c]] = norm(t, t_n);
            points[[1, c]] = norm(f, f_n);
            points[[2, c]] = spec.values[[f, t]] as f64;
        }
    }
    PointSet {
        points,
        n_mels: f_n,
        n_frames: t_n,
    }
}

/// Point columns belonging to each patch, patches ordered frequency-major.
pub fn patch_layout(cfg: &EncoderConfig) -> Vec<Vec<usize>> {
    let (pf, pt) = cfg.patch_extent();
    let sf = cfg.n_mels / cfg.freq_patches;
    let st = cfg.n_frames / cfg.time_patches;
    let start = |i: usize, stride: usize, extent: usize, total: usize| {
        (i * stride)
            .saturating_sub(cfg.patch_overlap / 2)
            .min(total - extent)
    };
    let mut out = Vec::with_capacity(cfg.node_count());
    for a in 0..cfg.freq_patches {
        let f0 = start(a, sf, pf, cfg.n_mels);
        for b in 0..cfg.time_patches {
            let t0 = start(b, st, pt, cfg.n_frames);
            let mut cells = Vec::with_capacity(pf * pt);
            for f in f0..f0 + pf {
                for t in t0..t0 + pt {
                    cells.push(f * cfg.n_frames + t);
                }
            }
            out.push(cells);
        }
    }
    out
}

/// `N x 3p` matrix; row `n` is patch `n` flattened channel-major
/// (all time coordinates, then all frequency coordinates, then amplitudes).
pub fn patch_matrix(pts: &PointSet, cfg: &EncoderConfig) -> Result<Array2<f64>> {
    if pts.n_mels != cfg.n_mels || pts.n_frames != cfg.n_frames {
        return Err(Error::Shape(format!(
            "point grid {}x{} does not match encoder input {}x{}",
            pts.n_mels, pts.n_frames, cfg.n_mels, cfg.n_frames
        )));
    }
    let layout = patch_layout(cfg);
    let p = cfg.patch_size();
    let mut m = Array2::zeros((layout.len(), 3 * p));
    for (n, cells) in layout.iter().enumerate() {
        for ch in 0..3 {
            for (i, &c) in cells.iter().enumerate() {
                m[[n, ch * p + i]] = pts.points[[ch, c]];
            }
        }
    }
    Ok(m)
}

/// Directed kNN graph: row `i` lists the `k` other nodes most cosine-similar
/// to node `i`, most similar first, ties to the lower index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    pub neighbours: Arc<Vec<Vec<usize>>>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.neighbours.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.neighbours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbours.is_empty()
    }

    /// No self loops and `k` distinct in-range neighbours per row.
    pub fn is_valid(&self, k: usize) -> bool {
        let n = self.len();
        self.neighbours.iter().enumerate().all(|(i, row)| {
            let mut seen = row.clone();
            seen.sort_unstable();
            seen.dedup();
            row.len() == k && seen.len() == k && row.iter().all(|&j| j != i && j < n)
        })
    }
}

pub fn build_knn_graph(nodes: &Array2<f64>, k: usize) -> Result<KnnGraph> {
    let n = nodes.nrows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..{n} (node count)"
        )));
    }
    let mut unit = nodes.clone();
    for mut row in unit.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row /= norm;
    }
    let sim = unit.dot(&unit.t());
    let neighbours = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| sim[[i, b]].total_cmp(&sim[[i, a]]).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect();
    Ok(KnnGraph {
        neighbours: Arc::new(neighbours),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub agg_w: T,
    pub out_w: T,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
    /// Present only when the block changes width.
    pub shortcut: Option<T>,
}

/// Encoder weights, generic over storage so the same structure can hold
/// values, tape handles or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Array2<f64>> {
    pub patch: Linear<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub proj1: Linear<T>,
    pub proj2: Linear<T>,
}

fn map_linear<T, U>(p: &str, l: &Linear<T>, f: &mut impl FnMut(&str, &T) -> U) -> Linear<U> {
    Linear {
        w: f(&format!("{p}.w"), &l.w),
        b: f(&format!("{p}.b"), &l.b),
    }
}

impl<T> EncoderParams<T> {
    /// Structural map; `f` sees every tensor in canonical order with its
    /// container name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> EncoderParams<U> {
        let patch = map_linear("encoder.patch", &self.patch, &mut f);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| BlockParams {
                agg_w: f(&format!("encoder.block{i}.agg_w"), &b.agg_w),
                out_w: f(&format!("encoder.block{i}.out_w"), &b.out_w),
                ffn1: map_linear(&format!("encoder.block{i}.ffn1"), &b.ffn1, &mut f),
                ffn2: map_linear(&format!("encoder.block{i}.ffn2"), &b.ffn2, &mut f),
                shortcut: b
                    .shortcut
                    .as_ref()
                    .map(|s| f(&format!("encoder.block{i}.shortcut"), s)),
            })
            .collect();
        let proj1 = map_linear("encoder.proj1", &self.proj1, &mut f);
        let proj2 = map_linear("encoder.proj2", &self.proj2, &mut f);
        EncoderParams {
            patch,
            blocks,
            proj1,
            proj2,
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        self.map(|n, t| f(n, t));
    }

    /// Tensors in canonical order.
    pub fn iter(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.for_each_ref(&mut out);
        out
    }

    fn for_each_ref<'a>(&'a self, out: &mut Vec<&'a T>) {
        out.push(&self.patch.w);
        out.push(&self.patch.b);
        for b in &self.blocks {
            out.push(&b.agg_w);
            out.push(&b.out_w);
            out.extend([&b.ffn1.w, &b.ffn1.b, &b.ffn2.w, &b.ffn2.b]);
            if let Some(s) = &b.shortcut {
                out.push(s);
            }
        }
        out.extend([&self.proj1.w, &self.proj1.b, &self.proj2.w, &self.proj2.b]);
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![&mut self.patch.w, &mut self.patch.b];
        for b in &mut self.blocks {
            out.push(&mut b.agg_w);
            out.push(&mut b.out_w);
            out.extend([&mut b.ffn1.w, &mut b.ffn1.b, &mut b.ffn2.w, &mut b.ffn2.b]);
            if let Some(s) = &mut b.shortcut {
                out.push(s);
            }
        }
        out.extend([
            &mut self.proj1.w,
            &mut self.proj1.b,
            &mut self.proj2.w,
            &mut self.proj2.b,
        ]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    /// `N(0, 2 / fan_in)`, for layers feeding a ReLU.
    He,
    /// `N(0, 1 / fan_in)`.
    Lecun,
}

impl EncoderParams<(usize, usize)> {
    /// Tensor shapes implied by a config.
    pub fn shapes(cfg: &EncoderConfig) -> Self {
        let lin = |i: usize, o: usize| Linear {
            w: (i, o),
            b: (1, o),
        };
        let mut blocks = Vec::with_capacity(cfg.n_blocks());
        let mut width = cfg.embed_dim;
        for &out in &cfg.block_dims {
            let hidden = cfg.ffn_mult * out;
            blocks.push(BlockParams {
                agg_w: (width, width),
                out_w: (width, width),
                ffn1: lin(width, hidden),
                ffn2: lin(hidden, out),
                shortcut: (width != out).then_some((width, out)),
            });
            width = out;
        }
        EncoderParams {
            patch: lin(3 * cfg.patch_size(), cfg.embed_dim),
            blocks,
            proj1: lin(width, cfg.proj_hidden),
            proj2: lin(cfg.proj_hidden, cfg.fp_dim),
        }
    }
}

impl EncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        EncoderParams::shapes(cfg).map(|_, &s| Array2::zeros(s))
    }

    /// Seeded random initialisation.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderParams::shapes(cfg).map(|name, &(rows, cols)| {
            let init = if name.ends_with(".b") {
                Init::Zero
            } else if name.ends_with("patch.w")
                || name.ends_with("ffn1.w")
                || name.ends_with("proj1.w")
                || name.ends_with("agg_w")
            {
                Init::He
            } else {
                Init::Lecun
            };
            random_matrix(&mut rng, rows, cols, init)
        })
    }

    /// Rebuilds parameters from tensors in canonical order.
    pub fn from_tensors(cfg: &EncoderConfig, tensors: Vec<Array2<f64>>) -> Result<Self> {
        let n = tensors.len();
        let mut it = tensors.into_iter();
        let slots = EncoderParams::shapes(cfg).map(|_, _| it.next());
        let mut missing = false;
        let params = slots.map(|_, t| match t {
            Some(t) => t.clone(),
            None => {
                missing = true;
                Array2::zeros((0, 0))
            }
        });
        if missing || it.next().is_some() {
            return Err(Error::Shape(format!(
                "{n} tensors do not match the encoder layout"
            )));
        }
        params.check_shapes(cfg)?;
        Ok(params)
    }

    pub fn count(&self) -> usize {
        self.iter().iter().map(|a| a.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> EncoderParams<NodeId> {
        self.map(|_, a| tape.leaf(a.clone()))
    }

    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let expected = EncoderParams::shapes(cfg);
        let (mut want, mut got) = (Vec::new(), Vec::new());
        expected.for_each(|n, &s| want.push((n.to_string(), s)));
        self.for_each(|n, a| got.push((n.to_string(), a.dim())));
        if want != got {
            return Err(Error::Shape(format!(
                "encoder parameters do not match config: expected {want:?}, found {got:?}"
            )));
        }
        Ok(())
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, init: Init) -> Array2<f64> {
    let std = match init {
        Init::Zero => return Array2::zeros((rows, cols)),
        Init::He => (2.0 / rows as f64).sqrt(),
        Init::Lecun => (1.0 / rows as f64).sqrt(),
    };
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// `N x d_n` node embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeMatrix(pub Array2<f32>);

impl NodeMatrix {
    pub fn to_f64(&self) -> Array2<f64> {
        self.0.mapv(|v| v as f64)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Unit-norm segment embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Fingerprint(pub Vec<f32>);

impl Fingerprint {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Fingerprint) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Node handles of one recorded forward pass.
pub struct ForwardTrace {
    pub embeddings: NodeId,
    pub nodes: NodeId,
    pub fingerprint: NodeId,
    /// Graph used by each block.
    pub graphs: Vec<KnnGraph>,
}

pub fn graph_conv_tape(
    tape: &mut Tape,
    x: NodeId,
    graph: &KnnGraph,
    agg_w: NodeId,
    out_w: NodeId,
    agg: Aggregation,
) -> NodeId {
    let h = tape.matmul(x, agg_w);
    let a = tape.neighbor_agg(h, graph.neighbours.clone(), agg.into());
    let o = tape.matmul(a, out_w);
    let r = tape.relu(o);
    tape.add(x, r)
}

fn ffn_tape(tape: &mut Tape, y: NodeId, b: &BlockParams<NodeId>) -> NodeId {
    let h = tape.affine(y, b.ffn1.w, b.ffn1.b);
    let h = tape.relu(h);
    let f = tape.affine(h, b.ffn2.w, b.ffn2.b);
    let skip = match b.shortcut {
        Some(s) => tape.matmul(y, s),
        None => y,
    };
    tape.add(skip, f)
}

/// Records the full encoder on `tape`. With `graphs` given, those graphs are
/// used instead of being rebuilt from the node values.
pub fn forward_tape(
    tape: &mut Tape,
    p: &EncoderParams<NodeId>,
    cfg: &EncoderConfig,
    patches: NodeId,
    graphs: Option<&[KnnGraph]>,
) -> Result<ForwardTrace> {
    if let Some(g) = graphs {
        if g.len() != p.blocks.len() {
            return Err(Error::Shape(format!(
                "{} fixed graphs for {} blocks",
                g.len(),
                p.blocks.len()
            )));
        }
    }
    let h = tape.affine(patches, p.patch.w, p.patch.b);
    let embeddings = tape.relu(h);
    let mut x = embeddings;
    let mut used = Vec::with_capacity(p.blocks.len());
    for (i, block) in p.blocks.iter().enumerate() {
        let graph = match graphs {
            Some(g) => g[i].clone(),
            None => build_knn_graph(tape.value(x), cfg.k)?,
        };
        let y = graph_conv_tape(tape, x, &graph, block.agg_w, block.out_w, cfg.agg);
        x = ffn_tape(tape, y, block);
        used.push(graph);
    }
    let pooled = tape.mean_rows(x);
    let h = tape.affine(pooled, p.proj1.w, p.proj1.b);
    let h = tape.relu(h);
    let z = tape.affine(h, p.proj2.w, p.proj2.b);
    let fingerprint = tape.l2_normalize_rows(z);
    Ok(ForwardTrace {
        embeddings,
        nodes: x,
        fingerprint,
        graphs: used,
    })
}

/// Patch embedding `relu(P W + b)` of an `N x 3p` patch matrix.
pub fn embed_patches(patches: &Array2<f64>, patch: &Linear<Array2<f64>>) -> Array2<f64> {
    (patches.dot(&patch.w) + &patch.b).mapv(|v| v.max(0.0))
}

pub fn patch_embed(
    pts: &PointSet,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<Array2<f64>> {
    Ok(embed_patches(&patch_matrix(pts, cfg)?, &params.patch))
}

/// One residual graph convolution, outside of any tape.
pub fn graph_conv(
    nodes: &Array2<f64>,
    graph: &KnnGraph,
    agg_w: &Array2<f64>,
    out_w: &Array2<f64>,
    agg: Aggregation,
) -> Array2<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(nodes.clone());
    let a = tape.leaf(agg_w.clone());
    let o = tape.leaf(out_w.clone());
    let y = graph_conv_tape(&mut tape, x, graph, a, o, agg);
    tape.value(y).clone()
}

/// Rewrites `layer` so that it acts on column-standardised inputs: with
/// column means `mu` and deviations `sd` over every row of `inputs`,
/// `x W + b` becomes `((x - mu) / sd) W + b`.
fn standardise_inputs(layer: &mut Linear<Array2<f64>>, inputs: &[Array2<f64>]) {
    let cols = layer.w.nrows();
    let rows: usize = inputs.iter().map(|m| m.nrows()).sum();
    if rows < 2 {
        return;
    }
    let mut mean = Array1::<f64>::zeros(cols);
    for m in inputs {
        mean += &m.sum_axis(Axis(0));
    }
    mean /= rows as f64;
    let mut var = Array1::<f64>::zeros(cols);
    for m in inputs {
        var += &(m - &mean).mapv(|v| v * v).sum_axis(Axis(0));
    }
    let sd = (var / rows as f64).mapv(|v| if v.sqrt() > 1e-6 { v.sqrt() } else { 1.0 });
    for (c, mut row) in layer.w.rows_mut().into_iter().enumerate() {
        row /= sd[c];
    }
    let shift = mean.dot(&layer.w);
    layer.b.row_mut(0).zip_mut_with(&shift, |b, s| *b -= s);
}

/// Encoder config plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

/// Everything one forward pass produces.
pub struct Encoded {
    pub nodes: NodeMatrix,
    pub fingerprint: Fingerprint,
    pub graphs: Vec<KnnGraph>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, seed);
        Ok(Self { config, params })
    }

    /// Data-dependent start: folds per-column standardisation, measured
    /// over `specs`, into the two affine maps that see raw statistics. The
    /// patch embedding receives log-power inputs that share a large constant
    /// floor, and the projection head receives pooled nodes that share a
    /// large positive mean. Left alone, both offsets dominate and every
    /// fingerprint starts out pointing the same way.
    pub fn calibrate(&mut self, specs: &[MelSpec]) -> Result<()> {
        if specs.len() < 2 {
            return Ok(());
        }
        let patches = specs
            .iter()
            .map(|s| patch_matrix(&to_points(s), &self.config))
            .collect::<Result<Vec<_>>>()?;
        standardise_inputs(&mut self.params.patch, &patches);
        let pooled = specs
            .iter()
            .map(|s| {
                let nodes = self.encode(s)?.nodes.0.mapv(f64::from);
                Ok(pool(&nodes).insert_axis(Axis(0)))
            })
            .collect::<Result<Vec<_>>>()?;
        standardise_inputs(&mut self.params.proj1, &pooled);
        Ok(())
    }

    pub fn encode(&self, spec: &MelSpec) -> Result<Encoded> {
        let pts = to_points(spec);
        let patches = patch_matrix(&pts, &self.config)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let input = tape.leaf(patches);
        let trace = forward_tape(&mut tape, &bound, &self.config, input, None)?;
        let nodes = tape.value(trace.nodes).mapv(|v| v as f32);
        if nodes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let fp = tape
            .value(trace.fingerprint)
            .row(0)
            .iter()
            .map(|&v| v as f32)
            .collect();
        Ok(Encoded {
            nodes: NodeMatrix(nodes),
            fingerprint: Fingerprint(fp),
            graphs: trace.graphs,
        })
    }

    pub fn forward(&self, spec: &MelSpec) -> Result<(NodeMatrix, Fingerprint)> {
        let e = self.encode(spec)?;
        Ok((e.nodes, e.fingerprint))
    }

    pub fn forward_batch(
        &self,
        specs: &[MelSpec],
        exec: crate::exec::Exec,
    ) -> Result<Vec<(NodeMatrix, Fingerprint)>> {
        exec.try_map(specs, |s| self.forward(s))
    }

    /// SHA-256 over config and weights; changes whenever either does.
    pub fn param_hash(&self) -> String {
        crate::weights::hash_tensors(
            &serde_json::to_string(&self.config).expect("config serialises"),
            self.params.iter().into_iter(),
        )
    }
}

/// Column means of a node matrix, i.e. the pooled representation.
pub fn pool(nodes: &Array2<f64>) -> Array1<f64> {
    nodes.mean_axis(Axis(0)).expect("non-empty node matrix")
}
