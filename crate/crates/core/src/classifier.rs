//! Multi-head cross-attention match classifier.
//!
//! Query nodes attend over reference nodes:
//!
//! ```text
//! head_h = softmax(Q W_q[h] (R W_k[h])^T / sqrt(d_k)) R W_v[h]
//! C      = concat_h(head_h) W_o
//! s      = sigmoid(mean_rows(C) w + b)
//! ```
//!
//! `W_q[h]` is the column block `[h*d_k, (h+1)*d_k)` of a `d x d` matrix, and
//! likewise for keys and values. There are no projection biases.

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::NodeMatrix;
use crate::error::{Error, Result};
use crate::tape::{self, NodeId, Tape};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub n_heads: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { n_heads: 8 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self, node_dim: usize) -> Result<()> {
        if self.n_heads == 0 || !node_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "classifier: node dimension {node_dim} is not divisible by {} heads",
                self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhcaParams<T = Array2<f64>> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    /// `d x 1`
    pub w: T,
    /// `1 x 1`
    pub b: T,
}

pub const PARAM_NAMES: [&str; 6] = [
    "classifier.wq",
    "classifier.wk",
    "classifier.wv",
    "classifier.wo",
    "classifier.w",
    "classifier.b",
];

impl<T> MhcaParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> MhcaParams<U> {
        MhcaParams {
            wq: f(PARAM_NAMES[0], &self.wq),
            wk: f(PARAM_NAMES[1], &self.wk),
            wv: f(PARAM_NAMES[2], &self.wv),
            wo: f(PARAM_NAMES[3], &self.wo),
            w: f(PARAM_NAMES[4], &self.w),
            b: f(PARAM_NAMES[5], &self.b),
        }
    }

    pub fn iter(&self) -> Vec<&T> {
        vec![&self.wq, &self.wk, &self.wv, &self.wo, &self.w, &self.b]
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w,
            &mut self.b,
        ]
    }
}

impl MhcaParams {
    pub fn shapes(d: usize) -> MhcaParams<(usize, usize)> {
        MhcaParams {
            wq: (d, d),
            wk: (d, d),
            wv: (d, d),
            wo: (d, d),
            w: (d, 1),
            b: (1, 1),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self::shapes(d).map(|_, &s| Array2::zeros(s))
    }

    /// `N(0, 1/d)` weights, zero bias.
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("finite std");
        Self::shapes(d).map(|name, &(r, c)| {
            if name == PARAM_NAMES[5] {
                Array2::zeros((r, c))
            } else {
                Array2::from_shape_fn((r, c), |_| normal.sample(&mut rng))
            }
        })
    }

    pub fn node_dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn bind(&self, tape: &mut Tape) -> MhcaParams<NodeId> {
        self.map(|_, a| tape.leaf(a.clone()))
    }

    pub fn check_shapes(&self, d: usize) -> Result<()> {
        let want = Self::shapes(d);
        let mut ok = true;
        let _ = self.map(|n, a| {
            let ws = *want.iter()[PARAM_NAMES.iter().position(|p| *p == n).unwrap()];
            ok &= a.dim() == ws;
        });
        if !ok {
            return Err(Error::Shape(format!(
                "classifier parameters do not match node dimension {d}"
            )));
        }
        Ok(())
    }
}

/// Records `C = MHA(q, r, r)` on the tape.
pub fn cross_attention_tape(
    tape: &mut Tape,
    q: NodeId,
    r: NodeId,
    p: &MhcaParams<NodeId>,
    n_heads: usize,
) -> NodeId {
    let d = tape.value(p.wq).ncols();
    let dk = d / n_heads;
    let qp = tape.matmul(q, p.wq);
    let kp = tape.matmul(r, p.wk);
    let vp = tape.matmul(r, p.wv);
    let heads: Vec<NodeId> = (0..n_heads)
        .map(|h| {
            let qh = tape.slice_cols(qp, h * dk, dk);
            let kh = tape.slice_cols(kp, h * dk, dk);
            let vh = tape.slice_cols(vp, h * dk, dk);
            let kt = tape.transpose(kh);
            let logits = tape.matmul(qh, kt);
            let logits = tape.scale(logits, 1.0 / (dk as f64).sqrt());
            let att = tape.softmax_rows(logits);
            tape.matmul(att, vh)
        })
        .collect();
    let cat = tape.concat_cols(&heads);
    tape.matmul(cat, p.wo)
}

/// Records the match score `s` (a `1 x 1` node).
pub fn classify_tape(
    tape: &mut Tape,
    q: NodeId,
    r: NodeId,
    p: &MhcaParams<NodeId>,
    n_heads: usize,
) -> NodeId {
    let c = cross_attention_tape(tape, q, r, p, n_heads);
    let pooled = tape.mean_rows(c);
    let logit = tape.affine(pooled, p.w, p.b);
    tape.sigmoid(logit)
}

/// Reference-side projections, reusable across query segments.
#[derive(Clone, Debug)]
pub struct PreparedRef {
    keys: Array2<f64>,
    values: Array2<f64>,
}

/// Query-side projection.
#[derive(Clone, Debug)]
pub struct PreparedQuery {
    queries: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: MhcaParams,
    /// `W_o w`, folded once since only the pooled output is scored.
    head: Array1<f64>,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, params: MhcaParams) -> Result<Self> {
        let d = params.node_dim();
        config.validate(d)?;
        params.check_shapes(d)?;
        let head = params.wo.dot(&params.w).column(0).to_owned();
        Ok(Self {
            config,
            params,
            head,
        })
    }

    pub fn init(config: ClassifierConfig, node_dim: usize, seed: u64) -> Result<Self> {
        Self::new(config, MhcaParams::init(node_dim, seed))
    }

    pub fn node_dim(&self) -> usize {
        self.params.node_dim()
    }

    fn check_input(&self, m: &NodeMatrix) -> Result<()> {
        if m.0.ncols() != self.node_dim() || m.0.nrows() == 0 {
            return Err(Error::Shape(format!(
                "node matrix {:?} does not fit classifier width {}",
                m.dim(),
                self.node_dim()
            )));
        }
        Ok(())
    }

    pub fn prepare_ref(&self, r: &NodeMatrix) -> Result<PreparedRef> {
        self.check_input(r)?;
        let r = r.to_f64();
        Ok(PreparedRef {
            keys: r.dot(&self.params.wk),
            values: r.dot(&self.params.wv),
        })
    }

    pub fn prepare_query(&self, q: &NodeMatrix) -> Result<PreparedQuery> {
        self.check_input(q)?;
        Ok(PreparedQuery {
            queries: q.to_f64().dot(&self.params.wq),
        })
    }

    /// Per-head attention weights (`N_q x N_r`, rows sum to one).
    pub fn attention(&self, q: &PreparedQuery, r: &PreparedRef) -> Vec<Array2<f64>> {
        let h = self.config.n_heads;
        let dk = self.node_dim() / h;
        let scale = 1.0 / (dk as f64).sqrt();
        (0..h)
            .map(|i| {
                let cols = s![.., i * dk..(i + 1) * dk];
                let logits = q.queries.slice(cols).dot(&r.keys.slice(cols).t()) * scale;
                tape::softmax_rows(&logits)
            })
            .collect()
    }

    /// Concatenated head outputs before the output projection.
    fn heads(&self, q: &PreparedQuery, r: &PreparedRef) -> Array2<f64> {
        let h = self.config.n_heads;
        let dk = self.node_dim() / h;
        let mut out = Array2::zeros((q.queries.nrows(), self.node_dim()));
        for (i, att) in self.attention(q, r).into_iter().enumerate() {
            let cols = s![.., i * dk..(i + 1) * dk];
            out.slice_mut(cols).assign(&att.dot(&r.values.slice(cols)));
        }
        out
    }

    pub fn cross_attention(&self, q: &NodeMatrix, r: &NodeMatrix) -> Result<Array2<f64>> {
        let (pq, pr) = (self.prepare_query(q)?, self.prepare_ref(r)?);
        Ok(self.heads(&pq, &pr).dot(&self.params.wo))
    }

    pub fn score_prepared(&self, q: &PreparedQuery, r: &PreparedRef) -> f64 {
        let pooled = self
            .heads(q, r)
            .mean_axis(Axis(0))
            .expect("non-empty query");
        tape::sigmoid(pooled.dot(&self.head) + self.params.b[[0, 0]])
    }

    /// Match score in `(0, 1)`.
    pub fn classify(&self, q: &NodeMatrix, r: &NodeMatrix) -> Result<f64> {
        Ok(self.score_prepared(&self.prepare_query(q)?, &self.prepare_ref(r)?))
    }

    pub fn param_hash(&self) -> String {
        crate::weights::hash_tensors(
            &serde_json::to_string(&self.config).expect("config serialises"),
            self.params.iter().into_iter(),
        )
    }
}
