//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every value produced during a forward pass together
//! with the operation that produced it. [`Tape::backward`] walks the record
//! in reverse and accumulates adjoints. Node ids are plain indices, so a
//! tape is cheap to build per sample and is dropped after use.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Mean,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    MeanRows(NodeId),
    L2NormalizeRows { x: NodeId, norms: Vec<f64> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    NeighborAgg {
        x: NodeId,
        neighbours: Arc<Vec<Vec<usize>>>,
        reduce: Reduce,
        argmax: Vec<usize>,
    },
    SumAll(NodeId),
    /// Loss node whose input gradients were computed in the forward pass.
    Fused { inputs: Vec<(NodeId, Array2<f64>)> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node, indexed by [`NodeId`].
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    /// Gradient of the seeded output w.r.t. `id`; zeros if `id` did not
    /// influence it.
    pub fn get(&self, tape: &Tape, id: NodeId) -> Array2<f64> {
        match &self.0[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.value(id).dim()),
        }
    }

    pub fn take(&mut self, tape: &Tape, id: NodeId) -> Array2<f64> {
        self.0[id.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(tape.value(id).dim()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        assert_eq!(self.value(bias).nrows(), 1, "bias must be a single row");
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddBias(a, bias))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Column means as a `1 x c` row.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let norms: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect();
        let mut v = x.clone();
        for (mut row, n) in v.rows_mut().into_iter().zip(&norms) {
            row /= *n;
        }
        self.push(v, Op::L2NormalizeRows { x: a, norms })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Row `i` of the output reduces the rows of `x` listed in
    /// `neighbours[i]`, elementwise. Max ties go to the earliest listed
    /// neighbour.
    pub fn neighbor_agg(
        &mut self,
        x: NodeId,
        neighbours: Arc<Vec<Vec<usize>>>,
        reduce: Reduce,
    ) -> NodeId {
        let xv = self.value(x);
        let cols = xv.ncols();
        let n = neighbours.len();
        let mut out = Array2::zeros((n, cols));
        let mut argmax = Vec::new();
        match reduce {
            Reduce::Max => {
                argmax = vec![0usize; n * cols];
                for (i, nb) in neighbours.iter().enumerate() {
                    assert!(!nb.is_empty(), "node {i} has no neighbours");
                    for c in 0..cols {
                        let mut best = nb[0];
                        for &j in &nb[1..] {
                            if xv[[j, c]] > xv[[best, c]] {
                                best = j;
                            }
                        }
                        out[[i, c]] = xv[[best, c]];
                        argmax[i * cols + c] = best;
                    }
                }
            }
            Reduce::Mean => {
                for (i, nb) in neighbours.iter().enumerate() {
                    let mut row = out.row_mut(i);
                    for &j in nb {
                        row += &xv.row(j);
                    }
                    row /= nb.len() as f64;
                }
            }
        }
        self.push(
            out,
            Op::NeighborAgg {
                x,
                neighbours,
                reduce,
                argmax,
            },
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Records a scalar loss whose gradients w.r.t. `inputs` are already known.
    pub fn fused_loss(&mut self, value: f64, inputs: Vec<(NodeId, Array2<f64>)>) -> NodeId {
        for (id, g) in &inputs {
            assert_eq!(self.value(*id).dim(), g.dim(), "fused gradient shape");
        }
        self.push(Array2::from_elem((1, 1), value), Op::Fused { inputs })
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: NodeId) -> Grads {
        let seed = Array2::ones(self.value(output).dim());
        self.backward_with(output, seed)
    }

    /// Reverse pass with an explicit output adjoint (vector-Jacobian product).
    pub fn backward_with(&self, output: NodeId, seed: Array2<f64>) -> Grads {
        assert_eq!(seed.dim(), self.value(output).dim(), "seed shape");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddBias(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ndarray::Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, &g * *s),
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = row.sum();
                        row.zip_mut_with(&yr, |d, &yy| *d -= yy * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let ga = Array2::from_shape_fn(self.value(*a).dim(), |(_, c)| {
                        g[[0, c]] / rows as f64
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        let proj = row.dot(&yr);
                        row.zip_mut_with(&yr, |d, &yy| *d = (*d - yy * proj) / norms[i]);
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::SliceCols { x, start } => {
                    let mut ga = Array2::zeros(self.value(*x).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., c0..c0 + w]).to_owned());
                        c0 += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![r0..r0 + h, ..]).to_owned());
                        r0 += h;
                    }
                }
                Op::NeighborAgg {
                    x,
                    neighbours,
                    reduce,
                    argmax,
                } => {
                    let mut ga = Array2::zeros(self.value(*x).dim());
                    let cols = g.ncols();
                    match reduce {
                        Reduce::Max => {
                            for i in 0..g.nrows() {
                                for c in 0..cols {
                                    ga[[argmax[i * cols + c], c]] += g[[i, c]];
                                }
                            }
                        }
                        Reduce::Mean => {
                            for (i, nb) in neighbours.iter().enumerate() {
                                let share = 1.0 / nb.len() as f64;
                                for &j in nb {
                                    for c in 0..cols {
                                        ga[[j, c]] += g[[i, c]] * share;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Fused { inputs } => {
                    let s = g[[0, 0]];
                    for (id, gi) in inputs {
                        acc(&mut grads, *id, gi * s);
                    }
                }
            }
        }
        Grads(grads)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(f(x)))/dx for a unary tape program.
    fn check_unary(x0: Array2<f64>, f: impl Fn(&mut Tape, NodeId) -> NodeId) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&mut tape, x);
        let out = tape.sum_all(y);
        let g = tape.backward(out).get(&tape, x);
        let eval = |xv: Array2<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(xv);
            let y = f(&mut t, x);
            t.value(y).sum()
        };
        let h = 1e-6;
        for idx in 0..x0.len() {
            let mut p = x0.clone();
            let mut m = x0.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num = (eval(p) - eval(m)) / (2.0 * h);
            let ana = g.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "{idx}: {num} vs {ana}");
        }
    }

    #[test]
    fn matmul_gradient_is_g_bt() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.leaf(array![[5.0], [6.0]]);
        let c = tape.matmul(a, b);
        let s = tape.sum_all(c);
        let g = tape.backward(s);
        assert_eq!(g.get(&tape, a), array![[5.0, 6.0], [5.0, 6.0]]);
        assert_eq!(g.get(&tape, b), array![[4.0], [6.0]]);
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 4, 3);
        check_unary(random(&mut rng, 3, 4), |t, x| t.softmax_rows(x));
        check_unary(random(&mut rng, 3, 4), |t, x| {
            let s = t.softmax_rows(x);
            let c = t.leaf(Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64));
            let p = t.add(s, c);
            t.relu(p)
        });
        check_unary(random(&mut rng, 3, 4), |t, x| {
            let n = t.l2_normalize_rows(x);
            let k = t.leaf(w.clone());
            t.matmul(n, k)
        });
        check_unary(random(&mut rng, 3, 4), |t, x| {
            let y = t.sigmoid(x);
            let m = t.mean_rows(y);
            t.scale(m, 3.0)
        });
        check_unary(random(&mut rng, 3, 4), |t, x| {
            let a = t.slice_cols(x, 1, 2);
            let b = t.slice_cols(x, 0, 1);
            let c = t.concat_cols(&[a, b, a]);
            let d = t.transpose(c);
            let e = t.concat_rows(&[d, d]);
            let sq = t.softmax_rows(e);
            t.matmul(sq, x)
        });
    }

    #[test]
    fn neighbour_max_routes_gradient_to_the_winner() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 5.0], [3.0, 2.0], [3.0, 0.0]]);
        let nb = Arc::new(vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
        let y = tape.neighbor_agg(x, nb, Reduce::Max);
        assert_eq!(tape.value(y), &array![[3.0, 2.0], [3.0, 5.0], [3.0, 5.0]]);
        let s = tape.sum_all(y);
        let g = tape.backward(s).get(&tape, x);
        // row 0 col 0 ties between nodes 1 and 2: first listed wins
        assert_eq!(g, array![[0.0, 2.0], [2.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn neighbour_mean_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let nb = Arc::new(vec![vec![1, 2], vec![2, 3], vec![3, 0], vec![0, 1]]);
        check_unary(random(&mut rng, 4, 3), move |t, x| {
            t.neighbor_agg(x, nb.clone(), Reduce::Mean)
        });
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
