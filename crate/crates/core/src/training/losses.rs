//! NT-Xent contrastive loss and binary cross-entropy, with analytic
//! gradients.

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// NT-Xent loss over the `2B` views `[z_q; z_r]`.
///
/// Similarities are cosines scaled by `1 / temperature`. Each view's
/// positive is its partner; the other `2B - 2` views are negatives. The loss
/// is the mean cross-entropy over all `2B` anchors. Returns the loss and its
/// gradients w.r.t. `z_q` and `z_r`.
pub fn nt_xent(
    z_q: &Array2<f64>,
    z_r: &Array2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let b = z_q.nrows();
    if b < 2 || z_r.dim() != z_q.dim() {
        return Err(Error::InvalidArgument(format!(
            "NT-Xent needs two equal batches of at least 2 pairs, got {:?} and {:?}",
            z_q.dim(),
            z_r.dim()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let z = concatenate![Axis(0), *z_q, *z_r];
    let n = 2 * b;
    let norms: Vec<f64> = z
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt().max(1e-12))
        .collect();
    let mut u = z.clone();
    for (mut row, &nm) in u.rows_mut().into_iter().zip(&norms) {
        row /= nm;
    }
    let logits = u.dot(&u.t()) / temperature;

    let partner = |a: usize| if a < b { a + b } else { a - b };
    let mut loss = 0.0;
    // d loss / d logits, diagonal excluded
    let mut g = Array2::<f64>::zeros((n, n));
    for a in 0..n {
        let m = (0..n)
            .filter(|&j| j != a)
            .map(|j| logits[[a, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .filter(|&j| j != a)
            .map(|j| (logits[[a, j]] - m).exp())
            .sum();
        let lse = m + denom.ln();
        loss += lse - logits[[a, partner(a)]];
        for j in (0..n).filter(|&j| j != a) {
            g[[a, j]] = (logits[[a, j]] - lse).exp();
        }
        g[[a, partner(a)]] -= 1.0;
    }
    loss /= n as f64;
    g /= n as f64;

    // logits = U U^T / t  =>  dU = (G + G^T) U / t
    let gu = (&g + &g.t()).dot(&u) / temperature;
    // u = z / |z|  =>  dz = (du - u (u . du)) / |z|
    let mut gz = gu.clone();
    for i in 0..n {
        let dot = u.row(i).dot(&gu.row(i));
        let mut row = gz.row_mut(i);
        row.scaled_add(-dot, &u.row(i));
        row /= norms[i];
    }
    Ok((
        loss,
        gz.slice(s![..b, ..]).to_owned(),
        gz.slice(s![b.., ..]).to_owned(),
    ))
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[eps, 1 - eps]`.
/// Returns the loss and `d loss / d p`.
pub fn bce(p: f64, y: f64) -> (f64, f64) {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let loss = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    let grad = if p == pc {
        -y / pc + (1.0 - y) / (1.0 - pc)
    } else {
        0.0
    };
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_pairs_closed_form() {
        let zq = array![[1.0, 0.0], [0.0, 1.0]];
        let (loss, _, _) = nt_xent(&zq, &zq.clone(), 0.05).unwrap();
        let e20 = 20f64.exp();
        let want = -(e20 / (e20 + 2.0)).ln();
        assert!((loss - want).abs() < 1e-9);
    }

    #[test]
    fn identical_views_give_log_2b_minus_1() {
        for b in [2usize, 3, 8] {
            let z = Array2::from_elem((b, 4), 0.5);
            let (loss, _, _) = nt_xent(&z, &z, 0.05).unwrap();
            assert!((loss - ((2 * b - 1) as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_degenerate_batches() {
        let z = array![[1.0, 0.0]];
        assert!(nt_xent(&z, &z, 0.05).is_err());
        let z2 = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(nt_xent(&z2, &z2, 0.0).is_err());
    }

    fn random_batch(seed: u64, b: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = || Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.0..1.0));
        (f(), f())
    }

    #[test]
    fn symmetric_and_permutation_invariant() {
        let (q, r) = random_batch(1, 5, 3);
        let (l, _, _) = nt_xent(&q, &r, 0.3).unwrap();
        let (swapped, _, _) = nt_xent(&r, &q, 0.3).unwrap();
        assert!((l - swapped).abs() < 1e-12);
        let order = [3, 0, 4, 1, 2];
        let pq = q.select(Axis(0), &order);
        let pr = r.select(Axis(0), &order);
        let (permuted, _, _) = nt_xent(&pq, &pr, 0.3).unwrap();
        assert!((l - permuted).abs() < 1e-12);
    }

    #[test]
    fn bce_values() {
        assert!((bce(0.5, 1.0).0 - 2f64.ln()).abs() < 1e-12);
        assert!(bce(1.0 - 1e-12, 1.0).0 < 1e-6);
        assert!(bce(1e-12, 0.0).0 < 1e-6);
        assert!(bce(0.0, 1.0).0.is_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p: f64 = rng.gen_range(0.01..0.99);
            let y = rng.gen_range(0..2) as f64;
            let want = if y == 1.0 { -p.ln() } else { -(1.0 - p).ln() };
            let (l, g) = bce(p, y);
            assert!((l - want).abs() < 1e-12);
            let h = 1e-6;
            let fd = (bce(p + h, y).0 - bce(p - h, y).0) / (2.0 * h);
            assert!((g - fd).abs() < 1e-5 * g.abs().max(1.0));
        }
    }
}
