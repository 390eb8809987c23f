//! Seeded k-means with k-means++ seeding and Lloyd iterations.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Squared L2 distances between every row of `x` and every row of `c`.
pub fn sq_distances(x: ArrayView2<f32>, c: ArrayView2<f32>) -> Array2<f32> {
    let xn: Array1<f32> = x.map_axis(Axis(1), |r| r.dot(&r));
    let cn: Array1<f32> = c.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = x.dot(&c.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (xn[i] - 2.0 * *v + cn[j]).max(0.0);
    }
    d
}

/// Index of the smallest entry per row, ties to the lower index.
pub fn argmin_rows(d: &Array2<f32>) -> Vec<usize> {
    d.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v < r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `k` centroids of the rows of `data`. Empty clusters are re-seeded with
/// the point farthest from its current centroid.
pub fn kmeans(data: ArrayView2<f32>, k: usize, iters: usize, seed: u64) -> Array2<f32> {
    let (n, dim) = data.dim();
    assert!(k >= 1 && n >= 1, "k-means needs points and clusters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::<f32>::zeros((k, dim));

    // k-means++ seeding
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut nearest: Vec<f64> = sq_distances(data, centroids.slice(ndarray::s![0..1, ..]))
        .column(0)
        .iter()
        .map(|&v| v as f64)
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        let d = sq_distances(data, centroids.slice(ndarray::s![c..c + 1, ..]));
        for (m, &v) in nearest.iter_mut().zip(d.column(0)) {
            *m = m.min(v as f64);
        }
    }

    for _ in 0..iters {
        let d = sq_distances(data, centroids.view());
        let assign = argmin_rows(&d);
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums.row_mut(a).iter_mut().zip(data.row(i)) {
                *s += v as f64;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = (s / counts[c] as f64) as f32;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| {
                        d[[a, assign[a]]]
                            .total_cmp(&d[[b, assign[b]]])
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                taken[far] = true;
                centroids.row_mut(c).assign(&data.row(far));
            }
        }
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn distances_match_direct_evaluation() {
        let x = array![[0.0f32, 0.0], [1.0, 2.0]];
        let c = array![[1.0f32, 0.0], [3.0, 3.0]];
        let d = sq_distances(x.view(), c.view());
        assert_eq!(d, array![[1.0, 18.0], [4.0, 5.0]]);
        assert_eq!(argmin_rows(&d), vec![0, 0]);
    }

    #[test]
    fn recovers_repeated_points() {
        let pts = array![[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let mut data = Array2::zeros((40, 2));
        for i in 0..40 {
            data.row_mut(i).assign(&pts.row(i % 4));
        }
        let c = kmeans(data.view(), 4, 25, 3);
        let mut rows: Vec<(i32, i32)> = c
            .rows()
            .into_iter()
            .map(|r| (r[0].round() as i32, r[1].round() as i32))
            .collect();
        rows.sort_unstable();
        assert_eq!(rows, vec![(0, 0), (0, 10), (10, 0), (10, 10)]);
        assert_eq!(c, kmeans(data.view(), 4, 25, 3));
    }

    #[test]
    fn more_clusters_than_distinct_points_still_terminates() {
        let data = Array2::from_elem((10, 3), 1.0f32);
        let c = kmeans(data.view(), 4, 5, 0);
        assert!(c.iter().all(|&v| v == 1.0));
    }
}
