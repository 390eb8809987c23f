//! Central finite-difference gradient checking.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classifier::{classify_tape, MhcaParams};
use crate::encoder::{forward_tape, patch_matrix, to_points, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::training::losses::{bce, nt_xent};
use crate::audio::MelSpec;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per parameter block (all of them if fewer).
    pub coords_per_block: usize,
    pub tol: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_block: 64,
            tol: 1e-4,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub blocks: Vec<BlockReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` on a random
/// subset of coordinates of every block.
pub fn grad_check(
    name: &str,
    blocks: &[(String, Array2<f64>)],
    analytic: &[Array2<f64>],
    mut f: impl FnMut(&[Array2<f64>]) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if blocks.len() != analytic.len() {
        return Err(Error::Shape("one analytic gradient per block required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta: Vec<Array2<f64>> = blocks.iter().map(|(_, b)| b.clone()).collect();
    let mut reports = Vec::with_capacity(blocks.len());
    for (bi, (bname, block)) in blocks.iter().enumerate() {
        if analytic[bi].dim() != block.dim() {
            return Err(Error::Shape(format!("gradient shape for {bname}")));
        }
        let len = block.len();
        let coords = sample(&mut rng, len, cfg.coords_per_block.min(len)).into_vec();
        let cols = block.ncols();
        let mut worst = 0.0f64;
        let mut worst_abs = 0.0f64;
        for &c in &coords {
            let (r, k) = (c / cols, c % cols);
            let orig = theta[bi][[r, k]];
            theta[bi][[r, k]] = orig + cfg.step;
            let plus = f(&theta)?;
            theta[bi][[r, k]] = orig - cfg.step;
            let minus = f(&theta)?;
            theta[bi][[r, k]] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite);
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(relative_error(analytic[bi][[r, k]], numeric, cfg.floor));
            worst_abs = worst_abs.max((analytic[bi][[r, k]] - numeric).abs());
        }
        reports.push(BlockReport {
            name: bname.clone(),
            checked: coords.len(),
            max_rel_err: worst,
            max_abs_err: worst_abs,
        });
    }
    let max_rel_err = reports.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_string(),
        blocks: reports,
        max_rel_err,
        passed: max_rel_err <= cfg.tol,
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
}

/// `sum(fingerprint)` of the encoder w.r.t. every parameter block, with
/// the kNN graphs held fixed.
pub fn check_encoder(cfg: &EncoderConfig, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed ^ 0x5eed);
    let spec = MelSpec {
        values: Array2::from_shape_fn((cfg.n_mels, cfg.n_frames), |_| rng.gen_range(-4.0..1.0f32)),
        source_offset: 0.0,
    };
    let patches = patch_matrix(&to_points(&spec), cfg)?;
    let mut params = EncoderParams::init(cfg, gc.seed);
    // non-zero biases so their gradients are exercised away from zero
    for (name, t) in params.names().into_iter().zip(params.iter_mut()) {
        if name.ends_with(".b") {
            *t = random_matrix(&mut rng, t.nrows(), t.ncols(), 0.1);
        }
    }

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let input = tape.leaf(patches.clone());
    let trace = forward_tape(&mut tape, &bound, cfg, input, None)?;
    let graphs = trace.graphs.clone();
    let loss = tape.sum_all(trace.fingerprint);
    let grads = tape.backward(loss);
    let analytic: Vec<Array2<f64>> = bound.iter().into_iter().map(|&id| grads.get(&tape, id)).collect();
    let blocks: Vec<(String, Array2<f64>)> = params
        .names()
        .into_iter()
        .zip(params.iter().into_iter().cloned())
        .collect();

    grad_check(
        "encoder",
        &blocks,
        &analytic,
        |theta| {
            let p = EncoderParams::from_tensors(cfg, theta.to_vec())?;
            let mut t = Tape::new();
            let b = p.bind(&mut t);
            let x = t.leaf(patches.clone());
            let tr = forward_tape(&mut t, &b, cfg, x, Some(&graphs))?;
            Ok(t.value(tr.fingerprint).sum())
        },
        gc,
    )
}

/// Classifier score w.r.t. every parameter block and both node matrices.
pub fn check_classifier(
    nodes: usize,
    dim: usize,
    heads: usize,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed ^ 0xc1a5);
    let mut params = MhcaParams::init(dim, gc.seed);
    params.b[[0, 0]] = 0.2;
    // a larger head keeps the score's gradient well above the floor
    params.w *= 4.0;
    let q = random_matrix(&mut rng, nodes, dim, 1.0);
    let r = random_matrix(&mut rng, nodes, dim, 1.0);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let tq = tape.leaf(q.clone());
    let tr = tape.leaf(r.clone());
    let s = classify_tape(&mut tape, tq, tr, &bound, heads);
    let grads = tape.backward(s);
    let mut analytic: Vec<Array2<f64>> = bound.iter().into_iter().map(|&id| grads.get(&tape, id)).collect();
    analytic.push(grads.get(&tape, tq));
    analytic.push(grads.get(&tape, tr));
    let mut blocks: Vec<(String, Array2<f64>)> = crate::classifier::PARAM_NAMES
        .iter()
        .map(|n| n.to_string())
        .zip(params.iter().into_iter().cloned())
        .collect();
    blocks.push(("input.query".into(), q));
    blocks.push(("input.reference".into(), r));

    grad_check(
        "classifier",
        &blocks,
        &analytic,
        |theta| {
            let mut t = Tape::new();
            let ids: Vec<_> = theta.iter().map(|a| t.leaf(a.clone())).collect();
            let p = MhcaParams {
                wq: ids[0],
                wk: ids[1],
                wv: ids[2],
                wo: ids[3],
                w: ids[4],
                b: ids[5],
            };
            let s = classify_tape(&mut t, ids[6], ids[7], &p, heads);
            Ok(t.scalar(s))
        },
        gc,
    )
}

/// NT-Xent w.r.t. both fingerprint batches.
pub fn check_nt_xent(batch: usize, dim: usize, temperature: f64, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed ^ 0x7e47);
    let mut unit = |r| {
        let mut m = random_matrix(&mut rng, r, dim, 1.0);
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        m
    };
    let (zq, zr) = (unit(batch), unit(batch));
    let (_, gq, gr) = nt_xent(&zq, &zr, temperature)?;
    grad_check(
        "nt_xent",
        &[("z_q".into(), zq), ("z_r".into(), zr)],
        &[gq, gr],
        |t| Ok(nt_xent(&t[0], &t[1], temperature)?.0),
        gc,
    )
}

/// BCE w.r.t. the probability, over a grid of probabilities and labels.
pub fn check_bce(gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let ps: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
    let mut blocks = Vec::new();
    let mut analytic = Vec::new();
    for y in [0.0, 1.0] {
        let p = Array2::from_shape_vec((1, ps.len()), ps.clone()).expect("row");
        analytic.push(p.mapv(|v| bce(v, y).1));
        blocks.push((format!("p|y={y}"), p));
    }
    grad_check(
        "bce",
        &blocks,
        &analytic,
        |t| {
            Ok(t[0].iter().map(|&p| bce(p, 0.0).0).sum::<f64>()
                + t[1].iter().map(|&p| bce(p, 1.0).0).sum::<f64>())
        },
        gc,
    )
}

/// `|theta|^2`, whose gradient is `2 theta`.
pub fn check_quadratic(gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let theta = random_matrix(&mut rng, 4, 4, 1.0);
    grad_check(
        "quadratic",
        &[("theta".into(), theta.clone())],
        &[&theta * 2.0],
        |t| Ok(t[0].iter().map(|v| v * v).sum()),
        gc,
    )
}

/// Every check at the small configuration used by the test suite.
pub fn suite(gc: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_encoder(&EncoderConfig::tiny(), gc)?,
        check_classifier(8, 16, 2, gc)?,
        check_nt_xent(4, 16, 0.05, gc)?,
        check_bce(gc)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = check_quadratic(&GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert!(r.blocks[0].max_abs_err < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let theta = Array2::from_elem((2, 2), 1.5);
        let r = grad_check(
            "bad",
            &[("t".into(), theta.clone())],
            &[&theta * 3.0],
            |t| Ok(t[0].iter().map(|v| v * v).sum()),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn suite_passes() {
        for r in suite(&GradCheckConfig::default()).unwrap() {
            assert!(r.blocks.iter().all(|b| b.checked > 0));
            assert!(r.passed, "{}: {:#?}", r.name, r.blocks);
        }
    }
}
