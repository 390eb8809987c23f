//! Contrastive training of the encoder.
//!
//! Each step draws a batch of fresh positive pairs, encodes both members on
//! per-sample tapes, evaluates NT-Xent over the batch, back-propagates the
//! fingerprint gradients through every tape and applies one Adam update
//! with a cosine-annealed learning rate. Gradients are summed in batch
//! order, so a run is reproducible for a given seed and worker count.

use log::info;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelConfig, MelSpec};
use crate::encoder::{forward_tape, patch_matrix, to_points, Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pairgen::AugRanges;
use crate::tape::{NodeId, Tape};
use crate::training::data::{batch_features, ordered_sum, plan_jobs, split_tracks, Track};
use crate::training::losses::nt_xent;
use crate::training::optim::{Adam, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
    /// Pairs per step.
    pub batch_size: usize,
    pub steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub temperature: f64,
    /// Steps between validation evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Share of tracks held out for validation; 0 disables early stopping.
    pub val_fraction: f64,
    pub val_pairs: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 2000,
            lr_max: 1e-3,
            lr_min: 1e-6,
            temperature: 0.05,
            eval_every: 50,
            patience: 10,
            val_fraction: 0.1,
            val_pairs: 64,
        }
    }
}

impl EncoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2
            || self.steps == 0
            || self.eval_every == 0
            || !(self.temperature > 0.0)
            || !(0.0..1.0).contains(&self.val_fraction)
            || self.lr_max < self.lr_min
            || self.lr_min < 0.0
        {
            return Err(Error::Config(format!("invalid encoder training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValRecord {
    pub step: usize,
    pub loss: f64,
}

pub struct EncoderRun {
    pub encoder: Encoder,
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValRecord>,
    /// Step whose weights were kept (the last step without validation).
    pub best_step: usize,
    pub stopped_early: bool,
}

/// Forward pass of one view on its own tape.
struct View {
    tape: Tape,
    params: EncoderParams<NodeId>,
    fingerprint: NodeId,
}

fn forward_view(params: &EncoderParams, cfg: &EncoderConfig, spec: &MelSpec) -> Result<View> {
    let patches = patch_matrix(&to_points(spec), cfg)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(patches);
    let trace = forward_tape(&mut tape, &bound, cfg, x, None)?;
    Ok(View {
        tape,
        params: bound,
        fingerprint: trace.fingerprint,
    })
}

fn view_grads(v: &View, seed: Array2<f64>) -> Vec<Array2<f64>> {
    let grads = v.tape.backward_with(v.fingerprint, seed);
    v.params.iter().into_iter().map(|&id| grads.get(&v.tape, id)).collect()
}

/// NT-Xent of the current weights on precomputed pairs.
pub fn contrastive_loss(
    encoder: &Encoder,
    pairs: &[(MelSpec, MelSpec)],
    temperature: f64,
    exec: Exec,
) -> Result<f64> {
    let fps = exec.try_map(pairs, |(q, r)| {
        let (_, fq) = encoder.forward(q)?;
        let (_, fr) = encoder.forward(r)?;
        Ok::<_, Error>((fq, fr))
    })?;
    let d = encoder.config.fp_dim;
    let zq = Array2::from_shape_fn((fps.len(), d), |(i, j)| fps[i].0 .0[j] as f64);
    let zr = Array2::from_shape_fn((fps.len(), d), |(i, j)| fps[i].1 .0[j] as f64);
    Ok(nt_xent(&zq, &zr, temperature)?.0)
}

/// One optimisation step's loss and summed gradients.
fn step_gradients(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    pairs: &[(MelSpec, MelSpec)],
    temperature: f64,
    exec: Exec,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let views = exec.try_map(pairs, |(q, r)| {
        Ok::<_, Error>((forward_view(params, cfg, q)?, forward_view(params, cfg, r)?))
    })?;
    let d = cfg.fp_dim;
    let b = views.len();
    let zq = Array2::from_shape_fn((b, d), |(i, j)| views[i].0.tape.value(views[i].0.fingerprint)[[0, j]]);
    let zr = Array2::from_shape_fn((b, d), |(i, j)| views[i].1.tape.value(views[i].1.fingerprint)[[0, j]]);
    let (loss, gq, gr) = nt_xent(&zq, &zr, temperature)?;
    let per_view = exec.map_range(b, |i| {
        let row = |g: &Array2<f64>| g.row(i).to_owned().insert_axis(ndarray::Axis(0));
        let mut a = view_grads(&views[i].0, row(&gq));
        for (x, y) in a.iter_mut().zip(view_grads(&views[i].1, row(&gr))) {
            *x += &y;
        }
        a
    });
    let grads = ordered_sum(per_view).expect("non-empty batch");
    Ok((loss, grads))
}

pub fn train_encoder(
    tracks: &[Track],
    encoder_cfg: &EncoderConfig,
    mel: &MelConfig,
    aug: &AugRanges,
    cfg: &EncoderTrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<EncoderRun> {
    cfg.validate()?;
    encoder_cfg.validate()?;
    if tracks.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive training needs at least 2 tracks, got {}",
            tracks.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, val) = split_tracks(tracks.len(), cfg.val_fraction, &mut rng);
    let window = mel.window_seconds;

    let val_pairs: Vec<(MelSpec, MelSpec)> = if val.is_empty() {
        Vec::new()
    } else {
        let jobs = plan_jobs(tracks, &val, cfg.val_pairs.max(2), window, aug, &mut rng)?;
        batch_features(tracks, &jobs, mel, aug, exec)?
            .into_iter()
            .map(|p| (p.query, p.reference))
            .collect()
    };

    let mut encoder = Encoder::init(encoder_cfg.clone(), rng_next(&mut rng))?;
    let mut adam = Adam::new(encoder.params.iter());
    let schedule = Schedule::Cosine {
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        period: cfg.steps,
    };
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for step in 0..cfg.steps {
        let jobs = plan_jobs(tracks, &train, cfg.batch_size, window, aug, &mut rng)?;
        let pairs: Vec<(MelSpec, MelSpec)> = batch_features(tracks, &jobs, mel, aug, exec)?
            .into_iter()
            .map(|p| (p.query, p.reference))
            .collect();
        if step == 0 {
            let specs: Vec<MelSpec> = pairs.iter().flat_map(|(q, r)| [q.clone(), r.clone()]).collect();
            encoder.calibrate(&specs)?;
        }
        let (loss, grads) = step_gradients(&encoder.params, encoder_cfg, &pairs, cfg.temperature, exec)?;
        if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}"),
            });
        }
        let lr = schedule.lr(step);
        adam.update(encoder.params.iter_mut(), &grads, lr);
        steps.push(StepRecord { step, loss, lr });
        if step % 10 == 0 {
            info!("encoder step {step}: loss {loss:.4} lr {lr:.2e}");
        }

        let last = step + 1 == cfg.steps;
        if !val_pairs.is_empty() && ((step + 1) % cfg.eval_every == 0 || last) {
            let v = contrastive_loss(&encoder, &val_pairs, cfg.temperature, exec)?;
            info!("encoder step {step}: validation loss {v:.4}");
            validation.push(ValRecord { step, loss: v });
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, step, encoder.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let best_step = match best {
        Some((_, s, params)) => {
            encoder.params = params;
            s
        }
        None => steps.len() - 1,
    };
    Ok(EncoderRun {
        encoder,
        steps,
        validation,
        best_step,
        stopped_early,
    })
}

fn rng_next(rng: &mut ChaCha8Rng) -> u64 {
    rand::Rng::gen(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::training::gradcheck::relative_error;

    #[test]
    fn batched_gradient_matches_finite_differences() {
        let cfg = EncoderConfig::tiny();
        let mel = MelConfig::default();
        let tracks = synth::tracks(3, 10, 5.0, 16_000);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let jobs = plan_jobs(&tracks, &[0, 1, 2], 3, 4.0, &AugRanges::default(), &mut rng).unwrap();
        let pairs: Vec<_> = batch_features(&tracks, &jobs, &mel, &AugRanges::default(), Exec::Sequential)
            .unwrap()
            .into_iter()
            .map(|p| (p.query, p.reference))
            .collect();
        let params = EncoderParams::init(&cfg, 1);
        let (loss, grads) = step_gradients(&params, &cfg, &pairs, 0.5, Exec::Sequential).unwrap();
        assert!(loss.is_finite());
        // spot-check a few coordinates of the last projection
        let last = grads.len() - 2;
        for c in 0..4 {
            let mut p = params.clone();
            let h = 1e-5;
            let eval = |p: &EncoderParams| step_gradients(p, &cfg, &pairs, 0.5, Exec::Sequential).unwrap().0;
            let orig = p.iter()[last][[c, c]];
            p.iter_mut()[last][[c, c]] = orig + h;
            let plus = eval(&p);
            p.iter_mut()[last][[c, c]] = orig - h;
            let minus = eval(&p);
            let fd = (plus - minus) / (2.0 * h);
            assert!(relative_error(grads[last][[c, c]], fd, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn sequential_and_parallel_steps_agree() {
        let cfg = EncoderConfig::tiny();
        let mel = MelConfig::default();
        let tracks = synth::tracks(4, 20, 5.0, 16_000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let jobs = plan_jobs(&tracks, &[0, 1, 2, 3], 4, 4.0, &AugRanges::default(), &mut rng).unwrap();
        let feats = |e| {
            batch_features(&tracks, &jobs, &mel, &AugRanges::default(), e)
                .unwrap()
                .into_iter()
                .map(|p| (p.query, p.reference))
                .collect::<Vec<_>>()
        };
        let params = EncoderParams::init(&cfg, 2);
        let a = step_gradients(&params, &cfg, &feats(Exec::Sequential), 0.1, Exec::Sequential).unwrap();
        let b = step_gradients(&params, &cfg, &feats(Exec::Parallel), 0.1, Exec::Parallel).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn short_run_is_deterministic_and_learns() {
        let tracks = synth::tracks(4, 30, 6.0, 16_000);
        let cfg = EncoderTrainConfig {
            batch_size: 4,
            steps: 12,
            lr_max: 3e-3,
            eval_every: 4,
            val_fraction: 0.0,
            ..EncoderTrainConfig::default()
        };
        let run = |seed| {
            train_encoder(
                &tracks,
                &EncoderConfig::tiny(),
                &MelConfig::default(),
                &AugRanges::default(),
                &cfg,
                seed,
                Exec::Sequential,
            )
            .unwrap()
        };
        let a = run(5);
        let b = run(5);
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.best_step, 11);
    }
}
