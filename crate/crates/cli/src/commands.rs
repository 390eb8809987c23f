//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use asid::audio::{load_audio, write_wav, MelConfig, Waveform};
use asid::config::RunConfig;
use asid::encoder::EncoderConfig;
use asid::eval::{compute_hit_rates, evaluate_rankings, read_annotations, RankSongs};
use asid::exec::{configure_threads, Exec};
use asid::index::IvfPqIndex;
use asid::model::Model;
use asid::pairgen::{generate_pair, StemSet};
use asid::retrieval::{encode_audio, QueryScope, ReferenceDb, Retriever};
use asid::training::classifier_stage::pair_auroc;
use asid::training::data::plan_jobs;
use asid::training::gradcheck::{self, GradCheckConfig};
use asid::training::{train_classifier, train_encoder, Track};
use asid::{selftest, synth};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::{Cli, Command, Failure, GlobalArgs, TrackArgs};

type CmdResult = Result<(), Failure>;

struct Ctx {
    cfg: RunConfig,
    exec: Exec,
    force: bool,
}

impl Ctx {
    fn from_global(g: &GlobalArgs) -> Result<Self, Failure> {
        let mut cfg = match &g.config {
            Some(path) => RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = g.seed {
            cfg.seed = seed;
        }
        if let Some(t) = g.threads {
            cfg.threads = t;
        }
        configure_threads(cfg.threads);
        Ok(Self {
            exec: Exec::from_threads(cfg.threads),
            cfg,
            force: g.force,
        })
    }

    /// Re-checks the config after command-line overrides.
    fn validate(&self) -> CmdResult {
        self.cfg.validate().map_err(|e| Failure::Usage(e.to_string()))
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    /// Wraps a command result with the run identity.
    fn report(&self, command: &str, body: impl Serialize) -> Result<Value, Failure> {
        Ok(json!({
            "command": command,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "result": serde_json::to_value(body).context("serialising report")?,
        }))
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let mut ctx = Ctx::from_global(&cli.global)?;
    match cli.command {
        Command::Fingerprint {
            audio,
            audio_dir,
            weights,
            out,
            db,
        } => fingerprint(&ctx, audio, audio_dir, &weights, out, db),
        Command::GenPairs { tracks, count, out } => gen_pairs(&ctx, &tracks, count, &out),
        Command::TrainEncoder {
            tracks,
            preset,
            steps,
            batch_size,
            out,
            report,
        } => {
            if let Some(p) = preset {
                ctx.cfg.encoder = preset_config(&p)?;
            }
            if let Some(s) = steps {
                ctx.cfg.train_encoder.steps = s;
            }
            if let Some(b) = batch_size {
                ctx.cfg.train_encoder.batch_size = b;
            }
            ctx.validate()?;
            train_encoder_cmd(&ctx, &tracks, &out, report)
        }
        Command::TrainClassifier {
            tracks,
            weights,
            epochs,
            steps_per_epoch,
            batch_size,
            auroc_pairs,
            out,
            report,
        } => {
            let t = &mut ctx.cfg.train_classifier;
            if let Some(e) = epochs {
                t.epochs = e;
            }
            if let Some(s) = steps_per_epoch {
                t.steps_per_epoch = s;
            }
            if let Some(b) = batch_size {
                t.batch_size = b;
            }
            ctx.validate()?;
            train_classifier_cmd(&ctx, &tracks, &weights, auroc_pairs, &out, report)
        }
        Command::BuildIndex {
            db,
            out,
            nlist,
            m,
            nbits,
            nprobe,
        } => {
            let ix = &mut ctx.cfg.index;
            if nlist.is_some() {
                ix.nlist = nlist;
            }
            if let Some(m) = m {
                ix.m = m;
            }
            if let Some(b) = nbits {
                ix.nbits = b;
            }
            match (nprobe, nlist) {
                (Some(p), _) => ix.nprobe = p,
                // a smaller --nlist should not trip over the default nprobe
                (None, Some(n)) => ix.nprobe = ix.nprobe.min(n),
                (None, None) => {}
            }
            build_index(&ctx, &db, &out)
        }
        Command::Query {
            index,
            db,
            weights,
            audio,
            topk_per_segment,
            threshold,
            nprobe,
            scope_window,
            out,
        } => {
            let r = &mut ctx.cfg.retrieval;
            if let Some(k) = topk_per_segment {
                r.topk_per_segment = k;
            }
            if let Some(t) = threshold {
                r.threshold = t;
            }
            if nprobe.is_some() {
                r.nprobe = nprobe;
            }
            if let Some(w) = scope_window {
                r.scope = QueryScope::Near(w);
            }
            ctx.validate()?;
            query(&ctx, &index, &db, &weights, &audio, out)
        }
        Command::Evaluate {
            annotations,
            audio_root,
            index,
            db,
            weights,
            lengths,
            top_n,
            no_hit_rates,
            out,
        } => {
            let root = audio_root
                .or_else(|| ctx.cfg.paths.audio_root.clone())
                .ok_or_else(|| Failure::Usage("--audio-root is required (or set paths.audio_root)".into()))?;
            let hit = (!no_hit_rates).then_some((lengths, top_n));
            evaluate(&ctx, &annotations, &root, &index, &db, &weights, hit, out)
        }
        Command::Gradcheck { preset, coords, out } => gradcheck_cmd(&ctx, &preset, coords, out),
        Command::Selftest { out } => {
            let report = selftest::run(ctx.seed(), &ctx.cfg.hash(), ctx.exec)?;
            emit(out.as_deref(), &report.to_json())?;
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                Err(anyhow!("selftest failed: {}", failed.join(", ")).into())
            }
        }
    }
}

fn preset_config(name: &str) -> Result<EncoderConfig, Failure> {
    match name {
        "full" => Ok(EncoderConfig::full()),
        "tiny" => Ok(EncoderConfig::tiny()),
        "toy" => Ok(EncoderConfig::toy()),
        other => Err(Failure::Usage(format!(
            "unknown preset {other:?} (expected full, tiny or toy)"
        ))),
    }
}

/// Writes `text` to `path`, or to stdout without one.
fn emit(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn emit_json(path: Option<&Path>, value: &Value) -> anyhow::Result<()> {
    emit(path, &serde_json::to_string_pretty(value)?)
}

/// The feature grid must match the encoder input or every window is rejected.
fn check_grid(encoder: &EncoderConfig, mel: &MelConfig) -> CmdResult {
    if encoder.n_mels != mel.n_mels || encoder.n_frames != mel.n_frames {
        return Err(Failure::Usage(format!(
            "weights expect {}x{} features but the audio config gives {}x{}",
            encoder.n_mels, encoder.n_frames, mel.n_mels, mel.n_frames
        )));
    }
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Model::load(path).with_context(|| format!("loading weights {}", path.display()))
}

fn load_tracks(ctx: &Ctx, args: &TrackArgs) -> Result<Vec<Track>, Failure> {
    let sr = ctx.cfg.audio.sample_rate;
    if let Some(n) = args.synthetic {
        if n < 2 {
            return Err(Failure::Usage("--synthetic needs at least 2 tracks".into()));
        }
        info!("generating {n} synthetic tracks of {} s", args.synthetic_seconds);
        return Ok(synth::tracks(n, ctx.seed(), args.synthetic_seconds, sr));
    }
    let root = args
        .stems
        .clone()
        .or_else(|| ctx.cfg.paths.stems.clone())
        .ok_or_else(|| Failure::Usage("give --stems or --synthetic (or set paths.stems)".into()))?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(anyhow!("{} holds no track directories", root.display()).into());
    }
    let tracks = dirs
        .iter()
        .map(|d| {
            let name = d.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let stems = StemSet::load(d, sr).with_context(|| format!("loading stems from {}", d.display()))?;
            Ok((name, stems))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    info!("loaded {} tracks from {}", tracks.len(), root.display());
    Ok(tracks)
}

fn song_id(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn fingerprint(
    ctx: &Ctx,
    mut files: Vec<PathBuf>,
    dir: Option<PathBuf>,
    weights: &Path,
    out: Option<PathBuf>,
    db_path: Option<PathBuf>,
) -> CmdResult {
    let model = load_model(weights)?;
    let mel = ctx.cfg.audio.clone();
    check_grid(&model.encoder.config, &mel)?;
    if let Some(dir) = dir {
        let mut found: Vec<PathBuf> = fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        found.sort();
        files.extend(found);
    }
    if files.is_empty() {
        return Err(Failure::Usage("no audio files to fingerprint".into()));
    }

    let mut db = ReferenceDb::for_encoder(&model.encoder, mel.clone());
    let mut rows = Vec::new();
    for path in &files {
        let id = song_id(path);
        let audio = load_audio(path, mel.sample_rate).with_context(|| format!("reading {}", path.display()))?;
        let segments = encode_audio(&audio, &model.encoder, &mel, ctx.exec)
            .with_context(|| format!("encoding {}", path.display()))?;
        info!("{id}: {} segments", segments.len());
        if out.is_some() {
            rows.extend(segments.iter().map(|s| {
                json!({"song": id, "offset": s.offset, "fingerprint": s.fingerprint.0})
            }));
        }
        if db_path.is_some() {
            db.add_song(&id, None, segments)?;
        }
    }
    if let Some(p) = &out {
        emit_json(Some(p), &Value::Array(rows))?;
    }
    if let Some(p) = &db_path {
        db.save(p).with_context(|| format!("writing {}", p.display()))?;
        info!("wrote {} songs, {} segments to {}", db.songs().len(), db.segment_count(), p.display());
    }
    Ok(())
}

fn gen_pairs(ctx: &Ctx, args: &TrackArgs, count: usize, out: &Path) -> CmdResult {
    if count == 0 {
        return Err(Failure::Usage("--count must be positive".into()));
    }
    let tracks = load_tracks(ctx, args)?;
    let aug = &ctx.cfg.augment;
    let window = ctx.cfg.audio.window_seconds;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed());
    let pool: Vec<usize> = (0..tracks.len()).collect();
    let jobs = plan_jobs(&tracks, &pool, count, window, aug, &mut rng)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let numbered: Vec<_> = jobs.iter().enumerate().collect();
    let written = ctx.exec.try_map(&numbered, |&(i, job)| -> anyhow::Result<Value> {
        let (name, stems) = &tracks[job.track];
        let pair = generate_pair(stems, name, job.start, window, aug, job.seed)?;
        let base = format!("pair_{i:05}");
        let q = out.join(format!("{base}_query.wav"));
        let r = out.join(format!("{base}_reference.wav"));
        write_wav(&q, &pair.x_q)?;
        write_wav(&r, &pair.x_r)?;
        Ok(json!({
            "query": q.file_name().map(|f| f.to_string_lossy().into_owned()),
            "reference": r.file_name().map(|f| f.to_string_lossy().into_owned()),
            "provenance": pair.provenance,
        }))
    })?;
    let report = ctx.report("gen-pairs", json!({ "pairs": written }))?;
    emit_json(Some(&out.join("pairs.json")), &report)?;
    info!("wrote {count} pairs to {}", out.display());
    Ok(())
}

fn train_encoder_cmd(ctx: &Ctx, args: &TrackArgs, out: &Path, report_path: Option<PathBuf>) -> CmdResult {
    let tracks = load_tracks(ctx, args)?;
    let c = &ctx.cfg;
    info!(
        "training encoder: {} steps, batch {}, {} tracks",
        c.train_encoder.steps,
        c.train_encoder.batch_size,
        tracks.len()
    );
    let run = train_encoder(&tracks, &c.encoder, &c.audio, &c.augment, &c.train_encoder, c.seed, ctx.exec)?;
    let hash = run.encoder.param_hash();
    Model::new(run.encoder)
        .save(out, &c.hash(), c.seed)
        .with_context(|| format!("writing {}", out.display()))?;
    info!(
        "encoder saved to {} (kept step {}, final loss {:.4})",
        out.display(),
        run.best_step,
        run.steps.last().map_or(f64::NAN, |s| s.loss)
    );
    let report = ctx.report(
        "train-encoder",
        json!({
            "encoder_hash": hash,
            "tracks": tracks.len(),
            "best_step": run.best_step,
            "stopped_early": run.stopped_early,
            "steps": run.steps,
            "validation": run.validation,
        }),
    )?;
    emit_json(report_path.as_deref(), &report)?;
    Ok(())
}

fn train_classifier_cmd(
    ctx: &Ctx,
    args: &TrackArgs,
    weights: &Path,
    auroc_pairs: usize,
    out: &Path,
    report_path: Option<PathBuf>,
) -> CmdResult {
    let mut model = load_model(weights)?;
    let c = &ctx.cfg;
    check_grid(&model.encoder.config, &c.audio)?;
    c.classifier
        .validate(model.encoder.config.node_dim())
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if model.classifier.is_some() {
        warn!("{} already holds a classifier; it will be replaced", weights.display());
    }
    let tracks = load_tracks(ctx, args)?;
    let run = train_classifier(
        &tracks,
        &model.encoder,
        &c.classifier,
        &c.audio,
        &c.augment,
        &c.train_classifier,
        c.seed,
        ctx.exec,
    )?;
    let auroc = if auroc_pairs >= 2 {
        // Fresh pairs: a seed stream disjoint from the training one.
        let seed = c.seed ^ 0x5eed_a0c0;
        let a = pair_auroc(&tracks, &model.encoder, &run.classifier, &c.audio, &c.augment, auroc_pairs, seed, ctx.exec)?;
        info!("pair AUROC on {auroc_pairs} fresh pairs: {a:.4}");
        Some(a)
    } else {
        None
    };
    let clf_hash = run.classifier.param_hash();
    model.classifier = Some(run.classifier);
    model
        .save(out, &c.hash(), c.seed)
        .with_context(|| format!("writing {}", out.display()))?;
    let report = ctx.report(
        "train-classifier",
        json!({
            "encoder_hash": run.encoder_hash,
            "classifier_hash": clf_hash,
            "tracks": tracks.len(),
            "epochs": run.epochs,
            "auroc": auroc,
        }),
    )?;
    emit_json(report_path.as_deref(), &report)?;
    Ok(())
}

fn build_index(ctx: &Ctx, db_path: &Path, out: &Path) -> CmdResult {
    let db = ReferenceDb::load(db_path).with_context(|| format!("loading {}", db_path.display()))?;
    let dim = db
        .songs()
        .first()
        .and_then(|s| s.segments.first())
        .map(|s| s.fingerprint.len())
        .ok_or_else(|| anyhow!("{} is empty", db_path.display()))?;
    ctx.cfg.index.validate(dim).map_err(|e| Failure::Usage(e.to_string()))?;
    let index = db.build_index(&ctx.cfg.index, ctx.exec)?;
    index.save(out).with_context(|| format!("writing {}", out.display()))?;
    info!("indexed {} vectors in {} lists", index.len(), index.nlist());
    let report = ctx.report(
        "build-index",
        json!({
            "vectors": index.len(),
            "songs": db.songs().len(),
            "dim": index.dim(),
            "nlist": index.nlist(),
            "index": index.config(),
        }),
    )?;
    emit_json(None, &report)?;
    Ok(())
}

/// Loaded artifacts shared by `query` and `evaluate`.
struct Artifacts {
    model: Model,
    db: ReferenceDb,
    index: IvfPqIndex,
}

impl Artifacts {
    fn load(index: &Path, db: &Path, weights: &Path) -> anyhow::Result<Self> {
        let model = load_model(weights)?;
        let db = ReferenceDb::load(db).with_context(|| format!("loading {}", db.display()))?;
        let index = IvfPqIndex::load(index, Some(model.encoder.config.fp_dim))
            .with_context(|| format!("loading {}", index.display()))?;
        Ok(Self { model, db, index })
    }

    fn retriever(&self, ctx: &Ctx) -> Result<Retriever<'_>, Failure> {
        check_grid(&self.model.encoder.config, &self.db.mel)?;
        let classifier = self.model.classifier()?;
        let config = ctx.cfg.retrieval.clone();
        match Retriever::new(&self.model.encoder, classifier, &self.index, &self.db, config.clone()) {
            Ok(r) => Ok(r),
            Err(e) if ctx.force => {
                warn!("continuing despite mismatched artifacts: {e}");
                Ok(Retriever {
                    encoder: &self.model.encoder,
                    scorer: classifier,
                    index: &self.index,
                    db: &self.db,
                    config,
                })
            }
            Err(e) => Err(anyhow::Error::from(e)
                .context("artifacts do not belong together (use --force to override)")
                .into()),
        }
    }
}

fn query(ctx: &Ctx, index: &Path, db: &Path, weights: &Path, audio_path: &Path, out: Option<PathBuf>) -> CmdResult {
    let art = Artifacts::load(index, db, weights)?;
    let retriever = art.retriever(ctx)?;
    let audio = load_audio(audio_path, art.db.mel.sample_rate)
        .with_context(|| format!("reading {}", audio_path.display()))?;
    let result = retriever.query(&audio, ctx.exec)?;
    for (rank, s) in result.songs.iter().enumerate() {
        info!("#{} {} score {:.3} ({} segments)", rank + 1, s.song, s.score, s.segments.len());
    }
    let report = ctx.report(
        "query",
        json!({
            "audio": audio_path.display().to_string(),
            "retrieval": ctx.cfg.retrieval,
            "matches": result,
        }),
    )?;
    emit_json(out.as_deref(), &report)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    ctx: &Ctx,
    annotations: &Path,
    root: &Path,
    index: &Path,
    db: &Path,
    weights: &Path,
    hit: Option<(Vec<f64>, Vec<usize>)>,
    out: Option<PathBuf>,
) -> CmdResult {
    let records = read_annotations(annotations).with_context(|| format!("reading {}", annotations.display()))?;
    let art = Artifacts::load(index, db, weights)?;
    let retriever = art.retriever(ctx)?;

    let ids: Vec<String> = records
        .iter()
        .map(|r| r.query_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let sr = art.db.mel.sample_rate;
    let loaded = ctx.exec.try_map(&ids, |id| -> anyhow::Result<(String, Waveform)> {
        let path = root.join(format!("{id}.wav"));
        let w = load_audio(&path, sr).with_context(|| format!("reading {}", path.display()))?;
        Ok((id.clone(), w))
    })?;
    info!("ranking {} queries", loaded.len());
    let ranked = ctx
        .exec
        .try_map(&loaded, |(id, w)| retriever.rank(w).map(|r| (id.clone(), r)))?;
    let rankings: BTreeMap<String, Vec<String>> = ranked.into_iter().collect();

    let mut report = evaluate_rankings(&rankings, &records)?;
    if let Some((lengths, top_ns)) = hit {
        let audio: HashMap<String, Waveform> = loaded.into_iter().collect();
        report.hit_rates = Some(compute_hit_rates(&retriever, &records, &audio, &lengths, &top_ns, ctx.exec)?);
    }
    let table = report.table();
    let wrapped = ctx.report("evaluate", &report)?;
    match &out {
        Some(p) => {
            emit_json(Some(p), &wrapped)?;
            println!("{table}");
        }
        None => {
            emit_json(None, &wrapped)?;
            eprintln!("{table}");
        }
    }
    Ok(())
}

fn gradcheck_cmd(ctx: &Ctx, preset: &str, coords: usize, out: Option<PathBuf>) -> CmdResult {
    let enc = preset_config(preset)?;
    if coords == 0 {
        return Err(Failure::Usage("--coords must be positive".into()));
    }
    let gc = GradCheckConfig {
        coords_per_block: coords,
        seed: ctx.seed(),
        ..GradCheckConfig::default()
    };
    let reports = vec![
        gradcheck::check_encoder(&enc, &gc)?,
        gradcheck::check_classifier(8, 16, 2, &gc)?,
        gradcheck::check_nt_xent(4, 16, 0.05, &gc)?,
        gradcheck::check_bce(&gc)?,
    ];
    let passed = reports.iter().all(|r| r.passed);
    for r in &reports {
        info!("{}: max relative error {:.2e} ({})", r.name, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
    }
    let report = ctx.report(
        "gradcheck",
        json!({"preset": preset, "settings": gc, "passed": passed, "checks": reports}),
    )?;
    emit_json(out.as_deref(), &report)?;
    if passed {
        Ok(())
    } else {
        Err(anyhow!("gradient check failed").into())
    }
}
