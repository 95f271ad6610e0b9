use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rayon::prelude::*;
use serde::Serialize;
use tokensplit::adapters::{self, AdapterDb, AdapterSet, ConceptAdapter, Variant};
use tokensplit::analysis::{export_grid, export_rgb};
use tokensplit::container::Container;
use tokensplit::dataset::{self, gen_concept_set, gen_scenes, Example};
use tokensplit::diagnostics::{Report, RunLog};
use tokensplit::loda::{loda_sample, InferenceConfig, LodaOutput, StepDiagnostics};
use tokensplit::model::{self, image_from_latent, Checkpoint, SampleConfig};
use tokensplit::rng::SplitMix64;
use tokensplit::tensor::{Real, Tensor};
use tokensplit::text::EncodedPrompt;
use tokensplit::{Error, Result};

use crate::config::{Precision, RunConfig};
use crate::Axis;

pub struct Context {
    pub out: PathBuf,
    pub run: Option<String>,
}

impl Context {
    /// `<out>/<run>`, created on demand.
    fn run_dir(&self, default: &str) -> Result<PathBuf> {
        let dir = self.out.join(self.run.as_deref().unwrap_or(default));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn checkpoint(&self, explicit: Option<PathBuf>) -> PathBuf {
        explicit.unwrap_or_else(|| self.out.join("base.ckpt"))
    }

    fn db(&self, explicit: Option<PathBuf>) -> PathBuf {
        explicit.unwrap_or_else(|| self.out.join("adapters.db"))
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join("config.json");
    write_json(&path, cfg)?;
    println!("resolved config: {}", path.display());
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.exists() {
        return Err(Error::config(
            "checkpoint",
            format!("{} does not exist; run train-base first", path.display()),
        ));
    }
    Checkpoint::load(path)
}

fn examples(scenes: Vec<(u64, dataset::Scene)>) -> Vec<Example> {
    scenes
        .into_iter()
        .map(|(_, s)| Example {
            image: s.canvas,
            caption: s.caption,
        })
        .collect()
}

/// Training scenes from the bundle if one is configured, otherwise generated.
fn load_dataset(cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    let (h, w) = (cfg.model.height, cfg.model.width);
    let ds = &cfg.dataset;
    let data = match &ds.bundle {
        Some(path) => {
            if !path.exists() {
                return Err(Error::config(
                    "dataset.bundle",
                    format!("{} does not exist", path.display()),
                ));
            }
            let (bh, bw, data) = dataset::unbundle(&Container::<f64>::load(path)?)?;
            if (bh, bw) != (h, w) {
                return Err(Error::config(
                    "dataset.bundle",
                    format!("scenes are {bh}x{bw} but the model expects {h}x{w}"),
                ));
            }
            data
        }
        None => examples(gen_scenes(ds.first_seed, ds.count, h, w)?),
    };
    let heldout = examples(gen_scenes(ds.heldout_seed, ds.heldout_count, h, w)?);
    Ok((data, heldout))
}

pub fn gen_dataset(ctx: &Context, cfg: &RunConfig, output: Option<PathBuf>) -> Result<()> {
    cfg.model.validate()?;
    if cfg.dataset.count == 0 {
        return Err(Error::config("dataset.count", "must be positive"));
    }
    let (h, w) = (cfg.model.height, cfg.model.width);
    let scenes = gen_scenes(cfg.dataset.first_seed, cfg.dataset.count, h, w)?;
    let path = output.unwrap_or_else(|| ctx.out.join("dataset.bin"));
    ensure_parent(&path)?;
    dataset::bundle(&scenes, h, w)?.save(&path)?;
    write_json(&path.with_extension("manifest.json"), &dataset::manifest(&scenes))?;
    let mut resolved = cfg.clone();
    resolved.dataset.bundle = Some(path.clone());
    echo_config(&ctx.run_dir("gen-dataset")?, &resolved)?;
    println!("wrote {} scenes of {h}x{w} to {}", scenes.len(), path.display());
    Ok(())
}

pub fn train_base(ctx: &Context, cfg: &RunConfig, checkpoint: Option<PathBuf>, resume: bool) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_base_as::<f32>(ctx, cfg, checkpoint, resume),
        Precision::F64 => train_base_as::<f64>(ctx, cfg, checkpoint, resume),
    }
}

fn train_base_as<T: Real>(ctx: &Context, cfg: &RunConfig, checkpoint: Option<PathBuf>, resume: bool) -> Result<()> {
    cfg.validate_dataset()?;
    let path = ctx.checkpoint(checkpoint);
    let mut resolved = cfg.clone();
    let mut ck = if resume {
        let ck = load_checkpoint::<T>(&path)?;
        // a resumed run keeps the architecture it was started with
        resolved.model = ck.model.config.clone();
        ck
    } else {
        cfg.model.validate()?;
        Checkpoint::fresh(cfg.model.clone(), cfg.model_seed, cfg.train.lr)?
    };
    let (data, heldout) = load_dataset(&resolved)?;
    let dir = ctx.run_dir("train-base")?;
    echo_config(&dir, &resolved)?;
    let log = model::train_base(&mut ck, &data, &heldout, &resolved.train)?;
    ensure_parent(&path)?;
    ck.save(&path)?;
    write_json(&dir.join("train_log.json"), &log)?;
    println!(
        "steps {}..{}: held-out loss {:.4} -> {:.4}; checkpoint {}",
        log.start_step,
        log.end_step,
        log.heldout_before,
        log.heldout_after,
        path.display()
    );
    Ok(())
}

pub fn train_adapter(
    ctx: &Context,
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    db: Option<PathBuf>,
    overwrite: bool,
) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_adapter_as::<f32>(ctx, cfg, checkpoint, db, overwrite),
        Precision::F64 => train_adapter_as::<f64>(ctx, cfg, checkpoint, db, overwrite),
    }
}

fn train_adapter_as<T: Real>(
    ctx: &Context,
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    db: Option<PathBuf>,
    overwrite: bool,
) -> Result<()> {
    cfg.adapter.validate()?;
    if cfg.concept.images < adapters::MIN_CONCEPT_IMAGES {
        return Err(Error::config(
            "concept.images",
            format!("need at least {}", adapters::MIN_CONCEPT_IMAGES),
        ));
    }
    let ck = load_checkpoint::<T>(&ctx.checkpoint(checkpoint))?;
    let mut resolved = cfg.clone();
    resolved.model = ck.model.config.clone();
    let spec = cfg.concept.kind.spec();
    let variant = cfg.adapter.variant;
    let word = cfg.concept.word.clone().unwrap_or_else(|| spec.word.clone());
    let name = cfg.concept.name.clone().unwrap_or_else(|| match variant {
        Variant::Value => spec.name.clone(),
        v => format!("{}@{v}", spec.name),
    });
    resolved.concept.name = Some(name.clone());
    resolved.concept.word = Some(word.clone());

    let db_path = ctx.db(db);
    let mut db = AdapterDb::<T>::open(&db_path)?;
    if !overwrite && db.get(&name).is_ok() {
        return Err(Error::ConceptExists(name));
    }
    let (h, w) = (resolved.model.height, resolved.model.width);
    let images: Vec<Tensor<f64>> = gen_concept_set(&spec, cfg.concept.images, cfg.concept.seed, h, w)?
        .into_iter()
        .map(|c| c.canvas)
        .collect();
    let dir = ctx.run_dir(&format!("adapter-{name}"))?;
    echo_config(&dir, &resolved)?;
    let (adapter, log) = adapters::train_adapter(&ck.model, &images, &name, &word, &cfg.adapter)?;
    db.insert(adapter, overwrite)?;
    ensure_parent(&db_path)?;
    db.save(&db_path)?;
    write_json(&dir.join("adapter_log.json"), &log)?;
    println!(
        "adapter `{name}` ({variant}, rank {}) on `{word}`: concept loss {:.4} -> {:.4}; database {}",
        cfg.adapter.rank,
        log.initial_loss,
        log.final_loss,
        db_path.display()
    );
    Ok(())
}

pub fn list_adapters(ctx: &Context, cfg: &RunConfig, db: Option<PathBuf>) -> Result<()> {
    let path = ctx.db(db);
    // listing reads metadata only, so precision is irrelevant
    let _ = cfg;
    let db = AdapterDb::<f64>::open(&path)?;
    if db.is_empty() {
        println!("no adapters in {}", path.display());
        return Ok(());
    }
    println!(
        "{:<24} {:<10} {:<10} {:>5} {:>7} {:>6} {:>10}",
        "name", "word", "variant", "rank", "blocks", "iters", "loss"
    );
    for a in db.listing() {
        let loss = a.info.final_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
        println!(
            "{:<24} {:<10} {:<10} {:>5} {:>7} {:>6} {:>10}",
            a.name,
            a.word,
            a.variant.to_string(),
            a.rank,
            a.blocks,
            a.info.iterations,
            loss
        );
    }
    Ok(())
}

/// Prompt, resolved adapters and separated token positions for one run.
struct Prepared<T> {
    prompt: EncodedPrompt,
    adapters: Vec<ConceptAdapter<T>>,
    tokens: Vec<usize>,
}

/// The adapter named `name` if it has `variant`, else `name@variant`.
fn variant_name<T: Real>(db: &AdapterDb<T>, name: &str, variant: Variant) -> String {
    match db.get(name) {
        Ok(a) if a.variant == variant => name.to_string(),
        _ => format!("{name}@{variant}"),
    }
}

fn prepare<T: Real>(
    model: &model::DenoiserModel<T>,
    db: &AdapterDb<T>,
    cfg: &RunConfig,
    variant: Option<Variant>,
) -> Result<Prepared<T>> {
    let prompt = model.encode(&cfg.prompt)?;
    let mut adapters = Vec::with_capacity(cfg.bindings.len());
    for b in &cfg.bindings {
        let name = match variant {
            Some(v) => variant_name(db, &b.concept, v),
            None => b.concept.clone(),
        };
        let mut a = db.get(&name)?.clone();
        if let Some(word) = &b.word {
            a.word = word.clone();
        }
        adapters.push(a);
    }
    let words: Vec<String> = if cfg.tokens.is_empty() {
        let mut words: Vec<String> = Vec::new();
        for a in &adapters {
            if !words.contains(&a.word) {
                words.push(a.word.clone());
            }
        }
        words
    } else {
        cfg.tokens.clone()
    };
    let tokens = words.iter().map(|w| prompt.position(w)).collect::<Result<Vec<_>>>()?;
    let loda = cfg.inference.stage1 || cfg.inference.afg;
    if loda && tokens.is_empty() {
        return Err(Error::config(
            "tokens",
            "disentangled sampling needs tokens: bind adapters or pass --tokens",
        ));
    }
    Ok(Prepared {
        prompt,
        adapters,
        tokens,
    })
}

fn run_one<T: Real>(
    model: &model::DenoiserModel<T>,
    prep: &Prepared<T>,
    cfg: &RunConfig,
    inference: &InferenceConfig,
) -> Result<LodaOutput<T>> {
    let refs: Vec<&ConceptAdapter<T>> = prep.adapters.iter().collect();
    let set = if cfg.use_adapters && !refs.is_empty() {
        Some(AdapterSet::for_prompt(cfg.merge, &refs, &prep.prompt)?)
    } else {
        None
    };
    loda_sample(model, &prep.prompt, &prep.tokens, set.as_ref(), inference)
}

fn open_db<T: Real>(ctx: &Context, cfg: &RunConfig, db: Option<PathBuf>) -> Result<AdapterDb<T>> {
    if cfg.bindings.is_empty() {
        Ok(AdapterDb::new())
    } else {
        AdapterDb::open(&ctx.db(db))
    }
}

fn load_for_inference<T: Real>(
    ctx: &Context,
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
) -> Result<(model::DenoiserModel<T>, RunConfig)> {
    let ck = load_checkpoint::<T>(&ctx.checkpoint(checkpoint))?;
    let mut resolved = cfg.clone();
    resolved.model = ck.model.config.clone();
    resolved.validate()?;
    Ok((ck.model, resolved))
}

fn grid(maps: &[Vec<f64>], height: usize, width: usize) -> Result<Vec<Tensor<f64>>> {
    maps.iter()
        .map(|m| Ok(Tensor::from_vec(&[height, width], m.clone())?))
        .collect()
}

fn mask_grid(step: &StepDiagnostics, height: usize, width: usize) -> Result<Vec<Tensor<f64>>> {
    let masks: Vec<Vec<f64>> = step
        .mask_bools(height * width)
        .iter()
        .map(|m| m.iter().map(|&b| f64::from(u8::from(b))).collect())
        .collect();
    grid(&masks, height, width)
}

pub fn infer(ctx: &Context, cfg: &RunConfig, checkpoint: Option<PathBuf>, db: Option<PathBuf>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => infer_as::<f32>(ctx, cfg, checkpoint, db),
        Precision::F64 => infer_as::<f64>(ctx, cfg, checkpoint, db),
    }
}

#[derive(Serialize)]
struct InferSummary {
    words: Vec<String>,
    final_iou: Option<f64>,
    masks_nonempty: Option<bool>,
    final_klh: Option<f64>,
}

fn infer_as<T: Real>(ctx: &Context, cfg: &RunConfig, checkpoint: Option<PathBuf>, db: Option<PathBuf>) -> Result<()> {
    let (model, resolved) = load_for_inference::<T>(ctx, cfg, checkpoint)?;
    let db = open_db::<T>(ctx, &resolved, db)?;
    let prep = prepare(&model, &db, &resolved, None)?;
    let dir = ctx.run_dir("infer")?;
    echo_config(&dir, &resolved)?;
    let (h, w) = (model.config.height, model.config.width);
    let ic = &resolved.inference;

    if prep.tokens.is_empty() {
        // nothing to separate or measure: plain guided sampling
        let refs: Vec<&ConceptAdapter<T>> = prep.adapters.iter().collect();
        let set = (resolved.use_adapters && !refs.is_empty())
            .then(|| AdapterSet::for_prompt(resolved.merge, &refs, &prep.prompt))
            .transpose()?;
        let sample_cfg = SampleConfig {
            steps: ic.steps,
            guidance: ic.guidance,
            seed: ic.seed,
            record_attention: false,
        };
        let out = model.sample(&prep.prompt, set.as_ref(), &sample_cfg)?;
        export_rgb(&image_from_latent(&out.latent), &dir.join("image.ppm"))?;
        println!("wrote {}", dir.join("image.ppm").display());
        return Ok(());
    }

    let out = match run_one(&model, &prep, &resolved, ic) {
        Err(Error::NumericFailure { step, detail, maps }) => {
            write_json(
                &dir.join("failure.json"),
                &serde_json::json!({"step": step, "detail": detail, "maps": maps}),
            )?;
            return Err(Error::NumericFailure { step, detail, maps });
        }
        other => other?,
    };
    let run_id = dir
        .file_name()
        .map_or("infer".into(), |n| n.to_string_lossy().into_owned());
    let log = RunLog::from_output(run_id, h, w, &out, serde_json::to_value(&resolved)?);
    log.write(&dir.join("diagnostics.jsonl"))?;
    export_rgb(&image_from_latent(&out.latent), &dir.join("image.ppm"))?;
    if ic.record_maps {
        let maps_dir = dir.join("maps");
        fs::create_dir_all(&maps_dir)?;
        for s in &out.steps {
            if let Some(maps) = &s.maps {
                export_grid(&grid(maps, h, w)?, &maps_dir.join(format!("step_{:02}.pgm", s.step)))?;
            }
        }
        if let Some(last) = out.steps.last() {
            export_grid(&mask_grid(last, h, w)?, &maps_dir.join("masks.pgm"))?;
        }
    }
    let pairs = out.words.len() >= 2;
    let summary = InferSummary {
        words: out.words.clone(),
        final_iou: pairs.then(|| out.final_iou()),
        masks_nonempty: Some(out.final_masks_nonempty()),
        final_klh: out.steps.last().and_then(|s| s.klh),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    match summary.final_iou {
        Some(iou) => println!(
            "tokens [{}]: final mask IoU {iou:.4}, masks nonempty: {}",
            out.words.join(", "),
            out.final_masks_nonempty()
        ),
        None => println!("tokens [{}]", out.words.join(", ")),
    }
    println!("wrote {}", dir.display());
    Ok(())
}

/// One point of a sweep.
struct Setting {
    label: String,
    inference: InferenceConfig,
    variant: Option<Variant>,
}

fn parse_number<N: std::str::FromStr>(s: &str) -> Result<N> {
    s.trim()
        .parse()
        .map_err(|_| Error::config("values", format!("`{s}` is not a valid number for this axis")))
}

fn settings(axis: Axis, values: &[String], base: &InferenceConfig, timesteps: usize) -> Result<Vec<Setting>> {
    if values.is_empty() {
        return Err(Error::config("values", "at least one value is required"));
    }
    values
        .iter()
        .map(|s| {
            let mut inference = base.clone();
            let mut variant = None;
            match axis {
                Axis::Gamma => inference.percentile = parse_number(s)?,
                Axis::P => inference.amplify = parse_number(s)?,
                Axis::M => inference.suppress = parse_number(s)?,
                Axis::N => inference.stage1_steps = parse_number(s)?,
                Axis::Variant => variant = Some(s.trim().parse::<Variant>()?),
            }
            inference.validate(timesteps)?;
            Ok(Setting {
                label: s.trim().to_string(),
                inference,
                variant,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct AblationRow {
    value: String,
    run: usize,
    seed: u64,
    iou: f64,
    guidance_iou: Option<f64>,
    masks_nonempty: bool,
    mean_entropy: f64,
    klh: Option<f64>,
    kl_loss: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AblationSummary {
    value: String,
    runs: usize,
    mean_iou: f64,
    median_iou: f64,
    nonempty_fraction: f64,
    mean_entropy: f64,
    mean_klh: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn summarize(label: &str, rows: &[&AblationRow]) -> AblationSummary {
    let ious: Vec<f64> = rows.iter().map(|r| r.iou).collect();
    let entropies: Vec<f64> = rows.iter().map(|r| r.mean_entropy).collect();
    let klh: Option<Vec<f64>> = rows.iter().map(|r| r.klh).collect();
    AblationSummary {
        value: label.to_string(),
        runs: rows.len(),
        mean_iou: mean(&ious),
        median_iou: median(&ious),
        nonempty_fraction: rows.iter().filter(|r| r.masks_nonempty).count() as f64 / rows.len() as f64,
        mean_entropy: mean(&entropies),
        mean_klh: klh.map(|k| mean(&k)),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("value,run,seed,iou,guidance_iou,masks_nonempty,mean_entropy,klh,kl_loss\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.value,
            r.run,
            r.seed,
            r.iou,
            opt(r.guidance_iou),
            r.masks_nonempty,
            r.mean_entropy,
            opt(r.klh),
            opt(r.kl_loss)
        );
    }
    out
}

pub fn ablate(
    ctx: &Context,
    cfg: &RunConfig,
    axis: Axis,
    values: &[String],
    runs: usize,
    checkpoint: Option<PathBuf>,
    db: Option<PathBuf>,
) -> Result<()> {
    match cfg.precision {
        Precision::F32 => ablate_as::<f32>(ctx, cfg, axis, values, runs, checkpoint, db),
        Precision::F64 => ablate_as::<f64>(ctx, cfg, axis, values, runs, checkpoint, db),
    }
}

fn ablate_as<T: Real>(
    ctx: &Context,
    cfg: &RunConfig,
    axis: Axis,
    values: &[String],
    runs: usize,
    checkpoint: Option<PathBuf>,
    db: Option<PathBuf>,
) -> Result<()> {
    if runs == 0 {
        return Err(Error::config("runs", "must be positive"));
    }
    let (model, mut resolved) = load_for_inference::<T>(ctx, cfg, checkpoint)?;
    resolved.inference.record_maps = false;
    let points = settings(axis, values, &resolved.inference, model.config.train_timesteps)?;
    let db = open_db::<T>(ctx, &resolved, db)?;
    let preps = points
        .iter()
        .map(|p| prepare(&model, &db, &resolved, p.variant))
        .collect::<Result<Vec<_>>>()?;
    if preps.iter().any(|p| p.tokens.is_empty()) {
        return Err(Error::config(
            "tokens",
            "a sweep needs tokens: bind adapters or pass --tokens",
        ));
    }
    let axis_name = axis
        .to_possible_value()
        .map_or("axis".into(), |v| v.get_name().to_string());
    let dir = ctx.run_dir(&format!("ablate-{axis_name}"))?;
    echo_config(&dir, &resolved)?;

    // paired design: run r uses the same seed at every value
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|v| (0..runs).map(move |r| (v, r))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(v, r)| {
            let seed = SplitMix64::stream(resolved.inference.seed, r as u64).next_u64();
            let inference = InferenceConfig {
                seed,
                ..points[v].inference.clone()
            };
            let out = run_one(&model, &preps[v], &resolved, &inference)?;
            let last = out.steps.last();
            Ok(AblationRow {
                value: points[v].label.clone(),
                run: r,
                seed,
                iou: out.final_iou(),
                guidance_iou: last.and_then(|s| s.guidance_iou),
                masks_nonempty: out.final_masks_nonempty(),
                mean_entropy: last.map_or(f64::NAN, |s| mean(&s.entropy)),
                klh: last.and_then(|s| s.klh),
                kl_loss: last.and_then(|s| s.kl_loss),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summaries: Vec<AblationSummary> = points
        .iter()
        .map(|p| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.value == p.label).collect();
            summarize(&p.label, &mine)
        })
        .collect();
    fs::write(dir.join("ablation.csv"), ablation_csv(&rows))?;
    write_json(
        &dir.join("ablation.json"),
        &serde_json::json!({"schema": 1, "axis": axis_name, "summary": summaries, "rows": rows}),
    )?;
    println!(
        "{:<12} {:>10} {:>10} {:>9} {:>12}",
        axis_name, "mean IoU", "median", "nonempty", "entropy"
    );
    for s in &summaries {
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>9.2} {:>12.4}",
            s.value, s.mean_iou, s.median_iou, s.nonempty_fraction, s.mean_entropy
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn analyze(ctx: &Context, diagnostics: &Path) -> Result<()> {
    let log = RunLog::read(diagnostics)?;
    let report = Report::from_log(&log)?;
    let dir = match &ctx.run {
        Some(run) => ctx.out.join(run),
        None => diagnostics
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    let (h, w) = (log.header.height, log.header.width);
    if let Some(step) = log.steps.iter().rev().find(|s| s.maps.is_some()) {
        if let Some(maps) = &step.maps {
            export_grid(&grid(maps, h, w)?, &dir.join("maps_final.pgm"))?;
        }
    }
    if let Some(last) = log.steps.last().filter(|s| !s.mask_counts.is_empty()) {
        export_grid(&mask_grid(last, h, w)?, &dir.join("masks_final.pgm"))?;
    }

    print!("{:<12} {:>14}", "token", "entropy delta");
    for word in &report.words {
        print!(" {word:>10}");
    }
    println!();
    for (i, word) in report.words.iter().enumerate() {
        print!("{word:<12} {:>14.6}", report.entropy_delta[i]);
        for v in &report.iou[i] {
            print!(" {v:>10.4}");
        }
        println!();
    }
    println!("wrote {}", dir.display());
    Ok(())
}
