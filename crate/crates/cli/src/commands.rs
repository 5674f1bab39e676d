use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crossmodal_har::evaluation::{
    compare_models, evaluate, measure_latency, predict, Condition, EvalOptions, EvalReport, LatencyConfig,
};
use crossmodal_har::ingest::{load_recording, read_recording_csv, write_recording_csv, Scenario, SensorRecording, CLASS_NAMES};
use crossmodal_har::models::{count_flops, count_inference_params, count_params, inference_costs, Variant, WINDOW_LEN};
use crossmodal_har::study::{deployment_condition, ModelSize};
use crossmodal_har::synthetic::{generate_study, StudyManifest, SynthConfig};
use crossmodal_har::training::{load_checkpoint_for, save_checkpoint, train_with_observer, TrainConfig, TrainData, TrainEvent};
use crossmodal_har::windowing::{fit_norm_stats, make_splits, normalize, slide_windows, NormStats, SplitSpec, WindowedSample, WINDOW_SIZE, WINDOW_STEP};

use crate::{Command, Common};

/// Everything a run can be configured with; each section is optional in
/// the config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub size: ModelSize,
    pub latency: LatencyConfig,
}

impl CliConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let cfg = serde_json::from_str(&text).map_err(crossmodal_har::Error::from)?;
                Ok(cfg)
            }
        }
    }
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    subcommand: &'a str,
    argv: Vec<String>,
    version: &'a str,
    seed: Option<u64>,
    num_workers: usize,
    config: &'a CliConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else if p.file_name().is_some_and(|n| n != "run.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn hashes(paths: &[PathBuf], root: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    for p in paths {
        if p.exists() {
            files_under(p, &mut files)?;
        }
    }
    files
        .into_iter()
        .map(|f| {
            let key = f.strip_prefix(root).unwrap_or(&f).display().to_string();
            Ok((key, sha256_file(&f)?))
        })
        .collect()
}

struct Stage<'a> {
    name: &'a str,
    common: &'a Common,
    config: CliConfig,
    dir: PathBuf,
    inputs: Vec<PathBuf>,
}

impl<'a> Stage<'a> {
    fn new(name: &'a str, common: &'a Common, dir: PathBuf) -> Result<Self> {
        let config = CliConfig::load(common.config.as_deref())?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut inputs = Vec::new();
        if let Some(c) = &common.config {
            inputs.push(c.clone());
        }
        Ok(Self {
            name,
            common,
            config,
            dir,
            inputs,
        })
    }

    fn finish(self, seed: Option<u64>) -> Result<()> {
        let record = RunRecord {
            subcommand: self.name,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            num_workers: num_workers()?,
            config: &self.config,
            inputs: hashes(&self.inputs, &self.common.out)?,
            outputs: hashes(&[self.dir.clone()], &self.common.out)?,
        };
        write_json(&self.dir.join("run.json"), &record)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(crossmodal_har::Error::from)?)
}

/// Bound on data-loading threads from `HAR_NUM_WORKERS` (default 1).
pub fn num_workers() -> Result<usize> {
    match std::env::var("HAR_NUM_WORKERS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(crossmodal_har::Error::Config(format!("HAR_NUM_WORKERS must be a positive integer, got `{v}`")).into()),
        },
    }
}

/// Map `f` over `items` on up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn raw_dir(out: &Path) -> PathBuf {
    out.join("raw")
}

fn ingested_dir(out: &Path) -> PathBuf {
    out.join("ingested")
}

fn windows_dir(out: &Path) -> PathBuf {
    out.join("windows")
}

pub fn model_dir(out: &Path, v: Variant) -> PathBuf {
    out.join("models").join(variant_slug(v))
}

fn variant_slug(v: Variant) -> &'static str {
    match v {
        Variant::LightHar => "lighthar",
        Variant::InertialHar => "inertialhar",
        Variant::MultiLight => "multilight",
        Variant::ContraLight => "contralight",
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IngestedRecording {
    subject_id: u32,
    scenario: Scenario,
    file: PathBuf,
    samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitManifest {
    seed: u64,
    spec: SplitSpec,
    window_size: usize,
    window_step: usize,
    splits: BTreeMap<String, Vec<(u32, usize)>>,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            common,
            session_seconds,
        } => synth(&common, session_seconds),
        Command::Ingest { common, data } => ingest(&common, data),
        Command::Window { common } => window(&common),
        Command::Train {
            common,
            model,
            eq2_literal,
            margin,
            max_epochs,
            learning_rate,
        } => train_cmd(&common, model, eq2_literal, margin, max_epochs, learning_rate),
        Command::Eval {
            common,
            model,
            test_set,
            condition,
            latency,
        } => eval_cmd(&common, model, test_set, condition, latency),
        Command::Bench {
            common,
            model,
            passes,
            warmup,
        } => bench(&common, model, passes, warmup),
        Command::Flops { common, model } => flops(&common, model),
        Command::Compare {
            common,
            reports,
            baseline,
        } => compare(&common, &reports, baseline),
    }
}

fn synth(common: &Common, session_seconds: Option<f64>) -> Result<()> {
    let mut stage = Stage::new("synth", common, raw_dir(&common.out))?;
    if let Some(s) = common.seed {
        stage.config.synth.seed = s;
    }
    if let Some(s) = session_seconds {
        stage.config.synth.session_seconds = s;
    }
    let study = generate_study(&stage.config.synth, &stage.dir)?;
    println!("wrote {} subjects to {}", study.subjects.len(), stage.dir.display());
    let seed = stage.config.synth.seed;
    stage.finish(Some(seed))
}

fn ingest(common: &Common, data: Option<PathBuf>) -> Result<()> {
    let data = data.unwrap_or_else(|| raw_dir(&common.out));
    let mut stage = Stage::new("ingest", common, ingested_dir(&common.out))?;
    let study_path = data.join("study.json");
    let study: StudyManifest = read_json(&study_path)?;
    stage.inputs.push(data.clone());
    let recordings = parallel_map(&study.subjects, num_workers()?, |s| Ok(load_recording(&data.join(&s.manifest))?))?;
    let mut index = Vec::new();
    for rec in &recordings {
        let file = PathBuf::from(format!("subject_{:02}.csv", rec.subject_id));
        write_recording_csv(&stage.dir.join(&file), rec)?;
        index.push(IngestedRecording {
            subject_id: rec.subject_id,
            scenario: rec.scenario,
            file,
            samples: rec.len(),
        });
    }
    write_json(&stage.dir.join("recordings.json"), &index)?;
    println!("ingested {} recordings into {}", index.len(), stage.dir.display());
    stage.finish(None)
}

fn load_ingested(out: &Path) -> Result<Vec<SensorRecording>> {
    let dir = ingested_dir(out);
    let index: Vec<IngestedRecording> = read_json(&dir.join("recordings.json"))?;
    parallel_map(&index, num_workers()?, |r| {
        Ok(read_recording_csv(&dir.join(&r.file), r.subject_id, r.scenario)?)
    })
}

fn window(common: &Common) -> Result<()> {
    let mut stage = Stage::new("window", common, windows_dir(&common.out))?;
    stage.inputs.push(ingested_dir(&common.out));
    let seed = common.seed.unwrap_or(stage.config.train.seed);
    let recordings = load_ingested(&common.out)?;
    let splits = make_splits(&recordings, &stage.config.split, seed, WINDOW_SIZE, WINDOW_STEP)?;
    let stats = fit_norm_stats(&splits.train)?;
    write_json(&stage.dir.join("norm_stats.json"), &stats)?;
    let manifest = SplitManifest {
        seed,
        spec: stage.config.split.clone(),
        window_size: WINDOW_SIZE,
        window_step: WINDOW_STEP,
        splits: splits.manifest(),
    };
    write_json(&stage.dir.join("splits.json"), &manifest)?;
    for (name, ids) in &manifest.splits {
        println!("{name}: {} windows", ids.len());
    }
    stage.finish(Some(seed))
}

/// Normalized windows of one named split, rebuilt from the ingested
/// recordings and the split manifest.
fn split_windows(out: &Path, split: &str) -> Result<(Vec<WindowedSample>, NormStats)> {
    let stats: NormStats = read_json(&windows_dir(out).join("norm_stats.json"))?;
    let raw = raw_split_windows(out, split)?;
    Ok((raw.iter().map(|w| normalize(w, &stats)).collect(), stats))
}

fn raw_split_windows(out: &Path, split: &str) -> Result<Vec<WindowedSample>> {
    let dir = windows_dir(out);
    let manifest: SplitManifest = read_json(&dir.join("splits.json"))?;
    let ids = manifest
        .splits
        .get(split)
        .ok_or_else(|| crossmodal_har::Error::Data(format!("split `{split}` not in splits.json")))?;
    let recordings = load_ingested(out)?;
    let mut by_subject: BTreeMap<u32, Vec<WindowedSample>> = BTreeMap::new();
    for rec in &recordings {
        if ids.iter().any(|(s, _)| *s == rec.subject_id) {
            by_subject.insert(rec.subject_id, slide_windows(rec, manifest.window_size, manifest.window_step)?);
        }
    }
    let windows = ids
        .iter()
        .map(|(s, i)| {
            by_subject
                .get(s)
                .and_then(|w| w.get(*i))
                .cloned()
                .ok_or_else(|| crossmodal_har::Error::Data(format!("window {i} of subject {s} not found")).into())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(windows)
}

fn jsonl_line<T: Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

fn train_cmd(
    common: &Common,
    model: Variant,
    eq2_literal: bool,
    margin: Option<f64>,
    max_epochs: Option<usize>,
    learning_rate: Option<f64>,
) -> Result<()> {
    let mut stage = Stage::new("train", common, model_dir(&common.out, model))?;
    stage.inputs.push(windows_dir(&common.out));
    stage.inputs.push(ingested_dir(&common.out));
    let cfg = &mut stage.config.train;
    cfg.variant = model;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.eq2_literal |= eq2_literal;
    if let Some(m) = margin {
        cfg.margin = m;
    }
    if let Some(e) = max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(lr) = learning_rate {
        cfg.learning_rate = lr;
    }
    let cfg = cfg.clone();
    let (train, stats) = split_windows(&common.out, "train")?;
    let refit = fit_norm_stats(&raw_split_windows(&common.out, "train")?)?;
    if serde_json::to_vec(&refit)? != serde_json::to_vec(&stats)? {
        bail!(crossmodal_har::Error::Validation(
            "norm_stats.json does not match statistics of the training split".into()
        ));
    }
    let (val, _) = split_windows(&common.out, "val")?;
    let data = TrainData { train, val };

    let epoch_path = stage.dir.join("train_log.jsonl");
    let loss_path = stage.dir.join("loss_log.jsonl");
    let mut epoch_log = std::io::BufWriter::new(fs::File::create(&epoch_path)?);
    let mut loss_log = std::io::BufWriter::new(fs::File::create(&loss_path)?);
    let mut io_err: Option<std::io::Error> = None;
    let mut observer = |ev: TrainEvent<'_>| {
        let r = match ev {
            TrainEvent::Step { step, losses, .. } => jsonl_line(
                &mut loss_log,
                &serde_json::json!({
                    "step": step,
                    "l_co": losses.l_co,
                    "l_ce_light": losses.l_ce_light,
                    "l_ce_imu": losses.l_ce_imu,
                    "l_total": losses.l_total,
                }),
            ),
            TrainEvent::Epoch(e) => jsonl_line(
                &mut epoch_log,
                &serde_json::json!({
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "val_loss": e.val_loss,
                    "val_acc": e.val_acc,
                    "lr": e.lr,
                    "seconds": e.seconds,
                }),
            ),
        };
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
    };
    let (state, record) = train_with_observer(stage.config.size.spec(model), &data, &cfg, &mut observer)?;
    if let Some(e) = io_err {
        return Err(e).context("writing training logs");
    }
    epoch_log.flush()?;
    loss_log.flush()?;
    save_checkpoint(&state, Some(&record), &stage.dir.join("checkpoint"))?;
    write_json(&stage.dir.join("record.json"), &record)?;
    println!(
        "{model}: best epoch {} (val loss {:.4}), stopped at {}",
        record.best_epoch, record.best_val_loss, record.stop_epoch
    );
    stage.finish(Some(cfg.seed))
}

fn parse_condition(v: Variant, condition: Option<String>) -> Result<Condition> {
    Ok(match condition {
        Some(c) => c.parse()?,
        None => deployment_condition(v),
    })
}

fn eval_cmd(common: &Common, model: Variant, test_set: u8, condition: Option<String>, latency: bool) -> Result<()> {
    let condition = parse_condition(model, condition)?;
    let name = format!("test{test_set}");
    let dir = common
        .out
        .join("eval")
        .join(format!("{}_{name}_{}", variant_slug(model), condition.name()));
    let mut stage = Stage::new("eval", common, dir)?;
    let ckpt = model_dir(&common.out, model).join("checkpoint");
    stage.inputs.extend([ckpt.clone(), windows_dir(&common.out), ingested_dir(&common.out)]);
    let state = load_checkpoint_for(&ckpt, &stage.config.size.spec(model).with_margin_of(&stage.config.train))?;
    let (windows, _) = split_windows(&common.out, &name)?;
    let opts = EvalOptions {
        test_set: name,
        latency: latency.then_some(stage.config.latency),
        batch_size: None,
    };
    let report = evaluate(&state, &windows, condition, &opts)?;
    write_json(&stage.dir.join("report.json"), &report)?;
    fs::write(stage.dir.join("confusion.csv"), report.confusion.to_csv(&CLASS_NAMES))?;
    println!(
        "{model} on {} ({}): accuracy {:.4}, macro F1 {:.4}, {} windows",
        report.test_set,
        condition.name(),
        report.accuracy,
        report.macro_f1,
        report.n_windows
    );
    stage.finish(Some(state.seed))
}

trait WithMargin {
    fn with_margin_of(self, cfg: &TrainConfig) -> Self;
}

impl WithMargin for crossmodal_har::models::ModelSpec {
    fn with_margin_of(mut self, cfg: &TrainConfig) -> Self {
        if self.contrastive_margin.is_some() {
            self.contrastive_margin = Some(cfg.margin);
        }
        self
    }
}

fn bench(common: &Common, model: Variant, passes: usize, warmup: usize) -> Result<()> {
    if passes == 0 {
        bail!(crossmodal_har::Error::Config("need at least one timed pass".into()));
    }
    let mut stage = Stage::new("bench", common, common.out.join("bench").join(variant_slug(model)))?;
    let ckpt = model_dir(&common.out, model).join("checkpoint");
    stage.inputs.push(ckpt.clone());
    let state = load_checkpoint_for(&ckpt, &stage.config.size.spec(model).with_margin_of(&stage.config.train))?;
    stage.config.latency = LatencyConfig { warmup, passes };
    let condition = deployment_condition(model);
    // a fixed pseudo-random window; latency does not depend on values
    let window = WindowedSample {
        als: (0..WINDOW_LEN).map(|i| (i as f64 * 0.37).sin()).collect(),
        imu: (0..3 * WINDOW_LEN).map(|i| (i as f64 * 0.11).cos()).collect(),
        label: 0,
        als_present: true,
        imu_present: true,
        subject_id: 0,
        scenario: Scenario::FixedIndoor,
        index: 0,
    };
    let stats = measure_latency(&stage.config.latency, || predict(&state, &[&window], condition).map(|_| ()))?;
    let out = serde_json::json!({
        "variant": model,
        "condition": condition,
        "latency_ms": stats,
        "params": count_inference_params(&state.spec),
        "flops": count_flops(&state.spec, state.spec.seq_len),
    });
    write_json(&stage.dir.join("latency.json"), &out)?;
    println!(
        "{model}: median {:.3} ms, p95 {:.3} ms, std {:.3} ms over {} passes",
        stats.median, stats.p95, stats.std, stats.passes
    );
    stage.finish(None)
}

fn flops(common: &Common, model: Variant) -> Result<()> {
    let stage = Stage::new("flops", common, common.out.join("flops").join(variant_slug(model)))?;
    let spec = stage.config.size.spec(model);
    spec.validate()?;
    let rows = inference_costs(&spec, WINDOW_LEN);
    let mut text = format!("{:<28} {:>12} {:>14}\n", "layer", "params", "flops");
    for r in &rows {
        text.push_str(&format!("{:<28} {:>12} {:>14}\n", r.layer, r.params, r.flops));
    }
    let inference_params = count_inference_params(&spec);
    let total_flops = count_flops(&spec, WINDOW_LEN);
    text.push_str(&format!("{:<28} {:>12} {:>14}\n", "total (inference)", inference_params, total_flops));
    text.push_str(&format!("{:<28} {:>12}\n", "total (training graph)", count_params(&spec)));
    print!("{text}");
    fs::write(stage.dir.join("flops.txt"), &text)?;
    write_json(
        &stage.dir.join("flops.json"),
        &serde_json::json!({
            "variant": model,
            "seq_len": WINDOW_LEN,
            "layers": rows,
            "inference_params": inference_params,
            "train_params": count_params(&spec),
            "flops": total_flops,
        }),
    )?;
    stage.finish(None)
}

fn compare(common: &Common, paths: &[PathBuf], baseline: Variant) -> Result<()> {
    let mut stage = Stage::new("compare", common, common.out.join("compare"))?;
    let reports = paths
        .iter()
        .map(|p| read_json::<EvalReport>(p))
        .collect::<Result<Vec<_>>>()?;
    stage.inputs.extend(paths.iter().cloned());
    let cmp = compare_models(&reports, baseline)?;
    let text = cmp.to_text();
    print!("{text}");
    fs::write(stage.dir.join("comparison.txt"), &text)?;
    write_json(&stage.dir.join("comparison.json"), &cmp)?;
    stage.finish(None)
}
