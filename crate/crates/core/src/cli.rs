//! The `rmt` command line: `gen`, `train`, `eval`, `predict`, `gradcheck`.
//!
//! Every subcommand accepts `--config FILE` with `key = value` lines (`#`
//! starts a comment). File entries are expanded into flags placed before the
//! ones given on the command line, so explicit flags win. Exit codes: 0 on
//! success, 1 on runtime or IO failure, 2 on usage or validation errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use crate::data::{
    decode_pgm, encode_pgm16, load_dataset, write_dataset, Dataset, GenerateOptions, GeoMap, LayoutParams,
    RadioMap, Sample, SynthChannelParams,
};
use crate::error::{Error, Result};
use crate::model::{read_card, write_card, Model, ModelCard, ModelConfig, ModelKind};
use crate::tensor::OpKind;
use crate::train::{
    evaluate_predictions, metric_rmse, predict_maps, sha256_hex, train, write_loss_csv, MetricsReport, TrainConfig,
};
use crate::verify::gradient_suite;

#[derive(Parser, Debug)]
#[command(name = "rmt", version, about = "Radio-map prediction with a multi-axis attention encoder-decoder")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on the training split.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Write predicted radio maps as 16-bit PGM images.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct Shared {
    /// Seed for every random stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model profile: desk, desk-mini or paper.
    #[arg(long)]
    profile: Option<String>,
    /// File of `key = value` lines; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    count: usize,
    /// Map side in cells; defaults to the profile's input extent.
    #[arg(long)]
    size: Option<usize>,
    /// Number of buildings per map.
    #[arg(long)]
    rects: Option<usize>,
    #[arg(long)]
    rect_min: Option<usize>,
    #[arg(long)]
    rect_max: Option<usize>,
    /// Cell edge, meters.
    #[arg(long, default_value_t = 0.86)]
    cell_size: f64,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long, default_value_t = 32.4)]
    beta: f64,
    /// Shadow-fading standard deviation, dB.
    #[arg(long, default_value_t = 6.0)]
    sigma: f64,
    /// Loss per building cell crossed, dB.
    #[arg(long, default_value_t = 10.0)]
    wall_loss: f64,
    /// Minimum distance, meters.
    #[arg(long, default_value_t = 1.0)]
    d0: f64,
    /// Shadow-fading box filter half-width, cells.
    #[arg(long, default_value_t = 2)]
    sf_smooth: usize,
    /// Transmit power, dBm.
    #[arg(long, default_value_t = 0.0)]
    tx_power: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ModelArgs {
    /// Architecture: rmt or baseline.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Blocks per encoder stage.
    #[arg(long)]
    depth: Option<usize>,
    /// Width of the output head's refinement conv (0 disables it).
    #[arg(long)]
    head_channels: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    /// Dataset directory.
    #[arg(long)]
    #[serde(skip)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Loss trace path; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    #[serde(skip)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr_start: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr_end: f64,
    /// Average the loss over RoI pixels only.
    #[arg(long)]
    roi_loss: bool,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    #[serde(skip)]
    data: PathBuf,
    /// Checkpoint to evaluate; not needed with --oracle.
    #[arg(long)]
    #[serde(skip)]
    checkpoint: Option<PathBuf>,
    /// Coverage threshold in normalized units.
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    /// Metrics JSON path (the report is always printed).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    /// Predict the ground truth instead of running a model.
    #[arg(long)]
    oracle: bool,
    /// Average per-sample RMSE instead of pooling pixels.
    #[arg(long)]
    per_sample_rmse: bool,
    #[arg(long, default_value = "test", value_parser = ["test", "train", "all"])]
    split: String,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    #[serde(skip)]
    checkpoint: PathBuf,
    /// Dataset directory; predicts every sample of --split.
    #[arg(long, conflicts_with = "geo")]
    #[serde(skip)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["test", "train", "all"])]
    split: String,
    /// 8-bit PGM mask (nonzero = free cell) for a single prediction.
    #[arg(long, requires = "tx")]
    #[serde(skip)]
    geo: Option<PathBuf>,
    /// Transmitter cell as `row,col`.
    #[arg(long)]
    tx: Option<String>,
    /// Cell edge for --geo inputs, meters.
    #[arg(long, default_value_t = 0.86)]
    cell_size: f64,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Also write truth and prediction side by side.
    #[arg(long)]
    side_by_side: bool,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    /// Corrupt one backward rule (negative control), e.g. `mul` or `conv2d`.
    #[arg(long)]
    inject_fault: Option<String>,
}

/// Runs the command line `args` (including the program name) and returns
/// the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected `key = value`", path.display(), n + 1)))?;
        pairs.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Splices `--config` file entries in front of the explicit flags.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut file = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            file = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            file = Some(p.to_string());
        }
    }
    let Some(file) = file else { return Ok(args) };
    let Some(sub_name) = strs.get(1) else { return Ok(args) };
    let root = Cli::command();
    let Some(sub) = root.find_subcommand(sub_name) else {
        return Ok(args);
    };
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in parse_config_file(Path::new(&file))? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| Error::Config(format!("{file}: unknown key '{key}' for `{sub_name}`")))?;
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}").into());
            extra.push(value.into());
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => extra.push(format!("--{key}").into()),
                "false" | "0" | "no" => {}
                other => return Err(Error::Config(format!("{file}: '{key}' expects true or false, got '{other}'"))),
            }
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(extra);
    out.extend(args[2..].iter().cloned());
    Ok(out)
}

/// Flattens the effective options into strings for provenance records.
fn echo<S: Serialize>(args: &S) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(args) {
        for (k, v) in map {
            match v {
                serde_json::Value::Null => {}
                serde_json::Value::String(s) => {
                    out.insert(k, s);
                }
                other => {
                    out.insert(k, other.to_string());
                }
            }
        }
    }
    out
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn cmd_gen(a: &GenArgs) -> Result<i32> {
    let profile = ModelConfig::from_profile(a.shared.profile.as_deref().unwrap_or("desk"))?;
    let size = a.size.unwrap_or(profile.height);
    let mut opts = GenerateOptions::new(a.count, size, a.shared.seed);
    opts.cell_size_m = a.cell_size;
    let d = LayoutParams::for_size(size);
    opts.layout = LayoutParams {
        n_rects: a.rects.unwrap_or(d.n_rects),
        rect_min: a.rect_min.unwrap_or(d.rect_min),
        rect_max: a.rect_max.unwrap_or(d.rect_max),
    };
    opts.channel = SynthChannelParams {
        alpha: a.alpha,
        beta: a.beta,
        sigma_sf: a.sigma,
        wall_loss_db: a.wall_loss,
        d0_m: a.d0,
        sf_smooth: a.sf_smooth,
        tx_power_dbm: a.tx_power,
    };
    if a.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    opts.channel.validate()?;
    opts.config = echo(a);
    opts.config.insert("size".into(), size.to_string());
    let manifest = write_dataset(&a.out, &opts)?;
    let n_train = manifest.count * 9 / 10;
    println!(
        "wrote {} samples ({}x{}) to {}: {} train / {} test, alpha {} beta {} sigma {}",
        manifest.count,
        manifest.height,
        manifest.width,
        a.out.display(),
        n_train,
        manifest.count - n_train,
        manifest.channel.alpha,
        manifest.channel.beta,
        manifest.channel.sigma_sf
    );
    Ok(0)
}

/// Model configuration from (in increasing priority) the checkpoint card,
/// the profile flag, and explicit overrides.
fn resolve_model(shared: &Shared, m: &ModelArgs, card: Option<&ModelCard>) -> Result<(ModelConfig, ModelKind)> {
    let mut cfg = match (&shared.profile, card) {
        (Some(p), _) => ModelConfig::from_profile(p)?,
        (None, Some(c)) => c.config.clone(),
        (None, None) => ModelConfig::desk(),
    };
    if let Some(d) = m.depth {
        cfg.depth = d;
    }
    if let Some(h) = m.head_channels {
        cfg.head_channels = h;
    }
    cfg.validate()?;
    let kind = m.model.or(card.map(|c| c.kind)).unwrap_or(ModelKind::Rmt);
    Ok((cfg, kind))
}

fn split_indices_of(ds: &Dataset, split: &str) -> Vec<usize> {
    let (train, test) = ds.split();
    match split {
        "train" => train,
        "all" => (0..ds.samples.len()).collect(),
        _ => test,
    }
}

fn check_extent(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    cfg.check_input(ds.manifest.height, ds.manifest.width)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let (cfg, kind) = resolve_model(&a.shared, &a.model, None)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr_start: a.lr_start,
        lr_end: a.lr_end,
        seed: a.shared.seed,
        roi_loss: a.roi_loss,
        max_steps: a.max_steps,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let ds = load_dataset(&a.data)?;
    check_extent(&cfg, &ds)?;
    let (train_idx, _) = ds.split();
    if train_idx.is_empty() {
        return Err(Error::Dataset(format!("{} has no training samples", a.data.display())));
    }
    let samples = ds.subset(&train_idx);
    let mut model = Model::<f32>::new(cfg, kind, a.shared.seed)?;
    let steps_per_epoch = samples.len().div_ceil(tc.batch_size);
    let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);
    let trace = train(&mut model, &samples, &tc, |r| {
        epoch_sum += r.loss;
        epoch_n += 1;
        if epoch_n == steps_per_epoch {
            eprintln!("epoch {:>3}  lr {:.3e}  loss {:.6}", r.epoch, r.lr, epoch_sum / epoch_n as f64);
            (epoch_sum, epoch_n) = (0.0, 0);
        }
    })?;

    create_parent(&a.out)?;
    model.save(&a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    create_parent(&csv)?;
    write_loss_csv(&csv, &trace)?;
    let mut config = echo(a);
    config.insert("profile".into(), model.cfg.profile.clone());
    config.insert("model".into(), kind.to_string());
    write_card(
        &a.out,
        &ModelCard {
            kind,
            config: model.cfg.clone(),
            train: Some(tc),
            settings: config,
        },
    )?;
    println!(
        "trained {} ({} parameters) for {} steps on {} samples; final loss {:.6}; checkpoint {}",
        kind,
        model.params.numel(),
        trace.len(),
        samples.len(),
        trace.last().map_or(f64::NAN, |r| r.loss),
        a.out.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    #[serde(flatten)]
    metrics: &'a MetricsReport,
    split: &'a str,
    model: String,
    checkpoint_sha256: Option<String>,
    config: BTreeMap<String, String>,
}

fn load_model(shared: &Shared, m: &ModelArgs, checkpoint: &Path) -> Result<(Model<f32>, String)> {
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let card = read_card(checkpoint)?;
    let (cfg, kind) = resolve_model(shared, m, card.as_ref())?;
    let params = crate::tensor::read_checkpoint(bytes.as_slice())?;
    Ok((Model::from_params(cfg, kind, params)?, sha256_hex(&bytes)))
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let ds = load_dataset(&a.data)?;
    let idx = split_indices_of(&ds, &a.split);
    if idx.is_empty() {
        return Err(Error::Dataset(format!("split '{}' is empty", a.split)));
    }
    let samples = ds.subset(&idx);
    let (preds, model_name, hash) = if a.oracle {
        (samples.iter().map(|s| s.map.clone()).collect(), "oracle".to_string(), None)
    } else {
        let ckpt = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("--checkpoint is required unless --oracle is given".into()))?;
        let (model, hash) = load_model(&a.shared, &a.model, ckpt)?;
        check_extent(&model.cfg, &ds)?;
        let geos: Vec<GeoMap> = samples.iter().map(|s| s.geo.clone()).collect();
        (predict_maps(&model, &geos, 8)?, model.kind.to_string(), Some(hash))
    };
    let report = evaluate_predictions(&preds, &samples, a.threshold, a.per_sample_rmse)?;
    let file = MetricsFile {
        metrics: &report,
        split: &a.split,
        model: model_name,
        checkpoint_sha256: hash,
        config: echo(a),
    };
    println!("{}", serde_json::to_string_pretty(&file)?);
    if let Some(out) = &a.out {
        create_parent(out)?;
        write_json(out, &file)?;
    }
    Ok(0)
}

fn parse_tx(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--tx expects `row,col`, got '{s}'"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

/// Writes a prediction. Codes are kept within 1..=65534 so the file still
/// decodes strictly inside (0, 1), like the sigmoid output it came from.
fn write_map(path: &Path, map: &RadioMap) -> Result<()> {
    let (lo, hi) = (1.0 / 65535.0, 65534.0 / 65535.0);
    let values: Vec<f64> = map.values().iter().map(|&v| (v as f64).clamp(lo, hi)).collect();
    fs::write(path, encode_pgm16(map.width(), map.height(), &values)?).map_err(|e| Error::io(path, e))
}

fn write_side_by_side(path: &Path, truth: &RadioMap, pred: &RadioMap) -> Result<()> {
    let (h, w) = (truth.height(), truth.width());
    let mut values = Vec::with_capacity(2 * h * w);
    for r in 0..h {
        values.extend((0..w).map(|c| truth.get(r, c) as f64));
        values.extend((0..w).map(|c| pred.get(r, c) as f64));
    }
    fs::write(path, encode_pgm16(2 * w, h, &values)?).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct PredictionRecord {
    file: String,
    index: Option<usize>,
    rmse: Option<f64>,
}

#[derive(Serialize)]
struct PredictFile {
    model: String,
    checkpoint_sha256: String,
    predictions: Vec<PredictionRecord>,
    config: BTreeMap<String, String>,
}

fn cmd_predict(a: &PredictArgs) -> Result<i32> {
    let (model, hash) = load_model(&a.shared, &a.model, &a.checkpoint)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut records = Vec::new();
    if let Some(dir) = &a.data {
        let ds = load_dataset(dir)?;
        check_extent(&model.cfg, &ds)?;
        let idx = split_indices_of(&ds, &a.split);
        let samples: Vec<Sample> = ds.subset(&idx);
        let geos: Vec<GeoMap> = samples.iter().map(|s| s.geo.clone()).collect();
        let preds = predict_maps(&model, &geos, 8)?;
        for ((&i, s), p) in idx.iter().zip(&samples).zip(&preds) {
            let file = format!("{i:05}.pred.pgm");
            write_map(&a.out.join(&file), p)?;
            if a.side_by_side {
                write_side_by_side(&a.out.join(format!("{i:05}.side.pgm")), &s.map, p)?;
            }
            let rmse = metric_rmse(std::slice::from_ref(p), std::slice::from_ref(&s.map))?;
            println!("{file}  rmse {rmse:.6}");
            records.push(PredictionRecord {
                file,
                index: Some(i),
                rmse: Some(rmse),
            });
        }
    } else if let Some(geo_path) = &a.geo {
        let tx = parse_tx(a.tx.as_deref().unwrap_or_default())?;
        let bytes = fs::read(geo_path).map_err(|e| Error::io(geo_path, e))?;
        let img = decode_pgm(&bytes)?;
        let roi = img.samples.iter().map(|&s| s > 0).collect();
        let geo = GeoMap::new(img.height, img.width, a.cell_size, roi, tx)?;
        model.cfg.check_input(img.height, img.width)?;
        let pred = predict_maps(&model, std::slice::from_ref(&geo), 1)?.remove(0);
        let file = "pred.pgm".to_string();
        write_map(&a.out.join(&file), &pred)?;
        println!("{file}");
        records.push(PredictionRecord {
            file,
            index: None,
            rmse: None,
        });
    } else {
        return Err(Error::Config("predict needs --data or --geo with --tx".into()));
    }
    write_json(
        &a.out.join("predictions.json"),
        &PredictFile {
            model: model.kind.to_string(),
            checkpoint_sha256: hash,
            predictions: records,
            config: echo(a),
        },
    )?;
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown op '{name}' (one of {})", known.join(", ")))
        })?),
    };
    if let Some(k) = fault {
        println!("injecting a fault into the {} backward rule", k.name());
    }
    let suite = gradient_suite(a.shared.seed, fault)?;
    let mut all = true;
    for entry in &suite {
        let (param, err) = entry.report.worst();
        all &= entry.report.pass;
        println!(
            "{:<32} {}  max rel err {:.3e}  ({})",
            entry.component,
            if entry.report.pass { "pass" } else { "FAIL" },
            err,
            param.unwrap_or("-")
        );
    }
    println!("{} of {} components pass (tol 1e-4)", suite.iter().filter(|e| e.report.pass).count(), suite.len());
    Ok(if all { 0 } else { 1 })
}
