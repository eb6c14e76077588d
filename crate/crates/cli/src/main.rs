//! `scribbleseg` command-line entry points.
//!
//! Precedence for every setting is flag > config file > default. The output
//! root falls back to `$SCRIBBLESEG_OUTPUT` when `--out` is absent. Exit
//! status is 0 on success, 2 on configuration errors and 1 otherwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use scribbleseg::checkpoint;
use scribbleseg::data::io::{self as dio, Manifest};
use scribbleseg::data::{generate_synthetic_dataset_with, patient_ids, SyntheticParams, SYNTHETIC_CLASS_NAMES};
use scribbleseg::metrics::{evaluate_model, EvalResult};
use scribbleseg::trainer::{self, stream_seed, Variant};
use scribbleseg::{preprocess, prune_scribbles, split_folds, synthesize_scribbles, Error, ImageSample, PruneSpec, RunConfigFile};

const OUTPUT_ENV: &str = "SCRIBBLESEG_OUTPUT";
/// Resolved-config snapshot written beside training outputs.
const RUN_CONFIG: &str = "config.toml";
const FOLDS_FILE: &str = "folds.json";
const EVAL_JSON: &str = "eval.json";

#[derive(Parser, Debug)]
#[command(name = "scribbleseg", version, about = "Scribble-supervised segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic disk-and-ring benchmark.
    GenSynthetic(GenArgs),
    /// Replace every scribble with one synthesized from the dense mask.
    SynthScribbles(SynthArgs),
    /// Keep a fraction of each class's scribble pixels.
    PruneScribbles(PruneArgs),
    /// Train one variant over the cross-validation folds.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out patients of one fold.
    Eval(EvalArgs),
    /// Merge the per-fold evaluations of a training run.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory [default: $SCRIBBLESEG_OUTPUT/<name>, else ./runs/<name>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    patients: usize,
    #[arg(long, default_value_t = 20)]
    images: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with synthetic shape and intensity parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Input dataset directory (left untouched).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Fraction of scribble pixels kept per class, in (0, 1].
    #[arg(long)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory [overrides dataset.root].
    #[arg(long)]
    data: Option<PathBuf>,
    /// baseline_pce, entmin, entmin_memory, full, fullsup_ce or fullsup_ce_dice [overrides train.variant].
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Further-augmentation strength [overrides augment.further.strength].
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stop_gradient: Option<bool>,
    /// Train only these folds (repeatable); all folds by default.
    #[arg(long)]
    fold: Vec<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    fold: usize,
    /// Dataset directory [default: from --config, else the run's config.toml].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: the checkpoint's directory].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Training output directory holding config.toml and fold*/eval.json.
    #[arg(long)]
    run: PathBuf,
    /// Output directory [default: the run directory].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let is_config = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Config(_))));
    if is_config {
        2
    } else {
        1
    }
}

fn output_dir(flag: Option<PathBuf>, name: &str) -> PathBuf {
    flag.unwrap_or_else(|| match std::env::var_os(OUTPUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(name),
        _ => PathBuf::from("runs").join(name),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Refuses output directories that coincide with or sit inside `input`.
fn check_not_inside(input: &Path, out: &Path) -> Result<()> {
    let input = input
        .canonicalize()
        .with_context(|| format!("dataset directory {}", input.display()))?;
    let mut probe = out.to_path_buf();
    // Walk up to the deepest existing ancestor so a not-yet-created output
    // directory can still be compared.
    let mut suffix = Vec::new();
    while !probe.exists() {
        match (probe.file_name(), probe.parent()) {
            (Some(name), Some(parent)) => {
                suffix.push(name.to_os_string());
                probe = if parent.as_os_str().is_empty() { PathBuf::from(".") } else { parent.to_path_buf() };
            }
            _ => break,
        }
    }
    let mut resolved = probe.canonicalize().unwrap_or(probe);
    resolved.extend(suffix.iter().rev());
    if resolved.starts_with(&input) {
        return Err(config_error(format!(
            "output {} lies inside the input dataset {}",
            out.display(),
            input.display()
        )));
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct GenSnapshot<'a> {
    command: &'static str,
    patients: usize,
    images: usize,
    size: usize,
    seed: u64,
    params: &'a SyntheticParams,
}

fn gen_synthetic(args: GenArgs) -> Result<()> {
    let params = match &args.params {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SyntheticParams>(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => SyntheticParams::default(),
    };
    params.validate().map_err(|e| config_error(e.to_string()))?;
    let out = output_dir(args.out.out, "synthetic");
    let samples = generate_synthetic_dataset_with(args.patients, args.images, (args.size, args.size), args.seed, &params)
        .map_err(|e| match e {
            Error::InvalidInput(m) => config_error(m),
            other => other.into(),
        })?;
    let names: Vec<String> = SYNTHETIC_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    dio::write_dataset(&out, &samples, &names)?;
    write_json(
        &out.join("generation.json"),
        &GenSnapshot {
            command: "gen-synthetic",
            patients: args.patients,
            images: args.images,
            size: args.size,
            seed: args.seed,
            params: &params,
        },
    )?;
    log::info!("wrote {} slices to {}", samples.len(), out.display());
    Ok(())
}

/// Copies images and dense masks of `data` into `out` unchanged and writes
/// the scribble returned by `relabel` for each slice.
fn rewrite_scribbles(
    data: &Path,
    out: &Path,
    mut relabel: impl FnMut(usize, &ImageSample) -> Result<scribbleseg::ScribbleLabel>,
) -> Result<Manifest> {
    check_not_inside(data, out)?;
    let manifest = dio::read_manifest(data)?;
    for (i, entry) in manifest.slices.iter().enumerate() {
        let sample = dio::read_sample(data, entry, manifest.num_classes)?;
        let (pid, idx) = (entry.patient_id.as_str(), entry.slice_idx);
        create_dir(&out.join(pid))?;
        let copy = |src: PathBuf, dst: PathBuf| {
            fs::copy(&src, &dst).with_context(|| format!("copying {} to {}", src.display(), dst.display()))
        };
        copy(dio::image_path(data, pid, idx), dio::image_path(out, pid, idx))?;
        if entry.has_gt {
            copy(dio::gt_path(data, pid, idx), dio::gt_path(out, pid, idx))?;
        }
        let scribble = relabel(i, &sample)?;
        dio::write_u8_png(&dio::scribble_path(out, pid, idx), scribble.labels())?;
    }
    dio::write_manifest(out, &manifest)?;
    Ok(manifest)
}

#[derive(Serialize)]
struct ScribbleSnapshot<'a> {
    command: &'static str,
    source: &'a Path,
    ratio: Option<f64>,
    seed: u64,
}

fn synth_scribbles(args: SynthArgs) -> Result<()> {
    let out = output_dir(args.out.out, "scribbles");
    let mut kept = 0;
    let manifest = rewrite_scribbles(&args.data, &out, |i, s| match &s.gt_mask {
        Some(gt) => Ok(synthesize_scribbles(gt, s.num_classes(), stream_seed(args.seed, 0, i as u64))?),
        None => {
            kept += 1;
            Ok(s.scribble.clone())
        }
    })?;
    if kept > 0 {
        log::warn!("{kept} slices without dense masks keep their original scribbles");
    }
    write_json(
        &out.join("scribbles.json"),
        &ScribbleSnapshot {
            command: "synth-scribbles",
            source: &args.data,
            ratio: None,
            seed: args.seed,
        },
    )?;
    log::info!("synthesized scribbles for {} slices into {}", manifest.slices.len(), out.display());
    Ok(())
}

fn prune(args: PruneArgs) -> Result<()> {
    PruneSpec::new(args.ratio, args.seed).map_err(|e| config_error(e.to_string()))?;
    let out = output_dir(args.out.out, "pruned");
    let manifest = rewrite_scribbles(&args.data, &out, |i, s| {
        let spec = PruneSpec::new(args.ratio, stream_seed(args.seed, 0, i as u64))?;
        Ok(prune_scribbles(&s.scribble, &spec)?)
    })?;
    write_json(
        &out.join("scribbles.json"),
        &ScribbleSnapshot {
            command: "prune-scribbles",
            source: &args.data,
            ratio: Some(args.ratio),
            seed: args.seed,
        },
    )?;
    log::info!("pruned {} slices to ratio {} into {}", manifest.slices.len(), args.ratio, out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfigFile> {
    Ok(match path {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    })
}

/// Reads the dataset at `root` and applies the configured preprocessing.
/// Fills in the dataset section of `cfg` from the manifest.
fn load_dataset(cfg: &mut RunConfigFile, root: &Path) -> Result<Vec<ImageSample>> {
    let (manifest, samples) = dio::read_dataset(root)?;
    if let Some(k) = cfg.dataset.num_classes {
        if k != manifest.num_classes {
            return Err(config_error(format!(
                "[dataset] num_classes = {k} but {} has {}",
                root.display(),
                manifest.num_classes
            )));
        }
    }
    cfg.dataset.num_classes = Some(manifest.num_classes);
    if cfg.dataset.class_names.is_empty() {
        cfg.dataset.class_names = manifest.class_names.clone();
    }
    let samples = match cfg.dataset_spec(root, manifest.num_classes, &cfg.dataset.class_names) {
        Some(spec) => samples.iter().map(|s| preprocess(s, &spec)).collect::<scribbleseg::Result<_>>()?,
        None => samples,
    };
    Ok(samples)
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(d) = args.data {
        cfg.dataset.root = Some(d);
    }
    if let Some(v) = &args.variant {
        cfg.train.variant = v.parse::<Variant>()?;
    }
    if let Some(e) = args.epochs {
        cfg.train.num_epochs = e;
    }
    if let Some(d) = args.delta {
        cfg.augment.further.strength = d;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(sg) = args.stop_gradient {
        cfg.train.stop_gradient = sg;
    }
    cfg.validate()?;
    let root = cfg
        .dataset
        .root
        .clone()
        .ok_or_else(|| config_error("no dataset: pass --data or set dataset.root"))?;
    let root = root
        .canonicalize()
        .with_context(|| format!("dataset directory {}", root.display()))?;
    cfg.dataset.root = Some(root.clone());
    let default_name = format!("{}-seed{}", cfg.train.variant.name(), cfg.train.seed);
    let out = output_dir(args.out.out, &default_name);
    check_not_inside(&root, &out)?;

    let samples = load_dataset(&mut cfg, &root)?;
    let num_classes = cfg.dataset.num_classes.expect("set by load_dataset");
    let setup = cfg.train_setup(num_classes)?;
    let folds = split_folds(&patient_ids(&samples), setup.train.n_folds, setup.train.seed)
        .map_err(|e| config_error(e.to_string()))?;
    if let Some(&bad) = args.fold.iter().find(|&&f| f >= folds.num_folds()) {
        return Err(config_error(format!("--fold {bad} out of range ({} folds)", folds.num_folds())));
    }
    create_dir(&out)?;
    cfg.save(&out.join(RUN_CONFIG))?;
    write_json(&out.join(FOLDS_FILE), &folds)?;

    let which = (!args.fold.is_empty()).then_some(args.fold.as_slice());
    let all: Vec<usize> = (0..folds.num_folds()).collect();
    for &fold in which.unwrap_or(&all) {
        log::info!("fold {fold}: training {} for {} epochs", setup.train.variant.name(), setup.train.num_epochs);
        let outcome = trainer::fit_fold(&samples, &folds, fold, &setup, Some(&out))?;
        let dir = outcome.dir.as_ref().expect("output directory given");
        outcome.eval.write_json(&dir.join(EVAL_JSON))?;
        log::info!("fold {fold}: held-out mean DSC {:.4}", outcome.eval.mean_dsc());
    }
    log::info!("outputs in {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    command: &'static str,
    checkpoint: &'a Path,
    fold: usize,
    dataset: &'a Path,
    test_patients: &'a [String],
}

fn eval(args: EvalArgs) -> Result<()> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    let run_config = args
        .checkpoint
        .parent()
        .and_then(Path::parent)
        .map(|run| run.join(RUN_CONFIG))
        .filter(|p| p.exists());
    let mut cfg = load_config(args.config.as_deref().or(run_config.as_deref()))?;
    if let Some(d) = args.data {
        cfg.dataset.root = Some(d);
    }
    let root = cfg
        .dataset
        .root
        .clone()
        .ok_or_else(|| config_error("no dataset: pass --data or --config"))?;
    let samples = load_dataset(&mut cfg, &root)?;
    let setup = &loaded.setup;
    let folds = split_folds(&patient_ids(&samples), setup.train.n_folds, setup.train.seed)
        .map_err(|e| config_error(e.to_string()))?;
    let test = folds.held_out(args.fold).map_err(|e| config_error(e.to_string()))?.to_vec();
    let mut model = loaded.state.model;
    let result = evaluate_model(&mut model, &samples, &test, args.fold)?;

    let out = match args.out {
        Some(o) => o,
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    check_not_inside(&root, &out)?;
    create_dir(&out)?;
    let stem = format!("eval_fold{}", args.fold);
    result.write_csv(&out.join(format!("{stem}.csv")))?;
    result.write_json(&out.join(format!("{stem}.json")))?;
    write_json(
        &out.join(format!("{stem}_config.json")),
        &EvalSnapshot {
            command: "eval",
            checkpoint: &args.checkpoint,
            fold: args.fold,
            dataset: &root,
            test_patients: &test,
        },
    )?;
    log::info!("fold {}: mean DSC {:.4} over {} patients", args.fold, result.mean_dsc(), test.len());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let cfg = RunConfigFile::load(&args.run.join(RUN_CONFIG))?;
    let num_classes = cfg
        .dataset
        .num_classes
        .ok_or_else(|| config_error("[dataset] num_classes missing from the run snapshot"))?;
    let mut fold_dirs: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&args.run).with_context(|| format!("reading {}", args.run.display()))? {
        let path = entry?.path();
        let fold = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("fold"))
            .and_then(|n| n.parse::<usize>().ok());
        if let (Some(fold), true) = (fold, path.join(EVAL_JSON).exists()) {
            fold_dirs.push((fold, path));
        }
    }
    if fold_dirs.is_empty() {
        bail!("no fold*/{EVAL_JSON} under {}", args.run.display());
    }
    fold_dirs.sort();
    let results = fold_dirs
        .iter()
        .map(|(_, dir)| read_json::<EvalResult>(&dir.join(EVAL_JSON)))
        .collect::<Result<Vec<_>>>()?;
    let merged = EvalResult::merge(&results, num_classes);
    let out = args.out.unwrap_or_else(|| args.run.clone());
    create_dir(&out)?;
    merged.write_csv(&out.join("report.csv"))?;
    merged.write_json(&out.join("report_cases.json"))?;
    let table = merged.render_table(&cfg.dataset.class_names);
    fs::write(out.join("report.txt"), &table).with_context(|| format!("writing report in {}", out.display()))?;
    let folds: Vec<usize> = fold_dirs.iter().map(|(f, _)| *f).collect();
    write_json(
        &out.join("report_config.json"),
        &serde_json::json!({ "command": "report", "run": args.run, "folds": folds }),
    )?;
    eprint!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::SynthScribbles(a) => synth_scribbles(a),
        Command::PruneScribbles(a) => prune(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
