//! `aide`: batch front end for curation, synthesis, training, evaluation and
//! inspection. Machine-readable JSON lines go to stdout, human summaries to
//! stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aide_core::data::{curate_manifest, make_synthetic_dataset, split_manifest, DatasetManifest, Split, SynthSpec};
use aide_core::eval::{ablation_suite, evaluate, robustness_sweep};
use aide_core::imageio::{load_image, patch_grid, save_png};
use aide_core::model::gradsuite::{gradient_suite, SUITE_TOLERANCE};
use aide_core::model::{
    load_checkpoint, load_embedding_table, save_checkpoint, train_with, EmbeddingTable, PatchCoord, Preprocessor,
    TrainOptions,
};
use aide_core::perturb::Perturbation;
use aide_core::{AideConfig, Error};
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "aide", version, about = "Detect AI-generated images with patch spectra, noise residuals and semantics")]
struct Cli {
    /// Directory that receives every file a subcommand writes.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output (info, debug, trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Drop undersized, duplicate and undecodable images from a manifest.
    Curate {
        manifest: PathBuf,
        #[arg(long, default_value_t = aide_core::data::DEFAULT_MIN_SIDE)]
        min_side: usize,
    },
    /// Generate a synthetic real/fake corpus from a JSON spec.
    Synth { spec: PathBuf, out_dir: PathBuf },
    /// Assign stratified train/val/test splits.
    Split {
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
        fractions: Vec<f64>,
    },
    /// Train a detector on the manifest's train split.
    Train {
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Fake-probability of one image.
    Score {
        checkpoint: PathBuf,
        image: PathBuf,
        /// Identifier for embedding-table lookup (defaults to the image path).
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        diagnostics: bool,
    },
    /// Write a JPEG-recompressed or blurred copy of an image.
    #[command(group(ArgGroup::new("kind").required(true).args(["jpeg", "blur"])))]
    Perturb {
        image: PathBuf,
        #[arg(long)]
        jpeg: Option<u8>,
        #[arg(long)]
        blur: Option<f64>,
    },
    /// Show patch grades and the selected extreme patches.
    InspectPatches {
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Add the JPEG / blur robustness cells.
    #[arg(long)]
    robustness: bool,
    /// Retrain and score every branch ablation.
    #[arg(long)]
    ablation: bool,
    /// With --ablation, also sweep patch size and selection count.
    #[arg(long, requires = "ablation")]
    grid: bool,
    /// Record the wall-clock time in the report.
    #[arg(long)]
    timestamp: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) => 1,
        Error::Optimizer(_) | Error::Training(_) | Error::UndefinedMetric(_) => 3,
        _ => 2,
    }
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn ensure_out(dir: &Path) -> aide_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> aide_core::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> aide_core::Result<AideConfig> {
    let mut cfg = match path {
        Some(p) => AideConfig::load(p)?,
        None => AideConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_table(path: Option<&Path>) -> aide_core::Result<Option<EmbeddingTable>> {
    path.map(load_embedding_table).transpose()
}

fn run(cli: Cli) -> aide_core::Result<()> {
    let out = cli.out.as_path();
    match cli.command {
        Command::Curate { manifest, min_side } => {
            let m = DatasetManifest::load(&manifest)?;
            let (kept, report) = curate_manifest(&m, min_side)?;
            ensure_out(out)?;
            let dest = out.join("curated.jsonl");
            kept.save(&dest)?;
            for d in &report.dropped {
                emit(json!({"dropped": d.id, "reason": d.reason, "detail": d.detail}));
            }
            emit(json!({"kept": report.kept, "dropped": report.dropped.len(), "manifest": dest}));
            eprintln!("kept {} of {} records", report.kept, m.len());
        }
        Command::Synth { spec, out_dir } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io { path: spec.clone(), source: e })?;
            let mut spec: SynthSpec =
                serde_json::from_str(&text).map_err(|e| Error::Format { record: 0, message: e.to_string() })?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let m = make_synthetic_dataset(&spec, &out_dir)?;
            emit(json!({"records": m.len(), "manifest": out_dir.join("manifest.jsonl")}));
            eprintln!("wrote {} images to {}", m.len(), out_dir.display());
        }
        Command::Split { manifest, fractions } => {
            let m = DatasetManifest::load(&manifest)?;
            let f: [f64; 3] = fractions
                .try_into()
                .map_err(|_| Error::Argument("--fractions takes three values".into()))?;
            let split = split_manifest(&m, f, cli.seed.unwrap_or(0))?;
            ensure_out(out)?;
            let dest = out.join("split.jsonl");
            split.save(&dest)?;
            let counts: serde_json::Map<String, serde_json::Value> = Split::ALL
                .iter()
                .map(|&s| (s.name().to_string(), json!(split.split(s).len())))
                .collect();
            emit(json!({"manifest": dest, "counts": counts}));
        }
        Command::Train {
            manifest,
            config,
            embeddings,
            resume,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let table = load_table(embeddings.as_deref())?;
            let opts = TrainOptions {
                resume: resume.map(load_checkpoint).transpose()?,
                ..Default::default()
            };
            let ckpt = train_with(&m, &cfg, table.as_ref(), &opts)?;
            ensure_out(out)?;
            let dest = out.join("checkpoint.bin");
            save_checkpoint(&ckpt, &dest)?;
            for (e, loss) in ckpt.epoch_losses.iter().enumerate() {
                emit(json!({"epoch": e + 1, "loss": loss}));
            }
            emit(json!({"checkpoint": dest, "epochs": ckpt.epochs_completed}));
            eprintln!(
                "trained {} epochs, final loss {:.4}",
                ckpt.epochs_completed,
                ckpt.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval(args) => eval(args, out, cli.seed)?,
        Command::Score {
            checkpoint,
            image,
            id,
            embeddings,
            diagnostics,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let table = load_table(embeddings.as_deref())?;
            ckpt.check_table(table.as_ref())?;
            let img = load_image(&image)?;
            let id = id.unwrap_or_else(|| image.to_string_lossy().into_owned());
            if diagnostics {
                let d = ckpt.diagnose(&img, &id, table.as_ref())?;
                let mut v = serde_json::to_value(&d)?;
                v["id"] = json!(id);
                emit(v);
            } else {
                emit(json!({"id": id, "probability": ckpt.score(&img, &id, table.as_ref())?}));
            }
        }
        Command::Perturb { image, jpeg, blur } => {
            let p = match (jpeg, blur) {
                (Some(qf), None) => Perturbation::Jpeg { qf },
                (None, Some(sigma)) => Perturbation::Blur { sigma },
                _ => return Err(Error::Argument("give exactly one of --jpeg or --blur".into())),
            };
            p.validate()?;
            let result = p.apply(&load_image(&image)?)?;
            ensure_out(out)?;
            let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            let dest = out.join(format!("{stem}_{p}.png"));
            save_png(&result, &dest)?;
            emit(json!({"input": image, "perturbation": p, "output": dest}));
        }
        Command::InspectPatches { image, config } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let img = load_image(&image)?;
            let (_, sel) = Preprocessor::new(&cfg)?.select(&img)?;
            let (cols, rows) = patch_grid(&img, cfg.patch_n);
            let coords = |idx: &[usize]| -> Vec<PatchCoord> {
                idx.iter().map(|&i| PatchCoord::new(i, cols, cfg.patch_n)).collect()
            };
            emit(json!({
                "image": image,
                "patch_n": cfg.patch_n,
                "grid": [cols, rows],
                "grades": sel.grades,
                "max_patches": coords(&sel.max_indices),
                "min_patches": coords(&sel.min_indices),
            }));
        }
        Command::Gradcheck => {
            let reports = gradient_suite(cli.seed.unwrap_or(0));
            for r in &reports {
                emit(serde_json::to_value(r)?);
            }
            let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            let failed = reports.iter().filter(|r| !r.passed).count();
            emit(json!({"checks": reports.len(), "failed": failed, "max_rel_error": worst, "tolerance": SUITE_TOLERANCE}));
            eprintln!("{} gradient checks, worst relative error {worst:.2e}", reports.len());
            if failed > 0 {
                return Err(Error::Training(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn eval(args: EvalArgs, out: &Path, seed: Option<u64>) -> aide_core::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let table = load_table(args.embeddings.as_deref())?;
    let subset = manifest.split(args.split);
    let mut report = evaluate(&ckpt, &subset, table.as_ref())?;
    if args.robustness {
        report.robustness = robustness_sweep(&ckpt, &subset, table.as_ref())?;
    }
    if args.ablation {
        let mut cfg = ckpt.config.clone();
        if let Some(s) = seed {
            cfg.seed = s;
        }
        report.ablation = ablation_suite(&manifest, &cfg, table.as_ref(), args.grid)?;
    }
    if args.timestamp {
        report.timestamp = Some(chrono::Utc::now().to_rfc3339());
    }
    ensure_out(out)?;
    write_file(&out.join("report.json"), &report.to_json_pretty())?;
    write_file(&out.join("report.csv"), &report.to_csv())?;
    emit(json!({
        "n": report.n,
        "acc": report.overall_acc,
        "ap": report.ap,
        "robustness": report.robustness.iter().map(|c| json!({"name": c.name, "acc": c.acc, "ap": c.ap})).collect::<Vec<_>>(),
        "ablation": report.ablation.iter().map(|r| json!({"variant": r.variant, "patch_n": r.patch_n, "k_select": r.k_select, "acc": r.acc, "ap": r.ap, "error": r.error})).collect::<Vec<_>>(),
        "report": out.join("report.json"),
    }));
    eprintln!(
        "{} images: Acc {:.2}%, AP {}",
        report.n,
        report.overall_acc,
        report.ap.map(|a| format!("{a:.4}")).unwrap_or_else(|| "undefined".into())
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if let Some(n) = std::env::var("AIDE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
