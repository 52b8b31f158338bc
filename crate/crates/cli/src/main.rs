//! `dfml`: dataset preparation, training and evaluation commands.
//!
//! Human-readable tables go to stdout, machine-readable records to files
//! under `--out-dir`. On failure the last stderr line is a JSON record
//! `{"category": .., "message": ..}`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dfml_core::datamodel::{
    attach_features, build_reduced, build_wst, estimate_phi, fingerprint, load_manifest, save_manifest,
    CoOccurrenceMatrix, Sample, WstStats,
};
use dfml_core::diffcore::TensorArchive;
use dfml_core::evaluator::evaluate;
use dfml_core::synthgen::{generate, write_corpus, SynthConfig};
use dfml_core::trainer::{load_checkpoint, train_to_dir, TrainConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dfml", version, about = "Weakly supervised tracklet re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Weakly supervised tracklet construction.
    #[command(subcommand)]
    Wst(WstCommand),
    /// Generate a synthetic multi-camera corpus.
    Synth {
        /// Flat `key = value` generator config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Estimate the camera co-occurrence matrix of a manifest.
    Phi {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on query and gallery manifests.
    Eval {
        /// Either file of a checkpoint pair (`.dfml` or `.json`).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        query_features: Option<PathBuf>,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        gallery_features: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum WstCommand {
    /// Merge tracklets into WSTs and report their statistics.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Keep one time-chained WST per person and camera.
    Reduce {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        window_minutes: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Feature archive; defaults to the manifest's `_features.dfml` sibling.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// baseline, baseline-nocl, mlfe, mlfc or full.
    #[arg(long)]
    mode: Option<String>,
    /// Co-occurrence matrix enabling the thresholded MLFC term.
    #[arg(long, requires = "eta")]
    phi: Option<PathBuf>,
    #[arg(long, requires = "phi")]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn default_features(manifest: &Path) -> Result<PathBuf> {
    let name = manifest
        .file_name()
        .and_then(|n| n.to_str())
        .context("manifest path has no file name")?;
    let stem = name
        .strip_suffix("_manifest.csv")
        .with_context(|| format!("cannot infer a feature archive for {name}; pass it explicitly"))?;
    Ok(manifest.with_file_name(format!("{stem}_features.dfml")))
}

fn load_with_features(manifest: &Path, features: Option<&Path>) -> Result<Vec<Sample>> {
    let mut samples = load_manifest(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let path = match features {
        Some(p) => p.to_path_buf(),
        None => default_features(manifest)?,
    };
    let archive = TensorArchive::load(&path).with_context(|| format!("reading {}", path.display()))?;
    attach_features(&mut samples, &archive)?;
    Ok(samples)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn stats_table(stats: &WstStats) -> String {
    let mut s = format!("{:<8} {:>6} {:>8}\n", "camera", "WSTs", "images");
    for (c, (w, i)) in stats.per_camera.iter().zip(&stats.images_per_camera).enumerate() {
        s += &format!("{c:<8} {w:>6} {i:>8}\n");
    }
    s += &format!("{:<8} {:>6} {:>8}", "total", stats.total_wsts, stats.total_images);
    s
}

fn stats_csv(stats: &WstStats) -> String {
    let mut s = String::from("camera,wsts,images\n");
    for (c, (w, i)) in stats.per_camera.iter().zip(&stats.images_per_camera).enumerate() {
        s += &format!("{c},{w},{i}\n");
    }
    s + &format!("total,{},{}\n", stats.total_wsts, stats.total_images)
}

fn cmd_wst_build(manifest: &Path, out_dir: &Path) -> Result<()> {
    let samples = load_manifest(manifest)?;
    let ds = build_wst(&samples)?;
    let stats = ds.stats();
    fs::create_dir_all(out_dir)?;
    save_manifest(&out_dir.join("wst_manifest.csv"), &ds.relabelled_samples())?;
    fs::write(out_dir.join("wst_stats.csv"), stats_csv(&stats))?;
    write_json(
        &out_dir.join("wst_stats.json"),
        &json!({ "input_fingerprint": fingerprint(&samples), "stats": stats }),
    )?;
    println!("{}", stats_table(&stats));
    Ok(())
}

fn cmd_wst_reduce(manifest: &Path, window_minutes: f64, out_dir: &Path) -> Result<()> {
    let samples = load_manifest(manifest)?;
    let r = build_reduced(&samples, window_minutes)?;
    fs::create_dir_all(out_dir)?;
    save_manifest(&out_dir.join("reduced_manifest.csv"), r.dataset.samples())?;
    let pct = r.retention_percent();
    fs::write(
        out_dir.join("retention.csv"),
        format!(
            "window_minutes,original_images,retained_images,retention_percent\n{window_minutes},{},{},{pct:.2}\n",
            r.original_images, r.retained_images
        ),
    )?;
    write_json(
        &out_dir.join("retention.json"),
        &json!({
            "input_fingerprint": fingerprint(&samples),
            "window_minutes": window_minutes,
            "original_images": r.original_images,
            "retained_images": r.retained_images,
            "retention_percent": pct,
            "stats": r.dataset.stats(),
        }),
    )?;
    println!("{:<16} {:>10} {:>10}", "window (min)", "images", "retained");
    println!("{window_minutes:<16} {:>10} {:>9.2}%", r.retained_images, pct);
    Ok(())
}

fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => SynthConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = generate(&cfg)?;
    write_corpus(&corpus, out_dir)?;
    write_json(&out_dir.join("synth_config.json"), &serde_json::to_value(&cfg)?)?;
    println!("{:<8} {:>8}", "split", "images");
    for (name, split) in [("train", &corpus.train), ("query", &corpus.query), ("gallery", &corpus.gallery)] {
        println!("{name:<8} {:>8}", split.len());
    }
    Ok(())
}

fn cmd_phi(manifest: &Path, out_dir: &Path) -> Result<()> {
    let samples = load_manifest(manifest)?;
    let phi = estimate_phi(&samples)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("phi.csv"), phi.to_csv())?;
    print!("{}", phi.to_csv());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(m) = &a.mode {
        c.set("mode", m)?;
    }
    c.eta = a.eta.or(c.eta);
    c.lambda = a.lambda.unwrap_or(c.lambda);
    c.gamma = a.gamma.unwrap_or(c.gamma);
    c.learning_rate = a.learning_rate.unwrap_or(c.learning_rate);
    c.steps = a.steps.unwrap_or(c.steps);
    c.seed = a.seed.unwrap_or(c.seed);
    c.checkpoint_every = a.checkpoint_every.unwrap_or(c.checkpoint_every);
    for o in &a.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
        c.set(k.trim(), v.trim())?;
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let samples = load_with_features(&a.manifest, a.features.as_deref())?;
    let phi = match &a.phi {
        Some(p) => Some(CoOccurrenceMatrix::from_csv(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?),
        None => None,
    };
    if cfg.eta.is_some() && phi.is_none() {
        bail!(dfml_core::Error::Contract("eta is set but no --phi matrix was given".into()));
    }
    let ds = build_wst(&samples)?;
    let art = train_to_dir(&ds, &cfg, phi.as_ref(), &fingerprint(&samples), &a.out_dir)?;
    let log = fs::read_to_string(&art.log)?;
    let last = log.lines().last().unwrap_or_default();
    println!("mode {}  steps {}  seed {}", cfg.mode, cfg.steps, cfg.seed);
    println!("final log record ({}): {last}", dfml_core::trainer::LOG_HEADER);
    println!("checkpoint {}", art.final_checkpoint.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    query: &Path,
    query_features: Option<&Path>,
    gallery: &Path,
    gallery_features: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let (model, meta) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let q = load_with_features(query, query_features)?;
    let g = load_with_features(gallery, gallery_features)?;
    let r = evaluate(&model, &q, &g)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("eval.csv"), r.to_csv())?;
    write_json(
        &out_dir.join("eval.json"),
        &json!({
            "metadata": meta,
            "query_fingerprint": fingerprint(&q),
            "gallery_fingerprint": fingerprint(&g),
            "result": r,
        }),
    )?;
    println!("{r}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Wst(WstCommand::Build { manifest, out_dir }) => cmd_wst_build(&manifest, &out_dir),
        Command::Wst(WstCommand::Reduce {
            manifest,
            window_minutes,
            out_dir,
        }) => cmd_wst_reduce(&manifest, window_minutes, &out_dir),
        Command::Synth { config, seed, out_dir } => cmd_synth(config.as_deref(), seed, &out_dir),
        Command::Phi { manifest, out_dir } => cmd_phi(&manifest, &out_dir),
        Command::Train(a) => cmd_train(&a),
        Command::Eval {
            checkpoint,
            query,
            query_features,
            gallery,
            gallery_features,
            out_dir,
        } => cmd_eval(
            &checkpoint,
            &query,
            query_features.as_deref(),
            &gallery,
            gallery_features.as_deref(),
            &out_dir,
        ),
    }
}

fn category(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<dfml_core::Error>().map(|e| e.category()))
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("usage")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            eprintln!("{}", json!({ "category": category(&e), "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
