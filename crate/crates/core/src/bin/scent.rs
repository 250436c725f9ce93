use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use scent_vc::augment::corpus_stats;
use scent_vc::experiment::{
    evaluate_cells, evaluate_dir, run_experiment, summarize, table_csv, write_converted,
    write_trace, ExperimentPlan,
};
use scent_vc::features::corpus::{inventory_for, load_pairs};
use scent_vc::features::{BottleneckTrack, Corpus, FeatureTrack, SynthConfig, SyntheticVoices};
use scent_vc::model::Scent;
use scent_vc::training::{fit_model_config, prepare, train, Mode, TrainConfig, TrainOptions};
use scent_vc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "scent",
    version,
    about = "Sequence-to-sequence voice conversion on feature tracks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic parallel corpus (train/valid/test manifests).
    GenSynthetic(GenArgs),
    /// Alignment-point and fragment statistics of a manifest.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        /// Print the statistics (the only action).
        #[arg(long)]
        stats: bool,
        #[arg(long)]
        json: bool,
    },
    /// Train one model.
    Train(TrainArgs),
    /// Convert source utterances with a trained checkpoint.
    Convert(ConvertArgs),
    /// Score converted tracks against references.
    Evaluate {
        #[arg(long)]
        converted: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Size × mode grid; needs an experiment `cells` directory as `--converted`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train, convert and evaluate a grid of (mode, size, seed) cells.
    Experiment(ExperimentArgs),
    /// Drop the classifier heads from a checkpoint.
    StripClassifiers {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 10)]
    valid: usize,
    #[arg(long, default_value_t = 20)]
    test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    feat_dim: usize,
    #[arg(long, default_value_t = 16)]
    bottleneck_dim: usize,
    #[arg(long, default_value_t = 16)]
    phonemes: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from `out/last.ckpt`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Convert every source of a manifest into `--out` (a directory).
    #[arg(long, conflicts_with_all = ["src", "bn"])]
    manifest: Option<PathBuf>,
    #[arg(long, requires = "bn")]
    src: Option<PathBuf>,
    #[arg(long, requires = "src")]
    bn: Option<PathBuf>,
    /// Output directory with `--manifest`, output track file otherwise.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Corpus directory written by `gen-synthetic`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values = ["baseline", "mt", "mt-da"])]
    modes: Vec<Mode>,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 25, 50, 100, 200])]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
    seeds: Vec<u64>,
    /// Reuse `best.ckpt` of each cell instead of training.
    #[arg(long)]
    evaluate_only: bool,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let config = SynthConfig {
        seed: a.seed,
        feat_dim: a.feat_dim,
        bottleneck_dim: a.bottleneck_dim,
        phonemes: a.phonemes,
        ..Default::default()
    };
    let corpus = SyntheticVoices::new(config.clone())?.corpus(a.train, a.valid, a.test)?;
    corpus.save(&a.out)?;
    write(
        &a.out.join("synth.json"),
        &serde_json::to_string_pretty(&config)?,
    )?;
    println!(
        "wrote {} / {} / {} pairs to {}",
        a.train,
        a.valid,
        a.test,
        a.out.display()
    );
    Ok(())
}

fn augment(manifest: &Path, as_json: bool) -> Result<()> {
    let mut inventory = inventory_for(manifest)?;
    let pairs = load_pairs(manifest, &mut inventory)?;
    let s = corpus_stats(&pairs);
    if as_json {
        println!("{}", serde_json::to_string_pretty(&s)?);
        return Ok(());
    }
    println!("pairs {} (unaligned {})", s.pairs, s.unaligned);
    println!("alignment points per pair:");
    for (n, count) in &s.histogram {
        println!("  N={n}: {count}");
    }
    println!("mean points per pair {:.3}", s.mean_points);
    println!("total fragments {}", s.total_fragments);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut inventory = inventory_for(&a.manifest)?;
    let pairs = load_pairs(&a.manifest, &mut inventory)?;
    let valid = match &a.valid {
        Some(v) => load_pairs(v, &mut inventory)?,
        None => Vec::new(),
    };
    let first = pairs
        .first()
        .ok_or_else(|| Error::Invalid("manifest lists no pairs".into()))?;
    let (feat, bn) = (first.src.dim(), first.src_bn.frames.dim());
    cfg.model = fit_model_config(cfg.model, inventory.len(), inventory.tone_count(), feat, bn);
    let opts = TrainOptions {
        out: Some(a.out.clone()),
        resume: a.resume,
        stop_after: a.stop_after,
    };
    let outcome = train(&cfg, &prepare(&pairs)?, &prepare(&valid)?, &opts)?;
    write(
        &a.out.join("train_config.json"),
        &serde_json::to_string_pretty(&cfg)?,
    )?;
    println!(
        "trained {} epochs; best epoch {}; checkpoints in {}",
        outcome.log.last().map_or(0, |e| e.epoch),
        outcome.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn convert_cmd(a: ConvertArgs) -> Result<()> {
    let model = Scent::load(&a.checkpoint)?;
    if let Some(manifest) = &a.manifest {
        let mut inventory = inventory_for(manifest)?;
        let pairs = load_pairs(manifest, &mut inventory)?;
        for p in &pairs {
            let (out, trace) = model.convert(&p.src, &p.src_bn)?;
            write_converted(&a.out, p, &out, &trace, &inventory)?;
        }
        println!(
            "converted {} utterances into {}",
            pairs.len(),
            a.out.display()
        );
        return Ok(());
    }
    let (Some(src), Some(bn)) = (&a.src, &a.bn) else {
        return Err(Error::Config(
            "convert needs --manifest or both --src and --bn".into(),
        ));
    };
    let src = FeatureTrack::load(src)?;
    let bn = BottleneckTrack::load(bn, src.hop_ms)?;
    let (out, trace) = model.convert(&src, &bn)?;
    out.save(&a.out)?;
    write_trace(&a.out.with_extension("attn.track"), &trace)?;
    println!("wrote {} frames to {}", out.len(), a.out.display());
    Ok(())
}

fn evaluate_cmd(
    converted: &Path,
    reference: &Path,
    report: &Path,
    csv: Option<&Path>,
) -> Result<()> {
    let cells = evaluate_cells(converted, reference)?;
    if !cells.is_empty() {
        write(
            report,
            &serde_json::to_string_pretty(
                &json!({ "version": env!("CARGO_PKG_VERSION"), "cells": cells }),
            )?,
        )?;
        if let Some(c) = csv {
            write(c, &table_csv(&cells))?;
        }
        for c in &cells {
            println!(
                "{:<20} mcd {:.3} dB  f0 rmse {:.3} Hz",
                c.name, c.summary.mcd, c.summary.f0_rmse
            );
        }
        return Ok(());
    }
    if csv.is_some() {
        return Err(Error::Config(
            "--csv needs an experiment cells directory as --converted".into(),
        ));
    }
    let utterances = evaluate_dir(converted, reference)?;
    let mean = summarize(&utterances);
    write(
        report,
        &serde_json::to_string_pretty(
            &json!({ "version": env!("CARGO_PKG_VERSION"), "utterances": utterances, "mean": mean }),
        )?,
    )?;
    println!(
        "{} utterances: mcd {:.3} dB  f0 rmse {:.3} Hz",
        utterances.len(),
        mean.mcd,
        mean.f0_rmse
    );
    Ok(())
}

fn experiment_cmd(a: ExperimentArgs) -> Result<()> {
    let corpus = Corpus::load(&a.corpus)?;
    let synth = fs::read_to_string(a.corpus.join("synth.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let mut plan = ExperimentPlan::grid(
        &a.modes,
        &a.sizes,
        &a.seeds,
        load_config(a.config.as_deref())?,
    );
    plan.out = Some(a.out.clone());
    plan.evaluate_only = a.evaluate_only;
    plan.corpus = synth;
    let report = run_experiment(&plan, &corpus)?;
    print!("{}", report.table_csv());
    for t in &report.trend {
        println!(
            "size {}: lowest MCD {}, lowest F0 RMSE {}",
            t.size, t.best_mcd, t.best_f0_rmse
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Augment {
            manifest,
            stats,
            json,
        } => {
            if !stats {
                return Err(Error::Config(
                    "augment only reports statistics; pass --stats".into(),
                ));
            }
            augment(&manifest, json)
        }
        Command::Train(a) => train_cmd(a),
        Command::Convert(a) => convert_cmd(a),
        Command::Evaluate {
            converted,
            reference,
            report,
            csv,
        } => evaluate_cmd(&converted, &reference, &report, csv.as_deref()),
        Command::Experiment(a) => experiment_cmd(a),
        Command::StripClassifiers { checkpoint, out } => {
            let model = Scent::load(&checkpoint)?;
            model.strip_classifiers().save(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
