//! `sanet` command line: dataset synthesis, training, evaluation, alignment
//! visualisation and the gradient suite.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::load_checkpoint;
use crate::data::{generate_dataset, load_dataset, save_dataset, LabeledImage, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{
    alignment_report, cmc, distance_matrix, embed_set, export_alignment_pairs, export_results, rank_lists,
};
use crate::gradcheck::{run_suite, TOLERANCE};
use crate::model::SANet;
use crate::train::{fit, TrainConfig, STAGED_FREEZE_EPOCHS};

/// Exit status for a numerical abort.
pub const EXIT_NON_FINITE: i32 = 2;
/// Exit status for invalid input or any other failure.
pub const EXIT_INVALID: i32 = 1;

const EMBED_BATCH: usize = 64;
/// Ranked gallery entries written per query.
const RANK_LIST_LEN: usize = 10;

#[derive(Parser, Debug)]
#[command(name = "sanet", version, about = "Self-aligned re-identification network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        /// JSON spec; defaults apply to absent fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints into the output directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; defaults apply to absent fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Disable the self-alignment module.
        #[arg(long)]
        baseline: bool,
        /// Freeze the trunk for the first 10 epochs.
        #[arg(long)]
        paper_mode: bool,
    },
    /// Rank the gallery for every query and write CMC and ranked lists.
    Eval {
        /// Checkpoint manifest (`model.json`).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        kmax: usize,
    },
    /// Write before/after alignment pairs for test images.
    AlignViz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Record written as `run.json` into every output directory.
#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    command: &'a str,
    seed: Option<u64>,
    config: &'a C,
}

fn announce<C: Serialize>(dir: Option<&Path>, command: &str, seed: Option<u64>, config: &C) -> Result<()> {
    let record = RunRecord { command, seed, config };
    let text = serde_json::to_string_pretty(&record).expect("serializable record");
    match seed {
        Some(s) => println!("{command}: seed {s}"),
        None => println!("{command}: no randomness"),
    }
    println!("{text}");
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run.json");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn test_images(ds: &crate::data::Dataset) -> Vec<LabeledImage> {
    let mut all: Vec<LabeledImage> = ds.query.iter().chain(&ds.gallery).cloned().collect();
    all.sort_by(|a, b| a.name.cmp(&b.name));
    all
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { spec, out } => {
            let spec: SyntheticSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SyntheticSpec::default(),
            };
            spec.validate()?;
            announce(Some(&out), "synth", Some(spec.seed), &spec)?;
            let ds = generate_dataset(&spec)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} train, {} query, {} gallery images to {}",
                ds.train.len(),
                ds.query.len(),
                ds.gallery.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out,
            baseline,
            paper_mode,
        } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            if baseline {
                cfg.model.stn_enabled = false;
            }
            if paper_mode {
                cfg.warmup_freeze_epochs = STAGED_FREEZE_EPOCHS;
            }
            cfg.validate()?;
            let ds = load_dataset(&data)?;
            if cfg.model.num_classes != ds.num_train_classes() {
                return Err(Error::InvalidArgument(format!(
                    "model.num_classes is {} but the dataset has {} training identities",
                    cfg.model.num_classes,
                    ds.num_train_classes()
                )));
            }
            announce(Some(&out), "train", Some(cfg.seed), &cfg)?;
            let mut model = SANet::new(cfg.model.clone(), cfg.seed)?;
            let report = fit(&mut model, &ds, &cfg, &out)?;
            println!(
                "trained {} steps, loss {:.4} -> {:.4}, checkpoint {}",
                report.steps,
                report.first.total,
                report.last.total,
                report.checkpoint.display()
            );
        }
        Command::Eval { ckpt, data, out, kmax } => {
            let model = load_checkpoint(&ckpt)?;
            announce(Some(&out), "eval", None, &model.config)?;
            let ds = load_dataset(&data)?;
            if kmax == 0 || kmax > ds.gallery.len() {
                return Err(Error::InvalidArgument(format!(
                    "--kmax must be in 1..={} (gallery size), got {kmax}",
                    ds.gallery.len()
                )));
            }
            let q = embed_set(&model, &ds.query, EMBED_BATCH)?;
            let g = embed_set(&model, &ds.gallery, EMBED_BATCH)?;
            let d = distance_matrix(&q, &g)?;
            let curve = cmc(&d, &q.labels, &g.labels, kmax)?;
            let lists = rank_lists(&d, &q, &g, RANK_LIST_LEN.min(ds.gallery.len()))?;
            export_results(&curve, &lists, &out)?;
            for k in [1, 5, 10] {
                if k <= kmax {
                    println!("CMC-{k}: {:.4}", curve.at(k));
                }
            }
        }
        Command::AlignViz { ckpt, data, out, count } => {
            let model = load_checkpoint(&ckpt)?;
            if !model.config.stn_enabled {
                return Err(Error::InvalidArgument("checkpoint has no self-alignment module".into()));
            }
            announce(Some(&out), "align-viz", None, &model.config)?;
            let ds = load_dataset(&data)?;
            let images = test_images(&ds);
            if count == 0 || count > images.len() {
                return Err(Error::InvalidArgument(format!(
                    "--count must be in 1..={} (test images), got {count}",
                    images.len()
                )));
            }
            export_alignment_pairs(&model, &images[..count], &out)?;
            let report = alignment_report(&model, &images)?;
            let path = out.join("alignment.json");
            let text = serde_json::to_string_pretty(&report).expect("serializable report");
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            println!(
                "orientation dispersion {:.4} -> {:.4} (ratio {:.3}) over {} test images",
                report.std_before, report.std_after, report.ratio, report.measured
            );
        }
        Command::Gradcheck { seed } => {
            announce(None, "gradcheck", Some(seed), &serde_json::json!({ "tolerance": TOLERANCE }))?;
            let reports = run_suite(seed)?;
            let mut failed = Vec::new();
            for r in &reports {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<24} instances {:>2} probes {:>4} kinks {:>3} max rel err {:.3e} {verdict}",
                    r.op, r.instances, r.probes, r.kinks, r.max_rel_err
                );
                if !r.passed() {
                    failed.push(r.op.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::InvalidArgument(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

/// Runs one command; `argv[0]` is the program name. Returns the exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return EXIT_INVALID;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            match e {
                Error::NonFinite(_) => EXIT_NON_FINITE,
                _ => EXIT_INVALID,
            }
        }
    }
}
