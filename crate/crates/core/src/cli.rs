//! Command-line entry point. `dispatch` parses argv, runs one subcommand
//! and returns the process exit code: 0 success, 1 usage, 2 config or data
//! error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::Model;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::gradsuite::{run_module, GradModule};
use crate::harness::{self, ablation_suite, eval_boxes, evaluate, summarize, summary_csv, summary_text};
use crate::synthdata::{write_dataset, Shard, SynthConfig};
use crate::tracker::{boxes_from_tracks, parse_detections, track_clip, tracks_to_text, SortParams};

/// Largest relative error `grad-check` accepts.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "orvit", version, about = "Object-region video transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file of `dotted.key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed; replaces the `seed` key
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the compositional train/val shards
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run SORT over a shard's detections or a single detection file
    Track {
        /// Shard directory or `t,o,x1,y1,x2,y2,score` file
        input: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on DATA/train, report val accuracy, save a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding train/ and val/
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "run")]
        tag: String,
    },
    /// Top-1 accuracy of a checkpoint on a shard
    Eval {
        checkpoint: PathBuf,
        shard: PathBuf,
        /// Overrides applied on top of the checkpoint config (box settings)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation grid over several seeds
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds (at least three)
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Comma-separated row tags; all rows when omitted
        #[arg(long)]
        tags: Option<String>,
    },
    /// Export CLS attention maps for one sample
    AttnMaps {
        checkpoint: PathBuf,
        shard: PathBuf,
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks
    GradCheck {
        /// tensor, geometry, attention, orvit, backbone or all
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn resolve(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &common.set {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

/// Logs the resolved config and seed, and echoes them into `out`.
fn announce(cfg: &Config, out: Option<&Path>) -> Result<u64> {
    let seed: u64 = cfg.get("seed")?;
    eprintln!("seed = {seed}");
    eprintln!("config hash = {}", cfg.hash());
    for line in cfg.to_text().lines() {
        eprintln!("  {line}");
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
    }
    Ok(seed)
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let seed = announce(&cfg, Some(out))?;
    let (train, val) = write_dataset(out, &SynthConfig::from_config(&cfg)?, seed)?;
    println!("train {} samples, val {} samples -> {}", train.len(), val.len(), out.display());
    Ok(())
}

fn track(input: &Path, common: &Common, out: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    announce(&cfg, Some(out))?;
    let sort = SortParams::from_config(&cfg)?;
    let objects: usize = cfg.get("orvit.num_objects")?;
    let mut tracks_txt = String::new();
    let mut boxes_txt = String::new();
    let clips: Vec<(Vec<crate::tracker::Detection>, usize)> = if input.is_dir() {
        let shard = Shard::load(input)?;
        let frames = shard.manifest.frames;
        shard.detections.into_iter().map(|d| (d, frames)).collect()
    } else {
        vec![(parse_detections(&fs::read_to_string(input)?)?, cfg.get("data.frames")?)]
    };
    for (i, (dets, frames)) in clips.iter().enumerate() {
        let tracks = track_clip(dets, *frames, sort)?;
        for line in tracks_to_text(&tracks).lines() {
            tracks_txt.push_str(&format!("{i},{line}\n"));
        }
        for line in boxes_from_tracks(&tracks, *frames, objects).to_text().lines() {
            boxes_txt.push_str(&format!("{i},{line}\n"));
        }
    }
    fs::write(out.join("tracks.csv"), tracks_txt)?;
    fs::write(out.join("boxes.csv"), boxes_txt)?;
    println!("tracked {} clips -> {}", clips.len(), out.display());
    Ok(())
}

fn train(common: &Common, data: &Path, out: &Path, tag: &str) -> Result<()> {
    let cfg = resolve(common)?;
    let seed = announce(&cfg, Some(out))?;
    let train_shard = Shard::load(&data.join("train"))?;
    let val = Shard::load(&data.join("val"))?;
    let (model, store, mut report) = harness::train(&train_shard, &cfg, seed, tag)?;
    let boxes = eval_boxes(&val, &cfg, seed)?;
    report.top1 = evaluate(&model, &store, &val, &boxes)?.top1;
    model.save(&out.join("checkpoint"), &store, &cfg)?;
    let mut epochs = String::from("epoch,loss,accuracy\n");
    for (e, s) in report.epochs.iter().enumerate() {
        epochs.push_str(&format!("{e},{:.6},{:.6}\n", s.loss, s.accuracy));
        eprintln!("epoch {e}: loss {:.4} train acc {:.4}", s.loss, s.accuracy);
    }
    fs::write(out.join("epochs.csv"), epochs)?;
    fs::write(out.join("report.csv"), format!("{}\n", report.line()))?;
    println!("{}", report.line());
    Ok(())
}

fn eval(checkpoint: &Path, shard: &Path, set: &[String], out: Option<&Path>) -> Result<()> {
    let (model, store, mut cfg) = Model::load(checkpoint)?;
    for kv in set {
        cfg.apply_override(kv)?;
    }
    let seed = announce(&cfg, out)?;
    let shard = Shard::load(shard)?;
    let boxes = eval_boxes(&shard, &cfg, seed)?;
    let r = evaluate(&model, &store, &shard, &boxes)?;
    let line = format!("top1 {:.6} ({}/{})", r.top1, r.correct, r.total);
    if let Some(dir) = out {
        let mut preds = String::from("idx,predicted,verb\n");
        for (i, (p, l)) in r.predictions.iter().zip(&shard.labels).enumerate() {
            preds.push_str(&format!("{i},{p},{}\n", l.0));
        }
        fs::write(dir.join("predictions.csv"), preds)?;
        fs::write(dir.join("eval.txt"), format!("{line}\n"))?;
    }
    println!("{line}");
    Ok(())
}

fn ablate(common: &Common, data: &Path, out: &Path, seeds: &str, tags: Option<&str>) -> Result<()> {
    let cfg = resolve(common)?;
    announce(&cfg, Some(out))?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::config(format!("bad seed {s:?}"))))
        .collect::<Result<_>>()?;
    let tags: Vec<String> = tags.map(|t| t.split(',').map(|s| s.trim().to_string()).collect()).unwrap_or_default();
    let train_shard = Shard::load(&data.join("train"))?;
    let val = Shard::load(&data.join("val"))?;
    let reports = ablation_suite(&train_shard, &val, &cfg, &seeds, &tags, |r| eprintln!("{}", r.line()))?;
    let runs: String = reports.iter().map(|r| format!("{}\n", r.line())).collect();
    fs::write(out.join("runs.csv"), runs)?;
    let rows = summarize(&reports);
    fs::write(out.join("summary.txt"), summary_text(&rows))?;
    fs::write(out.join("summary.csv"), summary_csv(&rows))?;
    print!("{}", summary_text(&rows));
    Ok(())
}

fn attn_maps(checkpoint: &Path, shard: &Path, index: usize, out: &Path) -> Result<()> {
    let (model, store, cfg) = Model::load(checkpoint)?;
    let seed = announce(&cfg, Some(out))?;
    let shard = Shard::load(shard)?;
    if index >= shard.len() {
        return Err(Error::data(format!("sample {index} outside a shard of {}", shard.len())));
    }
    let boxes = eval_boxes(&shard, &cfg, seed)?;
    let mut tape = crate::tensor::Tape::new();
    let fwd = model.forward(&mut tape, &store, &shard.clip(index), &boxes[index], None)?;
    let per_layer: Vec<Vec<_>> =
        fwd.cls_attention.iter().map(|heads| heads.iter().map(|&v| tape.value(v).clone()).collect()).collect();
    let written = crate::attention::export_cls_maps(out, model.cfg.grid(), &per_layer)?;
    println!("wrote {} files -> {}", written.len(), out.display());
    Ok(())
}

fn grad_check(module: &str, seed: u64) -> Result<()> {
    let module: GradModule = module.parse()?;
    eprintln!("seed = {seed}");
    let results = run_module(module, seed)?;
    let mut worst = 0.0f64;
    for (name, r) in &results {
        println!("{name:<24} max rel err {:.3e} over {} coordinates", r.max_rel_err, r.checked);
        worst = worst.max(r.max_rel_err);
    }
    println!("max rel err {worst:.3e}");
    if worst.is_finite() && worst < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(Error::numeric(format!("max relative error {worst:.3e} exceeds {GRAD_TOLERANCE:e}")))
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => gen_data(&common, &out),
        Command::Track { input, common, out } => track(&input, &common, &out),
        Command::Train { common, data, out, tag } => train(&common, &data, &out, &tag),
        Command::Eval { checkpoint, shard, set, out } => eval(&checkpoint, &shard, &set, out.as_deref()),
        Command::Ablate { common, data, out, seeds, tags } => ablate(&common, &data, &out, &seeds, tags.as_deref()),
        Command::AttnMaps { checkpoint, shard, index, out } => attn_maps(&checkpoint, &shard, index, &out),
        Command::GradCheck { module, seed } => grad_check(&module, seed),
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
