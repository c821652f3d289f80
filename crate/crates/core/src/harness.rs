//! Training, evaluation and the ablation grid.
//!
//! Runs are deterministic in (config, seed): batch order, dropout masks and
//! box corruptions derive from the seed, and per-sample gradients computed
//! in parallel are reduced in sample order.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{Model, ModelConfig};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::BoxSet;
use crate::orvit::{corrupt_boxes, BoxMode};
use crate::params::{derive_seed, ParamStore};
use crate::synthdata::Shard;
use crate::tensor::{Adam, AdamState, Tape, Tensor};
use crate::tracker::{boxes_from_tracks, track_clip, SortParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxSource {
    Gt,
    Tracked,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub boxes: BoxSource,
    pub box_mode: Option<BoxMode>,
    /// Corrupt boxes only at evaluation time.
    pub corrupt_eval_only: bool,
    pub wallclock: bool,
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let boxes = match cfg.raw("train.boxes")? {
            "gt" => BoxSource::Gt,
            "tracked" => BoxSource::Tracked,
            other => return Err(Error::config(format!("train.boxes = {other:?}, expected gt or tracked"))),
        };
        let box_mode = match cfg.raw("train.box_mode")? {
            "none" => None,
            m => Some(m.parse()?),
        };
        let corrupt_eval_only = match cfg.raw("train.corrupt")? {
            "both" => false,
            "eval" => true,
            other => return Err(Error::config(format!("train.corrupt = {other:?}, expected both or eval"))),
        };
        let tc = TrainConfig {
            epochs: cfg.get("train.epochs")?,
            lr: cfg.get("train.lr")?,
            batch: cfg.get("train.batch")?,
            boxes,
            box_mode,
            corrupt_eval_only,
            wallclock: cfg.get_bool("harness.wallclock")?,
        };
        if tc.batch == 0 || tc.lr < 0.0 || !tc.lr.is_finite() {
            return Err(Error::config("train.batch must be positive and train.lr finite and non-negative"));
        }
        Ok(tc)
    }

    /// Learning rate at `epoch`: ×0.1 from 60% of the epochs, ×0.01 from 85%.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let e = epoch as f64;
        let n = self.epochs as f64;
        if e >= 0.85 * n {
            self.lr * 0.01
        } else if e >= 0.6 * n {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub tag: String,
    pub epochs: Vec<EpochStats>,
    pub top1: f64,
    pub wallclock_s: Option<f64>,
}

impl RunReport {
    /// `config_hash,seed,tag,top1,wallclock_s`; wall-clock is empty when not
    /// recorded.
    pub fn line(&self) -> String {
        let wall = self.wallclock_s.map(|w| format!("{w:.3}")).unwrap_or_default();
        format!("{},{},{},{:.6},{}", self.config_hash, self.seed, self.tag, self.top1, wall)
    }
}

/// Resizes a box set to `objects` slots, padding or dropping trailing slots.
pub fn fit_objects(b: &BoxSet, objects: usize) -> BoxSet {
    if b.objects() == objects {
        return b.clone();
    }
    let mut out = BoxSet::padding(b.frames(), objects);
    for t in 0..b.frames() {
        for o in 0..objects.min(b.objects()) {
            out.set(t, o, *b.get(t, o));
        }
    }
    out
}

/// Boxes fed to the model for every sample of `shard`.
pub fn shard_boxes(
    shard: &Shard,
    source: BoxSource,
    mode: Option<BoxMode>,
    objects: usize,
    sort: SortParams,
    seed: u64,
) -> Result<Vec<BoxSet>> {
    let frames = shard.manifest.frames;
    let split = shard.manifest.split.name();
    (0..shard.len())
        .map(|i| {
            let base = match source {
                BoxSource::Gt => fit_objects(&shard.boxes[i], objects),
                BoxSource::Tracked => {
                    let tracks = track_clip(&shard.detections[i], frames, sort)?;
                    boxes_from_tracks(&tracks, frames, objects)
                }
            };
            Ok(match mode {
                Some(m) => corrupt_boxes(&base, m, derive_seed(seed, &format!("corrupt/{split}/{i}"))),
                None => base,
            })
        })
        .collect()
}

pub fn train_boxes(shard: &Shard, cfg: &Config, seed: u64) -> Result<Vec<BoxSet>> {
    let tc = TrainConfig::from_config(cfg)?;
    let mode = if tc.corrupt_eval_only { None } else { tc.box_mode };
    shard_boxes(shard, tc.boxes, mode, cfg.get("orvit.num_objects")?, SortParams::from_config(cfg)?, seed)
}

pub fn eval_boxes(shard: &Shard, cfg: &Config, seed: u64) -> Result<Vec<BoxSet>> {
    let tc = TrainConfig::from_config(cfg)?;
    shard_boxes(shard, tc.boxes, tc.box_mode, cfg.get("orvit.num_objects")?, SortParams::from_config(cfg)?, seed)
}

fn check_label_space(model: &Model, shard: &Shard) -> Result<()> {
    if shard.num_classes() != model.cfg.num_classes {
        return Err(Error::data(format!(
            "shard has {} classes but the model predicts {}",
            shard.num_classes(),
            model.cfg.num_classes
        )));
    }
    let m = &shard.manifest;
    if (m.frames, m.height, m.width) != (model.cfg.frames, model.cfg.height, model.cfg.width) {
        return Err(Error::data(format!(
            "shard clips are {}x{}x{}, model expects {}x{}x{}",
            m.frames, m.height, m.width, model.cfg.frames, model.cfg.height, model.cfg.width
        )));
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-sample loss, correctness and parameter gradients.
fn sample_grads(
    model: &Model,
    store: &ParamStore,
    clip: &Tensor,
    boxes: &BoxSet,
    target: usize,
    dropout_seed: u64,
) -> Result<(f64, bool, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, store, clip, boxes, Some(dropout_seed))?;
    let correct = argmax(tape.value(out.logits).data()) == target;
    let loss = tape.cross_entropy(out.logits, target)?;
    let lv = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut dense = vec![None; store.len()];
    for (id, g) in grads.param_grads() {
        dense[id.0] = Some(g.clone());
    }
    Ok((lv, correct, dense))
}

/// Trains a fresh model. Returns the model, its parameters and a report
/// whose `top1` is training accuracy of the last epoch (replaced by
/// validation accuracy in [`run`]).
pub fn train(shard: &Shard, cfg: &Config, seed: u64, tag: &str) -> Result<(Model, ParamStore, RunReport)> {
    let mc = ModelConfig::from_config(cfg)?;
    let tc = TrainConfig::from_config(cfg)?;
    let (model, mut store) = Model::new(&mc, seed)?;
    check_label_space(&model, shard)?;
    let boxes = train_boxes(shard, cfg, seed)?;
    let adam = Adam::default();
    let mut state = AdamState::for_shapes(store.ids().map(|id| store.get(id).shape()));
    let start = Instant::now();
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for epoch in 0..tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle/{epoch}")));
        order.shuffle(&mut rng);
        let lr = tc.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, batch) in order.chunks(tc.batch).enumerate() {
            let results: Vec<Result<(f64, bool, Vec<Option<Tensor>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let ds = derive_seed(seed, &format!("dropout/{epoch}/{i}"));
                    sample_grads(&model, &store, &shard.clip(i), &boxes[i], shard.labels[i].0, ds)
                })
                .collect();
            let mut total: Vec<Option<Tensor>> = vec![None; store.len()];
            for (k, r) in results.into_iter().enumerate() {
                let (l, ok, g) = r?;
                if !l.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite loss {l} at epoch {epoch}, step {step}, sample {} (tag {tag}, seed {seed})",
                        batch[k]
                    )));
                }
                loss_sum += l;
                correct += usize::from(ok);
                for (slot, gi) in total.iter_mut().zip(g) {
                    match (slot.as_mut(), gi) {
                        (Some(acc), Some(gi)) => acc.add_assign(&gi),
                        (None, Some(gi)) => *slot = Some(gi),
                        _ => {}
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for id in store.ids().collect::<Vec<_>>() {
                if let Some(g) = total[id.0].as_mut() {
                    g.scale_inplace(inv);
                    if g.has_non_finite() {
                        return Err(Error::numeric(format!(
                            "non-finite gradient for {} at epoch {epoch}, step {step}",
                            store.name(id)
                        )));
                    }
                    adam.step(store.get_mut(id), g, &mut state, id.0, lr)?;
                }
            }
        }
        let n = shard.len().max(1) as f64;
        epochs.push(EpochStats { loss: loss_sum / n, accuracy: correct as f64 / n });
    }
    let report = RunReport {
        config_hash: cfg.hash(),
        seed,
        tag: tag.to_string(),
        top1: epochs.last().map_or(0.0, |e| e.accuracy),
        epochs,
        wallclock_s: tc.wallclock.then(|| start.elapsed().as_secs_f64()),
    };
    Ok((model, store, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<usize>,
}

/// Argmax top-1 accuracy on the verb label.
pub fn evaluate(model: &Model, store: &ParamStore, shard: &Shard, boxes: &[BoxSet]) -> Result<EvalResult> {
    check_label_space(model, shard)?;
    if boxes.len() != shard.len() {
        return Err(Error::data(format!("{} box sets for {} samples", boxes.len(), shard.len())));
    }
    let predictions: Vec<usize> = (0..shard.len())
        .into_par_iter()
        .map(|i| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, store, &shard.clip(i), &boxes[i], None)?;
            let logits = tape.value(out.logits);
            if logits.has_non_finite() {
                return Err(Error::numeric(format!("non-finite logits for sample {i}")));
            }
            Ok(argmax(logits.data()))
        })
        .collect::<Result<_>>()?;
    let correct = predictions.iter().zip(&shard.labels).filter(|(p, l)| **p == l.0).count();
    let total = shard.len();
    Ok(EvalResult { top1: if total == 0 { 0.0 } else { correct as f64 / total as f64 }, correct, total, predictions })
}

/// Evaluates a saved checkpoint on a shard, using the checkpoint's box
/// settings.
pub fn evaluate_checkpoint(dir: &Path, shard: &Shard) -> Result<EvalResult> {
    let (model, store, cfg) = Model::load(dir)?;
    let boxes = eval_boxes(shard, &cfg, cfg.get("seed")?)?;
    evaluate(&model, &store, shard, &boxes)
}

/// Train on `train`, evaluate on `val`; the report's `top1` is val accuracy.
pub fn run(train_shard: &Shard, val: &Shard, cfg: &Config, seed: u64, tag: &str) -> Result<RunReport> {
    let (model, store, mut report) = train(train_shard, cfg, seed, tag)?;
    let boxes = eval_boxes(val, cfg, seed)?;
    report.top1 = evaluate(&model, &store, val, &boxes)?.top1;
    Ok(report)
}

/// Named configurations of the ablation grid derived from `base`, which is
/// the full ORViT configuration. Placement rows put one block at the first,
/// middle and last layer, and `three-layer` puts one at each.
pub fn ablation_grid(base: &Config) -> Result<Vec<(String, Config)>> {
    let layers: Vec<usize> = base.get_list("orvit.layers")?;
    if layers.is_empty() {
        return Err(Error::config("the ablation base must have ORViT layers"));
    }
    let dim: usize = base.get("model.dim")?;
    let depth: usize = base.get("model.depth")?;
    let placements = [("early", 0), ("mid", depth / 2), ("late", depth - 1)];
    let mut grid = vec![
        ("baseline".to_string(), base.clone().with("orvit.layers", "")),
        ("orvit".to_string(), base.clone()),
    ];
    for (name, l) in placements {
        grid.push((format!("single-{name}"), base.clone().with("orvit.layers", l)));
    }
    let mut three: Vec<usize> = placements.iter().map(|p| p.1).collect();
    three.dedup();
    let three = three.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
    grid.push(("three-layer".into(), base.clone().with("orvit.layers", three)));
    grid.push(("no-odm".into(), base.clone().with("orvit.odm", false)));
    for mode in ["all", "null", "grid", "random", "shuffle"] {
        grid.push((format!("box-{mode}"), base.clone().with("train.box_mode", mode)));
    }
    grid.push(("tracked".into(), base.clone().with("train.boxes", "tracked")));
    for div in [2, 3] {
        if dim.is_multiple_of(div) {
            grid.push((format!("dodm-{}", dim / div), base.clone().with("orvit.d_odm", dim / div)));
        }
    }
    Ok(grid)
}

/// Runs the selected grid rows (all when `tags` is empty) for every seed.
/// Reports are ordered by row, then seed.
pub fn ablation_suite(
    train_shard: &Shard,
    val: &Shard,
    base: &Config,
    seeds: &[u64],
    tags: &[String],
    mut progress: impl FnMut(&RunReport),
) -> Result<Vec<RunReport>> {
    if seeds.len() < 3 {
        return Err(Error::config("the ablation suite needs at least 3 seeds"));
    }
    let grid = ablation_grid(base)?;
    if let Some(t) = tags.iter().find(|t| !grid.iter().any(|(g, _)| g == *t)) {
        return Err(Error::config(format!("unknown ablation row {t:?}")));
    }
    let mut out = Vec::new();
    for (tag, cfg) in grid.iter().filter(|(t, _)| tags.is_empty() || tags.contains(t)) {
        for &seed in seeds {
            let r = run(train_shard, val, &cfg.clone().with("seed", seed), seed, tag)?;
            progress(&r);
            out.push(r);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub tag: String,
    pub runs: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Mean and sample standard deviation of top-1 per tag, in first-seen order.
pub fn summarize(reports: &[RunReport]) -> Vec<SummaryRow> {
    let mut tags: Vec<&str> = Vec::new();
    for r in reports {
        if !tags.contains(&r.tag.as_str()) {
            tags.push(&r.tag);
        }
    }
    tags.into_iter()
        .map(|tag| {
            let v: Vec<f64> = reports.iter().filter(|r| r.tag == tag).map(|r| r.top1).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            SummaryRow { tag: tag.to_string(), runs: v.len(), mean, sd }
        })
        .collect()
}

pub fn summary_text(rows: &[SummaryRow]) -> String {
    let w = rows.iter().map(|r| r.tag.len()).max().unwrap_or(3).max(3);
    let mut s = format!("{:<w$}  runs  top1 mean ± sd\n", "tag");
    for r in rows {
        let _ = writeln!(s, "{:<w$}  {:>4}  {:.4} ± {:.4}", r.tag, r.runs, r.mean, r.sd);
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("tag,runs,mean,sd\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", r.tag, r.runs, r.mean, r.sd);
    }
    s
}

/// Parses report lines back (for the acceptance tests and tooling).
pub fn parse_report_line(line: &str) -> Result<RunReport> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 5 {
        return Err(Error::data(format!("report line {line:?} needs 5 fields")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::data(format!("bad number {s:?} in report")));
    Ok(RunReport {
        config_hash: f[0].to_string(),
        seed: f[1].parse().map_err(|_| Error::data(format!("bad seed {:?}", f[1])))?,
        tag: f[2].to_string(),
        epochs: Vec::new(),
        top1: num(f[3])?,
        wallclock_s: if f[4].is_empty() { None } else { Some(num(f[4])?) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_shape() {
        let tc = TrainConfig::from_config(&Config::default().with("train.epochs", 20).with("train.lr", 1.0)).unwrap();
        assert_eq!(tc.lr_at(0), 1.0);
        assert_eq!(tc.lr_at(11), 1.0);
        assert!((tc.lr_at(12) - 0.1).abs() < 1e-15);
        assert!((tc.lr_at(17) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn grid_rows_differ_from_base_only_where_named() {
        let base = Config::default();
        let grid = ablation_grid(&base).unwrap();
        let baseline = &grid.iter().find(|(t, _)| t == "baseline").unwrap().1;
        assert_eq!(baseline.keys_differing(&base), vec!["orvit.layers".to_string()]);
        assert_ne!(baseline.hash(), base.hash());
        assert!(grid.iter().any(|(t, _)| t == "dodm-8"));
        let tags: Vec<&str> = grid.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(tags.len(), 15, "{tags:?}");
    }

    #[test]
    fn summary_and_report_lines() {
        let mk = |tag: &str, top1| RunReport {
            config_hash: "ab".into(),
            seed: 1,
            tag: tag.into(),
            epochs: vec![],
            top1,
            wallclock_s: None,
        };
        let rows = summarize(&[mk("a", 0.5), mk("a", 0.7), mk("b", 0.1)]);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].mean - 0.6).abs() < 1e-12);
        assert!((rows[0].sd - 0.02f64.sqrt()).abs() < 1e-12);
        let r = mk("x", 0.25);
        assert_eq!(r.line(), "ab,1,x,0.250000,");
        assert_eq!(parse_report_line(&r.line()).unwrap(), r);
    }

    #[test]
    fn fit_objects_pads_and_truncates() {
        let b = BoxSet::padding(2, 3);
        assert_eq!(fit_objects(&b, 1).objects(), 1);
        assert_eq!(fit_objects(&b, 4).objects(), 4);
    }
}
