//! Synthetic compositional video data: moving textured shapes whose motion
//! pattern is the verb and whose shape is the noun.
//!
//! Verbs and nouns are each split in two halves (verb groups 1/2, noun
//! groups A/B). The training split holds pairs 1A and 2B, validation holds
//! 1B and 2A, so no (verb, noun) pair appears in both.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{fmt_box, parse_box, parse_f64, parse_usize, BBox, BoxSet};
use crate::params::derive_seed;
use crate::tensor::{read_container, write_container, Tensor};
use crate::tracker::Detection;

pub const GENERATOR_VERSION: u32 = 1;

pub const VERBS: &[&str] = &["move-right", "move-left", "move-up", "move-down", "approach", "diverge", "circle", "static"];
pub const NOUNS: &[&str] = &["square", "disc", "triangle", "bar", "checker", "ring", "stripes", "cross"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub verbs: usize,
    pub nouns: usize,
    pub per_pair: usize,
    pub max_objects: usize,
    pub jitter: f64,
    pub drop: f64,
    pub noise: f64,
    /// Second noun group rendered dark on a bright background.
    pub invert_group_b: bool,
}

impl SynthConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let c = SynthConfig {
            frames: cfg.get("data.frames")?,
            height: cfg.get("data.height")?,
            width: cfg.get("data.width")?,
            verbs: cfg.get("data.verbs")?,
            nouns: cfg.get("data.nouns")?,
            per_pair: cfg.get("data.per_pair")?,
            max_objects: cfg.get("data.max_objects")?,
            jitter: cfg.get("data.jitter")?,
            drop: cfg.get("data.drop")?,
            noise: cfg.get("data.noise")?,
            invert_group_b: match cfg.raw("data.polarity")? {
                "group" => true,
                "fixed" => false,
                other => return Err(Error::config(format!("data.polarity must be group or fixed, got {other:?}"))),
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.verbs < 2 || self.nouns < 2 {
            return Err(Error::config("need at least 2 verbs and 2 nouns for a compositional split"));
        }
        if self.verbs > VERBS.len() || self.nouns > NOUNS.len() {
            return Err(Error::config(format!("vocabulary holds {} verbs and {} nouns", VERBS.len(), NOUNS.len())));
        }
        if self.frames < 2 || self.height < 4 || self.width < 4 {
            return Err(Error::config("clips must have at least 2 frames of 4x4 pixels"));
        }
        if self.max_objects < 2 && (0..self.verbs).any(|v| matches!(VERBS[v], "approach" | "diverge")) {
            return Err(Error::config("approach/diverge verbs need data.max_objects >= 2"));
        }
        if self.max_objects == 0 || self.max_objects > 3 {
            return Err(Error::config("data.max_objects must be 1..=3"));
        }
        if !(0.0..1.0).contains(&self.drop) || self.jitter < 0.0 {
            return Err(Error::config("detection noise out of range"));
        }
        Ok(())
    }
}

/// Verb group (0 = group 1, 1 = group 2) by index halves.
pub fn verb_group(verb: usize, verbs: usize) -> usize {
    usize::from(verb >= verbs / 2)
}

/// Noun group (0 = A, 1 = B) by index halves.
pub fn noun_group(noun: usize, nouns: usize) -> usize {
    usize::from(noun >= nouns / 2)
}

/// Which split a (verb, noun) pair belongs to: 1A and 2B train, the rest val.
pub fn pair_split(verb: usize, noun: usize, verbs: usize, nouns: usize) -> Split {
    if verb_group(verb, verbs) == noun_group(noun, nouns) {
        Split::Train
    } else {
        Split::Val
    }
}

pub fn split_pairs(verbs: usize, nouns: usize, split: Split) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for v in 0..verbs {
        for n in 0..nouns {
            if pair_split(v, n, verbs, nouns) == split {
                out.push((v, n));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[T, H, W, 1]`.
    pub clip: Tensor,
    pub gt_boxes: BoxSet,
    pub detections: Vec<Detection>,
    pub verb: usize,
    pub noun: usize,
    pub split: Split,
}

/// Shape support and intensity at local coordinates `(u, v) ∈ [-1, 1]²`.
fn noun_pixel(noun: usize, u: f64, v: f64) -> Option<f64> {
    let inside_sq = u.abs() <= 1.0 && v.abs() <= 1.0;
    match NOUNS[noun] {
        "square" => inside_sq.then_some(1.0),
        "disc" => (u * u + v * v <= 1.0).then_some(0.85),
        "triangle" => ((-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0).then_some(0.95),
        "bar" => inside_sq.then_some(0.7),
        "checker" => inside_sq.then_some(if (u > 0.0) == (v > 0.0) { 1.0 } else { 0.35 }),
        "ring" => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2).then_some(0.9)
        }
        "stripes" => inside_sq.then(|| if ((u + 1.0) * 2.0).floor() as i64 % 2 == 0 { 1.0 } else { 0.3 }),
        "cross" => (inside_sq && (u.abs() <= 0.35 || v.abs() <= 0.35)).then_some(0.8),
        _ => None,
    }
}

/// Object extent in normalized units (w, h).
fn noun_extent(noun: usize, scale: f64) -> (f64, f64) {
    match NOUNS[noun] {
        "bar" => (scale * 1.3, scale * 1.3 * 0.45),
        _ => (scale, scale),
    }
}

/// Center trajectories for each object over `frames`, all inside
/// `[margin_x, 1 − margin_x] × [margin_y, 1 − margin_y]`.
fn trajectories(verb: usize, objects: usize, frames: usize, (mx, my): (f64, f64), rng: &mut ChaCha8Rng) -> Vec<Vec<(f64, f64)>> {
    let span = (frames - 1) as f64;
    let lo_x = mx;
    let hi_x = 1.0 - mx;
    let lo_y = my;
    let hi_y = 1.0 - my;
    let mut out = Vec::with_capacity(objects);
    match VERBS[verb] {
        "approach" | "diverge" => {
            // Two objects on a line through the center moving towards or
            // away from each other; extras stay still.
            let axis_h = rng.gen_bool(0.5);
            let (near, far) = (0.12, 0.36);
            let (start, end) = if VERBS[verb] == "approach" { (far, near) } else { (near, far) };
            let c = 0.5 + rng.gen_range(-0.05..0.05);
            for o in 0..objects {
                let mut path = Vec::with_capacity(frames);
                for f in 0..frames {
                    let a = f as f64 / span;
                    let off = start + (end - start) * a;
                    let p = match o {
                        0 => 0.5 - off,
                        1 => 0.5 + off,
                        _ => 0.5,
                    };
                    let (x, y) = if o >= 2 {
                        (if axis_h { 0.5 } else { 0.15 }, if axis_h { 0.15 } else { 0.5 })
                    } else if axis_h {
                        (p, c)
                    } else {
                        (c, p)
                    };
                    path.push((x.clamp(lo_x, hi_x), y.clamp(lo_y, hi_y)));
                }
                out.push(path);
            }
        }
        name => {
            for _ in 0..objects {
                let speed = rng.gen_range(0.5..0.8) * (hi_x - lo_x).min(hi_y - lo_y) / span;
                let (dx, dy) = match name {
                    "move-right" => (speed, 0.0),
                    "move-left" => (-speed, 0.0),
                    "move-up" => (0.0, -speed),
                    "move-down" => (0.0, speed),
                    _ => (0.0, 0.0),
                };
                let path_x = dx * span;
                let path_y = dy * span;
                let x0 = rng.gen_range(lo_x - path_x.min(0.0)..=hi_x - path_x.max(0.0));
                let y0 = rng.gen_range(lo_y - path_y.min(0.0)..=hi_y - path_y.max(0.0));
                let radius = rng.gen_range(0.12..0.2);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let (cx, cy) = (rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65));
                let path = (0..frames)
                    .map(|f| {
                        let t = f as f64;
                        let (x, y) = if name == "circle" {
                            let a = phase + 2.0 * PI * t / frames as f64;
                            (cx + radius * a.cos(), cy + radius * a.sin())
                        } else {
                            (x0 + dx * t, y0 + dy * t)
                        };
                        (x.clamp(lo_x, hi_x), y.clamp(lo_y, hi_y))
                    })
                    .collect();
                out.push(path);
            }
        }
    }
    out
}

const SUPERSAMPLE: usize = 4;

/// Renders one sample. Deterministic in `seed`.
pub fn gen_clip(verb: usize, noun: usize, seed: u64, cfg: &SynthConfig) -> Result<SynthSample> {
    if verb >= cfg.verbs || noun >= cfg.nouns {
        return Err(Error::data(format!("verb {verb} / noun {noun} outside the configured vocabulary")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let needs_two = matches!(VERBS[verb], "approach" | "diverge");
    let min_obj = if needs_two { 2 } else { 1 };
    let objects = rng.gen_range(min_obj..=cfg.max_objects);
    let scale = rng.gen_range(0.22..0.3);
    let (w, h) = noun_extent(noun, scale);
    let paths = trajectories(verb, objects, cfg.frames, (w / 2.0, h / 2.0), &mut rng);

    let (t_n, h_n, w_n) = (cfg.frames, cfg.height, cfg.width);
    let mut data = vec![0.0; t_n * h_n * w_n];
    for v in data.iter_mut() {
        *v = rng.gen::<f64>() * cfg.noise;
    }
    let mut gt = BoxSet::padding(t_n, cfg.max_objects);
    for (o, path) in paths.iter().enumerate() {
        for (f, &(cx, cy)) in path.iter().enumerate() {
            let b = BBox::from_center(cx, cy, w, h).clamped();
            gt.set(f, o, b);
            let frame = &mut data[f * h_n * w_n..(f + 1) * h_n * w_n];
            let px0 = ((b.x1 * w_n as f64).floor() as usize).min(w_n - 1);
            let px1 = ((b.x2 * w_n as f64).ceil() as usize).min(w_n);
            let py0 = ((b.y1 * h_n as f64).floor() as usize).min(h_n - 1);
            let py1 = ((b.y2 * h_n as f64).ceil() as usize).min(h_n);
            for py in py0..py1 {
                for px in px0..px1 {
                    let mut acc = 0.0;
                    let mut cover = 0.0;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let x = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / w_n as f64;
                            let y = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / h_n as f64;
                            let u = (x - cx) / (w / 2.0);
                            let v = (y - cy) / (h / 2.0);
                            if let Some(val) = noun_pixel(noun, u, v) {
                                acc += val;
                                cover += 1.0;
                            }
                        }
                    }
                    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                    let bg = frame[py * w_n + px];
                    frame[py * w_n + px] = bg * (1.0 - cover / n) + acc / n;
                }
            }
        }
    }

    if cfg.invert_group_b && noun_group(noun, cfg.nouns) == 1 {
        for v in data.iter_mut() {
            *v = 1.0 - *v;
        }
    }
    // Shards are stored as f32; keeping memory at that precision makes a
    // loaded shard equal to the generated one.
    for v in data.iter_mut() {
        *v = *v as f32 as f64;
    }

    let half = cfg.jitter * 3f64.sqrt();
    let mut detections = Vec::new();
    for f in 0..t_n {
        for o in 0..cfg.max_objects {
            let g = gt.get(f, o);
            if g.is_padding() {
                continue;
            }
            let dropped = rng.gen::<f64>() < cfg.drop;
            let mut j = [0.0; 4];
            for v in &mut j {
                *v = if half > 0.0 { rng.gen_range(-half..=half) } else { 0.0 };
            }
            let score = rng.gen_range(0.5..1.0);
            if dropped {
                continue;
            }
            let (a, b) = (g.x1 + j[0], g.x2 + j[2]);
            let (c, d) = (g.y1 + j[1], g.y2 + j[3]);
            let bbox = BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).clamped();
            if bbox.is_padding() {
                continue;
            }
            detections.push(Detection { frame: f, bbox, score });
        }
    }
    Ok(SynthSample {
        clip: Tensor::new(vec![t_n, h_n, w_n, 1], data)?,
        gt_boxes: gt,
        detections,
        verb,
        noun,
        split: pair_split(verb, noun, cfg.verbs, cfg.nouns),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub seed: u64,
    pub split: Split,
    pub rule: String,
    pub verbs: Vec<String>,
    pub nouns: Vec<String>,
    pub verb_groups: [Vec<usize>; 2],
    pub noun_groups: [Vec<usize>; 2],
    pub pairs: Vec<(usize, usize)>,
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub objects: usize,
    pub jitter: f64,
    pub drop: f64,
}

/// One split of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub manifest: Manifest,
    /// `[N, T, H, W, 1]`.
    pub clips: Tensor,
    pub boxes: Vec<BoxSet>,
    pub detections: Vec<Vec<Detection>>,
    pub labels: Vec<(usize, usize)>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clip(&self, i: usize) -> Tensor {
        let m = &self.manifest;
        let n = m.frames * m.height * m.width;
        Tensor::new(vec![m.frames, m.height, m.width, 1], self.clips.data()[i * n..(i + 1) * n].to_vec())
            .expect("clip slice")
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.verbs.len()
    }

    /// The samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Shard> {
        if let Some(i) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::data(format!("sample {i} outside a shard of {}", self.len())));
        }
        let m = &self.manifest;
        let n = m.frames * m.height * m.width;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.clips.data()[i * n..(i + 1) * n]);
        }
        let mut manifest = self.manifest.clone();
        manifest.count = idx.len();
        Ok(Shard {
            manifest,
            clips: Tensor::new(vec![idx.len(), m.frames, m.height, m.width, 1], data)?,
            boxes: idx.iter().map(|&i| self.boxes[i].clone()).collect(),
            detections: idx.iter().map(|&i| self.detections[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_container(&dir.join("clips.orvt"), &self.clips)?;
        let mut boxes = String::from("idx,t,o,x1,y1,x2,y2\n");
        let mut dets = String::from("idx,t,o,x1,y1,x2,y2,score\n");
        let mut labels = String::from("idx,verb,noun\n");
        for (i, b) in self.boxes.iter().enumerate() {
            for line in b.to_text().lines() {
                let _ = writeln!(boxes, "{i},{line}");
            }
            for (o, d) in self.detections[i].iter().enumerate() {
                let _ = writeln!(dets, "{i},{},{o},{},{}", d.frame, fmt_box(&d.bbox), d.score);
            }
            let (v, n) = self.labels[i];
            let _ = writeln!(labels, "{i},{v},{n}");
        }
        std::fs::write(dir.join("boxes.csv"), boxes)?;
        std::fs::write(dir.join("detections.csv"), dets)?;
        std::fs::write(dir.join("labels.csv"), labels)?;
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::data(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Shard> {
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name)).map_err(|e| Error::data(format!("{}: {e}", dir.join(name).display())))
        };
        let manifest: Manifest =
            serde_json::from_str(&read("manifest.json")?).map_err(|e| Error::data(format!("manifest.json: {e}")))?;
        let clips = read_container(&dir.join("clips.orvt")).map_err(|e| Error::data(format!("clips.orvt: {e}")))?;
        let m = &manifest;
        let n = m.count;
        if clips.shape() != [n, m.frames, m.height, m.width, 1] {
            return Err(Error::data(format!("clips.orvt shape {:?} disagrees with manifest", clips.shape())));
        }
        let mut boxes = vec![BoxSet::padding(m.frames, m.objects); n];
        for (ln, line) in read("boxes.csv")?.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(Error::data(format!("boxes.csv line {}: expected 7 fields", ln + 1)));
            }
            let (i, t, o) = (parse_usize(f[0], ln + 1)?, parse_usize(f[1], ln + 1)?, parse_usize(f[2], ln + 1)?);
            if i >= n || t >= m.frames || o >= m.objects {
                return Err(Error::data(format!("boxes.csv line {}: index out of range", ln + 1)));
            }
            boxes[i].set(t, o, parse_box(&f[3..7], ln + 1)?);
        }
        let mut detections = vec![Vec::new(); n];
        for (ln, line) in read("detections.csv")?.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 8 {
                return Err(Error::data(format!("detections.csv line {}: expected 8 fields", ln + 1)));
            }
            let i = parse_usize(f[0], ln + 1)?;
            if i >= n {
                return Err(Error::data(format!("detections.csv line {}: sample out of range", ln + 1)));
            }
            detections[i].push(Detection {
                frame: parse_usize(f[1], ln + 1)?,
                bbox: parse_box(&f[3..7], ln + 1)?,
                score: parse_f64(f[7], ln + 1)?,
            });
        }
        let mut labels = vec![(usize::MAX, usize::MAX); n];
        for (ln, line) in read("labels.csv")?.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(Error::data(format!("labels.csv line {}: expected 3 fields", ln + 1)));
            }
            let i = parse_usize(f[0], ln + 1)?;
            if i >= n {
                return Err(Error::data(format!("labels.csv line {}: sample out of range", ln + 1)));
            }
            labels[i] = (parse_usize(f[1], ln + 1)?, parse_usize(f[2], ln + 1)?);
        }
        if labels.iter().any(|l| l.0 >= m.verbs.len() || l.1 >= m.nouns.len()) {
            return Err(Error::data("labels.csv misses samples or has out-of-vocabulary labels"));
        }
        for b in &boxes {
            b.validate().map_err(|e| Error::data(format!("boxes.csv: {e}")))?;
        }
        Ok(Shard { manifest, clips, boxes, detections, labels })
    }
}

fn build_shard(cfg: &SynthConfig, seed: u64, split: Split) -> Result<Shard> {
    let pairs = split_pairs(cfg.verbs, cfg.nouns, split);
    let mut data = Vec::new();
    let mut boxes = Vec::new();
    let mut detections = Vec::new();
    let mut labels = Vec::new();
    for &(v, n) in &pairs {
        for k in 0..cfg.per_pair {
            let s = gen_clip(v, n, derive_seed(seed, &format!("{}/{v}/{n}/{k}", split.name())), cfg)?;
            data.extend(s.clip.into_data());
            boxes.push(s.gt_boxes);
            detections.push(s.detections);
            labels.push((v, n));
        }
    }
    let count = labels.len();
    let half_v = cfg.verbs / 2;
    let half_n = cfg.nouns / 2;
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION,
        seed,
        split,
        rule: "train = 1A + 2B, val = 1B + 2A".into(),
        verbs: VERBS[..cfg.verbs].iter().map(|s| s.to_string()).collect(),
        nouns: NOUNS[..cfg.nouns].iter().map(|s| s.to_string()).collect(),
        verb_groups: [(0..half_v).collect(), (half_v..cfg.verbs).collect()],
        noun_groups: [(0..half_n).collect(), (half_n..cfg.nouns).collect()],
        pairs,
        count,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        objects: cfg.max_objects,
        jitter: cfg.jitter,
        drop: cfg.drop,
    };
    let clips = Tensor::new(vec![count, cfg.frames, cfg.height, cfg.width, 1], data)?;
    Ok(Shard { manifest, clips, boxes, detections, labels })
}

/// Generates the train and val shards.
pub fn gen_dataset(cfg: &SynthConfig, seed: u64) -> Result<(Shard, Shard)> {
    cfg.validate()?;
    Ok((build_shard(cfg, seed, Split::Train)?, build_shard(cfg, seed, Split::Val)?))
}

/// Writes `train/` and `val/` shard directories under `dir`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, seed: u64) -> Result<(Shard, Shard)> {
    let (train, val) = gen_dataset(cfg, seed)?;
    train.save(&dir.join("train"))?;
    val.save(&dir.join("val"))?;
    Ok((train, val))
}

/// Velocity statistics of a box trajectory set: mean per-frame motion of
/// every object's center and the mean change of pairwise distance, used by
/// the nearest-centroid solvability check.
pub fn motion_features(b: &BoxSet) -> [f64; 4] {
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut n = 0.0f64;
    let mut turn = 0.0;
    for o in 0..b.objects() {
        let centers: Vec<(f64, f64)> = (0..b.frames())
            .map(|t| b.get(t, o))
            .filter(|x| !x.is_padding())
            .map(|x| {
                let c = x.center_size();
                (c[0], c[1])
            })
            .collect();
        for w in centers.windows(2) {
            vx += w[1].0 - w[0].0;
            vy += w[1].1 - w[0].1;
            n += 1.0;
        }
        for w in centers.windows(3) {
            let a = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            let c = (w[2].0 - w[1].0, w[2].1 - w[1].1);
            turn += (a.0 * c.1 - a.1 * c.0).abs();
        }
    }
    let spread = |t: usize| {
        let live: Vec<[f64; 4]> = (0..b.objects()).map(|o| b.get(t, o)).filter(|x| !x.is_padding()).map(|x| x.center_size()).collect();
        if live.len() < 2 {
            return 0.0;
        }
        let dx = live[0][0] - live[1][0];
        let dy = live[0][1] - live[1][1];
        (dx * dx + dy * dy).sqrt()
    };
    let n = n.max(1.0);
    let dspread = spread(b.frames() - 1) - spread(0);
    [vx / n, vy / n, dspread, 100.0 * turn / n]
}
