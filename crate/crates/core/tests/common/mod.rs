//! Brute-force oracles shared by the integration tests and the acceptance
//! target. They avoid the library's own helpers wherever an independent
//! formulation exists.
#![allow(dead_code)]

pub mod checks;

use orvit::geometry::{BBox, RoiParams};
use orvit::tensor::Tensor;

/// Bilinear interpolation as a sum of tent kernels over every cell.
pub fn tent_sample(grid: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (h, w, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let mut out = vec![0.0; d];
    for i in 0..h {
        for j in 0..w {
            let k = (1.0 - (x - j as f64).abs()).max(0.0) * (1.0 - (y - i as f64).abs()).max(0.0);
            if k == 0.0 {
                continue;
            }
            for c in 0..d {
                out[c] += k * grid.data()[(i * w + j) * d + c];
            }
        }
    }
    out
}

/// RoIAlign written directly from its definition: an `S × S` bin grid over
/// the box, `n × n` regularly spaced samples per bin, averaged.
pub fn roi_align_oracle(grid: &Tensor, b: &BBox, roi: RoiParams) -> Vec<f64> {
    let (h, w, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let s = roi.size;
    let n = roi.samples_per_bin;
    let mut out = vec![0.0; s * s * d];
    if *b == BBox::default() {
        return out;
    }
    let (x1, y1) = (b.x1 * w as f64, b.y1 * h as f64);
    let (x2, y2) = (b.x2 * w as f64, b.y2 * h as f64);
    for by in 0..s {
        for bx in 0..s {
            let mut acc = vec![0.0; d];
            for sy in 0..n {
                for sx in 0..n {
                    let fy = (by as f64 + (sy as f64 + 0.5) / n as f64) / s as f64;
                    let fx = (bx as f64 + (sx as f64 + 0.5) / n as f64) / s as f64;
                    let py = y1 + fy * (y2 - y1);
                    let px = x1 + fx * (x2 - x1);
                    let v = tent_sample(grid, px - 0.5, py - 0.5);
                    for c in 0..d {
                        acc[c] += v[c];
                    }
                }
            }
            for c in 0..d {
                out[(by * s + bx) * d + c] = acc[c] / (n * n) as f64;
            }
        }
    }
    out
}

/// Fraction of each cell `[j, j+1) × [i, i+1)` covered by the box, by
/// rectangle intersection.
pub fn coverage_oracle(h: usize, w: usize, b: &BBox) -> Vec<f64> {
    let (x1, x2) = (b.x1 * w as f64, b.x2 * w as f64);
    let (y1, y2) = (b.y1 * h as f64, b.y2 * h as f64);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let ox = (x2.min(j as f64 + 1.0) - x1.max(j as f64)).max(0.0);
            let oy = (y2.min(i as f64 + 1.0) - y1.max(i as f64)).max(0.0);
            out[i * w + j] = ox * oy;
        }
    }
    out
}

/// Multi-head scaled dot-product attention with explicit loops.
/// `q: [nq, d]`, `k, v: [nk, d]` row-major; returns `[nq, d]`.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let dh = d / heads;
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let mut scores = vec![0.0; nk];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q.data()[i * d + h * dh + c] * k.data()[j * d + h * dh + c];
                }
                *s = dot / (dh as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let p = (s - m).exp() / z;
                for c in 0..dh {
                    out[i * d + h * dh + c] += p * v.data()[j * d + h * dh + c];
                }
            }
        }
    }
    out
}

/// Minimum total cost over all assignments of min(m, n) pairs, by
/// enumerating permutations.
pub fn brute_force_assignment(cost: &[f64], m: usize, n: usize) -> f64 {
    fn rec(cost: &[f64], m: usize, n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, skips: usize) {
        if row == m {
            *best = best.min(acc);
            return;
        }
        // Rows may go unmatched only when there are more rows than columns.
        if skips > 0 {
            rec(cost, m, n, row + 1, used, acc, best, skips - 1);
        }
        for c in 0..n {
            if !used[c] {
                used[c] = true;
                rec(cost, m, n, row + 1, used, acc + cost[row * n + c], best, skips);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let skips = m.saturating_sub(n);
    rec(cost, m, n, 0, &mut vec![false; n], 0.0, &mut best, skips);
    best
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A random valid box with both sides at least `min_side`.
pub fn random_box(rng: &mut impl rand::Rng, min_side: f64) -> BBox {
    let w = rng.gen_range(min_side..=1.0);
    let h = rng.gen_range(min_side..=1.0);
    let x1 = rng.gen_range(0.0..=1.0 - w);
    let y1 = rng.gen_range(0.0..=1.0 - h);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap()
}

use orvit::config::Config;
use orvit::geometry::BoxSet;
use orvit::params::ParamStore;

/// A model small enough for exhaustive checks: 4×8×8 clips, 2×2×2 token
/// grid, width 8, one ORViT layer at index 1.
pub fn tiny_config() -> Config {
    Config::default()
        .with("data.frames", 4)
        .with("data.height", 8)
        .with("data.width", 8)
        .with("model.dim", 8)
        .with("model.heads", 2)
        .with("model.depth", 2)
        .with("model.patch_t", 2)
        .with("model.dropout", 0.0)
        .with("orvit.layers", "1")
        .with("orvit.num_objects", 2)
        .with("orvit.roi_size", 2)
}

/// `frames × objects` boxes; the last `padding` slots stay empty.
pub fn random_boxset(frames: usize, objects: usize, padding: usize, rng: &mut impl rand::Rng) -> BoxSet {
    let mut b = BoxSet::padding(frames, objects);
    for t in 0..frames {
        for o in 0..objects.saturating_sub(padding) {
            b.set(t, o, random_box(rng, 0.1));
        }
    }
    b
}

/// Copies every same-named, same-shaped parameter from `src` into `dst`.
/// Object-slot tables `[frames·o_src, d]` are copied slot by slot into
/// `[frames·o_dst, d]` tables; rows of extra slots are left untouched.
pub fn copy_params(src: &ParamStore, dst: &mut ParamStore, o_src: usize, o_dst: usize) {
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.name(id).to_string();
        let Some(s) = src.by_name(&name) else { continue };
        let s = s.clone();
        let t = dst.get_mut(id);
        if s.shape() == t.shape() {
            *t = s;
        } else if name.ends_with(".pos") && s.shape()[1] == t.shape()[1] {
            let d = s.shape()[1];
            let frames = s.shape()[0] / o_src;
            for f in 0..frames {
                for o in 0..o_src.min(o_dst) {
                    let from = (f * o_src + o) * d;
                    let to = (f * o_dst + o) * d;
                    t.data_mut()[to..to + d].copy_from_slice(&s.data()[from..from + d]);
                }
            }
        } else {
            panic!("cannot map parameter {name}: {:?} vs {:?}", s.shape(), t.shape());
        }
    }
}

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use sha2::{Digest, Sha256};

pub const TINY_CLI_CONFIG: &str = "\
data.frames = 4
data.height = 8
data.width = 8
data.per_pair = 4
model.dim = 8
model.heads = 2
model.depth = 2
model.patch_t = 2
orvit.layers = 1
orvit.roi_size = 2
train.epochs = 1
train.batch = 4
";

pub fn run_cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_orvit")).args(args).output().expect("spawn orvit");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

/// sha256 of every file under `dir`, keyed by relative path.
pub fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, format!("{:x}", Sha256::digest(&bytes)));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs every subcommand once under `root` and returns, per subcommand,
/// its exit code and a digest of its stdout and output files.
pub fn cli_round(root: &Path) -> Vec<(String, i32, String)> {
    std::fs::create_dir_all(root).unwrap();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY_CLI_CONFIG).unwrap();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let c = cfg.to_string_lossy().into_owned();
    let steps: Vec<(&str, Vec<String>, Option<String>)> = vec![
        ("gen-data", vec!["gen-data".into(), "--config".into(), c.clone(), "--seed".into(), "7".into(), "--out".into(), p("data")], Some(p("data"))),
        ("track", vec!["track".into(), p("data/val"), "--config".into(), c.clone(), "--out".into(), p("track")], Some(p("track"))),
        ("train", vec!["train".into(), "--config".into(), c.clone(), "--seed".into(), "3".into(), "--data".into(), p("data"), "--out".into(), p("train")], Some(p("train"))),
        ("eval", vec!["eval".into(), p("train/checkpoint"), p("data/val"), "--out".into(), p("eval")], Some(p("eval"))),
        (
            "ablate",
            vec![
                "ablate".into(), "--config".into(), c.clone(), "--data".into(), p("data"), "--out".into(), p("ablate"),
                "--seeds".into(), "0,1,2".into(), "--tags".into(), "baseline,orvit".into(),
            ],
            Some(p("ablate")),
        ),
        ("attn-maps", vec!["attn-maps".into(), p("train/checkpoint"), p("data/val"), "3".into(), "--out".into(), p("maps")], Some(p("maps"))),
        ("grad-check", vec!["grad-check".into(), "--module".into(), "geometry".into(), "--seed".into(), "1".into()], None),
    ];
    let mut out = Vec::new();
    for (name, args, dir) in steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, stdout) = run_cli(&args);
        // Paths differ between roots; digest stdout with the root removed.
        let stdout = stdout.replace(&root.to_string_lossy().into_owned(), "<root>");
        let mut h = Sha256::new();
        h.update(stdout.as_bytes());
        if let Some(d) = dir {
            for (k, v) in tree_digest(Path::new(&d)) {
                h.update(k.as_bytes());
                h.update(v.as_bytes());
            }
        }
        out.push((name.to_string(), code, format!("{:x}", h.finalize())));
    }
    out
}
