//! Criterion-level checks returning measured quantities, shared by the
//! focused integration tests and the acceptance target.

use orvit::attention::{attend, AttentionVariant};
use orvit::backbone::{Block, GridDims, Model, ModelConfig};
use orvit::geometry::{box_splat, roi_align, BBox, BoxSet, RoiParams};
use orvit::gradsuite::{project, tiny_orvit_config, STEP};
use orvit::orvit::{OrvitBlock, OrvitConfig, PoolOrder};
use orvit::params::ParamStore;
use orvit::tensor::{check_gradients, check_param_gradients, Tape, Tensor};
use orvit::tracker::{hungarian_assign, id_consistency, track_clip, Detection, SortParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;

pub const DIMS: GridDims = GridDims { frames: 2, height: 3, width: 3, dim: 8 };
pub const VARIANTS: [AttentionVariant; 3] = [AttentionVariant::Joint, AttentionVariant::Divided, AttentionVariant::Trajectory];

pub fn block_config(variant: AttentionVariant, objects: usize, odm: bool) -> OrvitConfig {
    let mut c = tiny_orvit_config(variant, PoolOrder::PoolFirst, 8);
    c.num_objects = objects;
    c.odm = odm;
    c
}

// ---- gradients ----

/// Largest relative error over `cases` random block configurations, both
/// parameter and input gradients, with a description of the worst entry.
pub fn random_block_gradcheck(cases: usize, seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, String::new());
    for case in 0..cases {
        let variant = VARIANTS[case % 3];
        let order = if rng.gen_bool(0.5) { PoolOrder::PoolFirst } else { PoolOrder::MlpFirst };
        let mut cfg = tiny_orvit_config(variant, order, [8, 4, 2][rng.gen_range(0..3)]);
        cfg.num_objects = rng.gen_range(1..=3);
        cfg.odm = rng.gen_bool(0.8);
        let padding = rng.gen_range(0..=cfg.num_objects);
        let dims = GridDims { frames: rng.gen_range(1..=2), height: rng.gen_range(2..=3), width: rng.gen_range(2..=3), dim: 8 };
        let mut store = ParamStore::new();
        let block = OrvitBlock::new(&mut store, "b", &cfg, dims.frames, case as u64).unwrap();
        let x = random_tensor(&[dims.tokens(), 8], &mut rng);
        let boxes = random_boxset(dims.frames, cfg.num_objects, padding, &mut rng);
        let mut report = check_param_gradients(
            &store,
            |t, s| {
                let xv = t.constant(x.clone());
                let y = block.forward(t, s, xv, dims, &boxes)?;
                project(t, y.out, case as u64)
            },
            STEP,
            Some(12),
        )
        .unwrap();
        report.merge(
            check_gradients(
                |t, v| {
                    let y = block.forward(t, &store, v[0], dims, &boxes)?;
                    project(t, y.out, case as u64)
                },
                std::slice::from_ref(&x),
                STEP,
            )
            .unwrap(),
        );
        if report.max_rel_err >= worst.0 {
            worst = (report.max_rel_err, format!("case {case} {variant} {order:?} O={} odm={} {:?}", cfg.num_objects, cfg.odm, report.worst));
        }
    }
    worst
}

// ---- oracles ----

pub fn roi_oracle_max_diff(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (h, w, d) = (rng.gen_range(1..=7), rng.gen_range(1..=7), rng.gen_range(1..=3));
        let grid = random_tensor(&[h, w, d], &mut rng);
        let b = random_box(&mut rng, 0.01);
        let roi = RoiParams { size: rng.gen_range(1..=4), samples_per_bin: rng.gen_range(1..=3) };
        let got = roi_align(&grid, &b, roi).unwrap();
        worst = worst.max(max_abs_diff(got.data(), &roi_align_oracle(&grid, &b, roi)));
    }
    worst
}

/// Number of random matrices (n ≤ 6, integer costs) where the assignment
/// cost differs from brute force.
pub fn hungarian_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .filter(|_| {
            let (m, n) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let cost: Vec<f64> = (0..m * n).map(|_| rng.gen_range(0..20) as f64).collect();
            let pairs = hungarian_assign(&cost, m, n).unwrap();
            let total: f64 = pairs.iter().map(|&(r, c)| cost[r * n + c]).sum();
            pairs.len() != m.min(n) || total != brute_force_assignment(&cost, m, n)
        })
        .count()
}

/// Every cell-aligned box on a few grids splats to exactly 1 inside and 0
/// outside.
pub fn splat_axis_aligned_exact() -> bool {
    let v = Tensor::new(vec![1], vec![1.0]).unwrap();
    for (h, w) in [(4, 4), (3, 5), (6, 2)] {
        for i0 in 0..h {
            for i1 in i0 + 1..=h {
                for j0 in 0..w {
                    for j1 in j0 + 1..=w {
                        let b = BBox::new(j0 as f64 / w as f64, i0 as f64 / h as f64, j1 as f64 / w as f64, i1 as f64 / h as f64);
                        let s = box_splat(&v, &b, h, w).unwrap();
                        if s.data() != coverage_oracle(h, w, &b).as_slice() {
                            return false;
                        }
                    }
                }
            }
        }
    }
    true
}

pub fn attend_oracle_max_diff(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let heads = rng.gen_range(1..=4);
        let d = heads * rng.gen_range(1..=4);
        let (nq, nk) = (rng.gen_range(1..=6), rng.gen_range(1..=7));
        let q = random_tensor(&[nq, d], &mut rng);
        let k = random_tensor(&[nk, d], &mut rng);
        let v = random_tensor(&[nk, d], &mut rng);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let a = attend(&mut tape, qv, kv, vv, heads).unwrap();
        worst = worst.max(max_abs_diff(tape.value(a.out).data(), &naive_attention(&q, &k, &v, heads)));
    }
    worst
}

// ---- drop-in identity and padding ----

fn plain_reference(model: &Model, store: &ParamStore, clip: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let grid = model.embed(&mut tape, store, clip).unwrap();
    let mut x = grid.tokens;
    for b in &model.blocks {
        let Block::Plain(b) = b else { panic!("expected plain blocks") };
        let h = b.ln1.forward(&mut tape, store, x).unwrap();
        let a = b.attn.forward(&mut tape, store, h, grid.dims, None).unwrap();
        let x1 = tape.add(x, a.out).unwrap();
        let h = b.ln2.forward(&mut tape, store, x1).unwrap();
        let m = b.mlp.forward(&mut tape, store, h).unwrap();
        x = tape.add(x1, m).unwrap();
    }
    let x = model.final_ln.forward(&mut tape, store, x).unwrap();
    let cls = tape.slice_rows(x, 0, 1).unwrap();
    let logits = model.head.forward(&mut tape, store, cls).unwrap();
    tape.value(logits).data().to_vec()
}

/// With no ORViT layers the model equals a hand-assembled plain backbone
/// bit for bit, whatever boxes it is given; its parameters also equal the
/// shared parameters of an ORViT model built from the same seed.
pub fn dropin_identity_bitwise(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for variant in ["joint", "divided", "trajectory"] {
        let cfg = tiny_config().with("orvit.layers", "").with("model.attention_variant", variant);
        let (model, store) = Model::new(&ModelConfig::from_config(&cfg).unwrap(), seed).unwrap();
        let (_, with_orvit) = Model::new(&ModelConfig::from_config(&cfg.clone().with("orvit.layers", "1")).unwrap(), seed).unwrap();
        for id in with_orvit.ids() {
            if let Some(t) = store.by_name(with_orvit.name(id)) {
                if t != with_orvit.get(id) {
                    return false;
                }
            }
        }
        let clip = random_tensor(&[4, 8, 8, 1], &mut rng);
        let reference = plain_reference(&model, &store, &clip);
        for _ in 0..3 {
            let boxes = random_boxset(4, 2, 0, &mut rng);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &store, &clip, &boxes, None).unwrap();
            if tape.value(out.logits).data() != reference.as_slice() {
                return false;
            }
        }
    }
    true
}

fn zero_streams(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let r_out = name.starts_with("b.r.") && name.contains(".o.");
        let d_out = name.starts_with("b.d.") && (name.contains(".o.") || name.contains(".up."));
        if r_out || d_out {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Largest `|Y − (X + MLP(LN(X)))|` with the stream output weights zeroed,
/// over variants and ODM on/off.
pub fn zeroed_streams_max_diff(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for variant in VARIANTS {
        for odm in [true, false] {
            for d_odm in [8, 4] {
                let mut cfg = block_config(variant, 2, odm);
                cfg.d_odm = d_odm;
                let mut store = ParamStore::new();
                let block = OrvitBlock::new(&mut store, "b", &cfg, DIMS.frames, seed).unwrap();
                zero_streams(&mut store);
                let x = random_tensor(&[DIMS.tokens(), 8], &mut rng);
                let boxes = random_boxset(DIMS.frames, 2, 0, &mut rng);
                let mut tape = Tape::new();
                let xv = tape.constant(x);
                let y = block.forward(&mut tape, &store, xv, DIMS, &boxes).unwrap();
                let h = block.ln_mlp.forward(&mut tape, &store, xv).unwrap();
                let m = block.mlp.forward(&mut tape, &store, h).unwrap();
                let want = tape.add(xv, m).unwrap();
                worst = worst.max(max_abs_diff(tape.value(y.out).data(), tape.value(want).data()));
            }
        }
    }
    worst
}

/// Adding one all-padding slot: returns whether the D stream stayed
/// bitwise identical for every variant and O ∈ 1..=3, and the largest block
/// output difference.
pub fn padding_block_check(seed: u64) -> (bool, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exact = true;
    let mut worst = 0.0f64;
    for variant in VARIANTS {
        for objects in 1..=3 {
            let mut s1 = ParamStore::new();
            let b1 = OrvitBlock::new(&mut s1, "b", &block_config(variant, objects, true), DIMS.frames, seed).unwrap();
            let mut s2 = ParamStore::new();
            let b2 = OrvitBlock::new(&mut s2, "b", &block_config(variant, objects + 1, true), DIMS.frames, seed + 1).unwrap();
            copy_params(&s1, &mut s2, objects, objects + 1);
            let boxes = random_boxset(DIMS.frames, objects, 0, &mut rng);
            let x = random_tensor(&[DIMS.tokens(), 8], &mut rng);
            // One tape per store: tapes cache parameter bindings by id.
            let (mut t1, mut t2) = (Tape::new(), Tape::new());
            let (x1, x2) = (t1.constant(x.clone()), t2.constant(x));
            let y1 = b1.forward(&mut t1, &s1, x1, DIMS, &boxes).unwrap();
            let y2 = b2.forward(&mut t2, &s2, x2, DIMS, &boxes.with_padding_slots(1)).unwrap();
            exact &= t1.value(y1.dynamics.unwrap()).data() == t2.value(y2.dynamics.unwrap()).data();
            worst = worst.max(max_abs_diff(t1.value(y1.out).data(), t2.value(y2.out).data()));
        }
    }
    (exact, worst)
}

/// Largest logit change of a full model when one padding slot is added.
pub fn padding_logits_max_diff(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for variant in ["joint", "divided", "trajectory"] {
        for objects in 1..=3 {
            let c1 = tiny_config()
                .with("orvit.attention_variant", variant)
                .with("model.attention_variant", variant)
                .with("orvit.num_objects", objects);
            let c2 = c1.clone().with("orvit.num_objects", objects + 1);
            let (m1, s1) = Model::new(&ModelConfig::from_config(&c1).unwrap(), seed).unwrap();
            let (m2, mut s2) = Model::new(&ModelConfig::from_config(&c2).unwrap(), seed + 1).unwrap();
            copy_params(&s1, &mut s2, objects, objects + 1);
            let clip = random_tensor(&[4, 8, 8, 1], &mut rng);
            let boxes = random_boxset(4, objects, 0, &mut rng);
            let (mut t1, mut t2) = (Tape::new(), Tape::new());
            let l1 = m1.forward(&mut t1, &s1, &clip, &boxes, None).unwrap().logits;
            let l2 = m2.forward(&mut t2, &s2, &clip, &boxes.with_padding_slots(1), None).unwrap().logits;
            worst = worst.max(max_abs_diff(t1.value(l1).data(), t2.value(l2).data()));
        }
    }
    worst
}

// ---- tracker ----

/// Up to three objects in disjoint horizontal lanes moving linearly.
pub fn linear_scene(objects: usize, frames: usize, rng: &mut ChaCha8Rng) -> BoxSet {
    let lane = 1.0 / objects as f64;
    let mut b = BoxSet::padding(frames, objects);
    let span = frames as f64 - 1.0;
    for o in 0..objects {
        let h = rng.gen_range(0.12..0.9 * lane);
        let w = rng.gen_range(0.1..0.25);
        let cy0 = o as f64 * lane + lane / 2.0;
        let cx0 = rng.gen_range(w / 2.0..1.0 - w / 2.0);
        let cx1 = rng.gen_range(w / 2.0..1.0 - w / 2.0);
        let dy = rng.gen_range(-0.04..0.04) * lane;
        for t in 0..frames {
            let a = t as f64 / span;
            b.set(t, o, BBox::from_center(cx0 + (cx1 - cx0) * a, cy0 + dy * a, w, h));
        }
    }
    b
}

/// Per-frame detections of `gt` with Gaussian corner noise, in shuffled
/// order so ids cannot ride on detection order.
pub fn noisy_detections(gt: &BoxSet, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let mut out = Vec::new();
    for t in 0..gt.frames() {
        let mut order: Vec<usize> = (0..gt.objects()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for o in order {
            let g = gt.get(t, o);
            let mut j = [0.0; 4];
            if sigma > 0.0 {
                let noise = Normal::new(0.0, sigma).unwrap();
                for v in &mut j {
                    *v = noise.sample(rng);
                }
            }
            out.push(Detection { frame: t, bbox: BBox::new(g.x1 + j[0], g.y1 + j[1], g.x2 + j[2], g.y2 + j[3]), score: 0.9 });
        }
    }
    out
}

/// Mean and minimum id consistency over `scenes` 16-frame scenes of 1–3
/// objects.
pub fn tracker_consistency(sigma: f64, scenes: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut min) = (0.0, 1.0f64);
    for k in 0..scenes {
        let gt = linear_scene(1 + k % 3, 16, &mut rng);
        let tracks = track_clip(&noisy_detections(&gt, sigma, &mut rng), 16, SortParams::default()).unwrap();
        let c = id_consistency(&gt, &tracks);
        total += c;
        min = min.min(c);
    }
    (total / scenes as f64, min)
}
