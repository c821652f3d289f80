//! Multi-head attention and the three space-time variants.
//!
//! Token matrices are `[1 + T·H·W, d]` with the CLS token in row 0 followed
//! by patch tokens in frame-major order. Every variant is shape preserving.
//! Extra per-frame keys (object tokens) can be supplied; they act as keys
//! and values only and never emit queries.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use crate::backbone::GridDims;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{write_container, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Joint,
    Divided,
    Trajectory,
}

impl FromStr for AttentionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(AttentionVariant::Joint),
            "divided" => Ok(AttentionVariant::Divided),
            "trajectory" => Ok(AttentionVariant::Trajectory),
            other => Err(Error::config(format!("unknown attention variant {other:?}"))),
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::Joint => "joint",
            AttentionVariant::Divided => "divided",
            AttentionVariant::Trajectory => "trajectory",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_model: usize,
    pub variant: AttentionVariant,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Dense layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, seed: u64) -> Self {
        let w = store.add_init(&format!("{name}.w"), &[din, dout], Init::Normal(1.0 / (din as f64).sqrt()), seed);
        let b = bias.then(|| store.add_init(&format!("{name}.b"), &[dout], Init::Zeros, seed));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// LayerNorm with learnable affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, seed: u64) -> Self {
        LayerNorm {
            gamma: store.add_init(&format!("{name}.gamma"), &[d], Init::Ones, seed),
            beta: store.add_init(&format!("{name}.beta"), &[d], Init::Zeros, seed),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layernorm(x, g, b, LN_EPS)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, hidden: usize, dout: usize, seed: u64) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), din, hidden, true, seed),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dout, true, seed),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Output of an attention call: the result and per-head weight matrices.
#[derive(Clone, Debug)]
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention on already projected `q: [Nq, d]`,
/// `k, v: [Nk, d]`, split into `heads` and concatenated back to `[Nq, d]`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Attended> {
    let d = tape.value(q).last_dim();
    if tape.value(k).last_dim() != d || tape.value(v).last_dim() != d {
        return Err(Error::shape(format!(
            "attend: q {:?}, k {:?}, v {:?} widths differ",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        )));
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::shape(format!("attend: {} keys but {} values", tape.value(k).rows(), tape.value(v).rows())));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape(format!("attend: width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, h * dh, dh)?, tape.slice_cols(k, h * dh, dh)?, tape.slice_cols(v, h * dh, dh)?)
        };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let p = tape.softmax(s)?;
        outs.push(tape.matmul(p, vh)?);
        weights.push(p);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok(Attended { out, weights })
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, seed: u64) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, seed),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, seed),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, seed),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, seed),
            heads,
        }
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xq: Var, xkv: Var) -> Result<Attended> {
        let q = self.q.forward(tape, store, xq)?;
        let k = self.k.forward(tape, store, xkv)?;
        let v = self.v.forward(tape, store, xkv)?;
        let a = attend(tape, q, k, v, self.heads)?;
        let out = self.o.forward(tape, store, a.out)?;
        Ok(Attended { out, weights: a.weights })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.param_ids()).collect()
    }
}

/// Key/value rows that belong to particular frames (object tokens).
#[derive(Clone, Debug)]
pub struct FrameKeys {
    pub rows: Var,
    pub frame_of: Vec<usize>,
}

impl FrameKeys {
    fn indices_for(&self, t: usize) -> Vec<usize> {
        self.frame_of.iter().enumerate().filter(|(_, f)| **f == t).map(|(i, _)| i).collect()
    }
}

/// Extra parameters for trajectory attention's second (temporal) stage.
#[derive(Clone, Debug)]
pub struct TrajectoryStage {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

/// One space-time attention layer of a configured variant.
#[derive(Clone, Debug)]
pub struct SpaceTimeAttention {
    pub variant: AttentionVariant,
    /// Joint attention; the spatial pass for divided; stage one and the CLS
    /// readout for trajectory.
    pub main: MultiHeadAttention,
    pub temporal: Option<MultiHeadAttention>,
    pub trajectory: Option<TrajectoryStage>,
}

/// Output of a space-time attention layer.
#[derive(Clone, Debug)]
pub struct SpaceTimeOutput {
    /// `[1 + T·H·W, d]`, to be added residually.
    pub out: Var,
    /// Per head, the CLS query's weights over `[CLS, patches.., extra..]`.
    pub cls_weights: Vec<Var>,
    /// Every attention-weight matrix computed, for normalization checks.
    pub all_weights: Vec<Var>,
}

impl SpaceTimeAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, seed: u64) -> Self {
        let d = cfg.d_model;
        let main = MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.heads, seed);
        let temporal = (cfg.variant == AttentionVariant::Divided)
            .then(|| MultiHeadAttention::new(store, &format!("{name}.tattn"), d, cfg.heads, seed));
        let trajectory = (cfg.variant == AttentionVariant::Trajectory).then(|| TrajectoryStage {
            q: Linear::new(store, &format!("{name}.traj.q"), d, d, true, seed),
            k: Linear::new(store, &format!("{name}.traj.k"), d, d, true, seed),
            v: Linear::new(store, &format!("{name}.traj.v"), d, d, true, seed),
        });
        SpaceTimeAttention { variant: cfg.variant, main, temporal, trajectory }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.main.param_ids();
        if let Some(t) = &self.temporal {
            ids.extend(t.param_ids());
        }
        if let Some(t) = &self.trajectory {
            for l in [&t.q, &t.k, &t.v] {
                ids.extend(l.param_ids());
            }
        }
        ids
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dims: GridDims,
        extra: Option<&FrameKeys>,
    ) -> Result<SpaceTimeOutput> {
        let expected = dims.tokens();
        if tape.value(x).rows() != expected || tape.value(x).last_dim() != dims.dim {
            return Err(Error::shape(format!(
                "space-time attention expects [{expected}, {}] tokens, got {:?}",
                dims.dim,
                tape.shape(x)
            )));
        }
        match self.variant {
            AttentionVariant::Joint => self.joint(tape, store, x, extra),
            AttentionVariant::Divided => self.divided(tape, store, x, dims, extra),
            AttentionVariant::Trajectory => self.trajectory(tape, store, x, dims, extra),
        }
    }

    fn joint(&self, tape: &mut Tape, store: &ParamStore, x: Var, extra: Option<&FrameKeys>) -> Result<SpaceTimeOutput> {
        let kv = match extra {
            Some(e) if tape.value(e.rows).rows() > 0 => tape.concat_rows(&[x, e.rows])?,
            _ => x,
        };
        let a = self.main.forward(tape, store, x, kv)?;
        let mut cls_weights = Vec::with_capacity(a.weights.len());
        for w in &a.weights {
            cls_weights.push(tape.slice_rows(*w, 0, 1)?);
        }
        Ok(SpaceTimeOutput { out: a.out, cls_weights, all_weights: a.weights })
    }

    /// CLS query attending jointly to every token and extra key.
    fn cls_readout(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        extra: Option<&FrameKeys>,
    ) -> Result<Attended> {
        let cls = tape.slice_rows(x, 0, 1)?;
        let kv = match extra {
            Some(e) if tape.value(e.rows).rows() > 0 => tape.concat_rows(&[x, e.rows])?,
            _ => x,
        };
        self.main.forward(tape, store, cls, kv)
    }

    fn frame_extra(tape: &mut Tape, extra: Option<&FrameKeys>, t: usize) -> Result<Option<Var>> {
        match extra {
            Some(e) => {
                let idx = e.indices_for(t);
                if idx.is_empty() {
                    Ok(None)
                } else {
                    Ok(Some(tape.gather_rows(e.rows, Rc::new(idx))?))
                }
            }
            None => Ok(None),
        }
    }

    fn divided(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dims: GridDims,
        extra: Option<&FrameKeys>,
    ) -> Result<SpaceTimeOutput> {
        let temporal = self.temporal.as_ref().ok_or_else(|| Error::config("divided attention without temporal params"))?;
        let s = dims.height * dims.width;
        let mut all_weights = Vec::new();

        // Temporal pass: tokens sharing a spatial index attend across frames.
        let mut order = Vec::with_capacity(dims.frames * s);
        for sp in 0..s {
            for t in 0..dims.frames {
                order.push(1 + t * s + sp);
            }
        }
        let by_space = tape.gather_rows(x, Rc::new(order.clone()))?;
        let mut tparts = Vec::with_capacity(s);
        for sp in 0..s {
            let g = tape.slice_rows(by_space, sp * dims.frames, dims.frames)?;
            let a = temporal.forward(tape, store, g, g)?;
            all_weights.extend(a.weights);
            tparts.push(a.out);
        }
        let tcat = tape.concat_rows(&tparts)?;
        let zero_cls = tape.constant(Tensor::zeros(&[1, dims.dim]));
        let mut inverse = vec![0usize; dims.frames * s + 1];
        inverse[0] = dims.frames * s;
        for (pos, &row) in order.iter().enumerate() {
            inverse[row] = pos;
        }
        let tstack = tape.concat_rows(&[tcat, zero_cls])?;
        let temporal_out = tape.gather_rows(tstack, Rc::new(inverse))?;
        let z = tape.add(x, temporal_out)?;

        // Spatial pass within each frame, with CLS as an extra key.
        let cls = tape.slice_rows(z, 0, 1)?;
        let mut sparts = Vec::with_capacity(dims.frames + 1);
        let ro = self.cls_readout(tape, store, z, extra)?;
        all_weights.extend(ro.weights.iter().copied());
        sparts.push(ro.out);
        for t in 0..dims.frames {
            let frame = tape.slice_rows(z, 1 + t * s, s)?;
            let mut keys = vec![cls, frame];
            if let Some(e) = Self::frame_extra(tape, extra, t)? {
                keys.push(e);
            }
            let kv = tape.concat_rows(&keys)?;
            let a = self.main.forward(tape, store, frame, kv)?;
            all_weights.extend(a.weights);
            sparts.push(a.out);
        }
        let spatial_out = tape.concat_rows(&sparts)?;
        let out = tape.add(temporal_out, spatial_out)?;
        Ok(SpaceTimeOutput { out, cls_weights: ro.weights, all_weights })
    }

    fn trajectory(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dims: GridDims,
        extra: Option<&FrameKeys>,
    ) -> Result<SpaceTimeOutput> {
        let stage2 = self.trajectory.as_ref().ok_or_else(|| Error::config("trajectory attention without stage-two params"))?;
        let s = dims.height * dims.width;
        let n = dims.frames * s;
        let heads = self.main.heads;
        let dh = dims.dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut all_weights = Vec::new();

        let patches = tape.slice_rows(x, 1, n)?;
        let q = self.main.q.forward(tape, store, patches)?;
        let mut frame_k = Vec::with_capacity(dims.frames);
        let mut frame_v = Vec::with_capacity(dims.frames);
        for t in 0..dims.frames {
            let rows = tape.slice_rows(patches, t * s, s)?;
            let kv = match Self::frame_extra(tape, extra, t)? {
                Some(e) => tape.concat_rows(&[rows, e])?,
                None => rows,
            };
            frame_k.push(self.main.k.forward(tape, store, kv)?);
            frame_v.push(self.main.v.forward(tape, store, kv)?);
        }

        // Stage one: each query attends spatially within every frame,
        // giving one trajectory token per (query, frame).
        let mut traj = Vec::with_capacity(dims.frames);
        for t in 0..dims.frames {
            let a = attend(tape, q, frame_k[t], frame_v[t], heads)?;
            all_weights.extend(a.weights);
            traj.push(a.out);
        }

        // Stage two: attend along each query's trajectory, with the query
        // taken from the trajectory token in the query's own frame.
        let stacked = tape.concat_rows(&traj)?;
        let own: Vec<usize> = (0..n).map(|i| (i / s) * n + i).collect();
        let own = tape.gather_rows(stacked, Rc::new(own))?;
        let q2 = stage2.q.forward(tape, store, own)?;
        let k2: Vec<Var> = traj.iter().map(|t| stage2.k.forward(tape, store, *t)).collect::<Result<_>>()?;
        let v2: Vec<Var> = traj.iter().map(|t| stage2.v.forward(tape, store, *t)).collect::<Result<_>>()?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q2, h * dh, dh)?;
            let mut scores = Vec::with_capacity(dims.frames);
            let mut vals = Vec::with_capacity(dims.frames);
            for t in 0..dims.frames {
                let kh = tape.slice_cols(k2[t], h * dh, dh)?;
                let prod = tape.mul(qh, kh)?;
                let sc = tape.row_sum(prod);
                scores.push(tape.scale(sc, scale));
                vals.push(tape.slice_cols(v2[t], h * dh, dh)?);
            }
            let sc = tape.concat_cols(&scores)?;
            let p = tape.softmax(sc)?;
            all_weights.push(p);
            let mut acc: Option<Var> = None;
            for (t, v) in vals.into_iter().enumerate() {
                let pt = tape.slice_cols(p, t, 1)?;
                let term = tape.mul_col(v, pt)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            head_outs.push(acc.expect("at least one frame"));
        }
        let merged = if heads == 1 { head_outs[0] } else { tape.concat_cols(&head_outs)? };
        let patch_out = self.main.o.forward(tape, store, merged)?;

        let ro = self.cls_readout(tape, store, x, extra)?;
        all_weights.extend(ro.weights.iter().copied());
        let out = tape.concat_rows(&[ro.out, patch_out])?;
        Ok(SpaceTimeOutput { out, cls_weights: ro.weights, all_weights })
    }
}

/// Writes an 8-bit binary PGM (P5). Values are scaled so the maximum maps
/// to 255; an all-zero map stays black.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(format!("pgm: {} values for {width}x{height}", values.len())));
    }
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    for v in values {
        let scaled = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
        buf.push(scaled.clamp(0.0, 255.0) as u8);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Exports the CLS-query attention of every layer and head: one tensor
/// container per layer (`layer{l}.orvt`, shape `[heads, keys]`) and one PGM
/// per (layer, head) showing the weights over patch tokens with frames laid
/// side by side (`layer{l}_head{h}.pgm`, `T·W × H`).
pub fn export_cls_maps(dir: &Path, dims: GridDims, per_layer: &[Vec<Tensor>]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let s = dims.height * dims.width;
    let n = dims.frames * s;
    let mut written = Vec::new();
    for (l, heads) in per_layer.iter().enumerate() {
        let keys = heads.first().map_or(0, Tensor::len);
        let mut stacked = Vec::with_capacity(heads.len() * keys);
        for (h, w) in heads.iter().enumerate() {
            if w.len() < n + 1 {
                return Err(Error::shape(format!("layer {l} head {h}: {} weights for {} tokens", w.len(), n + 1)));
            }
            stacked.extend_from_slice(w.data());
            let patch = &w.data()[1..=n];
            let mut img = vec![0.0; n];
            for t in 0..dims.frames {
                for y in 0..dims.height {
                    for x in 0..dims.width {
                        img[y * dims.frames * dims.width + t * dims.width + x] = patch[t * s + y * dims.width + x];
                    }
                }
            }
            let path = dir.join(format!("layer{l}_head{h}.pgm"));
            write_pgm(&path, dims.frames * dims.width, dims.height, &img)?;
            written.push(path);
        }
        let path = dir.join(format!("layer{l}.orvt"));
        write_container(&path, &Tensor::new(vec![heads.len(), keys], stacked)?)?;
        written.push(path);
    }
    Ok(written)
}
