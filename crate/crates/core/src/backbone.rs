//! Host video transformer: 3-D patch embedding with a CLS token, a stack of
//! pre-LN attention blocks with ORViT blocks substituted at chosen layers,
//! a CLS classification head and an optional RoI detection head.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionVariant, LayerNorm, Linear, Mlp, SpaceTimeAttention};
use crate::config::{manifest_text, Config};
use crate::error::{Error, Result};
use crate::geometry::{roi_align_entries, BBox, BoxSet, RoiParams};
use crate::orvit::{pool_boxes_temporal, OrvitBlock, OrvitConfig, PoolOrder};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{RowMix, Tape, Tensor, Var};

/// Token-grid geometry: `T'` token slices of `H × W` patches of width `d`,
/// plus one CLS token at row 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl GridDims {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn patches(&self) -> usize {
        self.frames * self.cells()
    }

    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }
}

/// A token matrix on a tape together with its geometry.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub tokens: Var,
    pub dims: GridDims,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub variant: AttentionVariant,
    pub dropout: f64,
    pub num_classes: usize,
    pub det_classes: usize,
    pub orvit_layers: Vec<usize>,
    pub orvit: OrvitConfig,
}

impl ModelConfig {
    /// Reads model and ORViT keys; the class count is the verb vocabulary.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let dim: usize = cfg.get("model.dim")?;
        let heads: usize = cfg.get("model.heads")?;
        let mlp_ratio: usize = cfg.get("model.mlp_ratio")?;
        let d_odm: usize = cfg.get("orvit.d_odm")?;
        if cfg.raw("orvit.combine")? != "sum" {
            return Err(Error::config("only orvit.combine = sum is implemented"));
        }
        let mc = ModelConfig {
            frames: cfg.get("data.frames")?,
            height: cfg.get("data.height")?,
            width: cfg.get("data.width")?,
            channels: 1,
            patch_t: cfg.get("model.patch_t")?,
            patch_h: cfg.get("model.patch_h")?,
            patch_w: cfg.get("model.patch_w")?,
            dim,
            heads,
            depth: cfg.get("model.depth")?,
            mlp_ratio,
            variant: cfg.get("model.attention_variant")?,
            dropout: cfg.get("model.dropout")?,
            num_classes: cfg.get("data.verbs")?,
            det_classes: cfg.get("model.det_classes")?,
            orvit_layers: cfg.get_list("orvit.layers")?,
            orvit: OrvitConfig {
                dim,
                heads,
                mlp_hidden: mlp_ratio * dim,
                num_objects: cfg.get("orvit.num_objects")?,
                d_odm: if d_odm == 0 { dim } else { d_odm },
                roi: RoiParams { size: cfg.get("orvit.roi_size")?, samples_per_bin: cfg.get("orvit.roi_samples")? },
                variant: cfg.get("orvit.attention_variant")?,
                order: cfg.get::<PoolOrder>("orvit.eq2_ordering")?,
                odm: cfg.get_bool("orvit.odm")?,
            },
        };
        mc.validate()?;
        Ok(mc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_t == 0 || self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::config("patch extents must be positive"));
        }
        if !self.frames.is_multiple_of(self.patch_t) || !self.height.is_multiple_of(self.patch_h) || !self.width.is_multiple_of(self.patch_w) {
            return Err(Error::config(format!(
                "clip {}x{}x{} is not divisible by patch {}x{}x{}",
                self.frames, self.height, self.width, self.patch_t, self.patch_h, self.patch_w
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("need at least one class"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(l) = self.orvit_layers.iter().find(|l| **l >= self.depth) {
            return Err(Error::config(format!("ORViT layer {l} outside depth {}", self.depth)));
        }
        AttentionConfig { heads: self.heads, d_model: self.dim, variant: self.variant }.validate()?;
        if !self.orvit_layers.is_empty() {
            self.orvit.validate()?;
        }
        Ok(())
    }

    pub fn grid(&self) -> GridDims {
        GridDims {
            frames: self.frames / self.patch_t,
            height: self.height / self.patch_h,
            width: self.width / self.patch_w,
            dim: self.dim,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.patch_t * self.patch_h * self.patch_w * self.channels
    }
}

/// Standard pre-LN transformer layer.
#[derive(Clone, Debug)]
pub struct PlainBlock {
    pub ln1: LayerNorm,
    pub attn: SpaceTimeAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub enum Block {
    Plain(PlainBlock),
    Orvit(OrvitBlock),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub patch_proj: Linear,
    pub pos_space: ParamId,
    pub pos_time: ParamId,
    pub cls: ParamId,
    pub cls_pos: ParamId,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub head: Linear,
    pub det_head: Option<Mlp>,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub logits: Var,
    /// Final tokens after the last LayerNorm.
    pub tokens: Var,
    /// Input token matrix of every layer.
    pub layer_inputs: Vec<Var>,
    /// Per layer, per head: the CLS query's attention weights.
    pub cls_attention: Vec<Vec<Var>>,
    pub all_weights: Vec<Var>,
}

/// Rearranges a `[T, H, W, C]` clip into `[T'·H'·W', pt·ph·pw·C]` patch
/// rows, token-slice major then raster order.
pub fn patch_matrix(cfg: &ModelConfig, clip: &Tensor) -> Result<Tensor> {
    let expect = [cfg.frames, cfg.height, cfg.width, cfg.channels];
    if clip.shape() != expect {
        return Err(Error::shape(format!("clip shape {:?}, model expects {:?}", clip.shape(), expect)));
    }
    let g = cfg.grid();
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut data = Vec::with_capacity(g.patches() * cfg.patch_len());
    for tp in 0..g.frames {
        for hp in 0..g.height {
            for wp in 0..g.width {
                for dt in 0..cfg.patch_t {
                    for dy in 0..cfg.patch_h {
                        let t = tp * cfg.patch_t + dt;
                        let y = hp * cfg.patch_h + dy;
                        let x0 = wp * cfg.patch_w;
                        let start = ((t * h + y) * w + x0) * c;
                        data.extend_from_slice(&clip.data()[start..start + cfg.patch_w * c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.patches(), cfg.patch_len()], data)
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let g = cfg.grid();
        let patch_proj = Linear::new(&mut store, "embed.proj", cfg.patch_len(), d, true, seed);
        let pos_space = store.add_init("embed.pos_space", &[g.cells(), d], Init::Normal(0.02), seed);
        let pos_time = store.add_init("embed.pos_time", &[g.frames, d], Init::Normal(0.02), seed);
        let cls = store.add_init("embed.cls", &[1, d], Init::Normal(0.02), seed);
        let cls_pos = store.add_init("embed.cls_pos", &[1, d], Init::Normal(0.02), seed);
        let attn_cfg = AttentionConfig { heads: cfg.heads, d_model: d, variant: cfg.variant };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let name = format!("blocks.{l}");
            if cfg.orvit_layers.contains(&l) {
                blocks.push(Block::Orvit(OrvitBlock::new(&mut store, &name, &cfg.orvit, g.frames, seed)?));
            } else {
                blocks.push(Block::Plain(PlainBlock {
                    ln1: LayerNorm::new(&mut store, &format!("{name}.ln1"), d, seed),
                    attn: SpaceTimeAttention::new(&mut store, &name, &attn_cfg, seed),
                    ln2: LayerNorm::new(&mut store, &format!("{name}.ln2"), d, seed),
                    mlp: Mlp::new(&mut store, &format!("{name}.mlp"), d, cfg.mlp_ratio * d, d, seed),
                }));
            }
        }
        let final_ln = LayerNorm::new(&mut store, "final_ln", d, seed);
        let head = Linear::new(&mut store, "head", d, cfg.num_classes, true, seed);
        let det_head = (cfg.det_classes > 0).then(|| Mlp::new(&mut store, "det_head", d, d, cfg.det_classes, seed));
        let model = Model { cfg: cfg.clone(), patch_proj, pos_space, pos_time, cls, cls_pos, blocks, final_ln, head, det_head };
        Ok((model, store))
    }

    /// Patch embedding plus position terms, with CLS prepended.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, clip: &Tensor) -> Result<TokenGrid> {
        let g = self.cfg.grid();
        let patches = tape.constant(patch_matrix(&self.cfg, clip)?);
        let x = self.patch_proj.forward(tape, store, patches)?;
        let space = tape.param(store, self.pos_space);
        let time = tape.param(store, self.pos_time);
        let sidx: Vec<usize> = (0..g.patches()).map(|i| i % g.cells()).collect();
        let tidx: Vec<usize> = (0..g.patches()).map(|i| i / g.cells()).collect();
        let ps = tape.gather_rows(space, Rc::new(sidx))?;
        let pt = tape.gather_rows(time, Rc::new(tidx))?;
        let x = tape.add(x, ps)?;
        let x = tape.add(x, pt)?;
        let cls = tape.param(store, self.cls);
        let cls_pos = tape.param(store, self.cls_pos);
        let c = tape.add(cls, cls_pos)?;
        Ok(TokenGrid { tokens: tape.concat_rows(&[c, x])?, dims: g })
    }

    /// Runs the layer stack and head on embedded tokens. `boxes` are at
    /// token resolution (`T' × O`) and are needed only with ORViT layers.
    /// `dropout_seed` enables train-time dropout before the classifier.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        grid: TokenGrid,
        boxes: Option<&BoxSet>,
        dropout_seed: Option<u64>,
    ) -> Result<ForwardOut> {
        let dims = grid.dims;
        let mut x = grid.tokens;
        let mut layer_inputs = Vec::with_capacity(self.blocks.len());
        let mut cls_attention = Vec::with_capacity(self.blocks.len());
        let mut all_weights = Vec::new();
        for block in &self.blocks {
            layer_inputs.push(x);
            match block {
                Block::Plain(b) => {
                    let h = b.ln1.forward(tape, store, x)?;
                    let a = b.attn.forward(tape, store, h, dims, None)?;
                    let x1 = tape.add(x, a.out)?;
                    let h = b.ln2.forward(tape, store, x1)?;
                    let m = b.mlp.forward(tape, store, h)?;
                    x = tape.add(x1, m)?;
                    cls_attention.push(a.cls_weights);
                    all_weights.extend(a.all_weights);
                }
                Block::Orvit(b) => {
                    let boxes = boxes.ok_or_else(|| Error::config("ORViT layers need boxes"))?;
                    let o = b.forward(tape, store, x, dims, boxes)?;
                    x = o.out;
                    cls_attention.push(o.cls_weights);
                    all_weights.extend(o.all_weights);
                }
            }
        }
        let tokens = self.final_ln.forward(tape, store, x)?;
        let mut cls = tape.slice_rows(tokens, 0, 1)?;
        if let (Some(seed), p) = (dropout_seed, self.cfg.dropout) {
            if p > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..self.cfg.dim).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                cls = tape.mul_const(cls, Tensor::new(vec![1, self.cfg.dim], mask)?)?;
            }
        }
        let logits = self.head.forward(tape, store, cls)?;
        Ok(ForwardOut { logits, tokens, layer_inputs, cls_attention, all_weights })
    }

    /// Full forward from a `[T, H, W, C]` clip and frame-level `T × O`
    /// boxes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        clip: &Tensor,
        boxes: &BoxSet,
        dropout_seed: Option<u64>,
    ) -> Result<ForwardOut> {
        let token_boxes = if self.cfg.orvit_layers.is_empty() {
            None
        } else {
            if boxes.frames() != self.cfg.frames || boxes.objects() != self.cfg.orvit.num_objects {
                return Err(Error::config(format!(
                    "boxes are {}x{} but the model expects {}x{}",
                    boxes.frames(),
                    boxes.objects(),
                    self.cfg.frames,
                    self.cfg.orvit.num_objects
                )));
            }
            Some(pool_boxes_temporal(boxes, self.cfg.patch_t)?)
        };
        let grid = self.embed(tape, store, clip)?;
        self.forward_tokens(tape, store, grid, token_boxes.as_ref(), dropout_seed)
    }

    /// RoI detection head over final tokens: each single-frame proposal is
    /// replicated across token slices, RoI-aligned per slice, averaged over
    /// time, max-pooled over bins and classified. Output `[P, classes]`.
    pub fn detect(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, proposals: &[BBox]) -> Result<Var> {
        let head = self.det_head.as_ref().ok_or_else(|| Error::config("model has no detection head"))?;
        if proposals.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[0, self.cfg.det_classes])));
        }
        let pooled = self.detection_features(tape, tokens, proposals)?;
        head.forward(tape, store, pooled)
    }

    /// Head input for each proposal, `[P, d]`.
    pub fn detection_features(&self, tape: &mut Tape, tokens: Var, proposals: &[BBox]) -> Result<Var> {
        let g = self.cfg.grid();
        let roi = self.cfg.orvit.roi;
        let s2 = roi.size * roi.size;
        let mut mix = RowMix::new(proposals.len() * s2);
        for (p, b) in proposals.iter().enumerate() {
            if !b.is_valid() || b.is_padding() {
                return Err(Error::data(format!("proposal {p} is not a valid box")));
            }
            for t in 0..g.frames {
                roi_align_entries(&mut mix, p * s2, 1 + t * g.cells(), (g.height, g.width), b, roi, 1.0 / g.frames as f64);
            }
        }
        let r = tape.row_mix(tokens, Rc::new(mix))?;
        tape.group_max(r, s2)
    }

    pub fn save(&self, dir: &Path, store: &ParamStore, cfg: &Config) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        store.save_dir(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.to_text())?;
        std::fs::write(dir.join("MANIFEST"), manifest_text(cfg))?;
        Ok(())
    }

    /// Loads a checkpoint directory written by [`Model::save`].
    pub fn load(dir: &Path) -> Result<(Model, ParamStore, Config)> {
        let cfg = Config::load(&dir.join("config.txt")).map_err(|e| Error::data(format!("checkpoint {}: {e}", dir.display())))?;
        let mc = ModelConfig::from_config(&cfg)?;
        let (model, mut store) = Model::new(&mc, cfg.get("seed")?)?;
        store.load_dir(dir)?;
        Ok((model, store, cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(layers: &str) -> ModelConfig {
        let cfg = Config::default()
            .with("data.frames", 4)
            .with("data.height", 8)
            .with("data.width", 8)
            .with("model.dim", 8)
            .with("model.heads", 2)
            .with("model.depth", 2)
            .with("model.patch_t", 2)
            .with("orvit.layers", layers)
            .with("orvit.num_objects", 2);
        ModelConfig::from_config(&cfg).unwrap()
    }

    #[test]
    fn token_counting() {
        let mut c = tiny("");
        c.frames = 1;
        c.patch_t = 1;
        assert_eq!(c.grid().tokens(), 5);
        let mut c = tiny("");
        c.frames = 4;
        c.patch_t = 1;
        c.height = 16;
        c.width = 16;
        assert_eq!(c.grid().tokens(), 65);
    }

    #[test]
    fn indivisible_clip_is_config_error() {
        let mut c = tiny("");
        c.height = 10;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny("");
        c.orvit_layers = vec![2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_clip_embeds_to_position_terms() {
        let c = tiny("");
        let (m, store) = Model::new(&c, 3).unwrap();
        let mut tape = Tape::new();
        let clip = Tensor::zeros(&[4, 8, 8, 1]);
        let grid = m.embed(&mut tape, &store, &clip).unwrap();
        let x = tape.value(grid.tokens);
        let g = c.grid();
        let sp = store.get(m.pos_space);
        let tp = store.get(m.pos_time);
        for i in 0..g.patches() {
            for k in 0..c.dim {
                let want = sp.row(i % g.cells())[k] + tp.row(i / g.cells())[k];
                assert_eq!(x.row(i + 1)[k], want);
            }
        }
    }

    #[test]
    fn patch_matrix_layout() {
        let mut c = tiny("");
        c.frames = 2;
        c.patch_t = 1;
        c.height = 4;
        c.width = 4;
        c.patch_h = 2;
        c.patch_w = 2;
        let clip = Tensor::new(vec![2, 4, 4, 1], (0..32).map(f64::from).collect()).unwrap();
        let p = patch_matrix(&c, &clip).unwrap();
        assert_eq!(p.shape(), &[8, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(4), &[16.0, 17.0, 20.0, 21.0]);
    }

    #[test]
    fn logits_shape_and_determinism() {
        let c = tiny("1");
        let (m, store) = Model::new(&c, 1).unwrap();
        let clip = Tensor::full(&[4, 8, 8, 1], 0.3);
        let mut boxes = BoxSet::padding(4, 2);
        boxes.set(1, 0, BBox::new(0.1, 0.2, 0.6, 0.7));
        let run = || {
            let mut tape = Tape::new();
            let o = m.forward(&mut tape, &store, &clip, &boxes, None).unwrap();
            tape.value(o.logits).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[1, c.num_classes]);
        assert_eq!(a, run());
    }

    #[test]
    fn wrong_box_shape_is_rejected() {
        let (m, store) = Model::new(&tiny("0"), 1).unwrap();
        let mut tape = Tape::new();
        let clip = Tensor::zeros(&[4, 8, 8, 1]);
        assert!(m.forward(&mut tape, &store, &clip, &BoxSet::padding(4, 3), None).is_err());
    }
}
