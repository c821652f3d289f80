//! The ORViT block: an object-region attention stream (R), an
//! object-dynamics stream (D) over box coordinates, and their residual sum
//! with the patch tokens.
//!
//! Boxes enter at token resolution: one box per (temporal token slice,
//! object slot). Padding slots are dropped from every key/value set, so they
//! contribute nothing to either stream.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionVariant, FrameKeys, LayerNorm, Linear, Mlp, MultiHeadAttention, SpaceTimeAttention};
use crate::backbone::GridDims;
use crate::error::{Error, Result};
use crate::geometry::{box_coverage, roi_align_entries, BBox, BoxSet, RoiParams};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{RowMix, Tape, Tensor, Var};

/// Where the object MLP sits relative to the spatial max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolOrder {
    /// `MLP(MaxPool(RoIAlign(X, B)))`.
    PoolFirst,
    /// `MaxPool(MLP(RoIAlign(X, B)))`.
    MlpFirst,
}

impl FromStr for PoolOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool_first" => Ok(PoolOrder::PoolFirst),
            "mlp_first" => Ok(PoolOrder::MlpFirst),
            other => Err(Error::config(format!("unknown pooling order {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrvitConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub num_objects: usize,
    /// Width of the object-dynamics stream; equal to `dim` unless reduced.
    pub d_odm: usize,
    pub roi: RoiParams,
    pub variant: AttentionVariant,
    pub order: PoolOrder,
    pub odm: bool,
}

impl OrvitConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig { heads: self.heads, d_model: self.dim, variant: self.variant }.validate()?;
        if self.odm && (self.d_odm == 0 || !self.d_odm.is_multiple_of(self.odm_heads())) {
            return Err(Error::config(format!("d_odm {} is not usable", self.d_odm)));
        }
        if self.roi.size == 0 || self.roi.samples_per_bin == 0 {
            return Err(Error::config("roi size and samples per bin must be positive"));
        }
        Ok(())
    }

    /// ODM heads: the model's head count when it divides `d_odm`, else one.
    pub fn odm_heads(&self) -> usize {
        if self.d_odm.is_multiple_of(self.heads) {
            self.heads
        } else {
            1
        }
    }
}

/// Object-dynamics stream parameters.
#[derive(Clone, Debug)]
pub struct Odm {
    pub coord: Mlp,
    pub pos: ParamId,
    pub attn: MultiHeadAttention,
    pub up: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct OrvitBlock {
    pub cfg: OrvitConfig,
    /// Token slices times object slots: rows of both position tables.
    pub slots: usize,
    pub ln_r: LayerNorm,
    pub obj_mlp: Mlp,
    pub obj_coord: Mlp,
    pub obj_pos: ParamId,
    pub region: SpaceTimeAttention,
    pub odm: Option<Odm>,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

/// Everything a block forward produces.
#[derive(Clone, Debug)]
pub struct OrvitOutput {
    pub out: Var,
    pub region: Var,
    pub dynamics: Option<Var>,
    /// `[T'·O, d]` object tokens including position terms.
    pub object_tokens: Var,
    pub cls_weights: Vec<Var>,
    pub all_weights: Vec<Var>,
}

/// Box `(cx, cy, w, h)` rows for every slot, zeros for padding.
pub fn coordinate_rows(boxes: &BoxSet) -> Tensor {
    let data = boxes.boxes().iter().flat_map(|b| if b.is_padding() { [0.0; 4] } else { b.center_size() }).collect();
    Tensor::new(vec![boxes.boxes().len(), 4], data).expect("four coordinates per box")
}

impl OrvitBlock {
    /// `token_frames` is the number of temporal token slices T'.
    pub fn new(store: &mut ParamStore, name: &str, cfg: &OrvitConfig, token_frames: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let slots = token_frames * cfg.num_objects;
        let attn_cfg = AttentionConfig { heads: cfg.heads, d_model: d, variant: cfg.variant };
        let odm = cfg.odm.then(|| Odm {
            coord: Mlp::new(store, &format!("{name}.d.coord"), 4, cfg.d_odm, cfg.d_odm, seed),
            pos: store.add_init(&format!("{name}.d.pos"), &[slots, cfg.d_odm], Init::Normal(0.02), seed),
            attn: MultiHeadAttention::new(store, &format!("{name}.d.attn"), cfg.d_odm, cfg.odm_heads(), seed),
            up: (cfg.d_odm != d).then(|| Linear::new(store, &format!("{name}.d.up"), cfg.d_odm, d, true, seed)),
        });
        Ok(OrvitBlock {
            cfg: cfg.clone(),
            slots,
            ln_r: LayerNorm::new(store, &format!("{name}.r.ln"), d, seed),
            obj_mlp: Mlp::new(store, &format!("{name}.r.obj_mlp"), d, d, d, seed),
            obj_coord: Mlp::new(store, &format!("{name}.r.coord"), 4, d, d, seed),
            obj_pos: store.add_init(&format!("{name}.r.pos"), &[slots, d], Init::Normal(0.02), seed),
            region: SpaceTimeAttention::new(store, &format!("{name}.r"), &attn_cfg, seed),
            odm,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln2"), d, seed),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, cfg.mlp_hidden, d, seed),
        })
    }

    fn check_boxes(&self, dims: GridDims, boxes: &BoxSet) -> Result<()> {
        if boxes.frames() != dims.frames || boxes.objects() != self.cfg.num_objects {
            return Err(Error::shape(format!(
                "ORViT block expects {}x{} boxes, got {}x{}",
                dims.frames,
                self.cfg.num_objects,
                boxes.frames(),
                boxes.objects()
            )));
        }
        Ok(())
    }

    /// Object tokens from normalized tokens `xn: [1 + T'·H·W, d]`.
    /// Returns all `T'·O` tokens and the indices of non-padding slots.
    pub fn extract_object_tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xn: Var,
        dims: GridDims,
        boxes: &BoxSet,
    ) -> Result<(Var, Vec<usize>)> {
        self.check_boxes(dims, boxes)?;
        let d = dims.dim;
        let cells = dims.cells();
        let s2 = self.cfg.roi.size * self.cfg.roi.size;
        let objects = self.cfg.num_objects;
        let valid: Vec<usize> = (0..self.slots).filter(|&i| !boxes.boxes()[i].is_padding()).collect();

        let features = if valid.is_empty() {
            tape.constant(Tensor::zeros(&[self.slots, d]))
        } else {
            let mut mix = RowMix::new(valid.len() * s2);
            for (j, &slot) in valid.iter().enumerate() {
                let t = slot / objects;
                roi_align_entries(&mut mix, j * s2, 1 + t * cells, (dims.height, dims.width), &boxes.boxes()[slot], self.cfg.roi, 1.0);
            }
            let pooled_in = tape.row_mix(xn, Rc::new(mix))?;
            let feats = match self.cfg.order {
                PoolOrder::PoolFirst => {
                    let p = tape.group_max(pooled_in, s2)?;
                    self.obj_mlp.forward(tape, store, p)?
                }
                PoolOrder::MlpFirst => {
                    let h = self.obj_mlp.forward(tape, store, pooled_in)?;
                    tape.group_max(h, s2)?
                }
            };
            let mut scatter = RowMix::new(self.slots);
            for (j, &slot) in valid.iter().enumerate() {
                scatter.push(slot, j, 1.0);
            }
            tape.row_mix(feats, Rc::new(scatter))?
        };
        let coords = tape.constant(coordinate_rows(boxes));
        let l = self.obj_coord.forward(tape, store, coords)?;
        let p = tape.param(store, self.obj_pos);
        let tokens = tape.add(features, l)?;
        let tokens = tape.add(tokens, p)?;
        Ok((tokens, valid))
    }

    /// Coordinate tokens `B~ = MLP(cx, cy, w, h) + P~`, `[T'·O, d_odm]`.
    pub fn coordinate_embedding(&self, tape: &mut Tape, store: &ParamStore, boxes: &BoxSet) -> Result<Var> {
        let odm = self.odm.as_ref().ok_or_else(|| Error::config("object-dynamics stream is disabled"))?;
        let coords = tape.constant(coordinate_rows(boxes));
        let l = odm.coord.forward(tape, store, coords)?;
        let p = tape.param(store, odm.pos);
        tape.add(l, p)
    }

    /// The D stream, `[1 + T'·H·W, d]`; `None` when disabled. The CLS row
    /// and every cell outside all boxes are exactly zero.
    pub fn object_dynamics(&self, tape: &mut Tape, store: &ParamStore, dims: GridDims, boxes: &BoxSet) -> Result<Option<Var>> {
        let Some(odm) = &self.odm else { return Ok(None) };
        self.check_boxes(dims, boxes)?;
        let valid: Vec<usize> = (0..self.slots).filter(|&i| !boxes.boxes()[i].is_padding()).collect();
        if valid.is_empty() {
            return Ok(Some(tape.constant(Tensor::zeros(&[dims.tokens(), dims.dim]))));
        }
        let b = self.coordinate_embedding(tape, store, boxes)?;
        let bv = tape.gather_rows(b, Rc::new(valid.clone()))?;
        let a = odm.attn.forward(tape, store, bv, bv)?;
        let v = match &odm.up {
            Some(up) => up.forward(tape, store, a.out)?,
            None => a.out,
        };
        let mut splat = RowMix::new(dims.tokens());
        for (j, &slot) in valid.iter().enumerate() {
            let t = slot / self.cfg.num_objects;
            for (cell, wt) in box_coverage(dims.height, dims.width, &boxes.boxes()[slot]) {
                splat.push(1 + t * dims.cells() + cell, j, wt);
            }
        }
        Ok(Some(tape.row_mix(v, Rc::new(splat))?))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, dims: GridDims, boxes: &BoxSet) -> Result<OrvitOutput> {
        self.check_boxes(dims, boxes)?;
        let xn = self.ln_r.forward(tape, store, x)?;
        let (object_tokens, valid) = self.extract_object_tokens(tape, store, xn, dims, boxes)?;
        let extra = if valid.is_empty() {
            None
        } else {
            let frame_of = valid.iter().map(|s| s / self.cfg.num_objects).collect();
            let rows = tape.gather_rows(object_tokens, Rc::new(valid))?;
            Some(FrameKeys { rows, frame_of })
        };
        let r = self.region.forward(tape, store, xn, dims, extra.as_ref())?;
        let dynamics = self.object_dynamics(tape, store, dims, boxes)?;

        let streams = match dynamics {
            Some(dv) => tape.add(r.out, dv)?,
            None => r.out,
        };
        let y = tape.add(streams, x)?;
        let h = self.ln_mlp.forward(tape, store, x)?;
        let m = self.mlp.forward(tape, store, h)?;
        let out = tape.add(y, m)?;
        Ok(OrvitOutput {
            out,
            region: r.out,
            dynamics,
            object_tokens,
            cls_weights: r.cls_weights,
            all_weights: r.all_weights,
        })
    }

    pub fn param_ids(&self, store: &ParamStore, name: &str) -> Vec<ParamId> {
        store.ids_with_prefix(&format!("{name}.")).collect()
    }
}

/// Boxes at token resolution: the mean of the non-padding boxes over each
/// run of `patch_t` frames, or padding when the run has none.
pub fn pool_boxes_temporal(boxes: &BoxSet, patch_t: usize) -> Result<BoxSet> {
    if patch_t == 0 || !boxes.frames().is_multiple_of(patch_t) {
        return Err(Error::config(format!("{} frames not divisible by temporal patch {patch_t}", boxes.frames())));
    }
    let slices = boxes.frames() / patch_t;
    let objects = boxes.objects();
    let mut out = BoxSet::padding(slices, objects);
    for s in 0..slices {
        for o in 0..objects {
            let live: Vec<&BBox> =
                (0..patch_t).map(|k| boxes.get(s * patch_t + k, o)).filter(|b| !b.is_padding()).collect();
            if live.is_empty() {
                continue;
            }
            let n = live.len() as f64;
            let mean = |f: fn(&BBox) -> f64| live.iter().map(|b| f(b)).sum::<f64>() / n;
            out.set(s, o, BBox::new(mean(|b| b.x1), mean(|b| b.y1), mean(|b| b.x2), mean(|b| b.y2)));
        }
    }
    Ok(out)
}

/// Box corruptions for the box-quality ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxMode {
    /// Every box is the whole image.
    All,
    /// Every box is padding.
    Null,
    /// Object slot `o` gets the `o mod 4`-th image quarter in every frame.
    Grid,
    /// Independent uniformly random valid boxes.
    Random,
    /// Object identities are permuted independently per frame.
    Shuffle,
}

impl FromStr for BoxMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(BoxMode::All),
            "null" => Ok(BoxMode::Null),
            "grid" => Ok(BoxMode::Grid),
            "random" => Ok(BoxMode::Random),
            "shuffle" => Ok(BoxMode::Shuffle),
            other => Err(Error::config(format!("unknown box mode {other:?}"))),
        }
    }
}

impl fmt::Display for BoxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoxMode::All => "all",
            BoxMode::Null => "null",
            BoxMode::Grid => "grid",
            BoxMode::Random => "random",
            BoxMode::Shuffle => "shuffle",
        })
    }
}

const QUARTERS: [BBox; 4] = [
    BBox { x1: 0.0, y1: 0.0, x2: 0.5, y2: 0.5 },
    BBox { x1: 0.5, y1: 0.0, x2: 1.0, y2: 0.5 },
    BBox { x1: 0.0, y1: 0.5, x2: 0.5, y2: 1.0 },
    BBox { x1: 0.5, y1: 0.5, x2: 1.0, y2: 1.0 },
];

pub fn corrupt_boxes(boxes: &BoxSet, mode: BoxMode, seed: u64) -> BoxSet {
    let (frames, objects) = (boxes.frames(), boxes.objects());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = boxes.clone();
    for t in 0..frames {
        match mode {
            BoxMode::All => (0..objects).for_each(|o| out.set(t, o, BBox::FULL)),
            BoxMode::Null => (0..objects).for_each(|o| out.set(t, o, BBox::PADDING)),
            BoxMode::Grid => (0..objects).for_each(|o| out.set(t, o, QUARTERS[o % 4])),
            BoxMode::Random => {
                for o in 0..objects {
                    let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                    let (c, e): (f64, f64) = (rng.gen(), rng.gen());
                    out.set(t, o, BBox::new(a.min(b), c.min(e), a.max(b), c.max(e)));
                }
            }
            BoxMode::Shuffle => {
                let mut perm: Vec<usize> = (0..objects).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                for (o, &p) in perm.iter().enumerate() {
                    out.set(t, o, *boxes.get(t, p));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, objects: usize) -> OrvitConfig {
        OrvitConfig {
            dim: d,
            heads: 2,
            mlp_hidden: 2 * d,
            num_objects: objects,
            d_odm: d,
            roi: RoiParams::default(),
            variant: AttentionVariant::Joint,
            order: PoolOrder::PoolFirst,
            odm: true,
        }
    }

    #[test]
    fn corrupt_modes() {
        let mut b = BoxSet::padding(3, 2);
        b.set(0, 0, BBox::new(0.1, 0.1, 0.3, 0.4));
        b.set(1, 1, BBox::new(0.5, 0.5, 0.9, 0.6));
        assert!(corrupt_boxes(&b, BoxMode::All, 0).boxes().iter().all(|x| *x == BBox::FULL));
        assert!(corrupt_boxes(&b, BoxMode::Null, 0).boxes().iter().all(BBox::is_padding));
        let g = corrupt_boxes(&b, BoxMode::Grid, 0);
        assert_eq!(*g.get(2, 1), QUARTERS[1]);
        let r = corrupt_boxes(&b, BoxMode::Random, 5);
        assert!(r.validate().is_ok() && r.boxes().iter().all(|x| !x.is_padding()));
        assert_eq!(r, corrupt_boxes(&b, BoxMode::Random, 5));
        let one = BoxSet::from_boxes(2, 1, vec![BBox::new(0.0, 0.0, 0.2, 0.2), BBox::new(0.1, 0.1, 0.3, 0.3)]).unwrap();
        assert_eq!(corrupt_boxes(&one, BoxMode::Shuffle, 3), one);
        assert!("blur".parse::<BoxMode>().is_err());
    }

    #[test]
    fn temporal_pooling_averages_live_boxes() {
        let mut b = BoxSet::padding(4, 1);
        b.set(0, 0, BBox::new(0.0, 0.0, 0.2, 0.2));
        b.set(1, 0, BBox::new(0.2, 0.0, 0.4, 0.2));
        b.set(2, 0, BBox::new(0.5, 0.5, 0.7, 0.7));
        let p = pool_boxes_temporal(&b, 2).unwrap();
        let m = p.get(0, 0);
        assert!((m.x1 - 0.1).abs() < 1e-15 && (m.x2 - 0.3).abs() < 1e-15);
        assert_eq!(*p.get(1, 0), BBox::new(0.5, 0.5, 0.7, 0.7));
        assert!(pool_boxes_temporal(&b, 3).is_err());
    }

    #[test]
    fn coordinate_rows_encode_center_size() {
        let b = BoxSet::from_boxes(1, 2, vec![BBox::FULL, BBox::PADDING]).unwrap();
        assert_eq!(coordinate_rows(&b).data(), &[0.5, 0.5, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn all_padding_dynamics_is_zero() {
        let mut store = ParamStore::new();
        let dims = GridDims { frames: 2, height: 3, width: 3, dim: 8 };
        let block = OrvitBlock::new(&mut store, "b", &cfg(8, 2), 2, 1).unwrap();
        let mut tape = Tape::new();
        let d = block.object_dynamics(&mut tape, &store, dims, &BoxSet::padding(2, 2)).unwrap().unwrap();
        assert!(tape.value(d).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reduced_odm_adds_up_projection() {
        let mut store = ParamStore::new();
        let mut c = cfg(12, 1);
        c.d_odm = 4;
        let block = OrvitBlock::new(&mut store, "b", &c, 2, 1).unwrap();
        assert!(block.odm.as_ref().unwrap().up.is_some());
        assert_eq!(store.by_name("b.d.pos").unwrap().shape(), &[2, 4]);
    }
}
