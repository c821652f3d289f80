//! Boxes, bilinear sampling, RoIAlign and the box splat.
//!
//! Coordinate convention: a normalized coordinate `u ∈ [0, 1]` maps to the
//! continuous grid coordinate `u · W`, where cell `j` spans `[j, j + 1)` and
//! its center sits at `j + 0.5`. Bilinear sampling takes cell-index
//! coordinates, so a sample at continuous position `p` reads index `p − 0.5`.
//! RoIAlign and the splat use the same mapping, so a region pooled out of the
//! grid and a vector splatted back land on the same cells.

use std::fmt::Write as _;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{RowMix, Tape, Tensor, Var};

/// An axis-aligned box in normalized image coordinates.
///
/// A box with all four coordinates exactly zero is the padding sentinel for
/// an absent object.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const PADDING: BBox = BBox { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 };
    pub const FULL: BBox = BBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { x1: cx - w / 2.0, y1: cy - h / 2.0, x2: cx + w / 2.0, y2: cy + h / 2.0 }
    }

    pub fn is_padding(&self) -> bool {
        self.x1 == 0.0 && self.y1 == 0.0 && self.x2 == 0.0 && self.y2 == 0.0
    }

    pub fn is_valid(&self) -> bool {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        coords.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// `(cx, cy, w, h)`.
    pub fn center_size(&self) -> [f64; 4] {
        [(self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0, self.width(), self.height()]
    }

    /// Clamps into the unit square and orders the corners.
    pub fn clamped(&self) -> BBox {
        let c = |v: f64| v.clamp(0.0, 1.0);
        let (x1, x2) = (c(self.x1.min(self.x2)), c(self.x1.max(self.x2)));
        let (y1, y2) = (c(self.y1.min(self.y2)), c(self.y1.max(self.y2)));
        BBox { x1, y1, x2, y2 }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Boxes for `frames × objects` slots. Absent objects are padding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet {
    frames: usize,
    objects: usize,
    boxes: Vec<BBox>,
}

impl BoxSet {
    pub fn padding(frames: usize, objects: usize) -> Self {
        BoxSet { frames, objects, boxes: vec![BBox::PADDING; frames * objects] }
    }

    pub fn from_boxes(frames: usize, objects: usize, boxes: Vec<BBox>) -> Result<Self> {
        if boxes.len() != frames * objects {
            return Err(Error::shape(format!(
                "{} boxes for a {frames}x{objects} box set",
                boxes.len()
            )));
        }
        let set = BoxSet { frames, objects, boxes };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            if !b.is_padding() && !b.is_valid() {
                return Err(Error::data(format!(
                    "box at frame {} object {} is neither valid nor padding: {b:?}",
                    i / self.objects.max(1),
                    i % self.objects.max(1)
                )));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn get(&self, t: usize, o: usize) -> &BBox {
        &self.boxes[t * self.objects + o]
    }

    pub fn set(&mut self, t: usize, o: usize, b: BBox) {
        self.boxes[t * self.objects + o] = b;
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn boxes_mut(&mut self) -> &mut [BBox] {
        &mut self.boxes
    }

    /// A copy with `extra` padding object slots appended.
    pub fn with_padding_slots(&self, extra: usize) -> BoxSet {
        let objects = self.objects + extra;
        let mut out = BoxSet::padding(self.frames, objects);
        for t in 0..self.frames {
            for o in 0..self.objects {
                out.set(t, o, *self.get(t, o));
            }
        }
        out
    }

    /// Text lines `t,o,x1,y1,x2,y2`; padding rows are omitted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in 0..self.frames {
            for o in 0..self.objects {
                let b = self.get(t, o);
                if !b.is_padding() {
                    writeln!(s, "{t},{o},{}", fmt_box(b)).expect("write to string");
                }
            }
        }
        s
    }

    /// Parses the text format; missing entries stay padding.
    pub fn from_text(text: &str, frames: usize, objects: usize) -> Result<Self> {
        let mut set = BoxSet::padding(frames, objects);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(Error::data(format!("line {}: expected 6 fields, got {}", lineno + 1, f.len())));
            }
            let t = parse_usize(f[0], lineno)?;
            let o = parse_usize(f[1], lineno)?;
            if t >= frames || o >= objects {
                return Err(Error::data(format!("line {}: slot ({t},{o}) outside {frames}x{objects}", lineno + 1)));
            }
            let b = parse_box(&f[2..6], lineno)?;
            set.set(t, o, b);
        }
        set.validate()?;
        Ok(set)
    }
}

/// Shortest text that parses back to the same bits.
pub(crate) fn fmt_box(b: &BBox) -> String {
    format!("{},{},{},{}", b.x1, b.y1, b.x2, b.y2)
}

pub(crate) fn parse_usize(s: &str, lineno: usize) -> Result<usize> {
    s.parse().map_err(|_| Error::data(format!("line {}: bad integer {s:?}", lineno + 1)))
}

pub(crate) fn parse_f64(s: &str, lineno: usize) -> Result<f64> {
    s.parse().map_err(|_| Error::data(format!("line {}: bad number {s:?}", lineno + 1)))
}

pub(crate) fn parse_box(f: &[&str], lineno: usize) -> Result<BBox> {
    Ok(BBox::new(
        parse_f64(f[0], lineno)?,
        parse_f64(f[1], lineno)?,
        parse_f64(f[2], lineno)?,
        parse_f64(f[3], lineno)?,
    ))
}

/// The four bilinear taps `(row·W + col, weight)` for cell-index coordinates
/// `(x, y)` on an `h × w` grid, clamped to the border.
pub fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

fn grid_dims(grid: &Tensor) -> Result<(usize, usize, usize)> {
    match grid.shape() {
        [h, w, d] if *h > 0 && *w > 0 => Ok((*h, *w, *d)),
        s => Err(Error::shape(format!("expected a non-empty [H, W, d] grid, got {s:?}"))),
    }
}

/// Bilinear interpolation of an `[H, W, d]` grid at cell-index coordinates
/// (`x` along W, `y` along H).
pub fn bilinear_sample(grid: &Tensor, x: f64, y: f64) -> Result<Tensor> {
    let (h, w, d) = grid_dims(grid)?;
    let mut out = vec![0.0; d];
    for (cell, wt) in bilinear_taps(h, w, x, y) {
        if wt == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(&grid.data()[cell * d..(cell + 1) * d]) {
            *o += wt * v;
        }
    }
    Tensor::new(vec![d], out)
}

/// RoIAlign resolution and sampling density.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiParams {
    pub size: usize,
    pub samples_per_bin: usize,
}

impl Default for RoiParams {
    fn default() -> Self {
        RoiParams { size: 3, samples_per_bin: 2 }
    }
}

/// Appends RoIAlign of one box to `mix`: output rows
/// `out_offset .. out_offset + S²` read from grid rows `in_offset .. + h·w`.
/// Each entry weight is multiplied by `scale`. Padding boxes add nothing.
pub fn roi_align_entries(
    mix: &mut RowMix,
    out_offset: usize,
    in_offset: usize,
    (h, w): (usize, usize),
    b: &BBox,
    roi: RoiParams,
    scale: f64,
) {
    if b.is_padding() {
        return;
    }
    let (s, n) = (roi.size, roi.samples_per_bin);
    let x0 = b.x1 * w as f64;
    let y0 = b.y1 * h as f64;
    let bw = b.width() * w as f64 / s as f64;
    let bh = b.height() * h as f64 / s as f64;
    let norm = scale / (n * n) as f64;
    for by in 0..s {
        for bx in 0..s {
            let out = out_offset + by * s + bx;
            for sy in 0..n {
                let py = y0 + (by as f64 + (sy as f64 + 0.5) / n as f64) * bh - 0.5;
                for sx in 0..n {
                    let px = x0 + (bx as f64 + (sx as f64 + 0.5) / n as f64) * bw - 0.5;
                    for (cell, wt) in bilinear_taps(h, w, px, py) {
                        mix.push(out, in_offset + cell, wt * norm);
                    }
                }
            }
        }
    }
}

/// RoIAlign over an `[H, W, d]` grid, giving `[S, S, d]`. A padding box
/// yields all zeros.
pub fn roi_align(grid: &Tensor, b: &BBox, roi: RoiParams) -> Result<Tensor> {
    let (h, w, d) = grid_dims(grid)?;
    if roi.size == 0 || roi.samples_per_bin == 0 {
        return Err(Error::config("roi size and samples per bin must be positive"));
    }
    let mut mix = RowMix::new(roi.size * roi.size);
    roi_align_entries(&mut mix, 0, 0, (h, w), b, roi, 1.0);
    let flat = grid.clone().reshape(&[h * w, d])?;
    mix.apply(&flat).reshape(&[roi.size, roi.size, d])
}

/// Differentiable RoIAlign of grid rows `[h·w, d]` into `[S², d]`.
pub fn roi_align_var(tape: &mut Tape, grid: Var, hw: (usize, usize), b: &BBox, roi: RoiParams) -> Result<Var> {
    let mut mix = RowMix::new(roi.size * roi.size);
    roi_align_entries(&mut mix, 0, 0, hw, b, roi, 1.0);
    tape.row_mix(grid, Rc::new(mix))
}

fn overlap_1d(lo: f64, hi: f64, cells: usize) -> Vec<(usize, f64)> {
    if hi - lo <= 0.0 {
        // Zero-extent boxes act as a point: the cell containing it.
        let c = (lo.max(0.0).floor() as usize).min(cells - 1);
        return vec![(c, 1.0)];
    }
    (0..cells)
        .filter_map(|j| {
            let ov = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
            (ov > 0.0).then_some((j, ov))
        })
        .collect()
}

/// Cell coverage of a box on an `h × w` grid: `(row·W + col, fraction)` for
/// every cell the box overlaps. Interior cells get 1, edge cells the covered
/// fraction (a separable, bilinear weight). Padding boxes cover nothing.
pub fn box_coverage(h: usize, w: usize, b: &BBox) -> Vec<(usize, f64)> {
    if b.is_padding() {
        return Vec::new();
    }
    let xs = overlap_1d(b.x1 * w as f64, b.x2 * w as f64, w);
    let ys = overlap_1d(b.y1 * h as f64, b.y2 * h as f64, h);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &(r, wy) in &ys {
        for &(c, wx) in &xs {
            out.push((r * w + c, wy * wx));
        }
    }
    out
}

/// Places `vec: [d]` into an `[h, w, d]` grid according to the box coverage.
/// Cells outside the box are exactly zero.
pub fn box_splat(vec: &Tensor, b: &BBox, h: usize, w: usize) -> Result<Tensor> {
    let d = vec.len();
    let mut out = Tensor::zeros(&[h, w, d]);
    for (cell, wt) in box_coverage(h, w, b) {
        for (o, v) in out.data_mut()[cell * d..(cell + 1) * d].iter_mut().zip(vec.data()) {
            *o += wt * v;
        }
    }
    Ok(out)
}

/// Differentiable splat of a `[1, d]` row into `[h·w, d]`.
pub fn box_splat_var(tape: &mut Tape, vec: Var, b: &BBox, h: usize, w: usize) -> Result<Var> {
    let mut mix = RowMix::new(h * w);
    for (cell, wt) in box_coverage(h, w, b) {
        mix.push(cell, 0, wt);
    }
    tape.row_mix(vec, Rc::new(mix))
}
