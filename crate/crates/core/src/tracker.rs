//! SORT: constant-velocity Kalman tracks matched to per-frame detections by
//! Hungarian assignment on `1 − IoU`.
//!
//! Kalman state is `(cx, cy, s, r, vcx, vcy, vs)` with `s` the box area and
//! `r` the aspect ratio `w / h`, all in normalized image units.

use std::cmp::Ordering;

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geometry::{fmt_box, iou, parse_box, parse_f64, parse_usize, BBox, BoxSet};

pub type State = SVector<f64, 7>;
pub type Cov = SMatrix<f64, 7, 7>;
pub type Meas = SVector<f64, 4>;
pub type MeasCov = SMatrix<f64, 4, 4>;
pub type Obs = SMatrix<f64, 4, 7>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Noise levels as standard deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanParams {
    pub meas_pos: f64,
    pub meas_area: f64,
    pub meas_aspect: f64,
    pub init_pos: f64,
    pub init_vel: f64,
    pub proc_pos: f64,
    pub proc_vel: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        KalmanParams {
            meas_pos: 0.01,
            meas_area: 0.01,
            meas_aspect: 0.1,
            init_pos: 0.02,
            init_vel: 0.1,
            proc_pos: 0.005,
            proc_vel: 0.01,
        }
    }
}

impl KalmanParams {
    pub fn measurement_noise(&self) -> MeasCov {
        MeasCov::from_diagonal(&Meas::new(
            self.meas_pos.powi(2),
            self.meas_pos.powi(2),
            self.meas_area.powi(2),
            self.meas_aspect.powi(2),
        ))
    }

    pub fn process_noise(&self) -> Cov {
        let (p, v) = (self.proc_pos.powi(2), self.proc_vel.powi(2));
        Cov::from_diagonal(&State::from_column_slice(&[p, p, p, p, v, v, v]))
    }

    fn initial_cov(&self) -> Cov {
        let (p, v) = (self.init_pos.powi(2), self.init_vel.powi(2));
        let a = self.meas_aspect.powi(2);
        Cov::from_diagonal(&State::from_column_slice(&[p, p, p, a, v, v, v]))
    }
}

pub fn transition() -> Cov {
    let mut f = Cov::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f[(2, 6)] = 1.0;
    f
}

pub fn observation() -> Obs {
    Obs::from_fn(|r, c| if r == c { 1.0 } else { 0.0 })
}

pub fn box_to_measurement(b: &BBox) -> SVector<f64, 4> {
    let [cx, cy, w, h] = b.center_size();
    let r = if h > 0.0 { w / h } else { 1.0 };
    Meas::new(cx, cy, w * h, r)
}

pub fn state_to_box(x: &State) -> BBox {
    let (s, r) = (x[2].max(0.0), x[3].max(0.0));
    let w = (s * r).sqrt();
    let h = if w > 0.0 { s / w } else { 0.0 };
    BBox::from_center(x[0], x[1], w, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub id: usize,
    pub x: State,
    pub p: Cov,
    pub hits: usize,
    pub misses: usize,
    /// `(frame, box, detection score)` for every matched frame.
    pub history: Vec<(usize, BBox, f64)>,
}

impl TrackState {
    pub fn new(id: usize, det: &Detection, kp: &KalmanParams) -> Self {
        let z = box_to_measurement(&det.bbox);
        let x = State::from_column_slice(&[z[0], z[1], z[2], z[3], 0.0, 0.0, 0.0]);
        TrackState { id, x, p: kp.initial_cov(), hits: 1, misses: 0, history: vec![(det.frame, det.bbox, det.score)] }
    }

    pub fn bbox(&self) -> BBox {
        state_to_box(&self.x)
    }

    pub fn mean_score(&self) -> f64 {
        if self.history.is_empty() {
            0.0
        } else {
            self.history.iter().map(|h| h.2).sum::<f64>() / self.history.len() as f64
        }
    }
}

/// `x ← F x`, `P ← F P Fᵀ + Q`. A predicted negative area stops the area
/// velocity instead.
pub fn kalman_predict(t: &TrackState, kp: &KalmanParams) -> TrackState {
    let f = transition();
    let mut out = t.clone();
    if out.x[2] + out.x[6] <= 0.0 {
        out.x[6] = 0.0;
    }
    out.x = f * out.x;
    out.p = f * out.p * f.transpose() + kp.process_noise();
    out
}

/// Kalman correction with measurement `z` and noise `r`, Joseph form.
pub fn kalman_update_with(t: &TrackState, z: &BBox, r: &MeasCov) -> Result<TrackState> {
    let h = observation();
    let y = box_to_measurement(z) - h * t.x;
    let s = h * t.p * h.transpose() + r;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::numeric(format!("singular innovation covariance for track {}: {s}", t.id)))?;
    let k = t.p * h.transpose() * s_inv;
    let ikh = Cov::identity() - k * h;
    let p = ikh * t.p * ikh.transpose() + k * r * k.transpose();
    let p = (p + p.transpose()) * 0.5;
    let min_eig = p.symmetric_eigen().eigenvalues.min();
    let scale = p.abs().max().max(1e-300);
    if !min_eig.is_finite() || min_eig < -1e-9 * scale {
        return Err(Error::numeric(format!(
            "covariance lost positive semidefiniteness (min eigenvalue {min_eig:e}) for track {}: x = {:?}, P = {p}",
            t.id,
            t.x.as_slice()
        )));
    }
    let mut out = t.clone();
    out.x = t.x + k * y;
    out.p = p;
    Ok(out)
}

pub fn kalman_update(t: &TrackState, z: &BBox, kp: &KalmanParams) -> Result<TrackState> {
    kalman_update_with(t, z, &kp.measurement_noise())
}

/// Minimum-cost assignment on an `m × n` cost matrix (row-major). Returns
/// `min(m, n)` `(row, col)` pairs sorted by row.
pub fn hungarian_assign(cost: &[f64], m: usize, n: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != m * n {
        return Err(Error::shape(format!("cost has {} entries, expected {m}x{n}", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::numeric("hungarian_assign needs finite costs"));
    }
    if m == 0 || n == 0 {
        return Ok(Vec::new());
    }
    let transposed = m > n;
    let (rows, cols) = if transposed { (n, m) } else { (m, n) };
    let at = |i: usize, j: usize| if transposed { cost[j * n + i] } else { cost[i * n + j] };

    // Shortest augmenting paths with potentials; rows and cols are 1-based
    // with 0 as the virtual root.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| if transposed { (j - 1, owner[j] - 1) } else { (owner[j] - 1, j - 1) })
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SortParams {
    pub iou_threshold: f64,
    pub max_age: usize,
    pub min_hits: usize,
    pub kalman: KalmanParams,
}

impl Default for SortParams {
    fn default() -> Self {
        SortParams { iou_threshold: 0.3, max_age: 3, min_hits: 1, kalman: KalmanParams::default() }
    }
}

impl SortParams {
    pub fn from_config(cfg: &crate::config::Config) -> Result<Self> {
        Ok(SortParams {
            iou_threshold: cfg.get("tracker.iou_threshold")?,
            max_age: cfg.get("tracker.max_age")?,
            min_hits: cfg.get("tracker.min_hits")?,
            kalman: KalmanParams::default(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tracker {
    pub params: SortParams,
    pub live: Vec<TrackState>,
    pub retired: Vec<TrackState>,
    next_id: usize,
}

impl Tracker {
    pub fn new(params: SortParams) -> Self {
        Tracker { params, live: Vec::new(), retired: Vec::new(), next_id: 0 }
    }

    /// One SORT step over the detections of a single frame.
    pub fn step(&mut self, frame: usize, dets: &[Detection]) -> Result<()> {
        let kp = self.params.kalman;
        for t in &mut self.live {
            *t = kalman_predict(t, &kp);
        }
        let (m, n) = (self.live.len(), dets.len());
        let mut cost = Vec::with_capacity(m * n);
        for t in &self.live {
            let pb = t.bbox();
            cost.extend(dets.iter().map(|d| 1.0 - iou(&pb, &d.bbox)));
        }
        let mut det_used = vec![false; n];
        let mut track_hit = vec![false; m];
        for (ti, di) in hungarian_assign(&cost, m, n)? {
            if 1.0 - cost[ti * n + di] < self.params.iou_threshold {
                continue;
            }
            let d = &dets[di];
            let t = &mut self.live[ti];
            *t = kalman_update(t, &d.bbox, &kp)?;
            t.hits += 1;
            t.misses = 0;
            let b = t.bbox().clamped();
            t.history.push((frame, b, d.score));
            det_used[di] = true;
            track_hit[ti] = true;
        }
        let mut kept = Vec::with_capacity(m);
        for (t, hit) in self.live.drain(..).zip(track_hit) {
            let mut t = t;
            if !hit {
                t.misses += 1;
            }
            if t.misses > self.params.max_age {
                self.retired.push(t);
            } else {
                kept.push(t);
            }
        }
        self.live = kept;
        for (d, used) in dets.iter().zip(det_used) {
            if !used {
                self.live.push(TrackState::new(self.next_id, d, &kp));
                self.next_id += 1;
            }
        }
        Ok(())
    }

    /// All tracks with at least `min_hits` hits, ordered by id.
    pub fn finish(self) -> Vec<TrackState> {
        let min_hits = self.params.min_hits;
        let mut all: Vec<TrackState> = self.retired.into_iter().chain(self.live).filter(|t| t.hits >= min_hits).collect();
        all.sort_by_key(|t| t.id);
        all
    }
}

/// Tracks a whole clip. `dets` may be in any order.
pub fn track_clip(dets: &[Detection], frames: usize, params: SortParams) -> Result<Vec<TrackState>> {
    let mut tracker = Tracker::new(params);
    for f in 0..frames {
        let here: Vec<Detection> = dets.iter().filter(|d| d.frame == f).copied().collect();
        tracker.step(f, &here)?;
    }
    Ok(tracker.finish())
}

/// Keeps the top `objects` tracks by hit count, then mean score, then id,
/// and lays them out as a `frames × objects` box set. Frames without a
/// match stay padding.
pub fn boxes_from_tracks(tracks: &[TrackState], frames: usize, objects: usize) -> BoxSet {
    let mut ranked: Vec<&TrackState> = tracks.iter().collect();
    ranked.sort_by(|a, b| {
        b.hits
            .cmp(&a.hits)
            .then_with(|| b.mean_score().partial_cmp(&a.mean_score()).unwrap_or(Ordering::Equal))
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut out = BoxSet::padding(frames, objects);
    for (slot, t) in ranked.into_iter().take(objects).enumerate() {
        for &(f, b, _) in &t.history {
            if f < frames {
                let b = b.clamped();
                if b.is_valid() && !b.is_padding() {
                    out.set(f, slot, b);
                }
            }
        }
    }
    out
}

/// Fraction of ground-truth (object, frame) entries whose best-overlapping
/// track (IoU ≥ 0.5) carries that object's dominant track id, where each
/// dominant id may belong to one object only.
pub fn id_consistency(gt: &BoxSet, tracks: &[TrackState]) -> f64 {
    let mut total = 0usize;
    let mut good = 0usize;
    let mut claimed = Vec::new();
    for o in 0..gt.objects() {
        let mut ids = Vec::new();
        for t in 0..gt.frames() {
            let g = gt.get(t, o);
            if g.is_padding() {
                continue;
            }
            total += 1;
            let best = tracks
                .iter()
                .filter_map(|tr| tr.history.iter().find(|h| h.0 == t).map(|h| (tr.id, iou(g, &h.1))))
                .filter(|(_, v)| *v >= 0.5)
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal));
            ids.push(best.map(|b| b.0));
        }
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for id in ids.iter().flatten() {
            match counts.iter_mut().find(|c| c.0 == *id) {
                Some(c) => c.1 += 1,
                None => counts.push((*id, 1)),
            }
        }
        if let Some(&(id, c)) = counts.iter().max_by_key(|c| (c.1, std::cmp::Reverse(c.0))) {
            if !claimed.contains(&id) {
                claimed.push(id);
                good += c;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        good as f64 / total as f64
    }
}

/// Parses `t,o,x1,y1,x2,y2,score` detection lines (`o` is ignored).
pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(Error::data(format!("line {}: expected t,o,x1,y1,x2,y2,score", n + 1)));
        }
        let frame = parse_usize(f[0], n + 1)?;
        let bbox = parse_box(&f[2..6], n + 1)?;
        let score = parse_f64(f[6], n + 1)?;
        if !bbox.is_valid() || bbox.is_padding() || !(0.0..=1.0).contains(&score) {
            return Err(Error::data(format!("line {}: invalid detection", n + 1)));
        }
        out.push(Detection { frame, bbox, score });
    }
    Ok(out)
}

/// Tracks as `t,id,x1,y1,x2,y2` lines ordered by frame then id.
pub fn tracks_to_text(tracks: &[TrackState]) -> String {
    let mut rows: Vec<(usize, usize, BBox)> =
        tracks.iter().flat_map(|t| t.history.iter().map(move |h| (h.0, t.id, h.1))).collect();
    rows.sort_by_key(|r| (r.0, r.1));
    rows.iter().map(|(f, id, b)| format!("{f},{id},{}\n", fmt_box(b))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: usize, x: f64, y: f64) -> Detection {
        Detection { frame, bbox: BBox::new(x, y, x + 0.2, y + 0.2), score: 0.9 }
    }

    #[test]
    fn predict_moves_by_velocity_and_grows_covariance() {
        let kp = KalmanParams::default();
        let t = TrackState::new(0, &det(0, 0.1, 0.1), &kp);
        let p = kalman_predict(&t, &kp);
        assert_eq!(p.x, t.x);
        assert!((0..7).all(|i| p.p[(i, i)] > t.p[(i, i)]));
        let mut m = t.clone();
        m.x[4] = 0.1;
        let p = kalman_predict(&m, &kp);
        assert!((p.x[0] - m.x[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn update_at_predicted_mean_keeps_mean() {
        let kp = KalmanParams::default();
        let t = kalman_predict(&TrackState::new(0, &det(0, 0.3, 0.2), &kp), &kp);
        let u = kalman_update(&t, &t.bbox(), &kp).unwrap();
        assert!((u.x - t.x).abs().max() < 1e-12);
    }

    #[test]
    fn noiseless_update_hits_measurement() {
        let kp = KalmanParams::default();
        let t = kalman_predict(&TrackState::new(0, &det(0, 0.3, 0.2), &kp), &kp);
        let z = BBox::new(0.35, 0.25, 0.5, 0.5);
        let u = kalman_update_with(&t, &z, &MeasCov::zeros()).unwrap();
        let zm = box_to_measurement(&z);
        assert!((0..4).all(|i| (u.x[i] - zm[i]).abs() < 1e-9));
    }

    #[test]
    fn hungarian_small_cases() {
        assert_eq!(hungarian_assign(&[0.0, 9.0, 9.0, 0.0], 2, 2).unwrap(), vec![(0, 0), (1, 1)]);
        assert_eq!(hungarian_assign(&[4.0], 1, 1).unwrap(), vec![(0, 0)]);
        assert_eq!(hungarian_assign(&[5.0, 1.0, 3.0], 1, 3).unwrap(), vec![(0, 1)]);
        assert_eq!(hungarian_assign(&[5.0, 1.0, 3.0], 3, 1).unwrap(), vec![(1, 0)]);
        assert!(hungarian_assign(&[], 0, 4).unwrap().is_empty());
        assert!(hungarian_assign(&[f64::NAN], 1, 1).is_err());
    }

    #[test]
    fn missing_detections_age_tracks() {
        let mut tr = Tracker::new(SortParams::default());
        tr.step(0, &[det(0, 0.1, 0.1), det(0, 0.6, 0.6)]).unwrap();
        tr.step(1, &[]).unwrap();
        assert!(tr.live.iter().all(|t| t.misses == 1));
        for f in 2..6 {
            tr.step(f, &[]).unwrap();
        }
        assert!(tr.live.is_empty());
        assert_eq!(tr.retired.len(), 2);
    }

    #[test]
    fn static_box_keeps_its_id() {
        let tracks = track_clip(&[det(0, 0.4, 0.4), det(1, 0.4, 0.4)], 2, SortParams::default()).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].history.len(), 2);
    }

    #[test]
    fn box_selection() {
        assert!(boxes_from_tracks(&[], 3, 2).boxes().iter().all(BBox::is_padding));
        let dets: Vec<Detection> = (0..3).map(|f| det(f, 0.1, 0.1)).collect();
        let tracks = track_clip(&dets, 3, SortParams::default()).unwrap();
        let b = boxes_from_tracks(&tracks, 3, 2);
        assert!((0..3).all(|f| !b.get(f, 0).is_padding() && b.get(f, 1).is_padding()));
    }

    #[test]
    fn detection_text_parsing() {
        let d = parse_detections("0,0,0.1,0.1,0.3,0.3,0.8\n\n1,0,0.2,0.1,0.4,0.3,0.7\n").unwrap();
        assert_eq!(d.len(), 2);
        assert!(parse_detections("0,0,0.3,0.1,0.1,0.3,0.8").is_err());
        assert!(parse_detections("0,0,0.1,0.1,0.3").is_err());
    }
}
