//! Central finite-difference gradient checks.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Denominator floor for relative error, so that exactly-zero or
/// vanishing gradients are compared absolutely at this scale. Probe
/// rounding at h = 1e-5 is about eps·|f|/h, around 1e-9 for block losses.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Label and coordinate of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, idx: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((label.to_string(), idx, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

/// Five-point central difference of `f` around `x`. The plain two-point
/// rule leaves an O(h²) truncation term that shows up as relative error on
/// gradients near the error floor.
fn stencil(x: f64, h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(x + 2.0 * h)?, f(x + h)?, f(x - h)?, f(x - 2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let d = stencil(orig, h, |v| {
            probe.data_mut()[i] = v;
            Ok(f(&probe))
        });
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = d.expect("infallible");
    }
    g
}

/// Compares tape gradients of `build` against central differences for every
/// input tensor. `build` receives one leaf per input and returns a scalar.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut vals = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*v).unwrap_or(&zero).clone();
        for i in 0..inputs[k].len() {
            let orig = vals[k].data()[i];
            let numeric = stencil(orig, h, |v| {
                vals[k].data_mut()[i] = v;
                eval(&vals)
            })?;
            vals[k].data_mut()[i] = orig;
            report.record(&format!("input{k}"), i, analytic.data()[i], numeric);
        }
    }
    finite(report)
}

/// Compares parameter gradients of a loss built from `store` against central
/// differences. `coords_per_param` caps how many coordinates of each
/// parameter are probed (evenly strided); `None` probes all of them.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    build: F,
    h: f64,
    coords_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<(ParamId, Tensor)> = grads.param_grads().into_iter().map(|(id, g)| (id, g.clone())).collect();

    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for id in store.ids() {
        let n = store.get(id).len();
        let zero = Tensor::zeros(store.get(id).shape());
        let a = analytic.iter().find(|(pid, _)| *pid == id).map(|(_, g)| g).unwrap_or(&zero);
        let stride = match coords_per_param {
            Some(c) if c < n => n.div_ceil(c),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = probe.get(id).data()[i];
            let numeric = stencil(orig, h, |v| {
                probe.get_mut(id).data_mut()[i] = v;
                scalar_of(&build, &probe)
            })?;
            probe.get_mut(id).data_mut()[i] = orig;
            report.record(store.name(id), i, a.data()[i], numeric);
        }
    }
    finite(report)
}

fn scalar_of<F>(build: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    Ok(tape.value(loss).data()[0])
}

fn finite(report: GradCheckReport) -> Result<GradCheckReport> {
    if report.max_rel_err.is_nan() {
        return Err(Error::numeric("gradient check produced NaN"));
    }
    Ok(report)
}
