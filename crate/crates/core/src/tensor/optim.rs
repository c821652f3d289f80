use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers, one pair per parameter slot.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn for_shapes<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let mut s = AdamState::default();
        for shape in shapes {
            s.m.push(Tensor::zeros(shape));
            s.v.push(Tensor::zeros(shape));
            s.steps.push(0);
        }
        s
    }
}

impl Adam {
    /// Updates `param` in place from `grad`, advancing slot `slot` of `state`.
    pub fn step(&self, param: &mut Tensor, grad: &Tensor, state: &mut AdamState, slot: usize, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() || state.m[slot].shape() != param.shape() {
            return Err(Error::shape(format!(
                "adam: param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                state.m[slot].shape()
            )));
        }
        state.steps[slot] += 1;
        let t = state.steps[slot] as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        for (((p, g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
