use rand::Rng;

use crate::tensor::{Tape, Tensor, Var};

use super::params::{Bound, ParamId, ParamStore};
use super::CodecError;

pub const LEAK: f64 = 0.2;

/// Square-kernel convolution over `[1,C,H,W]` maps with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    /// With `zero` set, weights and bias start at exactly zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero: bool,
    ) -> Self {
        let shape = [cout, cin, k, k];
        let w = if zero {
            store.add(format!("{name}.w"), Tensor::zeros(&shape))
        } else {
            store.add_he(format!("{name}.w"), &shape, cin * k * k, rng)
        };
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            stride,
            pad: k / 2,
            cin,
            cout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, CodecError> {
        Ok(tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)?)
    }
}

/// Dense layer on row vectors: `[N,in] → [N,out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, nin: usize, nout: usize, zero: bool) -> Self {
        let w = if zero {
            store.add(format!("{name}.w"), Tensor::zeros(&[nin, nout]))
        } else {
            store.add_he(format!("{name}.w"), &[nin, nout], nin, rng)
        };
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[nout]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, CodecError> {
        let y = tape.matmul(x, p.var(self.w))?;
        Ok(tape.add(y, p.var(self.b))?)
    }
}

/// `[C,H,W]` plane stack with every channel constant, as `[1,C,h,w]`.
pub fn constant_planes(tape: &mut Tape, values: &[f64], h: usize, w: usize) -> Var {
    let t = Tensor::from_fn(&[1, values.len(), h, w], |i| values[i / (h * w)]);
    tape.constant(t)
}
