//! Small layer building blocks over [`ParamStore`].

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::tape::Var;
use super::NumericsError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map over the last axis: `x @ w + b`, `w` is `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights drawn from `N(0, gain^2 / d_in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[d_in, d_out], gain / (d_in as f64).sqrt(), rng);
        let bias = store.add_const(format!("{name}.bias"), &[d_out], 0.0);
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(p[self.weight]).add_bcast(p[self.bias])
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), &[d], 1.0),
            bias: store.add_const(format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(p[self.gain], p[self.bias], LAYER_NORM_EPS).expect("norm parameters sized at construction")
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, 1.0, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        self.fc2.forward(p, self.fc1.forward(p, x).gelu())
    }
}

/// Applies `(weight, bias)` layers in order with GELU between consecutive
/// layers (none after the last). Weights are `[in, out]`, biases `[out]`.
pub fn mlp_forward<'t>(x: Var<'t>, layers: &[(Var<'t>, Var<'t>)]) -> Result<Var<'t>, NumericsError> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let ws = w.shape();
        let d_in = *h.shape().last().ok_or(NumericsError::Empty("mlp_forward"))?;
        if ws.len() != 2 || ws[0] != d_in {
            return Err(NumericsError::ShapeMismatch { op: "mlp_forward weight", expected: vec![d_in, 0], got: ws });
        }
        if b.shape() != [ws[1]] {
            return Err(NumericsError::ShapeMismatch { op: "mlp_forward bias", expected: vec![ws[1]], got: b.shape() });
        }
        h = h.matmul(w).add_bcast(b);
        if i + 1 < layers.len() {
            h = h.gelu();
        }
    }
    Ok(h)
}
