//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    pub abs_tol: f64,
    /// Check at most this many coordinates per tensor, sampled by `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, abs_tol: 1e-8, max_coords: None, seed: 0 }
    }
}

impl GradCheckOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Default)]
struct Accumulator {
    max_rel: f64,
    max_abs: f64,
    worst: usize,
    checked: usize,
}

impl Accumulator {
    fn push(&mut self, index: usize, analytic: f64, numeric: f64, abs_tol: f64) {
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > abs_tol { abs / scale } else { 0.0 };
        if rel > self.max_rel || self.checked == 0 {
            self.max_rel = self.max_rel.max(rel);
            self.worst = index;
        }
        self.max_abs = self.max_abs.max(abs);
        self.checked += 1;
    }

    fn report(self, opts: &GradCheckOptions) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel,
            max_abs_error: self.max_abs,
            worst_index: self.worst,
            checked: self.checked,
            passed: self.max_rel <= opts.tol || self.max_abs <= opts.abs_tol,
        }
    }
}

fn coordinates(n: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

fn finite(value: f64) -> Result<f64, NumericsError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NumericsError::NonFinite { op: "grad_check", index: 0 })
    }
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn grad_check<F>(f: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let eval = |point: &Tensor| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let v = tape.constant(point.clone());
        finite(f(&tape, v).item())
    };
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let out = f(&tape, xv);
    finite(out.item())?;
    let analytic = tape.backward(out)?.get_or_zeros(xv);

    let mut acc = Accumulator::default();
    let mut probe = x.clone();
    for i in coordinates(x.numel(), opts, 0) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + opts.h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - opts.h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        acc.push(i, analytic.data()[i], (plus - minus) / (2.0 * opts.h), opts.abs_tol);
    }
    Ok(acc.report(opts))
}

/// [`grad_check`] over every parameter of a store; one report per parameter
/// name.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    opts: &GradCheckOptions,
) -> Result<Vec<(String, GradCheckReport)>, NumericsError>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = f(&tape, &bound);
    finite(out.item())?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = store.ids().map(|id| grads.get_or_zeros(bound.var(id))).collect();
    drop(bound);

    let eval = |s: &ParamStore| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let bound = s.bind_where(&tape, |_| false);
        finite(f(&tape, &bound).item())
    };

    let mut probe = store.clone();
    let mut reports = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut acc = Accumulator::default();
        for i in coordinates(store.get(id).numel(), opts, id.index() as u64 + 1) {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + opts.h;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - opts.h;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            acc.push(i, analytic[id.index()].data()[i], (plus - minus) / (2.0 * opts.h), opts.abs_tol);
        }
        reports.push((store.name(id).to_string(), acc.report(opts)));
    }
    Ok(reports)
}
