//! Differentiable operations on [`Var`].
//!
//! Shape mismatches between operands are programming errors and panic; the
//! operations with data-dependent failure modes (softmax on non-finite input,
//! odd rotary dimension, layer-norm parameter shapes) return `Result`.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{numel, Tensor};
use super::NumericsError;

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sign with the subgradient convention `sign(0) = 0`.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-axis bilinear taps for 2x upsampling with half-pixel centers.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let frac = src - f;
            let i0 = (f.max(0.0) as usize).min(n - 1);
            let i1 = ((f + 1.0).max(0.0) as usize).min(n - 1);
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// `out[b] = a[b] @ w` (shared rhs) or `a[b] @ w[b]`, accumulating into `out`.
fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (m x k) += g (m x n) @ b^T` where b is (k x n).
fn matmul_bt_kernel(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out (k x n) += a^T @ g` where a is (m x k), g is (m x n).
fn matmul_at_kernel(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl<'t> Var<'t> {
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(&f));
        let yc = y.clone();
        self.push(
            &[self],
            (*y).clone(),
            Box::new(move |g, _| {
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(yc.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
            }),
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| sign0(x))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu_fwd, |x, _| gelu_grad(x))
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(move |x| x.clamp(lo, hi), move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 })
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
        let y = a.zip_map(&b, f);
        self.push(
            &[self, other],
            y,
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let d = g.data().iter().zip(a.data()).zip(b.data()).map(|((&g, &x), &y)| g * da(x, y));
                    Tensor::from_parts(g.shape().to_vec(), d.collect())
                });
                let gb = need[1].then(|| {
                    let d = g.data().iter().zip(a.data()).zip(b.data()).map(|((&g, &x), &y)| g * db(x, y));
                    Tensor::from_parts(g.shape().to_vec(), d.collect())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    /// Multiply by a constant tensor of the same shape (e.g. a mask).
    pub fn mul_const(self, c: &Tensor) -> Var<'t> {
        let cv = self.tape().constant(c.clone());
        self.mul(cv)
    }

    fn broadcast(self, other: Var<'t>, mul: bool) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let (ash, bsh) = (a.shape(), b.shape());
        assert!(
            bsh.len() <= ash.len() && ash[ash.len() - bsh.len()..] == *bsh,
            "broadcast: {bsh:?} is not a suffix of {ash:?}"
        );
        let inner = b.numel();
        let mut y = a.data().to_vec();
        for chunk in y.chunks_mut(inner) {
            for (v, &w) in chunk.iter_mut().zip(b.data()) {
                if mul {
                    *v *= w;
                } else {
                    *v += w;
                }
            }
        }
        self.push(
            &[self, other],
            Tensor::from_parts(ash.to_vec(), y),
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    if mul {
                        let mut d = g.data().to_vec();
                        for chunk in d.chunks_mut(inner) {
                            for (v, &w) in chunk.iter_mut().zip(b.data()) {
                                *v *= w;
                            }
                        }
                        Tensor::from_parts(g.shape().to_vec(), d)
                    } else {
                        g.clone()
                    }
                });
                let gb = need[1].then(|| {
                    let mut acc = vec![0.0; inner];
                    for (gc, ac) in g.data().chunks(inner).zip(a.data().chunks(inner)) {
                        for i in 0..inner {
                            acc[i] += if mul { gc[i] * ac[i] } else { gc[i] };
                        }
                    }
                    Tensor::from_parts(b.shape().to_vec(), acc)
                });
                vec![ga, gb]
            }),
        )
    }

    /// `self + other` where `other`'s shape is a suffix of `self`'s shape.
    pub fn add_bcast(self, other: Var<'t>) -> Var<'t> {
        self.broadcast(other, false)
    }

    /// `self * other` where `other`'s shape is a suffix of `self`'s shape.
    pub fn mul_bcast(self, other: Var<'t>) -> Var<'t> {
        self.broadcast(other, true)
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s = x.sum();
        self.push(
            &[self],
            Tensor::scalar(s),
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x.reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.push(
            &[self],
            y,
            Box::new(move |g, _| vec![Some(g.reshape(&old).expect("reshape pullback"))]),
        )
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let x = self.value();
        assert_eq!(axes.len(), x.rank(), "permute: rank mismatch");
        let (data, shape) = permute_data(x.data(), x.shape(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(
            &[self],
            Tensor::from_parts(shape, data),
            Box::new(move |g, _| {
                let (d, s) = permute_data(g.data(), g.shape(), &inverse);
                vec![Some(Tensor::from_parts(s, d))]
            }),
        )
    }

    /// Swap the last two axes.
    pub fn transpose_last2(self) -> Var<'t> {
        let r = self.shape().len();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        assert!(start + len <= n, "slice out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        self.push(
            &[self],
            Tensor::from_parts(oshape, out),
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = o * n * inner;
                    gx[base + start * inner..base + (start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }),
        )
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        let first = parts.first().expect("concat of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base_shape = values[0].shape().to_vec();
        let mut sizes = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), base_shape.len(), "concat: rank mismatch");
            for d in 0..s.len() {
                assert!(d == axis || s[d] == base_shape[d], "concat: extent mismatch on axis {d}");
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut oshape = base_shape.clone();
        oshape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        first.push(
            parts,
            Tensor::from_parts(oshape, out),
            Box::new(move |g, need| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for (i, &sz) in sizes.iter().enumerate() {
                    if need[i] {
                        let mut gp = Vec::with_capacity(outer * sz * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[base..base + sz * inner]);
                        }
                        grads.push(Some(Tensor::from_parts(shapes[i].clone(), gp)));
                    } else {
                        grads.push(None);
                    }
                    offset += sz;
                }
                grads
            }),
        )
    }

    /// Matrix product over the last two axes. `other` is either rank 2 and
    /// shared across the batch, or has the same leading batch axes as `self`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let ash = a.shape().to_vec();
        let bsh = b.shape().to_vec();
        assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(k, k2, "matmul: inner dimension mismatch {ash:?} x {bsh:?}");
        let batch = numel(&ash[..ash.len() - 2]);
        let shared = bsh.len() == 2;
        if !shared {
            assert_eq!(ash[..ash.len() - 2], bsh[..bsh.len() - 2], "matmul: batch mismatch");
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let bb = if shared { b.data() } else { &b.data()[bi * k * n..(bi + 1) * k * n] };
            matmul_kernel(&a.data()[bi * m * k..(bi + 1) * m * k], bb, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let mut oshape = ash[..ash.len() - 2].to_vec();
        oshape.extend([m, n]);
        self.push(
            &[self, other],
            Tensor::from_parts(oshape, out),
            Box::new(move |g, need| {
                let gd = g.data();
                let ga = need[0].then(|| {
                    let mut ga = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let bb = if shared { b.data() } else { &b.data()[bi * k * n..(bi + 1) * k * n] };
                        matmul_bt_kernel(&gd[bi * m * n..(bi + 1) * m * n], bb, &mut ga[bi * m * k..(bi + 1) * m * k], m, k, n);
                    }
                    Tensor::from_parts(ash.clone(), ga)
                });
                let gb = need[1].then(|| {
                    let mut gb = vec![0.0; if shared { k * n } else { batch * k * n }];
                    for bi in 0..batch {
                        let off = if shared { 0 } else { bi * k * n };
                        matmul_at_kernel(&a.data()[bi * m * k..(bi + 1) * m * k], &gd[bi * m * n..(bi + 1) * m * n], &mut gb[off..off + k * n], m, k, n);
                    }
                    Tensor::from_parts(bsh.clone(), gb)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::InvalidAxis { axis, rank: shape.len() });
        }
        if let Some(index) = x.first_non_finite() {
            return Err(NumericsError::NonFinite { op: "softmax", index });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut y = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| x.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (x.data()[at(j)] - mx).exp();
                    y[at(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    y[at(j)] /= s;
                }
            }
        }
        let y = Rc::new(Tensor::from_parts(shape.clone(), y));
        let yc = y.clone();
        Ok(self.push(
            &[self],
            (*y).clone(),
            Box::new(move |g, _| {
                let mut gx = vec![0.0; yc.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g.data()[at(j)] * yc.data()[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = yc.data()[at(j)] * (g.data()[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }),
        ))
    }

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().ok_or(NumericsError::Empty("layer_norm"))?;
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if p.shape() != [d] {
                return Err(NumericsError::ShapeMismatch { op: name_op(name), expected: vec![d], got: p.shape() });
            }
        }
        if eps <= 0.0 {
            return Err(NumericsError::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let gv = gain.value();
        let bv = bias.value();
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.push(
            &[self, gain, bias],
            Tensor::from_parts(shape.clone(), y),
            Box::new(move |g, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let mut mean_gh = 0.0;
                        let mut mean_ghh = 0.0;
                        for j in 0..d {
                            let gh = gd[r * d + j] * gv.data()[j];
                            mean_gh += gh;
                            mean_ghh += gh * xhat[r * d + j];
                        }
                        mean_gh /= d as f64;
                        mean_ghh /= d as f64;
                        for j in 0..d {
                            let gh = gd[r * d + j] * gv.data()[j];
                            gx[r * d + j] = inv_std[r] * (gh - mean_gh - xhat[r * d + j] * mean_ghh);
                        }
                    }
                    Tensor::from_parts(shape.clone(), gx)
                });
                let ggain = need[1].then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                    Tensor::from_parts(vec![d], acc)
                });
                let gbias = need[2].then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += gd[r * d + j];
                        }
                    }
                    Tensor::from_parts(vec![d], acc)
                });
                vec![gx, ggain, gbias]
            }),
        ))
    }

    /// Scale rows of the last axis to unit Euclidean norm.
    pub fn normalize_last(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().expect("normalize_last on scalar");
        let rows = x.numel() / d;
        let mut norms = vec![0.0; rows];
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms[r] = nrm;
            for j in 0..d {
                y[r * d + j] = row[j] / nrm;
            }
        }
        let y = Rc::new(Tensor::from_parts(shape.clone(), y));
        let yc = y.clone();
        self.push(
            &[self],
            (*y).clone(),
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.numel()];
                for r in 0..rows {
                    let yr = &yc.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }),
        )
    }

    /// Zero-padded, stride-1 2D convolution with an odd square kernel.
    /// Input `[B, Cin, H, W]`, weight `[Cout, Cin, k, k]`, bias `[Cout]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin, k, k]");
        let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        assert_eq!(ws[3], k);
        assert_eq!(k % 2, 1, "conv2d kernel must be odd");
        assert_eq!(bias.shape(), vec![cout], "conv2d bias shape");
        let pad = k / 2;
        let bv = bias.value();
        let hw = h * wd;
        let mut out = vec![0.0; bn * cout * hw];
        for b in 0..bn {
            for co in 0..cout {
                let o = &mut out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
                o.iter_mut().for_each(|v| *v = bv.data()[co]);
                for ci in 0..cin {
                    let inp = &x.data()[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                            conv_tap(inp, o, wv, ky, kx, pad, h, wd);
                        }
                    }
                }
            }
        }
        self.push(
            &[self, weight, bias],
            Tensor::from_parts(vec![bn, cout, h, wd], out),
            Box::new(move |g, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; bn * cin * hw];
                    for b in 0..bn {
                        for co in 0..cout {
                            let go = &gd[(b * cout + co) * hw..(b * cout + co + 1) * hw];
                            for ci in 0..cin {
                                let gi = &mut gx[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                                        conv_tap_transpose(go, gi, wv, ky, kx, pad, h, wd);
                                    }
                                }
                            }
                        }
                    }
                    Tensor::from_parts(xs.clone(), gx)
                });
                let gw = need[1].then(|| {
                    let mut gw = vec![0.0; w.numel()];
                    for b in 0..bn {
                        for co in 0..cout {
                            let go = &gd[(b * cout + co) * hw..(b * cout + co + 1) * hw];
                            for ci in 0..cin {
                                let inp = &x.data()[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        gw[((co * cin + ci) * k + ky) * k + kx] += conv_tap_dot(inp, go, ky, kx, pad, h, wd);
                                    }
                                }
                            }
                        }
                    }
                    Tensor::from_parts(ws.clone(), gw)
                });
                let gb = need[2].then(|| {
                    let mut gb = vec![0.0; cout];
                    for b in 0..bn {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            *acc += gd[(b * cout + co) * hw..(b * cout + co + 1) * hw].iter().sum::<f64>();
                        }
                    }
                    Tensor::from_parts(vec![cout], gb)
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Bilinear 2x upsampling of `[..., H, W]` with half-pixel centers and
    /// edge clamping.
    pub fn upsample2x(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let r = shape.len();
        assert!(r >= 2, "upsample2x needs rank >= 2");
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = x.numel() / (h * w);
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[r - 2] = oh;
        oshape[r - 1] = ow;
        self.push(
            &[self],
            Tensor::from_parts(oshape, out),
            Box::new(move |g, _| {
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let go = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let gi = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let gv = go[oy * ow + ox];
                            gi[y0 * w + x0] += gv * wy0 * wx0;
                            gi[y0 * w + x1] += gv * wy0 * wx1;
                            gi[y1 * w + x0] += gv * wy1 * wx0;
                            gi[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }),
        )
    }
}

fn name_op(name: &str) -> &'static str {
    match name {
        "gain" => "layer_norm gain",
        _ => "layer_norm bias",
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap(inp: &[f64], out: &mut [f64], wv: f64, ky: usize, kx: usize, pad: usize, h: usize, w: usize) {
    if wv == 0.0 {
        return;
    }
    let (y_lo, y_hi) = (pad.saturating_sub(ky), (h + pad).saturating_sub(ky).min(h));
    let (x_lo, x_hi) = (pad.saturating_sub(kx), (w + pad).saturating_sub(kx).min(w));
    for y in y_lo..y_hi {
        let sy = y + ky - pad;
        let orow = &mut out[y * w + x_lo..y * w + x_hi];
        let irow = &inp[sy * w + x_lo + kx - pad..sy * w + x_hi + kx - pad];
        for (o, &i) in orow.iter_mut().zip(irow) {
            *o += wv * i;
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap_transpose(gout: &[f64], gin: &mut [f64], wv: f64, ky: usize, kx: usize, pad: usize, h: usize, w: usize) {
    if wv == 0.0 {
        return;
    }
    let (y_lo, y_hi) = (pad.saturating_sub(ky), (h + pad).saturating_sub(ky).min(h));
    let (x_lo, x_hi) = (pad.saturating_sub(kx), (w + pad).saturating_sub(kx).min(w));
    for y in y_lo..y_hi {
        let sy = y + ky - pad;
        let grow = &gout[y * w + x_lo..y * w + x_hi];
        let irow = &mut gin[sy * w + x_lo + kx - pad..sy * w + x_hi + kx - pad];
        for (i, &g) in irow.iter_mut().zip(grow) {
            *i += wv * g;
        }
    }
}

#[inline]
fn conv_tap_dot(inp: &[f64], gout: &[f64], ky: usize, kx: usize, pad: usize, h: usize, w: usize) -> f64 {
    let (y_lo, y_hi) = (pad.saturating_sub(ky), (h + pad).saturating_sub(ky).min(h));
    let (x_lo, x_hi) = (pad.saturating_sub(kx), (w + pad).saturating_sub(kx).min(w));
    let mut s = 0.0;
    for y in y_lo..y_hi {
        let sy = y + ky - pad;
        let grow = &gout[y * w + x_lo..y * w + x_hi];
        let irow = &inp[sy * w + x_lo + kx - pad..sy * w + x_hi + kx - pad];
        for (&i, &g) in irow.iter().zip(grow) {
            s += i * g;
        }
    }
    s
}
