//! Motion-aware temporal attention.
//!
//! For every view and every token position, attention runs only across the
//! `T` frames at that position. Motion tokens are prepended to the patch
//! tokens of each (view, frame). Queries and keys are rotated by a rotary
//! encoding of the frame index; no additive bias is used.
//!
//! Sums over the frame axis are correctly rounded, so permuting frames
//! permutes the outputs bit for bit when the rotary encoding is off.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{fsum, Bound, Linear, Mlp, Norm, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MtaError {
    #[error("layer {0} needs the previous patch tokens")]
    MissingPrevious(usize),
    #[error("layer index must start at 1")]
    LayerIndex,
    #[error("rotary encoding needs an even feature dimension, got {0}")]
    OddDimension(usize),
    #[error("expected {expected} frame positions, got {got}")]
    Positions { expected: usize, got: usize },
    #[error("no encoder layers to attend over")]
    NoLayers,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtaConfig {
    pub layers: usize,
    pub motion_tokens: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub rope: bool,
    pub rope_base: f64,
}

impl Default for MtaConfig {
    fn default() -> Self {
        Self { layers: 2, motion_tokens: 8, heads: 4, mlp_ratio: 2, rope: true, rope_base: 10_000.0 }
    }
}

/// Rotates interleaved feature pairs `(2j, 2j+1)` of the last axis by
/// `times[i] * base^(-2j/d)`, where `i` indexes `time_axis`.
pub fn rope_temporal<'t>(x: Var<'t>, time_axis: usize, times: &[f64], base: f64) -> Result<Var<'t>, MtaError> {
    let shape = x.shape();
    let d = *shape.last().ok_or(NumericsError::Empty("rope_temporal"))?;
    if d % 2 != 0 {
        return Err(MtaError::OddDimension(d));
    }
    if time_axis + 1 >= shape.len() {
        return Err(NumericsError::InvalidAxis { axis: time_axis, rank: shape.len() }.into());
    }
    if shape[time_axis] != times.len() {
        return Err(MtaError::Positions { expected: shape[time_axis], got: times.len() });
    }
    let inner: usize = shape[time_axis + 1..].iter().product();
    let nt = times.len();
    let freqs: Vec<f64> = (0..d / 2).map(|j| base.powf(-2.0 * j as f64 / d as f64)).collect();
    let rot: Vec<(f64, f64)> =
        times.iter().flat_map(|&t| freqs.iter().map(move |&f| ((t * f).cos(), (t * f).sin()))).collect();
    let apply = move |src: &[f64], sign: f64| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for (row, chunk) in src.chunks(d).enumerate() {
            let ti = (row * d / inner) % nt;
            let o = &mut out[row * d..(row + 1) * d];
            for j in 0..d / 2 {
                let (c, s) = rot[ti * (d / 2) + j];
                let s = sign * s;
                let (a, b) = (chunk[2 * j], chunk[2 * j + 1]);
                o[2 * j] = c * a - s * b;
                o[2 * j + 1] = s * a + c * b;
            }
        }
        out
    };
    let value = Tensor::new(&shape, apply(x.value().data(), 1.0))?;
    Ok(x.tape().custom(
        &[x],
        value,
        Box::new(move |g, _| vec![Some(Tensor::new(g.shape(), apply(g.data(), -1.0)).expect("same shape"))]),
    ))
}

/// Attention probabilities `[G, h, T, T]` for queries and keys `[G, T, D]`.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Tensor {
    let s = q.shape();
    let (g, nt, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut a = vec![0.0; g * heads * nt * nt];
    let mut row = vec![0.0; nt];
    for gi in 0..g {
        for h in 0..heads {
            for t in 0..nt {
                let qo = (gi * nt + t) * d + h * dh;
                for (u, r) in row.iter_mut().enumerate() {
                    let ko = (gi * nt + u) * d + h * dh;
                    *r = scale * (0..dh).map(|j| qd[qo + j] * kd[ko + j]).sum::<f64>();
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|r| *r = (*r - m).exp());
                let z = fsum(row.iter().copied());
                let base = ((gi * heads + h) * nt + t) * nt;
                for u in 0..nt {
                    a[base + u] = row[u] / z;
                }
            }
        }
    }
    Tensor::new(&[g, heads, nt, nt], a).expect("sized")
}

/// Scaled dot-product attention along axis 1 of `[G, T, D]` inputs, per head.
pub fn temporal_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Var<'t> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let s = qv.shape().to_vec();
    assert_eq!(kv.shape(), &s[..]);
    assert_eq!(vv.shape(), &s[..]);
    let (g, nt, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let a = attention_weights(&qv, &kv, heads);
    let ad = a.data().to_vec();
    let at = |gi: usize, h: usize, t: usize, u: usize| ad[((gi * heads + h) * nt + t) * nt + u];
    let vd = vv.data();
    let mut out = vec![0.0; g * nt * d];
    for gi in 0..g {
        for h in 0..heads {
            for t in 0..nt {
                for j in 0..dh {
                    let c = h * dh + j;
                    out[(gi * nt + t) * d + c] = fsum((0..nt).map(|u| at(gi, h, t, u) * vd[(gi * nt + u) * d + c]));
                }
            }
        }
    }
    let value = Tensor::new(&s, out).expect("sized");
    q.tape().custom(
        &[q, k, v],
        value,
        Box::new(move |gout, need| {
            let at = |gi: usize, h: usize, t: usize, u: usize| ad[((gi * heads + h) * nt + t) * nt + u];
            let (qd, kd, vd, go) = (qv.data(), kv.data(), vv.data(), gout.data());
            let idx = |gi: usize, t: usize, c: usize| (gi * nt + t) * d + c;
            let mut gq = vec![0.0; g * nt * d];
            let mut gk = vec![0.0; g * nt * d];
            let mut gv = vec![0.0; g * nt * d];
            let mut ds = vec![0.0; nt * nt];
            for gi in 0..g {
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    if need[2] {
                        for u in 0..nt {
                            for c in cols.clone() {
                                gv[idx(gi, u, c)] = fsum((0..nt).map(|t| at(gi, h, t, u) * go[idx(gi, t, c)]));
                            }
                        }
                    }
                    if !(need[0] || need[1]) {
                        continue;
                    }
                    for t in 0..nt {
                        let da: Vec<f64> = (0..nt)
                            .map(|u| cols.clone().map(|c| go[idx(gi, t, c)] * vd[idx(gi, u, c)]).sum::<f64>())
                            .collect();
                        let dot = fsum((0..nt).map(|u| at(gi, h, t, u) * da[u]));
                        for u in 0..nt {
                            ds[t * nt + u] = at(gi, h, t, u) * (da[u] - dot) * scale;
                        }
                    }
                    for c in cols {
                        for t in 0..nt {
                            if need[0] {
                                gq[idx(gi, t, c)] = fsum((0..nt).map(|u| ds[t * nt + u] * kd[idx(gi, u, c)]));
                            }
                            if need[1] {
                                gk[idx(gi, t, c)] = fsum((0..nt).map(|u| ds[u * nt + t] * qd[idx(gi, u, c)]));
                            }
                        }
                    }
                }
            }
            let wrap = |v: Vec<f64>, n: bool| n.then(|| Tensor::new(&s, v).expect("sized"));
            vec![wrap(gq, need[0]), wrap(gk, need[1]), wrap(gv, need[2])]
        }),
    )
}

/// Builds the layer-`l` input `[..., M + N_p, D]`: motion tokens followed by
/// the patch tokens, plus `previous` when `l > 1`.
pub fn mta_input<'t>(motion: Var<'t>, patches: Var<'t>, previous: Option<Var<'t>>, l: usize) -> Result<Var<'t>, MtaError> {
    let axis = patches.shape().len() - 2;
    let patch_part = match (l, previous) {
        (0, _) => return Err(MtaError::LayerIndex),
        (1, _) => patches,
        (_, Some(prev)) => patches.add(prev),
        (_, None) => return Err(MtaError::MissingPrevious(l)),
    };
    Ok(Var::concat(&[motion, patch_part], axis))
}

#[derive(Clone, Copy, Debug)]
pub struct MtaLayer {
    pub motion: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub norm: Norm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Mta {
    pub cfg: MtaConfig,
    pub dim: usize,
    pub layers: Vec<MtaLayer>,
}

/// Result of [`Mta::forward`].
pub struct MtaOutput<'t> {
    /// `[V, T, M + N_p, D]`.
    pub ta: Var<'t>,
    /// Patch slice of `ta`, `[V, T, N_p, D]`.
    pub patches: Var<'t>,
    /// Motion-token slice of `ta`, `[V, T, M, D]`.
    pub motion: Var<'t>,
}

impl Mta {
    pub fn new(store: &mut ParamStore, cfg: &MtaConfig, dim: usize, rng: &mut impl Rng) -> Self {
        assert!(dim.is_multiple_of(cfg.heads), "dim must divide into heads");
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = format!("mta{l}");
                let layer = MtaLayer {
                    motion: store.add_normal(format!("{name}.motion"), &[cfg.motion_tokens, dim], 0.5, rng),
                    q: Linear::new(store, &format!("{name}.q"), dim, dim, 1.0, rng),
                    k: Linear::new(store, &format!("{name}.k"), dim, dim, 1.0, rng),
                    v: Linear::new(store, &format!("{name}.v"), dim, dim, 1.0, rng),
                    norm: Norm::new(store, &format!("{name}.norm"), dim),
                    mlp: Mlp::new(store, &format!("{name}.mlp"), dim, cfg.mlp_ratio * dim, dim, rng),
                };
                let w = store.get_mut(layer.mlp.fc2.weight);
                *w = w.scale(0.1);
                layer
            })
            .collect();
        Self { cfg: cfg.clone(), dim, layers }
    }

    /// Temporal attention of `[V, T, S, D]` inputs, per view and position.
    pub fn attend<'t>(&self, p: &Bound<'t>, layer: &MtaLayer, x: Var<'t>) -> Result<Var<'t>, MtaError> {
        let s = x.shape();
        let (nv, nt, ns, d) = (s[0], s[1], s[2], s[3]);
        let seq = x.permute(&[0, 2, 1, 3]).reshape(&[nv * ns, nt, d]);
        let (mut q, mut k) = (layer.q.forward(p, seq), layer.k.forward(p, seq));
        let v = layer.v.forward(p, seq);
        if self.cfg.rope {
            let times: Vec<f64> = (0..nt).map(|t| t as f64).collect();
            let h = self.cfg.heads;
            let split = |y: Var<'t>| y.reshape(&[nv * ns, nt, h, d / h]);
            q = rope_temporal(split(q), 1, &times, self.cfg.rope_base)?.reshape(&[nv * ns, nt, d]);
            k = rope_temporal(split(k), 1, &times, self.cfg.rope_base)?.reshape(&[nv * ns, nt, d]);
        }
        let out = temporal_attention(q, k, v, self.cfg.heads);
        Ok(out.reshape(&[nv, ns, nt, d]).permute(&[0, 2, 1, 3]))
    }

    /// `MLP(LayerNorm(attend(x))) + x`.
    pub fn block<'t>(&self, p: &Bound<'t>, layer: &MtaLayer, x: Var<'t>) -> Result<Var<'t>, MtaError> {
        let attended = self.attend(p, layer, x)?;
        Ok(layer.mlp.forward(p, layer.norm.forward(p, attended)).add(x))
    }

    /// Runs every layer over the encoder's per-layer patch tokens
    /// `[V, T, N_p, D]`. Layer `l` reads encoder layer `l` (cycling) and
    /// receives the previous layer's output added to its input.
    pub fn forward<'t>(&self, p: &Bound<'t>, tape: &'t Tape, aa_layers: &[Var<'t>]) -> Result<MtaOutput<'t>, MtaError> {
        let first = aa_layers.first().ok_or(MtaError::NoLayers)?;
        let s = first.shape();
        let (nv, nt, np, d) = (s[0], s[1], s[2], s[3]);
        let m = self.cfg.motion_tokens;
        let zeros = tape.constant(Tensor::zeros(&[nv, nt, m, d]));
        let mut prev: Option<Var<'t>> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut motion = zeros.add_bcast(p[layer.motion]);
            let previous_patches = prev.map(|y| {
                motion = motion.add(y.slice(2, 0, m));
                y.slice(2, m, np)
            });
            let x = mta_input(motion, aa_layers[l % aa_layers.len()], previous_patches, l + 1)?;
            prev = Some(self.block(p, layer, x)?);
        }
        let ta = prev.ok_or(MtaError::NoLayers)?;
        Ok(MtaOutput { ta, patches: ta.slice(2, m, np), motion: ta.slice(2, 0, m) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, grad_check_params, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn rope1(v: &[f64], t: f64) -> Vec<f64> {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, v.len()], v.to_vec()).unwrap());
        rope_temporal(x, 0, &[t], 10_000.0).unwrap().value().data().to_vec()
    }

    #[test]
    fn rope_identity_at_zero_and_odd_dim_error() {
        let v = rand_tensor(&[8], 0).into_data();
        assert_eq!(rope1(&v, 0.0), v);
        let tape = Tape::new();
        let odd = tape.constant(Tensor::zeros(&[1, 3]));
        assert_eq!(rope_temporal(odd, 0, &[0.0], 10_000.0).unwrap_err(), MtaError::OddDimension(3));
    }

    #[test]
    fn rope_matches_pairwise_rotation() {
        let v = rand_tensor(&[4], 1).into_data();
        let r = rope1(&v, 3.0);
        let th1 = 3.0 * 10_000f64.powf(-0.5);
        let expect = [
            3f64.cos() * v[0] - 3f64.sin() * v[1],
            3f64.sin() * v[0] + 3f64.cos() * v[1],
            th1.cos() * v[2] - th1.sin() * v[3],
            th1.sin() * v[2] + th1.cos() * v[3],
        ];
        for (a, b) in r.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn rope_preserves_norm_and_same_frame_dot(seed in 0u64..500, t in -50.0f64..50.0) {
            let q = rand_tensor(&[16], seed).into_data();
            let k = rand_tensor(&[16], seed + 1000).into_data();
            let (rq, rk) = (rope1(&q, t), rope1(&k, t));
            prop_assert!((dot(&rq, &rq).sqrt() - dot(&q, &q).sqrt()).abs() < 1e-12);
            prop_assert!((dot(&rq, &rk) - dot(&q, &k)).abs() < 1e-12);
        }

        #[test]
        fn rope_logits_depend_on_offset_only(seed in 0u64..500, t in 0.0f64..5.0, u in 0.0f64..5.0, s in -20.0f64..20.0) {
            let q = rand_tensor(&[16], seed).into_data();
            let k = rand_tensor(&[16], seed + 1000).into_data();
            let base = dot(&rope1(&q, t), &rope1(&k, u));
            let shifted = dot(&rope1(&q, t + s), &rope1(&k, u + s));
            prop_assert!((base - shifted).abs() < 1e-9);
        }

        #[test]
        fn attention_rows_are_stochastic(seed in 0u64..500) {
            let q = rand_tensor(&[3, 4, 8], seed).scale(10.0);
            let k = rand_tensor(&[3, 4, 8], seed + 7).scale(10.0);
            let a = attention_weights(&q, &k, 2);
            for row in a.data().chunks(4) {
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_frame_returns_values() {
        let tape = Tape::new();
        let (q, k, v) = (rand_tensor(&[5, 1, 4], 0), rand_tensor(&[5, 1, 4], 1), rand_tensor(&[5, 1, 4], 2));
        let out = temporal_attention(tape.constant(q), tape.constant(k), tape.constant(v.clone()), 2);
        assert_eq!(*out.value(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let tape = Tape::new();
        let mut k = Tensor::zeros(&[1, 3, 4]);
        for t in 0..3 {
            for c in 0..4 {
                k.set(&[0, t, c], 0.3 * c as f64);
            }
        }
        let v = rand_tensor(&[1, 3, 4], 3);
        let out = temporal_attention(tape.constant(rand_tensor(&[1, 3, 4], 4)), tape.constant(k), tape.constant(v.clone()), 1);
        for c in 0..4 {
            let mean = (0..3).map(|t| v.get(&[0, t, c])).sum::<f64>() / 3.0;
            for t in 0..3 {
                assert!((out.value().get(&[0, t, c]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let (q, k, v) = (rand_tensor(&[2, 3, 6], 5), rand_tensor(&[2, 3, 6], 6), rand_tensor(&[2, 3, 6], 7));
        let tape = Tape::new();
        let out = temporal_attention(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), 2).value();
        let dh = 3;
        for g in 0..2 {
            for h in 0..2 {
                for t in 0..3 {
                    let logits: Vec<f64> = (0..3)
                        .map(|u| (0..dh).map(|j| q.get(&[g, t, h * dh + j]) * k.get(&[g, u, h * dh + j])).sum::<f64>() / 3f64.sqrt())
                        .collect();
                    let z: f64 = logits.iter().map(|l| l.exp()).sum();
                    for j in 0..dh {
                        let c = h * dh + j;
                        let expect: f64 = (0..3).map(|u| logits[u].exp() / z * v.get(&[g, u, c])).sum();
                        assert!((out.get(&[g, t, c]) - expect).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_gradients() {
        for seed in 0..3 {
            let (q, k, v) = (rand_tensor(&[2, 3, 4], seed), rand_tensor(&[2, 3, 4], seed + 10), rand_tensor(&[2, 3, 4], seed + 20));
            let w = rand_tensor(&[2, 3, 4], seed + 30);
            let opts = GradCheckOptions::default();
            let r = grad_check(|t, x| temporal_attention(x, t.constant(k.clone()), t.constant(v.clone()), 2).mul(t.constant(w.clone())).sum(), &q, &opts).unwrap();
            assert!(r.passed, "q {r:?}");
            let r = grad_check(|t, x| temporal_attention(t.constant(q.clone()), x, t.constant(v.clone()), 2).mul(t.constant(w.clone())).sum(), &k, &opts).unwrap();
            assert!(r.passed, "k {r:?}");
            let r = grad_check(|t, x| temporal_attention(t.constant(q.clone()), t.constant(k.clone()), x, 2).mul(t.constant(w.clone())).sum(), &v, &opts).unwrap();
            assert!(r.passed, "v {r:?}");
            let r = grad_check(|t, x| rope_temporal(x, 1, &[0.0, 1.0, 2.0], 100.0).unwrap().mul(t.constant(w.clone())).sum(), &q, &opts).unwrap();
            assert!(r.passed, "rope {r:?}");
        }
    }

    #[test]
    fn input_construction() {
        let tape = Tape::new();
        let m = tape.constant(rand_tensor(&[2, 4], 0));
        let f2 = tape.constant(rand_tensor(&[5, 4], 1));
        let one = mta_input(m, f2, None, 1).unwrap();
        assert_eq!(one.shape(), vec![7, 4]);
        let zero_prev = mta_input(m, f2, Some(tape.constant(Tensor::zeros(&[5, 4]))), 2).unwrap();
        assert_eq!(*zero_prev.value(), *one.value());
        let doubled = mta_input(m, f2, Some(f2), 2).unwrap().value();
        for (a, b) in doubled.data()[8..].iter().zip(f2.value().data()) {
            assert_eq!(*a, 2.0 * b);
        }
        assert_eq!(mta_input(m, f2, None, 2).unwrap_err(), MtaError::MissingPrevious(2));
    }

    fn setup(cfg: &MtaConfig, dim: usize, seed: u64) -> (ParamStore, Mta) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mta = Mta::new(&mut store, cfg, dim, &mut rng);
        (store, mta)
    }

    #[test]
    fn zero_mlp_output_is_residual_identity() {
        let cfg = MtaConfig { layers: 1, motion_tokens: 2, heads: 2, ..Default::default() };
        let (mut store, mta) = setup(&cfg, 8, 0);
        let layer = mta.layers[0];
        *store.get_mut(layer.mlp.fc2.weight) = Tensor::zeros(&[16, 8]);
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&[2, 3, 5, 8], 1));
        let y = mta.block(&store.bind(&tape), &layer, x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(*y.value(), *x.value());
    }

    #[test]
    fn frame_permutation_equivariance_without_rope() {
        let cfg = MtaConfig { layers: 2, motion_tokens: 2, heads: 2, rope: false, ..Default::default() };
        let (store, mta) = setup(&cfg, 8, 1);
        let aa = rand_tensor(&[2, 3, 4, 8], 2);
        let perm = [2, 0, 1];
        let permute = |t: &Tensor| {
            let views: Vec<Tensor> = (0..t.shape()[0])
                .map(|v| Tensor::stack(&perm.map(|f| t.index_axis0(v).index_axis0(f))).unwrap())
                .collect();
            Tensor::stack(&views).unwrap()
        };
        let tape = Tape::new();
        let p = store.bind(&tape);
        let a = mta.forward(&p, &tape, &[tape.constant(aa.clone())]).unwrap().ta.value();
        let b = mta.forward(&p, &tape, &[tape.constant(permute(&aa))]).unwrap().ta.value();
        assert_eq!(*b, permute(&a));
    }

    #[test]
    fn single_frame_clip_is_frame_local_and_temporal_mixing_is_real() {
        let cfg = MtaConfig { layers: 2, motion_tokens: 2, heads: 2, ..Default::default() };
        let (store, mta) = setup(&cfg, 8, 2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let one = rand_tensor(&[1, 1, 4, 8], 3);
        let a = mta.forward(&p, &tape, &[tape.constant(one.clone())]).unwrap();
        let b = mta.forward(&p, &tape, &[tape.constant(one)]).unwrap();
        assert_eq!(*a.ta.value(), *b.ta.value());
        assert_eq!(a.ta.shape(), vec![1, 1, 6, 8]);

        let clip = rand_tensor(&[1, 3, 4, 8], 4);
        let mut zeroed = clip.clone();
        zeroed.data_mut()[2 * 32..3 * 32].iter_mut().for_each(|x| *x = 0.0);
        let base = mta.forward(&p, &tape, &[tape.constant(clip)]).unwrap().ta.value();
        let probe = mta.forward(&p, &tape, &[tape.constant(zeroed)]).unwrap().ta.value();
        for t in 0..2 {
            assert_ne!(base.index_axis0(0).index_axis0(t), probe.index_axis0(0).index_axis0(t));
        }
    }

    #[test]
    fn block_and_forward_gradients() {
        for seed in 0..3 {
            let cfg = MtaConfig { layers: 2, motion_tokens: 2, heads: 2, ..Default::default() };
            let (store, mta) = setup(&cfg, 4, seed);
            let aa = [rand_tensor(&[1, 2, 4, 4], seed + 1), rand_tensor(&[1, 2, 4, 4], seed + 2)];
            let w = rand_tensor(&[1, 2, 6, 4], seed + 3);
            let reports = grad_check_params(
                &store,
                |tape, p| {
                    let layers: Vec<Var> = aa.iter().map(|a| tape.constant(a.clone())).collect();
                    mta.forward(p, tape, &layers).unwrap().ta.mul(tape.constant(w.clone())).sum()
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            for (name, r) in reports {
                assert!(r.passed, "{name}: {r:?}");
            }
            let r = grad_check(
                |tape, x| mta.forward(&store.bind(tape), tape, &[x]).unwrap().ta.mul(tape.constant(w.clone())).sum(),
                &aa[0],
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.passed, "input {r:?}");
        }
    }
}
