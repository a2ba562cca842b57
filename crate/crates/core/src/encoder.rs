//! Patch embedding and a small alternating-attention stack.
//!
//! Every image becomes one camera token followed by `N_p` patch tokens. Each
//! layer runs a transformer block inside every (view, frame) sequence and
//! then, unless disabled, a block over all views of the same frame. Frames
//! never attend to each other here.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Bound, Linear, Mlp, Norm, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("image {height}x{width} not divisible by patch size {patch}")]
    Divisibility { height: usize, width: usize, patch: usize },
    #[error("token dim {dim} not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("expected images [V, T, 3, {height}, {width}], got {got:?}")]
    Shape { height: usize, width: usize, got: Vec<usize> },
    #[error("clip has {frames} frames, encoder supports at most {max}")]
    TooManyFrames { frames: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_frames: usize,
    pub cross_view: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, patch: 8, dim: 64, depth: 2, heads: 4, mlp_ratio: 2, max_frames: 8, cross_view: true }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(EncoderError::Divisibility { height: self.height, width: self.width, patch: self.patch });
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(EncoderError::Heads { dim: self.dim, heads: self.heads });
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }
}

/// Multi-head self-attention over `[B, S, D]`.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, 1.0, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, 1.0, rng),
            heads,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(p, x).reshape(&[b, n, 3, h, dh]).permute(&[2, 0, 3, 1, 4]);
        let part = |i| qkv.slice(0, i, 1).reshape(&[b, h, n, dh]);
        let (q, k, v) = (part(0), part(1), part(2));
        let attn = q.matmul(k.transpose_last2()).scale(1.0 / (dh as f64).sqrt()).softmax(3).expect("finite scores");
        let o = attn.matmul(v).permute(&[0, 2, 1, 3]).reshape(&[b, n, d]);
        self.out.forward(p, o)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_ratio * dim, dim, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let x = x.add(self.attn.forward(p, self.norm1.forward(p, x)));
        x.add(self.mlp.forward(p, self.norm2.forward(p, x)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AaLayer {
    pub frame: Block,
    pub global: Block,
}

/// Encoder output for a clip with `V` views and `T` frames.
pub struct TokenSet<'t> {
    /// `[V, T, D]`.
    pub camera: Var<'t>,
    /// Patch tokens after each layer, each `[V, T, N_p, D]`.
    pub layers: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embed: Linear,
    pub pos: ParamId,
    pub camera_token: ParamId,
    pub frame_register: ParamId,
    pub layers: Vec<AaLayer>,
}

pub const PREFIX: &str = "encoder.";

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let d = cfg.dim;
        let p = cfg.patch;
        let embed = Linear::new(store, "encoder.embed", 3 * p * p, d, 1.0, rng);
        let pos = store.add_normal("encoder.pos", &[cfg.num_patches(), d], 0.1, rng);
        let camera_token = store.add_normal("encoder.camera_token", &[d], 0.1, rng);
        let frame_register = store.add_normal("encoder.frame_register", &[cfg.max_frames, d], 0.1, rng);
        let layers = (0..cfg.depth)
            .map(|l| AaLayer {
                frame: Block::new(store, &format!("encoder.aa{l}.frame"), d, cfg.heads, cfg.mlp_ratio, rng),
                global: Block::new(store, &format!("encoder.aa{l}.global"), d, cfg.heads, cfg.mlp_ratio, rng),
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), embed, pos, camera_token, frame_register, layers })
    }

    /// Splits `[B, 3, H, W]` images into `[B, N_p, 3 p^2]` patch vectors,
    /// each ordered channel, row, column.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor, EncoderError> {
        patchify(images, self.cfg.patch)
    }

    /// Linear patch embedding without positional terms: `[B, N_p, D]`.
    pub fn embed_patches<'t>(&self, p: &Bound<'t>, tape: &'t Tape, images: &Tensor) -> Result<Var<'t>, EncoderError> {
        let patches = self.patchify(images)?;
        Ok(self.embed.forward(p, tape.constant(patches)))
    }

    /// Encodes `[V, T, 3, H, W]` images.
    pub fn forward<'t>(&self, p: &Bound<'t>, tape: &'t Tape, images: &Tensor) -> Result<TokenSet<'t>, EncoderError> {
        let s = images.shape();
        let cfg = &self.cfg;
        if s.len() != 5 || s[2] != 3 || s[3] != cfg.height || s[4] != cfg.width {
            return Err(EncoderError::Shape { height: cfg.height, width: cfg.width, got: s.to_vec() });
        }
        let (nv, nt) = (s[0], s[1]);
        if nt > cfg.max_frames {
            return Err(EncoderError::TooManyFrames { frames: nt, max: cfg.max_frames });
        }
        let (d, np) = (cfg.dim, cfg.num_patches());
        let flat = images.reshape(&[nv * nt, 3, cfg.height, cfg.width]).expect("same numel");
        let patches = self.embed_patches(p, tape, &flat)?.add_bcast(p[self.pos]);

        let register = p[self.frame_register].slice(0, 0, nt);
        let camera = tape
            .constant(Tensor::zeros(&[nv, nt, d]))
            .add_bcast(register)
            .add_bcast(p[self.camera_token])
            .reshape(&[nv * nt, 1, d]);
        let mut x = Var::concat(&[camera, patches], 1);
        let seq = np + 1;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.frame.forward(p, x);
            if cfg.cross_view {
                let g = x.reshape(&[nv, nt, seq, d]).permute(&[1, 0, 2, 3]).reshape(&[nt, nv * seq, d]);
                let g = layer.global.forward(p, g);
                x = g.reshape(&[nt, nv, seq, d]).permute(&[1, 0, 2, 3]).reshape(&[nv * nt, seq, d]);
            }
            layers.push(x.slice(1, 1, np).reshape(&[nv, nt, np, d]));
        }
        Ok(TokenSet { camera: x.slice(1, 0, 1).reshape(&[nv, nt, d]), layers })
    }
}

pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor, EncoderError> {
    let s = images.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(EncoderError::Divisibility { height: h, width: w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(b * gh * gw * dim);
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for y in 0..patch {
                        let row = ((bi * c + ci) * h + py * patch + y) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[b, gh * gw, dim], out).expect("sized"))
}
