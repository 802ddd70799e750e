//! Compact vision-transformer encoder.
//!
//! An image is cut into non-overlapping patches, each patch is linearly
//! embedded, a fixed 2-D sine/cosine positional encoding is added, and the
//! token matrix runs through `depth` pre-norm transformer blocks
//! (LayerNorm, multi-head self-attention, residual, LayerNorm, MLP with
//! GELU, residual). Starting `num_pseudo_cls` layers before the end, one
//! pooled summary token (a "pseudo-CLS": the mean of the patch tokens at
//! that point) is appended to the sequence before each remaining block, so
//! it attends to the patches in every subsequent layer. Every head's
//! attention matrix is exported per layer, both before and after the
//! row softmax, which is what downstream consumers of the attention
//! structure read.
//!
//! Token matrices live on a [`Tape`], so every output is differentiable
//! with respect to both the input image and all parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, RngStream, Tape, Tensor};
use crate::tiler;

/// LayerNorm variance floor shared by every block in the crate.
pub const LN_EPS: f32 = 1e-5;

/// Shape of one encoder: width, depth, heads, MLP expansion, patch size,
/// and how many pooled summary tokens it appends near the end.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f32,
    pub patch_size: usize,
    pub num_pseudo_cls: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.depth == 0 || self.num_heads == 0 {
            return Err(Error::config("embed_dim, depth and num_heads must be positive"));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be positive"));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(Error::config("mlp_ratio must be finite and positive"));
        }
        if self.hidden_dim() == 0 {
            return Err(Error::config("mlp_ratio too small: hidden dim rounds to zero"));
        }
        if self.num_pseudo_cls == 0 || self.num_pseudo_cls > self.depth {
            return Err(Error::config(format!(
                "num_pseudo_cls {} must lie in 1..=depth ({})",
                self.num_pseudo_cls, self.depth
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio as f64).round() as usize
    }
}

/// Learnable tensors of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Learnable tensors of one encoder: the patch embedding plus all blocks.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub blocks: Vec<BlockParams>,
}

/// Normal weights with truncation at two sigma (resampled, so a fixed
/// seed still yields one deterministic sequence).
pub(crate) fn trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Tensor {
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| {
            let mut z = rng.normal_f64();
            while z.abs() > 2.0 {
                z = rng.normal_f64();
            }
            (z * std) as f32
        })
        .collect();
    Tensor::new(&[rows, cols], data).expect("weight shape")
}

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

impl EncoderParams {
    /// Random initialization: Xavier-scale truncated normals, zero biases,
    /// unit LayerNorm gains. The projections that feed the residual stream
    /// (attention output, second MLP matrix) are shrunk by sqrt(2*depth)
    /// so the stream stays near the embedded tokens at any depth; the
    /// training recipe has no warmup phase to absorb an early blowup.
    pub fn init(cfg: &EncoderConfig, in_dim: usize, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        if in_dim == 0 {
            return Err(Error::config("token input dimension must be positive"));
        }
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim();
        let residual_shrink = (2.0 * cfg.depth as f64).sqrt();
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1_g: Tensor::full(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq: trunc_normal(d, d, xavier_std(d, d), rng),
                bq: Tensor::zeros(&[d]),
                wk: trunc_normal(d, d, xavier_std(d, d), rng),
                bk: Tensor::zeros(&[d]),
                wv: trunc_normal(d, d, xavier_std(d, d), rng),
                bv: Tensor::zeros(&[d]),
                wo: trunc_normal(d, d, xavier_std(d, d) / residual_shrink, rng),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w1: trunc_normal(d, h, xavier_std(d, h), rng),
                b1: Tensor::zeros(&[h]),
                w2: trunc_normal(h, d, xavier_std(h, d) / residual_shrink, rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            embed_w: trunc_normal(in_dim, d, xavier_std(in_dim, d), rng),
            embed_b: Tensor::zeros(&[d]),
            blocks,
        })
    }

    /// Every tensor zero, LayerNorm gains included. With these parameters
    /// each block is an exact identity map, which several tests exploit.
    pub fn zeros(cfg: &EncoderConfig, in_dim: usize) -> Result<Self> {
        let mut p = Self::init(cfg, in_dim, &mut RngStream::new(0, 0))?;
        p.for_each_tensor_mut(|_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        Ok(p)
    }

    /// Visits every tensor in a fixed order with its relative name.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("embed_w", &self.embed_w);
        f("embed_b", &self.embed_b);
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in block_fields(b) {
                f(&format!("block{i}/{suffix}"), t);
            }
        }
    }

    /// Mutable variant of [`EncoderParams::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("embed_w", &mut self.embed_w);
        f("embed_b", &mut self.embed_b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in block_fields_mut(b) {
                f(&format!("block{i}/{suffix}"), t);
            }
        }
    }

    /// Copies every tensor into `map` under `prefix` + relative name.
    pub fn insert_named(&self, prefix: &str, map: &mut BTreeMap<String, Tensor>) {
        self.for_each_tensor(|name, t| {
            map.insert(format!("{prefix}{name}"), t.clone());
        });
    }

    /// Rebuilds parameters from a named-tensor map, checking that every
    /// expected entry exists and has the shape `cfg`/`in_dim` demand.
    pub fn from_named(
        prefix: &str,
        map: &BTreeMap<String, Tensor>,
        cfg: &EncoderConfig,
        in_dim: usize,
    ) -> Result<Self> {
        let mut out = Self::zeros(cfg, in_dim)?;
        let mut missing = Vec::new();
        out.for_each_tensor_mut(|name, t| {
            let key = format!("{prefix}{name}");
            match map.get(&key) {
                Some(src) => *t = src.clone(),
                None => missing.push(key),
            }
        });
        if let Some(first) = missing.first() {
            return Err(Error::contract(format!(
                "checkpoint is missing {} tensor(s), first: {first}",
                missing.len()
            )));
        }
        out.validate(cfg, in_dim)?;
        Ok(out)
    }

    /// Checks every tensor shape against the configuration.
    pub fn validate(&self, cfg: &EncoderConfig, in_dim: usize) -> Result<()> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim();
        if self.blocks.len() != cfg.depth {
            return Err(Error::shape(format!(
                "expected {} blocks, found {}",
                cfg.depth,
                self.blocks.len()
            )));
        }
        let mut bad = None;
        self.for_each_tensor(|name, t| {
            if bad.is_some() {
                return;
            }
            let leaf = name.rsplit('/').next().unwrap_or(name);
            let want: Vec<usize> = match leaf {
                "embed_w" => vec![in_dim, d],
                "wq" | "wk" | "wv" | "wo" => vec![d, d],
                "w1" => vec![d, h],
                "w2" => vec![h, d],
                "b1" => vec![h],
                _ => vec![d],
            };
            if t.shape() != want.as_slice() {
                bad = Some(format!(
                    "parameter {name} has shape {:?}, expected {want:?}",
                    t.shape()
                ));
            }
        });
        match bad {
            Some(msg) => Err(Error::shape(msg)),
            None => Ok(()),
        }
    }
}

fn block_fields(b: &BlockParams) -> [(&'static str, &Tensor); 16] {
    [
        ("ln1_g", &b.ln1_g),
        ("ln1_b", &b.ln1_b),
        ("wq", &b.wq),
        ("bq", &b.bq),
        ("wk", &b.wk),
        ("bk", &b.bk),
        ("wv", &b.wv),
        ("bv", &b.bv),
        ("wo", &b.wo),
        ("bo", &b.bo),
        ("ln2_g", &b.ln2_g),
        ("ln2_b", &b.ln2_b),
        ("w1", &b.w1),
        ("b1", &b.b1),
        ("w2", &b.w2),
        ("b2", &b.b2),
    ]
}

fn block_fields_mut(b: &mut BlockParams) -> [(&'static str, &mut Tensor); 16] {
    [
        ("ln1_g", &mut b.ln1_g),
        ("ln1_b", &mut b.ln1_b),
        ("wq", &mut b.wq),
        ("bq", &mut b.bq),
        ("wk", &mut b.wk),
        ("bk", &mut b.bk),
        ("wv", &mut b.wv),
        ("bv", &mut b.bv),
        ("wo", &mut b.wo),
        ("bo", &mut b.bo),
        ("ln2_g", &mut b.ln2_g),
        ("ln2_b", &mut b.ln2_b),
        ("w1", &mut b.w1),
        ("b1", &mut b.b1),
        ("w2", &mut b.w2),
        ("b2", &mut b.b2),
    ]
}

/// Tape handles for one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Tape handles for a whole encoder's parameters. Binding as leaves makes
/// the forward differentiable with respect to them; binding as constants
/// skips all backward bookkeeping.
#[derive(Debug, Clone)]
pub struct EncoderBinding {
    pub embed_w: NodeId,
    pub embed_b: NodeId,
    pub blocks: Vec<BlockNodes>,
}

impl EncoderBinding {
    pub fn bind(tape: &mut Tape, params: &EncoderParams, tracked: bool) -> Self {
        let put = |tape: &mut Tape, t: &Tensor| {
            if tracked {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            embed_w: put(tape, &params.embed_w),
            embed_b: put(tape, &params.embed_b),
            blocks: params
                .blocks
                .iter()
                .map(|b| BlockNodes {
                    ln1_g: put(tape, &b.ln1_g),
                    ln1_b: put(tape, &b.ln1_b),
                    wq: put(tape, &b.wq),
                    bq: put(tape, &b.bq),
                    wk: put(tape, &b.wk),
                    bk: put(tape, &b.bk),
                    wv: put(tape, &b.wv),
                    bv: put(tape, &b.bv),
                    wo: put(tape, &b.wo),
                    bo: put(tape, &b.bo),
                    ln2_g: put(tape, &b.ln2_g),
                    ln2_b: put(tape, &b.ln2_b),
                    w1: put(tape, &b.w1),
                    b1: put(tape, &b.b1),
                    w2: put(tape, &b.w2),
                    b2: put(tape, &b.b2),
                })
                .collect(),
        }
    }

    /// Visits every parameter node with the same relative names and order
    /// as [`EncoderParams::for_each_tensor`], so gradients collected here
    /// line up one-to-one with the tensors they belong to.
    pub fn for_each_node(&self, mut f: impl FnMut(&str, NodeId)) {
        f("embed_w", self.embed_w);
        f("embed_b", self.embed_b);
        for (i, b) in self.blocks.iter().enumerate() {
            let fields: [(&'static str, NodeId); 16] = [
                ("ln1_g", b.ln1_g),
                ("ln1_b", b.ln1_b),
                ("wq", b.wq),
                ("bq", b.bq),
                ("wk", b.wk),
                ("bk", b.bk),
                ("wv", b.wv),
                ("bv", b.bv),
                ("wo", b.wo),
                ("bo", b.bo),
                ("ln2_g", b.ln2_g),
                ("ln2_b", b.ln2_b),
                ("w1", b.w1),
                ("b1", b.b1),
                ("w2", b.w2),
                ("b2", b.b2),
            ];
            for (suffix, id) in fields {
                f(&format!("block{i}/{suffix}"), id);
            }
        }
    }
}

/// Result of one encoder pass. `tokens` is the full (N+m) x d matrix after
/// the final block; `pseudo_cls` are its last m rows in append order (the
/// last entry is the most recently appended token). `attn` holds each
/// layer's per-head attention after the row softmax, `attn_logits` the
/// same matrices before it.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub tokens: NodeId,
    pub pseudo_cls: Vec<NodeId>,
    pub attn: Vec<Vec<NodeId>>,
    pub attn_logits: Vec<Vec<NodeId>>,
    pub num_patches: usize,
    pub grid: (usize, usize),
}

/// Cuts an image into flattened patch rows plus the patch-grid dims.
/// Row i holds the patch at (i / (W/P), i mod (W/P)), channel-major and
/// raster-ordered within each channel, so the cut is exactly invertible.
pub fn patchify(image: &Tensor, p: usize) -> Result<(Tensor, (usize, usize))> {
    let (_, h, w) = image.dims3()?;
    let grid = tiler::grid_dims(h, w, p)?;
    let tokens = tiler::tile_image(image, p)?;
    Ok((tokens, grid))
}

/// Fixed 2-D sine/cosine positional encoding for a gh x gw grid.
///
/// The first d/2 channels encode the row index, the last d/2 the column
/// index. Within each half, channels alternate sin/cos over frequencies
/// that decay geometrically with base 10000, so position 0 maps to 0 on
/// every sin channel and 1 on every cos channel.
pub fn sincos_pe(gh: usize, gw: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::config(format!(
            "positional encoding needs embed_dim divisible by 4, got {d}"
        )));
    }
    if gh == 0 || gw == 0 {
        return Err(Error::shape("positional grid dims must be positive"));
    }
    let half = d / 2;
    let pairs = half / 2;
    let mut data = vec![0.0f32; gh * gw * d];
    for r in 0..gh {
        for c in 0..gw {
            let row = &mut data[(r * gw + c) * d..(r * gw + c + 1) * d];
            for t in 0..pairs {
                let freq = (10000f64).powf(-(t as f64) / pairs as f64);
                let (sr, cr) = (r as f64 * freq).sin_cos();
                let (sc, cc) = (c as f64 * freq).sin_cos();
                row[2 * t] = sr as f32;
                row[2 * t + 1] = cr as f32;
                row[half + 2 * t] = sc as f32;
                row[half + 2 * t + 1] = cc as f32;
            }
        }
    }
    Tensor::new(&[gh * gw, d], data)
}

fn check_param_shapes(
    tape: &Tape,
    cfg: &EncoderConfig,
    bind: &EncoderBinding,
    in_dim: Option<usize>,
) -> Result<()> {
    cfg.validate()?;
    if bind.blocks.len() != cfg.depth {
        return Err(Error::shape(format!(
            "expected {} bound blocks, found {}",
            cfg.depth,
            bind.blocks.len()
        )));
    }
    let d = cfg.embed_dim;
    let h = cfg.hidden_dim();
    let mut bad = None;
    bind.for_each_node(|name, id| {
        if bad.is_some() {
            return;
        }
        let leaf = name.rsplit('/').next().unwrap_or(name);
        let want: Vec<usize> = match leaf {
            "embed_w" => match in_dim {
                Some(n) => vec![n, d],
                None => return,
            },
            "embed_b" => {
                if in_dim.is_none() {
                    return;
                }
                vec![d]
            }
            "wq" | "wk" | "wv" | "wo" => vec![d, d],
            "w1" => vec![d, h],
            "w2" => vec![h, d],
            "b1" => vec![h],
            _ => vec![d],
        };
        let got = tape.shape(id);
        if got != want.as_slice() {
            bad = Some(format!("parameter {name} has shape {got:?}, expected {want:?}"));
        }
    });
    match bad {
        Some(msg) => Err(Error::shape(msg)),
        None => Ok(()),
    }
}

/// Full image pass: patchify, embed, add the positional encoding, then run
/// the transformer stack.
pub fn encoder_forward(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &EncoderConfig,
    bind: &EncoderBinding,
) -> Result<EncoderOutput> {
    let (ch, _, _) = image.dims3()?;
    let (patches, grid) = patchify(image, cfg.patch_size)?;
    let in_dim = ch * cfg.patch_size * cfg.patch_size;
    check_param_shapes(tape, cfg, bind, Some(in_dim))?;
    let n = grid.0 * grid.1;
    let x = tape.constant(patches);
    let embedded = tape.linear(x, bind.embed_w, bind.embed_b)?;
    let pe = tape.constant(sincos_pe(grid.0, grid.1, cfg.embed_dim)?);
    let with_pe = tape.add(embedded, pe)?;
    encode_token_matrix(tape, with_pe, n, grid, cfg, bind)
}

/// Runs the transformer stack over an already-embedded token matrix
/// (shape [n, d]). No positional encoding is added here, which is exactly
/// what set-valued inputs such as the coarse stage's region embeddings
/// need. The first `num_patches` rows are treated as patch tokens for
/// summary pooling; the pooled tokens appended near the end never feed
/// back into later pools.
pub fn encode_token_matrix(
    tape: &mut Tape,
    tokens: NodeId,
    num_patches: usize,
    grid: (usize, usize),
    cfg: &EncoderConfig,
    bind: &EncoderBinding,
) -> Result<EncoderOutput> {
    check_param_shapes(tape, cfg, bind, None)?;
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != num_patches || shape[1] != cfg.embed_dim {
        return Err(Error::shape(format!(
            "token matrix has shape {shape:?}, expected [{num_patches}, {}]",
            cfg.embed_dim
        )));
    }
    if num_patches == 0 {
        return Err(Error::shape("encoder needs at least one token"));
    }
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let first_append = cfg.depth - cfg.num_pseudo_cls;

    let mut x = tokens;
    let mut attn = Vec::with_capacity(cfg.depth);
    let mut attn_logits = Vec::with_capacity(cfg.depth);
    for (layer, b) in bind.blocks.iter().enumerate() {
        if layer >= first_append {
            let patch_rows = tape.slice_rows(x, 0, num_patches)?;
            let pooled = tape.mean_rows(patch_rows)?;
            let pooled_row = tape.reshape(pooled, &[1, d])?;
            x = tape.concat_rows(&[x, pooled_row])?;
        }
        let h1 = tape.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
        let q = tape.linear(h1, b.wq, b.bq)?;
        let k = tape.linear(h1, b.wk, b.bk)?;
        let v = tape.linear(h1, b.wv, b.bv)?;
        let mut layer_attn = Vec::with_capacity(cfg.num_heads);
        let mut layer_logits = Vec::with_capacity(cfg.num_heads);
        let mut head_outs = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let raw = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(raw, scale);
            let a = tape.softmax(logits, 1)?;
            head_outs.push(tape.matmul(a, vh)?);
            layer_logits.push(logits);
            layer_attn.push(a);
        }
        let merged = tape.concat_cols(&head_outs)?;
        let attended = tape.linear(merged, b.wo, b.bo)?;
        x = tape.add(x, attended)?;
        let h2 = tape.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS)?;
        let pre = tape.linear(h2, b.w1, b.b1)?;
        let act = tape.gelu(pre);
        let mlp = tape.linear(act, b.w2, b.b2)?;
        x = tape.add(x, mlp)?;
        attn.push(layer_attn);
        attn_logits.push(layer_logits);
    }

    let pseudo_cls = (0..cfg.num_pseudo_cls)
        .map(|kk| tape.slice_rows(x, num_patches + kk, num_patches + kk + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncoderOutput {
        tokens: x,
        pseudo_cls,
        attn,
        attn_logits,
        num_patches,
        grid,
    })
}
