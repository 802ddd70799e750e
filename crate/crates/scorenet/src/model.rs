//! The two-stage classifier.
//!
//! Stage one scores a cheap, downscaled view of the image: a small ViT
//! reads the low-resolution pixels, its summary token's attention row is
//! turned into a probability distribution over the patch grid, and a
//! noisy top-K selection picks the K most promising grid cells. Stage two
//! looks closely at only those K cells: each corresponding full-resolution
//! region runs through a local ViT, and the K region embeddings attend to
//! one another in a small coarse encoder with no positional encoding (the
//! regions form a set, not a grid). The final representation concatenates
//! the last `x` scorer summary tokens with the last `y` coarse summary
//! tokens; a linear head maps it to class logits.
//!
//! During training the selection stays differentiable: the soft indicator
//! matrix blends patches, so the classification loss reaches the scorer
//! through the selection itself. At inference the selection is hard and
//! the whole pass is deterministic.

use std::collections::BTreeMap;

use crate::encoder::{
    encode_token_matrix, encoder_forward, EncoderBinding, EncoderConfig,
    EncoderParams,
};
use crate::error::{Error, Result};
use crate::numerics::{GradStore, NodeId, RngStream, Tape, Tensor};
use crate::semantic::{semantic_from_attention, AggregationMode, HeadWeights, SemanticDistribution};
use crate::tiler;
use crate::topk::{hard_topk, perturbed_topk_node, TopKIndicators};

/// Whether a forward pass keeps the selection differentiable (soft
/// indicator blend) or commits to the K best patches (hard extraction).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Infer,
}

/// Full model shape. `scorer` reads the downscaled image at patch size
/// P_l; `local` reads full-resolution regions of side `patch_high` at its
/// own patch size; the coarse stage runs `coarse_depth` blocks over the K
/// region embeddings. `variant` = (x, y) picks how many scorer / coarse
/// summary tokens form the representation.
#[derive(Debug, Clone)]
pub struct ScoreNetConfig {
    pub scorer: EncoderConfig,
    pub local: EncoderConfig,
    pub coarse_depth: usize,
    pub downscale: usize,
    pub patch_high: usize,
    pub k: usize,
    pub variant: (usize, usize),
    pub sigma: f32,
    pub num_samples: usize,
    pub eval_samples: usize,
    pub num_classes: usize,
    pub channels: usize,
    /// Which summary token's attention row defines the patch distribution:
    /// 0 is the most recently appended one, 1 the one before it, and so on.
    pub cls_query_offset: usize,
    pub aggregation: AggregationMode,
}

impl ScoreNetConfig {
    /// Small configuration meant for CPU-scale experiments on 256x256
    /// inputs: 32-wide encoders, 8 selected regions of side 32.
    pub fn desk_default() -> Self {
        Self {
            scorer: EncoderConfig {
                embed_dim: 32,
                depth: 4,
                num_heads: 4,
                mlp_ratio: 2.0,
                patch_size: 4,
                num_pseudo_cls: 4,
            },
            local: EncoderConfig {
                embed_dim: 32,
                depth: 4,
                num_heads: 4,
                mlp_ratio: 2.0,
                patch_size: 4,
                num_pseudo_cls: 1,
            },
            coarse_depth: 2,
            downscale: 8,
            patch_high: 32,
            k: 8,
            variant: (4, 1),
            sigma: 0.05,
            num_samples: 100,
            eval_samples: 1000,
            num_classes: 4,
            channels: 3,
            cls_query_offset: 0,
            aggregation: AggregationMode::PreSoftmax,
        }
    }

    /// The coarse encoder is derived rather than configured: it inherits
    /// width, heads and MLP ratio from the local encoder, runs
    /// `coarse_depth` blocks, and appends y summary tokens.
    pub fn coarse_cfg(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.local.embed_dim,
            depth: self.coarse_depth,
            num_heads: self.local.num_heads,
            mlp_ratio: self.local.mlp_ratio,
            patch_size: 1,
            num_pseudo_cls: self.variant.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scorer.validate()?;
        self.local.validate()?;
        self.coarse_cfg().validate()?;
        if self.patch_high != self.downscale * self.scorer.patch_size {
            return Err(Error::config(format!(
                "patch_high {} must equal downscale {} times scorer patch size {}",
                self.patch_high, self.downscale, self.scorer.patch_size
            )));
        }
        if self.patch_high % self.local.patch_size != 0 {
            return Err(Error::config(format!(
                "patch_high {} not divisible by local patch size {}",
                self.patch_high, self.local.patch_size
            )));
        }
        let (x, y) = self.variant;
        if x == 0 {
            return Err(Error::config(
                "variant x must be at least 1: the representation always includes scorer summary tokens",
            ));
        }
        if x > self.scorer.num_pseudo_cls {
            return Err(Error::config(format!(
                "variant x {} exceeds scorer summary-token count {}",
                x, self.scorer.num_pseudo_cls
            )));
        }
        if y == 0 || y > self.coarse_depth {
            return Err(Error::config(format!(
                "variant y {} must lie in 1..=coarse_depth ({})",
                y, self.coarse_depth
            )));
        }
        if self.local.num_pseudo_cls != 1 {
            return Err(Error::config(
                "local encoder must produce exactly one summary token per region",
            ));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config("sigma must be finite and positive"));
        }
        if self.num_samples == 0 || self.eval_samples == 0 {
            return Err(Error::config("sample counts must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be at least 1"));
        }
        if self.cls_query_offset >= self.scorer.num_pseudo_cls {
            return Err(Error::config(format!(
                "cls_query_offset {} out of range for {} summary tokens",
                self.cls_query_offset, self.scorer.num_pseudo_cls
            )));
        }
        Ok(())
    }

    pub fn scorer_in_dim(&self) -> usize {
        self.channels * self.scorer.patch_size * self.scorer.patch_size
    }

    pub fn local_in_dim(&self) -> usize {
        self.channels * self.local.patch_size * self.local.patch_size
    }

    pub fn region_dim(&self) -> usize {
        self.channels * self.patch_high * self.patch_high
    }

    pub fn representation_dim(&self) -> usize {
        self.variant.0 * self.scorer.embed_dim + self.variant.1 * self.local.embed_dim
    }
}

/// All learnable state of the model.
#[derive(Debug, Clone)]
pub struct ScoreNetParams {
    pub scorer: EncoderParams,
    pub head_weights: HeadWeights,
    pub local: EncoderParams,
    pub coarse: EncoderParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ScoreNetParams {
    pub fn init(cfg: &ScoreNetConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let scorer = EncoderParams::init(&cfg.scorer, cfg.scorer_in_dim(), rng)?;
        let local = EncoderParams::init(&cfg.local, cfg.local_in_dim(), rng)?;
        let coarse = EncoderParams::init(&cfg.coarse_cfg(), cfg.local.embed_dim, rng)?;
        let rep = cfg.representation_dim();
        Ok(Self {
            scorer,
            head_weights: HeadWeights::zeros(cfg.scorer.num_heads),
            local,
            coarse,
            head_w: crate::encoder::trunc_normal(rep, cfg.num_classes, 0.02, rng),
            head_b: Tensor::zeros(&[cfg.num_classes]),
        })
    }

    pub fn zeros(cfg: &ScoreNetConfig) -> Result<Self> {
        let mut p = Self::init(cfg, &mut RngStream::new(0, 0))?;
        p.for_each_tensor_mut(|_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        Ok(p)
    }

    /// Visits every tensor with its checkpoint name, fixed order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Tensor)) {
        self.scorer.for_each_tensor(|n, t| f(&format!("scorer/{n}"), t));
        f("scorer/head_weights", &self.head_weights.logits);
        self.local.for_each_tensor(|n, t| f(&format!("local/{n}"), t));
        self.coarse.for_each_tensor(|n, t| f(&format!("coarse/{n}"), t));
        f("head/w", &self.head_w);
        f("head/b", &self.head_b);
    }

    /// Mutable variant of [`ScoreNetParams::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        self.scorer
            .for_each_tensor_mut(|n, t| f(&format!("scorer/{n}"), t));
        f("scorer/head_weights", &mut self.head_weights.logits);
        self.local
            .for_each_tensor_mut(|n, t| f(&format!("local/{n}"), t));
        self.coarse
            .for_each_tensor_mut(|n, t| f(&format!("coarse/{n}"), t));
        f("head/w", &mut self.head_w);
        f("head/b", &mut self.head_b);
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        self.for_each_tensor(|n, t| {
            map.insert(n.to_string(), t.clone());
        });
        map
    }

    pub fn from_named(map: &BTreeMap<String, Tensor>, cfg: &ScoreNetConfig) -> Result<Self> {
        let mut out = Self::zeros(cfg)?;
        let mut missing = Vec::new();
        out.for_each_tensor_mut(|name, t| match map.get(name) {
            Some(src) => *t = src.clone(),
            None => missing.push(name.to_string()),
        });
        if let Some(first) = missing.first() {
            return Err(Error::contract(format!(
                "checkpoint is missing {} tensor(s), first: {first}",
                missing.len()
            )));
        }
        out.validate(cfg)?;
        Ok(out)
    }

    pub fn validate(&self, cfg: &ScoreNetConfig) -> Result<()> {
        self.scorer.validate(&cfg.scorer, cfg.scorer_in_dim())?;
        self.head_weights.validate(cfg.scorer.num_heads)?;
        self.local.validate(&cfg.local, cfg.local_in_dim())?;
        self.coarse.validate(&cfg.coarse_cfg(), cfg.local.embed_dim)?;
        let rep = cfg.representation_dim();
        if self.head_w.shape() != [rep, cfg.num_classes] {
            return Err(Error::shape(format!(
                "head weight shape {:?}, expected [{rep}, {}]",
                self.head_w.shape(),
                cfg.num_classes
            )));
        }
        if self.head_b.shape() != [cfg.num_classes] {
            return Err(Error::shape(format!(
                "head bias shape {:?}, expected [{}]",
                self.head_b.shape(),
                cfg.num_classes
            )));
        }
        Ok(())
    }
}

/// Tape handles for all parameters, mirroring [`ScoreNetParams`].
#[derive(Debug, Clone)]
pub struct ScoreNetBinding {
    pub scorer: EncoderBinding,
    pub head_weights: NodeId,
    pub local: EncoderBinding,
    pub coarse: EncoderBinding,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

impl ScoreNetBinding {
    pub fn bind(tape: &mut Tape, params: &ScoreNetParams, tracked: bool) -> Self {
        let put = |tape: &mut Tape, t: &Tensor| {
            if tracked {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            scorer: EncoderBinding::bind(tape, &params.scorer, tracked),
            head_weights: put(tape, &params.head_weights.logits),
            local: EncoderBinding::bind(tape, &params.local, tracked),
            coarse: EncoderBinding::bind(tape, &params.coarse, tracked),
            head_w: put(tape, &params.head_w),
            head_b: put(tape, &params.head_b),
        }
    }

    /// Same names and order as [`ScoreNetParams::for_each_tensor`].
    pub fn for_each_node(&self, mut f: impl FnMut(&str, NodeId)) {
        self.scorer.for_each_node(|n, id| f(&format!("scorer/{n}"), id));
        f("scorer/head_weights", self.head_weights);
        self.local.for_each_node(|n, id| f(&format!("local/{n}"), id));
        self.coarse.for_each_node(|n, id| f(&format!("coarse/{n}"), id));
        f("head/w", self.head_w);
        f("head/b", self.head_b);
    }

    /// Accumulates this episode's parameter gradients into `acc` by name.
    /// Missing slots (parameters the loss never touched) contribute zero.
    pub fn accumulate_grads(
        &self,
        tape: &Tape,
        grads: &GradStore,
        acc: &mut BTreeMap<String, Vec<f64>>,
    ) {
        self.for_each_node(|name, id| {
            let len = tape.value(id).len();
            let slot = acc.entry(name.to_string()).or_insert_with(|| vec![0.0; len]);
            if let Some(g) = grads.get(id) {
                for (a, &v) in slot.iter_mut().zip(g) {
                    *a += v as f64;
                }
            }
        });
    }
}

/// Attention-pair counts actually incurred by one forward pass, counted
/// over patch tokens only (summary tokens excluded) and once per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StagePairCounts {
    pub scorer: u64,
    pub local: u64,
    pub coarse: u64,
}

impl StagePairCounts {
    pub fn total(&self) -> u64 {
        self.scorer + self.local + self.coarse
    }
}

/// Everything one forward pass produces and exposes.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub semantic: SemanticDistribution,
    pub indicators: TopKIndicators,
    /// Rank-ordered hard selection derived from `semantic`; equals the
    /// extraction in infer mode.
    pub selected_indices: Vec<usize>,
    pub representation: Tensor,
    pub logits: Tensor,
    /// Tape handles for differentiable consumers (loss, mixing).
    pub logits_node: NodeId,
    pub semantic_node: NodeId,
    pub representation_node: NodeId,
    pub pair_counts: StagePairCounts,
    pub scorer_grid: (usize, usize),
}

/// Stage one: downscale, score, and select.
pub struct Recommendation {
    pub semantic: SemanticDistribution,
    pub semantic_node: NodeId,
    pub scorer_cls: Vec<NodeId>,
    pub indicators: TopKIndicators,
    /// Soft indicator matrix on the tape; `None` for hard selection.
    pub indicator_node: Option<NodeId>,
    pub scorer_pairs: u64,
    pub grid: (usize, usize),
}

pub(crate) fn check_image(image: &Tensor, cfg: &ScoreNetConfig) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != cfg.channels {
        return Err(Error::shape(format!(
            "image has {c} channels, model expects {}",
            cfg.channels
        )));
    }
    if h % cfg.patch_high != 0 || w % cfg.patch_high != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} not divisible by region size {}",
            cfg.patch_high
        )));
    }
    Ok(())
}

/// Runs the scorer on the downscaled image and selects K regions.
/// In train mode the selection is the soft Monte Carlo indicator and
/// consumes randomness from `rng`; in infer mode it is the deterministic
/// hard top-K of the exported distribution.
pub fn recommend(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &ScoreNetConfig,
    bind: &ScoreNetBinding,
    mode: ForwardMode,
    rng: &mut RngStream,
) -> Result<Recommendation> {
    cfg.validate()?;
    check_image(image, cfg)?;
    let low = tiler::downscale(image, cfg.downscale)?;
    let out = encoder_forward(tape, &low, &cfg.scorer, &bind.scorer)?;
    let n = out.num_patches;
    let cls_index = n + cfg.scorer.num_pseudo_cls - 1 - cfg.cls_query_offset;
    let last_logits = out.attn_logits.last().expect("depth >= 1").clone();
    let last_post = out.attn.last().expect("depth >= 1").clone();
    let (semantic_node, semantic) = semantic_from_attention(
        tape,
        &last_logits,
        &last_post,
        n,
        cls_index,
        bind.head_weights,
        cfg.aggregation,
        out.grid,
    )?;
    let (indicators, indicator_node) = match mode {
        ForwardMode::Train => {
            let (node, ind) =
                perturbed_topk_node(tape, semantic_node, cfg.k, cfg.sigma, cfg.num_samples, rng)?;
            (ind, Some(node))
        }
        ForwardMode::Infer => (hard_topk(&semantic.probs, cfg.k)?, None),
    };
    Ok(Recommendation {
        semantic,
        semantic_node,
        scorer_cls: out.pseudo_cls,
        indicators,
        indicator_node,
        scorer_pairs: (n * n) as u64,
        grid: out.grid,
    })
}

/// Stage two over an extracted region matrix (a tape node of shape
/// [K, C*P_h*P_h]): per-region local encoding, then the coarse blocks over
/// the K region embeddings. Returns the coarse summary tokens plus the
/// actually-incurred patch-pair counts of both stages.
pub fn aggregate(
    tape: &mut Tape,
    regions: NodeId,
    cfg: &ScoreNetConfig,
    bind: &ScoreNetBinding,
) -> Result<(Vec<NodeId>, u64, u64)> {
    let shape = tape.shape(regions).to_vec();
    if shape.len() != 2 || shape[1] != cfg.region_dim() {
        return Err(Error::shape(format!(
            "region matrix has shape {shape:?}, expected [K, {}]",
            cfg.region_dim()
        )));
    }
    let k = shape[0];
    if k == 0 {
        return Err(Error::shape("aggregate needs at least one region"));
    }
    let perm = tiler::sub_patch_perm(cfg.channels, cfg.patch_high, cfg.local.patch_size)?;
    let g = cfg.patch_high / cfg.local.patch_size;
    let n_loc = g * g;
    let pe = tape.constant(crate::encoder::sincos_pe(g, g, cfg.local.embed_dim)?);

    let mut local_pairs = 0u64;
    let mut embeddings = Vec::with_capacity(k);
    for region in 0..k {
        let row = tape.slice_rows(regions, region, region + 1)?;
        let tokens = tape.permute_elements(row, &perm, &[n_loc, cfg.local_in_dim()])?;
        let embedded = tape.linear(tokens, bind.local.embed_w, bind.local.embed_b)?;
        let with_pe = tape.add(embedded, pe)?;
        let out = encode_token_matrix(tape, with_pe, n_loc, (g, g), &cfg.local, &bind.local)?;
        local_pairs += (out.num_patches * out.num_patches) as u64;
        embeddings.push(out.pseudo_cls[0]);
    }
    let stacked = tape.concat_rows(&embeddings)?;
    let projected = tape.linear(stacked, bind.coarse.embed_w, bind.coarse.embed_b)?;
    let coarse_cfg = cfg.coarse_cfg();
    let out = encode_token_matrix(tape, projected, k, (k, 1), &coarse_cfg, &bind.coarse)?;
    let coarse_pairs = (out.num_patches * out.num_patches) as u64;
    Ok((out.pseudo_cls, local_pairs, coarse_pairs))
}

fn head_logits(
    tape: &mut Tape,
    scorer_cls: &[NodeId],
    coarse_cls: &[NodeId],
    cfg: &ScoreNetConfig,
    bind: &ScoreNetBinding,
) -> Result<(NodeId, NodeId)> {
    let (x, y) = cfg.variant;
    let mut parts = Vec::with_capacity(x + y);
    parts.extend_from_slice(&scorer_cls[scorer_cls.len() - x..]);
    parts.extend_from_slice(&coarse_cls[coarse_cls.len() - y..]);
    let rep = tape.concat_cols(&parts)?;
    let logits_row = tape.linear(rep, bind.head_w, bind.head_b)?;
    let logits = tape.reshape(logits_row, &[cfg.num_classes])?;
    Ok((rep, logits))
}

/// One full pass. Train mode blends regions with the soft indicators so
/// gradients reach the scorer through the selection; infer mode extracts
/// the K best regions bit-exactly and uses no randomness.
pub fn forward(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &ScoreNetConfig,
    bind: &ScoreNetBinding,
    mode: ForwardMode,
    rng: &mut RngStream,
) -> Result<ForwardTrace> {
    let rec = recommend(tape, image, cfg, bind, mode, rng)?;
    let patches = tiler::tile_image(image, cfg.patch_high)?;
    let regions = match (mode, rec.indicator_node) {
        (ForwardMode::Train, Some(node)) => {
            let patches_node = tape.constant(patches);
            tape.matmul_tn(node, patches_node)?
        }
        _ => {
            let hard = tiler::extract_patches(&patches, &rec.indicators.y, tiler::ExtractMode::Hard)?;
            tape.constant(hard)
        }
    };
    let (coarse_cls, local_pairs, coarse_pairs) = aggregate(tape, regions, cfg, bind)?;
    let (rep_node, logits_node) = head_logits(tape, &rec.scorer_cls, &coarse_cls, cfg, bind)?;
    let selected_indices = crate::topk::hard_topk_indices(&rec.semantic.probs, cfg.k)?;
    Ok(ForwardTrace {
        semantic: rec.semantic,
        indicators: rec.indicators,
        selected_indices,
        representation: tape.value(rep_node).clone(),
        logits: tape.value(logits_node).clone(),
        logits_node,
        semantic_node: rec.semantic_node,
        representation_node: rep_node,
        pair_counts: StagePairCounts {
            scorer: rec.scorer_pairs,
            local: local_pairs,
            coarse: coarse_pairs,
        },
        scorer_grid: rec.grid,
    })
}

/// Test-time ablation: runs a hard forward but zeroes `floor(ratio * K)`
/// randomly chosen selected regions before the local stage.
pub fn mask_selected(
    image: &Tensor,
    cfg: &ScoreNetConfig,
    params: &ScoreNetParams,
    ratio: f32,
    rng: &mut RngStream,
) -> Result<ForwardTrace> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let mut tape = Tape::new();
    let bind = ScoreNetBinding::bind(&mut tape, params, false);
    let rec = recommend(&mut tape, image, cfg, &bind, ForwardMode::Infer, rng)?;
    let patches = tiler::tile_image(image, cfg.patch_high)?;
    let mut regions =
        tiler::extract_patches(&patches, &rec.indicators.y, tiler::ExtractMode::Hard)?;
    let k = rec.indicators.k();
    let masked = (ratio as f64 * k as f64).floor() as usize;
    let mut order: Vec<usize> = (0..k).collect();
    rng.shuffle(&mut order);
    let dim = cfg.region_dim();
    for &slot in order.iter().take(masked) {
        regions.data_mut()[slot * dim..(slot + 1) * dim].fill(0.0);
    }
    let regions = tape.constant(regions);
    let (coarse_cls, local_pairs, coarse_pairs) = aggregate(&mut tape, regions, cfg, &bind)?;
    let (rep_node, logits_node) = head_logits(&mut tape, &rec.scorer_cls, &coarse_cls, cfg, &bind)?;
    let selected_indices = crate::topk::hard_topk_indices(&rec.semantic.probs, cfg.k)?;
    Ok(ForwardTrace {
        semantic: rec.semantic,
        indicators: rec.indicators,
        selected_indices,
        representation: tape.value(rep_node).clone(),
        logits: tape.value(logits_node).clone(),
        logits_node,
        semantic_node: rec.semantic_node,
        representation_node: rep_node,
        pair_counts: StagePairCounts {
            scorer: rec.scorer_pairs,
            local: local_pairs,
            coarse: coarse_pairs,
        },
        scorer_grid: rec.grid,
    })
}

/// Randomly permutes the region-sized blocks of a full-resolution image
/// (region size = downscale * scorer patch size, so low-res patches and
/// their high-res counterparts move together). Returns the permuted image
/// and the permutation: block at grid slot i came from slot perm[i].
pub fn permute_lowres(
    image: &Tensor,
    cfg: &ScoreNetConfig,
    rng: &mut RngStream,
) -> Result<(Tensor, Vec<usize>)> {
    check_image(image, cfg)?;
    let (c, h, w) = image.dims3()?;
    let patches = tiler::tile_image(image, cfg.patch_high)?;
    let (n, dim) = (patches.shape()[0], patches.shape()[1]);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let mut out = vec![0.0f32; n * dim];
    for (dst, &src) in perm.iter().enumerate() {
        out[dst * dim..(dst + 1) * dim].copy_from_slice(patches.row(src));
    }
    let shuffled = Tensor::new(&[n, dim], out)?;
    let img = tiler::untile_image(&shuffled, c, h, w, cfg.patch_high)?;
    Ok((img, perm))
}
