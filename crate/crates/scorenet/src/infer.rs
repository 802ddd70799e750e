//! Tape-free inference.
//!
//! The autodiff tape pays for gradient bookkeeping on every node, which
//! is wasted work when only the forward value is needed. This module
//! re-implements the forward pass over plain buffers with blocked
//! attention: scores for a small strip of queries are materialized,
//! normalized, and contracted against the values before the next strip,
//! so the full attention matrix never exists in memory. That bound is
//! what makes full-resolution baseline transformers runnable at all.
//!
//! A plain single-scale transformer classifier over full-resolution
//! patches lives here too, as the throughput comparison baseline.

use crate::encoder::{patchify, sincos_pe, EncoderConfig, EncoderParams, LN_EPS};
use crate::error::{Error, Result};
use crate::model::{check_image, ScoreNetConfig, ScoreNetParams, StagePairCounts};
use crate::numerics::kernels::{
    add_bias_rows, gelu, layer_norm_rows, matmul, softmax_slice_inplace,
};
use crate::numerics::{RngStream, Tensor};
use crate::semantic::{AggregationMode, SemanticDistribution};
use crate::tiler;
use crate::topk::hard_topk_indices;

/// Queries are processed four at a time so every loaded key and value row
/// feeds four accumulators; scores for the block live in four row buffers
/// that are walked in tiles small enough to stay cache resident.
const QUERY_LANES: usize = 4;
const COL_TILE: usize = 2048;

/// Encoder output without tape nodes.
pub struct FastEncoded {
    /// Final token matrix, [rows, d] row-major.
    pub tokens: Vec<f32>,
    pub rows: usize,
    /// Summary tokens in append order, each of length d.
    pub pseudo_cls: Vec<Vec<f32>>,
    /// Captured per-head scaled attention logits of the requested query
    /// row at the final block, restricted to patch columns.
    pub cls_pre_rows: Vec<Vec<f32>>,
    /// Same rows after the softmax, restricted to patch columns.
    pub cls_post_rows: Vec<Vec<f32>>,
    pub pairs: u64,
}

fn linear_into(
    out: &mut Vec<f32>,
    x: &[f32],
    w: &Tensor,
    b: &Tensor,
    rows: usize,
    in_dim: usize,
    out_dim: usize,
) {
    out.resize(rows * out_dim, 0.0);
    matmul(out, x, w.data(), rows, in_dim, out_dim, false, false, false);
    add_bias_rows(out, b.data(), rows, out_dim);
}

/// Runs the transformer blocks over an already-embedded token matrix,
/// mirroring the tape encoder: one summary token is appended before each
/// of the last `num_pseudo_cls` blocks, summary tokens receive no
/// positional code, and attention normalizes over every token while the
/// appended summaries are seeded with the mean of the patch tokens only.
pub fn encode_tokens_fast(
    tokens: Vec<f32>,
    num_patches: usize,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    capture_cls: Option<usize>,
) -> Result<FastEncoded> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    if tokens.len() != num_patches * d {
        return Err(Error::shape(format!(
            "token buffer holds {} values, expected {num_patches}x{d}",
            tokens.len()
        )));
    }
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let hidden = cfg.hidden_dim();
    let scale = 1.0 / (dh as f32).sqrt();

    let mut x = tokens;
    let mut rows = num_patches;
    let mut pseudo_cls: Vec<Vec<f32>> = Vec::with_capacity(cfg.num_pseudo_cls);
    let mut cls_pre_rows = Vec::new();
    let mut cls_post_rows = Vec::new();

    let mut normed = vec![0f32; 0];
    let mut q = vec![0f32; 0];
    let mut k = vec![0f32; 0];
    let mut v = vec![0f32; 0];
    let mut kt_head = vec![0f32; 0];
    let mut v_head = vec![0f32; 0];
    let mut scores = vec![0f32; 0];
    let mut ctx = vec![0f32; 0];
    let mut proj = vec![0f32; 0];
    let mut mlp_hidden = vec![0f32; 0];

    for (layer, block) in params.blocks.iter().enumerate() {
        if layer + cfg.num_pseudo_cls >= cfg.depth {
            let mut mean = vec![0f64; d];
            for r in 0..num_patches {
                for (m, &val) in mean.iter_mut().zip(&x[r * d..(r + 1) * d]) {
                    *m += val as f64;
                }
            }
            let cls: Vec<f32> = mean.iter().map(|&m| (m / num_patches as f64) as f32).collect();
            x.extend_from_slice(&cls);
            rows += 1;
        }
        let capture_here = match capture_cls {
            Some(idx) if layer + 1 == cfg.depth => {
                if idx < num_patches || idx >= rows {
                    return Err(Error::contract(format!(
                        "capture row {idx} is not a summary row (patches {num_patches}, rows {rows})"
                    )));
                }
                Some(idx)
            }
            _ => None,
        };

        normed.resize(rows * d, 0.0);
        layer_norm_rows(&mut normed, &x, block.ln1_g.data(), block.ln1_b.data(), rows, d, LN_EPS);
        linear_into(&mut q, &normed, &block.wq, &block.bq, rows, d, d);
        linear_into(&mut k, &normed, &block.wk, &block.bk, rows, d, d);
        linear_into(&mut v, &normed, &block.wv, &block.bv, rows, d, d);

        ctx.clear();
        ctx.resize(rows * d, 0.0);
        kt_head.resize(dh * rows, 0.0);
        v_head.resize(rows * dh, 0.0);
        scores.clear();
        scores.resize(QUERY_LANES * rows, 0.0);
        let mut acc = vec![0f32; QUERY_LANES * dh];
        for h in 0..heads {
            let col = h * dh;
            for r in 0..rows {
                for j in 0..dh {
                    kt_head[j * rows + r] = k[r * d + col + j];
                }
                v_head[r * dh..(r + 1) * dh].copy_from_slice(&v[r * d + col..r * d + col + dh]);
            }
            let mut block_start = 0;
            while block_start < rows {
                let live = QUERY_LANES.min(rows - block_start);
                // Lanes past the end recompute the last live row; their
                // results are discarded on writeback.
                let lane_row = |lane: usize| block_start + lane.min(live - 1);

                let (s0, rest) = scores.split_at_mut(rows);
                let (s1, rest) = rest.split_at_mut(rows);
                let (s2, s3) = rest.split_at_mut(rows);
                let mut a = vec![0f32; dh * QUERY_LANES];
                for (j, aj) in a.chunks_exact_mut(QUERY_LANES).enumerate() {
                    for (lane, av) in aj.iter_mut().enumerate() {
                        *av = q[lane_row(lane) * d + col + j] * scale;
                    }
                }
                let mut tile_start = 0;
                while tile_start < rows {
                    let tile = COL_TILE.min(rows - tile_start);
                    let t0 = &mut s0[tile_start..tile_start + tile];
                    let t1 = &mut s1[tile_start..tile_start + tile];
                    let t2 = &mut s2[tile_start..tile_start + tile];
                    let t3 = &mut s3[tile_start..tile_start + tile];
                    t0.fill(0.0);
                    t1.fill(0.0);
                    t2.fill(0.0);
                    t3.fill(0.0);
                    for (j, aj) in a.chunks_exact(QUERY_LANES).enumerate() {
                        let kt = &kt_head[j * rows + tile_start..j * rows + tile_start + tile];
                        for (((v0, v1), (v2, v3)), &kv) in t0
                            .iter_mut()
                            .zip(t1.iter_mut())
                            .zip(t2.iter_mut().zip(t3.iter_mut()))
                            .zip(kt)
                        {
                            *v0 += aj[0] * kv;
                            *v1 += aj[1] * kv;
                            *v2 += aj[2] * kv;
                            *v3 += aj[3] * kv;
                        }
                    }
                    tile_start += tile;
                }

                let mut lanes: [&mut [f32]; QUERY_LANES] = [s0, s1, s2, s3];
                if let Some(idx) = capture_here {
                    if idx >= block_start && idx < block_start + live {
                        cls_pre_rows.push(lanes[idx - block_start][..num_patches].to_vec());
                    }
                }
                for lane in lanes.iter_mut().take(live) {
                    softmax_slice_inplace(lane);
                }
                if let Some(idx) = capture_here {
                    if idx >= block_start && idx < block_start + live {
                        cls_post_rows.push(lanes[idx - block_start][..num_patches].to_vec());
                    }
                }

                acc.fill(0.0);
                let [s0, s1, s2, s3] = lanes;
                for (j, vrow) in v_head.chunks_exact(dh).enumerate() {
                    let p = [s0[j], s1[j], s2[j], s3[j]];
                    for (lane, &pl) in p.iter().enumerate().take(live) {
                        let arow = &mut acc[lane * dh..(lane + 1) * dh];
                        for (av, &vv) in arow.iter_mut().zip(vrow) {
                            *av += pl * vv;
                        }
                    }
                }
                for lane in 0..live {
                    let r = block_start + lane;
                    ctx[r * d + col..r * d + col + dh]
                        .copy_from_slice(&acc[lane * dh..(lane + 1) * dh]);
                }
                block_start += live;
            }
        }
        linear_into(&mut proj, &ctx, &block.wo, &block.bo, rows, d, d);
        for (xv, &pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }

        layer_norm_rows(&mut normed, &x, block.ln2_g.data(), block.ln2_b.data(), rows, d, LN_EPS);
        linear_into(&mut mlp_hidden, &normed, &block.w1, &block.b1, rows, d, hidden);
        for hv in mlp_hidden.iter_mut() {
            *hv = gelu(*hv);
        }
        linear_into(&mut proj, &mlp_hidden, &block.w2, &block.b2, rows, hidden, d);
        for (xv, &pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }
    }

    for i in 0..cfg.num_pseudo_cls {
        let r = num_patches + i;
        pseudo_cls.push(x[r * d..(r + 1) * d].to_vec());
    }
    Ok(FastEncoded {
        tokens: x,
        rows,
        pseudo_cls,
        cls_pre_rows,
        cls_post_rows,
        pairs: (num_patches * num_patches) as u64,
    })
}

fn add_positional(tokens: &mut [f32], pe: &Tensor) {
    for (t, &p) in tokens.iter_mut().zip(pe.data()) {
        *t += p;
    }
}

/// Stage-one result of the tape-free path.
pub struct FastRecommendation {
    pub semantic: SemanticDistribution,
    pub scorer_cls: Vec<Vec<f32>>,
    pub scorer_pairs: u64,
    pub grid: (usize, usize),
}

/// Downscales, runs the scorer, and aggregates the summary token's final
/// attention row into the patch distribution with the learned head
/// weights.
pub fn infer_semantic(
    image: &Tensor,
    cfg: &ScoreNetConfig,
    params: &ScoreNetParams,
) -> Result<FastRecommendation> {
    cfg.validate()?;
    check_image(image, cfg)?;
    let low = tiler::downscale(image, cfg.downscale)?;
    let (patches, grid) = patchify(&low, cfg.scorer.patch_size)?;
    let n = grid.0 * grid.1;
    let d = cfg.scorer.embed_dim;

    let mut tokens = vec![0f32; 0];
    linear_into(
        &mut tokens,
        patches.data(),
        &params.scorer.embed_w,
        &params.scorer.embed_b,
        n,
        cfg.scorer_in_dim(),
        d,
    );
    add_positional(&mut tokens, &sincos_pe(grid.0, grid.1, d)?);

    let cls_index = n + cfg.scorer.num_pseudo_cls - 1 - cfg.cls_query_offset;
    let enc = encode_tokens_fast(tokens, n, &cfg.scorer, &params.scorer, Some(cls_index))?;

    let mut weights = params.head_weights.logits.data().to_vec();
    softmax_slice_inplace(&mut weights);
    let rows = match cfg.aggregation {
        AggregationMode::PreSoftmax => &enc.cls_pre_rows,
        AggregationMode::PostSoftmax => &enc.cls_post_rows,
    };
    if rows.len() != weights.len() {
        return Err(Error::shape(format!(
            "captured {} head rows but have {} head weights",
            rows.len(),
            weights.len()
        )));
    }
    let mut agg = vec![0f32; n];
    for (row, &wgt) in rows.iter().zip(&weights) {
        for (a, &r) in agg.iter_mut().zip(row) {
            *a += wgt * r;
        }
    }
    match cfg.aggregation {
        AggregationMode::PreSoftmax => softmax_slice_inplace(&mut agg),
        AggregationMode::PostSoftmax => {
            let total: f64 = agg.iter().map(|&a| a as f64).sum();
            if total <= 0.0 || !total.is_finite() {
                return Err(Error::numeric(format!(
                    "attention mass {total} cannot be normalized"
                )));
            }
            let inv = (1.0 / total) as f32;
            for a in agg.iter_mut() {
                *a *= inv;
            }
        }
    }
    let semantic = SemanticDistribution { probs: agg, gh: grid.0, gw: grid.1 };
    semantic.validate()?;
    Ok(FastRecommendation {
        semantic,
        scorer_cls: enc.pseudo_cls,
        scorer_pairs: enc.pairs,
        grid,
    })
}

/// Full inference result.
pub struct InferTrace {
    pub semantic: SemanticDistribution,
    pub selected: Vec<usize>,
    pub representation: Vec<f32>,
    pub logits: Vec<f32>,
    pub pair_counts: StagePairCounts,
    pub scorer_grid: (usize, usize),
}

/// End-to-end tape-free forward: recommend, extract the top K regions,
/// encode each locally, aggregate globally, classify.
pub fn infer_forward(
    image: &Tensor,
    cfg: &ScoreNetConfig,
    params: &ScoreNetParams,
) -> Result<InferTrace> {
    let rec = infer_semantic(image, cfg, params)?;
    let selected = hard_topk_indices(&rec.semantic.probs, cfg.k)?;
    let patches = tiler::tile_image(image, cfg.patch_high)?;

    let perm = tiler::sub_patch_perm(cfg.channels, cfg.patch_high, cfg.local.patch_size)?;
    let g = cfg.patch_high / cfg.local.patch_size;
    let n_loc = g * g;
    let d = cfg.local.embed_dim;
    let pe = sincos_pe(g, g, d)?;

    let mut local_pairs = 0u64;
    let mut region_embeddings = vec![0f32; 0];
    let mut permuted = vec![0f32; perm.len()];
    let mut tokens = vec![0f32; 0];
    for &idx in &selected {
        let row = patches.row(idx);
        for (dst, &src_idx) in permuted.iter_mut().zip(&perm) {
            *dst = row[src_idx];
        }
        linear_into(
            &mut tokens,
            &permuted,
            &params.local.embed_w,
            &params.local.embed_b,
            n_loc,
            cfg.local_in_dim(),
            d,
        );
        add_positional(&mut tokens, &pe);
        let enc = encode_tokens_fast(std::mem::take(&mut tokens), n_loc, &cfg.local, &params.local, None)?;
        local_pairs += enc.pairs;
        region_embeddings.extend_from_slice(&enc.pseudo_cls[0]);
    }

    let kk = selected.len();
    let mut coarse_tokens = vec![0f32; 0];
    linear_into(
        &mut coarse_tokens,
        &region_embeddings,
        &params.coarse.embed_w,
        &params.coarse.embed_b,
        kk,
        d,
        d,
    );
    let coarse_cfg = cfg.coarse_cfg();
    let coarse = encode_tokens_fast(coarse_tokens, kk, &coarse_cfg, &params.coarse, None)?;

    let (x, y) = cfg.variant;
    let mut representation = Vec::with_capacity(cfg.representation_dim());
    for cls in &rec.scorer_cls[rec.scorer_cls.len() - x..] {
        representation.extend_from_slice(cls);
    }
    for cls in &coarse.pseudo_cls[coarse.pseudo_cls.len() - y..] {
        representation.extend_from_slice(cls);
    }

    let mut logits = vec![0f32; 0];
    linear_into(
        &mut logits,
        &representation,
        &params.head_w,
        &params.head_b,
        1,
        cfg.representation_dim(),
        cfg.num_classes,
    );
    Ok(InferTrace {
        semantic: rec.semantic,
        selected,
        representation,
        logits,
        pair_counts: StagePairCounts {
            scorer: rec.scorer_pairs,
            local: local_pairs,
            coarse: coarse.pairs,
        },
        scorer_grid: rec.grid,
    })
}

/// Single-scale transformer classifier over full-resolution patches; the
/// model the two-stage design is benchmarked against.
pub struct VanillaParams {
    pub encoder: EncoderParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl VanillaParams {
    pub fn init(
        cfg: &EncoderConfig,
        in_channels: usize,
        num_classes: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let in_dim = in_channels * cfg.patch_size * cfg.patch_size;
        let encoder = EncoderParams::init(cfg, in_dim, rng)?;
        let std = (2.0 / (cfg.embed_dim + num_classes) as f64).sqrt();
        let head: Vec<f32> = (0..cfg.embed_dim * num_classes)
            .map(|_| (rng.normal_f64() * std) as f32)
            .collect();
        Ok(VanillaParams {
            encoder,
            head_w: Tensor::new(&[cfg.embed_dim, num_classes], head)?,
            head_b: Tensor::zeros(&[num_classes]),
        })
    }
}

/// Full-resolution single-scale forward. Returns logits plus the
/// patch-pair count of its one attention stage.
pub fn vanilla_infer(
    image: &Tensor,
    cfg: &EncoderConfig,
    params: &VanillaParams,
) -> Result<(Vec<f32>, u64)> {
    cfg.validate()?;
    let (patches, grid) = patchify(image, cfg.patch_size)?;
    let n = grid.0 * grid.1;
    let d = cfg.embed_dim;
    let in_dim = patches.dims2()?.1;
    let mut tokens = vec![0f32; 0];
    linear_into(
        &mut tokens,
        patches.data(),
        &params.encoder.embed_w,
        &params.encoder.embed_b,
        n,
        in_dim,
        d,
    );
    add_positional(&mut tokens, &sincos_pe(grid.0, grid.1, d)?);
    let enc = encode_tokens_fast(tokens, n, cfg, &params.encoder, None)?;
    let cls = enc.pseudo_cls.last().ok_or_else(|| {
        Error::contract("single-scale model needs at least one summary token")
    })?;
    let num_classes = params.head_w.dims2()?.1;
    let mut logits = vec![0f32; 0];
    linear_into(&mut logits, cls, &params.head_w, &params.head_b, 1, d, num_classes);
    Ok((logits, enc.pairs))
}
