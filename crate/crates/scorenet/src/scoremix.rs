//! Semantic mixing augmentation.
//!
//! A new training sample is built by cutting a rectangle out of a source
//! image and pasting it into a target image. Instead of choosing the
//! rectangle blindly, the cut location is drawn from the source's patch
//! distribution summed over candidate windows (likely-informative regions
//! are cut more often) and the paste location from the complement of the
//! target's distribution (likely-uninformative regions are overwritten
//! more often). Labels mix with the weight actually realized by the
//! pasted area, so label mass tracks pixel mass.
//!
//! Rectangles live on the region grid (side `patch_pixels`), the same
//! granularity the patch distribution is defined on.

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::semantic::SemanticDistribution;

/// Axis-aligned pixel rectangle plus the image dims it lives in; a compact
/// representation of a binary mask whose support is the rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RectMask {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl RectMask {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    /// Renders the mask as a row-major H*W bitmap of 0/1 values.
    pub fn to_bitmap(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.image_h * self.image_w];
        for y in self.top..self.top + self.height {
            let row = &mut out[y * self.image_w..(y + 1) * self.image_w];
            for v in &mut row[self.left..self.left + self.width] {
                *v = 1;
            }
        }
        out
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Where to cut, where to paste, and the realized label weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixPlan {
    pub mask_src: RectMask,
    pub mask_tgt: RectMask,
    /// Weight of the *target* label in the mix: the fraction of the image
    /// the pasted rectangle does NOT cover.
    pub effective_lambda: f32,
    /// Bbox dims in grid cells, after rounding and clamping.
    pub bbox: (usize, usize),
}

/// A finished augmented sample.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub x_m: Tensor,
    pub y_m: Vec<f32>,
    pub lambda: f32,
    pub mask_src: RectMask,
    pub mask_tgt: RectMask,
    pub source_id: u64,
    pub target_id: u64,
}

/// Whether window scores follow the semantic distributions or ignore them
/// (the plain-CutMix reference arm: both distributions treated as flat).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixStrategy {
    Semantic,
    Uniform,
}

fn window_sums(vals: &[f64], gh: usize, gw: usize, bh: usize, bw: usize) -> Vec<f64> {
    let (oh, ow) = (gh - bh + 1, gw - bw + 1);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0f64;
            for dr in 0..bh {
                let row = (r + dr) * gw + c;
                for dc in 0..bw {
                    acc += vals[row + dc];
                }
            }
            out.push(acc);
        }
    }
    out
}

fn normalize_or_uniform(mut scores: Vec<f64>) -> Vec<f64> {
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        for s in &mut scores {
            *s /= total;
        }
    } else {
        let u = 1.0 / scores.len() as f64;
        for s in &mut scores {
            *s = u;
        }
    }
    scores
}

fn check_bbox(p: &SemanticDistribution, bh: usize, bw: usize) -> Result<()> {
    p.validate()?;
    if bh == 0 || bw == 0 || bh > p.gh || bw > p.gw {
        return Err(Error::contract(format!(
            "bbox {bh}x{bw} invalid for a {}x{} grid",
            p.gh, p.gw
        )));
    }
    Ok(())
}

/// Probability of each valid top-left position for a bh x bw window,
/// proportional to the patch-distribution mass the window covers.
/// Positions are indexed row-major over the (gh-bh+1) x (gw-bw+1) grid.
pub fn bbox_distribution(p: &SemanticDistribution, bh: usize, bw: usize) -> Result<Vec<f64>> {
    check_bbox(p, bh, bw)?;
    let vals: Vec<f64> = p.probs.iter().map(|&v| v as f64).collect();
    Ok(normalize_or_uniform(window_sums(&vals, p.gh, p.gw, bh, bw)))
}

/// Same windowing over the pointwise complement (1 - p), used to choose
/// where a paste does the least semantic damage.
pub fn complement_bbox_distribution(
    p: &SemanticDistribution,
    bh: usize,
    bw: usize,
) -> Result<Vec<f64>> {
    check_bbox(p, bh, bw)?;
    let vals: Vec<f64> = p.probs.iter().map(|&v| 1.0 - v as f64).collect();
    Ok(normalize_or_uniform(window_sums(&vals, p.gh, p.gw, bh, bw)))
}

fn categorical(probs: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform_f64();
    let mut acc = 0.0f64;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn bbox_side(grid: usize, lambda: f32) -> usize {
    let raw = (grid as f64 * (1.0 - lambda as f64).sqrt()).round() as usize;
    raw.clamp(1, grid)
}

/// Draws cut and paste rectangles for one source/target pair.
///
/// The bbox spans round(g * sqrt(1 - lambda)) cells per side (clamped to
/// the grid), the cut corner follows the source's window distribution, the
/// paste corner the target's complement window distribution, and the
/// returned weight is recomputed from the realized area: a bbox covering
/// fraction f of the image yields effective_lambda = 1 - f.
pub fn sample_masks(
    p_src: &SemanticDistribution,
    p_tgt: &SemanticDistribution,
    lambda: f32,
    strategy: MixStrategy,
    patch_pixels: usize,
    rng: &mut RngStream,
) -> Result<MixPlan> {
    if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    if patch_pixels == 0 {
        return Err(Error::config("patch_pixels must be positive"));
    }
    if p_src.gh != p_tgt.gh || p_src.gw != p_tgt.gw {
        return Err(Error::contract(format!(
            "source grid {}x{} does not match target grid {}x{}",
            p_src.gh, p_src.gw, p_tgt.gh, p_tgt.gw
        )));
    }
    let (gh, gw) = (p_src.gh, p_src.gw);
    let (bh, bw) = (bbox_side(gh, lambda), bbox_side(gw, lambda));

    let uniform = SemanticDistribution {
        probs: vec![1.0 / (gh * gw) as f32; gh * gw],
        gh,
        gw,
    };
    let (cut_dist, paste_dist) = match strategy {
        MixStrategy::Semantic => (
            bbox_distribution(p_src, bh, bw)?,
            complement_bbox_distribution(p_tgt, bh, bw)?,
        ),
        MixStrategy::Uniform => (
            bbox_distribution(&uniform, bh, bw)?,
            complement_bbox_distribution(&uniform, bh, bw)?,
        ),
    };
    let ow = gw - bw + 1;
    let cut = categorical(&cut_dist, rng);
    let paste = categorical(&paste_dist, rng);
    let (image_h, image_w) = (gh * patch_pixels, gw * patch_pixels);
    let rect = |pos: usize| RectMask {
        top: (pos / ow) * patch_pixels,
        left: (pos % ow) * patch_pixels,
        height: bh * patch_pixels,
        width: bw * patch_pixels,
        image_h,
        image_w,
    };
    let covered = (bh * bw) as f64 / (gh * gw) as f64;
    Ok(MixPlan {
        mask_src: rect(cut),
        mask_tgt: rect(paste),
        effective_lambda: (1.0 - covered) as f32,
        bbox: (bh, bw),
    })
}

/// Applies a plan: copies the source rectangle into the target image at
/// the paste rectangle and mixes the labels with the realized weight.
pub fn mix_pair(
    x_s: &Tensor,
    y_s: &[f32],
    x_t: &Tensor,
    y_t: &[f32],
    plan: &MixPlan,
    source_id: u64,
    target_id: u64,
) -> Result<MixedSample> {
    let (c, h, w) = x_t.dims3()?;
    let (cs, hs, ws) = x_s.dims3()?;
    if (c, h, w) != (cs, hs, ws) {
        return Err(Error::shape(format!(
            "source image {cs}x{hs}x{ws} does not match target {c}x{h}x{w}"
        )));
    }
    if y_s.len() != y_t.len() || y_s.is_empty() {
        return Err(Error::shape("label vectors must share a positive length".to_string()));
    }
    let (ms, mt) = (&plan.mask_src, &plan.mask_tgt);
    if ms.height != mt.height || ms.width != mt.width {
        return Err(Error::contract(format!(
            "mask rectangles differ: {}x{} vs {}x{}",
            ms.height, ms.width, mt.height, mt.width
        )));
    }
    for m in [ms, mt] {
        if m.image_h != h || m.image_w != w || m.top + m.height > h || m.left + m.width > w {
            return Err(Error::contract(format!(
                "mask {m:?} does not fit a {h}x{w} image"
            )));
        }
    }
    let lam = plan.effective_lambda;
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::contract(format!("effective lambda {lam} outside [0, 1]")));
    }

    let mut out = x_t.data().to_vec();
    let src = x_s.data();
    for ch in 0..c {
        for dy in 0..ms.height {
            let src_row = ch * h * w + (ms.top + dy) * w + ms.left;
            let dst_row = ch * h * w + (mt.top + dy) * w + mt.left;
            out[dst_row..dst_row + ms.width].copy_from_slice(&src[src_row..src_row + ms.width]);
        }
    }
    let y_m: Vec<f32> = y_t
        .iter()
        .zip(y_s)
        .map(|(&t, &s)| lam * t + (1.0 - lam) * s)
        .collect();
    Ok(MixedSample {
        x_m: Tensor::new(&[c, h, w], out)?,
        y_m,
        lambda: lam,
        mask_src: *ms,
        mask_tgt: *mt,
        source_id,
        target_id,
    })
}
