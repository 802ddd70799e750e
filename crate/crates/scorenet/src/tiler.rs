//! Image tiling, area downscaling, and patch extraction.
//!
//! Images are [C, H, W] tensors. A patch grid at size P has gh = H/P rows and
//! gw = W/P columns, indexed row-major: patch n covers pixel rows
//! (n/gw)*P.. and pixel columns (n%gw)*P... A flattened patch vector is
//! channel-major: element ch*P*P + py*P + px.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Grid dimensions (gh, gw) for an H x W image tiled at P.
pub fn grid_dims(h: usize, w: usize, p: usize) -> Result<(usize, usize)> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("grid_dims: {h}x{w} not divisible by patch size {p}")));
    }
    Ok((h / p, w / p))
}

/// Pixel origin (row, col) of patch `n` in a grid with `gw` columns.
pub fn patch_origin(n: usize, gw: usize, p: usize) -> (usize, usize) {
    ((n / gw) * p, (n % gw) * p)
}

/// Splits a [C, H, W] image into a [N, C*P*P] matrix of flattened patches,
/// row-major over the patch grid.
pub fn tile_image(img: &Tensor, p: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let (gh, gw) = grid_dims(h, w, p)?;
    let n = gh * gw;
    let dim = c * p * p;
    let data = img.data();
    let mut out = vec![0.0f32; n * dim];
    for idx in 0..n {
        let (y0, x0) = patch_origin(idx, gw, p);
        let dst = &mut out[idx * dim..(idx + 1) * dim];
        for ch in 0..c {
            for py in 0..p {
                let src_row = ch * h * w + (y0 + py) * w + x0;
                let dst_row = ch * p * p + py * p;
                dst[dst_row..dst_row + p].copy_from_slice(&data[src_row..src_row + p]);
            }
        }
    }
    Tensor::new(&[n, dim], out)
}

/// Inverse of [`tile_image`]: reassembles [N, C*P*P] patches into [C, H, W].
pub fn untile_image(patches: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let (gh, gw) = grid_dims(h, w, p)?;
    let (n, dim) = patches.dims2()?;
    if n != gh * gw || dim != c * p * p {
        return Err(Error::shape(format!(
            "untile_image: patches {:?} do not match {c}x{h}x{w} at P={p}",
            patches.shape()
        )));
    }
    let mut out = vec![0.0f32; c * h * w];
    let data = patches.data();
    for idx in 0..n {
        let (y0, x0) = patch_origin(idx, gw, p);
        let src = &data[idx * dim..(idx + 1) * dim];
        for ch in 0..c {
            for py in 0..p {
                let dst_row = ch * h * w + (y0 + py) * w + x0;
                let src_row = ch * p * p + py * p;
                out[dst_row..dst_row + p].copy_from_slice(&src[src_row..src_row + p]);
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Element permutation that re-tiles one flattened P_big patch (length
/// C*P_big*P_big, channel-major) into the [N_sub, C*P_small*P_small] token
/// matrix its own tiling at P_small would produce. Output flat index i
/// takes input element perm[i], so the map plugs straight into an
/// element-gather: it lets a patch that exists only as a row of a larger
/// matrix be sub-tiled without materializing the intermediate image.
pub fn sub_patch_perm(c: usize, p_big: usize, p_small: usize) -> Result<Vec<usize>> {
    if p_small == 0 || p_big % p_small != 0 || c == 0 {
        return Err(Error::shape(format!(
            "sub_patch_perm: patch {p_big} not divisible by {p_small} (channels {c})"
        )));
    }
    let g = p_big / p_small;
    let dim = c * p_small * p_small;
    let mut perm = Vec::with_capacity(g * g * dim);
    for idx in 0..g * g {
        let (y0, x0) = ((idx / g) * p_small, (idx % g) * p_small);
        for ch in 0..c {
            for py in 0..p_small {
                for px in 0..p_small {
                    perm.push(ch * p_big * p_big + (y0 + py) * p_big + x0 + px);
                }
            }
        }
    }
    Ok(perm)
}

/// Area-average downscale of a [C, H, W] image by integer factor `s`.
pub fn downscale(img: &Tensor, s: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::shape(format!("downscale: {h}x{w} not divisible by factor {s}")));
    }
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0f32; c * oh * ow];
    let data = img.data();
    let inv = 1.0 / (s * s) as f64;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..s {
                    let row = ch * h * w + (oy * s + dy) * w + ox * s;
                    for dx in 0..s {
                        acc += data[row + dx] as f64;
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = (acc * inv) as f32;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Extraction mode for [`extract_patches`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractMode {
    /// Indicator columns are exact one-hot vectors; output rows are copied
    /// bit-for-bit from the selected patch rows.
    Hard,
    /// Indicator columns are arbitrary weights; output rows are the weighted
    /// combination indicators^T · patches.
    Soft,
}

/// X = Y^T · P: combines patch rows [N, D] with indicator columns [N, K]
/// into K extracted rows [K, D].
///
/// In hard mode every indicator column must contain exactly one 1.0 with all
/// other entries 0.0; rows are then copied without arithmetic.
pub fn extract_patches(patches: &Tensor, indicators: &Tensor, mode: ExtractMode) -> Result<Tensor> {
    let (n, d) = patches.dims2()?;
    let (n2, k) = indicators.dims2()?;
    if n != n2 {
        return Err(Error::shape(format!(
            "extract_patches: {n} patch rows vs {n2} indicator rows"
        )));
    }
    match mode {
        ExtractMode::Hard => {
            let mut out = vec![0.0f32; k * d];
            for col in 0..k {
                let mut hit: Option<usize> = None;
                for row in 0..n {
                    let v = indicators.at2(row, col);
                    if v == 1.0 {
                        if hit.is_some() {
                            return Err(Error::contract(format!(
                                "extract_patches(hard): indicator column {col} has multiple ones"
                            )));
                        }
                        hit = Some(row);
                    } else if v != 0.0 {
                        return Err(Error::contract(format!(
                            "extract_patches(hard): indicator column {col} has non-binary value {v}"
                        )));
                    }
                }
                let row = hit.ok_or_else(|| {
                    Error::contract(format!("extract_patches(hard): indicator column {col} is all zero"))
                })?;
                out[col * d..(col + 1) * d].copy_from_slice(patches.row(row));
            }
            Tensor::new(&[k, d], out)
        }
        ExtractMode::Soft => {
            let mut out = Tensor::zeros(&[k, d]);
            crate::numerics::kernels::matmul(
                out.data_mut(),
                indicators.data(),
                patches.data(),
                k,
                n,
                d,
                true,
                false,
                false,
            );
            Ok(out)
        }
    }
}
