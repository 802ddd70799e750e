//! Synthetic labeled corpus generation, image ingestion, and splitting.
//!
//! Each generated image is a correlated-noise background plus one to
//! three elliptical blobs. The class determines only what the blobs look
//! like (texture wavelength, stripe versus ring pattern, and a small
//! color cast); blob placement, orientation, and the background carry no
//! label information. Adjacent class pairs share the color cast, so the
//! cast narrows a sample to two candidates and the stripe-versus-ring
//! pattern decides between them. The pattern lives at a wavelength of a
//! few pixels, which survives only at native resolution; a heavily
//! downscaled view keeps the cast but averages the pattern away. A
//! binary mask of the blob support ships with every sample so
//! region-selection quality can be measured against ground truth.

mod ppm;

pub use ppm::{load_mask_pgm, load_pgm, load_ppm, save_pgm, save_ppm};

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

/// One labeled image with its ground-truth discriminative-region mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub blob_mask: Vec<u8>,
    pub id: u64,
}

/// The most distinct texture codes the class mapping can hand out.
pub const MAX_CLASSES: usize = 12;

const MIN_SIDE: usize = 32;
const COVERAGE_LO: f32 = 0.025;
const COVERAGE_HI: f32 = 0.18;

struct Blob {
    cy: f32,
    cx: f32,
    rx: f32,
    ry: f32,
    phi: f32,
    tex_phi: f32,
}

impl Blob {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f32 + 0.5 - self.cy;
        let dx = x as f32 + 0.5 - self.cx;
        let (s, c) = self.phi.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }

    fn bbox(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let r = self.rx.max(self.ry);
        let y0 = (self.cy - r - 1.0).max(0.0) as usize;
        let x0 = (self.cx - r - 1.0).max(0.0) as usize;
        let y1 = ((self.cy + r + 1.0) as usize).min(h);
        let x1 = ((self.cx + r + 1.0) as usize).min(w);
        (y0, x0, y1, x1)
    }
}

/// Wavelength, stripe-versus-ring flag, and RGB cast for one class.
///
/// Classes 2k and 2k+1 share wavelength and cast and differ only in the
/// pattern flag, which keeps the pair distinction out of coarse color
/// statistics.
fn class_texture(class: usize) -> (f32, bool, [f32; 3]) {
    let wavelength = 6.0 * 1.9f32.powi(((class / 2) % 3) as i32);
    let stripes = class % 2 == 0;
    let palette: [[f32; 3]; 6] = [
        [1.0, -1.0, 0.0],
        [-1.0, 1.0, 0.0],
        [0.0, 1.0, -1.0],
        [0.0, -1.0, 1.0],
        [1.0, 0.0, -1.0],
        [-1.0, 0.0, 1.0],
    ];
    let mut color = palette[(class / 2) % 6];
    for v in &mut color {
        *v *= 0.12;
    }
    (wavelength, stripes, color)
}

/// Bilinearly interpolated white noise on a coarse grid, giving spatial
/// correlation at roughly `cell` pixels.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut RngStream) -> Vec<f32> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        let fy = y as f32 / cell as f32;
        let y0 = fy as usize;
        let ty = fy - y0 as f32;
        for x in 0..w {
            let fx = x as f32 / cell as f32;
            let x0 = fx as usize;
            let tx = fx - x0 as f32;
            let a = grid[y0 * gw + x0];
            let b = grid[y0 * gw + x0 + 1];
            let c = grid[(y0 + 1) * gw + x0];
            let d = grid[(y0 + 1) * gw + x0 + 1];
            out[y * w + x] = a * (1.0 - ty) * (1.0 - tx)
                + b * (1.0 - ty) * tx
                + c * ty * (1.0 - tx)
                + d * ty * tx;
        }
    }
    out
}

fn place_blobs(h: usize, w: usize, rng: &mut RngStream) -> Vec<Blob> {
    let count = 1 + rng.range_usize(3);
    let target = rng.uniform_in(0.06, 0.14) * (h * w) as f32;
    let per_blob = target / count as f32;
    let max_r = h.min(w) as f32 / 2.0 - 4.0;
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    for _ in 0..count {
        let aspect = rng.uniform_in(0.55, 1.8);
        let rx = (per_blob * aspect / PI).sqrt().clamp(3.0, max_r);
        let ry = (per_blob / (PI * rx)).clamp(3.0, max_r);
        let phi = rng.uniform_in(0.0, PI);
        let tex_phi = rng.uniform_in(0.0, PI);
        let r = rx.max(ry);
        let mut cy = 0.0;
        let mut cx = 0.0;
        for _ in 0..40 {
            cy = rng.uniform_in(r + 2.0, h as f32 - r - 2.0);
            cx = rng.uniform_in(r + 2.0, w as f32 - r - 2.0);
            let clear = blobs.iter().all(|b| {
                let dy = cy - b.cy;
                let dx = cx - b.cx;
                (dy * dy + dx * dx).sqrt() > r + b.rx.max(b.ry) + 2.0
            });
            if clear {
                break;
            }
        }
        blobs.push(Blob { cy, cx, rx, ry, phi, tex_phi });
    }
    blobs
}

fn render_sample(h: usize, w: usize, class: usize, rng: &mut RngStream) -> Result<(Tensor, Vec<u8>)> {
    let coarse_cell = (h.min(w) / 4).clamp(5, 16);
    let noise_a = value_noise(h, w, coarse_cell, rng);
    let noise_b = value_noise(h, w, 5, rng);
    let ch_base = [
        rng.uniform_in(-0.03, 0.03),
        rng.uniform_in(-0.03, 0.03),
        rng.uniform_in(-0.03, 0.03),
    ];

    let mut blobs = Vec::new();
    let mut mask = vec![0u8; h * w];
    let mut coverage_ok = false;
    for attempt in 0..8u64 {
        let mut layout_rng = rng.substream(100 + attempt);
        blobs = place_blobs(h, w, &mut layout_rng);
        mask.iter_mut().for_each(|m| *m = 0);
        for blob in &blobs {
            let (y0, x0, y1, x1) = blob.bbox(h, w);
            for y in y0..y1 {
                for x in x0..x1 {
                    if blob.contains(y, x) {
                        mask[y * w + x] = 1;
                    }
                }
            }
        }
        let coverage = mask.iter().map(|&m| m as usize).sum::<usize>() as f32 / (h * w) as f32;
        if (COVERAGE_LO..=COVERAGE_HI).contains(&coverage) {
            coverage_ok = true;
            break;
        }
    }
    if !coverage_ok {
        return Err(Error::numeric("blob layout never reached target coverage"));
    }

    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let f = 0.06 * noise_a[y * w + x] + 0.03 * noise_b[y * w + x];
            for ch in 0..3 {
                data[ch * h * w + y * w + x] = (0.5 + ch_base[ch] + f).clamp(0.0, 1.0);
            }
        }
    }

    let (wavelength, stripes, color) = class_texture(class);
    for blob in &blobs {
        let (y0, x0, y1, x1) = blob.bbox(h, w);
        let (s, c) = blob.tex_phi.sin_cos();
        let texture = |y: usize, x: usize| -> f32 {
            let dy = y as f32 + 0.5 - blob.cy;
            let dx = x as f32 + 0.5 - blob.cx;
            if stripes {
                (2.0 * PI * (dx * c + dy * s) / wavelength).sin()
            } else {
                (2.0 * PI * (dx * dx + dy * dy).sqrt() / wavelength).sin()
            }
        };
        let mut sum_t = 0.0f64;
        let mut count = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                if blob.contains(y, x) {
                    sum_t += texture(y, x) as f64;
                    count += 1;
                }
            }
        }
        if count == 0 {
            continue;
        }
        // Centering the pattern per blob keeps the region's channel means
        // at cast level for both pattern kinds, so block averages cannot
        // tell them apart.
        let bias = (sum_t / count as f64) as f32;
        for y in y0..y1 {
            for x in x0..x1 {
                if !blob.contains(y, x) {
                    continue;
                }
                let t = texture(y, x) - bias;
                let f = 0.06 * noise_a[y * w + x] + 0.03 * noise_b[y * w + x];
                for ch in 0..3 {
                    data[ch * h * w + y * w + x] =
                        (0.5 + color[ch] + 0.26 * t + 0.5 * f).clamp(0.0, 1.0);
                }
            }
        }
    }

    Ok((Tensor::new(&[3, h, w], data)?, mask))
}

/// Generates `n` labeled samples with labels balanced within one count.
/// Each sample draws from its own seeded stream, so the corpus is
/// reproducible bit for bit and order-independent.
pub fn generate_corpus(
    n: usize,
    num_classes: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if num_classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
    }
    if num_classes > MAX_CLASSES {
        return Err(Error::config(format!(
            "only {MAX_CLASSES} distinct texture codes exist, got {num_classes} classes"
        )));
    }
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::config(format!(
            "images must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
        )));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let mut rng = RngStream::new(seed, i as u64);
        let (image, blob_mask) = render_sample(h, w, label, &mut rng)?;
        samples.push(Sample { image, label, blob_mask, id: i as u64 });
    }
    Ok(samples)
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: u64,
    pub path: String,
    pub label: usize,
}

pub const MANIFEST_HEADER: &str = "id,path,label";

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.id, row.path, row.label));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let raw = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut offset = 0usize;
    for (lineno, line) in raw.lines().enumerate() {
        let trimmed = line.trim_end_matches('\r');
        if lineno == 0 {
            if trimmed != MANIFEST_HEADER {
                return Err(Error::format(0, format!("expected header '{MANIFEST_HEADER}'")));
            }
        } else if !trimmed.is_empty() {
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::format(
                    offset,
                    format!("expected 3 comma-separated fields, got {}", fields.len()),
                ));
            }
            let id: u64 = fields[0]
                .parse()
                .map_err(|_| Error::format(offset, format!("bad id '{}'", fields[0])))?;
            let label: usize = fields[2]
                .parse()
                .map_err(|_| Error::format(offset, format!("bad label '{}'", fields[2])))?;
            rows.push(ManifestRow { id, path: fields[1].to_string(), label });
        }
        offset += line.len() + 1;
    }
    Ok(rows)
}

/// Writes images, mask sidecars, and a manifest into `dir`, returning the
/// manifest path. Manifest paths are relative to `dir`.
pub fn write_corpus(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(samples.len());
    for sample in samples {
        let name = format!("{:06}.ppm", sample.id);
        save_ppm(&dir.join(&name), &sample.image)?;
        let (_, h, w) = sample.image.dims3()?;
        let mask_bytes: Vec<u8> = sample.blob_mask.iter().map(|&m| m * 255).collect();
        save_pgm(&dir.join(format!("{:06}.mask.pgm", sample.id)), &mask_bytes, h, w)?;
        rows.push(ManifestRow { id: sample.id, path: name, label: sample.label });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

/// Loads a corpus back from its manifest. Mask sidecars named
/// `<id>.mask.pgm` are picked up when present; otherwise the mask is
/// all zeros.
pub fn read_corpus(manifest_path: &Path) -> Result<Vec<Sample>> {
    let rows = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let image = load_ppm(&base.join(&row.path))?;
        let (_, h, w) = image.dims3()?;
        let mask_path = base.join(format!("{:06}.mask.pgm", row.id));
        let blob_mask = if mask_path.exists() {
            let (mask, mh, mw) = load_mask_pgm(&mask_path)?;
            if (mh, mw) != (h, w) {
                return Err(Error::shape(format!(
                    "mask {mh}x{mw} does not match image {h}x{w} for id {}",
                    row.id
                )));
            }
            mask
        } else {
            vec![0u8; h * w]
        };
        samples.push(Sample { image, label: row.label, blob_mask, id: row.id });
    }
    Ok(samples)
}

/// Splits indices into train/val/test with per-class proportional
/// allocation (largest remainder, so each class lands within one sample
/// of its nominal share). Deterministic per seed; outputs sorted.
pub fn stratified_split(
    labels: &[usize],
    fractions: (f32, f32, f32),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (ft, fv, fe) = fractions;
    for f in [ft, fv, fe] {
        if !(0.0..=1.0).contains(&f) || !f.is_finite() {
            return Err(Error::config(format!("fraction {f} outside [0, 1]")));
        }
    }
    if (ft + fv + fe - 1.0).abs() > 1e-5 {
        return Err(Error::config(format!(
            "fractions ({ft}, {fv}, {fe}) must sum to 1"
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &label) in labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let mut splits = (Vec::new(), Vec::new(), Vec::new());
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::config(format!(
                "class {class} has {} samples; need at least 3 to split",
                members.len()
            )));
        }
        let mut rng = RngStream::new(seed, class as u64);
        rng.shuffle(&mut members);
        let count = members.len();
        let targets = [count as f64 * ft as f64, count as f64 * fv as f64, count as f64 * fe as f64];
        let mut alloc = [0usize; 3];
        for (a, t) in alloc.iter_mut().zip(&targets) {
            *a = t.floor() as usize;
        }
        let mut leftover = count - alloc.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = targets[a] - targets[a].floor();
            let fb = targets[b] - targets[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &bucket in &order {
            if leftover == 0 {
                break;
            }
            alloc[bucket] += 1;
            leftover -= 1;
        }
        splits.0.extend_from_slice(&members[..alloc[0]]);
        splits.1.extend_from_slice(&members[alloc[0]..alloc[0] + alloc[1]]);
        splits.2.extend_from_slice(&members[alloc[0] + alloc[1]..]);
    }
    splits.0.sort_unstable();
    splits.1.sort_unstable();
    splits.2.sort_unstable();
    Ok(splits)
}
