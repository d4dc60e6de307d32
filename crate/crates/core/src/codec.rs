//! Deterministic stage-1 codec: a fitted color palette maps images to and
//! from a discrete token grid. Token ids are 0-based, `0..C-1` are palette
//! entries and id `C` is the MASK token (never decodable).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::netpbm::{GrayImage, RgbImage};
use crate::substrate::Rng;

pub const PALETTE_MAGIC: &[u8; 8] = b"PDDPPAL1";

const KMEANS_ITERS: usize = 50;
const STREAM_PALETTE: u64 = 0x70616c; // "pal"

/// Fitted color palette standing in for a learned codebook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
    pub seed: u64,
    /// Number of pixels the fit saw (not serialized).
    pub sample_count: usize,
    /// True when fewer distinct input colors than C forced perturbation
    /// padding (not serialized).
    pub padded: bool,
}

impl Palette {
    pub fn c(&self) -> usize {
        self.colors.len()
    }

    /// Index of the nearest palette color in RGB Euclidean distance, ties
    /// broken toward the lowest index.
    pub fn nearest(&self, color: [f64; 3]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.colors.iter().enumerate() {
            let d = dist2(color, [c[0] as f64, c[1] as f64, c[2] as f64]);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 + self.colors.len() * 3 + 8);
        out.extend_from_slice(PALETTE_MAGIC);
        out.extend_from_slice(&(self.colors.len() as u32).to_le_bytes());
        for c in &self.colors {
            out.extend_from_slice(c);
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != PALETTE_MAGIC {
            return Err(Error::format("bad palette magic"));
        }
        let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let need = 12 + c * 3 + 8;
        if bytes.len() < need {
            return Err(Error::format("truncated palette file"));
        }
        let colors = bytes[12..12 + c * 3]
            .chunks_exact(3)
            .map(|p| [p[0], p[1], p[2]])
            .collect();
        let seed = u64::from_le_bytes(bytes[12 + c * 3..need].try_into().unwrap());
        Ok(Palette {
            colors,
            seed,
            sample_count: 0,
            padded: false,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// K-position grid of token ids in `0..=C`; id C marks a corrupted
/// (masked) position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub ids: Vec<u16>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, c: usize, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != h * w {
            return Err(Error::dim(format!(
                "token grid {h}x{w} needs {} ids, got {}",
                h * w,
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize > c) {
            return Err(Error::contract(format!("token id {bad} exceeds MASK id {c}")));
        }
        Ok(TokenGrid { h, w, c, ids })
    }

    pub fn k(&self) -> usize {
        self.ids.len()
    }

    pub fn mask_id(&self) -> u16 {
        self.c as u16
    }

    pub fn contains_mask(&self) -> bool {
        let m = self.mask_id();
        self.ids.iter().any(|&id| id == m)
    }
}

/// Per-position binary mask over the latent grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl LatentMask {
    pub fn all_clear(h: usize, w: usize) -> Self {
        LatentMask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn k(&self) -> usize {
        self.bits.len()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

/// Fit a C-color palette with k-means (k-means++ style seeding, at most 50
/// iterations). Deterministic given (pixel order, C, seed). When the input
/// has fewer than C distinct colors the distinct set is kept and padded
/// with perturbed near-duplicates, flagged in `padded`.
pub fn fit_palette(pixels: &[[u8; 3]], c: usize, seed: u64) -> Result<Palette> {
    if c < 2 {
        return Err(Error::contract("palette size must be at least 2"));
    }
    if pixels.is_empty() {
        return Err(Error::contract("cannot fit a palette to zero pixels"));
    }

    // Distinct colors in first-appearance order keeps the fit deterministic
    // under pixel order.
    let mut distinct: Vec<[u8; 3]> = Vec::new();
    for &p in pixels {
        if !distinct.contains(&p) {
            distinct.push(p);
        }
        if distinct.len() > c {
            break;
        }
    }

    if distinct.len() < c {
        let colors = pad_distinct(distinct, c);
        return Ok(Palette {
            colors,
            seed,
            sample_count: pixels.len(),
            padded: true,
        });
    }

    let pts: Vec<[f64; 3]> = pixels
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    let mut rng = Rng::new(seed, STREAM_PALETTE);

    // k-means++ seeding.
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(c);
    centers.push(pts[rng.below(pts.len() as u64) as usize]);
    let mut d2: Vec<f64> = pts.iter().map(|&p| dist2(p, centers[0])).collect();
    while centers.len() < c {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All mass on existing centers; take the first point not yet a
            // center (cannot happen with >= c distinct colors, kept as a
            // deterministic fallback).
            pts[rng.below(pts.len() as u64) as usize]
        } else {
            let mut u = rng.next_f64() * total;
            let mut pick = pts.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                u -= d;
                if u <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pts[pick]
        };
        centers.push(next);
        for (di, &p) in d2.iter_mut().zip(pts.iter()) {
            let nd = dist2(p, next);
            if nd < *di {
                *di = nd;
            }
        }
    }

    // Lloyd iterations.
    let mut assign = vec![0usize; pts.len()];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, &p) in pts.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, &ctr) in centers.iter().enumerate() {
                let d = dist2(p, ctr);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0f64; 3]; c];
        let mut counts = vec![0usize; c];
        for (&a, &p) in assign.iter().zip(pts.iter()) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            sums[a][2] += p[2];
            counts[a] += 1;
        }
        for j in 0..c {
            if counts[j] > 0 {
                centers[j] = [
                    sums[j][0] / counts[j] as f64,
                    sums[j][1] / counts[j] as f64,
                    sums[j][2] / counts[j] as f64,
                ];
            }
            // Empty clusters keep their center.
        }
        if !changed {
            break;
        }
    }

    let rounded: Vec<[u8; 3]> = centers
        .iter()
        .map(|c| {
            [
                c[0].round().clamp(0.0, 255.0) as u8,
                c[1].round().clamp(0.0, 255.0) as u8,
                c[2].round().clamp(0.0, 255.0) as u8,
            ]
        })
        .collect();

    // Rounding can collide centers; restore distinctness.
    let mut dedup: Vec<[u8; 3]> = Vec::new();
    for col in rounded {
        if !dedup.contains(&col) {
            dedup.push(col);
        }
    }
    let padded = dedup.len() < c;
    let colors = pad_distinct(dedup, c);
    Ok(Palette {
        colors,
        seed,
        sample_count: pixels.len(),
        padded,
    })
}

/// Extend a distinct color set to length `c` with small perturbations of
/// existing entries. Deterministic scan over offsets guarantees distinctness.
fn pad_distinct(mut colors: Vec<[u8; 3]>, c: usize) -> Vec<[u8; 3]> {
    let offsets: [[i16; 3]; 6] = [
        [1, 0, 0],
        [0, 1, 0],
        [0, 0, 1],
        [-1, 0, 0],
        [0, -1, 0],
        [0, 0, -1],
    ];
    let mut radius = 1i16;
    'outer: while colors.len() < c {
        for base_idx in 0..colors.len() {
            for off in offsets {
                let base = colors[base_idx];
                let cand = [
                    (base[0] as i16 + off[0] * radius).clamp(0, 255) as u8,
                    (base[1] as i16 + off[1] * radius).clamp(0, 255) as u8,
                    (base[2] as i16 + off[2] * radius).clamp(0, 255) as u8,
                ];
                if !colors.contains(&cand) {
                    colors.push(cand);
                    if colors.len() == c {
                        break 'outer;
                    }
                }
            }
        }
        radius += 1;
        assert!(radius < 256, "could not pad palette to {c} colors");
    }
    colors
}

/// Quantize an image to tokens: each f x f block becomes the index of the
/// palette color nearest to the block's mean color.
pub fn encode(image: &RgbImage, palette: &Palette, f: usize) -> Result<TokenGrid> {
    if f == 0 || image.width % f != 0 || image.height % f != 0 {
        return Err(Error::dim(format!(
            "image {}x{} not divisible by f={f}",
            image.width, image.height
        )));
    }
    let h = image.height / f;
    let w = image.width / f;
    let mut ids = Vec::with_capacity(h * w);
    for by in 0..h {
        for bx in 0..w {
            let mut sum = [0.0f64; 3];
            for dy in 0..f {
                for dx in 0..f {
                    let p = image.get(bx * f + dx, by * f + dy);
                    sum[0] += p[0] as f64;
                    sum[1] += p[1] as f64;
                    sum[2] += p[2] as f64;
                }
            }
            let n = (f * f) as f64;
            let mean = [sum[0] / n, sum[1] / n, sum[2] / n];
            ids.push(palette.nearest(mean) as u16);
        }
    }
    TokenGrid::new(h, w, palette.c(), ids)
}

/// Paint each token as an f x f block of its palette color.
///
/// Grids containing MASK are corrupted and cannot be decoded.
pub fn decode(tokens: &TokenGrid, palette: &Palette, f: usize) -> Result<RgbImage> {
    if tokens.c != palette.c() {
        return Err(Error::dim(format!(
            "grid C={} vs palette C={}",
            tokens.c,
            palette.c()
        )));
    }
    if tokens.contains_mask() {
        return Err(Error::contract(
            "corrupted grid: cannot decode a grid containing MASK",
        ));
    }
    let mut img = RgbImage::filled(tokens.w * f, tokens.h * f, [0, 0, 0]);
    for by in 0..tokens.h {
        for bx in 0..tokens.w {
            let color = palette.colors[tokens.ids[by * tokens.w + bx] as usize];
            for dy in 0..f {
                for dx in 0..f {
                    img.set(bx * f + dx, by * f + dy, color);
                }
            }
        }
    }
    Ok(img)
}

/// Pixel mask to latent mask: a latent cell is set iff any pixel of its
/// f x f block is set (any-overlap rule).
pub fn downsample_mask(mask: &GrayImage, f: usize) -> Result<LatentMask> {
    if f == 0 || mask.width % f != 0 || mask.height % f != 0 {
        return Err(Error::dim(format!(
            "mask {}x{} not divisible by f={f}",
            mask.width, mask.height
        )));
    }
    let h = mask.height / f;
    let w = mask.width / f;
    let mut bits = vec![false; h * w];
    for by in 0..h {
        for bx in 0..w {
            'block: for dy in 0..f {
                for dx in 0..f {
                    if mask.get(bx * f + dx, by * f + dy) > 0 {
                        bits[by * w + bx] = true;
                        break 'block;
                    }
                }
            }
        }
    }
    Ok(LatentMask { h, w, bits })
}

/// Build the masked latent z_m: masked positions become MASK (id C),
/// everything else is copied from z0.
pub fn apply_mask(z0: &TokenGrid, mask: &LatentMask) -> Result<TokenGrid> {
    if z0.h != mask.h || z0.w != mask.w {
        return Err(Error::dim(format!(
            "grid {}x{} vs mask {}x{}",
            z0.h, z0.w, mask.h, mask.w
        )));
    }
    if z0.contains_mask() {
        return Err(Error::contract("z0 must not contain MASK"));
    }
    let m = z0.mask_id();
    let ids = z0
        .ids
        .iter()
        .zip(mask.bits.iter())
        .map(|(&id, &b)| if b { m } else { id })
        .collect();
    TokenGrid::new(z0.h, z0.w, z0.c, ids)
}
