//! Independent oracles shared by the integration and acceptance suites.
//! Everything here recomputes results from first principles — naive
//! double loops, direct summation — and never calls the implementation
//! path it is checking.

#![allow(dead_code)]

use fdaseg::gfda::Style;
use fdaseg::image::Image;
use fdaseg::netcore::model::{Embedding, FeatureMap};
use fdaseg::netcore::Logits;
use fdaseg::synthdata::SegMask;
use fdaseg::tensorfft::Grid2D;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Seeded data helpers
// ---------------------------------------------------------------------------

pub fn seeded_grid(h: usize, w: usize, seed: u64) -> Grid2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid2D::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn seeded_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, 1, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn seeded_embeddings(n: usize, dim: usize, seed: u64) -> Vec<Embedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Embedding {
            values: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect()
}

pub fn seeded_feature_map(grid: usize, dim: usize, seed: u64, image_size: usize) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = grid * grid;
    let scale = image_size as f64 / grid as f64;
    FeatureMap {
        grid_h: grid,
        grid_w: grid,
        dim,
        features: (0..cells * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        src_coords: (0..cells)
            .map(|m| {
                Some((
                    scale * (m / grid) as f64 + (scale - 1.0) / 2.0,
                    scale * (m % grid) as f64 + (scale - 1.0) / 2.0,
                ))
            })
            .collect(),
    }
}

pub fn seeded_blob_mask(n: usize, seed: u64) -> SegMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = SegMask::zeros(n, n);
    let blobs = rng.random_range(1..=2usize);
    for _ in 0..blobs {
        let cy = rng.random_range(0.2..0.8) * n as f64;
        let cx = rng.random_range(0.2..0.8) * n as f64;
        let r = rng.random_range(0.1..0.3) * n as f64;
        for y in 0..n {
            for x in 0..n {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                    mask.set(y, x, 1);
                }
            }
        }
    }
    if mask.foreground_count() == 0 {
        mask.set(n / 2, n / 2, 1);
    }
    mask
}

pub fn seeded_logits(classes: usize, h: usize, w: usize, seed: u64) -> Logits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Logits {
        classes,
        height: h,
        width: w,
        data: (0..classes * h * w)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Naive DFT oracle
// ---------------------------------------------------------------------------

/// O(N^4) direct evaluation of the DFT definition, DC-centered to match
/// the library layout.
pub fn naive_dft_centered(g: &Grid2D) -> Vec<Complex64> {
    let (h, w) = (g.height(), g.width());
    let mut standard = vec![Complex64::default(); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::default();
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0
                        * std::f64::consts::PI
                        * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                    acc += g.get(y, x) * Complex64::new(ang.cos(), ang.sin());
                }
            }
            standard[u * w + v] = acc;
        }
    }
    // shift DC to (h/2, w/2)
    let mut centered = vec![Complex64::default(); h * w];
    for u in 0..h {
        for v in 0..w {
            centered[((u + h / 2) % h) * w + (v + w / 2) % w] = standard[u * w + v];
        }
    }
    centered
}

// ---------------------------------------------------------------------------
// Brute-force loss oracles
// ---------------------------------------------------------------------------

pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Unstabilized direct InfoNCE for one (anchor, positive) pair.
fn nce_term_oracle(pos_sim: f64, neg_sims: &[f64], tau: f64) -> f64 {
    let num = (pos_sim / tau).exp();
    let denom: f64 = num + neg_sims.iter().map(|s| (s / tau).exp()).sum::<f64>();
    -(num / denom).ln()
}

/// Style loss by definition: every element anchors, positives share its
/// style, negatives carry the other style, mean over positives, sum over
/// anchors.
pub fn scl_oracle(embeddings: &[Embedding], styles: &[Style], tau: f64) -> f64 {
    let n = embeddings.len();
    let mut total = 0.0;
    for i in 0..n {
        let negs: Vec<f64> = (0..n)
            .filter(|&j| styles[j] != styles[i])
            .map(|j| cosine_oracle(&embeddings[i].values, &embeddings[j].values))
            .collect();
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && styles[j] == styles[i]).collect();
        let mut anchor = 0.0;
        for &p in &pos {
            let sp = cosine_oracle(&embeddings[i].values, &embeddings[p].values);
            anchor += nce_term_oracle(sp, &negs, tau);
        }
        total += anchor / pos.len() as f64;
    }
    total
}

/// Content loss by definition; singleton anchors skipped.
pub fn ccl_oracle(embeddings: &[Embedding], ids: &[u64], tau: f64) -> f64 {
    let n = embeddings.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && ids[j] == ids[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let negs: Vec<f64> = (0..n)
            .filter(|&j| ids[j] != ids[i])
            .map(|j| cosine_oracle(&embeddings[i].values, &embeddings[j].values))
            .collect();
        let mut anchor = 0.0;
        for &p in &pos {
            let sp = cosine_oracle(&embeddings[i].values, &embeddings[p].values);
            anchor += nce_term_oracle(sp, &negs, tau);
        }
        total += anchor / pos.len() as f64;
    }
    total
}

/// Propagation by definition: for every cell, the similarity-weighted mean
/// of K-transformed features (double loop over cells).
pub fn dfpm_oracle(f: &FeatureMap, k: &[f64]) -> Vec<f64> {
    let n = f.cells();
    let dim = f.dim;
    let mut out = vec![0.0; n * dim];
    for m in 0..n {
        for nn in 0..n {
            let c = cosine_oracle(f.cell(m), f.cell(nn));
            // K f_n
            for i in 0..dim {
                let mut kf = 0.0;
                for j in 0..dim {
                    kf += k[i * dim + j] * f.cell(nn)[j];
                }
                out[m * dim + i] += c * kf / n as f64;
            }
        }
    }
    out
}

/// Consistency by definition: enumerate retained pairs directly from the
/// coordinates and average the two symmetric cosine terms.
pub fn consistency_oracle(
    f_tilde: &FeatureMap,
    f: &FeatureMap,
    image_size: usize,
    th: f64,
) -> Option<f64> {
    let diag = {
        let ch = image_size as f64 / f.grid_h as f64;
        let cw = image_size as f64 / f.grid_w as f64;
        (ch * ch + cw * cw).sqrt()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for m in 0..f_tilde.cells() {
        let Some((ay, ax)) = f_tilde.src_coords[m] else { continue };
        for n in 0..f.cells() {
            let Some((by, bx)) = f.src_coords[n] else { continue };
            let d = ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt() / diag;
            if d < th {
                total -= cosine_oracle(f_tilde.cell(m), f.cell(n))
                    + cosine_oracle(f.cell(m), f_tilde.cell(n));
                count += 1;
            }
        }
    }
    if count == 0 {
        None
    } else {
        Some(total / count as f64)
    }
}

/// Per-pixel softmax cross-entropy against integer labels, recomputed
/// directly.
pub fn supervised_oracle(logits: &Logits, mask: &SegMask) -> f64 {
    let npix = logits.height * logits.width;
    let mut total = 0.0;
    for px in 0..npix {
        let z: Vec<f64> = (0..logits.classes).map(|k| logits.data[k * npix + px]).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let label = mask.labels()[px] as usize;
        total -= (z[label].exp() / denom).ln();
    }
    total / npix as f64
}

/// Soft-target cross-entropy with teacher softmax recomputed directly.
pub fn reg_oracle(student: &Logits, teacher: &Logits) -> f64 {
    let npix = student.height * student.width;
    let mut total = 0.0;
    for px in 0..npix {
        let zs: Vec<f64> = (0..student.classes)
            .map(|k| student.data[k * npix + px])
            .collect();
        let zt: Vec<f64> = (0..teacher.classes)
            .map(|k| teacher.data[k * npix + px])
            .collect();
        let ds: f64 = zs.iter().map(|v| v.exp()).sum();
        let dt: f64 = zt.iter().map(|v| v.exp()).sum();
        for k in 0..student.classes {
            let q = zt[k].exp() / dt;
            let p = zs[k].exp() / ds;
            total -= q * p.ln();
        }
    }
    total / npix as f64
}

// ---------------------------------------------------------------------------
// Brute-force metric oracles
// ---------------------------------------------------------------------------

pub fn dsc_oracle(pred: &SegMask, gt: &SegMask) -> f64 {
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            let a = pred.get(y, x) == 1;
            let b = gt.get(y, x) == 1;
            p += a as usize;
            g += b as usize;
            inter += (a && b) as usize;
        }
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

fn boundary_oracle(mask: &SegMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != 1 {
                continue;
            }
            let edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
            let bg = (y > 0 && mask.get(y - 1, x) == 0)
                || (y + 1 < h && mask.get(y + 1, x) == 0)
                || (x > 0 && mask.get(y, x - 1) == 0)
                || (x + 1 < w && mask.get(y, x + 1) == 0);
            if edge || bg {
                out.push((y, x));
            }
        }
    }
    out
}

/// All-pairs symmetric boundary Hausdorff distance.
pub fn hausdorff_oracle(pred: &SegMask, gt: &SegMask) -> Option<f64> {
    let bp = boundary_oracle(pred);
    let bg = boundary_oracle(gt);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(gy, gx)| {
                        let dy = y as f64 - gy as f64;
                        let dx = x as f64 - gx as f64;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    Some(directed(&bp, &bg).max(directed(&bg, &bp)))
}
