//! Two-domain synthetic segmentation benchmark: elliptical foreground blobs
//! rendered under two different styles (bright source with an illumination
//! gradient, dark contrast-inverted target with band-limited texture), plus
//! exact integer augmentations and lossless netpbm I/O.
//!
//! The shape distribution is identical across domains; only the rendering
//! differs, so the domain gap is style-only by construction.

mod manifest;
mod pnm;

pub use manifest::{load_manifest, write_dataset, Manifest, ManifestEntry, SplitTag};
pub use pnm::{read_image, read_mask, write_image, write_mask};

use crate::error::{Error, Result};
use crate::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

/// Integer class labels per pixel; binary (0 = background, 1 = foreground)
/// at desk scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub const CLASSES: usize = 2;

    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dimension(format!(
                "mask label length {} does not match {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        if labels.iter().any(|&l| l as usize >= Self::CLASSES) {
            return Err(Error::domain("mask label outside {0, 1}"));
        }
        Ok(SegMask {
            height,
            width,
            labels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        SegMask {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn same_shape(&self, other: &SegMask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Whether a sample's mask may be consumed by training. T2 masks are
/// evaluation-only; the trainer cannot reach them through `train_mask`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskVisibility {
    Train,
    EvalOnly,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    mask: SegMask,
    visibility: MaskVisibility,
    pub domain: Domain,
    pub id: u64,
}

impl Sample {
    pub fn new(
        image: Image,
        mask: SegMask,
        visibility: MaskVisibility,
        domain: Domain,
        id: u64,
    ) -> Result<Self> {
        if mask.height != image.height() || mask.width != image.width() {
            return Err(Error::dimension("mask dimensions differ from image"));
        }
        if mask.foreground_count() == 0 {
            return Err(Error::domain("sample mask has empty foreground"));
        }
        Ok(Sample {
            image,
            mask,
            visibility,
            domain,
            id,
        })
    }

    /// Mask for gradient computation; `None` when the label is withheld.
    pub fn train_mask(&self) -> Option<&SegMask> {
        match self.visibility {
            MaskVisibility::Train => Some(&self.mask),
            MaskVisibility::EvalOnly => None,
        }
    }

    /// Mask for metric computation only.
    pub fn eval_mask(&self) -> &SegMask {
        &self.mask
    }

    pub fn visibility(&self) -> MaskVisibility {
        self.visibility
    }

    pub fn is_labeled(&self) -> bool {
        self.visibility == MaskVisibility::Train
    }

    fn withhold_label(mut self) -> Self {
        self.visibility = MaskVisibility::EvalOnly;
        self
    }
}

/// Style knobs for the two renderings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct StyleParams {
    pub source_bg: f64,
    pub source_fg: f64,
    pub grad_amp: f64,
    pub target_bg: f64,
    pub target_fg: f64,
    pub texture_amp: f64,
    pub noise_sigma: f64,
    /// Per-sample uniform brightness jitter applied to fg/bg levels, so
    /// absolute intensity alone cannot identify content.
    pub level_jitter: f64,
    /// Additional per-sample jitter on the foreground level only, varying
    /// the fg/bg contrast within each domain.
    pub contrast_jitter: f64,
    /// High-frequency texture painted over source foreground pixels.
    pub fg_texture_src: f64,
    /// High-frequency texture painted over target foreground pixels.
    pub fg_texture_tgt: f64,
}

impl Default for StyleParams {
    fn default() -> Self {
        StyleParams {
            source_bg: 0.80,
            source_fg: 0.35,
            grad_amp: 0.10,
            target_bg: 0.15,
            target_fg: 0.62,
            texture_amp: 0.16,
            noise_sigma: 0.03,
            level_jitter: 0.06,
            contrast_jitter: 0.0,
            fg_texture_src: 0.10,
            fg_texture_tgt: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenParams {
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    /// Test samples per domain.
    pub n_test: usize,
    pub size: usize,
    pub style: StyleParams,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 0,
            n_source: 40,
            n_target: 40,
            n_test: 16,
            size: 64,
            style: StyleParams::default(),
        }
    }
}

/// Generated pools before the target split is chosen.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
    pub test_source: Vec<Sample>,
    pub test_target: Vec<Sample>,
    pub params: GenParams,
}

/// Final training layout: labeled source, labeled target (T1), unlabeled
/// target (T2, masks withheld), and held-out test sets.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub source: Vec<Sample>,
    pub t1: Vec<Sample>,
    pub t2: Vec<Sample>,
    pub test_source: Vec<Sample>,
    pub test_target: Vec<Sample>,
    pub params: GenParams,
}

/// Labeled-target budget, either a fraction of |T| or an absolute count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LabeledAmount {
    Fraction(f64),
    Count(usize),
}

impl LabeledAmount {
    pub fn resolve(&self, n: usize) -> usize {
        match *self {
            LabeledAmount::Fraction(f) => (f * n as f64).round() as usize,
            LabeledAmount::Count(c) => c,
        }
    }
}

/// Generate the two-domain benchmark. Each sample renders 1-3 random
/// ellipses over a styled background; every sample derives its own RNG
/// stream from `(seed, ordinal)` so generation order cannot matter.
pub fn generate(params: &GenParams) -> Result<Dataset> {
    if params.size != 32 && params.size != 64 {
        return Err(Error::config(format!(
            "size must be 32 or 64, got {}",
            params.size
        )));
    }
    if params.n_source < 4 || params.n_target < 4 {
        return Err(Error::config(
            "need at least 4 samples per training domain",
        ));
    }
    if params.n_test < 1 {
        return Err(Error::config("need at least 1 test sample per domain"));
    }

    let mut ordinal = 0u64;
    let mut next = |domain: Domain, count: usize| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(render_sample(params, domain, ordinal)?);
            ordinal += 1;
        }
        Ok(out)
    };

    let source = next(Domain::Source, params.n_source)?;
    let target = next(Domain::Target, params.n_target)?;
    let test_source = next(Domain::Source, params.n_test)?;
    let test_target = next(Domain::Target, params.n_test)?;
    Ok(Dataset {
        source,
        target,
        test_source,
        test_target,
        params: params.clone(),
    })
}

fn render_sample(params: &GenParams, domain: Domain, ordinal: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(ordinal + 1);
    let n = params.size;
    let s = &params.style;

    // Shape stream first, so content statistics are domain-independent.
    let blob_count = rng.random_range(2..=4usize);
    let mut mask = SegMask::zeros(n, n);
    for _ in 0..blob_count {
        let cy = rng.random_range(0.2..0.8) * n as f64;
        let cx = rng.random_range(0.2..0.8) * n as f64;
        let a = rng.random_range(0.08..0.24) * n as f64;
        let b = rng.random_range(0.08..0.24) * n as f64;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..n {
            for x in 0..n {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = (dx * ct + dy * st) / a;
                let v = (-dx * st + dy * ct) / b;
                if u * u + v * v <= 1.0 {
                    mask.set(y, x, 1);
                }
            }
        }
    }

    let mut img = Image::zeros(n, n, 1);
    let jitter = rng.random_range(-s.level_jitter..=s.level_jitter);
    let fg_jitter = jitter
        + if s.contrast_jitter > 0.0 {
            rng.random_range(-s.contrast_jitter..=s.contrast_jitter)
        } else {
            0.0
        };
    let fg_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    match domain {
        Domain::Source => {
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (gy, gx) = (phi.sin(), phi.cos());
            for y in 0..n {
                for x in 0..n {
                    let base = if mask.get(y, x) == 1 {
                        let stripes = s.fg_texture_src
                            * (std::f64::consts::TAU * (7.0 * y as f64 + 11.0 * x as f64)
                                / n as f64
                                + fg_phase)
                                .sin();
                        s.source_fg + fg_jitter + stripes
                    } else {
                        s.source_bg + jitter
                    };
                    let grad = s.grad_amp
                        * ((y as f64 / n as f64 - 0.5) * gy + (x as f64 / n as f64 - 0.5) * gx);
                    img.set(0, y, x, base + grad);
                }
            }
        }
        Domain::Target => {
            let mut waves = [(0.0f64, 0.0f64, 0.0f64); 4];
            for w in &mut waves {
                let fy = rng.random_range(3..=6) as f64;
                let fx = rng.random_range(3..=6) as f64;
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                *w = (fy, fx, phase);
            }
            let amp = s.texture_amp / waves.len() as f64;
            for y in 0..n {
                for x in 0..n {
                    let base = if mask.get(y, x) == 1 {
                        let weave = s.fg_texture_tgt
                            * (std::f64::consts::TAU * (9.0 * y as f64 + 4.0 * x as f64)
                                / n as f64
                                + fg_phase)
                                .cos();
                        s.target_fg + fg_jitter + weave
                    } else {
                        s.target_bg + jitter
                    };
                    let mut tex = 0.0;
                    for &(fy, fx, phase) in &waves {
                        tex += amp
                            * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / n as f64
                                + phase)
                                .sin();
                    }
                    img.set(0, y, x, base + tex);
                }
            }
        }
    }
    // Pixel noise, same statistics in both domains.
    for v in img.data_mut() {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        let gauss = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        *v += s.noise_sigma * gauss;
    }
    img.clamp01();
    Sample::new(img, mask, MaskVisibility::Train, domain, ordinal)
}

/// Deterministically split the target pool into labeled T1 and unlabeled T2
/// (labels flagged evaluation-only). Either side empty is an error.
pub fn split_target(
    target: &[Sample],
    amount: LabeledAmount,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let n = target.len();
    let k = amount.resolve(n);
    if k == 0 || k >= n {
        return Err(Error::config(format!(
            "labeled count {k} leaves an empty side of a {n}-sample target pool"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let t1: Vec<Sample> = indices[..k].iter().map(|&i| target[i].clone()).collect();
    let t2: Vec<Sample> = indices[k..]
        .iter()
        .map(|&i| target[i].clone().withhold_label())
        .collect();
    Ok((t1, t2))
}

impl Dataset {
    /// SSDA layout: T1 keeps labels, T2 is withheld.
    pub fn with_labeled(&self, amount: LabeledAmount, seed: u64) -> Result<DatasetSplit> {
        let (t1, t2) = split_target(&self.target, amount, seed)?;
        Ok(DatasetSplit {
            source: self.source.clone(),
            t1,
            t2,
            test_source: self.test_source.clone(),
            test_target: self.test_target.clone(),
            params: self.params.clone(),
        })
    }

    /// UDA layout: no target labels at all; every target sample is T2.
    pub fn unlabeled_split(&self) -> DatasetSplit {
        DatasetSplit {
            source: self.source.clone(),
            t1: Vec::new(),
            t2: self
                .target
                .iter()
                .map(|s| s.clone().withhold_label())
                .collect(),
            test_source: self.test_source.clone(),
            test_target: self.test_target.clone(),
            params: self.params.clone(),
        }
    }
}

/// Axis-aligned 90-degree rotation steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn inverse(self) -> Rotation {
        match self {
            Rotation::R0 => Rotation::R0,
            Rotation::R90 => Rotation::R270,
            Rotation::R180 => Rotation::R180,
            Rotation::R270 => Rotation::R90,
        }
    }

    /// Map original coordinates into the rotated frame of an n x n grid.
    /// Exact for integer-valued inputs.
    fn map(self, y: f64, x: f64, n: f64) -> (f64, f64) {
        match self {
            Rotation::R0 => (y, x),
            Rotation::R90 => (x, n - 1.0 - y),
            Rotation::R180 => (n - 1.0 - y, n - 1.0 - x),
            Rotation::R270 => (n - 1.0 - x, y),
        }
    }
}

/// Invertible record of one augmentation: rotate by a multiple of 90
/// degrees, then translate with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub rotation: Rotation,
    pub dy: i32,
    pub dx: i32,
}

impl AugmentRecord {
    pub fn identity() -> Self {
        AugmentRecord {
            rotation: Rotation::R0,
            dy: 0,
            dx: 0,
        }
    }

    /// Draw rotation and translation (|dy|, |dx| <= size/8) from `seed`.
    pub fn random(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotation = match rng.random_range(0..4u8) {
            0 => Rotation::R0,
            1 => Rotation::R90,
            2 => Rotation::R180,
            _ => Rotation::R270,
        };
        let t = (size / 8) as i32;
        AugmentRecord {
            rotation,
            dy: rng.random_range(-t..=t),
            dx: rng.random_range(-t..=t),
        }
    }

    /// Original coordinates -> augmented coordinates (continuous).
    pub fn forward(&self, y: f64, x: f64, n: usize) -> (f64, f64) {
        let (ry, rx) = self.rotation.map(y, x, n as f64);
        (ry + self.dy as f64, rx + self.dx as f64)
    }

    /// Augmented coordinates -> original coordinates, or `None` when the
    /// augmented pixel lies in the zero-padded region.
    pub fn inverse(&self, y: f64, x: f64, n: usize) -> Option<(f64, f64)> {
        let py = y - self.dy as f64;
        let px = x - self.dx as f64;
        let lo = -0.5;
        let hi = n as f64 - 0.5;
        if py < lo || py > hi || px < lo || px > hi {
            return None;
        }
        Some(self.rotation.inverse().map(py, px, n as f64))
    }

    pub fn apply_to_image(&self, image: &Image) -> Result<Image> {
        let n = image.height();
        if image.width() != n {
            return Err(Error::dimension("augmentation requires square images"));
        }
        let mut out = Image::zeros(n, n, image.channels());
        for c in 0..image.channels() {
            for y in 0..n {
                for x in 0..n {
                    if let Some((sy, sx)) = self.inverse(y as f64, x as f64, n) {
                        let (sy, sx) = (sy.round() as usize, sx.round() as usize);
                        out.set(c, y, x, image.get(c, sy, sx));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn apply_to_mask(&self, mask: &SegMask) -> Result<SegMask> {
        let n = mask.height();
        if mask.width() != n {
            return Err(Error::dimension("augmentation requires square masks"));
        }
        let mut out = SegMask::zeros(n, n);
        for y in 0..n {
            for x in 0..n {
                if let Some((sy, sx)) = self.inverse(y as f64, x as f64, n) {
                    out.set(y, x, mask.get(sy.round() as usize, sx.round() as usize));
                }
            }
        }
        Ok(out)
    }
}

/// Augment an image/mask pair with a seeded random rotation + translation,
/// returning the transformed pair and the invertible record.
pub fn augment(image: &Image, mask: &SegMask, seed: u64) -> Result<(Image, SegMask, AugmentRecord)> {
    let record = AugmentRecord::random(seed, image.height());
    Ok((
        record.apply_to_image(image)?,
        record.apply_to_mask(mask)?,
        record,
    ))
}
