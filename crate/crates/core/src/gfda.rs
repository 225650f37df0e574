//! Gaussian-weighted spectral style transfer between two images, and the
//! eight-view set consumed by contrastive pretraining.
//!
//! Per channel, the output takes the source phase everywhere and blends the
//! two amplitude spectra under a DC-centered Gaussian mask: target amplitude
//! dominates the low frequencies (style), source amplitude keeps the high
//! frequencies (content detail). A hard rectangular mask is available as a
//! comparison baseline.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synthdata::AugmentRecord;
use crate::tensorfft::{amp_phase, compose, fft2, ifft2_with_residue, AmplitudePhase, Grid2D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default mask width in normalized frequency units.
pub const DEFAULT_SIGMA: f64 = 0.1;

/// Gaussian weighting over centered, normalized frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMask {
    height: usize,
    width: usize,
    sigma: f64,
    values: Grid2D,
}

impl GaussianMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn values(&self) -> &Grid2D {
        &self.values
    }
}

/// `values[u][v] = exp(-(uhat^2 + vhat^2) / (2 sigma^2))` with
/// `uhat = (u - h/2)/h`, `vhat = (v - w/2)/w`; exactly 1 at the DC bin.
pub fn gaussian_mask(height: usize, width: usize, sigma: f64) -> Result<GaussianMask> {
    for (name, n) in [("height", height), ("width", width)] {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::dimension(format!(
                "{name} must be a power of two, got {n}"
            )));
        }
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    let mut values = Grid2D::zeros(height, width);
    for u in 0..height {
        for v in 0..width {
            let uh = (u as f64 - height as f64 / 2.0) / height as f64;
            let vh = (v as f64 - width as f64 / 2.0) / width as f64;
            values.set(u, v, (-(uh * uh + vh * vh) / (2.0 * sigma * sigma)).exp());
        }
    }
    Ok(GaussianMask {
        height,
        width,
        sigma,
        values,
    })
}

/// Hard low-frequency mask: 1 on the centered rectangle where both
/// normalized frequency magnitudes are below `beta / 2`, 0 elsewhere.
/// Comparison baseline only.
pub fn rect_mask(height: usize, width: usize, beta: f64) -> Result<Grid2D> {
    if beta <= 0.0 || beta > 1.0 {
        return Err(Error::domain(format!("beta must be in (0, 1], got {beta}")));
    }
    let mut values = Grid2D::zeros(height, width);
    for u in 0..height {
        for v in 0..width {
            let uh = ((u as f64 - height as f64 / 2.0) / height as f64).abs();
            let vh = ((v as f64 - width as f64 / 2.0) / width as f64).abs();
            if uh <= beta / 2.0 && vh <= beta / 2.0 {
                values.set(u, v, 1.0);
            }
        }
    }
    Ok(values)
}

/// Transfer the style of `x_tgt` onto the content of `x_src` with a
/// Gaussian mask of width `sigma`. Output is clamped to [0, 1].
pub fn spectral_transfer(x_src: &Image, x_tgt: &Image, sigma: f64) -> Result<Image> {
    let mask = gaussian_mask(x_src.height(), x_src.width(), sigma)?;
    let mut out = spectral_transfer_masked(x_src, x_tgt, mask.values())?;
    out.clamp01();
    Ok(out)
}

/// Same transfer with the rectangular baseline mask.
pub fn spectral_transfer_rect(x_src: &Image, x_tgt: &Image, beta: f64) -> Result<Image> {
    let mask = rect_mask(x_src.height(), x_src.width(), beta)?;
    let mut out = spectral_transfer_masked(x_src, x_tgt, &mask)?;
    out.clamp01();
    Ok(out)
}

/// Core blend with an explicit mask and no clamping. Exposed so tests can
/// force degenerate masks and check pre-clamp phase properties.
pub fn spectral_transfer_masked(x_src: &Image, x_tgt: &Image, mask: &Grid2D) -> Result<Image> {
    if !x_src.same_shape(x_tgt) {
        return Err(Error::dimension("source and target image shapes differ"));
    }
    if mask.height() != x_src.height() || mask.width() != x_src.width() {
        return Err(Error::dimension("mask size differs from image"));
    }
    let mut planes = Vec::with_capacity(x_src.channels());
    for c in 0..x_src.channels() {
        let src_spec = fft2(&x_src.channel(c))?;
        let tgt_spec = fft2(&x_tgt.channel(c))?;
        let src = amp_phase(&src_spec);
        let tgt = amp_phase(&tgt_spec);
        let mut amplitude = Grid2D::zeros(mask.height(), mask.width());
        for (i, a) in amplitude.data_mut().iter_mut().enumerate() {
            let m = mask.data()[i];
            *a = tgt.amplitude.data()[i] * m + src.amplitude.data()[i] * (1.0 - m);
        }
        let blended = compose(&AmplitudePhase {
            amplitude,
            phase: src.phase,
        })?;
        let (plane, residue) = ifft2_with_residue(&blended)?;
        // Blends of real-image spectra stay conjugate-symmetric, so the
        // inverse must be real up to rounding.
        debug_assert!(residue < 1e-6, "imaginary residue {residue} out of bound");
        planes.push(plane);
    }
    Image::from_channels(&planes)
}

/// Style group of a view: A looks source-like, B target-like.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    A,
    B,
}

/// Which base view a [`View`] descends from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Source,
    Target,
    SourceToTarget,
    TargetToSource,
}

#[derive(Debug, Clone)]
pub struct View {
    pub image: Image,
    pub style: Style,
    pub instance_id: u64,
    pub kind: ViewKind,
    pub augment: AugmentRecord,
}

impl View {
    pub fn is_augmented(&self) -> bool {
        self.augment != AugmentRecord::identity()
    }
}

/// The quadruple {x_s, x_s->t, x_t, x_t->s} plus one augmented copy of
/// each: eight views, tagged by style and instance.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Build the eight-view set for one source/target pair. `ids` carries the
/// (source, target) instance ids; `aug_seed` drives the four augmentations.
pub fn make_view_set(
    x_s: &Image,
    x_t: &Image,
    ids: (u64, u64),
    sigma: f64,
    aug_seed: u64,
) -> Result<ViewSet> {
    if !x_s.same_shape(x_t) {
        return Err(Error::dimension("view-set images must share dimensions"));
    }
    let (id_s, id_t) = ids;
    let x_s_to_t = spectral_transfer(x_s, x_t, sigma)?;
    let x_t_to_s = spectral_transfer(x_t, x_s, sigma)?;

    let bases = [
        (x_s.clone(), Style::A, id_s, ViewKind::Source),
        (x_t.clone(), Style::B, id_t, ViewKind::Target),
        (x_s_to_t, Style::B, id_s, ViewKind::SourceToTarget),
        (x_t_to_s, Style::A, id_t, ViewKind::TargetToSource),
    ];

    let mut seeder = ChaCha8Rng::seed_from_u64(aug_seed);
    let mut views = Vec::with_capacity(8);
    for (image, style, instance_id, kind) in bases {
        let record = AugmentRecord::random(seeder.random::<u64>(), image.height());
        let augmented = record.apply_to_image(&image)?;
        views.push(View {
            image,
            style,
            instance_id,
            kind,
            augment: AugmentRecord::identity(),
        });
        views.push(View {
            image: augmented,
            style,
            instance_id,
            kind,
            augment: record,
        });
    }
    Ok(ViewSet { views })
}
