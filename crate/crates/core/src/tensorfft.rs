//! Dense 2-D array arithmetic and exact forward/inverse Fourier transforms
//! with amplitude/phase decomposition.
//!
//! Conventions:
//! - forward transform is unnormalized, inverse divides by H*W, so
//!   `sum |g|^2 = (1/(H*W)) * sum |fft2(g)|^2` (Parseval);
//! - every `Spectrum` is DC-centered: the zero-frequency bin sits at
//!   (h/2, w/2). The shift happens inside `fft2`/`ifft2` and is never
//!   exposed;
//! - sizes are powers of two only.

use crate::error::{Error, Result};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Dense real-valued grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dimension(format!(
                "grid data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("grid contains non-finite values"));
        }
        Ok(Grid2D {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Grid2D {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn max_abs_diff(&self, other: &Grid2D) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Complex 2-D frequency representation of one channel, DC-centered.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
    dc_centered: bool,
}

impl Spectrum {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>, dc_centered: bool) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dimension(format!(
                "spectrum data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Spectrum {
            height,
            width,
            data,
            dc_centered,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn dc_centered(&self) -> bool {
        self.dc_centered
    }

    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.data[u * self.width + v]
    }

    /// Index of the zero-frequency bin in the centered layout.
    pub fn dc_index(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn max_abs_diff(&self, other: &Spectrum) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Polar split of a spectrum: non-negative amplitude and phase in (-pi, pi].
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudePhase {
    pub amplitude: Grid2D,
    pub phase: Grid2D,
}

fn require_power_of_two(height: usize, width: usize) -> Result<()> {
    for (name, n) in [("height", height), ("width", width)] {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::dimension(format!(
                "{name} must be a nonzero power of two, got {n}"
            )));
        }
    }
    Ok(())
}

/// In-place iterative radix-2 transform of one line. `invert` flips the
/// twiddle sign; normalization is the caller's business.
fn fft_line(buf: &mut [Complex64], invert: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if invert { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let even = buf[i + k];
                let odd = buf[i + k + len / 2] * w;
                buf[i + k] = even + odd;
                buf[i + k + len / 2] = even - odd;
                w *= wlen;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Transform every row, then every column, of a row-major complex grid.
fn fft_grid(data: &mut [Complex64], height: usize, width: usize, invert: bool) {
    for row in data.chunks_mut(width) {
        fft_line(row, invert);
    }
    let mut col = vec![Complex64::default(); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = data[y * width + x];
        }
        fft_line(&mut col, invert);
        for y in 0..height {
            data[y * width + x] = col[y];
        }
    }
}

/// Swap quadrants so the zero-frequency bin moves between corner (0,0) and
/// center (h/2, w/2). Self-inverse for the even sizes this crate allows.
fn shift_center(data: &[Complex64], height: usize, width: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); data.len()];
    let (hc, wc) = (height / 2, width / 2);
    for y in 0..height {
        for x in 0..width {
            let sy = (y + hc) % height;
            let sx = (x + wc) % width;
            out[sy * width + sx] = data[y * width + x];
        }
    }
    out
}

/// Forward 2-D transform. Requires power-of-two dimensions; output is
/// DC-centered and unnormalized.
pub fn fft2(g: &Grid2D) -> Result<Spectrum> {
    require_power_of_two(g.height, g.width)?;
    let mut data: Vec<Complex64> = g.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_grid(&mut data, g.height, g.width, false);
    let centered = shift_center(&data, g.height, g.width);
    Spectrum::new(g.height, g.width, centered, true)
}

/// Inverse 2-D transform. Returns the real part; the imaginary residue is
/// discarded. Use [`ifft2_with_residue`] where the residue bound matters.
pub fn ifft2(s: &Spectrum) -> Result<Grid2D> {
    ifft2_with_residue(s).map(|(g, _)| g)
}

/// Inverse transform returning `(real grid, max-abs imaginary residue)`.
///
/// For spectra assembled from blends of real-image spectra the residue is
/// bounded by rounding noise; callers that rely on this assert the bound.
pub fn ifft2_with_residue(s: &Spectrum) -> Result<(Grid2D, f64)> {
    require_power_of_two(s.height, s.width)?;
    if !s.dc_centered {
        return Err(Error::dimension("spectrum must be DC-centered"));
    }
    let mut data = shift_center(&s.data, s.height, s.width);
    fft_grid(&mut data, s.height, s.width, true);
    let norm = 1.0 / (s.height * s.width) as f64;
    let mut residue = 0.0f64;
    let mut real = Vec::with_capacity(data.len());
    for z in &data {
        let z = z * norm;
        residue = residue.max(z.im.abs());
        real.push(z.re);
    }
    Ok((Grid2D::new(s.height, s.width, real)?, residue))
}

/// Elementwise polar split: amplitude = |s|, phase = arg(s) in (-pi, pi].
pub fn amp_phase(s: &Spectrum) -> AmplitudePhase {
    let mut amp = Vec::with_capacity(s.data.len());
    let mut phase = Vec::with_capacity(s.data.len());
    for z in &s.data {
        amp.push(z.norm());
        let mut p = z.im.atan2(z.re);
        if p == -PI {
            p = PI;
        }
        phase.push(p);
    }
    AmplitudePhase {
        amplitude: Grid2D {
            height: s.height,
            width: s.width,
            data: amp,
        },
        phase: Grid2D {
            height: s.height,
            width: s.width,
            data: phase,
        },
    }
}

/// Rebuild a spectrum from polar parts: `amp * (cos phase + i sin phase)`.
/// Negative amplitude anywhere is a domain error.
pub fn compose(ap: &AmplitudePhase) -> Result<Spectrum> {
    if ap.amplitude.height != ap.phase.height || ap.amplitude.width != ap.phase.width {
        return Err(Error::dimension("amplitude and phase sizes differ"));
    }
    let mut data = Vec::with_capacity(ap.amplitude.data.len());
    for (&a, &p) in ap.amplitude.data.iter().zip(&ap.phase.data) {
        if a < 0.0 {
            return Err(Error::domain(format!("negative amplitude {a}")));
        }
        data.push(Complex64::new(a * p.cos(), a * p.sin()));
    }
    Spectrum::new(ap.amplitude.height, ap.amplitude.width, data, true)
}
