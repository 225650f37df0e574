//! Lossless 16-bit PGM/PPM image I/O and 8-bit PGM masks.
//!
//! Images are written with maxval 65535 (big-endian samples per the netpbm
//! spec); masks with maxval 255 and values {0, 255}. The reader accepts
//! both maxvals and reports malformed input with the byte offset.

use super::SegMask;
use crate::error::{Error, Result};
use crate::image::Image;
use std::fs;
use std::path::Path;

const IMAGE_MAXVAL: u32 = 65535;

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let magic = match image.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::dimension(format!(
                "netpbm supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut bytes = format!(
        "{magic}\n{} {}\n{IMAGE_MAXVAL}\n",
        image.width(),
        image.height()
    )
    .into_bytes();
    // Interleave channels per pixel, most significant byte first.
    for y in 0..image.height() {
        for x in 0..image.width() {
            for c in 0..image.channels() {
                let v = (image.get(c, y, x).clamp(0.0, 1.0) * IMAGE_MAXVAL as f64).round() as u16;
                bytes.extend_from_slice(&v.to_be_bytes());
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut p = Parser::new(&bytes);
    let magic = p.magic()?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => {
            return Err(Error::Parse {
                offset: 0,
                message: "expected P5 or P6 magic".into(),
            })
        }
    };
    let width = p.ascii_number()? as usize;
    let height = p.ascii_number()? as usize;
    let maxval = p.ascii_number()?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse {
            offset: p.pos,
            message: format!("maxval {maxval} out of range"),
        });
    }
    p.single_whitespace()?;
    let two_byte = maxval > 255;
    let samples = width * height * channels;
    let mut data = vec![0.0; samples];
    for i in 0..samples {
        let raw = if two_byte { p.be_u16()? as u32 } else { p.u8()? as u32 };
        if raw > maxval {
            return Err(Error::Parse {
                offset: p.pos,
                message: format!("sample {raw} exceeds maxval {maxval}"),
            });
        }
        // File order is pixel-interleaved; storage is channel-planar.
        let pixel = i / channels;
        let c = i % channels;
        data[c * width * height + pixel] = raw as f64 / maxval as f64;
    }
    Image::new(height, width, channels, data)
}

pub fn write_mask(path: &Path, mask: &SegMask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    bytes.extend(mask.labels().iter().map(|&l| if l == 1 { 255u8 } else { 0 }));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<SegMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut p = Parser::new(&bytes);
    if p.magic()? != b"P5" {
        return Err(Error::Parse {
            offset: 0,
            message: "expected P5 magic for mask".into(),
        });
    }
    let width = p.ascii_number()? as usize;
    let height = p.ascii_number()? as usize;
    let maxval = p.ascii_number()?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: p.pos,
            message: format!("mask maxval must be 255, got {maxval}"),
        });
    }
    p.single_whitespace()?;
    let mut labels = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        labels.push(if p.u8()? > 127 { 1 } else { 0 });
    }
    SegMask::new(height, width, labels)
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Parser { bytes, pos: 0 }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn magic(&mut self) -> Result<&'a [u8]> {
        if self.bytes.len() < 2 {
            return Err(self.err("truncated header"));
        }
        let m = &self.bytes[..2];
        self.pos = 2;
        Ok(m)
    }

    /// Skip whitespace and `#` comments, then parse a decimal number.
    fn ascii_number(&mut self) -> Result<u32> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        let mut value: u64 = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_digit() {
                value = value * 10 + (b - b'0') as u64;
                if value > u32::MAX as u64 {
                    return Err(self.err("number overflows"));
                }
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.err("expected decimal number"));
        }
        Ok(value as u32)
    }

    /// Exactly one whitespace byte separates the header from the payload.
    fn single_whitespace(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err("expected single whitespace before payload")),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| self.err("truncated payload"))?;
        self.pos += 1;
        Ok(b)
    }

    fn be_u16(&mut self) -> Result<u16> {
        let hi = self.u8()? as u16;
        let lo = self.u8()? as u16;
        Ok((hi << 8) | lo)
    }
}
