//! Binary checkpoint format: magic bytes, format version, then a named
//! f64-array table (name, shape, payload), all little-endian. Loading
//! validates everything before constructing any state, so a truncated or
//! tampered file never yields a partial checkpoint.

use super::model::Tensor;
use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 8] = *b"FDASEGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.arrays.insert(name.into(), tensor);
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.insert(
            name,
            Tensor {
                shape: vec![1],
                data: vec![value],
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.data.len() != 1 {
            return Err(Error::Checkpoint(format!("{name} is not a scalar")));
        }
        Ok(t.data[0])
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.arrays {
        let expected: usize = tensor.shape.iter().product();
        if expected != tensor.data.len() {
            return Err(Error::Checkpoint(format!(
                "array {name} shape/data mismatch"
            )));
        }
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &tensor.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic bytes; refusing to load".into(),
        ));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        arrays.insert(name, Tensor { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { arrays })
}

/// Collect every `prefix.`-named array into a model state, shapes taken
/// from the file.
pub fn extract_state(
    ckpt: &Checkpoint,
    prefix: &str,
) -> Result<crate::netcore::model::ModelState> {
    let mut state = crate::netcore::model::ModelState::new();
    let full = format!("{prefix}.");
    for (name, tensor) in &ckpt.arrays {
        if let Some(param) = name.strip_prefix(&full) {
            state.insert(param.to_string(), tensor.clone());
        }
    }
    if state.param_count() == 0 {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds no arrays under {prefix}"
        )));
    }
    Ok(state)
}

/// Encode a ChaCha cursor (seed, stream, word position) as f64 arrays so
/// it fits the named-array table. Limbs are 32-bit so every value is exact.
pub fn rng_to_arrays(prefix: &str, rng: &ChaCha8Rng) -> Vec<(String, Tensor)> {
    let seed = rng.get_seed();
    let stream = rng.get_stream();
    let pos = rng.get_word_pos();
    let limbs: Vec<f64> = (0..4)
        .map(|i| ((pos >> (32 * i)) & 0xFFFF_FFFF) as f64)
        .collect();
    vec![
        (
            format!("{prefix}.seed"),
            Tensor {
                shape: vec![32],
                data: seed.iter().map(|&b| b as f64).collect(),
            },
        ),
        (
            format!("{prefix}.stream"),
            Tensor {
                shape: vec![2],
                data: vec![(stream & 0xFFFF_FFFF) as f64, (stream >> 32) as f64],
            },
        ),
        (
            format!("{prefix}.word_pos"),
            Tensor {
                shape: vec![4],
                data: limbs,
            },
        ),
    ]
}

pub fn rng_from_arrays(prefix: &str, ckpt: &Checkpoint) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let seed_t = ckpt.get(&format!("{prefix}.seed"))?;
    if seed_t.data.len() != 32 {
        return Err(Error::Checkpoint(format!("{prefix}.seed must have 32 bytes")));
    }
    let mut seed = [0u8; 32];
    for (b, &v) in seed.iter_mut().zip(&seed_t.data) {
        *b = v as u8;
    }
    let stream_t = ckpt.get(&format!("{prefix}.stream"))?;
    let stream = (stream_t.data[0] as u64) | ((stream_t.data[1] as u64) << 32);
    let pos_t = ckpt.get(&format!("{prefix}.word_pos"))?;
    let mut pos: u128 = 0;
    for (i, &limb) in pos_t.data.iter().enumerate() {
        pos |= (limb as u128) << (32 * i);
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}
