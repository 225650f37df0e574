//! Dataset manifest: a JSON file listing sample paths, domains, split
//! membership, and generator parameters, next to the netpbm files.

use super::{
    read_image, read_mask, write_image, write_mask, Dataset, DatasetSplit, Domain, GenParams,
    MaskVisibility, Sample,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    S,
    T1,
    T2,
    TestS,
    TestT,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub domain: Domain,
    pub split: SplitTag,
    pub id: u64,
    pub labeled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub params: GenParams,
    pub samples: Vec<ManifestEntry>,
}

fn dump_group(
    dir: &Path,
    samples: &[Sample],
    split: SplitTag,
    entries: &mut Vec<ManifestEntry>,
) -> Result<()> {
    for s in samples {
        let image = format!("img_{:04}.pgm", s.id);
        let mask = format!("mask_{:04}.pgm", s.id);
        write_image(&dir.join(&image), &s.image)?;
        write_mask(&dir.join(&mask), s.eval_mask())?;
        entries.push(ManifestEntry {
            image,
            mask,
            domain: s.domain,
            split,
            id: s.id,
            labeled: s.is_labeled(),
        });
    }
    Ok(())
}

/// Write every sample of a split plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, split: &DatasetSplit) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    dump_group(dir, &split.source, SplitTag::S, &mut entries)?;
    dump_group(dir, &split.t1, SplitTag::T1, &mut entries)?;
    dump_group(dir, &split.t2, SplitTag::T2, &mut entries)?;
    dump_group(dir, &split.test_source, SplitTag::TestS, &mut entries)?;
    dump_group(dir, &split.test_target, SplitTag::TestT, &mut entries)?;
    let manifest = Manifest {
        params: split.params.clone(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Load a dataset back from its manifest. T2 samples come back with their
/// labels withheld, exactly as they were written.
pub fn load_manifest(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("manifest parse: {e}")))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut split = DatasetSplit {
        source: Vec::new(),
        t1: Vec::new(),
        t2: Vec::new(),
        test_source: Vec::new(),
        test_target: Vec::new(),
        params: manifest.params.clone(),
    };
    for e in &manifest.samples {
        let image = read_image(&dir.join(&e.image))?;
        let mask = read_mask(&dir.join(&e.mask))?;
        let visibility = if e.labeled {
            MaskVisibility::Train
        } else {
            MaskVisibility::EvalOnly
        };
        let sample = Sample::new(image, mask, visibility, e.domain, e.id)?;
        match e.split {
            SplitTag::S => split.source.push(sample),
            SplitTag::T1 => split.t1.push(sample),
            SplitTag::T2 => split.t2.push(sample),
            SplitTag::TestS => split.test_source.push(sample),
            SplitTag::TestT => split.test_target.push(sample),
        }
    }
    Ok(split)
}

impl Dataset {
    /// Convenience for tools that store the raw pools before splitting.
    pub fn sample_count(&self) -> usize {
        self.source.len() + self.target.len() + self.test_source.len() + self.test_target.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, GenParams, LabeledAmount};

    #[test]
    fn manifest_roundtrip_preserves_split_and_visibility() {
        let params = GenParams {
            seed: 17,
            n_source: 4,
            n_target: 6,
            n_test: 2,
            size: 32,
            ..GenParams::default()
        };
        let ds = generate(&params).unwrap();
        let split = ds.with_labeled(LabeledAmount::Fraction(0.5), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &split).unwrap();
        let back = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back.source.len(), 4);
        assert_eq!(back.t1.len(), 3);
        assert_eq!(back.t2.len(), 3);
        assert!(back.t2.iter().all(|s| s.train_mask().is_none()));
        assert!(back.t1.iter().all(|s| s.train_mask().is_some()));
        // Pixel data survives within 16-bit quantization.
        for (a, b) in split.source.iter().zip(&back.source) {
            assert!(a.image.max_abs_diff(&b.image).unwrap() <= 0.5 / 65535.0 + 1e-12);
            assert_eq!(a.eval_mask(), b.eval_mask());
        }
    }
}
