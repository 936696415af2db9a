//! Labeled dataset container (`HIERDAT`).
//!
//! Payload layout: `n · dim` f32 little-endian coordinates in sample order,
//! then `n` u32 little-endian subclass labels. Coordinates are stored at f32
//! precision; the pipeline treats the file, not the in-memory f64 batch, as
//! the dataset of record, so everything downstream of a save/load sees
//! identical values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphs::GlyphSpec;
use crate::mixture::LabeledSample;
use crate::taxonomy::Taxonomy;

use super::{
    expect_consumed, f32_payload, read_container, u32_payload, write_container, DATASET_MAGIC,
};

/// Where a dataset's points came from. Procedural sources carry enough to
/// regenerate the data exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Mixture { seed: u64, superclass_spread: f64, subclass_spread: f64, noise_scale: f64 },
    Glyphs { spec: GlyphSpec, seed: u64 },
    External,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    taxonomy: Taxonomy,
    dim: usize,
    n_samples: usize,
    source: DataSource,
}

/// A dataset plus the metadata that travels with it on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub taxonomy: Taxonomy,
    pub dim: usize,
    pub source: DataSource,
    pub samples: Vec<LabeledSample>,
}

impl DatasetFile {
    pub fn new(
        taxonomy: Taxonomy,
        dim: usize,
        source: DataSource,
        samples: Vec<LabeledSample>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dataset dim must be >= 1"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.x0.len() != dim {
                return Err(Error::invalid(format!(
                    "sample {i} has {} coordinates, dataset dim is {dim}",
                    s.x0.len()
                )));
            }
            if s.subclass >= taxonomy.n_sub() {
                return Err(Error::invalid(format!(
                    "sample {i} labeled {} but taxonomy has {} subclasses",
                    s.subclass,
                    taxonomy.n_sub()
                )));
            }
            if s.x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("sample {i} has non-finite coordinates")));
            }
        }
        Ok(Self { taxonomy, dim, source, samples })
    }
}

pub fn save_dataset(path: &Path, ds: &DatasetFile) -> Result<()> {
    let n = ds.samples.len();
    let mut payload = Vec::with_capacity(n * ds.dim * 4 + n * 4);
    for s in &ds.samples {
        for &v in &s.x0 {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for s in &ds.samples {
        let label = u32::try_from(s.subclass)
            .map_err(|_| Error::invalid(format!("subclass {} exceeds u32", s.subclass)))?;
        payload.extend_from_slice(&label.to_le_bytes());
    }
    let header = DatasetHeader {
        taxonomy: ds.taxonomy.clone(),
        dim: ds.dim,
        n_samples: n,
        source: ds.source.clone(),
    };
    write_container(path, DATASET_MAGIC, &header, &payload)
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    let (header, payload): (DatasetHeader, Vec<u8>) = read_container(path, DATASET_MAGIC)?;
    let n = header.n_samples;
    let (coords, rest) = f32_payload(&payload, n * header.dim, "dataset coordinates")?;
    let (labels, rest) = u32_payload(rest, n, "dataset labels")?;
    expect_consumed(rest, "dataset")?;
    let samples: Vec<LabeledSample> = coords
        .chunks_exact(header.dim)
        .zip(&labels)
        .map(|(x0, &label)| LabeledSample { x0: x0.to_vec(), subclass: label as usize })
        .collect();
    // Re-validate through the constructor so corrupt labels are caught.
    DatasetFile::new(header.taxonomy, header.dim, header.source, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::GaussianMixture;

    fn sample_file() -> DatasetFile {
        let tax = Taxonomy::uniform(2, 2).unwrap();
        let mix = GaussianMixture::hierarchical(&tax, 2, 5, 6.0, 1.5, 0.4).unwrap();
        let samples = mix.sample_per_class(10, 3).unwrap();
        DatasetFile::new(
            tax,
            2,
            DataSource::Mixture {
                seed: 5,
                superclass_spread: 6.0,
                subclass_spread: 1.5,
                noise_scale: 0.4,
            },
            samples,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_everything_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.hierdat");
        let ds = sample_file();
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.taxonomy, ds.taxonomy);
        assert_eq!(back.dim, ds.dim);
        assert_eq!(back.source, ds.source);
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a.subclass, b.subclass);
            for (&x, &y) in a.x0.iter().zip(&b.x0) {
                assert_eq!(x, y as f32 as f64);
            }
        }
    }

    #[test]
    fn second_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.hierdat");
        let p2 = dir.path().join("b.hierdat");
        save_dataset(&p1, &sample_file()).unwrap();
        let once = load_dataset(&p1).unwrap();
        save_dataset(&p2, &once).unwrap();
        let twice = load_dataset(&p2).unwrap();
        assert_eq!(once, twice);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn glyph_datasets_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.hierdat");
        let tax = Taxonomy::uniform(2, 2).unwrap();
        let spec = GlyphSpec { side: 8, ..GlyphSpec::default() };
        let samples = crate::glyphs::render_dataset(&tax, &spec, 3, 9).unwrap();
        let ds = DatasetFile::new(
            tax,
            64,
            DataSource::Glyphs { spec: spec.clone(), seed: 9 },
            samples,
        )
        .unwrap();
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.source, ds.source);
        assert_eq!(back.samples.len(), 12);
    }

    #[test]
    fn constructor_rejects_bad_shapes_and_labels() {
        let tax = Taxonomy::uniform(2, 2).unwrap();
        let good = LabeledSample { x0: vec![0.0, 1.0], subclass: 0 };
        let short = LabeledSample { x0: vec![0.0], subclass: 0 };
        let wild = LabeledSample { x0: vec![0.0, 1.0], subclass: 9 };
        let nan = LabeledSample { x0: vec![f64::NAN, 1.0], subclass: 0 };
        assert!(DatasetFile::new(tax.clone(), 2, DataSource::External, vec![good.clone()]).is_ok());
        assert!(DatasetFile::new(tax.clone(), 2, DataSource::External, vec![short]).is_err());
        assert!(DatasetFile::new(tax.clone(), 2, DataSource::External, vec![wild]).is_err());
        assert!(DatasetFile::new(tax.clone(), 2, DataSource::External, vec![nan]).is_err());
        assert!(DatasetFile::new(tax, 2, DataSource::External, vec![]).is_err());
    }

    #[test]
    fn corrupt_label_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.hierdat");
        let ds = sample_file();
        save_dataset(&path, &ds).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Overwrite the last label with a subclass the taxonomy lacks.
        let at = bytes.len() - 4;
        bytes[at..].copy_from_slice(&999u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.hierdat");
        save_dataset(&path, &sample_file()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
