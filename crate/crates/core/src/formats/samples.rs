//! Generated-sample container (`HIERSMP`).
//!
//! Same payload layout as datasets (f32 coordinates then u32 labels), but
//! the header records how the batch was produced: guidance settings, step
//! count, sampler seed, and optionally a digest of the checkpoint used.
//! `samples_payload` exposes the payload bytes alone so callers can compare
//! the generated numbers across runs whose headers legitimately differ.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::mixture::LabeledSample;
use crate::taxonomy::Taxonomy;

use super::{
    expect_consumed, f32_payload, read_container, u32_payload, write_container, SAMPLES_MAGIC,
};

/// Provenance of a generated batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesMeta {
    pub taxonomy: Taxonomy,
    pub dim: usize,
    pub n_samples: usize,
    pub guidance: GuidanceConfig,
    /// Sampling chain length (the respaced count, not the training T).
    pub n_steps: usize,
    pub seed: u64,
    /// Hex SHA-256 of the checkpoint file the batch was sampled from, when
    /// one was involved (analytic-oracle batches have none).
    pub checkpoint_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplesFile {
    pub meta: SamplesMeta,
    pub samples: Vec<LabeledSample>,
}

impl SamplesFile {
    pub fn new(meta: SamplesMeta, samples: Vec<LabeledSample>) -> Result<Self> {
        meta.guidance.validate()?;
        if meta.n_samples != samples.len() {
            return Err(Error::invalid(format!(
                "metadata says {} samples, got {}",
                meta.n_samples,
                samples.len()
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.x0.len() != meta.dim {
                return Err(Error::invalid(format!(
                    "sample {i} has {} coordinates, expected {}",
                    s.x0.len(),
                    meta.dim
                )));
            }
            if s.subclass >= meta.taxonomy.n_sub() {
                return Err(Error::invalid(format!(
                    "sample {i} labeled {} but taxonomy has {} subclasses",
                    s.subclass,
                    meta.taxonomy.n_sub()
                )));
            }
        }
        Ok(Self { meta, samples })
    }
}

fn encode_payload(samples: &[LabeledSample]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for s in samples {
        for &v in &s.x0 {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for s in samples {
        let label = u32::try_from(s.subclass)
            .map_err(|_| Error::invalid(format!("subclass {} exceeds u32", s.subclass)))?;
        payload.extend_from_slice(&label.to_le_bytes());
    }
    Ok(payload)
}

/// The payload bytes a save would write, without the header.
pub fn samples_payload(samples: &[LabeledSample]) -> Result<Vec<u8>> {
    encode_payload(samples)
}

pub fn save_samples(path: &Path, file: &SamplesFile) -> Result<()> {
    write_container(path, SAMPLES_MAGIC, &file.meta, &encode_payload(&file.samples)?)
}

pub fn load_samples(path: &Path) -> Result<SamplesFile> {
    let (meta, payload): (SamplesMeta, Vec<u8>) = read_container(path, SAMPLES_MAGIC)?;
    let (coords, rest) = f32_payload(&payload, meta.n_samples * meta.dim, "sample coordinates")?;
    let (labels, rest) = u32_payload(rest, meta.n_samples, "sample labels")?;
    expect_consumed(rest, "samples")?;
    let samples: Vec<LabeledSample> = coords
        .chunks_exact(meta.dim)
        .zip(&labels)
        .map(|(x0, &label)| LabeledSample { x0: x0.to_vec(), subclass: label as usize })
        .collect();
    SamplesFile::new(meta, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::GuidanceMode;

    fn batch(dim: usize, n: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| LabeledSample {
                x0: (0..dim).map(|j| (i * dim + j) as f64 * 0.25 - 1.0).collect(),
                subclass: i % 4,
            })
            .collect()
    }

    fn meta(n: usize) -> SamplesMeta {
        SamplesMeta {
            taxonomy: Taxonomy::uniform(2, 2).unwrap(),
            dim: 2,
            n_samples: n,
            guidance: GuidanceConfig::new(GuidanceMode::FineGrained, 4.0).unwrap(),
            n_steps: 25,
            seed: 17,
            checkpoint_sha256: Some("ab".repeat(32)),
        }
    }

    #[test]
    fn roundtrip_preserves_meta_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.hiersmp");
        let file = SamplesFile::new(meta(6), batch(2, 6)).unwrap();
        save_samples(&path, &file).unwrap();
        let back = load_samples(&path).unwrap();
        assert_eq!(back.meta, file.meta);
        assert_eq!(back.samples.len(), 6);
        for (a, b) in back.samples.iter().zip(&file.samples) {
            assert_eq!(a.subclass, b.subclass);
            for (&x, &y) in a.x0.iter().zip(&b.x0) {
                assert_eq!(x, y as f32 as f64);
            }
        }
    }

    #[test]
    fn payload_ignores_header_differences() {
        let samples = batch(2, 6);
        let mut m1 = meta(6);
        let mut m2 = meta(6);
        m1.guidance = GuidanceConfig::none();
        m2.seed = 99;
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.hiersmp");
        let p2 = dir.path().join("b.hiersmp");
        save_samples(&p1, &SamplesFile::new(m1, samples.clone()).unwrap()).unwrap();
        save_samples(&p2, &SamplesFile::new(m2, samples.clone()).unwrap()).unwrap();
        // Whole files differ (headers), payloads agree.
        assert_ne!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let b1 = load_samples(&p1).unwrap();
        let b2 = load_samples(&p2).unwrap();
        assert_eq!(
            samples_payload(&b1.samples).unwrap(),
            samples_payload(&b2.samples).unwrap()
        );
        assert_eq!(samples_payload(&b1.samples).unwrap(), samples_payload(&samples).unwrap());
    }

    #[test]
    fn count_mismatch_is_rejected() {
        assert!(SamplesFile::new(meta(5), batch(2, 6)).is_err());
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut samples = batch(2, 6);
        samples[3].subclass = 42;
        assert!(SamplesFile::new(meta(6), samples).is_err());
    }
}
