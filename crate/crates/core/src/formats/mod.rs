//! On-disk containers for datasets, model checkpoints, and sample batches.
//!
//! All three share one layout: an 8-byte magic, a little-endian u32 format
//! version, a little-endian u32 header length, a JSON header of exactly that
//! length, then a raw payload whose interpretation the header describes.
//! JSON keeps the metadata greppable; the payload keeps bulk numerics
//! compact. Writers go through a temp-file-and-rename so a crash never
//! leaves a truncated file under the final name.

mod checkpoint;
mod dataset;
mod report;
mod samples;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamMeta};
pub use dataset::{load_dataset, save_dataset, DataSource, DatasetFile};
pub use report::{
    bench_csv, metrics_csv, write_bench_csv, write_bench_json, write_metrics_csv,
    write_metrics_json,
};
pub use samples::{load_samples, save_samples, samples_payload, SamplesFile, SamplesMeta};

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Version stamped into every container; readers reject other values.
pub const FORMAT_VERSION: u32 = 1;

pub const DATASET_MAGIC: &[u8; 8] = b"HIERDAT\0";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HIERCKP\0";
pub const SAMPLES_MAGIC: &[u8; 8] = b"HIERSMP\0";

/// Headers above this size indicate corruption, not metadata.
const MAX_HEADER_BYTES: u32 = 16 << 20;

/// Write `bytes` to `path` through a same-directory temp file and an atomic
/// rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serialize a container into bytes: magic, version, header, payload.
pub(crate) fn encode_container<H: Serialize>(
    magic: &[u8; 8],
    header: &H,
    payload: &[u8],
) -> Result<Vec<u8>> {
    let header_json = serde_json::to_vec(header)
        .map_err(|e| Error::format(format!("header serialization failed: {e}")))?;
    let header_len = u32::try_from(header_json.len())
        .ok()
        .filter(|&n| n <= MAX_HEADER_BYTES)
        .ok_or_else(|| Error::format(format!("header of {} bytes is too large", header_json.len())))?;
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Parse a container from bytes, returning the header and the payload slice.
pub(crate) fn decode_container<'a, H: DeserializeOwned>(
    magic: &[u8; 8],
    bytes: &'a [u8],
) -> Result<(H, &'a [u8])> {
    if bytes.len() < 16 {
        return Err(Error::format(format!("container truncated at {} bytes", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..8],
            &magic[..]
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::format(format!("header length {header_len} exceeds sanity limit")));
    }
    let header_end = 16usize
        .checked_add(header_len as usize)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format("header extends past end of file"))?;
    let header: H = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::format(format!("header JSON invalid: {e}")))?;
    Ok((header, &bytes[header_end..]))
}

pub(crate) fn write_container<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    header: &H,
    payload: &[u8],
) -> Result<()> {
    atomic_write(path, &encode_container(magic, header, payload)?)
}

pub(crate) fn read_container<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 8],
) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (header, payload) = decode_container(magic, &bytes)?;
    Ok((header, payload.to_vec()))
}

/// Payload decoding helpers. Each reads a fixed-width little-endian run and
/// errors if the slice is shorter than requested.

pub(crate) fn f32_payload<'a>(bytes: &'a [u8], count: usize, what: &str) -> Result<(Vec<f64>, &'a [u8])> {
    let need = count * 4;
    if bytes.len() < need {
        return Err(Error::format(format!(
            "{what}: payload has {} bytes, need {need}",
            bytes.len()
        )));
    }
    let vals = bytes[..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((vals, &bytes[need..]))
}

pub(crate) fn f64_payload<'a>(bytes: &'a [u8], count: usize, what: &str) -> Result<(Vec<f64>, &'a [u8])> {
    let need = count * 8;
    if bytes.len() < need {
        return Err(Error::format(format!(
            "{what}: payload has {} bytes, need {need}",
            bytes.len()
        )));
    }
    let vals = bytes[..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((vals, &bytes[need..]))
}

pub(crate) fn u32_payload<'a>(bytes: &'a [u8], count: usize, what: &str) -> Result<(Vec<u32>, &'a [u8])> {
    let need = count * 4;
    if bytes.len() < need {
        return Err(Error::format(format!(
            "{what}: payload has {} bytes, need {need}",
            bytes.len()
        )));
    }
    let vals = bytes[..need]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((vals, &bytes[need..]))
}

pub(crate) fn expect_consumed(rest: &[u8], what: &str) -> Result<()> {
    if rest.is_empty() {
        Ok(())
    } else {
        Err(Error::format(format!("{what}: {} trailing payload bytes", rest.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Probe {
        label: String,
        n: u32,
    }

    #[test]
    fn container_roundtrips() {
        let header = Probe { label: "x".into(), n: 7 };
        let payload = [1u8, 2, 3, 4, 5];
        let bytes = encode_container(DATASET_MAGIC, &header, &payload).unwrap();
        let (back, rest): (Probe, &[u8]) = decode_container(DATASET_MAGIC, &bytes).unwrap();
        assert_eq!(back, header);
        assert_eq!(rest, payload);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let header = Probe { label: "x".into(), n: 7 };
        let bytes = encode_container(DATASET_MAGIC, &header, &[]).unwrap();
        let err = decode_container::<Probe>(CHECKPOINT_MAGIC, &bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let header = Probe { label: "x".into(), n: 7 };
        let mut bytes = encode_container(DATASET_MAGIC, &header, &[]).unwrap();
        bytes[8] = FORMAT_VERSION as u8 + 1;
        let err = decode_container::<Probe>(DATASET_MAGIC, &bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncation_inside_header_is_rejected() {
        let header = Probe { label: "probe".into(), n: 7 };
        let bytes = encode_container(DATASET_MAGIC, &header, &[9u8; 32]).unwrap();
        let header_end = bytes.len() - 32;
        for cut in [0, 4, 12, 15, 20, header_end - 1] {
            assert!(
                decode_container::<Probe>(DATASET_MAGIC, &bytes[..cut]).is_err(),
                "cut at {cut} accepted"
            );
        }
    }

    #[test]
    fn corrupt_header_json_is_rejected() {
        let header = Probe { label: "probe".into(), n: 7 };
        let mut bytes = encode_container(DATASET_MAGIC, &header, &[]).unwrap();
        bytes[17] = b'!';
        assert!(decode_container::<Probe>(DATASET_MAGIC, &bytes).is_err());
    }

    #[test]
    fn oversized_header_length_is_rejected() {
        let header = Probe { label: "x".into(), n: 7 };
        let mut bytes = encode_container(DATASET_MAGIC, &header, &[]).unwrap();
        bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_container::<Probe>(DATASET_MAGIC, &bytes).unwrap_err();
        assert!(err.to_string().contains("sanity"), "{err}");
    }

    #[test]
    fn payload_readers_check_length() {
        let bytes = [0u8; 10];
        assert!(f32_payload(&bytes, 3, "t").is_err());
        assert!(f64_payload(&bytes, 2, "t").is_err());
        assert!(u32_payload(&bytes, 3, "t").is_err());
        let (vals, rest) = u32_payload(&bytes, 2, "t").unwrap();
        assert_eq!(vals, vec![0, 0]);
        assert_eq!(rest.len(), 2);
        assert!(expect_consumed(rest, "t").is_err());
    }

    #[test]
    fn atomic_write_replaces_existing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        // No stray temp files left behind.
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1, "{names:?}");
    }
}
