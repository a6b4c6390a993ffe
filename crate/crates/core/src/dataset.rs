//! Zip container for calibration samples and single input/output tensors.
//!
//! Layout: `manifest.json` plus one little-endian raw `f32` blob per sample
//! under `samples/`. A tensor file is the same container with one sample.

use std::io::{Cursor, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zip::write::SimpleFileOptions;

use crate::calibration::CalibrationMeta;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("zip archive: {0}")]
    Zip(#[from] zip::result::ZipError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub sample_count: usize,
    pub samples: Vec<String>,
}

/// Ordered collection of input samples for one graph input.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub input_name: String,
    pub samples: Vec<Tensor>,
}

impl CalibrationSet {
    pub fn new(input_name: impl Into<String>, samples: Vec<Tensor>) -> Self {
        Self { input_name: input_name.into(), samples }
    }

    pub fn meta(&self) -> CalibrationMeta {
        let mut h = Sha256::new();
        for s in &self.samples {
            for d in s.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(f32_bytes(s));
        }
        CalibrationMeta { sample_count: self.samples.len(), dataset_digest: hex::encode(h.finalize()) }
    }

    pub fn to_zip(&self) -> Result<Vec<u8>, DatasetError> {
        let shape = self
            .samples
            .first()
            .map(|s| s.shape().to_vec())
            .ok_or_else(|| DatasetError::Invalid("no samples to write".into()))?;
        if self.samples.iter().any(|s| s.shape() != shape.as_slice()) {
            return Err(DatasetError::Invalid("samples have differing shapes".into()));
        }
        let names: Vec<String> = (0..self.samples.len()).map(|i| format!("samples/{i:06}.bin")).collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: "f32".into(),
            tensors: vec![TensorEntry { name: self.input_name.clone(), shape }],
            sample_count: self.samples.len(),
            samples: names.clone(),
        };
        let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
        let opts = SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Deflated)
            .last_modified_time(zip::DateTime::default());
        zip.start_file(MANIFEST_NAME, opts)?;
        zip.write_all(&serde_json::to_vec_pretty(&manifest)?)?;
        for (name, sample) in names.iter().zip(&self.samples) {
            zip.start_file(name.as_str(), opts)?;
            zip.write_all(&f32_bytes(sample))?;
        }
        Ok(zip.finish()?.into_inner())
    }

    pub fn from_zip(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut zip = zip::ZipArchive::new(Cursor::new(bytes))?;
        let manifest: Manifest = {
            let mut f = zip.by_name(MANIFEST_NAME)?;
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)?;
            serde_json::from_slice(&buf)?
        };
        if manifest.format_version != FORMAT_VERSION {
            return Err(DatasetError::Invalid(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.dtype != "f32" {
            return Err(DatasetError::Invalid(format!("unsupported dtype `{}`", manifest.dtype)));
        }
        let [entry] = manifest.tensors.as_slice() else {
            return Err(DatasetError::Invalid(format!(
                "exactly one tensor per sample is supported, manifest lists {}",
                manifest.tensors.len()
            )));
        };
        if manifest.sample_count != manifest.samples.len() {
            return Err(DatasetError::Invalid("sample_count disagrees with sample list".into()));
        }
        let n: usize = entry.shape.iter().product();
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for name in &manifest.samples {
            let mut f = zip.by_name(name)?;
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)?;
            if buf.len() != 4 * n {
                return Err(DatasetError::Invalid(format!(
                    "`{name}` holds {} bytes, expected {} for shape {:?}",
                    buf.len(),
                    4 * n,
                    entry.shape
                )));
            }
            let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            samples.push(Tensor::new(entry.shape.clone(), data));
        }
        Ok(Self { input_name: entry.name.clone(), samples })
    }
}

fn f32_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Encode a single tensor in the sample container format.
pub fn write_tensor_file(name: &str, t: &Tensor) -> Result<Vec<u8>, DatasetError> {
    CalibrationSet::new(name, vec![t.clone()]).to_zip()
}

pub fn read_tensor_file(bytes: &[u8]) -> Result<(String, Tensor), DatasetError> {
    let mut set = CalibrationSet::from_zip(bytes)?;
    if set.samples.len() != 1 {
        return Err(DatasetError::Invalid(format!(
            "a tensor file holds exactly one sample, found {}",
            set.samples.len()
        )));
    }
    Ok((set.input_name, set.samples.pop().expect("one sample")))
}
