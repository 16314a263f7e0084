//! Binary serialization of model weights and CMVN statistics.
//!
//! Weight file: `SLUW`, version (u32), header length (u32), a JSON header
//! describing the architecture and every layer's tensors, the tensors as
//! little-endian f32 in header order, then the CRC32 of that payload.
//!
//! CMVN file: `CMVN`, version (u32), dimension (u32), then the means and the
//! standard deviations as little-endian f64.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feat::{CmvnStats, FEATURE_DIM};
use crate::nn::{Activation, Architecture, LayerKind, ModelWeights, NnError};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"SLUW";
pub const CMVN_MAGIC: &[u8; 4] = b"CMVN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("payload checksum {found:#010x} does not match stored {stored:#010x}")]
    Crc { stored: u32, found: u32 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub kind: LayerKind,
    pub kernel: [usize; 2],
    pub in_channels: usize,
    pub out_channels: usize,
    pub batchnorm: bool,
    pub activation: Activation,
    pub tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub architecture: Architecture,
    pub layers: Vec<LayerHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl WeightsHeader {
    pub fn new(arch: &Architecture, labels: Option<Vec<String>>) -> Self {
        let mut tensors = arch.tensor_layout().into_iter();
        let layers = arch
            .layer_specs()
            .into_iter()
            .map(|spec| {
                let count = match (spec.kind, spec.has_batchnorm) {
                    (LayerKind::Conv2d | LayerKind::Dense, true) => 6,
                    (LayerKind::Conv2d | LayerKind::Dense, false) => 2,
                    _ => 0,
                };
                LayerHeader {
                    kind: spec.kind,
                    kernel: [spec.kernel.0, spec.kernel.1],
                    in_channels: spec.in_channels,
                    out_channels: spec.out_channels,
                    batchnorm: spec.has_batchnorm,
                    activation: spec.activation,
                    tensors: tensors
                        .by_ref()
                        .take(count)
                        .map(|t| TensorHeader {
                            name: t.name,
                            shape: t.shape,
                        })
                        .collect(),
                }
            })
            .collect();
        Self {
            architecture: arch.clone(),
            layers,
            labels,
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &TensorHeader> {
        self.layers.iter().flat_map(|l| l.tensors.iter())
    }
}

/// Weights together with the label vocabulary they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub weights: ModelWeights<f32>,
    pub labels: Option<Vec<String>>,
}

pub fn weights_to_bytes(weights: &ModelWeights<f32>, labels: Option<&[String]>) -> Vec<u8> {
    let header = WeightsHeader::new(&weights.arch, labels.map(<[String]>::to_vec));
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut payload = Vec::with_capacity(weights.total_scalar_count() * 4);
    for s in weights.slices() {
        for v in s {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(12 + json.len() + payload.len() + 4);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightsError> {
        if self.buf.len() - self.pos < n {
            return Err(WeightsError::Truncated(format!(
                "{what} needs {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), WeightsError> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().expect("4 bytes");
        if &found != expected {
            return Err(WeightsError::BadMagic {
                found,
                expected: *expected,
            });
        }
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(WeightsError::UnsupportedVersion(v));
        }
        Ok(())
    }
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<LoadedModel, WeightsError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    c.magic(WEIGHTS_MAGIC)?;
    let hlen = c.u32("header length")? as usize;
    let header: WeightsHeader =
        serde_json::from_slice(c.take(hlen, "header")?).map_err(|e| WeightsError::Header(e.to_string()))?;
    header.architecture.validate()?;
    let expected = WeightsHeader::new(&header.architecture, header.labels.clone());
    if expected.layers != header.layers {
        let declared: Vec<&TensorHeader> = header.tensors().collect();
        let wanted: Vec<&TensorHeader> = expected.tensors().collect();
        let detail = wanted
            .iter()
            .zip(&declared)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{} {:?} declared as {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| format!("{} tensors declared, architecture has {}", declared.len(), wanted.len()));
        return Err(WeightsError::ShapeMismatch(detail));
    }
    let sizes: Vec<usize> = header.tensors().map(|t| t.shape.iter().product()).collect();
    let payload_len = sizes.iter().sum::<usize>() * 4;
    let remaining = bytes.len() - c.pos;
    if remaining != payload_len + 4 {
        return Err(WeightsError::ShapeMismatch(format!(
            "header declares {payload_len} payload bytes, file holds {}",
            remaining.saturating_sub(4)
        )));
    }
    let payload = c.take(payload_len, "payload")?;
    let stored = c.u32("checksum")?;
    let found = crc32fast::hash(payload);
    if stored != found {
        return Err(WeightsError::Crc { stored, found });
    }
    let mut floats = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    let data = sizes.iter().map(|&n| floats.by_ref().take(n).collect()).collect();
    Ok(LoadedModel {
        weights: ModelWeights::from_tensors(header.architecture, data)?,
        labels: header.labels,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WeightsError + '_ {
    move |source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save(weights: &ModelWeights<f32>, labels: Option<&[String]>, path: impl AsRef<Path>) -> Result<(), WeightsError> {
    let path = path.as_ref();
    std::fs::write(path, weights_to_bytes(weights, labels)).map_err(io_err(path))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel, WeightsError> {
    let path = path.as_ref();
    weights_from_bytes(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelWeights<f32>, WeightsError> {
    load_model(path).map(|m| m.weights)
}

pub fn cmvn_to_bytes(stats: &CmvnStats) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 16 * FEATURE_DIM);
    out.extend_from_slice(CMVN_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    for v in stats.mean.iter().chain(&stats.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn cmvn_from_bytes(bytes: &[u8]) -> Result<CmvnStats, WeightsError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    c.magic(CMVN_MAGIC)?;
    let dim = c.u32("dimension")? as usize;
    if dim != FEATURE_DIM {
        return Err(WeightsError::ShapeMismatch(format!("CMVN dimension {dim}, expected {FEATURE_DIM}")));
    }
    let mut read = |what| -> Result<[f64; FEATURE_DIM], WeightsError> {
        let raw = c.take(8 * FEATURE_DIM, what)?;
        Ok(std::array::from_fn(|i| {
            f64::from_le_bytes(raw[8 * i..8 * i + 8].try_into().expect("8 bytes"))
        }))
    };
    let mean = read("means")?;
    let std = read("standard deviations")?;
    if c.pos != bytes.len() {
        return Err(WeightsError::ShapeMismatch(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(CmvnStats { mean, std })
}

pub fn save_cmvn(stats: &CmvnStats, path: impl AsRef<Path>) -> Result<(), WeightsError> {
    let path = path.as_ref();
    std::fs::write(path, cmvn_to_bytes(stats)).map_err(io_err(path))
}

pub fn load_cmvn(path: impl AsRef<Path>) -> Result<CmvnStats, WeightsError> {
    let path = path.as_ref();
    cmvn_from_bytes(&std::fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_paper_model;

    fn bits(w: &ModelWeights<f32>) -> Vec<u32> {
        w.slices().iter().flat_map(|s| s.iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (_, mut w) = build_paper_model(31, 3).unwrap();
        w.blocks[0].conv_bn.running_var[0] = 0.123_456_79;
        let labels: Vec<String> = (0..31).map(|i| format!("intent{i}")).collect();
        let bytes = weights_to_bytes(&w, Some(&labels));
        let back = weights_from_bytes(&bytes).unwrap();
        assert_eq!(bits(&back.weights), bits(&w));
        assert_eq!(back.labels.as_deref(), Some(&labels[..]));
        assert_eq!(weights_to_bytes(&back.weights, Some(&labels)), bytes);
    }

    #[test]
    fn header_lists_seventeen_layers() {
        let (_, w) = build_paper_model(31, 0).unwrap();
        let h = WeightsHeader::new(&w.arch, None);
        assert_eq!(h.layers.len(), 17);
        assert_eq!(h.tensors().count(), w.arch.tensor_layout().len());
        assert_eq!(h.layers[1].kind, LayerKind::MaxPool);
        assert!(h.layers[1].tensors.is_empty());
    }

    #[test]
    fn flipped_payload_byte_fails_crc() {
        let (_, w) = build_paper_model(31, 1).unwrap();
        let mut bytes = weights_to_bytes(&w, None);
        let i = bytes.len() - 100;
        bytes[i] ^= 0x01;
        assert!(matches!(weights_from_bytes(&bytes), Err(WeightsError::Crc { .. })));
    }

    #[test]
    fn distinct_errors() {
        let (_, w) = build_paper_model(8, 1).unwrap();
        let good = weights_to_bytes(&w, None);

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(weights_from_bytes(&b), Err(WeightsError::BadMagic { .. })));

        let mut b = good.clone();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(weights_from_bytes(&b), Err(WeightsError::UnsupportedVersion(2))));

        let b = &good[..good.len() - 8];
        assert!(matches!(weights_from_bytes(b), Err(WeightsError::ShapeMismatch(_))));

        // a header whose tensor shape disagrees with its architecture
        let hlen = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
        let mut header: WeightsHeader = serde_json::from_slice(&good[12..12 + hlen]).unwrap();
        header.layers[0].tensors[0].shape[0] = 5;
        let json = serde_json::to_vec(&header).unwrap();
        let mut b = good[..8].to_vec();
        b.extend_from_slice(&(json.len() as u32).to_le_bytes());
        b.extend_from_slice(&json);
        b.extend_from_slice(&good[12 + hlen..]);
        assert!(matches!(weights_from_bytes(&b), Err(WeightsError::ShapeMismatch(_))));

        assert!(matches!(weights_from_bytes(&good[..10]), Err(WeightsError::Truncated(_))));
    }

    #[test]
    fn full_size_model_file_size_in_range() {
        let (_, w) = build_paper_model(31, 0).unwrap();
        let mb = weights_to_bytes(&w, None).len() as f64 / 1e6;
        assert!((1.3..=1.7).contains(&mb), "{mb} MB");
    }

    #[test]
    fn cmvn_round_trip_and_errors() {
        let stats = CmvnStats {
            mean: std::array::from_fn(|i| i as f64 * 0.1 - 2.0),
            std: std::array::from_fn(|i| 1.0 + i as f64 / 7.0),
        };
        let bytes = cmvn_to_bytes(&stats);
        assert_eq!(bytes.len(), 12 + 41 * 16);
        assert_eq!(cmvn_from_bytes(&bytes).unwrap(), stats);
        let mut b = bytes.clone();
        b[8..12].copy_from_slice(&40u32.to_le_bytes());
        assert!(matches!(cmvn_from_bytes(&b), Err(WeightsError::ShapeMismatch(_))));
        assert!(matches!(cmvn_from_bytes(&bytes[..100]), Err(WeightsError::Truncated(_))));
        assert!(matches!(cmvn_from_bytes(b"SLUW\x01\0\0\0"), Err(WeightsError::BadMagic { .. })));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, w) = build_paper_model(8, 2).unwrap();
        let p = dir.path().join("m.sluw");
        save(&w, None, &p).unwrap();
        assert_eq!(bits(&load(&p).unwrap()), bits(&w));
        assert!(matches!(load(dir.path().join("missing")), Err(WeightsError::Io { .. })));
    }
}
