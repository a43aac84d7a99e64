//! Binary key container (.dpky).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "DPKY"
//! version  u16      currently 1
//! kind     u8       0x01 key-E, 0x02 key-I
//! meta_len u32
//! meta     UTF-8 JSON, meta_len bytes
//! payload  f32 array, row-major, in the order declared by meta.shapes
//! ```
//!
//! The header and meta are fully validated before the payload is read.
//! For key-E the payload is the ten stage token matrices concatenated in
//! stage order; `stride`, `tau`, `s_ns`, and `created_for` are not
//! applicable and stored as 0/null. For key-I the payload is the terminal
//! latent (annotated at step `T`, i.e. schedule index `T-1`).

use std::fs;
use std::path::Path;

use diffguard_core::msi::{ConditionalEmbeddingSet, StageEmbedding, N_STAGES};
use diffguard_core::pipelines::{NoiseKey, RunKind};
use diffguard_core::schedule::{LatentCode, Step};
use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DPKY";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum KeyFileError {
    #[error("bad magic bytes {0:02x?}, not a key container")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown key kind byte 0x{0:02x}")]
    BadKindByte(u8),
    #[error("container holds a {actual} where a {expected} was required")]
    WrongKind { expected: KeyKind, actual: KeyKind },
    #[error("container truncated: needed {needed} bytes, had {got}")]
    Truncated { needed: usize, got: usize },
    #[error("meta is not valid UTF-8 JSON: {0}")]
    MetaJson(String),
    #[error("payload holds {actual} bytes but shapes declare {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("key-E container must declare {expected} stage shapes, found {actual}", expected = N_STAGES)]
    StageShapeCount { actual: usize },
    #[error("shape entry {0:?} is not a [tokens, dim] pair")]
    BadStageShape(Vec<u32>),
    #[error("key-I container must declare exactly one shape, found {0}")]
    KeyIShapeCount(usize),
    #[error("created_for value '{0}' is not a known run kind")]
    BadRunKind(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    KeyE,
    KeyI,
}

impl KeyKind {
    pub fn byte(self) -> u8 {
        match self {
            KeyKind::KeyE => 0x01,
            KeyKind::KeyI => 0x02,
        }
    }

    fn from_byte(b: u8) -> Result<Self, KeyFileError> {
        match b {
            0x01 => Ok(KeyKind::KeyE),
            0x02 => Ok(KeyKind::KeyI),
            other => Err(KeyFileError::BadKindByte(other)),
        }
    }
}

impl std::fmt::Display for KeyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KeyKind::KeyE => write!(f, "key-E"),
            KeyKind::KeyI => write!(f, "key-I"),
        }
    }
}

/// Container metadata. Field order is the serialized JSON order and must
/// stay stable for byte-identical reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyMeta {
    pub model_id: String,
    pub image_fingerprint: String,
    #[serde(rename = "T")]
    pub t_total: u32,
    pub stride: u32,
    pub tau: Option<f64>,
    pub s_ns: Option<f64>,
    pub shapes: Vec<Vec<u32>>,
    pub seed: u64,
    pub created_for: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyContainer {
    pub kind: KeyKind,
    pub meta: KeyMeta,
    pub payload: Vec<f32>,
}

impl KeyContainer {
    fn declared_len(&self) -> usize {
        self.meta.shapes.iter().map(|s| s.iter().map(|&d| d as usize).product::<usize>()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, KeyFileError> {
        if self.declared_len() != self.payload.len() {
            return Err(KeyFileError::PayloadLength {
                expected: self.declared_len() * 4,
                actual: self.payload.len() * 4,
            });
        }
        let meta = serde_json::to_vec(&self.meta).map_err(|e| KeyFileError::MetaJson(e.to_string()))?;
        let mut out = Vec::with_capacity(11 + meta.len() + self.payload.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.byte());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyFileError> {
        let need = |n: usize| -> Result<(), KeyFileError> {
            if bytes.len() < n {
                Err(KeyFileError::Truncated { needed: n, got: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(11)?;
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(KeyFileError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(KeyFileError::UnsupportedVersion(version));
        }
        let kind = KeyKind::from_byte(bytes[6])?;
        let meta_len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        need(11 + meta_len)?;
        let meta: KeyMeta = serde_json::from_slice(&bytes[11..11 + meta_len])
            .map_err(|e| KeyFileError::MetaJson(e.to_string()))?;

        let declared: usize =
            meta.shapes.iter().map(|s| s.iter().map(|&d| d as usize).product::<usize>()).sum();
        let payload_bytes = &bytes[11 + meta_len..];
        if payload_bytes.len() != declared * 4 {
            return Err(KeyFileError::PayloadLength {
                expected: declared * 4,
                actual: payload_bytes.len(),
            });
        }
        let payload = payload_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { kind, meta, payload })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), KeyFileError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Reads and fully validates a container; when `expected` is given, a
    /// container of the other kind is rejected.
    pub fn read_from(path: &Path, expected: Option<KeyKind>) -> Result<Self, KeyFileError> {
        let bytes = fs::read(path)?;
        let container = Self::from_bytes(&bytes)?;
        if let Some(expected) = expected {
            if container.kind != expected {
                return Err(KeyFileError::WrongKind { expected, actual: container.kind });
            }
        }
        Ok(container)
    }

    pub fn from_key_e(set: &ConditionalEmbeddingSet, t_total: usize, seed: u64) -> Self {
        let shapes = set
            .stages
            .iter()
            .map(|s| vec![s.tokens.nrows() as u32, s.tokens.ncols() as u32])
            .collect();
        let payload = set
            .stages
            .iter()
            .flat_map(|s| s.tokens.iter().map(|&v| v as f32))
            .collect();
        Self {
            kind: KeyKind::KeyE,
            meta: KeyMeta {
                model_id: set.model_id.clone(),
                image_fingerprint: set.image_fingerprint.clone(),
                t_total: t_total as u32,
                stride: 0,
                tau: None,
                s_ns: None,
                shapes,
                seed,
                created_for: None,
            },
            payload,
        }
    }

    pub fn to_key_e(&self) -> Result<ConditionalEmbeddingSet, KeyFileError> {
        if self.kind != KeyKind::KeyE {
            return Err(KeyFileError::WrongKind { expected: KeyKind::KeyE, actual: self.kind });
        }
        if self.meta.shapes.len() != N_STAGES {
            return Err(KeyFileError::StageShapeCount { actual: self.meta.shapes.len() });
        }
        let mut stages = Vec::with_capacity(N_STAGES);
        let mut at = 0usize;
        let mut dim = 0usize;
        for (i, shape) in self.meta.shapes.iter().enumerate() {
            if shape.len() != 2 {
                return Err(KeyFileError::BadStageShape(shape.clone()));
            }
            let (k, d) = (shape[0] as usize, shape[1] as usize);
            dim = d;
            let data: Vec<f64> = self.payload[at..at + k * d].iter().map(|&v| v as f64).collect();
            at += k * d;
            stages.push(StageEmbedding {
                tokens: Array2::from_shape_vec((k, d), data).expect("shape matches data"),
                stage_index: Some(i),
            });
        }
        Ok(ConditionalEmbeddingSet {
            stages,
            dim,
            image_fingerprint: self.meta.image_fingerprint.clone(),
            model_id: self.meta.model_id.clone(),
        })
    }

    pub fn from_noise_key(key: &NoiseKey) -> Self {
        let shape: Vec<u32> = key.z_terminal.values.shape().iter().map(|&d| d as u32).collect();
        Self {
            kind: KeyKind::KeyI,
            meta: KeyMeta {
                model_id: key.model_id.clone(),
                image_fingerprint: key.image_fingerprint.clone(),
                t_total: key.t_total as u32,
                stride: key.stride as u32,
                tau: Some(key.tau),
                s_ns: Some(key.s_ns),
                shapes: vec![shape],
                seed: key.seed,
                created_for: Some(key.created_for.to_string()),
            },
            payload: key.z_terminal.values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_noise_key(&self) -> Result<NoiseKey, KeyFileError> {
        if self.kind != KeyKind::KeyI {
            return Err(KeyFileError::WrongKind { expected: KeyKind::KeyI, actual: self.kind });
        }
        if self.meta.shapes.len() != 1 {
            return Err(KeyFileError::KeyIShapeCount(self.meta.shapes.len()));
        }
        let shape: Vec<usize> = self.meta.shapes[0].iter().map(|&d| d as usize).collect();
        let values = ArrayD::from_shape_vec(
            shape,
            self.payload.iter().map(|&v| v as f64).collect::<Vec<f64>>(),
        )
        .expect("payload length validated against shapes");
        let created_for = match self.meta.created_for.as_deref() {
            Some("anonymize") => RunKind::Anonymize,
            Some("hide") => RunKind::Hide,
            other => return Err(KeyFileError::BadRunKind(other.unwrap_or("<missing>").into())),
        };
        Ok(NoiseKey {
            z_terminal: LatentCode {
                values,
                step: Step::At(self.meta.t_total as usize - 1),
            },
            t_total: self.meta.t_total as usize,
            stride: self.meta.stride as usize,
            model_id: self.meta.model_id.clone(),
            image_fingerprint: self.meta.image_fingerprint.clone(),
            created_for,
            seed: self.meta.seed,
            tau: self.meta.tau.unwrap_or(0.0),
            s_ns: self.meta.s_ns.unwrap_or(0.0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_key_e() -> ConditionalEmbeddingSet {
        let stages = (0..N_STAGES)
            .map(|s| StageEmbedding {
                tokens: Array2::from_shape_fn((2, 3), |(i, j)| (s * 10 + i * 3 + j) as f64 * 0.25),
                stage_index: Some(s),
            })
            .collect();
        ConditionalEmbeddingSet {
            stages,
            dim: 3,
            image_fingerprint: "abc123".into(),
            model_id: "toy:seed=1".into(),
        }
    }

    #[test]
    fn container_round_trips_bit_exactly() {
        let c = KeyContainer::from_key_e(&sample_key_e(), 1000, 7);
        let bytes = c.to_bytes().unwrap();
        let back = KeyContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        let bytes2 = back.to_bytes().unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn key_e_survives_conversion() {
        let original = sample_key_e();
        let c = KeyContainer::from_key_e(&original, 1000, 7);
        let bytes = c.to_bytes().unwrap();
        let restored = KeyContainer::from_bytes(&bytes).unwrap().to_key_e().unwrap();
        assert_eq!(restored.model_id, original.model_id);
        assert_eq!(restored.image_fingerprint, original.image_fingerprint);
        assert_eq!(restored.stages.len(), N_STAGES);
        // Values pass through an f32 cast.
        for (a, b) in restored.stages.iter().zip(&original.stages) {
            for (x, y) in a.tokens.iter().zip(b.tokens.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let c = KeyContainer::from_key_e(&sample_key_e(), 1000, 7);
        let mut bytes = c.to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(KeyContainer::from_bytes(&bytes), Err(KeyFileError::BadMagic(_))));
    }

    #[test]
    fn kind_byte_mismatch_is_rejected_before_payload_use() {
        let c = KeyContainer::from_key_e(&sample_key_e(), 1000, 7);
        let bytes = c.to_bytes().unwrap();
        let parsed = KeyContainer::from_bytes(&bytes).unwrap();
        assert!(matches!(
            parsed.to_noise_key(),
            Err(KeyFileError::WrongKind { expected: KeyKind::KeyI, .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let c = KeyContainer::from_key_e(&sample_key_e(), 1000, 7);
        let bytes = c.to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            KeyContainer::from_bytes(cut),
            Err(KeyFileError::PayloadLength { .. })
        ));
    }

    #[test]
    fn version_gate() {
        let c = KeyContainer::from_key_e(&sample_key_e(), 1000, 7);
        let mut bytes = c.to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            KeyContainer::from_bytes(&bytes),
            Err(KeyFileError::UnsupportedVersion(9))
        ));
    }
}
