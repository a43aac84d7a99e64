//! Interfaces to the four learned components a pipeline needs — noise
//! predictor, latent codec, multi-scale feature encoder, identity embedder —
//! plus built-in desk-scale implementations.
//!
//! The guidance path differentiates through `decode` and `embed`, so those
//! traits expose vector-Jacobian products next to the forward maps. Backends
//! that cannot provide a VJP return [`AdapterError::Unsupported`] and are
//! simply not usable for guided runs.
//!
//! Concurrency contract: callers may invoke a backend concurrently only if
//! [`NoisePredictor::reentrant`] says so; every built-in backend is immutable
//! after construction and therefore reentrant.

pub mod oracle;
pub mod toy;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::Image;
use crate::msi::StageEmbedding;
use crate::schedule::{LatentCode, NoiseSchedule};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("scale entries must be positive, found {0}")]
    NonPositiveScale(f64),
    #[error("expected latent of length {expected}, got {actual}")]
    LatentShape { expected: usize, actual: usize },
    #[error("expected image of shape {expected:?}, got {actual:?}")]
    ImageShape { expected: [usize; 3], actual: [usize; 3] },
    #[error("context embedding has width {actual}, predictor consumes {expected}")]
    ContextWidth { expected: usize, actual: usize },
    #[error("embedding dimension must be at least 2, got {0}")]
    EmbeddingDimTooSmall(usize),
    #[error("feature pyramid must have exactly 5 levels, got {0}")]
    PyramidLevels(usize),
    #[error("operation not supported by backend {0}")]
    Unsupported(String),
    #[error("no backend registered under id '{0}'")]
    UnknownBackend(String),
    #[error("malformed backend spec '{spec}': {reason}")]
    BadSpec { spec: String, reason: String },
}

/// Distance metric an identity embedder is verified with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Metric {
    /// `1 - cos(a, b)`.
    CosineDistance,
    /// Plain L2 distance `|a - b|`; in `[0, 2]` for unit vectors.
    Euclidean,
}

impl Metric {
    pub fn distance(&self, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        match self {
            Metric::CosineDistance => 1.0 - cosine(a, b),
            Metric::Euclidean => (a - b).mapv(|d| d * d).sum().sqrt(),
        }
    }
}

/// Cosine similarity with explicit normalization of both operands.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    a.dot(b) / (na * nb)
}

/// Decision threshold used when evaluating ArcFace-style verification.
pub const ARCFACE_THRESHOLD: f64 = 0.8;
/// Decision threshold used when evaluating FaceNet-style verification.
pub const FACENET_THRESHOLD: f64 = 1.1;

/// Unit-norm identity feature vector with the id of the embedder that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding {
    pub vector: Array1<f64>,
    pub embedder_id: String,
}

impl IdentityEmbedding {
    pub fn new(vector: Array1<f64>, embedder_id: impl Into<String>) -> Self {
        Self { vector, embedder_id: embedder_id.into() }
    }

    pub fn is_unit_norm(&self, tol: f64) -> bool {
        (self.vector.dot(&self.vector).sqrt() - 1.0).abs() <= tol
    }
}

/// Five-level feature stack, shallow to deep.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Array1<f64>>,
    pub source_resolution: (usize, usize),
}

pub const PYRAMID_LEVELS: usize = 5;

impl FeaturePyramid {
    pub fn new(levels: Vec<Array1<f64>>, source_resolution: (usize, usize)) -> Result<Self, AdapterError> {
        if levels.len() != PYRAMID_LEVELS {
            return Err(AdapterError::PyramidLevels(levels.len()));
        }
        Ok(Self { levels, source_resolution })
    }
}

/// Cotangent pull-back onto a context embedding, produced together with a
/// training-mode forward pass so dropout masks are shared between the two.
pub type ContextVjp = Box<dyn FnOnce(&ArrayD<f64>) -> Array2<f64>>;

/// Noise prediction network interface (the epsilon model).
pub trait NoisePredictor: Send + Sync {
    /// Predicts the noise component of `z` at its annotated step, optionally
    /// conditioned on a stage embedding. Output shape equals the input shape.
    fn predict(&self, z: &LatentCode, ctx: Option<&StageEmbedding>) -> Result<ArrayD<f64>, AdapterError>;

    /// Width of the conditional embedding this predictor consumes.
    fn context_dim(&self) -> usize;

    /// The backend's null/unconditional embedding.
    fn uncond_embedding(&self) -> StageEmbedding;

    /// Forward pass that also returns the VJP onto the context, for
    /// embedding training. `dropout` draws masks for the cross-attention
    /// sites; pass `None` outside training. Backends whose output does not
    /// depend on the context return a zero VJP.
    fn predict_with_context_vjp(
        &self,
        z: &LatentCode,
        ctx: &StageEmbedding,
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<(ArrayD<f64>, ContextVjp), AdapterError>;

    /// Checksum over every parameter; training code asserts this is stable.
    fn param_checksum(&self) -> u64;

    /// Whether concurrent calls are permitted. Callers must serialize
    /// otherwise.
    fn reentrant(&self) -> bool {
        true
    }
}

/// Latent autoencoder interface.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &Image) -> Result<LatentCode, AdapterError>;
    fn decode(&self, z: &LatentCode) -> Result<Image, AdapterError>;
    /// Pulls an image-space cotangent (flat, same layout as `Image::data`)
    /// back to latent space.
    fn decode_vjp(&self, z: &LatentCode, image_cotangent: &[f64]) -> Result<ArrayD<f64>, AdapterError>;
    fn latent_len(&self) -> usize;
    fn image_shape(&self) -> [usize; 3];
    fn param_checksum(&self) -> u64;
}

/// Face identity embedding network interface.
pub trait IdentityEmbedder: Send + Sync {
    /// Maps an image to a unit-norm identity vector.
    fn embed(&self, image: &Image) -> Result<IdentityEmbedding, AdapterError>;
    /// Pulls a cotangent on the (normalized) embedding back to image space.
    fn embed_vjp(&self, image: &Image, cotangent: &Array1<f64>) -> Result<Vec<f64>, AdapterError>;
    fn dim(&self) -> usize;
    fn metric(&self) -> Metric;
    fn threshold(&self) -> f64;
    fn id(&self) -> &str;
    fn param_checksum(&self) -> u64;
}

/// Multi-scale image feature encoder interface.
pub trait FeatureEncoder: Send + Sync {
    fn encode_pyramid(&self, image: &Image) -> Result<FeaturePyramid, AdapterError>;
    fn level_dims(&self) -> [usize; PYRAMID_LEVELS];
    fn param_checksum(&self) -> u64;
}

/// Everything a pipeline run needs, bound to one model id.
#[derive(Clone)]
pub struct Backends {
    pub schedule: Arc<NoiseSchedule>,
    pub predictor: Arc<dyn NoisePredictor>,
    pub codec: Arc<dyn LatentCodec>,
    pub features: Arc<dyn FeatureEncoder>,
    pub embedder: Arc<dyn IdentityEmbedder>,
    pub model_id: String,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends").field("model_id", &self.model_id).finish_non_exhaustive()
    }
}

impl Backends {
    /// Combined checksum over all backend parameters.
    pub fn param_checksum(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.predictor.param_checksum().to_le_bytes());
        hasher.update(self.codec.param_checksum().to_le_bytes());
        hasher.update(self.features.param_checksum().to_le_bytes());
        hasher.update(self.embedder.param_checksum().to_le_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// The declaration a registered backend makes about itself.
    pub fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            model_id: self.model_id.clone(),
            latent_len: self.codec.latent_len(),
            context_dim: self.predictor.context_dim(),
            embedding_dim: self.embedder.dim(),
            metric: self.embedder.metric(),
            threshold: self.embedder.threshold(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackendDescriptor {
    pub model_id: String,
    pub latent_len: usize,
    pub context_dim: usize,
    pub embedding_dim: usize,
    pub metric: Metric,
    pub threshold: f64,
}

/// Parsed backend identifier: a kind plus sorted key=value parameters.
///
/// The `Display` form (`kind:k1=v1,k2=v2`) is what keys record as their
/// model id, so a key file carries everything needed to rebuild its backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendSpec {
    pub kind: String,
    pub params: BTreeMap<String, String>,
}

impl BackendSpec {
    pub fn new(kind: impl Into<String>) -> Self {
        Self { kind: kind.into(), params: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, AdapterError> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| AdapterError::BadSpec {
                spec: self.to_string(),
                reason: format!("parameter '{key}' is not an integer: {v}"),
            }),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, AdapterError> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| AdapterError::BadSpec {
                spec: self.to_string(),
                reason: format!("parameter '{key}' is not a number: {v}"),
            }),
        }
    }

    /// Image shape from the `img=HxWxC` parameter, or a flat
    /// `[1, latent, 1]` strip from `latent=N` (defaulting to
    /// `default_latent`).
    pub fn image_shape(&self, default_latent: usize) -> Result<[usize; 3], AdapterError> {
        if let Some(img) = self.params.get("img") {
            let dims: Vec<usize> = img
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| AdapterError::BadSpec {
                    spec: self.to_string(),
                    reason: format!("img must be HxWxC, got '{img}'"),
                })?;
            if dims.len() != 3 || dims.iter().any(|&d| d == 0) {
                return Err(AdapterError::BadSpec {
                    spec: self.to_string(),
                    reason: format!("img must be HxWxC, got '{img}'"),
                });
            }
            Ok([dims[0], dims[1], dims[2]])
        } else {
            let n = self.get_u64("latent", default_latent as u64)? as usize;
            Ok([1, n, 1])
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        let mut first = true;
        for (k, v) in &self.params {
            write!(f, "{}{k}={v}", if first { ":" } else { "," })?;
            first = false;
        }
        Ok(())
    }
}

impl std::str::FromStr for BackendSpec {
    type Err = AdapterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k, Some(r)),
            None => (s, None),
        };
        if kind.is_empty() {
            return Err(AdapterError::BadSpec { spec: s.into(), reason: "empty kind".into() });
        }
        let mut params = BTreeMap::new();
        if let Some(rest) = rest {
            for pair in rest.split(',').filter(|p| !p.is_empty()) {
                let (k, v) = pair.split_once('=').ok_or_else(|| AdapterError::BadSpec {
                    spec: s.into(),
                    reason: format!("expected key=value, got '{pair}'"),
                })?;
                params.insert(k.to_string(), v.to_string());
            }
        }
        Ok(Self { kind: kind.to_string(), params })
    }
}

type BackendFactory = Box<dyn Fn(&BackendSpec) -> Result<Backends, AdapterError> + Send + Sync>;

/// Registry mapping backend kinds to constructors.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl BackendRegistry {
    /// Registry with the built-in desk-scale backends (`oracle`, `toy`,
    /// `zero`) preinstalled.
    pub fn with_builtins() -> Self {
        let mut reg = Self { factories: BTreeMap::new() };
        reg.register("oracle", |spec| oracle::build_oracle_backends(spec));
        reg.register("toy", |spec| toy::build_toy_backends(spec));
        reg.register("zero", |spec| toy::build_zero_backends(spec));
        reg
    }

    pub fn register<F>(&mut self, kind: &str, factory: F)
    where
        F: Fn(&BackendSpec) -> Result<Backends, AdapterError> + Send + Sync + 'static,
    {
        self.factories.insert(kind.to_string(), Box::new(factory));
    }

    pub fn build(&self, spec: &BackendSpec) -> Result<Backends, AdapterError> {
        let factory = self
            .factories
            .get(&spec.kind)
            .ok_or_else(|| AdapterError::UnknownBackend(spec.kind.clone()))?;
        factory(spec)
    }

    pub fn kinds(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }
}

/// Identity latent codec: the latent is the flattened image.
pub struct IdentityCodec {
    image_shape: [usize; 3],
}

impl IdentityCodec {
    pub fn new(image_shape: [usize; 3]) -> Self {
        Self { image_shape }
    }
}

impl LatentCodec for IdentityCodec {
    fn encode(&self, image: &Image) -> Result<LatentCode, AdapterError> {
        if image.shape() != self.image_shape {
            return Err(AdapterError::ImageShape { expected: self.image_shape, actual: image.shape() });
        }
        Ok(LatentCode::from_vec(image.data.clone()))
    }

    fn decode(&self, z: &LatentCode) -> Result<Image, AdapterError> {
        let [h, w, c] = self.image_shape;
        if z.len() != h * w * c {
            return Err(AdapterError::LatentShape { expected: h * w * c, actual: z.len() });
        }
        Ok(Image::new(h, w, c, z.values.iter().cloned().collect()))
    }

    fn decode_vjp(&self, z: &LatentCode, image_cotangent: &[f64]) -> Result<ArrayD<f64>, AdapterError> {
        if image_cotangent.len() != z.len() {
            return Err(AdapterError::LatentShape { expected: z.len(), actual: image_cotangent.len() });
        }
        Ok(ArrayD::from_shape_vec(z.values.raw_dim(), image_cotangent.to_vec()).unwrap())
    }

    fn latent_len(&self) -> usize {
        let [h, w, c] = self.image_shape;
        h * w * c
    }

    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn param_checksum(&self) -> u64 {
        checksum_f64s(&[&[
            self.image_shape[0] as f64,
            self.image_shape[1] as f64,
            self.image_shape[2] as f64,
        ]])
    }
}

/// Checksum over parameter buffers: SHA-256 of the little-endian bytes,
/// truncated to 64 bits.
pub fn checksum_f64s(buffers: &[&[f64]]) -> u64 {
    let mut hasher = Sha256::new();
    for buf in buffers {
        for v in *buf {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_spec_round_trips_through_display() {
        let spec = BackendSpec::new("toy").with("seed", 7).with("latent", 48);
        let s = spec.to_string();
        assert_eq!(s, "toy:latent=48,seed=7");
        let parsed: BackendSpec = s.parse().unwrap();
        assert_eq!(parsed, spec);
    }

    #[test]
    fn backend_spec_rejects_garbage() {
        assert!("".parse::<BackendSpec>().is_err());
        assert!("toy:novalue".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn registry_reports_unknown_backend() {
        let reg = BackendRegistry::with_builtins();
        let err = reg.build(&BackendSpec::new("nonexistent")).unwrap_err();
        assert!(matches!(err, AdapterError::UnknownBackend(_)));
    }

    #[test]
    fn metric_distances() {
        let a = ndarray::arr1(&[1.0, 0.0]);
        let b = ndarray::arr1(&[0.0, 1.0]);
        assert!((Metric::Euclidean.distance(&a, &b) - 2f64.sqrt()).abs() < 1e-15);
        assert!((Metric::CosineDistance.distance(&a, &b) - 1.0).abs() < 1e-15);
    }
}
