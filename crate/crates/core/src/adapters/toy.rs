//! Desk-scale trainable and fixed backends.
//!
//! [`ToyPredictor`] is a tiny noise network with one cross-attention layer
//! over the conditional embedding, so embedding training, attention dropout,
//! and key mismatch effects are all exercisable without pretrained weights.
//! [`ToyIdentityEmbedder`] is a fixed random projection followed by
//! normalization — deterministic, differentiable, and Lipschitz. The other
//! pieces are an identity or orthogonal-linear codec and a fixed random
//! feature pyramid encoder.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;


use super::{
    checksum_f64s, AdapterError, Backends, BackendSpec, ContextVjp, FeatureEncoder,
    FeaturePyramid, IdentityCodec, IdentityEmbedder, IdentityEmbedding, LatentCodec, Metric,
    NoisePredictor, ARCFACE_THRESHOLD, FACENET_THRESHOLD, PYRAMID_LEVELS,
};
use crate::autodiff::{randn2, Tape};
use crate::image::Image;
use crate::msi::{sinusoidal_embedding, StageEmbedding};
use crate::schedule::{LatentCode, NoiseSchedule};

pub const DEFAULT_FEATURE_DIM: usize = 8;

/// Tiny time-conditioned noise predictor with one cross-attention layer.
pub struct ToyPredictor {
    latent_len: usize,
    hidden: usize,
    attn_dim: usize,
    context_dim: usize,
    seed: u64,
    w_in: Array2<f64>,
    b_in: Array2<f64>,
    w_time: Array2<f64>,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_o: Array2<f64>,
    w_out: Array2<f64>,
    b_out: Array2<f64>,
}

impl ToyPredictor {
    pub fn new(latent_len: usize, context_dim: usize, hidden: usize, attn_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sh = 1.0 / (hidden as f64).sqrt();
        Self {
            latent_len,
            hidden,
            attn_dim,
            context_dim,
            seed,
            w_in: randn2(&mut rng, latent_len, hidden, 1.0 / (latent_len as f64).sqrt()),
            b_in: randn2(&mut rng, 1, hidden, 0.1),
            w_time: randn2(&mut rng, hidden, hidden, sh),
            w_q: randn2(&mut rng, hidden, attn_dim, sh),
            w_k: randn2(&mut rng, context_dim, attn_dim, 1.0 / (context_dim as f64).sqrt()),
            w_v: randn2(&mut rng, context_dim, attn_dim, 1.0 / (context_dim as f64).sqrt()),
            w_o: randn2(&mut rng, attn_dim, hidden, 1.0 / (attn_dim as f64).sqrt()),
            w_out: randn2(&mut rng, hidden, latent_len, sh),
            b_out: randn2(&mut rng, 1, latent_len, 0.01),
        }
    }

    fn param_buffers(&self) -> Vec<&[f64]> {
        [
            &self.w_in, &self.b_in, &self.w_time, &self.w_q, &self.w_k, &self.w_v, &self.w_o,
            &self.w_out, &self.b_out,
        ]
        .iter()
        .map(|a| a.as_slice().unwrap())
        .collect()
    }

    fn check_latent(&self, z: &LatentCode) -> Result<(), AdapterError> {
        if z.len() != self.latent_len {
            return Err(AdapterError::LatentShape { expected: self.latent_len, actual: z.len() });
        }
        Ok(())
    }

    fn check_context(&self, ctx: &StageEmbedding) -> Result<(), AdapterError> {
        if ctx.tokens.ncols() != self.context_dim {
            return Err(AdapterError::ContextWidth {
                expected: self.context_dim,
                actual: ctx.tokens.ncols(),
            });
        }
        Ok(())
    }

    /// Builds the forward graph on `tape`. Returns the output node (1 x n).
    ///
    /// `ctx` is an already-entered tape node holding the token matrix
    /// (k x context_dim). Dropout, when given, draws an inverted-dropout mask
    /// over the attention weights.
    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        z: &LatentCode,
        ctx: Option<crate::autodiff::NodeId>,
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> crate::autodiff::NodeId {
        let zrow = tape.constant(
            Array2::from_shape_vec((1, self.latent_len), z.values.iter().cloned().collect())
                .expect("flat latent"),
        );
        let trow = tape.constant(sinusoidal_embedding(z.step.annotation() as f64, self.hidden));

        let w_in = tape.constant(self.w_in.clone());
        let b_in = tape.constant(self.b_in.clone());
        let w_time = tape.constant(self.w_time.clone());

        let zin = tape.matmul(zrow, w_in);
        let tin = tape.matmul(trow, w_time);
        let mixed = tape.add(zin, tin);
        let pre = tape.add_row(mixed, b_in);
        let mut h = tape.tanh(pre);

        if let Some(ctx) = ctx {
            let w_q = tape.constant(self.w_q.clone());
            let w_k = tape.constant(self.w_k.clone());
            let w_v = tape.constant(self.w_v.clone());
            let w_o = tape.constant(self.w_o.clone());
            let q = tape.matmul(h, w_q);
            let keys = tape.matmul(ctx, w_k);
            let vals = tape.matmul(ctx, w_v);
            let keys_t = tape.transpose(keys);
            let raw = tape.matmul(q, keys_t);
            let scores = tape.scale_const(raw, 1.0 / (self.attn_dim as f64).sqrt());
            let mut attn = tape.softmax_rows(scores);
            if let Some((rate, rng)) = dropout {
                let mask = dropout_mask(tape.value(attn).raw_dim(), rate, rng);
                attn = tape.mul_mask(attn, mask);
            }
            let pooled = tape.matmul(attn, vals);
            let u = tape.matmul(pooled, w_o);
            // Additive path plus a gating product, so the context can scale
            // the latent features, not just shift them.
            let gated = tape.mul(h, u);
            let shifted = tape.add(h, u);
            h = tape.add(shifted, gated);
        }

        let h2 = tape.tanh(h);
        let w_out = tape.constant(self.w_out.clone());
        let b_out = tape.constant(self.b_out.clone());
        let proj = tape.matmul(h2, w_out);
        tape.add_row(proj, b_out)
    }
}

fn dropout_mask(shape: ndarray::Ix2, rate: f64, rng: &mut dyn RngCore) -> Array2<f64> {
    let keep = 1.0 - rate;
    let mut mask = Array2::zeros(shape);
    for v in mask.iter_mut() {
        let u: f64 = rng.gen();
        *v = if u < rate { 0.0 } else { 1.0 / keep };
    }
    mask
}

impl NoisePredictor for ToyPredictor {
    fn predict(&self, z: &LatentCode, ctx: Option<&StageEmbedding>) -> Result<ArrayD<f64>, AdapterError> {
        self.check_latent(z)?;
        if let Some(c) = ctx {
            self.check_context(c)?;
        }
        let mut tape = Tape::new();
        let ctx_node = ctx.map(|c| tape.constant(c.tokens.clone()));
        let out = self.forward_on_tape(&mut tape, z, ctx_node, None);
        let row = tape.value(out);
        Ok(ArrayD::from_shape_vec(z.values.raw_dim(), row.iter().cloned().collect()).unwrap())
    }

    fn context_dim(&self) -> usize {
        self.context_dim
    }

    fn uncond_embedding(&self) -> StageEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x756e_636f_6e64);
        StageEmbedding {
            tokens: randn2(&mut rng, 1, self.context_dim, 1.0),
            stage_index: None,
        }
    }

    fn predict_with_context_vjp(
        &self,
        z: &LatentCode,
        ctx: &StageEmbedding,
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<(ArrayD<f64>, ContextVjp), AdapterError> {
        self.check_latent(z)?;
        self.check_context(ctx)?;
        let mut tape = Tape::new();
        let ctx_node = tape.leaf(ctx.tokens.clone());
        let out = self.forward_on_tape(&mut tape, z, Some(ctx_node), dropout);
        let eps =
            ArrayD::from_shape_vec(z.values.raw_dim(), tape.value(out).iter().cloned().collect())
                .unwrap();
        let shape = (ctx.tokens.nrows(), ctx.tokens.ncols());
        let n = z.len();
        let vjp: ContextVjp = Box::new(move |cot: &ArrayD<f64>| {
            let seed = Array2::from_shape_vec((1, n), cot.iter().cloned().collect())
                .expect("cotangent matches latent length");
            let mut grads = tape.backward(&[(out, seed)]);
            grads.take(ctx_node).unwrap_or_else(|| Array2::zeros(shape))
        });
        Ok((eps, vjp))
    }

    fn param_checksum(&self) -> u64 {
        checksum_f64s(&self.param_buffers())
    }
}

/// Predictor that always returns zero noise. Sampling and inversion reduce to
/// pure rescale chains, handy as a degenerate reference backend.
pub struct ZeroPredictor {
    context_dim: usize,
}

impl ZeroPredictor {
    pub fn new(context_dim: usize) -> Self {
        Self { context_dim }
    }
}

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, z: &LatentCode, _ctx: Option<&StageEmbedding>) -> Result<ArrayD<f64>, AdapterError> {
        Ok(ArrayD::zeros(z.values.raw_dim()))
    }

    fn context_dim(&self) -> usize {
        self.context_dim
    }

    fn uncond_embedding(&self) -> StageEmbedding {
        StageEmbedding::unconditional(self.context_dim)
    }

    fn predict_with_context_vjp(
        &self,
        z: &LatentCode,
        ctx: &StageEmbedding,
        _dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<(ArrayD<f64>, ContextVjp), AdapterError> {
        let shape = (ctx.tokens.nrows(), ctx.tokens.ncols());
        let eps = ArrayD::zeros(z.values.raw_dim());
        Ok((eps, Box::new(move |_| Array2::zeros(shape))))
    }

    fn param_checksum(&self) -> u64 {
        checksum_f64s(&[&[self.context_dim as f64]])
    }
}

/// Fixed random projection + normalization standing in for a face
/// recognition embedder.
pub struct ToyIdentityEmbedder {
    w: Array2<f64>,
    metric: Metric,
    threshold: f64,
    id: String,
}

impl ToyIdentityEmbedder {
    pub fn new(
        seed: u64,
        input_len: usize,
        dim: usize,
        metric: Metric,
        threshold: f64,
        style: &str,
    ) -> Result<Self, AdapterError> {
        if dim < 2 {
            return Err(AdapterError::EmbeddingDimTooSmall(dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x656d_6265_64);
        Ok(Self {
            w: randn2(&mut rng, dim, input_len, 1.0 / (input_len as f64).sqrt()),
            metric,
            threshold,
            id: format!("toy-embedder:{style}:seed={seed}:in={input_len}:dim={dim}"),
        })
    }

    /// FaceNet-style verification: plain euclidean distance, threshold 1.1.
    pub fn facenet_style(seed: u64, input_len: usize, dim: usize) -> Result<Self, AdapterError> {
        Self::new(seed, input_len, dim, Metric::Euclidean, FACENET_THRESHOLD, "facenet")
    }

    /// ArcFace-style verification: cosine distance, threshold 0.8.
    pub fn arcface_style(seed: u64, input_len: usize, dim: usize) -> Result<Self, AdapterError> {
        Self::new(seed, input_len, dim, Metric::CosineDistance, ARCFACE_THRESHOLD, "arcface")
    }

    fn raw(&self, image: &Image) -> Result<Array1<f64>, AdapterError> {
        if image.len() != self.w.ncols() {
            return Err(AdapterError::LatentShape { expected: self.w.ncols(), actual: image.len() });
        }
        let x = Array1::from_vec(image.data.clone());
        Ok(self.w.dot(&x))
    }
}

impl IdentityEmbedder for ToyIdentityEmbedder {
    fn embed(&self, image: &Image) -> Result<IdentityEmbedding, AdapterError> {
        let y = self.raw(image)?;
        let norm = y.dot(&y).sqrt();
        Ok(IdentityEmbedding::new(y.mapv(|v| v / norm), self.id.clone()))
    }

    fn embed_vjp(&self, image: &Image, cotangent: &Array1<f64>) -> Result<Vec<f64>, AdapterError> {
        let y = self.raw(image)?;
        let norm = y.dot(&y).sqrt();
        let unit = y.mapv(|v| v / norm);
        // d(y/|y|)/dy applied to the cotangent: (g - (g.u) u) / |y|.
        let proj = unit.dot(cotangent);
        let gy = cotangent
            .iter()
            .zip(unit.iter())
            .map(|(g, u)| (g - proj * u) / norm)
            .collect::<Array1<f64>>();
        Ok(self.w.t().dot(&gy).to_vec())
    }

    fn dim(&self) -> usize {
        self.w.nrows()
    }

    fn metric(&self) -> Metric {
        self.metric
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn param_checksum(&self) -> u64 {
        checksum_f64s(&[self.w.as_slice().unwrap()])
    }
}

/// Five fixed random projections of the image, shallow to deep.
pub struct ToyFeatureEncoder {
    mats: Vec<Array2<f64>>,
    input_len: usize,
}

impl ToyFeatureEncoder {
    pub fn new(seed: u64, input_len: usize, feature_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6665_6174);
        let mats = (0..PYRAMID_LEVELS)
            .map(|_| randn2(&mut rng, feature_dim, input_len, 1.0 / (input_len as f64).sqrt()))
            .collect();
        Self { mats, input_len }
    }
}

impl FeatureEncoder for ToyFeatureEncoder {
    fn encode_pyramid(&self, image: &Image) -> Result<FeaturePyramid, AdapterError> {
        if image.len() != self.input_len {
            return Err(AdapterError::LatentShape { expected: self.input_len, actual: image.len() });
        }
        let x = Array1::from_vec(image.data.clone());
        let levels = self.mats.iter().map(|m| m.dot(&x).mapv(f64::tanh)).collect();
        FeaturePyramid::new(levels, (image.width, image.height))
    }

    fn level_dims(&self) -> [usize; PYRAMID_LEVELS] {
        let mut dims = [0; PYRAMID_LEVELS];
        for (d, m) in dims.iter_mut().zip(&self.mats) {
            *d = m.nrows();
        }
        dims
    }

    fn param_checksum(&self) -> u64 {
        let buffers: Vec<&[f64]> = self.mats.iter().map(|m| m.as_slice().unwrap()).collect();
        checksum_f64s(&buffers)
    }
}

/// Orthogonal linear codec: `decode(z) = Q z`, `encode(x) = Q^T x`.
///
/// Reconstruction is exact to floating point (documented tolerance 1e-12
/// relative); the decode Jacobian is `Q`, so the VJP is `Q^T`.
pub struct LinearCodec {
    q: Array2<f64>,
    image_shape: [usize; 3],
}

impl LinearCodec {
    pub fn new(seed: u64, image_shape: [usize; 3]) -> Self {
        let n = image_shape[0] * image_shape[1] * image_shape[2];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_6465);
        let mut q = randn2(&mut rng, n, n, 1.0);
        // Modified Gram-Schmidt; random Gaussian columns are almost surely
        // independent at these sizes.
        for j in 0..n {
            for i in 0..j {
                let qi = q.column(i).to_owned();
                let r = qi.dot(&q.column(j));
                let mut col = q.column_mut(j);
                col.zip_mut_with(&qi, |c, &b| *c -= r * b);
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
        Self { q, image_shape }
    }
}

impl LatentCodec for LinearCodec {
    fn encode(&self, image: &Image) -> Result<LatentCode, AdapterError> {
        if image.shape() != self.image_shape {
            return Err(AdapterError::ImageShape { expected: self.image_shape, actual: image.shape() });
        }
        let x = Array1::from_vec(image.data.clone());
        Ok(LatentCode::from_vec(self.q.t().dot(&x).to_vec()))
    }

    fn decode(&self, z: &LatentCode) -> Result<Image, AdapterError> {
        if z.len() != self.latent_len() {
            return Err(AdapterError::LatentShape { expected: self.latent_len(), actual: z.len() });
        }
        let zv = Array1::from_vec(z.values.iter().cloned().collect());
        let [h, w, c] = self.image_shape;
        Ok(Image::new(h, w, c, self.q.dot(&zv).to_vec()))
    }

    fn decode_vjp(&self, z: &LatentCode, image_cotangent: &[f64]) -> Result<ArrayD<f64>, AdapterError> {
        if image_cotangent.len() != self.latent_len() {
            return Err(AdapterError::LatentShape {
                expected: self.latent_len(),
                actual: image_cotangent.len(),
            });
        }
        let g = Array1::from_vec(image_cotangent.to_vec());
        let pulled = self.q.t().dot(&g);
        Ok(ArrayD::from_shape_vec(z.values.raw_dim(), pulled.to_vec()).unwrap())
    }

    fn latent_len(&self) -> usize {
        self.image_shape[0] * self.image_shape[1] * self.image_shape[2]
    }

    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn param_checksum(&self) -> u64 {
        checksum_f64s(&[self.q.as_slice().unwrap()])
    }
}

fn build_schedule(spec: &BackendSpec) -> Result<Arc<NoiseSchedule>, AdapterError> {
    let t_total = spec.get_u64("T", 1000)? as usize;
    NoiseSchedule::build(t_total, 1e-4, 0.02, crate::schedule::ScheduleKind::Linear)
        .map(Arc::new)
        .map_err(|e| AdapterError::BadSpec { spec: spec.to_string(), reason: e.to_string() })
}

fn build_embedder(
    spec: &BackendSpec,
    seed: u64,
    input_len: usize,
) -> Result<Arc<ToyIdentityEmbedder>, AdapterError> {
    let embdim = spec.get_u64("embdim", 8)? as usize;
    let style = spec.params.get("embstyle").map(String::as_str).unwrap_or("facenet");
    let embedder = match style {
        "facenet" => ToyIdentityEmbedder::facenet_style(seed, input_len, embdim)?,
        "arcface" => ToyIdentityEmbedder::arcface_style(seed, input_len, embdim)?,
        other => {
            return Err(AdapterError::BadSpec {
                spec: spec.to_string(),
                reason: format!("unknown embstyle '{other}'"),
            })
        }
    };
    Ok(Arc::new(embedder))
}

fn build_codec(
    spec: &BackendSpec,
    seed: u64,
    image_shape: [usize; 3],
) -> Result<Arc<dyn LatentCodec>, AdapterError> {
    match spec.params.get("codec").map(String::as_str).unwrap_or("identity") {
        "identity" => Ok(Arc::new(IdentityCodec::new(image_shape))),
        "linear" => Ok(Arc::new(LinearCodec::new(seed, image_shape))),
        other => Err(AdapterError::BadSpec {
            spec: spec.to_string(),
            reason: format!("unknown codec '{other}'"),
        }),
    }
}

/// Registry factory for the trainable toy backend.
///
/// Parameters: `seed`, `latent` or `img=HxWxC`, `ctx`, `hidden`, `attn`,
/// `embdim`, `embstyle`, `codec`, `T`.
pub fn build_toy_backends(spec: &BackendSpec) -> Result<Backends, AdapterError> {
    let seed = spec.get_u64("seed", 1)?;
    let image_shape = spec.image_shape(48)?;
    let n = image_shape[0] * image_shape[1] * image_shape[2];
    let ctx = spec.get_u64("ctx", 768)? as usize;
    let hidden = spec.get_u64("hidden", 32)? as usize;
    let attn = spec.get_u64("attn", 16)? as usize;

    Ok(Backends {
        schedule: build_schedule(spec)?,
        predictor: Arc::new(ToyPredictor::new(n, ctx, hidden, attn, seed)),
        codec: build_codec(spec, seed, image_shape)?,
        features: Arc::new(ToyFeatureEncoder::new(seed, n, DEFAULT_FEATURE_DIM)),
        embedder: build_embedder(spec, seed, n)?,
        model_id: spec.to_string(),
    })
}

/// Registry factory for the zero-noise backend.
pub fn build_zero_backends(spec: &BackendSpec) -> Result<Backends, AdapterError> {
    let seed = spec.get_u64("seed", 1)?;
    let image_shape = spec.image_shape(48)?;
    let n = image_shape[0] * image_shape[1] * image_shape[2];
    let ctx = spec.get_u64("ctx", 16)? as usize;
    Ok(Backends {
        schedule: build_schedule(spec)?,
        predictor: Arc::new(ZeroPredictor::new(ctx)),
        codec: build_codec(spec, seed, image_shape)?,
        features: Arc::new(ToyFeatureEncoder::new(seed, n, DEFAULT_FEATURE_DIM)),
        embedder: build_embedder(spec, seed, n)?,
        model_id: spec.to_string(),
    })
}
