//! Multi-scale image inversion: maps a five-level feature pyramid, modulated
//! by per-stage time embeddings, to a set of ten stage-wise conditional
//! embeddings (key-E), and trains that map per image against a frozen noise
//! predictor.
//!
//! Stage layout: the schedule's step range is split into ten equal
//! contiguous blocks; step `t` belongs to stage `t * 10 / T`. Pyramid level
//! `j` (shallow to deep) owns stages `2j` and `2j+1`, so the deepest level
//! feeds the two latest stages.

use ndarray::{Array2, ArrayD};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::adapters::{AdapterError, Backends, FeaturePyramid, PYRAMID_LEVELS};
use crate::autodiff::{randn2, NodeId, Tape};
use crate::image::Image;
use crate::optim::Adam;
use crate::schedule::{forward_noise, ScheduleError};

/// Number of stages the conditioning is split into.
pub const N_STAGES: usize = 10;
/// Embedding width of the paper-scale conditional space.
pub const DEFAULT_EMBED_DIM: usize = 768;

#[derive(Debug, Error)]
pub enum MsiError {
    #[error("schedule length {t_total} is not divisible into {n_stages} stages")]
    StagePartition { t_total: usize, n_stages: usize },
    #[error("embedding set has {0} stages, expected {expected}", expected = N_STAGES)]
    WrongStageCount(usize),
    #[error("stage {stage} tokens are {actual} wide, set declares dim {declared}")]
    StageDimMismatch { stage: usize, declared: usize, actual: usize },
    #[error("pyramid level {level} has {actual} features, state expects {expected}")]
    LevelDimMismatch { level: usize, expected: usize, actual: usize },
    #[error("non-finite value in stage {0} embedding")]
    NonFiniteStage(usize),
    #[error("MSI embed dim {msi} does not match predictor context dim {predictor}")]
    ContextDimMismatch { msi: usize, predictor: usize },
    #[error("training loss became non-finite at step {step} (t={t}, loss={loss})")]
    NonFiniteLoss { step: usize, t: usize, loss: f64 },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Token embedding for one conditioning stage. `stage_index` is `None` for
/// the unconditional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct StageEmbedding {
    /// tokens x embed_dim.
    pub tokens: Array2<f64>,
    pub stage_index: Option<usize>,
}

impl StageEmbedding {
    /// The null embedding of a given width.
    pub fn unconditional(dim: usize) -> Self {
        Self { tokens: Array2::zeros((1, dim)), stage_index: None }
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// The learned per-image embedding set (key-E): one embedding per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalEmbeddingSet {
    pub stages: Vec<StageEmbedding>,
    pub dim: usize,
    pub image_fingerprint: String,
    pub model_id: String,
}

impl ConditionalEmbeddingSet {
    pub fn validate(&self) -> Result<(), MsiError> {
        if self.stages.len() != N_STAGES {
            return Err(MsiError::WrongStageCount(self.stages.len()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.dim() != self.dim {
                return Err(MsiError::StageDimMismatch {
                    stage: i,
                    declared: self.dim,
                    actual: stage.dim(),
                });
            }
            if !stage.tokens.iter().all(|v| v.is_finite()) {
                return Err(MsiError::NonFiniteStage(i));
            }
        }
        Ok(())
    }

    pub fn stage(&self, index: usize) -> &StageEmbedding {
        &self.stages[index]
    }
}

/// Validates that the schedule splits into equal stage blocks. Call once at
/// configuration time; [`stage_of`] assumes it holds.
pub fn check_stage_partition(t_total: usize, n_stages: usize) -> Result<(), MsiError> {
    if n_stages == 0 || t_total % n_stages != 0 {
        return Err(MsiError::StagePartition { t_total, n_stages });
    }
    Ok(())
}

/// Stage owning step `t`: `min(t * n / t_total, n - 1)`.
///
/// With the default 1000-step schedule and ten stages this is `t / 100`.
pub fn stage_of(t: usize, t_total: usize, n_stages: usize) -> usize {
    debug_assert!(t < t_total);
    (t * n_stages / t_total).min(n_stages - 1)
}

/// Transformer-style sinusoidal position features, as a 1 x dim row.
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Array2<f64> {
    let mut row = Array2::zeros((1, dim));
    for i in 0..dim {
        let pair = (i / 2) as f64;
        let freq = 10000f64.powf(-2.0 * pair / dim as f64);
        row[[0, i]] = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
    }
    row
}

/// Architecture hyperparameters of the MSI network.
#[derive(Debug, Clone)]
pub struct MsiConfig {
    pub embed_dim: usize,
    pub tokens_per_stage: usize,
    pub attn_dim: usize,
    /// Dropout rate applied to attention weights during training passes.
    pub dropout_rate: f64,
    /// When false, the text-encoder head keeps its initialization (frozen
    /// head mode for backends with a pretrained head).
    pub train_head: bool,
}

impl Default for MsiConfig {
    fn default() -> Self {
        Self {
            embed_dim: DEFAULT_EMBED_DIM,
            tokens_per_stage: 1,
            attn_dim: 32,
            dropout_rate: 0.05,
            train_head: true,
        }
    }
}

/// Trainable state of the MSI network.
pub struct MsiState {
    cfg: MsiConfig,
    level_dims: [usize; PYRAMID_LEVELS],
    /// Sinusoid of each stage's center time, fixed at construction.
    stage_time_features: Vec<Array2<f64>>,
    level_w: Vec<Array2<f64>>,
    level_b: Vec<Array2<f64>>,
    time_w: Array2<f64>,
    time_b: Array2<f64>,
    attn_wq: Array2<f64>,
    attn_wk: Array2<f64>,
    attn_wv: Array2<f64>,
    attn_wo: Array2<f64>,
    head_w: Array2<f64>,
    head_b: Array2<f64>,
}

struct MsiGraph {
    stages: Vec<NodeId>,
    params: Vec<NodeId>,
}

impl MsiState {
    pub fn init(
        seed: u64,
        cfg: MsiConfig,
        level_dims: [usize; PYRAMID_LEVELS],
        t_total: usize,
    ) -> Result<Self, MsiError> {
        check_stage_partition(t_total, N_STAGES)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let k = cfg.tokens_per_stage;
        let block = t_total as f64 / N_STAGES as f64;
        let stage_time_features = (0..N_STAGES)
            .map(|s| sinusoidal_embedding((s as f64 + 0.5) * block, d))
            .collect();
        let sd = 1.0 / (d as f64).sqrt();
        let level_w = level_dims
            .iter()
            .map(|&fd| randn2(&mut rng, fd, d, 1.0 / (fd as f64).sqrt()))
            .collect();
        let level_b = (0..PYRAMID_LEVELS).map(|_| randn2(&mut rng, 1, d, 0.1)).collect();
        Ok(Self {
            stage_time_features,
            level_w,
            level_b,
            time_w: randn2(&mut rng, d, d, sd),
            time_b: randn2(&mut rng, 1, d, 0.1),
            attn_wq: randn2(&mut rng, d, cfg.attn_dim, sd),
            attn_wk: randn2(&mut rng, d, cfg.attn_dim, sd),
            attn_wv: randn2(&mut rng, d, cfg.attn_dim, sd),
            attn_wo: randn2(&mut rng, cfg.attn_dim, d, 1.0 / (cfg.attn_dim as f64).sqrt()),
            head_w: randn2(&mut rng, d, k * d, sd),
            head_b: randn2(&mut rng, 1, k * d, 0.1),
            cfg,
            level_dims,
        })
    }

    pub fn config(&self) -> &MsiConfig {
        &self.cfg
    }

    fn param_refs(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = Vec::new();
        for (w, b) in self.level_w.iter().zip(&self.level_b) {
            out.push(w);
            out.push(b);
        }
        out.extend([
            &self.time_w, &self.time_b, &self.attn_wq, &self.attn_wk, &self.attn_wv,
            &self.attn_wo, &self.head_w, &self.head_b,
        ]);
        out
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        for (w, b) in self.level_w.iter_mut().zip(self.level_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.extend([
            &mut self.time_w, &mut self.time_b, &mut self.attn_wq, &mut self.attn_wk,
            &mut self.attn_wv, &mut self.attn_wo, &mut self.head_w, &mut self.head_b,
        ]);
        out
    }

    /// Indices of the head parameters in the flat parameter order.
    fn head_param_indices(&self) -> [usize; 2] {
        let n = self.param_refs().len();
        [n - 2, n - 1]
    }

    fn check_pyramid(&self, pyramid: &FeaturePyramid) -> Result<(), MsiError> {
        if pyramid.levels.len() != PYRAMID_LEVELS {
            return Err(AdapterError::PyramidLevels(pyramid.levels.len()).into());
        }
        for (l, (level, &dim)) in pyramid.levels.iter().zip(&self.level_dims).enumerate() {
            if level.len() != dim {
                return Err(MsiError::LevelDimMismatch {
                    level: l,
                    expected: dim,
                    actual: level.len(),
                });
            }
        }
        Ok(())
    }

    /// Builds the forward graph: project each level, modulate with the owning
    /// stage's time embedding, self-attend over the ten modulated vectors,
    /// and emit per-stage token matrices through the head.
    fn build_graph(
        &self,
        tape: &mut Tape,
        pyramid: &FeaturePyramid,
        trainable: bool,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> MsiGraph {
        let d = self.cfg.embed_dim;
        let k = self.cfg.tokens_per_stage;

        let enter = |tape: &mut Tape, v: &Array2<f64>, params: &mut Vec<NodeId>| {
            let id = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
            if trainable {
                params.push(id);
            }
            id
        };

        let mut params = Vec::new();
        let mut level_nodes = Vec::with_capacity(PYRAMID_LEVELS);
        for (l, feat) in pyramid.levels.iter().enumerate() {
            let w = enter(tape, &self.level_w[l], &mut params);
            let b = enter(tape, &self.level_b[l], &mut params);
            let f = tape.constant(
                Array2::from_shape_vec((1, feat.len()), feat.to_vec()).expect("feature row"),
            );
            let proj = tape.matmul(f, w);
            level_nodes.push(tape.add_row(proj, b));
        }
        let time_w = enter(tape, &self.time_w, &mut params);
        let time_b = enter(tape, &self.time_b, &mut params);
        let wq = enter(tape, &self.attn_wq, &mut params);
        let wk = enter(tape, &self.attn_wk, &mut params);
        let wv = enter(tape, &self.attn_wv, &mut params);
        let wo = enter(tape, &self.attn_wo, &mut params);
        let head_w = enter(tape, &self.head_w, &mut params);
        let head_b = enter(tape, &self.head_b, &mut params);

        let mut modulated = Vec::with_capacity(N_STAGES);
        for s in 0..N_STAGES {
            let phi = tape.constant(self.stage_time_features[s].clone());
            let te_lin = tape.matmul(phi, time_w);
            let te = tape.add_row(te_lin, time_b);
            let m = tape.mul(level_nodes[s / 2], te);
            modulated.push(m);
        }
        let m_all = tape.concat_rows(modulated);

        let q = tape.matmul(m_all, wq);
        let keys = tape.matmul(m_all, wk);
        let vals = tape.matmul(m_all, wv);
        let keys_t = tape.transpose(keys);
        let raw = tape.matmul(q, keys_t);
        let scores = tape.scale_const(raw, 1.0 / (self.cfg.attn_dim as f64).sqrt());
        let mut attn = tape.softmax_rows(scores);
        if let Some(rng) = dropout.as_deref_mut() {
            let mask = dropout_mask(tape.value(attn).raw_dim(), self.cfg.dropout_rate, rng);
            attn = tape.mul_mask(attn, mask);
        }
        let pooled = tape.matmul(attn, vals);
        let u = tape.matmul(pooled, wo);
        let h_all = tape.add(m_all, u);

        let mut stages = Vec::with_capacity(N_STAGES);
        for s in 0..N_STAGES {
            let h = tape.slice_row(h_all, s);
            let lin = tape.matmul(h, head_w);
            let flat = tape.add_row(lin, head_b);
            stages.push(tape.reshape(flat, (k, d)));
        }
        MsiGraph { stages, params }
    }

    /// Evaluates the embedding set. A dropout RNG marks a training pass;
    /// inference passes (`None`) are deterministic.
    pub fn forward(
        &self,
        pyramid: &FeaturePyramid,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Vec<StageEmbedding>, MsiError> {
        self.check_pyramid(pyramid)?;
        let mut tape = Tape::new();
        let graph = self.build_graph(&mut tape, pyramid, false, dropout);
        Ok(graph
            .stages
            .iter()
            .enumerate()
            .map(|(s, id)| StageEmbedding { tokens: tape.value(*id).clone(), stage_index: Some(s) })
            .collect())
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

/// Training hyperparameters for per-image embedding learning.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    /// Base learning rate; the effective rate decays linearly to zero over
    /// the run.
    pub lr: f64,
    pub seed: u64,
    pub probe_count: usize,
    pub msi: MsiConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 400, lr: 1e-3, seed: 0, probe_count: 32, msi: MsiConfig::default() }
    }
}

/// What a training run measured about itself.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
}

fn mean_sq_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let n = a.len() as f64;
    ndarray::Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y)) / n
}

fn sample_eps(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).unwrap()
}

/// Learns key-E for one image: optimize the MSI parameters against the
/// frozen backend noise predictor, sampling one `(t, eps)` pair per step
/// (batch size 1) and selecting the stage embedding that owns `t`.
///
/// Only MSI parameters move; the backends stay frozen. The probe loss is the
/// training objective evaluated on a fixed held-out set of `(t, eps)` draws
/// with dropout off.
pub fn train_embedding(
    image: &Image,
    backends: &Backends,
    cfg: &TrainConfig,
) -> Result<(ConditionalEmbeddingSet, TrainReport), MsiError> {
    let t_total = backends.schedule.t_total();
    check_stage_partition(t_total, N_STAGES)?;
    if cfg.msi.embed_dim != backends.predictor.context_dim() {
        return Err(MsiError::ContextDimMismatch {
            msi: cfg.msi.embed_dim,
            predictor: backends.predictor.context_dim(),
        });
    }

    let z0 = backends.codec.encode(image)?;
    let pyramid = backends.features.encode_pyramid(image)?;
    let msi_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    let mut msi = MsiState::init(msi_seed, cfg.msi.clone(), backends.features.level_dims(), t_total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Held-out probe set: steps stratified evenly across the schedule so the
    // probe is a low-variance estimate of the training objective, noise
    // drawn fresh per probe.
    let probes: Vec<(usize, ArrayD<f64>)> = (0..cfg.probe_count)
        .map(|j| {
            let t = ((j as f64 + 0.5) * t_total as f64 / cfg.probe_count as f64) as usize;
            (t.min(t_total - 1), sample_eps(&mut rng, z0.values.shape()))
        })
        .collect();

    let probe_loss = |msi: &MsiState| -> Result<f64, MsiError> {
        let stages = msi.forward(&pyramid, None)?;
        let mut acc = 0.0;
        for (t, eps) in &probes {
            let z_t = forward_noise(&z0, *t, eps, &backends.schedule)?;
            let stage = &stages[stage_of(*t, t_total, N_STAGES)];
            let pred = backends.predictor.predict(&z_t, Some(stage))?;
            acc += mean_sq_err(eps, &pred);
        }
        Ok(acc / probes.len() as f64)
    };

    let initial_probe_loss = probe_loss(&msi)?;

    if cfg.steps > 0 {
        let shapes: Vec<(usize, usize)> =
            msi.param_refs().iter().map(|p| (p.nrows(), p.ncols())).collect();
        let mut adam = Adam::new(cfg.lr, &shapes);
        let head_indices = msi.head_param_indices();

        for step in 0..cfg.steps {
            adam.set_lr(cfg.lr * (1.0 - step as f64 / cfg.steps as f64));
            let t = rng.gen_range(0..t_total);
            let eps = sample_eps(&mut rng, z0.values.shape());
            let z_t = forward_noise(&z0, t, &eps, &backends.schedule)?;
            let s = stage_of(t, t_total, N_STAGES);

            let mut tape = Tape::new();
            let graph = msi.build_graph(&mut tape, &pyramid, true, Some(&mut rng));
            let stage_node = graph.stages[s];
            let stage = StageEmbedding {
                tokens: tape.value(stage_node).clone(),
                stage_index: Some(s),
            };
            let (eps_pred, ctx_vjp) = backends.predictor.predict_with_context_vjp(
                &z_t,
                &stage,
                Some((msi.cfg.dropout_rate, &mut rng)),
            )?;
            let loss = mean_sq_err(&eps, &eps_pred);
            if !loss.is_finite() {
                return Err(MsiError::NonFiniteLoss { step, t, loss });
            }
            let n = eps_pred.len() as f64;
            let cot = ndarray::Zip::from(&eps_pred).and(&eps).map_collect(|&p, &e| 2.0 * (p - e) / n);
            let stage_grad = ctx_vjp(&cot);

            let mut grads_by_node = tape.backward(&[(stage_node, stage_grad)]);
            let mut grads: Vec<Option<Array2<f64>>> =
                graph.params.iter().map(|id| grads_by_node.take(*id)).collect();
            if !msi.cfg.train_head {
                for idx in head_indices {
                    grads[idx] = None;
                }
            }
            let mut params = msi.param_refs_mut();
            adam.step(&mut params, &grads);
        }
    }

    let final_probe_loss = probe_loss(&msi)?;
    let stages = msi.forward(&pyramid, None)?;
    let set = ConditionalEmbeddingSet {
        stages,
        dim: cfg.msi.embed_dim,
        image_fingerprint: image.fingerprint(),
        model_id: backends.model_id.clone(),
    };
    set.validate()?;
    Ok((set, TrainReport { steps: cfg.steps, initial_probe_loss, final_probe_loss }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::toy::ToyFeatureEncoder;
    use crate::schedule::LatentCode;
    use crate::adapters::FeatureEncoder;

    #[test]
    fn stage_of_partitions_the_range() {
        assert_eq!(stage_of(0, 1000, 10), 0);
        assert_eq!(stage_of(99, 1000, 10), 0);
        assert_eq!(stage_of(100, 1000, 10), 1);
        assert_eq!(stage_of(500, 1000, 10), 5);
        assert_eq!(stage_of(999, 1000, 10), 9);
    }

    #[test]
    fn stage_partition_requires_divisibility() {
        assert!(check_stage_partition(1000, 10).is_ok());
        assert!(check_stage_partition(999, 10).is_err());
        assert!(check_stage_partition(100, 0).is_err());
    }

    #[test]
    fn every_step_maps_to_exactly_one_stage_block() {
        let t_total = 1000;
        for s in 0..N_STAGES {
            let block: Vec<usize> =
                (0..t_total).filter(|&t| stage_of(t, t_total, N_STAGES) == s).collect();
            assert_eq!(block.len(), 100);
            assert_eq!(block[0], s * 100);
            assert_eq!(*block.last().unwrap(), s * 100 + 99);
        }
    }

    fn tiny_state(seed: u64) -> (MsiState, FeaturePyramid) {
        let cfg = MsiConfig {
            embed_dim: 12,
            tokens_per_stage: 2,
            attn_dim: 6,
            dropout_rate: 0.05,
            train_head: true,
        };
        let enc = ToyFeatureEncoder::new(seed, 9, 4);
        let img = Image::flat((0..9).map(|i| 0.1 * i as f64).collect());
        let pyr = enc.encode_pyramid(&img).unwrap();
        let state = MsiState::init(seed, cfg, enc.level_dims(), 1000).unwrap();
        (state, pyr)
    }

    #[test]
    fn forward_emits_ten_stage_token_matrices() {
        let (state, pyr) = tiny_state(3);
        let stages = state.forward(&pyr, None).unwrap();
        assert_eq!(stages.len(), N_STAGES);
        for (s, st) in stages.iter().enumerate() {
            assert_eq!(st.tokens.nrows(), 2);
            assert_eq!(st.tokens.ncols(), 12);
            assert_eq!(st.stage_index, Some(s));
        }
    }

    #[test]
    fn forward_without_dropout_is_deterministic() {
        let (state, pyr) = tiny_state(5);
        let a = state.forward(&pyr, None).unwrap();
        let b = state.forward(&pyr, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_pyramid_stays_finite() {
        let (state, _) = tiny_state(7);
        let pyr = FeaturePyramid::new(
            (0..5).map(|_| ndarray::Array1::zeros(4)).collect(),
            (1, 1),
        )
        .unwrap();
        let stages = state.forward(&pyr, None).unwrap();
        for st in stages {
            assert!(st.tokens.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn paper_scale_shape_is_ten_by_768() {
        let cfg = MsiConfig::default();
        let enc = ToyFeatureEncoder::new(1, 16, 8);
        let img = Image::flat((0..16).map(|i| 0.05 * i as f64).collect());
        let pyr = enc.encode_pyramid(&img).unwrap();
        let state = MsiState::init(1, cfg, enc.level_dims(), 1000).unwrap();
        let stages = state.forward(&pyr, None).unwrap();
        assert_eq!(stages.len(), 10);
        for st in &stages {
            assert_eq!(st.tokens.nrows(), 1);
            assert_eq!(st.tokens.ncols(), 768);
        }
    }

    #[test]
    fn msi_parameter_gradient_matches_finite_differences() {
        // Fixed (t, eps), dropout off; 10 random parameter coordinates at
        // 1e-3 relative, toy predictor backend.
        use crate::adapters::toy::ToyPredictor;
        use crate::adapters::NoisePredictor;

        let (mut msi, pyr) = tiny_state(11);
        let predictor = ToyPredictor::new(7, 12, 8, 4, 23);
        let sched = crate::schedule::NoiseSchedule::default_linear();
        let z0 = LatentCode::from_vec((0..7).map(|i| 0.2 * i as f64 - 0.5).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let t = 437;
        let eps = sample_eps(&mut rng, &[7]);
        let z_t = forward_noise(&z0, t, &eps, &sched).unwrap();
        let s = stage_of(t, 1000, N_STAGES);

        let loss_of = |msi: &MsiState| -> f64 {
            let stages = msi.forward(&pyr, None).unwrap();
            let pred = predictor.predict(&z_t, Some(&stages[s])).unwrap();
            mean_sq_err(&eps, &pred)
        };

        // Tape gradients.
        let mut tape = Tape::new();
        let graph = msi.build_graph(&mut tape, &pyr, true, None);
        let stage_node = graph.stages[s];
        let stage =
            StageEmbedding { tokens: tape.value(stage_node).clone(), stage_index: Some(s) };
        let (eps_pred, vjp) = predictor.predict_with_context_vjp(&z_t, &stage, None).unwrap();
        let n = eps_pred.len() as f64;
        let cot = ndarray::Zip::from(&eps_pred).and(&eps).map_collect(|&p, &e| 2.0 * (p - e) / n);
        let stage_grad = vjp(&cot);
        let mut grads_by_node = tape.backward(&[(stage_node, stage_grad)]);
        let grads: Vec<Option<Array2<f64>>> =
            graph.params.iter().map(|id| grads_by_node.take(*id)).collect();

        let mut pick = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let pi = (pick.next_u32() as usize) % grads.len();
            let (rows, cols) = {
                let p = &msi.param_refs()[pi];
                (p.nrows(), p.ncols())
            };
            let r = (pick.next_u32() as usize) % rows;
            let c = (pick.next_u32() as usize) % cols;
            let base = msi.param_refs()[pi][[r, c]];
            let h = 1e-5 * (1.0 + base.abs());
            msi.param_refs_mut()[pi][[r, c]] = base + h;
            let lp = loss_of(&msi);
            msi.param_refs_mut()[pi][[r, c]] = base - h;
            let lm = loss_of(&msi);
            msi.param_refs_mut()[pi][[r, c]] = base;
            let fd = (lp - lm) / (2.0 * h);
            let ad = grads[pi].as_ref().map(|g| g[[r, c]]).unwrap_or(0.0);
            assert!(
                (ad - fd).abs() <= 1e-3 * (1.0 + ad.abs().max(fd.abs())),
                "param {pi} coord ({r},{c}): ad={ad} fd={fd}"
            );
        }
    }
}
