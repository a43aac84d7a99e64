//! End-to-end protection procedures: anonymize, hide identity, key-I
//! generation via DDIM inversion, and key-based recovery.
//!
//! A protection run noises the clean latent to depth `floor(s_ns * T)`,
//! denoises it along a strided step subsequence under energy guidance and
//! the tau-split embedding schedule, and independently inverts the clean
//! latent all the way to the terminal step to produce key-I. Recovery walks
//! the same strided subsequence back down from key-I, conditioned on the
//! learned stage embeddings at every step, and never consults tau.
//!
//! Everything is seed-deterministic: the only randomness is the noise draws
//! from the run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterError, Backends};
use crate::guidance::{
    AnonymizeEnergy, BoundEnergy, DivIndexMode, EnergyKind, EnergyReport, GuidanceConfig,
    GuidanceError, HideEnergy, Lambda,
};
use crate::image::Image;
use crate::msi::{stage_of, ConditionalEmbeddingSet, MsiError, N_STAGES};
use crate::schedule::{
    ddim_invert_step, ddim_step, forward_noise, strided_indices, LatentCode, ScheduleError, Step,
};
use crate::strategy::{ScheduleStrategy, StrategyError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("noise strength must lie in (0,1], got {0}")]
    NoiseStrengthOutOfRange(f64),
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("noise depth {depth} is out of range for a {t_total}-step schedule")]
    NoiseDepthOutOfRange { depth: usize, t_total: usize },
    #[error("key-E was trained for model '{key}' but the supplied backend is '{backend}'")]
    BackendMismatch { key: String, backend: String },
    #[error("key fingerprint {key} does not match image fingerprint {image} (pass force to override)")]
    FingerprintMismatch { key: String, image: String },
    #[error("key pair disagrees on {field}: '{a}' vs '{b}'")]
    KeyPairMismatch { field: &'static str, a: String, b: String },
    #[error("key-I terminal latent is annotated {actual}, expected step {expected}")]
    BadTerminalStep { expected: usize, actual: String },
    #[error("latent became non-finite during inversion at step {step}")]
    NonFiniteInversion { step: usize },
    #[error("guidance aborted at step {step} after {} finite reports", trail.len())]
    GuidanceAborted { step: usize, trail: Vec<EnergyReport> },
    #[error(transparent)]
    Guidance(GuidanceError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Msi(#[from] MsiError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

impl From<GuidanceError> for PipelineError {
    fn from(e: GuidanceError) -> Self {
        match e {
            GuidanceError::Adapter(a) => PipelineError::Adapter(a),
            GuidanceError::Schedule(s) => PipelineError::Schedule(s),
            other => PipelineError::Guidance(other),
        }
    }
}

/// Which protection task produced an artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Anonymize,
    Hide,
}

impl std::fmt::Display for RunKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunKind::Anonymize => write!(f, "anonymize"),
            RunKind::Hide => write!(f, "hide"),
        }
    }
}

/// Settings of one protection run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Noise strength: the latent is noised to depth `floor(s_ns * T)`.
    pub s_ns: f64,
    /// Embedding schedule split point.
    pub tau: f64,
    pub lambda: Lambda,
    pub seed: u64,
    /// Step stride of the denoising subsequence (and of key-I inversion).
    pub stride: usize,
    /// Number of coupled noise branches (anonymization only).
    pub group_count: usize,
    /// Which of the branches is the primary output.
    pub pick: usize,
    pub idis_weight: f64,
    pub div_weight: f64,
    pub div_mode: DivIndexMode,
    /// Allow a key-E whose fingerprint does not match the input image.
    pub force: bool,
}

impl RunConfig {
    /// Anonymization defaults: `s_ns` 0.6, `tau` 0.4, `lambda` 1, four noise
    /// branches.
    pub fn anonymize_defaults() -> Self {
        Self {
            s_ns: 0.6,
            tau: 0.4,
            lambda: Lambda::Constant(1.0),
            seed: 0,
            stride: 20,
            group_count: 4,
            pick: 0,
            idis_weight: 1.0,
            div_weight: 1.0,
            div_mode: DivIndexMode::AsWritten,
            force: false,
        }
    }

    /// Identity-hiding defaults: `s_ns` 0.8, `tau` 0.6, single branch.
    /// `lambda` defaults to 1 and should usually come from calibration.
    pub fn hide_defaults() -> Self {
        Self {
            s_ns: 0.8,
            tau: 0.6,
            lambda: Lambda::Constant(1.0),
            seed: 0,
            stride: 20,
            group_count: 1,
            pick: 0,
            idis_weight: 1.0,
            div_weight: 1.0,
            div_mode: DivIndexMode::AsWritten,
            force: false,
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if !(self.s_ns > 0.0 && self.s_ns <= 1.0) {
            return Err(PipelineError::NoiseStrengthOutOfRange(self.s_ns));
        }
        if self.stride == 0 {
            return Err(PipelineError::ZeroStride);
        }
        self.lambda.validate().map_err(PipelineError::from)?;
        Ok(())
    }
}

/// The DDIM-inverted terminal latent plus the metadata binding it to its
/// key-E (key-I).
#[derive(Debug, Clone)]
pub struct NoiseKey {
    pub z_terminal: LatentCode,
    pub t_total: usize,
    pub stride: usize,
    pub model_id: String,
    pub image_fingerprint: String,
    pub created_for: RunKind,
    pub seed: u64,
    pub tau: f64,
    pub s_ns: f64,
}

/// Output of an anonymization run: all noise-branch images, key-I, and the
/// per-step energy trail.
#[derive(Debug)]
pub struct AnonymizeOutput {
    pub images: Vec<Image>,
    pub key: NoiseKey,
    pub trail: Vec<EnergyReport>,
    pick: usize,
}

impl AnonymizeOutput {
    /// The branch selected as the primary output.
    pub fn primary(&self) -> &Image {
        &self.images[self.pick]
    }
}

#[derive(Debug)]
pub struct HideOutput {
    pub image: Image,
    pub key: NoiseKey,
    pub trail: Vec<EnergyReport>,
}

fn noise_depth_index(s_ns: f64, t_total: usize) -> Result<usize, PipelineError> {
    let depth = (s_ns * t_total as f64).floor() as usize;
    if depth == 0 || depth > t_total {
        return Err(PipelineError::NoiseDepthOutOfRange { depth, t_total });
    }
    Ok(depth - 1)
}

fn check_key_binding(
    key_e: &ConditionalEmbeddingSet,
    image: &Image,
    backends: &Backends,
    force: bool,
) -> Result<(), PipelineError> {
    if key_e.model_id != backends.model_id {
        return Err(PipelineError::BackendMismatch {
            key: key_e.model_id.clone(),
            backend: backends.model_id.clone(),
        });
    }
    let fp = image.fingerprint();
    if !force && key_e.image_fingerprint != fp {
        return Err(PipelineError::FingerprintMismatch {
            key: key_e.image_fingerprint.clone(),
            image: fp,
        });
    }
    Ok(())
}

fn sample_noise(rng: &mut ChaCha8Rng, shape: &[usize]) -> ndarray::ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    ndarray::ArrayD::from_shape_vec(shape.to_vec(), data).unwrap()
}

/// Guided denoising of `branches` from their common step down to clean,
/// along the strided subsequence. Returns the clean latents and the trail.
fn guided_descent(
    mut branches: Vec<LatentCode>,
    key_e: &ConditionalEmbeddingSet,
    strat: &ScheduleStrategy,
    gcfg: &GuidanceConfig,
    energy: &BoundEnergy<'_>,
    backends: &Backends,
    stride: usize,
) -> Result<(Vec<LatentCode>, Vec<EnergyReport>), PipelineError> {
    let start = match branches[0].step {
        Step::At(t) => t,
        Step::Clean => return Ok((branches, Vec::new())),
    };
    let ascending = strided_indices(start, stride);
    let mut targets: Vec<Step> =
        ascending[..ascending.len() - 1].iter().rev().map(|&t| Step::At(t)).collect();
    targets.push(Step::Clean);

    let mut trail = Vec::with_capacity(targets.len());
    for target in targets {
        match crate::guidance::guided_step_multi(
            &branches, target, key_e, strat, gcfg, energy, backends,
        ) {
            Ok((next, report)) => {
                branches = next;
                trail.push(report);
            }
            Err(GuidanceError::NonFiniteGradient { step }) => {
                return Err(PipelineError::GuidanceAborted { step, trail });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((branches, trail))
}

fn make_noise_key(
    z0: &LatentCode,
    key_e: &ConditionalEmbeddingSet,
    backends: &Backends,
    cfg: &RunConfig,
    created_for: RunKind,
) -> Result<NoiseKey, PipelineError> {
    let z_terminal = make_key_i(z0, key_e, backends, cfg.stride)?;
    Ok(NoiseKey {
        z_terminal,
        t_total: backends.schedule.t_total(),
        stride: cfg.stride,
        model_id: backends.model_id.clone(),
        image_fingerprint: key_e.image_fingerprint.clone(),
        created_for,
        seed: cfg.seed,
        tau: cfg.tau,
        s_ns: cfg.s_ns,
    })
}

/// Anonymization: noise the latent with `group_count` independent draws,
/// denoise the coupled branches under the dissimilarity + diversity energy,
/// and invert the clean latent into key-I.
pub fn anonymize(
    image: &Image,
    key_e: &ConditionalEmbeddingSet,
    cfg: &RunConfig,
    backends: &Backends,
) -> Result<AnonymizeOutput, PipelineError> {
    cfg.validate()?;
    key_e.validate()?;
    check_key_binding(key_e, image, backends, cfg.force)?;

    let gcfg = GuidanceConfig {
        lambda: cfg.lambda.clone(),
        energy_kind: EnergyKind::Anonymize,
        group_count: cfg.group_count,
    };
    gcfg.validate().map_err(PipelineError::from)?;

    let reference = backends.embedder.embed(image)?;
    let energy = AnonymizeEnergy::with_weights(
        reference,
        cfg.group_count,
        cfg.idis_weight,
        cfg.div_weight,
        cfg.div_mode,
    )
    .map_err(PipelineError::from)?;
    let bound = BoundEnergy::Anonymize { energy: &energy, backends };

    let z0 = backends.codec.encode(image)?;
    let depth = noise_depth_index(cfg.s_ns, backends.schedule.t_total())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let branches: Vec<LatentCode> = (0..cfg.group_count)
        .map(|_| {
            let eps = sample_noise(&mut rng, z0.values.shape());
            forward_noise(&z0, depth, &eps, &backends.schedule)
        })
        .collect::<Result<_, _>>()?;

    let strat = ScheduleStrategy::new(
        cfg.tau,
        backends.schedule.t_total(),
        backends.predictor.uncond_embedding(),
    )?;
    let (clean, trail) =
        guided_descent(branches, key_e, &strat, &gcfg, &bound, backends, cfg.stride)?;

    let images = clean
        .iter()
        .map(|z| backends.codec.decode(z))
        .collect::<Result<Vec<_>, _>>()?;
    let key = make_noise_key(&z0, key_e, backends, cfg, RunKind::Anonymize)?;
    Ok(AnonymizeOutput { images, key, trail, pick: cfg.pick.min(cfg.group_count - 1) })
}

/// Visual identity hiding: one noise branch, identity-similarity energy.
pub fn hide_identity(
    image: &Image,
    key_e: &ConditionalEmbeddingSet,
    cfg: &RunConfig,
    backends: &Backends,
) -> Result<HideOutput, PipelineError> {
    let (image_out, _, trail, key) = hide_inner(image, key_e, cfg, backends, true)?;
    Ok(HideOutput { image: image_out, key: key.expect("key requested"), trail })
}

/// Hide run without key generation; used by lambda calibration where only
/// the protected image matters.
pub fn hide_image_only(
    image: &Image,
    key_e: &ConditionalEmbeddingSet,
    cfg: &RunConfig,
    backends: &Backends,
) -> Result<(Image, Vec<EnergyReport>), PipelineError> {
    let (image_out, _, trail, _) = hide_inner(image, key_e, cfg, backends, false)?;
    Ok((image_out, trail))
}

fn hide_inner(
    image: &Image,
    key_e: &ConditionalEmbeddingSet,
    cfg: &RunConfig,
    backends: &Backends,
    make_key: bool,
) -> Result<(Image, LatentCode, Vec<EnergyReport>, Option<NoiseKey>), PipelineError> {
    cfg.validate()?;
    key_e.validate()?;
    check_key_binding(key_e, image, backends, cfg.force)?;

    let gcfg = GuidanceConfig {
        lambda: cfg.lambda.clone(),
        energy_kind: EnergyKind::Hide,
        group_count: 1,
    };
    gcfg.validate().map_err(PipelineError::from)?;

    let reference = backends.embedder.embed(image)?;
    let energy = HideEnergy::new(reference);
    let bound = BoundEnergy::Hide { energy: &energy, backends };

    let z0 = backends.codec.encode(image)?;
    let depth = noise_depth_index(cfg.s_ns, backends.schedule.t_total())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = sample_noise(&mut rng, z0.values.shape());
    let noised = forward_noise(&z0, depth, &eps, &backends.schedule)?;

    let strat = ScheduleStrategy::new(
        cfg.tau,
        backends.schedule.t_total(),
        backends.predictor.uncond_embedding(),
    )?;
    let (mut clean, trail) =
        guided_descent(vec![noised], key_e, &strat, &gcfg, &bound, backends, cfg.stride)?;
    let clean = clean.pop().expect("single branch");
    let image_out = backends.codec.decode(&clean)?;

    let key = if make_key {
        Some(make_noise_key(&z0, key_e, backends, cfg, RunKind::Hide)?)
    } else {
        None
    };
    Ok((image_out, clean, trail, key))
}

/// DDIM inversion of a clean latent to the terminal step, conditioned on the
/// stage embedding owning each step (no tau split). Returns the terminal
/// latent; callers wrap it into a [`NoiseKey`].
pub fn make_key_i(
    z0: &LatentCode,
    key_e: &ConditionalEmbeddingSet,
    backends: &Backends,
    stride: usize,
) -> Result<LatentCode, PipelineError> {
    if z0.step != Step::Clean {
        return Err(ScheduleError::NotClean(z0.step.to_string()).into());
    }
    if stride == 0 {
        return Err(PipelineError::ZeroStride);
    }
    key_e.validate()?;
    let t_total = backends.schedule.t_total();
    let mut current = z0.clone();
    for t_next in strided_indices(t_total - 1, stride) {
        let stage = stage_of(current.step.conditioning_index(), t_total, N_STAGES);
        let eps = backends.predictor.predict(&current, Some(key_e.stage(stage)))?;
        current = ddim_invert_step(&current, t_next, &eps, &backends.schedule)?;
        if !current.is_finite() {
            return Err(PipelineError::NonFiniteInversion { step: t_next });
        }
    }
    Ok(current)
}

/// Identity recovery: deterministic DDIM sampling from key-I conditioned on
/// key-E's stage embeddings at every step.
///
/// Refuses mismatched key pairs before touching any model; `force` overrides
/// the pair binding (for experiments), never the backend compatibility.
pub fn recover(
    key_i: &NoiseKey,
    key_e: &ConditionalEmbeddingSet,
    backends: &Backends,
    force: bool,
) -> Result<Image, PipelineError> {
    if !force {
        if key_i.image_fingerprint != key_e.image_fingerprint {
            return Err(PipelineError::KeyPairMismatch {
                field: "image_fingerprint",
                a: key_i.image_fingerprint.clone(),
                b: key_e.image_fingerprint.clone(),
            });
        }
        if key_i.model_id != key_e.model_id {
            return Err(PipelineError::KeyPairMismatch {
                field: "model_id",
                a: key_i.model_id.clone(),
                b: key_e.model_id.clone(),
            });
        }
    }
    if key_i.model_id != backends.model_id {
        return Err(PipelineError::BackendMismatch {
            key: key_i.model_id.clone(),
            backend: backends.model_id.clone(),
        });
    }
    key_e.validate()?;
    let t_total = backends.schedule.t_total();
    if key_i.z_terminal.step != Step::At(t_total - 1) {
        return Err(PipelineError::BadTerminalStep {
            expected: t_total - 1,
            actual: key_i.z_terminal.step.to_string(),
        });
    }

    let ascending = strided_indices(t_total - 1, key_i.stride);
    let mut targets: Vec<Step> =
        ascending[..ascending.len() - 1].iter().rev().map(|&t| Step::At(t)).collect();
    targets.push(Step::Clean);

    let mut current = key_i.z_terminal.clone();
    for target in targets {
        let t = current.step.conditioning_index();
        let stage = stage_of(t, t_total, N_STAGES);
        let eps = backends.predictor.predict(&current, Some(key_e.stage(stage)))?;
        current = ddim_step(&current, target, &eps, &backends.schedule)?;
    }
    Ok(backends.codec.decode(&current)?)
}
