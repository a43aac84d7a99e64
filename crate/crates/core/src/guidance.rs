//! Energy-function-based identity guidance.
//!
//! A guided step first takes the plain DDIM update, then subtracts
//! `lambda_t` times the gradient of a task energy evaluated at the clean
//! latent estimate. The energy reads the decoded image through the identity
//! embedder, so its gradient is chained through the embedder and codec
//! vector-Jacobian products; the cosine-loss gradients themselves are in
//! closed form.
//!
//! Three losses are provided: identity dissimilarity (push candidates away
//! from the reference), diversity (push the four anonymization branches away
//! from each other), and identity similarity (pull a single branch toward
//! the reference).

use ndarray::{Array1, ArrayD};
use serde::Serialize;
use thiserror::Error;

use crate::adapters::{cosine, AdapterError, Backends, IdentityEmbedding};
use crate::msi::ConditionalEmbeddingSet;
use crate::schedule::{ddim_step, estimate_clean, LatentCode, ScheduleError, Step};
use crate::strategy::{select_embedding, ScheduleStrategy};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("embeddings come from different embedders: '{a}' vs '{b}'")]
    MixedEmbedders { a: String, b: String },
    #[error("candidate list must not be empty")]
    EmptyCandidates,
    #[error("expected exactly {expected} candidates, got {actual}")]
    WrongCandidateCount { expected: usize, actual: usize },
    #[error("energy expects {expected} branches, got {actual}")]
    WrongBranchCount { expected: usize, actual: usize },
    #[error("branch latents are at different steps")]
    MisalignedSteps,
    #[error("lambda must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error("anonymization requires at least 2 branches, got {0}")]
    GroupCountTooSmall(usize),
    #[error("non-finite guidance gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn check_same_embedder(a: &IdentityEmbedding, b: &IdentityEmbedding) -> Result<(), GuidanceError> {
    if a.embedder_id != b.embedder_id {
        return Err(GuidanceError::MixedEmbedders {
            a: a.embedder_id.clone(),
            b: b.embedder_id.clone(),
        });
    }
    Ok(())
}

/// Identity dissimilarity: `sum_i max(cos(ref, cand_i), 0)`.
///
/// Zero when every candidate is orthogonal or opposed to the reference;
/// `cands.len()` when they all coincide with it.
pub fn identity_dissimilarity_loss(
    reference: &IdentityEmbedding,
    cands: &[IdentityEmbedding],
) -> Result<f64, GuidanceError> {
    if cands.is_empty() {
        return Err(GuidanceError::EmptyCandidates);
    }
    let mut acc = 0.0;
    for cand in cands {
        check_same_embedder(reference, cand)?;
        acc += cosine(&reference.vector, &cand.vector).max(0.0);
    }
    Ok(acc)
}

/// Index convention for the diversity sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivIndexMode {
    /// The written double sum `i in 1..=4, j in 2..=4, j != i`: nine ordered
    /// terms, asymmetric in the first candidate.
    AsWritten,
    /// Unordered pairs `i < j`: six terms for four candidates.
    UnorderedPairs,
}

/// Diversity loss over exactly four candidates, written index set.
pub fn diversity_loss(cands: &[IdentityEmbedding]) -> Result<f64, GuidanceError> {
    if cands.len() != 4 {
        return Err(GuidanceError::WrongCandidateCount { expected: 4, actual: cands.len() });
    }
    diversity_loss_with_mode(cands, DivIndexMode::AsWritten)
}

/// Diversity loss for any group size of at least two.
pub fn diversity_loss_with_mode(
    cands: &[IdentityEmbedding],
    mode: DivIndexMode,
) -> Result<f64, GuidanceError> {
    if cands.len() < 2 {
        return Err(GuidanceError::WrongCandidateCount { expected: 2, actual: cands.len() });
    }
    let mut acc = 0.0;
    for (i, j) in diversity_index_set(cands.len(), mode) {
        check_same_embedder(&cands[i], &cands[j])?;
        acc += cosine(&cands[i].vector, &cands[j].vector).max(0.0);
    }
    Ok(acc)
}

/// Ordered index pairs the diversity sum ranges over (0-based).
fn diversity_index_set(n: usize, mode: DivIndexMode) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    match mode {
        // 1-based "i in 1..=n, j in 2..=n, j != i" shifted down by one.
        DivIndexMode::AsWritten => {
            for i in 0..n {
                for j in 1..n {
                    if j != i {
                        pairs.push((i, j));
                    }
                }
            }
        }
        DivIndexMode::UnorderedPairs => {
            for i in 0..n {
                for j in i + 1..n {
                    pairs.push((i, j));
                }
            }
        }
    }
    pairs
}

/// Identity similarity: `1 - cos(ref, cand)`, in `[0, 2]`.
pub fn identity_similarity_loss(
    reference: &IdentityEmbedding,
    cand: &IdentityEmbedding,
) -> Result<f64, GuidanceError> {
    check_same_embedder(reference, cand)?;
    Ok(1.0 - cosine(&reference.vector, &cand.vector))
}

/// Per-step guidance scale.
#[derive(Debug, Clone)]
pub enum Lambda {
    Constant(f64),
    /// Indexed by schedule step.
    Table(Vec<f64>),
}

impl Lambda {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Lambda::Constant(l) => *l,
            Lambda::Table(tbl) => tbl.get(t).copied().unwrap_or(0.0),
        }
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        let bad = match self {
            Lambda::Constant(l) => (*l < 0.0).then_some(*l),
            Lambda::Table(tbl) => tbl.iter().copied().find(|l| *l < 0.0),
        };
        match bad {
            Some(l) => Err(GuidanceError::NegativeLambda(l)),
            None => Ok(()),
        }
    }
}

/// Which task energy a guided run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EnergyKind {
    Anonymize,
    Hide,
}

/// Guidance settings for one run.
#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    pub lambda: Lambda,
    pub energy_kind: EnergyKind,
    pub group_count: usize,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        self.lambda.validate()?;
        if self.energy_kind == EnergyKind::Anonymize && self.group_count < 2 {
            return Err(GuidanceError::GroupCountTooSmall(self.group_count));
        }
        Ok(())
    }
}

/// Per-term breakdown of an energy value.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct EnergyTerms {
    pub idis: Option<f64>,
    pub div: Option<f64>,
    #[serde(rename = "is")]
    pub is_term: Option<f64>,
}

/// One guided step's observability record; serialized as a JSON line by the
/// CLI trace writer.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub step: usize,
    pub energy: f64,
    pub terms: EnergyTerms,
    pub grad_norm: f64,
}

impl EnergyReport {
    pub fn is_finite(&self) -> bool {
        self.energy.is_finite() && self.grad_norm.is_finite()
    }
}

pub struct EnergyEval {
    pub value: f64,
    pub terms: EnergyTerms,
    /// One gradient per branch, with respect to that branch's clean latent
    /// estimate.
    pub grads: Vec<ArrayD<f64>>,
}

/// A task energy over one or more clean-latent branches, with its gradient.
pub trait Energy: Send + Sync {
    fn branch_count(&self) -> usize;
    fn eval(&self, z0_hats: &[&LatentCode]) -> Result<EnergyEval, GuidanceError>;
}

/// `D(z) = 0.5 |z - target|^2`; gradient `z - target`. Test energy with an
/// exact analytic gradient.
pub struct QuadraticEnergy {
    pub target: ArrayD<f64>,
}

impl Energy for QuadraticEnergy {
    fn branch_count(&self) -> usize {
        1
    }

    fn eval(&self, z0_hats: &[&LatentCode]) -> Result<EnergyEval, GuidanceError> {
        check_branches(self, z0_hats)?;
        let z = &z0_hats[0].values;
        let diff = z - &self.target;
        let value = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
        Ok(EnergyEval { value, terms: EnergyTerms::default(), grads: vec![diff] })
    }
}

fn check_branches(energy: &dyn Energy, z0_hats: &[&LatentCode]) -> Result<(), GuidanceError> {
    if z0_hats.len() != energy.branch_count() {
        return Err(GuidanceError::WrongBranchCount {
            expected: energy.branch_count(),
            actual: z0_hats.len(),
        });
    }
    Ok(())
}

/// Gradient of `cos(fixed, v)` with respect to `v`.
fn cosine_grad_wrt(v: &Array1<f64>, fixed: &Array1<f64>) -> Array1<f64> {
    let nv = v.dot(v).sqrt();
    let nf = fixed.dot(fixed).sqrt();
    let c = v.dot(fixed) / (nv * nf);
    let v_hat = v.mapv(|x| x / nv);
    let f_hat = fixed.mapv(|x| x / nf);
    (&f_hat - &v_hat.mapv(|x| x * c)).mapv(|x| x / nv)
}

struct BranchView {
    embedding: IdentityEmbedding,
    image: crate::image::Image,
}

/// Decodes and embeds every branch, then chains per-embedding cotangents
/// back to latent space.
struct EmbeddingChain<'a> {
    backends: &'a Backends,
    branches: Vec<BranchView>,
}

impl<'a> EmbeddingChain<'a> {
    fn open(backends: &'a Backends, z0_hats: &[&LatentCode]) -> Result<Self, GuidanceError> {
        let branches = z0_hats
            .iter()
            .map(|z| {
                let image = backends.codec.decode(z)?;
                let embedding = backends.embedder.embed(&image)?;
                Ok(BranchView { embedding, image })
            })
            .collect::<Result<Vec<_>, GuidanceError>>()?;
        Ok(Self { backends, branches })
    }

    fn embeddings(&self) -> Vec<&IdentityEmbedding> {
        self.branches.iter().map(|b| &b.embedding).collect()
    }

    fn pull_back(
        &self,
        z0_hats: &[&LatentCode],
        emb_grads: Vec<Array1<f64>>,
    ) -> Result<Vec<ArrayD<f64>>, GuidanceError> {
        emb_grads
            .into_iter()
            .zip(&self.branches)
            .zip(z0_hats)
            .map(|((g, branch), z)| {
                let img_cot = self.backends.embedder.embed_vjp(&branch.image, &g)?;
                Ok(self.backends.codec.decode_vjp(z, &img_cot)?)
            })
            .collect()
    }
}

/// Anonymization energy: identity dissimilarity plus diversity over the
/// noise branches, each term weighted (1:1 by default).
pub struct AnonymizeEnergy {
    reference: IdentityEmbedding,
    group_count: usize,
    idis_weight: f64,
    div_weight: f64,
    div_mode: DivIndexMode,
}

impl AnonymizeEnergy {
    pub fn new(reference: IdentityEmbedding, group_count: usize) -> Result<Self, GuidanceError> {
        Self::with_weights(reference, group_count, 1.0, 1.0, DivIndexMode::AsWritten)
    }

    pub fn with_weights(
        reference: IdentityEmbedding,
        group_count: usize,
        idis_weight: f64,
        div_weight: f64,
        div_mode: DivIndexMode,
    ) -> Result<Self, GuidanceError> {
        if group_count < 2 {
            return Err(GuidanceError::GroupCountTooSmall(group_count));
        }
        Ok(Self { reference, group_count, idis_weight, div_weight, div_mode })
    }

    /// Evaluates the energy and its gradient on already-embedded candidates.
    fn losses(
        &self,
        cands: &[&IdentityEmbedding],
    ) -> Result<(f64, f64, Vec<Array1<f64>>), GuidanceError> {
        let dim = cands[0].vector.len();
        let mut grads = vec![Array1::<f64>::zeros(dim); cands.len()];

        let mut idis = 0.0;
        for (i, cand) in cands.iter().enumerate() {
            check_same_embedder(&self.reference, cand)?;
            let c = cosine(&self.reference.vector, &cand.vector);
            if c > 0.0 {
                idis += c;
                grads[i].scaled_add(
                    self.idis_weight,
                    &cosine_grad_wrt(&cand.vector, &self.reference.vector),
                );
            }
        }

        let mut div = 0.0;
        for (i, j) in diversity_index_set(cands.len(), self.div_mode) {
            let c = cosine(&cands[i].vector, &cands[j].vector);
            if c > 0.0 {
                div += c;
                grads[i].scaled_add(self.div_weight, &cosine_grad_wrt(&cands[i].vector, &cands[j].vector));
                grads[j].scaled_add(self.div_weight, &cosine_grad_wrt(&cands[j].vector, &cands[i].vector));
            }
        }
        Ok((idis, div, grads))
    }

    pub fn eval_with(
        &self,
        backends: &Backends,
        z0_hats: &[&LatentCode],
    ) -> Result<EnergyEval, GuidanceError> {
        let chain = EmbeddingChain::open(backends, z0_hats)?;
        let (idis, div, emb_grads) = self.losses(&chain.embeddings())?;
        let grads = chain.pull_back(z0_hats, emb_grads)?;
        Ok(EnergyEval {
            value: self.idis_weight * idis + self.div_weight * div,
            terms: EnergyTerms { idis: Some(idis), div: Some(div), is_term: None },
            grads,
        })
    }
}

/// Identity-hiding energy: `1 - cos(ref, cand)` on a single branch.
pub struct HideEnergy {
    reference: IdentityEmbedding,
}

impl HideEnergy {
    pub fn new(reference: IdentityEmbedding) -> Self {
        Self { reference }
    }

    pub fn eval_with(
        &self,
        backends: &Backends,
        z0_hats: &[&LatentCode],
    ) -> Result<EnergyEval, GuidanceError> {
        let chain = EmbeddingChain::open(backends, z0_hats)?;
        let cand = &chain.branches[0].embedding;
        check_same_embedder(&self.reference, cand)?;
        let value = 1.0 - cosine(&self.reference.vector, &cand.vector);
        let emb_grad = cosine_grad_wrt(&cand.vector, &self.reference.vector).mapv(|g| -g);
        let grads = chain.pull_back(z0_hats, vec![emb_grad])?;
        Ok(EnergyEval {
            value,
            terms: EnergyTerms { idis: None, div: None, is_term: Some(value) },
            grads,
        })
    }
}

/// Backend-bound energy, the form [`guided_step_multi`] consumes.
pub enum BoundEnergy<'a> {
    Quadratic(&'a QuadraticEnergy),
    Anonymize { energy: &'a AnonymizeEnergy, backends: &'a Backends },
    Hide { energy: &'a HideEnergy, backends: &'a Backends },
}

impl Energy for BoundEnergy<'_> {
    fn branch_count(&self) -> usize {
        match self {
            BoundEnergy::Quadratic(_) => 1,
            BoundEnergy::Anonymize { energy, .. } => energy.group_count,
            BoundEnergy::Hide { .. } => 1,
        }
    }

    fn eval(&self, z0_hats: &[&LatentCode]) -> Result<EnergyEval, GuidanceError> {
        check_branches(self, z0_hats)?;
        match self {
            BoundEnergy::Quadratic(q) => q.eval(z0_hats),
            BoundEnergy::Anonymize { energy, backends } => energy.eval_with(backends, z0_hats),
            BoundEnergy::Hide { energy, backends } => energy.eval_with(backends, z0_hats),
        }
    }
}

/// One energy-corrected DDIM step over a group of coupled branches.
///
/// Per branch: predict noise with the step's scheduled embedding, take the
/// plain DDIM update, estimate the clean latent. The energy couples the
/// branches; its gradient with respect to each clean estimate, scaled by
/// `lambda_t`, is subtracted from that branch's plain update. With
/// `lambda_t == 0` the correction is skipped entirely and the result is
/// bit-identical to the unguided sampler.
pub fn guided_step_multi(
    latents: &[LatentCode],
    t_prev: Step,
    key_e: &ConditionalEmbeddingSet,
    strat: &ScheduleStrategy,
    cfg: &GuidanceConfig,
    energy: &dyn Energy,
    backends: &Backends,
) -> Result<(Vec<LatentCode>, EnergyReport), GuidanceError> {
    let t = match latents.first().map(|z| z.step) {
        Some(Step::At(t)) => t,
        _ => return Err(GuidanceError::MisalignedSteps),
    };
    if latents.iter().any(|z| z.step != Step::At(t)) {
        return Err(GuidanceError::MisalignedSteps);
    }

    let ctx = select_embedding(t, strat, key_e);
    let mut stepped = Vec::with_capacity(latents.len());
    let mut clean_estimates = Vec::with_capacity(latents.len());
    for z in latents {
        let eps = backends.predictor.predict(z, Some(ctx))?;
        stepped.push(ddim_step(z, t_prev, &eps, &backends.schedule)?);
        clean_estimates.push(estimate_clean(z, &eps, &backends.schedule)?);
    }

    let clean_refs: Vec<&LatentCode> = clean_estimates.iter().collect();
    let eval = energy.eval(&clean_refs)?;
    let grad_norm = eval
        .grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() || !eval.value.is_finite() {
        return Err(GuidanceError::NonFiniteGradient { step: t });
    }

    let lambda = cfg.lambda.at(t);
    if lambda > 0.0 {
        for (z, g) in stepped.iter_mut().zip(&eval.grads) {
            z.values.zip_mut_with(g, |v, &g| *v -= lambda * g);
        }
    }

    let report = EnergyReport { step: t, energy: eval.value, terms: eval.terms, grad_norm };
    Ok((stepped, report))
}

/// Outcome of a lambda search.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub lambda: f64,
    pub mean_cos: f64,
    /// Whether the achieved cosine landed inside the target band.
    pub within_band: bool,
    /// Every `(lambda, mean cosine)` the search evaluated, in order.
    pub evaluations: Vec<(f64, f64)>,
    pub note: Option<String>,
}

/// Searches for the hide-guidance scale that lands the mean cosine
/// similarity between protected and original images at `target_cos`
/// (within `band`, default use: 0.95 +- 0.02) over a probe set.
///
/// Bracketed bisection on the (empirically increasing) cosine response. If
/// the response never reaches the band, the best lambda seen is returned
/// with a diagnostic note rather than an error.
pub fn calibrate_lambda(
    probes: &[(crate::image::Image, ConditionalEmbeddingSet)],
    base_cfg: &crate::pipelines::RunConfig,
    backends: &Backends,
    target_cos: f64,
    band: f64,
) -> Result<CalibrationResult, crate::pipelines::PipelineError> {
    assert!(!probes.is_empty(), "probe set must be nonempty");
    let mut evaluations: Vec<(f64, f64)> = Vec::new();

    // A scale at which the guided run blows up (non-finite energy) counts as
    // unusable: the search treats it like an overshoot and keeps the bracket
    // interior, so the result always carries a finite report.
    let eval = |lambda: f64,
                    evaluations: &mut Vec<(f64, f64)>|
     -> Result<Option<f64>, crate::pipelines::PipelineError> {
        let mut acc = 0.0;
        for (image, key_e) in probes {
            let mut cfg = base_cfg.clone();
            cfg.lambda = Lambda::Constant(lambda);
            match crate::pipelines::hide_image_only(image, key_e, &cfg, backends) {
                Ok((out, _)) => {
                    let reference = backends.embedder.embed(image)?;
                    let cand = backends.embedder.embed(&out)?;
                    let c = cosine(&reference.vector, &cand.vector);
                    if !c.is_finite() {
                        return Ok(None);
                    }
                    acc += c;
                }
                Err(crate::pipelines::PipelineError::GuidanceAborted { .. }) => return Ok(None),
                Err(e) => return Err(e),
            }
        }
        let mean = acc / probes.len() as f64;
        evaluations.push((lambda, mean));
        Ok(mean.is_finite().then_some(mean))
    };

    let in_band = |c: f64| (c - target_cos).abs() <= band;
    let finish = |lambda: f64, mean_cos: f64, evaluations: Vec<(f64, f64)>, note: Option<String>| {
        CalibrationResult { lambda, mean_cos, within_band: in_band(mean_cos), evaluations, note }
    };

    let c0 = eval(0.0, &mut evaluations)?;
    if in_band(c0) {
        return Ok(finish(0.0, c0, evaluations, None));
    }
    if c0 > target_cos {
        return Ok(finish(
            0.0,
            c0,
            evaluations,
            Some(format!("unguided cosine {c0:.4} already exceeds target {target_cos:.4}")),
        ));
    }

    // Grow the bracket until the response crosses the target.
    const LAMBDA_CAP: f64 = 1e6;
    let (mut lo, mut c_lo) = (0.0, c0);
    let mut hi = 1.0;
    let mut c_hi = eval(hi, &mut evaluations)?;
    while c_hi < target_cos && hi < LAMBDA_CAP {
        lo = hi;
        c_lo = c_hi;
        hi *= 4.0;
        c_hi = eval(hi, &mut evaluations)?;
    }
    let _ = c_lo;

    let mut best = evaluations
        .iter()
        .copied()
        .min_by(|a, b| {
            (a.1 - target_cos).abs().partial_cmp(&(b.1 - target_cos).abs()).unwrap()
        })
        .unwrap();
    if c_hi < target_cos - band {
        return Ok(finish(
            best.0,
            best.1,
            evaluations,
            Some(format!("response saturated at cosine {c_hi:.4} below target, lambda cap {LAMBDA_CAP}")),
        ));
    }

    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let c = eval(mid, &mut evaluations)?;
        if (c - target_cos).abs() < (best.1 - target_cos).abs() {
            best = (mid, c);
        }
        if in_band(c) {
            return Ok(finish(mid, c, evaluations, None));
        }
        if c < target_cos {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(finish(
        best.0,
        best.1,
        evaluations,
        Some("bisection exhausted without entering the band; best effort returned".into()),
    ))
}

/// Single-branch guided step.
pub fn guided_step(
    z_t: &LatentCode,
    t_prev: Step,
    key_e: &ConditionalEmbeddingSet,
    strat: &ScheduleStrategy,
    cfg: &GuidanceConfig,
    energy: &dyn Energy,
    backends: &Backends,
) -> Result<(LatentCode, EnergyReport), GuidanceError> {
    let (mut out, report) =
        guided_step_multi(std::slice::from_ref(z_t), t_prev, key_e, strat, cfg, energy, backends)?;
    Ok((out.pop().expect("one branch in, one out"), report))
}
