//! Evaluation protocols: protection success rate, probe/gallery
//! identification rate, recovery similarity metrics, and a scalar diversity
//! dispersion.

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::adapters::{cosine, IdentityEmbedder, IdentityEmbedding};
use crate::image::Image;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("input list must not be empty")]
    EmptyInput,
    #[error("embeddings come from different embedders: '{a}' vs '{b}'")]
    MixedEmbedders { a: String, b: String },
    #[error("probe {0} has an empty same-identity set")]
    MissingSameSet(usize),
    #[error("images differ in shape: {a:?} vs {b:?}")]
    DimensionMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("image {side} is {size} pixels wide/tall, below the {window} SSIM window")]
    ImageTooSmall { side: &'static str, size: usize, window: usize },
    #[error("no group with at least two embeddings")]
    NoPairs,
}

fn check_embedder_id(expected: &str, e: &IdentityEmbedding) -> Result<(), EvalError> {
    if e.embedder_id != expected {
        return Err(EvalError::MixedEmbedders { a: expected.to_string(), b: e.embedder_id.clone() });
    }
    Ok(())
}

/// Fraction of `(reference, candidate)` pairs whose embedding distance under
/// the embedder's metric exceeds its decision threshold.
pub fn protection_success_rate(
    pairs: &[(IdentityEmbedding, IdentityEmbedding)],
    embedder: &dyn IdentityEmbedder,
) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let metric = embedder.metric();
    let threshold = embedder.threshold();
    let mut protected = 0usize;
    for (reference, cand) in pairs {
        check_embedder_id(embedder.id(), reference)?;
        check_embedder_id(embedder.id(), cand)?;
        if metric.distance(&reference.vector, &cand.vector) > threshold {
            protected += 1;
        }
    }
    Ok(protected as f64 / pairs.len() as f64)
}

/// One probe plus the same-identity verification images it must beat.
#[derive(Debug, Clone)]
pub struct ProbeEntry {
    pub embedding: IdentityEmbedding,
    pub same_set: Vec<IdentityEmbedding>,
}

/// Probe/gallery verification fixture: per-probe same-identity sets and one
/// shared different-identity set.
#[derive(Debug, Clone)]
pub struct VerificationSet {
    pub probes: Vec<ProbeEntry>,
    pub diff_set: Vec<IdentityEmbedding>,
}

/// The strict probe/gallery rule: a probe is recognized correctly only if
/// every same-identity similarity beats every different-identity similarity
/// (cosine similarity; ties count as incorrect). Returns the fraction of
/// probes recognized.
pub fn identification_rate(vs: &VerificationSet) -> Result<f64, EvalError> {
    if vs.probes.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let embedder_id = vs.probes[0].embedding.embedder_id.clone();
    let mut correct = 0usize;
    for (i, probe) in vs.probes.iter().enumerate() {
        check_embedder_id(&embedder_id, &probe.embedding)?;
        if probe.same_set.is_empty() {
            return Err(EvalError::MissingSameSet(i));
        }
        let mut min_same = f64::INFINITY;
        for s in &probe.same_set {
            check_embedder_id(&embedder_id, s)?;
            min_same = min_same.min(cosine(&probe.embedding.vector, &s.vector));
        }
        let mut max_diff = f64::NEG_INFINITY;
        for d in &vs.diff_set {
            check_embedder_id(&embedder_id, d)?;
            max_diff = max_diff.max(cosine(&probe.embedding.vector, &d.vector));
        }
        if min_same > max_diff {
            correct += 1;
        }
    }
    Ok(correct as f64 / vs.probes.len() as f64)
}

/// Pixel-level recovery metrics.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RecoveryMetrics {
    pub mse: f64,
    /// Peak signal-to-noise ratio in dB against a unit dynamic range.
    pub psnr: f64,
    pub ssim: f64,
}

const PSNR_MSE_FLOOR: f64 = 1e-10;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// MSE, PSNR, and SSIM between two same-shaped images with values in [0,1].
///
/// SSIM uses the standard 11x11 Gaussian window (sigma 1.5, k1=0.01,
/// k2=0.03), averaged over valid window positions and channels; both sides
/// must be at least 11 pixels in each spatial dimension.
pub fn recovery_metrics(original: &Image, recovered: &Image) -> Result<RecoveryMetrics, EvalError> {
    if original.shape() != recovered.shape() {
        return Err(EvalError::DimensionMismatch { a: original.shape(), b: recovered.shape() });
    }
    let n = original.data.len() as f64;
    let mse = original
        .data
        .iter()
        .zip(&recovered.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let psnr = 10.0 * (1.0 / mse.max(PSNR_MSE_FLOOR)).log10();
    let ssim = ssim(original, recovered)?;
    Ok(RecoveryMetrics { mse, psnr, ssim })
}

fn gaussian_window() -> Array2<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Array2::zeros((SSIM_WINDOW, SSIM_WINDOW));
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let di = i as isize - half;
            let dj = j as isize - half;
            let v = (-((di * di + dj * dj) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[[i, j]] = v;
            sum += v;
        }
    }
    w.mapv_into(|v| v / sum)
}

fn ssim(a: &Image, b: &Image) -> Result<f64, EvalError> {
    if a.height < SSIM_WINDOW {
        return Err(EvalError::ImageTooSmall { side: "height", size: a.height, window: SSIM_WINDOW });
    }
    if a.width < SSIM_WINDOW {
        return Err(EvalError::ImageTooSmall { side: "width", size: a.width, window: SSIM_WINDOW });
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let w = gaussian_window();
    let at = |img: &Image, y: usize, x: usize, ch: usize| -> f64 {
        img.data[(y * img.width + x) * img.channels + ch]
    };

    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..a.channels {
        for y0 in 0..=(a.height - SSIM_WINDOW) {
            for x0 in 0..=(a.width - SSIM_WINDOW) {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        mu_a += w[[i, j]] * at(a, y0 + i, x0 + j, ch);
                        mu_b += w[[i, j]] * at(b, y0 + i, x0 + j, ch);
                    }
                }
                let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let da = at(a, y0 + i, x0 + j, ch) - mu_a;
                        let db = at(b, y0 + i, x0 + j, ch) - mu_b;
                        var_a += w[[i, j]] * da * da;
                        var_b += w[[i, j]] * db * db;
                        cov += w[[i, j]] * da * db;
                    }
                }
                let l = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
                let cs = (2.0 * cov + c2) / (var_a + var_b + c2);
                acc += l * cs;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Scalar dispersion proxy: mean pairwise cosine distance within each group,
/// averaged over groups with at least two members. Higher means more
/// diverse. Singleton groups are skipped (counted in the returned report).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DispersionReport {
    pub dispersion: f64,
    pub groups_used: usize,
    pub groups_skipped: usize,
}

pub fn diversity_dispersion(groups: &[Vec<IdentityEmbedding>]) -> Result<DispersionReport, EvalError> {
    let mut per_group = Vec::new();
    let mut skipped = 0usize;
    for group in groups {
        if group.len() < 2 {
            skipped += 1;
            continue;
        }
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                check_embedder_id(&group[0].embedder_id, &group[j])?;
                acc += 1.0 - cosine(&group[i].vector, &group[j].vector);
                pairs += 1;
            }
        }
        per_group.push(acc / pairs as f64);
    }
    if per_group.is_empty() {
        return Err(EvalError::NoPairs);
    }
    Ok(DispersionReport {
        dispersion: per_group.iter().sum::<f64>() / per_group.len() as f64,
        groups_used: per_group.len(),
        groups_skipped: skipped,
    })
}
