//! Deterministic diffusion arithmetic: noise schedules, closed-form noising,
//! DDIM sampling and inversion steps, and clean-latent estimation.
//!
//! Everything here is a pure function of its inputs. Schedule coefficients
//! and latents are kept in `f64`; the cumulative products underlying the
//! step equations lose too much precision in 32-bit at a thousand steps.
//!
//! Step indexing is 0-based: `betas[t]` and `alpha_bar[t]` for
//! `t in 0..T`. A latent's position is a [`Step`]: either `Clean` (no noise,
//! cumulative alpha treated as exactly 1) or `At(t)` for schedule index `t`.
//! Sampling all the way down to `Step::Clean` therefore lands exactly on the
//! clean-latent estimate.

use ndarray::ArrayD;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("schedule must have at least one step, got T={0}")]
    EmptySchedule(usize),
    #[error("beta_start must lie in (0,1), got {0}")]
    BetaStartOutOfRange(f64),
    #[error("beta_end must lie in (0,1), got {0}")]
    BetaEndOutOfRange(f64),
    #[error("beta_start must be strictly less than beta_end for T>1, got start={start} end={end}")]
    BetasNotIncreasing { start: f64, end: f64 },
    #[error("latent shape {latent:?} does not match noise shape {noise:?}")]
    ShapeMismatch { latent: Vec<usize>, noise: Vec<usize> },
    #[error("step ordering violated: expected {expected} but latent is at {actual}")]
    StepOrder { expected: String, actual: String },
    #[error("step index {0} out of range for schedule with T={1}")]
    StepOutOfRange(usize, usize),
    #[error("latent at {0} where a noised latent was required")]
    NotNoised(String),
    #[error("latent must be clean (step 0), found {0}")]
    NotClean(String),
}

/// Position of a latent along the diffusion trajectory.
///
/// `Clean` is the data end of the chain (cumulative alpha exactly 1);
/// `At(t)` refers to schedule index `t` in `0..T`. The derived ordering puts
/// `Clean` below every `At(t)`, matching "less noised".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Step {
    Clean,
    At(usize),
}

impl Step {
    /// Step annotation in `[0, T]`: 0 for clean data, `t+1` for schedule
    /// index `t`, so `T` means fully noised.
    pub fn annotation(self) -> usize {
        match self {
            Step::Clean => 0,
            Step::At(t) => t + 1,
        }
    }

    /// Schedule index used when a predictor or stage lookup needs a concrete
    /// time for a clean latent (the start of an inversion): clean maps to 0.
    pub fn conditioning_index(self) -> usize {
        match self {
            Step::Clean => 0,
            Step::At(t) => t,
        }
    }
}

impl std::fmt::Display for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Step::Clean => write!(f, "clean"),
            Step::At(t) => write!(f, "t={t}"),
        }
    }
}

/// How the beta range is interpolated across the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScheduleKind {
    /// Betas linearly spaced between `beta_start` and `beta_end`.
    Linear,
    /// `sqrt(beta)` linearly spaced, then squared (the latent-diffusion
    /// convention).
    ScaledLinear,
}

/// Beta/alpha-bar coefficient tables for a discrete diffusion chain.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule of `t_total` strictly increasing betas.
    ///
    /// `t_total == 1` permits a single beta (`beta_start` is used and
    /// `beta_end` ignored); for larger schedules the range must be strictly
    /// increasing so the betas are.
    pub fn build(
        t_total: usize,
        beta_start: f64,
        beta_end: f64,
        kind: ScheduleKind,
    ) -> Result<Self, ScheduleError> {
        if t_total == 0 {
            return Err(ScheduleError::EmptySchedule(t_total));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(ScheduleError::BetaStartOutOfRange(beta_start));
        }
        if !(beta_end > 0.0 && beta_end < 1.0) {
            return Err(ScheduleError::BetaEndOutOfRange(beta_end));
        }
        if t_total > 1 && beta_start >= beta_end {
            return Err(ScheduleError::BetasNotIncreasing {
                start: beta_start,
                end: beta_end,
            });
        }
        let betas: Vec<f64> = if t_total == 1 {
            vec![beta_start]
        } else {
            match kind {
                ScheduleKind::Linear => linspace(beta_start, beta_end, t_total),
                ScheduleKind::ScaledLinear => linspace(beta_start.sqrt(), beta_end.sqrt(), t_total)
                    .into_iter()
                    .map(|b| b * b)
                    .collect(),
            }
        };
        let mut alpha_bar = Vec::with_capacity(t_total);
        let mut prod = 1.0f64;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// The default thousand-step linear schedule.
    pub fn default_linear() -> Self {
        Self::build(1000, 1e-4, 0.02, ScheduleKind::Linear).expect("default schedule is valid")
    }

    pub fn t_total(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Cumulative alpha at a step; exactly 1 for `Clean`.
    pub fn alpha_bar(&self, step: Step) -> f64 {
        match step {
            Step::Clean => 1.0,
            Step::At(t) => self.alpha_bar[t],
        }
    }

    pub fn check_index(&self, t: usize) -> Result<(), ScheduleError> {
        if t >= self.t_total() {
            Err(ScheduleError::StepOutOfRange(t, self.t_total()))
        } else {
            Ok(())
        }
    }
}

/// A latent-space array annotated with its position along the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: ArrayD<f64>,
    pub step: Step,
}

impl LatentCode {
    pub fn clean(values: ArrayD<f64>) -> Self {
        Self { values, step: Step::Clean }
    }

    /// Clean latent from a flat vector.
    pub fn from_vec(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::clean(ArrayD::from_shape_vec(vec![n].as_slice(), values).expect("flat shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn noised_index(&self) -> Result<usize, ScheduleError> {
        match self.step {
            Step::At(t) => Ok(t),
            Step::Clean => Err(ScheduleError::NotNoised(self.step.to_string())),
        }
    }
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let span = end - start;
    (0..n)
        .map(|i| start + span * (i as f64) / ((n - 1) as f64))
        .collect()
}

fn check_shapes(latent: &LatentCode, noise: &ArrayD<f64>) -> Result<(), ScheduleError> {
    if latent.values.shape() != noise.shape() {
        return Err(ScheduleError::ShapeMismatch {
            latent: latent.values.shape().to_vec(),
            noise: noise.shape().to_vec(),
        });
    }
    Ok(())
}

/// Closed-form noising: `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(
    z0: &LatentCode,
    t: usize,
    eps: &ArrayD<f64>,
    sched: &NoiseSchedule,
) -> Result<LatentCode, ScheduleError> {
    if z0.step != Step::Clean {
        return Err(ScheduleError::NotClean(z0.step.to_string()));
    }
    sched.check_index(t)?;
    check_shapes(z0, eps)?;
    Ok(renoise(&z0.values, Step::At(t), eps, sched))
}

/// Re-noises a clean array to an arbitrary step (`Clean` is the identity).
fn renoise(z0: &ArrayD<f64>, to: Step, eps: &ArrayD<f64>, sched: &NoiseSchedule) -> LatentCode {
    let abar = sched.alpha_bar(to);
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    let values = ndarray::Zip::from(z0)
        .and(eps)
        .map_collect(|&z, &e| a * z + b * e);
    LatentCode { values, step: to }
}

/// Closed-form clean-latent estimate:
/// `z0_hat = (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn estimate_clean(
    z_t: &LatentCode,
    eps_pred: &ArrayD<f64>,
    sched: &NoiseSchedule,
) -> Result<LatentCode, ScheduleError> {
    let t = z_t.noised_index()?;
    sched.check_index(t)?;
    check_shapes(z_t, eps_pred)?;
    let abar = sched.alpha_bar[t];
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    let values = ndarray::Zip::from(&z_t.values)
        .and(eps_pred)
        .map_collect(|&z, &e| (z - b * e) / a);
    Ok(LatentCode { values, step: Step::Clean })
}

/// One deterministic DDIM update from the latent's step down to `t_prev`.
///
/// Parameterized through the clean estimate: first recover `z0_hat` from
/// `(z_t, eps_pred)`, then re-noise it to `t_prev` with the same `eps_pred`.
/// This is algebraically the standard update
/// `z_prev = sqrt(abar_prev/abar_t) z_t
///           + sqrt(abar_prev) (sqrt(1/abar_prev - 1) - sqrt(1/abar_t - 1)) eps`
/// and makes the step the exact inverse of [`ddim_invert_step`] at fixed
/// `eps_pred`. Stepping to `Step::Clean` lands exactly on the clean estimate.
pub fn ddim_step(
    z_t: &LatentCode,
    t_prev: Step,
    eps_pred: &ArrayD<f64>,
    sched: &NoiseSchedule,
) -> Result<LatentCode, ScheduleError> {
    let t = z_t.noised_index()?;
    if t_prev >= Step::At(t) {
        return Err(ScheduleError::StepOrder {
            expected: format!("target below t={t}"),
            actual: t_prev.to_string(),
        });
    }
    if let Step::At(p) = t_prev {
        sched.check_index(p)?;
    }
    let z0_hat = estimate_clean(z_t, eps_pred, sched)?;
    Ok(renoise(&z0_hat.values, t_prev, eps_pred, sched))
}

/// One DDIM inversion update from the latent's step up to `t_next`.
///
/// Mirror image of [`ddim_step`]: recover the clean estimate, re-noise it to
/// the higher step with the same `eps_pred`. A clean input latent is treated
/// as having cumulative alpha 1 (the estimate is the latent itself), so the
/// first inversion hop is exactly forward noising with the predicted noise.
pub fn ddim_invert_step(
    z_t: &LatentCode,
    t_next: usize,
    eps_pred: &ArrayD<f64>,
    sched: &NoiseSchedule,
) -> Result<LatentCode, ScheduleError> {
    sched.check_index(t_next)?;
    if z_t.step >= Step::At(t_next) {
        return Err(ScheduleError::StepOrder {
            expected: format!("target above {}", z_t.step),
            actual: format!("t_next={t_next}"),
        });
    }
    check_shapes(z_t, eps_pred)?;
    let z0_hat = match z_t.step {
        Step::Clean => z_t.values.clone(),
        Step::At(_) => estimate_clean(z_t, eps_pred, sched)?.values,
    };
    Ok(renoise(&z0_hat, Step::At(t_next), eps_pred, sched))
}

/// Ascending strided subsequence of schedule indices ending at `t_max`.
///
/// The sequence starts at `t_max % stride` so `t_max` itself is always the
/// last entry; sampling uses the reverse with a final hop to `Step::Clean`,
/// inversion walks it forward from a clean latent. Using one definition for
/// both directions keeps invert-then-sample trajectories aligned.
pub fn strided_indices(t_max: usize, stride: usize) -> Vec<usize> {
    assert!(stride >= 1, "stride must be at least 1");
    (t_max % stride..=t_max).step_by(stride).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn flat(values: &[f64]) -> ArrayD<f64> {
        arr1(values).into_dyn()
    }

    #[test]
    fn two_step_linear_alpha_bar() {
        let s = NoiseSchedule::build(2, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule_permits_equal_betas() {
        let s = NoiseSchedule::build(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[0.5]);
    }

    #[test]
    fn equal_betas_rejected_for_multi_step() {
        let err = NoiseSchedule::build(2, 0.5, 0.5, ScheduleKind::Linear).unwrap_err();
        assert!(matches!(err, ScheduleError::BetasNotIncreasing { .. }));
    }

    #[test]
    fn out_of_range_parameters_name_the_offender() {
        let err = NoiseSchedule::build(10, 0.0, 0.2, ScheduleKind::Linear).unwrap_err();
        assert!(err.to_string().contains("beta_start"));
        let err = NoiseSchedule::build(10, 0.1, 1.0, ScheduleKind::Linear).unwrap_err();
        assert!(err.to_string().contains("beta_end"));
    }

    #[test]
    fn default_schedule_matches_scalar_reference_loop() {
        // Independent oracle: plain scalar accumulation of the linear betas.
        let t_total = 1000;
        let (b0, b1) = (1e-4f64, 0.02f64);
        let mut expect = 1.0f64;
        for i in 0..t_total {
            let beta = b0 + (b1 - b0) * (i as f64) / ((t_total - 1) as f64);
            expect *= 1.0 - beta;
        }
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.alpha_bars()[t_total - 1], expect);
    }

    #[test]
    fn alpha_bar_recurrence_is_exact() {
        let s = NoiseSchedule::default_linear();
        for t in 1..s.t_total() {
            assert_eq!(
                s.alpha_bars()[t],
                s.alpha_bars()[t - 1] * (1.0 - s.betas()[t]),
            );
        }
    }

    #[test]
    fn forward_noise_zero_eps_scales_by_sqrt_alpha_bar() {
        let s = NoiseSchedule::build(4, 0.2, 0.8, ScheduleKind::Linear).unwrap();
        // alpha_bar chosen so sqrt is easy to eyeball: t=0 has abar=0.8.
        let z0 = LatentCode::from_vec(vec![1.0, 1.0, 1.0]);
        let eps = flat(&[0.0, 0.0, 0.0]);
        let z = forward_noise(&z0, 0, &eps, &s).unwrap();
        let expect = s.alpha_bars()[0].sqrt();
        for v in z.values.iter() {
            assert!((v - expect).abs() < 1e-15);
        }
        assert_eq!(z.step, Step::At(0));
    }

    #[test]
    fn forward_noise_quarter_alpha_bar_halves_ones() {
        // Hand-built schedule with abar[0] = 0.25 exactly.
        let s = NoiseSchedule::build(1, 0.75, 0.75, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars()[0], 0.25);
        let z0 = LatentCode::from_vec(vec![1.0, 1.0]);
        let z = forward_noise(&z0, 0, &flat(&[0.0, 0.0]), &s).unwrap();
        for v in z.values.iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn forward_noise_matches_scalar_reference() {
        let s = NoiseSchedule::build(10, 0.01, 0.3, ScheduleKind::Linear).unwrap();
        let (z0v, epsv, t) = (0.731, -1.207, 7);
        let z0 = LatentCode::from_vec(vec![z0v]);
        let z = forward_noise(&z0, t, &flat(&[epsv]), &s).unwrap();
        let abar = s.alpha_bars()[t];
        let reference = abar.sqrt() * z0v + (1.0 - abar).sqrt() * epsv;
        assert_eq!(z.values[[0]], reference);
    }

    #[test]
    fn forward_noise_shape_mismatch_errors() {
        let s = NoiseSchedule::default_linear();
        let z0 = LatentCode::from_vec(vec![1.0, 2.0]);
        let err = forward_noise(&z0, 3, &flat(&[0.0]), &s).unwrap_err();
        assert!(matches!(err, ScheduleError::ShapeMismatch { .. }));
    }

    #[test]
    fn estimate_clean_inverts_forward_noise() {
        let s = NoiseSchedule::default_linear();
        let z0 = LatentCode::from_vec(vec![0.3, -1.1, 2.2, 0.05]);
        let eps = flat(&[0.9, -0.4, 0.1, -1.6]);
        for t in [0usize, 1, 499, 998, 999] {
            let z_t = forward_noise(&z0, t, &eps, &s).unwrap();
            let back = estimate_clean(&z_t, &eps, &s).unwrap();
            assert_eq!(back.step, Step::Clean);
            let num: f64 = (&back.values - &z0.values).iter().map(|d| d * d).sum();
            let den: f64 = z0.values.iter().map(|d| d * d).sum();
            assert!((num / den).sqrt() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn estimate_clean_zero_eps_rescales() {
        let s = NoiseSchedule::default_linear();
        let t = 600;
        let z = LatentCode { values: flat(&[2.0, -3.0]), step: Step::At(t) };
        let got = estimate_clean(&z, &flat(&[0.0, 0.0]), &s).unwrap();
        let a = s.alpha_bars()[t].sqrt();
        assert_eq!(got.values[[0]], 2.0 / a);
        assert_eq!(got.values[[1]], -3.0 / a);
    }

    #[test]
    fn estimate_clean_scalar_reference() {
        let s = NoiseSchedule::build(10, 0.01, 0.3, ScheduleKind::Linear).unwrap();
        let (zv, ev, t) = (0.4, 1.3, 5);
        let z = LatentCode { values: flat(&[zv]), step: Step::At(t) };
        let got = estimate_clean(&z, &flat(&[ev]), &s).unwrap();
        let abar = s.alpha_bars()[t];
        let reference = zv / abar.sqrt() - (1.0 - abar).sqrt() * ev / abar.sqrt();
        assert!((got.values[[0]] - reference).abs() < 1e-15);
    }

    #[test]
    fn ddim_step_zero_eps_is_pure_rescale() {
        let s = NoiseSchedule::default_linear();
        let z = LatentCode { values: flat(&[1.5, -0.25]), step: Step::At(700) };
        let out = ddim_step(&z, Step::At(350), &flat(&[0.0, 0.0]), &s).unwrap();
        let r = (s.alpha_bars()[350] / s.alpha_bars()[700]).sqrt();
        for (o, i) in out.values.iter().zip(z.values.iter()) {
            assert!((o - r * i).abs() / i.abs() < 1e-14);
        }
        assert_eq!(out.step, Step::At(350));
    }

    #[test]
    fn ddim_step_matches_eq_two_scalar_reference() {
        // Independent evaluation of the standard update with the
        // sqrt(abar_prev) factor written out in full.
        let s = NoiseSchedule::build(4, 0.1, 0.4, ScheduleKind::Linear).unwrap();
        let (zv, ev, t, p) = (0.8, -0.6, 3usize, 1usize);
        let z = LatentCode { values: flat(&[zv]), step: Step::At(t) };
        let out = ddim_step(&z, Step::At(p), &flat(&[ev]), &s).unwrap();
        let (at, ap) = (s.alpha_bars()[t], s.alpha_bars()[p]);
        let reference = (ap / at).sqrt() * zv
            + ap.sqrt() * ((1.0 / ap - 1.0).sqrt() - (1.0 / at - 1.0).sqrt()) * ev;
        assert!((out.values[[0]] - reference).abs() < 1e-14);
    }

    #[test]
    fn ddim_step_equals_estimate_then_renoise() {
        let s = NoiseSchedule::default_linear();
        let z = LatentCode { values: flat(&[0.3, 1.9, -2.4]), step: Step::At(820) };
        let eps = flat(&[0.5, -1.0, 0.25]);
        let direct = ddim_step(&z, Step::At(240), &eps, &s).unwrap();
        let z0_hat = estimate_clean(&z, &eps, &s).unwrap();
        let composed = forward_noise(&z0_hat, 240, &eps, &s).unwrap();
        // Same code path by construction, so this holds bit-exactly.
        assert_eq!(direct.values, composed.values);
    }

    #[test]
    fn ddim_step_to_clean_is_clean_estimate() {
        let s = NoiseSchedule::default_linear();
        let z = LatentCode { values: flat(&[0.7, -0.2]), step: Step::At(19) };
        let eps = flat(&[1.0, 0.5]);
        let stepped = ddim_step(&z, Step::Clean, &eps, &s).unwrap();
        let estimated = estimate_clean(&z, &eps, &s).unwrap();
        assert_eq!(stepped.values, estimated.values);
        assert_eq!(stepped.step, Step::Clean);
    }

    #[test]
    fn ddim_step_ordering_violation() {
        let s = NoiseSchedule::default_linear();
        let z = LatentCode { values: flat(&[1.0]), step: Step::At(10) };
        let err = ddim_step(&z, Step::At(10), &flat(&[0.0]), &s).unwrap_err();
        assert!(matches!(err, ScheduleError::StepOrder { .. }));
    }

    #[test]
    fn invert_step_zero_eps_is_pure_rescale() {
        let s = NoiseSchedule::default_linear();
        let z = LatentCode { values: flat(&[2.0]), step: Step::At(100) };
        let out = ddim_invert_step(&z, 400, &flat(&[0.0]), &s).unwrap();
        let r = (s.alpha_bars()[400] / s.alpha_bars()[100]).sqrt();
        assert!((out.values[[0]] - 2.0 * r).abs() < 1e-14);
    }

    #[test]
    fn invert_then_step_round_trips() {
        let s = NoiseSchedule::default_linear();
        let z = LatentCode { values: flat(&[0.4, -1.3, 0.9]), step: Step::At(123) };
        let eps = flat(&[0.2, 0.7, -0.5]);
        let up = ddim_invert_step(&z, 456, &eps, &s).unwrap();
        let back = ddim_step(&up, Step::At(123), &eps, &s).unwrap();
        let num: f64 = (&back.values - &z.values).iter().map(|d| d * d).sum();
        let den: f64 = z.values.iter().map(|d| d * d).sum();
        assert!((num / den).sqrt() < 1e-10);
    }

    #[test]
    fn invert_ordering_violation() {
        let s = NoiseSchedule::default_linear();
        let z = LatentCode { values: flat(&[1.0]), step: Step::At(500) };
        let err = ddim_invert_step(&z, 500, &flat(&[0.0]), &s).unwrap_err();
        assert!(matches!(err, ScheduleError::StepOrder { .. }));
    }

    #[test]
    fn strided_indices_cover_t_max() {
        assert_eq!(strided_indices(999, 100), vec![99, 199, 299, 399, 499, 599, 699, 799, 899, 999]);
        assert_eq!(strided_indices(599, 200), vec![199, 399, 599]);
        assert_eq!(strided_indices(5, 1), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(strided_indices(600, 20).last(), Some(&600));
        assert_eq!(strided_indices(600, 20).first(), Some(&0));
    }
}
