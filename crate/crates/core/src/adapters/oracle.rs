//! Analytic linear-Gaussian oracle backend.
//!
//! For data distributed `N(mean, diag(scale^2))` per coordinate, the forward
//! noising marginal at step t is Gaussian, and the conditional expectation of
//! the injected noise given the noisy latent has the closed form
//!
//! ```text
//! eps*(z, t) = sqrt(1 - abar_t) * (z - sqrt(abar_t) * mean)
//!              / (1 - abar_t * (1 - scale^2))
//! ```
//!
//! per dimension (joint-Gaussian regression of eps on z_t). That makes every
//! sampling, inversion, and guidance identity in the library testable against
//! exact statistics without any learned weights. The codec is the identity
//! map; the context embedding has no influence and its VJP is zero.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD};
use rand::RngCore;

use super::{
    checksum_f64s, toy, AdapterError, Backends, BackendSpec, ContextVjp, IdentityCodec,
    NoisePredictor,
};
use crate::msi::StageEmbedding;
use crate::schedule::{LatentCode, NoiseSchedule};

#[derive(Debug)]
pub struct OraclePredictor {
    schedule: Arc<NoiseSchedule>,
    mean: Array1<f64>,
    scale: Array1<f64>,
    context_dim: usize,
}

impl OraclePredictor {
    pub fn new(
        schedule: Arc<NoiseSchedule>,
        mean: Array1<f64>,
        scale: Array1<f64>,
        context_dim: usize,
    ) -> Result<Self, AdapterError> {
        if let Some(&bad) = scale.iter().find(|s| **s <= 0.0) {
            return Err(AdapterError::NonPositiveScale(bad));
        }
        assert_eq!(mean.len(), scale.len(), "mean and scale must align");
        Ok(Self { schedule, mean, scale, context_dim })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn eps_star(&self, z: &LatentCode) -> Result<ArrayD<f64>, AdapterError> {
        if z.len() != self.dim() {
            return Err(AdapterError::LatentShape { expected: self.dim(), actual: z.len() });
        }
        let abar = self.schedule.alpha_bar(z.step);
        let a = abar.sqrt();
        let b = (1.0 - abar).sqrt();
        let mut out = z.values.clone();
        for (i, v) in out.iter_mut().enumerate() {
            let var = self.scale[i] * self.scale[i];
            let denom = 1.0 - abar * (1.0 - var);
            *v = b * (*v - a * self.mean[i]) / denom;
        }
        Ok(out)
    }
}

impl NoisePredictor for OraclePredictor {
    fn predict(&self, z: &LatentCode, _ctx: Option<&StageEmbedding>) -> Result<ArrayD<f64>, AdapterError> {
        self.eps_star(z)
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
        let eps = self.eps_star(z)?;
        let shape = (ctx.tokens.nrows(), ctx.tokens.ncols());
        // The oracle ignores its context, so the pull-back is exactly zero.
        let vjp: ContextVjp = Box::new(move |_cot| Array2::zeros(shape));
        Ok((eps, vjp))
    }

    fn param_checksum(&self) -> u64 {
        checksum_f64s(&[self.mean.as_slice().unwrap(), self.scale.as_slice().unwrap()])
    }
}

/// Builds the exact predictor plus identity codec for `N(mean, diag(scale^2))`
/// data of the given dimension.
pub fn analytic_oracle(
    schedule: Arc<NoiseSchedule>,
    mean: Array1<f64>,
    scale: Array1<f64>,
    context_dim: usize,
) -> Result<(Arc<OraclePredictor>, Arc<IdentityCodec>), AdapterError> {
    let dim = mean.len();
    let predictor = Arc::new(OraclePredictor::new(schedule, mean, scale, context_dim)?);
    let codec = Arc::new(IdentityCodec::new([1, dim, 1]));
    Ok((predictor, codec))
}

/// Registry factory: oracle predictor + identity codec + toy feature encoder
/// and identity embedder, so the full pipeline surface works on it.
///
/// Spec parameters: `dim`, `mean`, `scale` (scalars broadcast per
/// coordinate), `ctx` (context width), `seed` (for the auxiliary toy
/// components), `embdim`, `T`.
pub fn build_oracle_backends(spec: &BackendSpec) -> Result<Backends, AdapterError> {
    let image_shape = spec.image_shape(spec.get_u64("dim", 16)? as usize)?;
    let dim = image_shape[0] * image_shape[1] * image_shape[2];
    let mean = spec.get_f64("mean", 0.0)?;
    let scale = spec.get_f64("scale", 1.0)?;
    let ctx = spec.get_u64("ctx", 16)? as usize;
    let seed = spec.get_u64("seed", 1)?;
    let embdim = spec.get_u64("embdim", 8)? as usize;
    let t_total = spec.get_u64("T", 1000)? as usize;

    let schedule = Arc::new(
        NoiseSchedule::build(t_total, 1e-4, 0.02, crate::schedule::ScheduleKind::Linear)
            .map_err(|e| AdapterError::BadSpec { spec: spec.to_string(), reason: e.to_string() })?,
    );
    let predictor = Arc::new(OraclePredictor::new(
        schedule.clone(),
        Array1::from_elem(dim, mean),
        Array1::from_elem(dim, scale),
        ctx,
    )?);
    let codec = Arc::new(IdentityCodec::new(image_shape));
    let features = Arc::new(toy::ToyFeatureEncoder::new(seed, dim, toy::DEFAULT_FEATURE_DIM));
    let embedder = Arc::new(toy::ToyIdentityEmbedder::facenet_style(seed, dim, embdim)?);
    Ok(Backends {
        schedule,
        predictor,
        codec,
        features,
        embedder,
        model_id: spec.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ScheduleKind, Step};

    fn oracle_fixture(mean: f64, scale: f64, dim: usize) -> (Arc<NoiseSchedule>, OraclePredictor) {
        let sched = Arc::new(NoiseSchedule::build(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap());
        let p = OraclePredictor::new(
            sched.clone(),
            Array1::from_elem(dim, mean),
            Array1::from_elem(dim, scale),
            4,
        )
        .unwrap();
        (sched, p)
    }

    #[test]
    fn standard_normal_data_gives_linear_eps() {
        // mean=0, scale=1: eps*(z) = sqrt(1 - abar) * z.
        let (sched, p) = oracle_fixture(0.0, 1.0, 3);
        let t = 412;
        let z = LatentCode { values: ndarray::arr1(&[0.5, -2.0, 1.25]).into_dyn(), step: Step::At(t) };
        let eps = p.predict(&z, None).unwrap();
        let b = (1.0 - sched.alpha_bars()[t]).sqrt();
        for (e, zv) in eps.iter().zip(z.values.iter()) {
            assert!((e - b * zv).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_at_scaled_mean_predicts_zero_noise() {
        let (sched, p) = oracle_fixture(1.7, 0.4, 2);
        let t = 250;
        let a = sched.alpha_bars()[t].sqrt();
        let z = LatentCode { values: ndarray::arr1(&[1.7 * a, 1.7 * a]).into_dyn(), step: Step::At(t) };
        let eps = p.predict(&z, None).unwrap();
        for e in eps.iter() {
            assert_eq!(*e, 0.0);
        }
    }

    #[test]
    fn clean_latent_predicts_zero_noise() {
        let (_, p) = oracle_fixture(0.3, 1.1, 2);
        let z = LatentCode::from_vec(vec![0.3, 0.9]);
        let eps = p.predict(&z, None).unwrap();
        for e in eps.iter() {
            assert_eq!(*e, 0.0);
        }
    }

    #[test]
    fn nonpositive_scale_is_rejected() {
        let sched = Arc::new(NoiseSchedule::default_linear());
        let err = OraclePredictor::new(
            sched,
            Array1::from_elem(2, 0.0),
            ndarray::arr1(&[1.0, 0.0]),
            4,
        )
        .unwrap_err();
        assert!(matches!(err, AdapterError::NonPositiveScale(_)));
    }

    #[test]
    fn context_vjp_is_zero() {
        let (_, p) = oracle_fixture(0.0, 1.0, 2);
        let z = LatentCode { values: ndarray::arr1(&[1.0, -1.0]).into_dyn(), step: Step::At(10) };
        let ctx = StageEmbedding::unconditional(4);
        let (_, vjp) = p.predict_with_context_vjp(&z, &ctx, None).unwrap();
        let g = vjp(&ndarray::arr1(&[1.0, 1.0]).into_dyn());
        assert!(g.iter().all(|v| *v == 0.0));
    }
}
