//! Two-phase embedding scheduling: the learned stage embedding for steps
//! above the split point, the unconditional embedding at or below it.
//!
//! The split point is `floor(tau * T)`, kept integral so the boundary is
//! reproducible. Recovery never consults the split — it conditions on the
//! learned stage embedding at every step.

use thiserror::Error;

use crate::msi::{stage_of, ConditionalEmbeddingSet, StageEmbedding, N_STAGES};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("tau must lie in [0,1], got {0}")]
    TauOutOfRange(f64),
}

/// The tau-split selection rule plus the unconditional embedding it falls
/// back to.
#[derive(Debug, Clone)]
pub struct ScheduleStrategy {
    tau: f64,
    t_total: usize,
    pub uncond: StageEmbedding,
}

impl ScheduleStrategy {
    pub fn new(tau: f64, t_total: usize, uncond: StageEmbedding) -> Result<Self, StrategyError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(StrategyError::TauOutOfRange(tau));
        }
        Ok(Self { tau, t_total, uncond })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Largest step that still selects the unconditional embedding.
    pub fn split_point(&self) -> usize {
        (self.tau * self.t_total as f64).floor() as usize
    }

    /// True when step `t` uses the learned embedding (`t > tau * T`).
    pub fn uses_learned(&self, t: usize) -> bool {
        t > self.split_point()
    }
}

/// Selects the embedding for step `t`: `key_e` stage when `t > tau * T`,
/// otherwise the unconditional embedding.
pub fn select_embedding<'a>(
    t: usize,
    strat: &'a ScheduleStrategy,
    key_e: &'a ConditionalEmbeddingSet,
) -> &'a StageEmbedding {
    if strat.uses_learned(t) {
        key_e.stage(stage_of(t, strat.t_total, N_STAGES))
    } else {
        &strat.uncond
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn key_e(dim: usize) -> ConditionalEmbeddingSet {
        let stages = (0..N_STAGES)
            .map(|s| StageEmbedding {
                tokens: Array2::from_elem((1, dim), s as f64 + 1.0),
                stage_index: Some(s),
            })
            .collect();
        ConditionalEmbeddingSet {
            stages,
            dim,
            image_fingerprint: "fp".into(),
            model_id: "m".into(),
        }
    }

    fn strat(tau: f64) -> ScheduleStrategy {
        ScheduleStrategy::new(tau, 1000, StageEmbedding::unconditional(4)).unwrap()
    }

    #[test]
    fn tau_zero_uses_learned_everywhere_but_step_zero() {
        let s = strat(0.0);
        let k = key_e(4);
        assert!(std::ptr::eq(select_embedding(0, &s, &k), &s.uncond));
        for t in 1..1000 {
            assert!(select_embedding(t, &s, &k).stage_index.is_some(), "t={t}");
        }
    }

    #[test]
    fn tau_one_is_unconditional_everywhere() {
        let s = strat(1.0);
        let k = key_e(4);
        for t in 0..1000 {
            assert!(std::ptr::eq(select_embedding(t, &s, &k), &s.uncond), "t={t}");
        }
    }

    #[test]
    fn paper_boundary_at_tau_04() {
        let s = strat(0.4);
        let k = key_e(4);
        assert_eq!(select_embedding(500, &s, &k).stage_index, Some(5));
        assert!(std::ptr::eq(select_embedding(400, &s, &k), &s.uncond));
        assert_eq!(select_embedding(401, &s, &k).stage_index, Some(4));
    }

    #[test]
    fn exactly_one_branch_fires_per_step() {
        for tau in [0.0, 0.3, 0.4, 0.6, 0.99, 1.0] {
            let s = strat(tau);
            let split = s.split_point();
            for t in 0..1000 {
                assert_eq!(s.uses_learned(t), t > split);
            }
        }
    }

    #[test]
    fn tau_out_of_range_rejected() {
        assert!(ScheduleStrategy::new(1.01, 1000, StageEmbedding::unconditional(2)).is_err());
        assert!(ScheduleStrategy::new(-0.1, 1000, StageEmbedding::unconditional(2)).is_err());
    }
}
