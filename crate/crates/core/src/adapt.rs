//! Entropy-targeted control of the Sinkhorn temperature `λ`.
//!
//! The target entropy starts at `log k` (uniform rows) and decays along a
//! cosine warm-up to `h_target = log √k`. Each call nudges `λ` by `h_step`
//! until `H(Q)` is within `h_tol` of the scheduled target, for at most
//! `max_inner_iters` updates. `λ` is persistent state: it carries over from
//! one call to the next.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::prob::TransportPlan;
use crate::sinkhorn;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupShape {
    #[default]
    Cosine,
    /// Linear ramp; only for experiments.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Entropy reached after warm-up.
    pub h_target: f64,
    /// Entropy at step 0 (`log k`).
    pub h_start: f64,
    pub h_tol: f64,
    pub h_step: f64,
    /// Warm-up length in optimisation steps.
    pub warmup_steps: usize,
    pub max_inner_iters: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub shape: WarmupShape,
}

impl AdaptConfig {
    /// Defaults for `k` outputs: target `log √k`, tolerance 5e-3, step 0.1,
    /// λ ∈ [0.1, 1], five inner iterations.
    pub fn for_outputs(k: usize, warmup_steps: usize) -> Self {
        let log_k = (k as f64).ln();
        Self {
            h_target: 0.5 * log_k,
            h_start: log_k,
            h_tol: 5e-3,
            h_step: 0.1,
            warmup_steps,
            max_inner_iters: 5,
            lambda_min: 0.1,
            lambda_max: 1.0,
            shape: WarmupShape::Cosine,
        }
    }

    /// Warm-up of 100 epochs' worth of steps, `100 · n / m`.
    pub fn warmup_for(n: usize, m: usize) -> usize {
        100 * n / m.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max) {
            errs.push(format!("need 0 < lambda_min <= lambda_max, got [{}, {}]", self.lambda_min, self.lambda_max));
        }
        if !(self.h_tol > 0.0) {
            errs.push(format!("h_tol must be positive, got {}", self.h_tol));
        }
        if !(self.h_step > 0.0) {
            errs.push(format!("h_step must be positive, got {}", self.h_step));
        }
        if !(self.h_target.is_finite() && self.h_start.is_finite() && self.h_target <= self.h_start) {
            errs.push(format!("need h_target <= h_start, got {} and {}", self.h_target, self.h_start));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptState {
    pub lambda: f64,
    pub step: usize,
}

impl Default for AdaptState {
    fn default() -> Self {
        Self { lambda: 1.0, step: 0 }
    }
}

/// Scheduled entropy target at step `s`.
pub fn scheduled_target(cfg: &AdaptConfig, s: usize) -> f64 {
    let progress = if cfg.warmup_steps == 0 { 1.0 } else { (s as f64 / cfg.warmup_steps as f64).min(1.0) };
    let scale = match cfg.shape {
        WarmupShape::Cosine => ((std::f64::consts::PI * progress).cos() + 1.0) / 2.0,
        WarmupShape::Linear => 1.0 - progress,
    };
    cfg.h_target + (cfg.h_start - cfg.h_target) * scale
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub q: TransportPlan,
    /// `H(Q)` of the returned plan.
    pub h_q: f64,
    /// Scheduled target used for this call.
    pub h_target: f64,
    /// Inner-loop iterations that changed (or tried to change) `λ`.
    pub updates: usize,
    pub solves: usize,
}

/// Adjusts `state.lambda` toward the scheduled entropy and returns the plan
/// solved at the final `λ`.
pub fn adapt_and_solve(
    logits: &DenseMatrix,
    state: &mut AdaptState,
    cfg: &AdaptConfig,
    sinkhorn_iters: usize,
) -> Result<AdaptOutcome> {
    let target = scheduled_target(cfg, state.step);
    let mut lambda = state.lambda.clamp(cfg.lambda_min, cfg.lambda_max);
    let (mut q, mut h) = sinkhorn::solve_with_entropy(logits, lambda, sinkhorn_iters)?;
    let mut solves = 1;
    let mut updates = 0;
    for _ in 0..cfg.max_inner_iters {
        let gap = h - target;
        let next = if gap > cfg.h_tol {
            (lambda - cfg.h_step).max(cfg.lambda_min)
        } else if gap < -cfg.h_tol {
            (lambda + cfg.h_step).min(cfg.lambda_max)
        } else {
            break;
        };
        updates += 1;
        // a clamped λ would reproduce the same plan
        if next != lambda {
            lambda = next;
            (q, h) = sinkhorn::solve_with_entropy(logits, lambda, sinkhorn_iters)?;
            solves += 1;
        }
    }
    state.lambda = lambda;
    Ok(AdaptOutcome { q, h_q: h, h_target: target, updates, solves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_gaussian, Rng};

    #[test]
    fn schedule_endpoints() {
        let cfg = AdaptConfig::for_outputs(100, 1000);
        let log_k = 100f64.ln();
        assert_eq!(scheduled_target(&cfg, 0), log_k);
        assert!((scheduled_target(&cfg, 1000) - 10f64.ln()).abs() < 1e-15);
        assert!((scheduled_target(&cfg, 5000) - 10f64.ln()).abs() < 1e-15);
        assert!((scheduled_target(&cfg, 500) - (log_k + 10f64.ln()) / 2.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..1200 {
            let h = scheduled_target(&cfg, s);
            assert!(h <= prev && h >= cfg.h_target - 1e-15 && h <= log_k);
            prev = h;
        }
    }

    #[test]
    fn linear_shape() {
        let cfg = AdaptConfig { shape: WarmupShape::Linear, ..AdaptConfig::for_outputs(16, 10) };
        assert!((scheduled_target(&cfg, 5) - 0.75 * 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dead_band_leaves_lambda_alone() {
        let o = sample_gaussian(&mut Rng::new(1), 64, 16).unwrap();
        let (_, h) = sinkhorn::solve_with_entropy(&o, 0.7, 10).unwrap();
        // centre the schedule on the current entropy
        let cfg = AdaptConfig { h_target: h, h_start: h, ..AdaptConfig::for_outputs(16, 0) };
        let mut state = AdaptState { lambda: 0.7, step: 3 };
        let out = adapt_and_solve(&o, &mut state, &cfg, 10).unwrap();
        assert_eq!(state.lambda, 0.7);
        assert_eq!((out.updates, out.solves), (0, 1));
    }

    #[test]
    fn clamp_saturates_at_lambda_min() {
        // near-uniform logits keep H(Q) close to log k even at λ = 0.1
        let o = sample_gaussian(&mut Rng::new(2), 64, 16).unwrap().scale(1e-3);
        let cfg = AdaptConfig::for_outputs(16, 10);
        let mut state = AdaptState { lambda: 0.1, step: 100 };
        let out = adapt_and_solve(&o, &mut state, &cfg, 10).unwrap();
        assert!(out.h_q - out.h_target > cfg.h_tol);
        assert_eq!(state.lambda, 0.1);
        assert_eq!(out.updates, 5);
        assert_eq!(out.solves, 1);
    }

    #[test]
    fn exits_in_band_at_clamp_or_after_budget() {
        let cfg = AdaptConfig::for_outputs(16, 10);
        for seed in 0..20 {
            let o = sample_gaussian(&mut Rng::new(seed), 64, 16).unwrap().scale(1.0 + seed as f64 * 0.3);
            let mut state = AdaptState { lambda: 1.0, step: 10_000 };
            let out = adapt_and_solve(&o, &mut state, &cfg, 10).unwrap();
            let in_band = (out.h_q - 0.5 * 16f64.ln()).abs() <= cfg.h_tol;
            let clamped = state.lambda == 0.1 || state.lambda == 1.0;
            assert!(in_band || clamped || out.updates == 5, "seed {seed}");
            assert!(out.updates <= 5 && out.solves <= 6);
            assert!((0.1..=1.0).contains(&state.lambda));
        }
    }

    #[test]
    fn single_update_moves_entropy_toward_target() {
        let base = AdaptConfig::for_outputs(16, 0);
        for seed in 0..10 {
            let o = sample_gaussian(&mut Rng::new(seed), 64, 16).unwrap().scale(2.0);
            let cfg = AdaptConfig { max_inner_iters: 1, ..base.clone() };
            let mut state = AdaptState { lambda: 0.5, step: 0 };
            let (_, h0) = sinkhorn::solve_with_entropy(&o, 0.5, 10).unwrap();
            let out = adapt_and_solve(&o, &mut state, &cfg, 10).unwrap();
            let clamped = state.lambda == cfg.lambda_min || state.lambda == cfg.lambda_max;
            if out.updates == 1 && !clamped {
                assert!((out.h_q - h0) * (out.h_target - h0) > 0.0, "seed {seed}: moved away from target");
            }
        }
    }

    #[test]
    fn validation_collects_errors() {
        let cfg = AdaptConfig { lambda_min: 0.0, h_tol: 0.0, ..AdaptConfig::for_outputs(10, 5) };
        match cfg.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
