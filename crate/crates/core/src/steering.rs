//! Activation steering via Fourier probes.
//!
//! Rewrites a residual state so its per-period Fourier readouts encode a
//! target integer: for each period the sine readout is set to
//! alpha * r_T * sin(theta*), then the cosine readout is re-read and set
//! likewise. The exact-set form divides by |w|^2, and re-reading between
//! the two patches keeps the construction correct when probe directions
//! are not orthogonal; periods apply in ascending order.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::SitePatchModel;
use crate::kernels::softmax_inplace;
use crate::model::{HookAction, HookPoint, HookSpec, Positions, TransformerModel};
use crate::probes::FourierProbePair;
use crate::tasks::PromptInstance;
use crate::tensor::Tensor;

/// Radii below this give no usable direction; the period is skipped.
const MIN_RADIUS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringConfig {
    /// Counterfactual pre-modulo sum n'.
    pub target: i64,
    /// Periods to steer, applied ascending.
    pub periods: Vec<usize>,
    pub alpha: f64,
    pub layer: usize,
    pub point: HookPoint,
    /// Null intervention: leave the state untouched (baseline rows for
    /// alpha sweeps, where a literal alpha = 0 would zero the readouts).
    pub bypass: bool,
}

impl SteeringConfig {
    pub fn new(target: i64, periods: Vec<usize>, layer: usize) -> SteeringConfig {
        SteeringConfig {
            target,
            periods,
            alpha: 10.0,
            layer,
            point: HookPoint::ResidPostMlp,
            bypass: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.periods.is_empty() {
            return Err(Error::Contract("steering needs a non-empty period set".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Contract(
                "alpha must be positive; use `bypass` for a null intervention".into(),
            ));
        }
        Ok(())
    }
}

/// Apply the per-period rewrites to a raw state vector. Returns the
/// steered state and the periods skipped for vanishing radius.
pub fn steer_state(
    h: &Tensor,
    probes: &BTreeMap<usize, FourierProbePair>,
    cfg: &SteeringConfig,
) -> Result<(Tensor, Vec<usize>)> {
    cfg.validate()?;
    if cfg.bypass {
        return Ok((h.clone(), Vec::new()));
    }
    let mut periods = cfg.periods.clone();
    periods.sort_unstable();
    let mut state: Vec<f64> = h.data().iter().map(|&v| v as f64).collect();
    let mut skipped = Vec::new();
    for &t in &periods {
        let probe = probes
            .get(&t)
            .ok_or_else(|| Error::Contract(format!("no probe trained for period {t}")))?;
        if probe.w_sin.numel() != state.len() {
            return Err(Error::Dimension("probe dimension does not match the state".into()));
        }
        // Radius from the *original* state.
        let s0 = dot64(probe.w_sin.data(), h.data()) + probe.b_sin as f64;
        let c0 = dot64(probe.w_cos.data(), h.data()) + probe.b_cos as f64;
        let radius = (s0 * s0 + c0 * c0).sqrt();
        if radius < MIN_RADIUS {
            skipped.push(t);
            continue;
        }
        let theta = std::f64::consts::TAU * cfg.target as f64 / t as f64;
        let s_star = cfg.alpha * radius * theta.sin();
        let c_star = cfg.alpha * radius * theta.cos();

        // Patch sine, re-read, patch cosine.
        let s_hat = read(&state, probe.w_sin.data(), probe.b_sin);
        let wnorm = sq_norm(probe.w_sin.data());
        add_scaled(&mut state, probe.w_sin.data(), (s_star - s_hat) / wnorm);
        let c_hat = read(&state, probe.w_cos.data(), probe.b_cos);
        let wnorm = sq_norm(probe.w_cos.data());
        add_scaled(&mut state, probe.w_cos.data(), (c_star - c_hat) / wnorm);
    }
    let steered = Tensor::new(
        h.shape().to_vec(),
        state.iter().map(|&v| v as f32).collect(),
    )?;
    Ok((steered, skipped))
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn read(state: &[f64], w: &[f32], b: f32) -> f64 {
    state.iter().zip(w).map(|(&s, &wi)| s * wi as f64).sum::<f64>() + b as f64
}

fn sq_norm(w: &[f32]) -> f64 {
    w.iter().map(|&x| (x as f64) * (x as f64)).sum()
}

fn add_scaled(state: &mut [f64], w: &[f32], c: f64) {
    for (s, &wi) in state.iter_mut().zip(w) {
        *s += c * wi as f64;
    }
}

#[derive(Debug, Clone)]
pub struct SteerOutcome {
    /// Softmax over the full vocabulary at the answer position.
    pub distribution: Vec<f32>,
    pub skipped_periods: Vec<usize>,
    pub original_state: Tensor,
    pub steered_state: Tensor,
}

/// Steer one prompt through the transformer: read the site state, rewrite
/// it, and continue the forward pass with the steered state in place.
pub fn steer(
    model: &TransformerModel,
    prompt: &PromptInstance,
    probes: &BTreeMap<usize, FourierProbePair>,
    cfg: &SteeringConfig,
) -> Result<SteerOutcome> {
    let (_, cache) = model.forward_with_cache(&prompt.tokens)?;
    let h = cache.resid_at(cfg.point, cfg.layer, prompt.final_pos);
    let (steered, skipped) = steer_state(&h, probes, cfg)?;
    let hooks = vec![HookSpec {
        layer: cfg.layer,
        point: cfg.point,
        positions: Positions::These(vec![prompt.final_pos]),
        action: HookAction::ReplaceFull(steered.clone()),
    }];
    let (logits, _) = model.run_with_hooks(&prompt.tokens, &hooks)?;
    let mut distribution = logits.row(prompt.final_pos).to_vec();
    softmax_inplace(&mut distribution);
    Ok(SteerOutcome {
        distribution,
        skipped_periods: skipped,
        original_state: h,
        steered_state: steered,
    })
}

/// Steer one example of a site-patchable model (used by the planted
/// oracle fixtures).
pub fn steer_site_model(
    target: &dyn SitePatchModel,
    ex: usize,
    probes: &BTreeMap<usize, FourierProbePair>,
    cfg: &SteeringConfig,
) -> Result<SteerOutcome> {
    let h = target.site_state(ex).clone();
    let (steered, skipped) = steer_state(&h, probes, cfg)?;
    let logits = target.logits_from_site(ex, &steered)?;
    let mut distribution = logits.row(0).to_vec();
    softmax_inplace(&mut distribution);
    Ok(SteerOutcome {
        distribution,
        skipped_periods: skipped,
        original_state: h,
        steered_state: steered,
    })
}

/// Aggregate steering report: one row per target, columns over the
/// task's answer tokens plus a trailing "other" bucket.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringReport {
    pub targets: Vec<i64>,
    pub answer_tokens: Vec<u32>,
    /// targets x (answers + 1); each row sums to 1.
    pub matrix: Vec<Vec<f64>>,
    /// Per-prompt rows in the same layout, when requested.
    pub per_prompt: Option<Vec<Vec<Vec<f64>>>>,
    pub alpha: f64,
    pub skipped_periods: Vec<usize>,
}

fn bucket(distribution: &[f32], answer_tokens: &[u32]) -> Vec<f64> {
    let mut row = Vec::with_capacity(answer_tokens.len() + 1);
    let mut covered = 0.0f64;
    for &tok in answer_tokens {
        let p = distribution[tok as usize] as f64;
        covered += p;
        row.push(p);
    }
    row.push((1.0 - covered).max(0.0));
    row
}

/// Steer every prompt toward every target and average the output
/// distributions per target.
pub fn steering_matrix(
    model: &TransformerModel,
    prompts: &[PromptInstance],
    targets: &[i64],
    probes: &BTreeMap<usize, FourierProbePair>,
    answer_tokens: &[u32],
    cfg: &SteeringConfig,
    keep_per_prompt: bool,
) -> Result<SteeringReport> {
    if prompts.is_empty() || targets.is_empty() {
        return Err(Error::Contract("steering matrix needs prompts and targets".into()));
    }
    // (prompt, target) grid, parallel over prompts.
    let rows: Vec<Vec<(Vec<f64>, Vec<usize>)>> = prompts
        .par_iter()
        .map(|p| {
            targets
                .iter()
                .map(|&t| {
                    let out = steer(model, p, probes, &SteeringConfig { target: t, ..cfg.clone() })?;
                    Ok((bucket(&out.distribution, answer_tokens), out.skipped_periods))
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let width = answer_tokens.len() + 1;
    let mut matrix = vec![vec![0.0f64; width]; targets.len()];
    let mut skipped: Vec<usize> = Vec::new();
    for prow in &rows {
        for (ti, (row, skip)) in prow.iter().enumerate() {
            for (m, v) in matrix[ti].iter_mut().zip(row) {
                *m += v;
            }
            for &s in skip {
                if !skipped.contains(&s) {
                    skipped.push(s);
                }
            }
        }
    }
    for row in &mut matrix {
        for v in row.iter_mut() {
            *v /= prompts.len() as f64;
        }
    }
    let per_prompt = keep_per_prompt.then(|| {
        rows.iter()
            .map(|prow| prow.iter().map(|(row, _)| row.clone()).collect())
            .collect()
    });
    skipped.sort_unstable();
    Ok(SteeringReport {
        targets: targets.to_vec(),
        answer_tokens: answer_tokens.to_vec(),
        matrix,
        per_prompt,
        alpha: cfg.alpha,
        skipped_periods: skipped,
    })
}
