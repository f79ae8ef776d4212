//! Reward ratio, mismatched-pair KL reference point, adaptive λ weights and
//! the desirability-weighted sigmoid utility loss.

use super::{sigmoid, BatchWeights, HapoConfig, LossReport, SampleDiag};
use crate::data::{Label, Sample};
use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams};
use crate::tokenizer::{ActionTokens, TokenizerConfig};

/// Per-dimension inclusion mask for the reward of a sample with label `c`.
/// The gripper term is dropped for undesirable samples when configured.
pub fn reward_mask(c: Label, cfg: &HapoConfig, dims: usize, gripper_dim: usize) -> Vec<f64> {
    (0..dims)
        .map(|d| {
            if cfg.exclude_gripper_reject && !c.is_desirable() && d == gripper_dim {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// `log π_θ(tokens|o) − log π_ref(tokens|o)`, summed over the dimensions
/// kept by `mask`.
pub fn reward(
    params: &PolicyParams,
    reference: &PolicyParams,
    o: &[f64],
    tokens: &ActionTokens,
    mask: &[f64],
) -> Result<f64> {
    let cur = params.log_prob(o, tokens)?;
    let old = reference.log_prob(o, tokens)?;
    Ok(cur
        .per_dim
        .iter()
        .zip(&old.per_dim)
        .zip(mask)
        .filter(|(_, m)| **m != 0.0)
        .map(|((a, b), _)| a - b)
        .sum())
}

/// KL reference point from mismatched pairs: sample `i`'s observation with
/// sample `i+1`'s tokens, clamped at zero.
pub fn kl_estimate(params: &PolicyParams, reference: &PolicyParams, batch: &[Sample]) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: n });
    }
    let mut acc = 0.0;
    for i in 0..n {
        let toks = &batch[(i + 1) % n].tokens;
        acc += params.log_prob(&batch[i].o, toks)?.total - reference.log_prob(&batch[i].o, toks)?.total;
    }
    Ok((acc / n as f64).max(0.0))
}

/// λ_D = 1 − exp(−β_D w) for desirable labels, λ_U = exp(−β_U w) otherwise.
pub fn lambdas_from_weights(w: &[f64], labels: &[Label], beta_d: f64, beta_u: f64) -> Vec<f64> {
    w.iter()
        .zip(labels)
        .map(|(wi, c)| {
            if c.is_desirable() {
                1.0 - (-beta_d * wi).exp()
            } else {
                (-beta_u * wi).exp()
            }
        })
        .collect()
}

/// Batch-normalized L1 errors of the greedy continuous action. No gradient
/// flows through these weights.
pub fn adaptive_weights(
    params: &PolicyParams,
    batch: &[Sample],
    cfg: &HapoConfig,
    tokenizer: &TokenizerConfig,
) -> Result<BatchWeights> {
    if batch.is_empty() {
        return Err(Error::BatchTooSmall { needed: 1, got: 0 });
    }
    let mut l = Vec::with_capacity(batch.len());
    for s in batch {
        let pred = tokenizer.decode(&params.greedy_decode(&s.o))?;
        l.push(pred.l1_distance(&s.a));
    }
    let total: f64 = l.iter().sum();
    let n = batch.len() as f64;
    let uniform_fallback = total <= 0.0;
    let w: Vec<f64> = if uniform_fallback {
        vec![1.0 / n; batch.len()]
    } else {
        l.iter().map(|x| x / total).collect()
    };
    let labels: Vec<Label> = batch.iter().map(|s| s.c).collect();
    let lambda = lambdas_from_weights(&w, &labels, cfg.beta_d(), cfg.beta_u());
    Ok(BatchWeights {
        l,
        w,
        lambda,
        uniform_fallback,
    })
}

/// Loss `−mean v` with the given λ values and its gradient.
///
/// `v = λ σ(s(r − z0))` for desirable samples and `λ σ(s(z0 − r))` otherwise,
/// `s = cfg.reward_scale`. When `z0_fixed` is `Some`, that value is used as a
/// constant; otherwise z0 is estimated from the batch and, unless
/// `cfg.kl_detached`, differentiated through.
pub fn preference_loss_and_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &[Sample],
    lambdas: &[f64],
    z0_fixed: Option<f64>,
    cfg: &HapoConfig,
    gripper_dim: usize,
) -> Result<(LossReport, Gradient)> {
    let n = batch.len();
    if n == 0 || lambdas.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} samples with {} lambdas",
            lambdas.len()
        )));
    }
    let z0 = match z0_fixed {
        Some(z) => z,
        None => kl_estimate(params, reference, batch)?,
    };
    let dims = params.dims().dims;
    let scale = cfg.reward_scale;
    let inv_n = 1.0 / n as f64;
    let mut grad = Gradient::zeros_like(params);
    let mut samples = Vec::with_capacity(n);
    let mut loss = 0.0;
    let mut dloss_dz0 = 0.0;
    let (mut rd, mut nd, mut ru, mut nu) = (0.0, 0usize, 0.0, 0usize);
    for (s, &lambda) in batch.iter().zip(lambdas) {
        let desirable = s.c.is_desirable();
        let mask = reward_mask(s.c, cfg, dims, gripper_dim);
        let r = reward(params, reference, &s.o, &s.tokens, &mask)?;
        let x = if desirable { scale * (r - z0) } else { scale * (z0 - r) };
        let sig = sigmoid(x);
        let utility = lambda * sig;
        loss -= utility * inv_n;
        // d(−v/n)/dr
        let slope = lambda * sig * (1.0 - sig) * scale * inv_n;
        let dr = if desirable { -slope } else { slope };
        dloss_dz0 -= dr;
        if dr != 0.0 {
            let weights: Vec<f64> = mask.iter().map(|m| m * dr).collect();
            // ∂L/∂θ += (∂L/∂r) · ∇r
            params.accumulate_grad(&s.o, &s.tokens, &weights, &mut grad)?;
        }
        if desirable {
            rd += r;
            nd += 1;
        } else {
            ru += r;
            nu += 1;
        }
        samples.push(SampleDiag {
            desirable,
            reward: r,
            lambda,
            utility,
        });
    }
    if z0_fixed.is_none() && !cfg.kl_detached && z0 > 0.0 && dloss_dz0 != 0.0 {
        let w = vec![dloss_dz0 * inv_n; dims];
        for i in 0..n {
            params.accumulate_grad(&batch[i].o, &batch[(i + 1) % n].tokens, &w, &mut grad)?;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NumericOverflow);
    }
    let mean = |a: f64, c: usize| if c == 0 { 0.0 } else { a / c as f64 };
    Ok((
        LossReport {
            loss,
            mean_reward_desirable: mean(rd, nd),
            mean_reward_undesirable: mean(ru, nu),
            z0,
            samples,
        },
        grad,
    ))
}

/// Full objective: adaptive λ from the current greedy predictions, detached
/// z0 (per config), sigmoid utility loss.
pub fn hapo_loss_and_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &[Sample],
    cfg: &HapoConfig,
    tokenizer: &TokenizerConfig,
) -> Result<(LossReport, Gradient)> {
    let weights = adaptive_weights(params, batch, cfg, tokenizer)?;
    preference_loss_and_grad(
        params,
        reference,
        batch,
        &weights.lambda,
        None,
        cfg,
        tokenizer.gripper_dim,
    )
}
