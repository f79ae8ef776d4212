//! Behavior cloning and the comparison objectives.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{neg_log_sigmoid, preference_loss_and_grad, sigmoid, HapoConfig, LossReport};
use crate::data::{Label, Sample};
use crate::env::ContinuousAction;
use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams};
use crate::tokenizer::TokenizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Dagger,
    Sirius,
    DpoSynth,
    KtoVanilla,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Dagger => "dagger",
            BaselineKind::Sirius => "sirius",
            BaselineKind::DpoSynth => "dpo_synth",
            BaselineKind::KtoVanilla => "kto_vanilla",
        }
    }
}

/// `−Σ w_i log π(tokens_i|o_i) / Σ w_i`.
pub fn weighted_bc_loss_and_grad(
    params: &PolicyParams,
    batch: &[Sample],
    weights: &[f64],
) -> Result<(LossReport, Gradient)> {
    if batch.is_empty() {
        return Err(Error::BatchTooSmall { needed: 1, got: 0 });
    }
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 || weights.len() != batch.len() {
        return Err(Error::ShapeMismatch("bad sample weights".into()));
    }
    let dims = params.dims().dims;
    let mut grad = Gradient::zeros_like(params);
    let mut loss = 0.0;
    for (s, w) in batch.iter().zip(weights) {
        let c = -w / total;
        let lp = params.accumulate_grad(&s.o, &s.tokens, &vec![c; dims], &mut grad)?;
        loss -= w / total * lp.total;
    }
    Ok((LossReport::plain(loss), grad))
}

/// Negative mean log-likelihood of the demonstrated tokens.
pub fn bc_loss_and_grad(params: &PolicyParams, batch: &[Sample]) -> Result<(LossReport, Gradient)> {
    weighted_bc_loss_and_grad(params, batch, &vec![1.0; batch.len()])
}

/// Pairs each sample with a dispreferred action: the reference policy's greedy
/// action plus per-dimension Gaussian noise, clamped and re-encoded.
pub fn make_dpo_pairs<R: Rng + ?Sized>(
    reference: &PolicyParams,
    batch: &mut [Sample],
    tokenizer: &TokenizerConfig,
    noise: f64,
    rng: &mut R,
) -> Result<()> {
    let normal = Normal::new(0.0, noise.max(0.0))
        .map_err(|e| Error::Config(format!("dpo noise: {e}")))?;
    for s in batch.iter_mut() {
        let base = tokenizer.decode(&reference.greedy_decode(&s.o))?.to_array();
        let mut noisy = [0.0; 3];
        for (n, b) in noisy.iter_mut().zip(base) {
            *n = (b + normal.sample(rng)).clamp(-1.0, 1.0);
        }
        s.rejected = Some(tokenizer.encode(&ContinuousAction::from_array(noisy))?);
    }
    Ok(())
}

/// Mean `−ln σ(β[(r_chosen) − (r_rejected)])` over paired samples.
pub fn dpo_loss_and_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &[Sample],
    beta: f64,
) -> Result<(LossReport, Gradient)> {
    if batch.is_empty() {
        return Err(Error::BatchTooSmall { needed: 1, got: 0 });
    }
    let n = batch.len() as f64;
    let dims = params.dims().dims;
    let mut grad = Gradient::zeros_like(params);
    let mut loss = 0.0;
    let (mut rc, mut rr) = (0.0, 0.0);
    for s in batch {
        let rejected = s
            .rejected
            .as_ref()
            .ok_or_else(|| Error::Config("dpo sample without a rejected pair".into()))?;
        let chosen_r = params.log_prob(&s.o, &s.tokens)?.total - reference.log_prob(&s.o, &s.tokens)?.total;
        let rej_r = params.log_prob(&s.o, rejected)?.total - reference.log_prob(&s.o, rejected)?.total;
        let z = beta * (chosen_r - rej_r);
        loss += neg_log_sigmoid(z) / n;
        let coef = -(1.0 - sigmoid(z)) * beta / n;
        params.accumulate_grad(&s.o, &s.tokens, &vec![coef; dims], &mut grad)?;
        params.accumulate_grad(&s.o, rejected, &vec![-coef; dims], &mut grad)?;
        rc += chosen_r;
        rr += rej_r;
    }
    let mut report = LossReport::plain(loss);
    report.mean_reward_desirable = rc / n;
    report.mean_reward_undesirable = rr / n;
    Ok((report, grad))
}

/// Comparison objectives evaluated on an already-drawn batch.
pub fn baseline_loss(
    kind: BaselineKind,
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &[Sample],
    cfg: &HapoConfig,
    tokenizer: &TokenizerConfig,
) -> Result<(LossReport, Gradient)> {
    match kind {
        BaselineKind::Dagger => bc_loss_and_grad(params, batch),
        BaselineKind::Sirius => {
            let w: Vec<f64> = batch
                .iter()
                .map(|s| if s.c == Label::Intervention { cfg.sirius_weight } else { 1.0 })
                .collect();
            weighted_bc_loss_and_grad(params, batch, &w)
        }
        BaselineKind::DpoSynth => dpo_loss_and_grad(params, reference, batch, cfg.dpo_beta),
        BaselineKind::KtoVanilla => preference_loss_and_grad(
            params,
            reference,
            batch,
            &vec![1.0; batch.len()],
            None,
            cfg,
            tokenizer.gripper_dim,
        ),
    }
}
