//! Finite-difference checks of every analytic gradient.

use hapo_core::data::{Label, Sample, StepClass};
use hapo_core::env::ContinuousAction;
use hapo_core::optim::{
    bc_loss_and_grad, dpo_loss_and_grad, make_dpo_pairs, preference_loss_and_grad, weighted_bc_loss_and_grad,
    HapoConfig,
};
use hapo_core::policy::{Gradient, PolicyDims, PolicyParams};
use hapo_core::tokenizer::{ActionTokens, TokenizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;

fn small_dims() -> PolicyDims {
    PolicyDims {
        obs_dim: 11,
        hidden: 12,
        embed: 5,
        bins: 16,
        dims: 3,
    }
}

fn tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        bins: 16,
        ..TokenizerConfig::default()
    }
}

fn batch(seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = tokenizer();
    (0..n)
        .map(|i| {
            let o: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = ContinuousAction::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let c = [Label::Acceptable, Label::Intervention, Label::Failure][i % 3];
            Sample {
                o,
                a,
                tokens: tok.encode(&a).unwrap(),
                c,
                class: StepClass::Intervention,
                rejected: None,
            }
        })
        .collect()
}

fn perturbed(params: &PolicyParams, seed: u64) -> PolicyParams {
    let mut p = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in p.as_mut_slice() {
        *v += rng.random_range(-0.3..0.3);
    }
    p
}

/// Compares `grad` to central differences of `f` on `count` coordinates that
/// cover every parameter block.
fn check(params: &PolicyParams, grad: &Gradient, count: usize, f: impl Fn(&PolicyParams) -> f64) {
    let n = params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut idx: Vec<usize> = (0..count).map(|i| i * n / count).collect();
    idx.extend((0..count / 4).map(|_| rng.random_range(0..n)));
    let mut worst = 0.0f64;
    for &i in &idx {
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += EPS;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= EPS;
        let fd = (f(&plus) - f(&minus)) / (2.0 * EPS);
        let an = grad.0[i];
        let rel = (fd - an).abs() / (fd.abs().max(an.abs())).max(1e-6);
        worst = worst.max(rel);
        assert!(rel < REL_TOL, "coordinate {i}: analytic {an}, numeric {fd}, rel {rel}");
    }
    assert!(idx.len() >= 100);
    assert!(worst < REL_TOL);
}

#[test]
fn log_prob_gradient_matches_finite_differences() {
    let p = PolicyParams::init(1, small_dims());
    let s = &batch(2, 1)[0];
    let g = p.grad_log_prob(&s.o, &s.tokens).unwrap();
    check(&p, &g, 120, |q| q.log_prob(&s.o, &s.tokens).unwrap().total);
}

#[test]
fn bc_gradient_matches_finite_differences() {
    let p = PolicyParams::init(3, small_dims());
    let b = batch(4, 6);
    let (_, g) = bc_loss_and_grad(&p, &b).unwrap();
    check(&p, &g, 120, |q| bc_loss_and_grad(q, &b).unwrap().0.loss);
}

#[test]
fn weighted_bc_gradient_matches_finite_differences() {
    let p = PolicyParams::init(3, small_dims());
    let b = batch(4, 6);
    let w = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
    let (_, g) = weighted_bc_loss_and_grad(&p, &b, &w).unwrap();
    check(&p, &g, 120, |q| weighted_bc_loss_and_grad(q, &b, &w).unwrap().0.loss);
}

#[test]
fn preference_gradient_with_frozen_lambda_and_z0() {
    let reference = PolicyParams::init(7, small_dims());
    let p = perturbed(&reference, 8);
    let b = batch(9, 8);
    let lambdas = [0.9, 0.3, 0.6, 0.2, 0.8, 0.5, 0.4, 0.7];
    let cfg = HapoConfig::default();
    let z0 = 0.4;
    let (_, g) = preference_loss_and_grad(&p, &reference, &b, &lambdas, Some(z0), &cfg, 2).unwrap();
    check(&p, &g, 120, |q| {
        preference_loss_and_grad(q, &reference, &b, &lambdas, Some(z0), &cfg, 2)
            .unwrap()
            .0
            .loss
    });
}

#[test]
fn preference_gradient_through_z0() {
    // A near-uniform policy against a sharp reference puts more mass on
    // mismatched tokens, so the KL estimate is positive.
    let p = PolicyParams::init(7, small_dims());
    let reference = perturbed(&p, 8);
    let b = batch(9, 8);
    let lambdas = [0.9, 0.3, 0.6, 0.2, 0.8, 0.5, 0.4, 0.7];
    let cfg = HapoConfig {
        kl_detached: false,
        reward_scale: 0.5,
        ..HapoConfig::default()
    };
    let (report, g) = preference_loss_and_grad(&p, &reference, &b, &lambdas, None, &cfg, 2).unwrap();
    assert!(report.z0 > 0.0, "fixture must exercise the unclamped branch");
    check(&p, &g, 120, |q| {
        preference_loss_and_grad(q, &reference, &b, &lambdas, None, &cfg, 2)
            .unwrap()
            .0
            .loss
    });
}

#[test]
fn dpo_gradient_matches_finite_differences() {
    let reference = PolicyParams::init(11, small_dims());
    let p = perturbed(&reference, 12);
    let mut b = batch(13, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    make_dpo_pairs(&reference, &mut b, &tokenizer(), 0.3, &mut rng).unwrap();
    let (_, g) = dpo_loss_and_grad(&p, &reference, &b, 0.1).unwrap();
    check(&p, &g, 120, |q| dpo_loss_and_grad(q, &reference, &b, 0.1).unwrap().0.loss);
}

#[test]
fn explicit_tokens_gradient() {
    let p = perturbed(&PolicyParams::zeros(small_dims()), 21);
    let o = vec![0.1; 11];
    let t = ActionTokens(vec![0, 15, 7]);
    let g = p.grad_log_prob(&o, &t).unwrap();
    check(&p, &g, 120, |q| q.log_prob(&o, &t).unwrap().total);
}
