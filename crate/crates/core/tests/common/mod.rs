#![allow(dead_code)]

use hapo_core::data::{EpisodeMeta, Label, Sample, Source, Step, StepClass, Trajectory};
use hapo_core::env::TaskSpec;
use hapo_core::env::ContinuousAction;
use hapo_core::policy::{PolicyDims, PolicyParams};
use hapo_core::tokenizer::TokenizerConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Labels expected from the raw "intervenor in control" mask, scanning
/// forward: a step is a failure iff a takeover starts within the next K steps.
pub fn relabel_oracle(in_control: &[bool], k: usize) -> Vec<Label> {
    let n = in_control.len();
    let onset = |j: usize| in_control[j] && (j == 0 || !in_control[j - 1]);
    (0..n)
        .map(|i| {
            if in_control[i] {
                Label::Intervention
            } else if (i + 1..=(i + k).min(n.saturating_sub(1))).any(onset) {
                Label::Failure
            } else {
                Label::Acceptable
            }
        })
        .collect()
}

/// Label grammar of a stored trajectory: every failure lies within K steps
/// before a takeover onset, and every step that close to an onset (and not
/// itself an intervention) is a failure.
pub fn assert_label_grammar(traj: &Trajectory, k: usize) {
    let mask: Vec<bool> = traj.steps.iter().map(|s| s.c == Label::Intervention).collect();
    assert_eq!(traj.labels(), relabel_oracle(&mask, k), "rollout {}", traj.meta.rollout_id);
}

pub fn small_dims() -> PolicyDims {
    PolicyDims {
        obs_dim: 11,
        hidden: 12,
        embed: 5,
        bins: 16,
        dims: 3,
    }
}

pub fn small_tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        bins: 16,
        ..TokenizerConfig::default()
    }
}

/// Random observations and actions; labels cycle through acceptable,
/// intervention and failure.
pub fn random_batch(seed: u64, n: usize, tok: &TokenizerConfig) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let o: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = ContinuousAction::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let (c, class) = [
                (Label::Acceptable, StepClass::Expert),
                (Label::Intervention, StepClass::Intervention),
                (Label::Failure, StepClass::Failure),
            ][i % 3];
            Sample {
                o,
                a,
                tokens: tok.encode(&a).unwrap(),
                c,
                class,
                rejected: None,
            }
        })
        .collect()
}

pub fn perturbed(params: &PolicyParams, seed: u64, scale: f64) -> PolicyParams {
    let mut p = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in p.as_mut_slice() {
        *v += rng.random_range(-scale..scale);
    }
    p
}

pub fn meta() -> EpisodeMeta {
    EpisodeMeta {
        spec: TaskSpec::default(),
        rollout_id: 0,
        iteration: 0,
    }
}

/// Trajectory whose actions are exactly the greedy actions of `p`, so every
/// L1 error is zero.
pub fn greedy_traj(p: &PolicyParams, tok: &TokenizerConfig, labels: &[Label], source: Source, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = labels
        .iter()
        .enumerate()
        .map(|(t, &c)| {
            let o: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = tok.decode(&p.greedy_decode(&o)).unwrap();
            Step {
                tokens: tok.encode(&a).unwrap(),
                o,
                a,
                c,
                t: t as u32,
            }
        })
        .collect();
    Trajectory {
        steps,
        source,
        success: true,
        meta: meta(),
    }
}

/// Worst relative error between `grad` and central differences of `f`, over
/// `count` evenly spread coordinates plus a random quarter as many.
pub fn fd_worst(params: &PolicyParams, grad: &hapo_core::policy::Gradient, count: usize, f: impl Fn(&PolicyParams) -> f64) -> (f64, usize) {
    const EPS: f64 = 1e-4;
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
        worst = worst.max((fd - an).abs() / (fd.abs().max(an.abs())).max(1e-6));
    }
    (worst, idx.len())
}
