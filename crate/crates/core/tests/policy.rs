//! The token policy against a naive loop-based forward pass, and its
//! decoders against each other.

mod common;

use common::{perturbed, small_dims};
use hapo_core::policy::{PolicyDims, PolicyParams};
use hapo_core::tokenizer::ActionTokens;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Log-probabilities computed straight from the flat parameter buffer:
/// `w1 b1 w2 b2 embed` followed by `dims` heads of `W b`.
fn naive_log_probs(p: &PolicyParams, obs: &[f64], tokens: &[u32]) -> Vec<f64> {
    let d: PolicyDims = *p.dims();
    let v = p.as_slice();
    let mut at = 0usize;
    let mut take = |n: usize| {
        let s = at;
        at += n;
        s
    };
    let w1 = take(d.hidden * d.obs_dim);
    let b1 = take(d.hidden);
    let w2 = take(d.hidden * d.hidden);
    let b2 = take(d.hidden);
    let emb = take(d.bins * d.embed);
    let heads: Vec<(usize, usize)> = (0..d.dims)
        .map(|_| (take(d.bins * (d.hidden + d.embed)), take(d.bins)))
        .collect();
    assert_eq!(at, v.len());

    let mut h1 = vec![0.0; d.hidden];
    for i in 0..d.hidden {
        let mut z = v[b1 + i];
        for j in 0..d.obs_dim {
            z += v[w1 + i * d.obs_dim + j] * obs[j];
        }
        h1[i] = z.tanh();
    }
    let mut h2 = vec![0.0; d.hidden];
    for i in 0..d.hidden {
        let mut z = v[b2 + i];
        for j in 0..d.hidden {
            z += v[w2 + i * d.hidden + j] * h1[j];
        }
        h2[i] = z.tanh();
    }
    let mut out = Vec::new();
    for (dim, &(hw, hb)) in heads.iter().enumerate() {
        let mut x = h2.clone();
        if dim == 0 {
            x.extend(std::iter::repeat_n(0.0, d.embed));
        } else {
            let prev = tokens[dim - 1] as usize;
            x.extend_from_slice(&v[emb + prev * d.embed..emb + (prev + 1) * d.embed]);
        }
        let logits: Vec<f64> = (0..d.bins)
            .map(|k| {
                let mut z = v[hb + k];
                for (j, xj) in x.iter().enumerate() {
                    z += v[hw + k * x.len() + j] * xj;
                }
                z
            })
            .collect();
        let mut denom = 0.0;
        for z in &logits {
            denom += z.exp();
        }
        out.push(logits[tokens[dim] as usize] - denom.ln());
    }
    out
}

fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

#[test]
fn forward_pass_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..50 {
        let p = PolicyParams::init(case, small_dims());
        let o = random_obs(&mut rng, 11);
        let t: Vec<u32> = (0..3).map(|_| rng.random_range(0..16)).collect();
        let got = p.log_prob(&o, &ActionTokens(t.clone())).unwrap();
        let want = naive_log_probs(&p, &o, &t);
        for (a, b) in got.per_dim.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "case {case}: {a} vs {b}");
            assert!(*a <= 0.0);
        }
        assert!((got.total - got.per_dim.iter().sum::<f64>()).abs() < 1e-12);
    }
}

#[test]
fn greedy_agrees_with_cold_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let p = perturbed(&PolicyParams::init(case, small_dims()), case, 0.5);
        let o = random_obs(&mut rng, 11);
        let greedy = p.greedy_decode(&o);
        assert_eq!(greedy, p.greedy_decode(&o));
        assert_eq!(p.sample_tempered(&o, 1e-6, &mut rng), greedy, "case {case}");
    }
}

#[test]
fn zero_weights_sample_uniformly() {
    let dims = PolicyDims {
        bins: 4,
        ..small_dims()
    };
    let p = PolicyParams::zeros(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let mut counts = [[0usize; 4]; 3];
    for _ in 0..n {
        let t = p.sample(&[0.3; 11], &mut rng);
        for (d, tok) in t.0.iter().enumerate() {
            counts[d][*tok as usize] += 1;
        }
    }
    for row in counts {
        let expected = n as f64 / 4.0;
        let chi2: f64 = row.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        // 3 degrees of freedom, 99.9th percentile.
        assert!(chi2 < 16.27, "chi-square {chi2} for {row:?}");
        for c in row {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.02);
        }
    }
    assert_eq!(p.greedy_decode(&[0.3; 11]).0, vec![0, 0, 0]);
}

#[test]
fn binary_uniform_policy() {
    let dims = PolicyDims {
        bins: 2,
        ..small_dims()
    };
    let p = PolicyParams::zeros(dims);
    let r = p.log_prob(&[0.0; 11], &ActionTokens(vec![1, 0, 1])).unwrap();
    for lp in r.per_dim {
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn same_rng_seed_same_tokens() {
    let p = PolicyParams::init(4, small_dims());
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| p.sample(&[0.1; 11], &mut rng)).collect::<Vec<_>>()
    };
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
}

#[test]
fn ascent_step_raises_log_prob() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let p = PolicyParams::init(case, small_dims());
        let o = random_obs(&mut rng, 11);
        let t = ActionTokens((0..3).map(|_| rng.random_range(0..16)).collect());
        let g = p.grad_log_prob(&o, &t).unwrap();
        let mut q = p.clone();
        for (v, gi) in q.as_mut_slice().iter_mut().zip(&g.0) {
            *v += 1e-3 * gi;
        }
        assert!(q.log_prob(&o, &t).unwrap().total > p.log_prob(&o, &t).unwrap().total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Conditional distributions are normalized for any weights and prefix.
    #[test]
    fn distributions_sum_to_one(seed in 0u64..100_000, scale in 0.1f64..5.0, t0 in 0u32..16, t1 in 0u32..16) {
        let p = perturbed(&PolicyParams::zeros(small_dims()), seed, scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = random_obs(&mut rng, 11);
        for dist in p.distributions(&o, &ActionTokens(vec![t0, t1, 0])).unwrap() {
            prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    /// Adding a constant to every logit of a head changes nothing.
    #[test]
    fn bias_shift_invariance(seed in 0u64..100_000, shift in -20.0f64..20.0, d in 0usize..3) {
        let p = PolicyParams::init(seed, small_dims());
        let mut q = p.clone();
        for b in q.head_bias_mut(d) {
            *b += shift;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = random_obs(&mut rng, 11);
        let t = ActionTokens((0..3).map(|_| rng.random_range(0..16)).collect());
        let a = p.log_prob(&o, &t).unwrap().total;
        let b = q.log_prob(&o, &t).unwrap().total;
        prop_assert!((a - b).abs() < 1e-9);
    }
}
