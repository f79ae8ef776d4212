//! K-window relabeling against the forward-scan oracle, and dataset
//! persistence of relabeled data.

mod common;

use common::relabel_oracle;
use hapo_core::data::{relabel_interventions, relabel_labels, Dataset, EpisodeMeta, Label, Source, Step, Trajectory};
use hapo_core::env::{ContinuousAction, TaskSpec};
use hapo_core::tokenizer::TokenizerConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random takeover mask: a few runs with random onsets and durations.
fn random_mask(rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = rng.random_range(1..80);
    let mut mask = vec![false; n];
    for _ in 0..rng.random_range(0..5) {
        let start = rng.random_range(0..n);
        let len = rng.random_range(1..12);
        for m in mask.iter_mut().skip(start).take(len) {
            *m = true;
        }
    }
    mask
}

/// Raw deployment labels: interventions where the intervenor held control,
/// anything else for the rest.
fn raw(mask: &[bool], rng: &mut ChaCha8Rng) -> Vec<Label> {
    mask.iter()
        .map(|&m| {
            if m {
                Label::Intervention
            } else if rng.random_bool(0.2) {
                Label::Failure
            } else {
                Label::Acceptable
            }
        })
        .collect()
}

fn traj(labels: &[Label], source: Source) -> Trajectory {
    let tok = TokenizerConfig::default();
    let steps = labels
        .iter()
        .enumerate()
        .map(|(t, &c)| {
            let a = ContinuousAction::new(t as f64 / 100.0, -0.5, 1.0);
            Step {
                o: vec![t as f64; 11],
                tokens: tok.encode(&a).unwrap(),
                a,
                c,
                t: t as u32,
            }
        })
        .collect();
    Trajectory {
        steps,
        source,
        success: false,
        meta: EpisodeMeta {
            spec: TaskSpec::default(),
            rollout_id: 1,
            iteration: 1,
        },
    }
}

#[test]
fn thousand_random_patterns_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..1000 {
        let mask = random_mask(&mut rng);
        let labels = raw(&mask, &mut rng);
        for k in [0, 1, 5, 10] {
            let got = relabel_labels(&labels, k);
            assert_eq!(got, relabel_oracle(&mask, k), "case {case}, K={k}, mask {mask:?}");
            assert_eq!(relabel_labels(&got, k), got, "not idempotent: case {case}, K={k}");
        }
    }
}

#[test]
fn documented_windows() {
    let at = |starts: &[(usize, usize)], n: usize| {
        let mut m = vec![false; n];
        for &(s, len) in starts {
            m[s..s + len].iter_mut().for_each(|x| *x = true);
        }
        m
    };
    let failures = |m: &[bool]| -> Vec<usize> {
        relabel_oracle(m, 10)
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == Label::Failure)
            .map(|(i, _)| i)
            .collect()
    };
    assert_eq!(failures(&at(&[(15, 2)], 30)), (5..15).collect::<Vec<_>>());
    assert_eq!(failures(&at(&[(3, 2)], 30)), vec![0, 1, 2]);
    let two = at(&[(12, 5), (20, 1)], 30);
    assert_eq!(failures(&two), (2..12).chain(17..20).collect::<Vec<_>>());
}

#[test]
fn relabeled_dataset_survives_a_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ds = Dataset::new(TokenizerConfig::default(), TaskSpec::default());
    for i in 0..6 {
        if i % 2 == 0 {
            ds.push(traj(&[Label::Acceptable; 7], Source::Expert));
        } else {
            let mask = random_mask(&mut rng);
            let t = traj(&raw(&mask, &mut rng), Source::Interaction);
            ds.push(relabel_interventions(&t, 10).unwrap());
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.jsonl");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, ds);
    let ix = back.index();
    assert_eq!(ix, ds.index());
    assert_eq!(ix.total(), back.len_steps());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn relabel_matches_oracle_and_keeps_payload(
        mask in proptest::collection::vec(any::<bool>(), 0..60),
        k in 0usize..15,
    ) {
        let labels: Vec<Label> = mask
            .iter()
            .map(|&m| if m { Label::Intervention } else { Label::Acceptable })
            .collect();
        let t = traj(&labels, Source::Interaction);
        let r = relabel_interventions(&t, k).unwrap();
        prop_assert_eq!(r.labels(), relabel_oracle(&mask, k));
        prop_assert_eq!(relabel_interventions(&r, k).unwrap(), r.clone());
        for (a, b) in t.steps.iter().zip(&r.steps) {
            prop_assert_eq!((&a.o, a.a, &a.tokens, a.t), (&b.o, b.a, &b.tokens, b.t));
        }
        prop_assert!(relabel_interventions(&traj(&labels, Source::Expert), k).is_err());
    }
}
