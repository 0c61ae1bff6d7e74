mod common;

use common::{dapo_oracle, grpo_oracle, random_group, random_params};
use fgvr_lab::policy::{Rollout, Source};
use fgvr_lab::tapo::{
    collect_group, group_advantages, k3, objective_grad, objective_value, Averaging, Collected,
    TapoConfig, TapoError,
};
use proptest::prelude::*;

fn plain(n1: usize, n2: usize) -> TapoConfig {
    TapoConfig {
        n1,
        n2,
        gamma: 0.0,
        eta1: 0.0,
        eta2: 0.0,
        ..TapoConfig::default()
    }
}

#[test]
fn advantages_of_two_and_four() {
    let a = group_advantages(&[1.0, 0.0]).unwrap();
    let s = 0.5 / (0.5 + 1e-6);
    assert!((a[0] - s).abs() < 1e-15 && (a[1] + s).abs() < 1e-15);
    let a = group_advantages(&[1.0, 1.0, 0.0, 0.0]).unwrap();
    for (x, sign) in a.iter().zip([1.0, 1.0, -1.0, -1.0]) {
        assert!((x - sign * s).abs() < 1e-15);
    }
    assert!(matches!(group_advantages(&[1.0; 3]), Err(TapoError::AllEqualRewards(_))));
}

#[test]
fn identity_ratio_gives_mean_advantage_per_token() {
    let p = random_params(1, 0.4);
    let g = random_group(&p, 2, 5, 0, 0.0);
    let cfg = plain(5, 0);
    let want: f64 = g.rollouts.iter().map(|r| r.advantage * r.len() as f64).sum::<f64>()
        / g.total_tokens() as f64;
    assert!((objective_value(&p, &g, &cfg).unwrap() - want).abs() < 1e-12);
}

#[test]
fn token_and_sequence_averaging_differ_on_lengths_two_and_four() {
    let p = random_params(3, 0.4);
    let mut g = random_group(&p, 4, 2, 0, 0.0);
    let a = p.logprobs(&g.contexts.anchor, &[13, 14]).unwrap();
    let b = p.logprobs(&g.contexts.anchor, &[15, 16, 13, 14]).unwrap();
    g.rollouts[0] = Rollout { tokens: vec![13, 14], old_logps: a, source: Source::Anchor, reward: 1.0, advantage: 1.0 };
    g.rollouts[1] = Rollout { tokens: vec![15, 16, 13, 14], old_logps: b, source: Source::Anchor, reward: 0.0, advantage: -1.0 };
    let tok = objective_value(&p, &g, &plain(2, 0)).unwrap();
    let seq = objective_value(&p, &g, &TapoConfig { averaging: Averaging::Sequence, ..plain(2, 0) }).unwrap();
    // token: (2*1 + 4*(-1)) / 6; sequence: (1 + -1) / 2
    assert!((tok - (-2.0 / 6.0)).abs() < 1e-12, "{tok}");
    assert!(seq.abs() < 1e-12, "{seq}");
}

#[test]
fn negative_equal_to_source_contributes_no_k3() {
    let p = random_params(5, 0.5);
    let mut g = random_group(&p, 6, 4, 0, 0.2);
    g.contexts.negative = g.contexts.anchor.clone();
    let with = TapoConfig { gamma: 0.7, ..plain(4, 0) };
    let a = objective_value(&p, &g, &with).unwrap();
    let b = objective_value(&p, &g, &plain(4, 0)).unwrap();
    assert!((a - b).abs() < 1e-15);
}

#[test]
fn surrogate_ignores_positive_image_swap() {
    // With only the surrogate active, the positive context enters through
    // recorded old log-probs, never through the objective.
    let p = random_params(8, 0.5);
    let g = random_group(&p, 9, 2, 3, 0.1);
    let mut h = g.clone();
    h.contexts.positive = h.contexts.negative.clone();
    let cfg = plain(2, 3);
    assert_eq!(objective_value(&p, &g, &cfg).unwrap(), objective_value(&p, &h, &cfg).unwrap());
}

#[test]
fn positive_advantage_step_raises_token_logprob() {
    let p = random_params(10, 0.3);
    let g = random_group(&p, 11, 4, 0, 0.0);
    let cfg = plain(4, 0);
    let (_, grads) = objective_grad(&p, &g, &cfg).unwrap();
    let mut q = p.clone();
    for (t, gr) in q.fields_mut().into_iter().zip(&grads) {
        for (v, d) in t.data_mut().iter_mut().zip(gr) {
            *v += 1e-3 * d;
        }
    }
    let best = g.rollouts.iter().find(|r| r.advantage > 0.0).unwrap();
    let before: f64 = p.logprobs(&g.contexts.anchor, &best.tokens).unwrap().iter().sum();
    let after: f64 = q.logprobs(&g.contexts.anchor, &best.tokens).unwrap().iter().sum();
    assert!(after > before, "{before} -> {after}");
    assert!(objective_value(&q, &g, &cfg).unwrap() > objective_value(&p, &g, &cfg).unwrap());
}

#[test]
fn reductions_match_dapo_and_grpo_oracles() {
    let base = TapoConfig::default();
    for seed in 0..30 {
        let p = random_params(200 + seed, 0.6);
        let g = random_group(&p, 300 + seed, 6, 0, 0.25);
        let dapo = base.dapo();
        let dapo = TapoConfig { n1: 6, ..dapo };
        let got = objective_value(&p, &g, &dapo).unwrap();
        assert!((got - dapo_oracle(&p, &g, 0.2, 0.28)).abs() <= 1e-10);
        let grpo = TapoConfig { n1: 6, ..base.grpo() };
        let got = objective_value(&p, &g, &grpo).unwrap();
        assert!((got - grpo_oracle(&p, &g, 0.2)).abs() <= 1e-10);
    }
}

fn ro(src: Source, reward: f64) -> Rollout {
    Rollout { tokens: vec![12], old_logps: vec![-1.0], source: src, reward, advantage: 0.0 }
}

#[test]
fn dynamic_sampling_admits_mixed_groups_only() {
    let cfg = TapoConfig { n1: 2, n2: 1, ..TapoConfig::default() };
    let mut attempts = 0;
    let out = collect_group::<(), _>(&cfg, |a| {
        attempts += 1;
        let r = if a < 3 { 0.0 } else { 1.0 };
        let last = if a == 5 { 0.0 } else { r };
        Ok(vec![ro(Source::Anchor, r), ro(Source::Anchor, r), ro(Source::Positive, last)])
    })
    .unwrap();
    match out {
        Collected::Admitted { rollouts, retries_used, first_rewards } => {
            assert_eq!(retries_used, 5);
            assert_eq!(attempts, 6);
            assert_eq!(first_rewards, vec![0.0; 3]);
            let s = rollouts.iter().filter(|r| r.reward == 1.0).count();
            assert!(s > 0 && s < 3);
        }
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn k3_non_negative_and_zero_only_at_one(log_g in -30.0f64..30.0) {
        let v = k3(log_g);
        prop_assert!(v >= 0.0);
        if log_g.abs() > 1e-6 {
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn advantages_centered_with_matching_signs(rewards in prop::collection::vec(prop::bool::ANY, 2..12)) {
        let r: Vec<f64> = rewards.iter().map(|&b| f64::from(b as u8)).collect();
        prop_assume!(r.iter().any(|&x| x != r[0]));
        let a = group_advantages(&r).unwrap();
        let mean_r = r.iter().sum::<f64>() / r.len() as f64;
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        for (x, y) in a.iter().zip(&r) {
            prop_assert_eq!(x.signum(), (y - mean_r).signum());
        }
    }

    #[test]
    fn advantages_permutation_equivariant(rewards in prop::collection::vec(0.0f64..1.0, 2..10), rot in 0usize..10) {
        prop_assume!(rewards.iter().any(|&x| x != rewards[0]));
        let k = rot % rewards.len();
        let mut shifted = rewards.clone();
        shifted.rotate_left(k);
        let mut a = group_advantages(&rewards).unwrap();
        a.rotate_left(k);
        for (x, y) in a.iter().zip(group_advantages(&shifted).unwrap()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn admitted_groups_are_mixed_and_retries_bounded(pattern in prop::collection::vec(0u8..4, 1..30)) {
        let cfg = TapoConfig { n1: 2, n2: 2, ..TapoConfig::default() };
        let out = collect_group::<(), _>(&cfg, |a| {
            let kind = pattern.get(a).copied().unwrap_or(0);
            let r = |i: u8| if kind == 3 { f64::from(i % 2) } else { f64::from(kind.min(1)) };
            Ok(vec![ro(Source::Anchor, r(0)), ro(Source::Anchor, r(1)), ro(Source::Positive, r(2)), ro(Source::Positive, r(3))])
        }).unwrap();
        match out {
            Collected::Admitted { rollouts, retries_used, .. } => {
                let s = rollouts.iter().filter(|r| r.reward == 1.0).count();
                prop_assert!(s > 0 && s < 4);
                prop_assert!(retries_used <= 20);
            }
            Collected::Degenerate { retries_used, .. } => prop_assert_eq!(retries_used, 20),
        }
    }
}
