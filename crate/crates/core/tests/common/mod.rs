#![allow(dead_code)]

use std::path::Path;

use fgvr_lab::config::ExperimentConfig;
use fgvr_lab::policy::{Context, PolicyDims, PolicyParams, Rollout, Source, QUERY_OPEN};
use fgvr_lab::rng::seeded;
use fgvr_lab::tapo::{GroupContexts, RolloutGroup};
use fgvr_lab::world::WorldSpec;
use rand::Rng;
use rand_distr::StandardNormal;

pub const D_IMG: usize = 4;

pub fn small_dims() -> PolicyDims {
    PolicyDims {
        vocab: 17,
        d_tok: 3,
        d_img: D_IMG,
        n_queries: 2,
        d_h: 5,
    }
}

pub fn random_params(seed: u64, scale: f64) -> PolicyParams {
    let mut rng = seeded(seed);
    let mut p = PolicyParams::zeros(small_dims());
    for t in p.fields_mut() {
        for v in t.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * scale;
        }
    }
    p
}

pub fn random_ctx(rng: &mut impl Rng) -> Context {
    Context::new((0..D_IMG).map(|_| rng.sample(StandardNormal)).collect(), QUERY_OPEN)
}

pub fn random_tokens(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Group with random contexts and tokens. `old_logps` are the current
/// log-probs on the rollout's own image shifted by per-token noise, so ratios
/// differ from one.
pub fn random_group(
    params: &PolicyParams,
    seed: u64,
    n1: usize,
    n2: usize,
    noise: f64,
) -> RolloutGroup {
    let mut rng = seeded(seed);
    let contexts = GroupContexts {
        anchor: random_ctx(&mut rng),
        positive: random_ctx(&mut rng),
        negative: random_ctx(&mut rng),
    };
    let n = n1 + n2;
    let mut rewards: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
    if rewards.iter().all(|&r| r == rewards[0]) {
        rewards[0] = 1.0 - rewards[0];
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let rollouts = (0..n)
        .map(|i| {
            let source = if i < n1 { Source::Anchor } else { Source::Positive };
            let len = rng.random_range(1..=6);
            let tokens = random_tokens(&mut rng, params.dims.vocab, len);
            let ctx = match source {
                Source::Anchor => &contexts.anchor,
                Source::Positive => &contexts.positive,
            };
            let old_logps = params
                .logprobs(ctx, &tokens)
                .unwrap()
                .into_iter()
                .map(|l| {
                    let z: f64 = rng.sample(StandardNormal);
                    l + noise * z
                })
                .collect();
            Rollout {
                tokens,
                old_logps,
                source,
                reward: rewards[i],
                advantage: (rewards[i] - mean) / (std + 1e-6),
            }
        })
        .collect();
    RolloutGroup {
        contexts,
        truth: "truth".into(),
        rollouts,
        retries_used: 0,
    }
}

/// Default world shape, scaled down for quick pipeline tests.
pub fn quick_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.worlds = (0..2)
        .map(|i| WorldSpec {
            n_super: 3,
            subs_per_super: 4,
            feat_dim: 8,
            intra_sigma: 0.05,
            inter_alpha: 0.5,
            seed: 77 + i,
        })
        .collect();
    cfg.seeds = vec![5];
    cfg.policy.d_h = 24;
    cfg.sft.epochs = 6;
    cfg.tapo.tapo.steps = 6;
    cfg.tapo.tapo.batch = 3;
    cfg.tapo.tapo.updates_per_batch = 1;
    cfg.tapo.checkpoint_every = 2;
    cfg.eval.per_class = 1;
    cfg.analysis.probe.epochs = 5;
    cfg.analysis.probe_train_per_class = 3;
    cfg.analysis.probe_test_per_class = 2;
    cfg.output_dir = out.to_path_buf();
    cfg
}

/// Clipped surrogate of one rollout, re-derived from plain log-probs.
fn surrogate_terms(params: &PolicyParams, g: &RolloutGroup, ro: &Rollout, lo: f64, hi: f64, adv: f64) -> Vec<f64> {
    let lp = params.logprobs(&g.contexts.anchor, &ro.tokens).unwrap();
    lp.iter()
        .zip(&ro.old_logps)
        .map(|(l, o)| {
            let r = (l - o).exp();
            (r * adv).min(r.clamp(1.0 - lo, 1.0 + hi) * adv)
        })
        .collect()
}

fn oracle_advantages(g: &RolloutGroup) -> Vec<f64> {
    let r: Vec<f64> = g.rollouts.iter().map(|x| x.reward).collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    r.iter().map(|x| (x - mean) / (var.sqrt() + 1e-6)).collect()
}

/// DAPO objective: clip-higher surrogate, token-level mean over the group.
pub fn dapo_oracle(params: &PolicyParams, g: &RolloutGroup, lo: f64, hi: f64) -> f64 {
    let adv = oracle_advantages(g);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (ro, a) in g.rollouts.iter().zip(adv) {
        let t = surrogate_terms(params, g, ro, lo, hi, a);
        count += t.len();
        sum += t.iter().sum::<f64>();
    }
    sum / count as f64
}

/// GRPO objective without reference KL: symmetric clip, per-rollout token
/// mean, then mean over rollouts.
pub fn grpo_oracle(params: &PolicyParams, g: &RolloutGroup, eps: f64) -> f64 {
    let adv = oracle_advantages(g);
    let per: Vec<f64> = g
        .rollouts
        .iter()
        .zip(adv)
        .map(|(ro, a)| {
            let t = surrogate_terms(params, g, ro, eps, eps, a);
            t.iter().sum::<f64>() / t.len() as f64
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// Flattened parameters and their inverse.
pub fn flatten(p: &PolicyParams) -> Vec<f64> {
    p.fields().iter().flat_map(|t| t.data().to_vec()).collect()
}

pub fn unflatten(template: &PolicyParams, x: &[f64]) -> PolicyParams {
    let mut q = template.clone();
    let mut off = 0;
    for t in q.fields_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&x[off..off + n]);
        off += n;
    }
    q
}
