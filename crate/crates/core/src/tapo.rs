//! Stage two: triplet-augmented policy optimization and its GRPO / DAPO
//! reference baselines.
//!
//! Each group pools `n1` rollouts sampled on the anchor image with `n2`
//! sampled on a positive image of the same class. All rollouts share one
//! group-relative advantage and one clipped surrogate whose ratio numerator is
//! always evaluated on the anchor. A per-token k3 term pushes the policy on
//! the rollout's own image away from the policy on a hard-negative image, and
//! two sequence log-probability terms are weighted by `eta1` and `eta2`.
//!
//! The objective `J` is maximized; updates minimize `-J`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{Adam, AdamConfig};
use crate::policy::{
    sample, token_logprobs, Context, Decoding, PolicyError, PolicyParams, PolicyVars, Rollout,
    SampleConfig, Source, QUERY_OPEN,
};
use crate::reward::reward;
use crate::rng::{derive_seed, substream, StreamRng};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::vocab::Vocab;
use crate::world::{make_triplet, CategorySplit, ImageSample, Triplet, World, WorldError};

#[derive(Debug, Error)]
pub enum TapoError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("advantages undefined: every reward in the group equals {0}")]
    AllEqualRewards(f64),
    #[error("group is empty")]
    EmptyGroup,
    #[error("training pool is empty")]
    EmptyPool,
}

pub type Result<T> = std::result::Result<T, TapoError>;

/// How the per-token terms are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Sum over all tokens of the group divided by the total token count.
    Token,
    /// Per-rollout token mean, then mean over rollouts.
    Sequence,
}

/// Where the inter-class k3 term is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlGranularity {
    Token,
    /// One k3 value on the summed sequence log-ratio, weighted by length.
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapoConfig {
    pub n1: usize,
    pub n2: usize,
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub gamma: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub max_retries: usize,
    /// Resample groups whose rewards are all equal; without it such groups
    /// are dropped after one draw.
    pub dynamic_sampling: bool,
    pub averaging: Averaging,
    pub kl_granularity: KlGranularity,
    /// Upper bound on each k3 value; the term has zero gradient above it.
    pub kl_cap: Option<f64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Triplets drawn per step.
    pub batch: usize,
    /// Gradient updates reusing each step's rollouts.
    pub updates_per_batch: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub grammar_mask: bool,
}

impl Default for TapoConfig {
    fn default() -> Self {
        Self {
            n1: 5,
            n2: 5,
            eps_lo: 0.2,
            eps_hi: 0.28,
            gamma: 0.01,
            eta1: 0.003,
            eta2: 0.003,
            max_retries: 20,
            dynamic_sampling: true,
            averaging: Averaging::Token,
            kl_granularity: KlGranularity::Token,
            kl_cap: Some(10.0),
            lr: 3e-3,
            weight_decay: 1e-2,
            steps: 60,
            batch: 8,
            updates_per_batch: 2,
            temperature: 1.0,
            max_len: 40,
            grammar_mask: false,
        }
    }
}

impl TapoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TapoError::Config(m.to_string()));
        if self.n1 + self.n2 < 2 {
            return bad("n1 + n2 must be at least 2");
        }
        if !(self.eps_lo > 0.0 && self.eps_hi >= self.eps_lo) {
            return bad("need eps_hi >= eps_lo > 0");
        }
        if self.eps_lo >= 1.0 {
            return bad("eps_lo must be below 1");
        }
        if self.gamma < 0.0 || self.eta1 < 0.0 || self.eta2 < 0.0 {
            return bad("gamma, eta1, eta2 must be non-negative");
        }
        if self.kl_cap.is_some_and(|c| !(c > 0.0)) {
            return bad("kl_cap must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.max_len == 0 || self.batch == 0 || self.updates_per_batch == 0 {
            return bad("max_len, batch and updates_per_batch must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    /// Clip-higher, dynamic sampling and token averaging without either
    /// augmentation: all rollouts on the anchor, no k3 or entropy terms.
    pub fn dapo(&self) -> Self {
        Self {
            n1: self.n1 + self.n2,
            n2: 0,
            gamma: 0.0,
            eta1: 0.0,
            eta2: 0.0,
            dynamic_sampling: true,
            averaging: Averaging::Token,
            ..*self
        }
    }

    /// Symmetric clip at `eps_lo`, sequence averaging, no dynamic sampling.
    pub fn grpo(&self) -> Self {
        Self {
            eps_hi: self.eps_lo,
            dynamic_sampling: false,
            averaging: Averaging::Sequence,
            ..self.dapo()
        }
    }

    pub fn group_size(&self) -> usize {
        self.n1 + self.n2
    }

    fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            decoding: Decoding::Sample {
                temperature: self.temperature,
            },
            max_len: self.max_len,
            grammar_mask: self.grammar_mask,
        }
    }
}

/// Log-ratio bound applied before exponentiation when `kl_cap` is set.
pub const KL_LOG_RATIO_MAX: f64 = 20.0;

/// `g - ln g - 1` with `ln g = d`; non-negative, zero iff `d = 0`.
pub fn k3(d: f64) -> f64 {
    d.exp() - d - 1.0
}

/// Group z-score `(r - mean) / (std + 1e-6)` with population std.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(TapoError::EmptyGroup);
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Err(TapoError::AllEqualRewards(rewards[0]));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + 1e-6)).collect())
}

/// Anchor, positive and hard-negative contexts of one triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupContexts {
    pub anchor: Context,
    pub positive: Context,
    pub negative: Context,
}

impl GroupContexts {
    pub fn from_triplet(t: &Triplet) -> Self {
        let ctx = |s: &ImageSample| Context::new(s.feat.clone(), t.query_id);
        Self {
            anchor: ctx(&t.anchor),
            positive: ctx(&t.positive),
            negative: ctx(&t.negative),
        }
    }

    pub fn source(&self, s: Source) -> &Context {
        match s {
            Source::Anchor => &self.anchor,
            Source::Positive => &self.positive,
        }
    }
}

/// An admitted group: `n1` anchor rollouts then `n2` positive rollouts, with
/// rewards and advantages filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub contexts: GroupContexts,
    pub truth: String,
    pub rollouts: Vec<Rollout>,
    pub retries_used: usize,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    pub fn successes(&self) -> usize {
        self.rollouts.iter().filter(|r| r.reward > 0.5).count()
    }

    pub fn total_tokens(&self) -> usize {
        self.rollouts.iter().map(Rollout::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Collected {
    Admitted {
        rollouts: Vec<Rollout>,
        retries_used: usize,
        first_rewards: Vec<f64>,
    },
    Degenerate {
        retries_used: usize,
        first_rewards: Vec<f64>,
    },
}

/// Draws whole groups via `draw(attempt)` until one mixes successes and
/// failures. With dynamic sampling that allows `max_retries` redraws after
/// the first; otherwise a uniform first draw is returned as degenerate.
/// Advantages of an admitted group are filled in.
pub fn collect_group<E, F>(cfg: &TapoConfig, mut draw: F) -> std::result::Result<Collected, E>
where
    F: FnMut(usize) -> std::result::Result<Vec<Rollout>, E>,
{
    let budget = if cfg.dynamic_sampling { cfg.max_retries } else { 0 };
    let mut first_rewards = Vec::new();
    for attempt in 0..=budget {
        let mut rollouts = draw(attempt)?;
        debug_assert_eq!(rollouts.len(), cfg.group_size());
        debug_assert!(rollouts
            .iter()
            .enumerate()
            .all(|(i, r)| (r.source == Source::Anchor) == (i < cfg.n1)));
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        if attempt == 0 {
            first_rewards = rewards.clone();
        }
        if let Ok(adv) = group_advantages(&rewards) {
            for (r, a) in rollouts.iter_mut().zip(adv) {
                r.advantage = a;
            }
            return Ok(Collected::Admitted {
                rollouts,
                retries_used: attempt,
                first_rewards,
            });
        }
    }
    Ok(Collected::Degenerate {
        retries_used: budget,
        first_rewards,
    })
}

/// Samples `n1` rollouts on the anchor and `n2` on the positive and scores
/// them against `truth`.
pub fn draw_group(
    params: &PolicyParams,
    contexts: &GroupContexts,
    truth: &str,
    vocab: &Vocab,
    cfg: &TapoConfig,
    rng: &mut StreamRng,
) -> std::result::Result<Vec<Rollout>, PolicyError> {
    let scfg = cfg.sample_config();
    let mut out = Vec::with_capacity(cfg.group_size());
    for i in 0..cfg.group_size() {
        let src = if i < cfg.n1 { Source::Anchor } else { Source::Positive };
        let mut r = sample(params, contexts.source(src), &scfg, None, src, rng)?;
        r.reward = reward(truth, &r.tokens, vocab);
        out.push(r);
    }
    Ok(out)
}

/// Tape values gathered while building the objective.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurrogateStats {
    pub tokens: usize,
    pub ratio_sum: f64,
    pub clipped: usize,
}

/// Builds `J` for one admitted group on `tape`.
pub fn tapo_objective(
    tape: &mut Tape,
    vars: &PolicyVars,
    group: &RolloutGroup,
    cfg: &TapoConfig,
) -> Result<(Var, SurrogateStats)> {
    if group.rollouts.is_empty() {
        return Err(TapoError::EmptyGroup);
    }
    let need_src = cfg.gamma != 0.0 || cfg.eta1 != 0.0;
    let need_neg = cfg.gamma != 0.0 || cfg.eta2 != 0.0;
    let mut stats = SurrogateStats::default();
    let mut total: Option<Var> = None;
    for ro in &group.rollouts {
        let n = ro.len();
        let lp_anchor = token_logprobs(tape, vars, &group.contexts.anchor, &ro.tokens)?;
        let old = tape.constant(Tensor::vector(ro.old_logps.clone()));
        let adv = tape.constant(Tensor::vector(vec![ro.advantage; n]));
        let log_ratio = tape.sub(lp_anchor, old)?;
        let ratio = tape.exp(log_ratio);
        let unclipped = tape.mul(ratio, adv)?;
        let clipped_ratio = tape.clip(ratio, 1.0 - cfg.eps_lo, 1.0 + cfg.eps_hi)?;
        let clipped = tape.mul(clipped_ratio, adv)?;
        let mut term = tape.minimum(unclipped, clipped)?;

        for &r in tape.value(ratio).data() {
            stats.ratio_sum += r;
            if r < 1.0 - cfg.eps_lo || r > 1.0 + cfg.eps_hi {
                stats.clipped += 1;
            }
        }
        stats.tokens += n;

        let lp_src = if !need_src {
            None
        } else if ro.source == Source::Anchor {
            Some(lp_anchor)
        } else {
            Some(token_logprobs(tape, vars, &group.contexts.positive, &ro.tokens)?)
        };
        let lp_neg = if need_neg {
            Some(token_logprobs(tape, vars, &group.contexts.negative, &ro.tokens)?)
        } else {
            None
        };
        let mut seq_kl = None;
        if cfg.gamma != 0.0 {
            let (src, neg) = (lp_src.expect("src"), lp_neg.expect("neg"));
            match cfg.kl_granularity {
                KlGranularity::Token => {
                    let mut d = tape.sub(src, neg)?;
                    if cfg.kl_cap.is_some() {
                        // above the cap anyway; keeps exp finite
                        d = tape.clip(d, f64::NEG_INFINITY, KL_LOG_RATIO_MAX)?;
                    }
                    let g = tape.exp(d);
                    let k = tape.sub(g, d)?;
                    let mut k = tape.add_scalar(k, -1.0);
                    if let Some(cap) = cfg.kl_cap {
                        k = tape.clip(k, 0.0, cap)?;
                    }
                    let k = tape.scale(k, cfg.gamma);
                    term = tape.add(term, k)?;
                }
                KlGranularity::Sequence => {
                    let s = tape.sum(src);
                    let q = tape.sum(neg);
                    let mut d = tape.sub(s, q)?;
                    if cfg.kl_cap.is_some() {
                        d = tape.clip(d, f64::NEG_INFINITY, KL_LOG_RATIO_MAX)?;
                    }
                    let g = tape.exp(d);
                    let k = tape.sub(g, d)?;
                    let mut k = tape.add_scalar(k, -1.0);
                    if let Some(cap) = cfg.kl_cap {
                        k = tape.clip(k, 0.0, cap)?;
                    }
                    seq_kl = Some(tape.scale(k, cfg.gamma * n as f64));
                }
            }
        }
        if cfg.eta1 != 0.0 {
            let h = tape.scale(lp_src.expect("src"), -cfg.eta1);
            term = tape.add(term, h)?;
        }
        if cfg.eta2 != 0.0 {
            let h = tape.scale(lp_neg.expect("neg"), -cfg.eta2);
            term = tape.add(term, h)?;
        }
        let mut s = tape.sum(term);
        if let Some(k) = seq_kl {
            s = tape.add(s, k)?;
        }
        if cfg.averaging == Averaging::Sequence {
            s = tape.scale(s, 1.0 / n as f64);
        }
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let denom = match cfg.averaging {
        Averaging::Token => group.total_tokens(),
        Averaging::Sequence => group.rollouts.len(),
    } as f64;
    let j = tape.scale(total.expect("non-empty"), 1.0 / denom);
    Ok((j, stats))
}

/// `J` evaluated without keeping the tape.
pub fn objective_value(params: &PolicyParams, group: &RolloutGroup, cfg: &TapoConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let (j, _) = tapo_objective(&mut tape, &vars, group, cfg)?;
    Ok(tape.value(j).data()[0])
}

/// Gradient of `J` with respect to every parameter block.
pub fn objective_grad(
    params: &PolicyParams,
    group: &RolloutGroup,
    cfg: &TapoConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let (j, _) = tapo_objective(&mut tape, &vars, group, cfg)?;
    let grads = tape.backward(j)?;
    Ok((tape.value(j).data()[0], vars.grads(&tape, &grads)))
}

/// Few-shot pools and splits of every world, plus the shared vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub worlds: &'a [World],
    pub splits: &'a [CategorySplit],
    pub shots: &'a [Vec<ImageSample>],
    pub vocab: &'a Vocab,
}

impl TrainData<'_> {
    fn pool_size(&self) -> usize {
        self.shots.iter().map(Vec::len).sum()
    }

    fn pick(&self, mut i: usize) -> (usize, &ImageSample) {
        for (w, s) in self.shots.iter().enumerate() {
            if i < s.len() {
                return (w, &s[i]);
            }
            i -= s.len();
        }
        unreachable!("index inside pool")
    }

    /// `batch` triplets for `step`, anchors uniform over the pooled shots.
    pub fn triplets(&self, batch: usize, seed: u64, step: u64) -> Result<Vec<(usize, Triplet)>> {
        let n = self.pool_size();
        if n == 0 {
            return Err(TapoError::EmptyPool);
        }
        let mut rng = substream(seed, "tapo", "batch", step);
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (w, anchor) = self.pick(rng.random_range(0..n));
            let t = make_triplet(
                anchor,
                &self.shots[w],
                &self.worlds[w],
                &self.splits[w].seen,
                QUERY_OPEN,
                &mut rng,
            )?;
            out.push((w, t));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub admitted: usize,
    pub degenerate: usize,
    pub nonfinite: usize,
    pub skipped: bool,
    /// Mean reward over the first draw of every group, before any resampling.
    pub mean_reward: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl_mean: f64,
    pub entropy_mean: f64,
    pub successes: Vec<usize>,
    pub retries: Vec<usize>,
    pub group_size: usize,
    pub objective: f64,
}

/// Optimizer state plus the step counter; enough to resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TapoTrainer {
    pub cfg: TapoConfig,
    pub opt: Adam,
    pub step: u64,
}

impl TapoTrainer {
    pub fn new(cfg: TapoConfig, params: &PolicyParams) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            opt: Adam::new(AdamConfig::adamw(cfg.lr, cfg.weight_decay), &params.block_sizes()),
            step: 0,
        })
    }

    /// Collects a batch of groups under the current parameters, then applies
    /// `updates_per_batch` AdamW updates on `-mean(J)` over admitted groups.
    /// Groups whose objective is non-finite are excluded and returned as JSON.
    pub fn step(
        &mut self,
        params: &mut PolicyParams,
        data: &TrainData,
        seed: u64,
    ) -> Result<(StepStats, Vec<serde_json::Value>)> {
        let cfg = self.cfg;
        let step = self.step;
        let triplets = data.triplets(cfg.batch, seed, step)?;
        let step_seed = derive_seed(seed, "tapo", "groups", step);

        let mut stats = StepStats {
            step,
            group_size: cfg.group_size(),
            ..Default::default()
        };
        let mut groups = Vec::new();
        let mut first = Vec::new();
        for (i, (w, t)) in triplets.iter().enumerate() {
            let contexts = GroupContexts::from_triplet(t);
            let truth = data.worlds[*w].subs[t.truth].name_text();
            let group_seed = derive_seed(step_seed, "tapo", "group", i as u64);
            let collected = collect_group(&cfg, |attempt| {
                let mut rng = substream(group_seed, "tapo", "attempt", attempt as u64);
                draw_group(params, &contexts, &truth, data.vocab, &cfg, &mut rng)
            })?;
            match collected {
                Collected::Admitted {
                    rollouts,
                    retries_used,
                    first_rewards,
                } => {
                    first.extend(first_rewards);
                    let g = RolloutGroup {
                        contexts,
                        truth,
                        rollouts,
                        retries_used,
                    };
                    stats.successes.push(g.successes());
                    stats.retries.push(retries_used);
                    groups.push(g);
                }
                Collected::Degenerate {
                    retries_used,
                    first_rewards,
                } => {
                    first.extend(first_rewards);
                    stats.degenerate += 1;
                    stats.retries.push(retries_used);
                }
            }
        }
        stats.mean_reward = mean(&first);

        let (mut kl_sum, mut ent_sum, mut tok) = (0.0, 0.0, 0usize);
        for g in &groups {
            for ro in &g.rollouts {
                let neg = params.logprobs(&g.contexts.negative, &ro.tokens)?;
                for (s, q) in ro.old_logps.iter().zip(&neg) {
                    kl_sum += k3(s - q);
                    ent_sum -= s;
                }
                tok += ro.len();
            }
        }
        stats.kl_mean = kl_sum / tok.max(1) as f64;
        stats.entropy_mean = ent_sum / tok.max(1) as f64;

        let mut dumps = Vec::new();
        let mut live: Vec<bool> = vec![true; groups.len()];
        let (mut ratio_sum, mut clipped, mut ratio_tok) = (0.0, 0usize, 0usize);
        for _ in 0..cfg.updates_per_batch {
            let n_live = live.iter().filter(|&&l| l).count();
            if n_live == 0 {
                break;
            }
            let mut acc: Option<Vec<Vec<f64>>> = None;
            let mut obj = 0.0;
            let mut contributing = 0usize;
            for (gi, g) in groups.iter().enumerate() {
                if !live[gi] {
                    continue;
                }
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape);
                let (j, s) = tapo_objective(&mut tape, &vars, g, &cfg)?;
                let value = tape.value(j).data()[0];
                let grads = if value.is_finite() {
                    let gr = tape.backward(j)?;
                    Some(vars.grads(&tape, &gr))
                } else {
                    None
                };
                match grads {
                    Some(gr) if gr.iter().flatten().all(|x| x.is_finite()) => {
                        ratio_sum += s.ratio_sum;
                        clipped += s.clipped;
                        ratio_tok += s.tokens;
                        obj += value;
                        contributing += 1;
                        match acc.as_mut() {
                            None => acc = Some(gr),
                            Some(a) => {
                                for (x, y) in a.iter_mut().zip(gr) {
                                    x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                                }
                            }
                        }
                    }
                    _ => {
                        log::warn!("step {step}: non-finite objective in group {gi}, excluded");
                        live[gi] = false;
                        stats.nonfinite += 1;
                        dumps.push(serde_json::json!({
                            "step": step,
                            "group": gi,
                            "objective": value.to_string(),
                            "group_data": g,
                        }));
                    }
                }
            }
            let Some(mut grad) = acc else { break };
            // minimize -mean(J)
            let scale = -1.0 / contributing as f64;
            grad.iter_mut().flatten().for_each(|x| *x *= scale);
            params.apply(&mut self.opt, &grad);
            stats.objective = obj / contributing as f64;
        }
        stats.admitted = live.iter().filter(|&&l| l).count();
        stats.skipped = stats.admitted == 0;
        if stats.skipped {
            log::info!("step {step}: no admitted groups, update skipped");
        }
        stats.mean_ratio = if ratio_tok > 0 { ratio_sum / ratio_tok as f64 } else { 1.0 };
        stats.clip_fraction = if ratio_tok > 0 { clipped as f64 / ratio_tok as f64 } else { 0.0 };
        self.step += 1;
        Ok((stats, dumps))
    }

    /// Serialized optimizer state and step counter.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = self.step.to_le_bytes().to_vec();
        out.extend(self.opt.to_bytes());
        out
    }

    pub fn from_state_bytes(cfg: TapoConfig, bytes: &[u8]) -> Option<Self> {
        let (head, rest) = bytes.split_first_chunk::<8>()?;
        Some(Self {
            cfg,
            opt: Adam::from_bytes(AdamConfig::adamw(cfg.lr, cfg.weight_decay), rest)?,
            step: u64::from_le_bytes(*head),
        })
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
