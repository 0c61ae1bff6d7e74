//! Stage one: templated chain-of-thought targets, quality filters, and
//! teacher-forced fine-tuning.
//!
//! A full target reads
//!
//! ```text
//! <think> <analysis> d3+ d7- </analysis>
//!   <options> n1 n2 n3 n4 </options>
//!   <comparison> mod_truth vs mod_rival </comparison>
//!   <prediction> name </prediction> </think>
//! <answer> name </answer> <eos>
//! ```
//!
//! where the analysis names the two strongest feature dimensions of the image
//! and the options list the truth plus its nearest seen siblings.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{Adam, AdamConfig};
use crate::policy::{token_logprobs, Context, PolicyError, PolicyParams, QUERY_OPEN};
use crate::reward::normalize_text;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tape;
use crate::vocab::{Tag, TokenId, Vocab, VocabError, EOS};
use crate::world::{CategorySplit, ImageSample, World, WorldError};

pub const COMPARE_TOKEN: &str = "vs";
pub const MAX_CANDIDATES: usize = 4;

#[derive(Debug, Error)]
pub enum SftError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("no training records")]
    NoRecords,
    #[error("sample of category {0} is not a seen category")]
    NotSeen(usize),
    #[error("loss diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Box<PolicyParams>,
    },
}

pub type Result<T> = std::result::Result<T, SftError>;

pub fn feature_token(dim: usize, positive: bool) -> String {
    format!("d{dim}{}", if positive { '+' } else { '-' })
}

/// Vocabulary shared by every world: feature tokens, the comparison filler,
/// then each world's name words.
pub fn build_vocab(worlds: &[World]) -> std::result::Result<Vocab, VocabError> {
    let feat_dim = worlds.iter().map(|w| w.spec.feat_dim).max().unwrap_or(0);
    let mut words: Vec<String> = Vec::new();
    for j in 0..feat_dim {
        words.push(feature_token(j, true));
        words.push(feature_token(j, false));
    }
    words.push(COMPARE_TOKEN.to_string());
    for w in worlds {
        words.extend(w.super_names.iter().cloned());
    }
    let n_mod = worlds.iter().map(|w| w.spec.subs_per_super).max().unwrap_or(0);
    words.extend((0..n_mod).map(crate::world::modifier_word));
    Vocab::with_words(words)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CotStyle {
    /// Full reasoning template followed by the answer.
    Full,
    /// Only `<answer> name </answer> <eos>`.
    AnswerOnly,
}

/// Simulated teacher noise: with probability `error_rate` a synthesized record
/// is corrupted, either by a wrong prediction or by dropping the truth from the
/// options. Rejected records are redrawn up to `max_resamples` times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub error_rate: f64,
    pub max_resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTRecord {
    pub world: usize,
    pub sub_id: usize,
    pub ctx: Context,
    pub target: Vec<TokenId>,
    pub target_text: String,
    pub candidates: Vec<String>,
    pub predicted: String,
    pub truth: String,
    /// Set when the super-category had too few seen siblings and the options
    /// were padded from other super-categories.
    pub padded: bool,
}

/// Options for `sub`: the truth plus up to three nearest seen siblings, padded
/// from the nearest seen categories of other supers when fewer than one sibling
/// exists. Returned in similarity order with the truth first.
pub fn candidate_set(world: &World, sub: usize, split: &CategorySplit) -> Result<(Vec<usize>, bool)> {
    let sup = world.sub(sub)?.super_id;
    let siblings: Vec<usize> = split
        .seen
        .iter()
        .copied()
        .filter(|&c| world.subs[c].super_id == sup)
        .collect();
    let mut out = vec![sub];
    out.extend(world.nearest(sub, &siblings, MAX_CANDIDATES - 1)?);
    let padded = out.len() < 2;
    if padded {
        let others: Vec<usize> = split
            .seen
            .iter()
            .copied()
            .filter(|&c| world.subs[c].super_id != sup)
            .collect();
        out.extend(world.nearest(sub, &others, 2 - out.len())?);
    }
    Ok((out, padded))
}

/// The two dimensions of largest magnitude, as signed feature tokens.
pub fn analysis_tokens(feat: &[f64]) -> Vec<String> {
    let mut dims: Vec<usize> = (0..feat.len()).collect();
    dims.sort_by(|&a, &b| feat[b].abs().total_cmp(&feat[a].abs()).then(a.cmp(&b)));
    dims.into_iter()
        .take(2)
        .map(|j| feature_token(j, feat[j] >= 0.0))
        .collect()
}

fn push_region(out: &mut Vec<String>, tag: Tag, body: &[String]) {
    out.push(tag.open());
    out.extend(body.iter().cloned());
    out.push(tag.close());
}

/// Builds one record from an image of a seen category. `error_rate` is the
/// chance the simulated teacher corrupts it.
pub fn synthesize_cot(
    sample: &ImageSample,
    world: &World,
    split: &CategorySplit,
    vocab: &Vocab,
    style: CotStyle,
    error_rate: f64,
    rng: &mut impl Rng,
) -> Result<CoTRecord> {
    if !split.is_seen(sample.sub_id) {
        return Err(SftError::NotSeen(sample.sub_id));
    }
    let truth = world.sub(sample.sub_id)?;
    let (mut cands, padded) = candidate_set(world, sample.sub_id, split)?;
    let mut predicted = truth.id;
    if rng.random::<f64>() < error_rate && cands.len() > 1 {
        let other = cands[rng.random_range(1..cands.len())];
        if rng.random::<bool>() {
            predicted = other;
        } else {
            // the truth drops out of the options; a further sibling replaces it
            cands[0] = world
                .nearest(sample.sub_id, &split.seen, MAX_CANDIDATES + 1)?
                .into_iter()
                .find(|c| !cands.contains(c))
                .unwrap_or(other);
        }
    }
    let rival = cands
        .iter()
        .copied()
        .find(|&c| c != truth.id)
        .unwrap_or(truth.id);
    let mut shown = cands.clone();
    shown.shuffle(rng);

    let name_of = |c: usize| world.subs[c].name.clone();
    let pred_name = name_of(predicted);
    let mut toks: Vec<String> = Vec::new();
    if style == CotStyle::Full {
        let mut think = Vec::new();
        push_region(&mut think, Tag::Analysis, &analysis_tokens(&sample.feat));
        let opts: Vec<String> = shown.iter().flat_map(|&c| name_of(c)).collect();
        push_region(&mut think, Tag::Options, &opts);
        let cmp = vec![
            world.subs[predicted].name[1].clone(),
            COMPARE_TOKEN.to_string(),
            world.subs[if rival == predicted { truth.id } else { rival }].name[1].clone(),
        ];
        push_region(&mut think, Tag::Comparison, &cmp);
        push_region(&mut think, Tag::Prediction, &pred_name);
        push_region(&mut toks, Tag::Think, &think);
    }
    push_region(&mut toks, Tag::Answer, &pred_name);
    toks.push(EOS.to_string());
    let target_text = toks.join(" ");
    Ok(CoTRecord {
        world: world.index,
        sub_id: truth.id,
        ctx: Context::new(sample.feat.clone(), QUERY_OPEN),
        target: vocab.encode(&target_text)?,
        target_text,
        candidates: cands.iter().map(|&c| world.subs[c].name_text()).collect(),
        predicted: pred_name.join(" "),
        truth: truth.name_text(),
        padded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    ExactMatchFail,
    CandidateMiss,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::ExactMatchFail => "EXACT_MATCH_FAIL",
            RejectReason::CandidateMiss => "CANDIDATE_MISS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub world: usize,
    pub sub_id: usize,
    pub reason: RejectReason,
}

/// First failing rule, if any: exact match of prediction and truth, then
/// membership of the prediction among the options.
pub fn check_record(r: &CoTRecord) -> Option<RejectReason> {
    let pred = normalize_text(&r.predicted);
    if pred != normalize_text(&r.truth) {
        return Some(RejectReason::ExactMatchFail);
    }
    if !r.candidates.iter().any(|c| normalize_text(c) == pred) {
        return Some(RejectReason::CandidateMiss);
    }
    None
}

pub fn filter_cot(records: Vec<CoTRecord>) -> (Vec<CoTRecord>, Vec<Rejection>) {
    let mut kept = Vec::with_capacity(records.len());
    let mut rejected = Vec::new();
    for r in records {
        match check_record(&r) {
            None => kept.push(r),
            Some(reason) => rejected.push(Rejection {
                world: r.world,
                sub_id: r.sub_id,
                reason,
            }),
        }
    }
    (kept, rejected)
}

pub fn rejection_csv(rejected: &[Rejection]) -> String {
    let mut out = String::from("world,sub_id,reason\n");
    for r in rejected {
        out.push_str(&format!("{},{},{}\n", r.world, r.sub_id, r.reason.code()));
    }
    out
}

/// `cot_count` filtered records per seen category, drawn from distinct
/// few-shot images where possible. A rejected draw is retried with a fresh
/// teacher sample, so rejections are logged but categories are rarely lost.
#[allow(clippy::too_many_arguments)]
pub fn build_cot_dataset(
    world: &World,
    split: &CategorySplit,
    shots: &[ImageSample],
    vocab: &Vocab,
    style: CotStyle,
    cot_count: usize,
    teacher: TeacherConfig,
    seed: u64,
) -> Result<(Vec<CoTRecord>, Vec<Rejection>)> {
    let mut rng = seeded(derive_seed(seed, "sft", "cot", world.index as u64));
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for &sub in &split.seen {
        let mut pool: Vec<&ImageSample> = shots.iter().filter(|s| s.sub_id == sub).collect();
        pool.shuffle(&mut rng);
        if pool.is_empty() {
            continue;
        }
        for i in 0..cot_count {
            let sample = pool[i % pool.len()];
            for _ in 0..=teacher.max_resamples {
                let rec = synthesize_cot(sample, world, split, vocab, style, teacher.error_rate, &mut rng)?;
                let (mut ok, mut bad) = filter_cot(vec![rec]);
                rejected.append(&mut bad);
                if let Some(r) = ok.pop() {
                    kept.push(r);
                    break;
                }
            }
        }
    }
    Ok((kept, rejected))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Records per update; `0` means full batch.
    pub batch: usize,
}

/// Mean per-token negative log-likelihood over `records`, no gradient.
pub fn mean_nll(params: &PolicyParams, records: &[CoTRecord]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for r in records {
        total -= params.logprobs(&r.ctx, &r.target)?.iter().sum::<f64>();
        count += r.target.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Teacher-forced Adam training on mean per-token NLL. Returns the loss
/// curve: entry `e` is the token-weighted mean of the batch losses seen during
/// epoch `e`, each measured before its update.
pub fn sft_train(
    params: &mut PolicyParams,
    records: &[CoTRecord],
    cfg: &SftConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(SftError::NoRecords);
    }
    let mut opt = Adam::new(AdamConfig::adam(cfg.lr), &params.block_sizes());
    let batch = if cfg.batch == 0 { records.len() } else { cfg.batch };
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seeded(derive_seed(seed, "sft", "shuffle", epoch as u64));
        if batch < records.len() {
            order.shuffle(&mut rng);
        }
        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(batch) {
            let last_good = params.clone();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let mut sum = None;
            let mut n_tok = 0usize;
            for &i in chunk {
                let r = &records[i];
                let lp = token_logprobs(&mut tape, &vars, &r.ctx, &r.target)?;
                let s = tape.sum(lp);
                sum = Some(match sum {
                    None => s,
                    Some(acc) => tape.add(acc, s).map_err(PolicyError::from)?,
                });
                n_tok += r.target.len();
            }
            let total = sum.expect("non-empty chunk");
            let loss = tape.scale(total, -1.0 / n_tok as f64);
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(SftError::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            let grads = tape.backward(loss).map_err(PolicyError::from)?;
            params.apply(&mut opt, &vars.grads(&tape, &grads));
            if !params.all_finite() {
                return Err(SftError::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            epoch_nll += value * n_tok as f64;
            epoch_tokens += n_tok;
        }
        let mean = epoch_nll / epoch_tokens as f64;
        log::debug!("sft epoch {epoch}: nll {mean}");
        curve.push(mean);
    }
    Ok(curve)
}
