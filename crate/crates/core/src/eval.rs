//! Closed-world multiple choice and open-world naming evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{
    sample, AnswerConstraint, Context, PolicyError, PolicyParams, SampleConfig, Source,
    QUERY_CLOSED, QUERY_OPEN,
};
use crate::reward::{answer_text, normalize_text, ss_relative, text_includes, MetricError};
use crate::rng::{derive_seed, seeded, substream};
use crate::vocab::{TokenId, Vocab, VocabError};
use crate::world::{ImageSample, Split, World, WorldError};

pub const SCHEMA_VERSION: u32 = 1;
pub const CLOSED_CHOICES: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("EMPTY_SET: no evaluation tasks")]
    EmptySet,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("task protocol does not match the evaluator")]
    WrongProtocol,
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub protocol: Protocol,
    pub ctx: Context,
    pub world: usize,
    pub split: Split,
    pub truth_id: usize,
    pub truth: String,
    pub super_name: String,
    /// Closed protocol only: the shuffled options, truth included.
    pub candidates: Vec<String>,
    /// Set when the world had fewer than four categories to choose from.
    pub short_options: bool,
}

/// Multiple-choice task: the truth plus its three nearest categories in the
/// whole world, shuffled.
pub fn build_closed_task(sample: &ImageSample, world: &World, rng: &mut impl rand::Rng) -> Result<EvalTask> {
    let truth = world.sub(sample.sub_id)?;
    let all: Vec<usize> = (0..world.subs.len()).collect();
    let mut ids = vec![truth.id];
    ids.extend(world.nearest(truth.id, &all, CLOSED_CHOICES - 1)?);
    let short = ids.len() < CLOSED_CHOICES;
    if short {
        log::warn!("world {} offers only {} options", world.index, ids.len());
    }
    ids.shuffle(rng);
    Ok(EvalTask {
        protocol: Protocol::Closed,
        ctx: Context::new(sample.feat.clone(), QUERY_CLOSED),
        world: world.index,
        split: sample.split,
        truth_id: truth.id,
        truth: truth.name_text(),
        super_name: world.super_names[truth.super_id].clone(),
        candidates: ids.iter().map(|&c| world.subs[c].name_text()).collect(),
        short_options: short,
    })
}

pub fn build_open_task(sample: &ImageSample, world: &World) -> Result<EvalTask> {
    let truth = world.sub(sample.sub_id)?;
    Ok(EvalTask {
        protocol: Protocol::Open,
        ctx: Context::new(sample.feat.clone(), QUERY_OPEN),
        world: world.index,
        split: sample.split,
        truth_id: truth.id,
        truth: truth.name_text(),
        super_name: world.super_names[truth.super_id].clone(),
        candidates: Vec::new(),
        short_options: false,
    })
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub schema_version: u32,
    pub variant: String,
    pub dataset: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub fn dataset_name(world: usize) -> String {
    format!("world{world}")
}

fn split_label(s: Split) -> &'static str {
    match s {
        Split::UnseenTest => "unseen",
        _ => "seen",
    }
}

/// Decoding settings; `sample_seed` only matters for sampled decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub sample: SampleConfig,
    pub sample_seed: u64,
}

fn decode(
    params: &PolicyParams,
    task: &EvalTask,
    index: usize,
    constraint: Option<&AnswerConstraint>,
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    let mut rng = substream(cfg.sample_seed, "eval", "task", index as u64);
    Ok(sample(params, &task.ctx, &cfg.sample, constraint, Source::Anchor, &mut rng)?.tokens)
}

/// Per-(world, split) means of per-task scores, as rows.
fn aggregate(
    tasks: &[EvalTask],
    scores: &[f64],
    metric: &str,
    variant: &str,
    seed: u64,
) -> Vec<MetricRow> {
    let mut cells: BTreeMap<(usize, &'static str), (f64, usize)> = BTreeMap::new();
    for (t, &s) in tasks.iter().zip(scores) {
        let e = cells.entry((t.world, split_label(t.split))).or_default();
        e.0 += s;
        e.1 += 1;
    }
    cells
        .into_iter()
        .map(|((w, split), (sum, n))| MetricRow {
            schema_version: SCHEMA_VERSION,
            variant: variant.to_string(),
            dataset: dataset_name(w),
            split: split.to_string(),
            metric: metric.to_string(),
            value: sum / n as f64,
            seed,
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedReport {
    pub accuracy: f64,
    pub per_task: Vec<f64>,
    pub rows: Vec<MetricRow>,
}

/// Decodes each task with the answer constrained to its options; a task
/// succeeds iff the answer names a candidate and includes the truth.
pub fn eval_closed(
    params: &PolicyParams,
    tasks: &[EvalTask],
    vocab: &Vocab,
    cfg: &DecodeConfig,
    variant: &str,
    seed: u64,
) -> Result<ClosedReport> {
    if tasks.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        if t.protocol != Protocol::Closed {
            return Err(EvalError::WrongProtocol);
        }
        let constraint = AnswerConstraint {
            candidates: t
                .candidates
                .iter()
                .map(|c| vocab.encode(c))
                .collect::<std::result::Result<_, _>>()?,
        };
        let tokens = decode(params, t, i, Some(&constraint), cfg)?;
        let ok = answer_text(&tokens, vocab).is_some_and(|a| {
            let a = normalize_text(&a);
            t.candidates.iter().any(|c| normalize_text(c) == a) && text_includes(&t.truth, &a)
        });
        per_task.push(if ok { 1.0 } else { 0.0 });
    }
    Ok(ClosedReport {
        accuracy: mean(&per_task),
        rows: aggregate(tasks, &per_task, "closed_accuracy", variant, seed),
        per_task,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenReport {
    pub text_inclusion: f64,
    pub ss_relative: f64,
    pub predictions: Vec<Option<String>>,
    pub rows: Vec<MetricRow>,
}

/// Per-answer scores `(text inclusion, relative similarity)`; a missing or
/// malformed answer scores zero on both.
pub fn score_open(pred: Option<&str>, truth: &str, super_name: &str) -> Result<(f64, f64)> {
    let Some(p) = pred.filter(|p| !normalize_text(p).is_empty()) else {
        return Ok((0.0, 0.0));
    };
    let inc = if text_includes(truth, p) { 1.0 } else { 0.0 };
    Ok((inc, ss_relative(p, truth, super_name)?))
}

/// Free-form naming scored by text inclusion and relative similarity.
pub fn eval_open(
    params: &PolicyParams,
    tasks: &[EvalTask],
    vocab: &Vocab,
    cfg: &DecodeConfig,
    variant: &str,
    seed: u64,
) -> Result<OpenReport> {
    if tasks.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut predictions = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        if t.protocol != Protocol::Open {
            return Err(EvalError::WrongProtocol);
        }
        let tokens = decode(params, t, i, None, cfg)?;
        predictions.push(answer_text(&tokens, vocab));
    }
    score_open_predictions(tasks, predictions, variant, seed)
}

/// Scores already-decoded open-world answers.
pub fn score_open_predictions(
    tasks: &[EvalTask],
    predictions: Vec<Option<String>>,
    variant: &str,
    seed: u64,
) -> Result<OpenReport> {
    if tasks.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut inc = Vec::with_capacity(tasks.len());
    let mut ss = Vec::with_capacity(tasks.len());
    for (t, p) in tasks.iter().zip(&predictions) {
        let (a, b) = score_open(p.as_deref(), &t.truth, &t.super_name)?;
        inc.push(a);
        ss.push(b);
    }
    let mut rows = aggregate(tasks, &inc, "open_text_inclusion", variant, seed);
    rows.extend(aggregate(tasks, &ss, "open_ss_relative", variant, seed));
    Ok(OpenReport {
        text_inclusion: mean(&inc),
        ss_relative: mean(&ss),
        predictions,
        rows,
    })
}

/// Closed and open tasks for `per_class` fresh images of every category,
/// tagged seen or unseen by `seen`.
pub fn build_tasks(
    world: &World,
    seen: &[usize],
    unseen: &[usize],
    per_class: usize,
    seed: u64,
) -> Result<(Vec<EvalTask>, Vec<EvalTask>)> {
    let seen_imgs = crate::world::sample_images(world, seen, per_class, Split::SeenTest, seed, "eval")?;
    let unseen_imgs =
        crate::world::sample_images(world, unseen, per_class, Split::UnseenTest, seed, "eval")?;
    let mut rng = seeded(derive_seed(seed, "eval", "options", world.index as u64));
    let mut closed = Vec::new();
    let mut open = Vec::new();
    for s in seen_imgs.iter().chain(&unseen_imgs) {
        closed.push(build_closed_task(s, world, &mut rng)?);
        open.push(build_open_task(s, world)?);
    }
    Ok((closed, open))
}

fn world_order(name: &str) -> (usize, String) {
    (name.len(), name.to_string())
}

/// Tables in the layout seen worlds, seen average, unseen worlds, unseen
/// average, overall average (mean of the two split averages). Cells are seed
/// means; with more than one seed a column holds the standard deviation of the
/// per-seed overall average.
pub fn report_tables(rows: &[MetricRow]) -> String {
    let mut worlds: Vec<&str> = rows
        .iter()
        .map(|r| r.dataset.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    worlds.sort_by_key(|w| world_order(w));
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    let multi = seeds.len() > 1;

    // (variant, metric) -> seed -> (split, dataset) -> value
    type Cells<'a> = BTreeMap<(&'a str, &'a str), f64>;
    let mut table: BTreeMap<(&str, &str), BTreeMap<u64, Cells>> = BTreeMap::new();
    let mut order: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        let key = (r.variant.as_str(), r.metric.as_str());
        if !table.contains_key(&key) {
            order.push(key);
        }
        table
            .entry(key)
            .or_default()
            .entry(r.seed)
            .or_default()
            .insert((r.split.as_str(), r.dataset.as_str()), r.value);
    }

    let mut header = vec!["variant".to_string(), "metric".to_string()];
    for split in ["seen", "unseen"] {
        header.extend(worlds.iter().map(|w| format!("{split}:{w}")));
        header.push(format!("{split}:avg"));
    }
    header.push("avg".to_string());
    if multi {
        header.push("avg_std".to_string());
    }
    let mut out = header.join(",") + "\n";

    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let avg = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    for key in order {
        let per_seed = &table[&key];
        let mut line = vec![key.0.to_string(), key.1.to_string()];
        let mut split_avgs = Vec::new();
        for split in ["seen", "unseen"] {
            let mut cells = Vec::new();
            for w in &worlds {
                let vals: Vec<f64> = per_seed
                    .values()
                    .filter_map(|c| c.get(&(split, *w)).copied())
                    .collect();
                let cell = avg(&vals);
                line.push(fmt(cell));
                cells.extend(cell);
            }
            let a = avg(&cells);
            line.push(fmt(a));
            split_avgs.extend(a);
        }
        line.push(fmt(avg(&split_avgs)));
        if multi {
            let overall: Vec<f64> = per_seed
                .values()
                .filter_map(|c| {
                    let s: Vec<f64> = ["seen", "unseen"]
                        .iter()
                        .filter_map(|sp| {
                            let v: Vec<f64> = worlds.iter().filter_map(|w| c.get(&(*sp, *w)).copied()).collect();
                            avg(&v)
                        })
                        .collect();
                    avg(&s)
                })
                .collect();
            let std = if overall.len() > 1 {
                let m = overall.iter().sum::<f64>() / overall.len() as f64;
                Some((overall.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (overall.len() - 1) as f64).sqrt())
            } else {
                None
            };
            line.push(fmt(std));
        }
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
