//! Seeded, resumable stage runner: world generation, chain-of-thought
//! fine-tuning, policy optimization, evaluation and analysis.
//!
//! Stage outputs live in `stages/<stage>-<hash>/seed-<s>/`, where the hash
//! covers every config field the stage and its upstream stages read. A stage
//! whose directory holds a completion marker is skipped, so reruns and
//! ablation variants share work. Optimization checkpoints every
//! `checkpoint_every` steps and resumes from the latest checkpoint.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::genus::genus_delta_cosine;
use crate::analysis::pca::{pca_pairs, projections_csv};
use crate::analysis::probe::{curve_csv, linear_probe};
use crate::analysis::stats::welch_t;
use crate::analysis::AnalysisError;
use crate::config::{sha256_hex, sha256_json, ConfigError, ExperimentConfig};
use crate::eval::{build_tasks, eval_closed, eval_open, report_tables, DecodeConfig, EvalError, MetricRow};
use crate::policy::{Context, Decoding, PolicyDims, PolicyError, PolicyParams, SampleConfig, QUERY_OPEN};
use crate::rng::{derive_seed, substream};
use crate::sft::{build_cot_dataset, build_vocab, rejection_csv, sft_train, CoTRecord, SftError};
use crate::tapo::{TapoError, TapoTrainer, TrainData};
use crate::vocab::{Tag, Vocab, VocabError};
use crate::world::{
    generate_world, sample_fewshot, sample_images, split_categories, CategorySplit, ImageSample, Split,
    World, WorldError,
};

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error(transparent)]
    Tapo(#[from] TapoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("interrupted after optimization step {0}")]
    Interrupted(u64),
}

impl PipelineError {
    /// True for problems with the configuration rather than a stage.
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        io(dir, fs::create_dir_all(dir))?;
    }
    io(path, fs::write(path, bytes))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    io(path, fs::read(path))
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = io(path, fs::File::open(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = io(path, line)?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenWorld,
    Sft,
    Train,
    Eval,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::GenWorld, Stage::Sft, Stage::Train, Stage::Eval, Stage::Analyze];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenWorld => "gen-world",
            Stage::Sft => "sft",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub stage: Stage,
    pub dir: String,
    pub reused: bool,
    pub wall_secs: f64,
    pub outputs: Vec<FileRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub variant: String,
    pub config_sha256: String,
    pub code_version: String,
    pub root_seeds: Vec<u64>,
    pub stages: Vec<StageRecord>,
    pub complete: bool,
    pub failure: Option<String>,
}

impl RunManifest {
    pub fn stage_dir(&self, root: &Path, seed: u64, stage: Stage) -> Option<PathBuf> {
        self.stages
            .iter()
            .find(|s| s.seed == seed && s.stage == stage)
            .map(|s| root.join(&s.dir))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Last stage to run.
    pub until: Option<Stage>,
    /// Stop with [`PipelineError::Interrupted`] after this many optimization
    /// steps in this invocation, leaving checkpoints as a kill would.
    pub interrupt_after_steps: Option<u64>,
    /// Shared stage cache; defaults to `<output_dir>/stages`.
    pub stage_root: Option<PathBuf>,
}

/// Per-stage config hashes, each chaining its upstream hash.
#[derive(Debug, Clone)]
struct StageHashes {
    world: String,
    sft: String,
    train: String,
    eval: String,
    analyze: String,
}

fn stage_hashes(cfg: &ExperimentConfig) -> StageHashes {
    let world = sha256_json(&(&cfg.worlds, cfg.shots, cfg.seen_fraction));
    let sft = sha256_json(&(&world, &cfg.policy, &cfg.sft));
    let train = sha256_json(&(&sft, &cfg.tapo));
    let eval = sha256_json(&(&train, &cfg.eval, &cfg.variant));
    let analyze = sha256_json(&(&train, &cfg.analysis));
    StageHashes {
        world,
        sft,
        train,
        eval,
        analyze,
    }
}

const MARKER: &str = "done.json";

fn stage_dir(root: &Path, stage: Stage, hash: &str, seed: u64) -> PathBuf {
    root.join(format!("{}-{}", stage.name(), &hash[..12]))
        .join(format!("seed-{seed}"))
}

fn is_done(dir: &Path, hash: &str) -> bool {
    fs::read(dir.join(MARKER))
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
        .is_some_and(|v| v["config_sha256"] == hash)
}

fn mark_done(dir: &Path, hash: &str) -> Result<()> {
    write_file(
        &dir.join(MARKER),
        serde_json::to_string(&serde_json::json!({ "config_sha256": hash }))?.as_bytes(),
    )
}

fn hash_outputs(dir: &Path, base: &Path) -> Result<Vec<FileRecord>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in io(&d, fs::read_dir(&d))? {
            let p = io(&d, entry)?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MARKER) {
                files.push(p);
            }
        }
    }
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = read_file(&p)?;
            Ok(FileRecord {
                path: p.strip_prefix(base).unwrap_or(&p).to_string_lossy().into_owned(),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

/// Everything the world stage determines for one seed.
#[derive(Debug, Clone)]
pub struct WorldBundle {
    pub worlds: Vec<World>,
    pub splits: Vec<CategorySplit>,
    pub shots: Vec<Vec<ImageSample>>,
    pub vocab: Vocab,
}

/// Worlds and splits depend only on the world specs; few-shot draws on `seed`.
pub fn build_worlds(cfg: &ExperimentConfig, seed: u64) -> Result<WorldBundle> {
    let mut worlds = Vec::new();
    let mut splits = Vec::new();
    let mut shots = Vec::new();
    for (i, spec) in cfg.worlds.iter().enumerate() {
        let w = generate_world(i, *spec)?;
        let split = split_categories(&w, cfg.seen_fraction, spec.seed)?;
        shots.push(sample_fewshot(&w, &split.seen, cfg.shots, seed)?);
        worlds.push(w);
        splits.push(split);
    }
    let vocab = build_vocab(&worlds)?;
    Ok(WorldBundle {
        worlds,
        splits,
        shots,
        vocab,
    })
}

pub fn policy_dims(cfg: &ExperimentConfig, vocab: &Vocab) -> PolicyDims {
    PolicyDims {
        vocab: vocab.len(),
        d_tok: cfg.policy.d_tok,
        d_img: cfg.worlds.iter().map(|w| w.feat_dim).max().unwrap_or(0),
        n_queries: 2,
        d_h: cfg.policy.d_h,
    }
}

fn save_params(path: &Path, params: &PolicyParams, vocab: &Vocab) -> Result<()> {
    write_file(path, &params.to_checkpoint_bytes(vocab.hash()))
}

pub fn load_params(path: &Path, vocab: &Vocab) -> Result<PolicyParams> {
    let bytes = read_file(path)?;
    Ok(PolicyParams::read_checkpoint(&mut bytes.as_slice(), Some(vocab.hash()))?)
}

fn write_world_stage(dir: &Path, b: &WorldBundle) -> Result<()> {
    for (i, w) in b.worlds.iter().enumerate() {
        let shot_file = format!("world{i}_shots.jsonl");
        write_file(&dir.join(&shot_file), jsonl(&b.shots[i])?.as_bytes())?;
        let manifest = w.manifest_json(&b.splits[i], &[shot_file]);
        write_file(
            &dir.join(format!("world{i}.json")),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        write_file(
            &dir.join(format!("world{i}_cosines.csv")),
            w.prototype_cosine_csv().as_bytes(),
        )?;
    }
    write_file(&dir.join("vocab.txt"), (b.vocab.tokens().join("\n") + "\n").as_bytes())
}

#[derive(Serialize)]
struct CotLine<'a> {
    #[serde(flatten)]
    record: &'a CoTRecord,
}

fn run_sft_stage(cfg: &ExperimentConfig, b: &WorldBundle, seed: u64, dir: &Path) -> Result<()> {
    let dims = policy_dims(cfg, &b.vocab);
    let init = PolicyParams::init(dims, &mut substream(seed, "policy", "init", 0));
    save_params(&dir.join("init.ckpt"), &init, &b.vocab)?;
    let mut params = init;
    if cfg.sft.enabled {
        let mut records = Vec::new();
        let mut rejected = Vec::new();
        for (i, w) in b.worlds.iter().enumerate() {
            let (mut k, mut r) = build_cot_dataset(
                w,
                &b.splits[i],
                &b.shots[i],
                &b.vocab,
                cfg.sft.style,
                cfg.sft.cot_count,
                cfg.sft.teacher,
                seed,
            )?;
            records.append(&mut k);
            rejected.append(&mut r);
        }
        log::info!(
            "seed {seed}: {} CoT records kept, {} rejected",
            records.len(),
            rejected.len()
        );
        let lines: Vec<CotLine> = records.iter().map(|record| CotLine { record }).collect();
        write_file(&dir.join("cot.jsonl"), jsonl(&lines)?.as_bytes())?;
        write_file(&dir.join("rejections.csv"), rejection_csv(&rejected).as_bytes())?;
        let sft_cfg = crate::sft::SftConfig {
            epochs: cfg.sft.epochs,
            lr: cfg.sft.lr,
            batch: cfg.sft.batch,
        };
        let curve = match sft_train(&mut params, &records, &sft_cfg, seed) {
            Ok(c) => c,
            Err(SftError::Diverged { epoch, last_good }) => {
                save_params(&dir.join("last_good.ckpt"), &last_good, &b.vocab)?;
                return Err(PipelineError::Stage {
                    stage: "sft",
                    message: format!("loss diverged at epoch {epoch}; last good parameters saved"),
                });
            }
            Err(e) => return Err(e.into()),
        };
        let mut csv = String::from("epoch,nll\n");
        for (e, l) in curve.iter().enumerate() {
            csv.push_str(&format!("{e},{l}\n"));
        }
        write_file(&dir.join("loss.csv"), csv.as_bytes())?;
    }
    save_params(&dir.join("policy.ckpt"), &params, &b.vocab)
}

fn run_train_stage(
    cfg: &ExperimentConfig,
    b: &WorldBundle,
    seed: u64,
    sft_dir: &Path,
    dir: &Path,
    interrupt_after: Option<u64>,
) -> Result<()> {
    let mut params = load_params(&sft_dir.join("policy.ckpt"), &b.vocab)?;
    if !cfg.tapo.enabled {
        return save_params(&dir.join("policy.ckpt"), &params, &b.vocab);
    }
    let tcfg = cfg.tapo.tapo;
    let ckpt_params = dir.join("ckpt").join("params.ckpt");
    let ckpt_state = dir.join("ckpt").join("trainer.bin");
    let log_path = dir.join("train_log.jsonl");
    let mut trainer = TapoTrainer::new(tcfg, &params)?;
    if ckpt_params.exists() && ckpt_state.exists() {
        params = load_params(&ckpt_params, &b.vocab)?;
        trainer = TapoTrainer::from_state_bytes(tcfg, &read_file(&ckpt_state)?).ok_or_else(|| {
            PipelineError::Stage {
                stage: "train",
                message: "corrupt trainer checkpoint".into(),
            }
        })?;
        log::info!("seed {seed}: resuming optimization at step {}", trainer.step);
    }
    // keep only log lines from completed, checkpointed steps
    let mut kept = String::new();
    if log_path.exists() {
        let stats: Vec<crate::tapo::StepStats> = read_jsonl(&log_path)?;
        for s in stats.iter().filter(|s| s.step < trainer.step) {
            kept.push_str(&serde_json::to_string(s)?);
            kept.push('\n');
        }
    }
    write_file(&log_path, kept.as_bytes())?;
    let mut log_file = io(&log_path, fs::OpenOptions::new().append(true).open(&log_path))?;

    let data = TrainData {
        worlds: &b.worlds,
        splits: &b.splits,
        shots: &b.shots,
        vocab: &b.vocab,
    };
    let mut done_here = 0u64;
    while (trainer.step as usize) < tcfg.steps {
        let (stats, dumps) = trainer.step(&mut params, &data, seed)?;
        for (k, d) in dumps.iter().enumerate() {
            write_file(
                &dir.join("debug").join(format!("step{}_{k}.json", stats.step)),
                serde_json::to_string_pretty(d)?.as_bytes(),
            )?;
        }
        log::debug!(
            "seed {seed} step {}: reward {:.3} admitted {} degenerate {}",
            stats.step,
            stats.mean_reward,
            stats.admitted,
            stats.degenerate
        );
        io(&log_path, writeln!(log_file, "{}", serde_json::to_string(&stats)?))?;
        if trainer.step as usize % cfg.tapo.checkpoint_every == 0 {
            save_params(&ckpt_params, &params, &b.vocab)?;
            write_file(&ckpt_state, &trainer.state_bytes())?;
        }
        done_here += 1;
        if interrupt_after.is_some_and(|n| done_here >= n) && (trainer.step as usize) < tcfg.steps {
            return Err(PipelineError::Interrupted(trainer.step));
        }
    }
    save_params(&dir.join("policy.ckpt"), &params, &b.vocab)?;
    let ckpt_dir = dir.join("ckpt");
    if ckpt_dir.exists() {
        io(&ckpt_dir, fs::remove_dir_all(&ckpt_dir))?;
    }
    Ok(())
}

fn decode_config(cfg: &ExperimentConfig, seed: u64) -> DecodeConfig {
    DecodeConfig {
        sample: SampleConfig {
            decoding: match cfg.eval.temperature {
                Some(temperature) => Decoding::Sample { temperature },
                None => Decoding::Greedy,
            },
            max_len: cfg.eval.max_len,
            grammar_mask: cfg.eval.grammar_mask,
        },
        sample_seed: derive_seed(seed, "eval", "decode", 0),
    }
}

/// Label of the evaluated snapshots: untrained, after fine-tuning, final.
pub fn snapshot_variant(variant: &str, snapshot: &str) -> String {
    if snapshot == "final" {
        variant.to_string()
    } else {
        format!("{variant}@{snapshot}")
    }
}

fn run_eval_stage(
    cfg: &ExperimentConfig,
    b: &WorldBundle,
    seed: u64,
    sft_dir: &Path,
    train_dir: &Path,
    dir: &Path,
) -> Result<()> {
    let mut closed = Vec::new();
    let mut open = Vec::new();
    for (i, w) in b.worlds.iter().enumerate() {
        let (c, o) = build_tasks(w, &b.splits[i].seen, &b.splits[i].unseen, cfg.eval.per_class, seed)?;
        closed.extend(c);
        open.extend(o);
    }
    let dc = decode_config(cfg, seed);
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut final_rows = Vec::new();
    for (snap, path) in [
        ("init", sft_dir.join("init.ckpt")),
        ("sft", sft_dir.join("policy.ckpt")),
        ("final", train_dir.join("policy.ckpt")),
    ] {
        let params = load_params(&path, &b.vocab)?;
        let label = snapshot_variant(&cfg.variant, snap);
        let c = eval_closed(&params, &closed, &b.vocab, &dc, &label, seed)?;
        let o = eval_open(&params, &open, &b.vocab, &dc, &label, seed)?;
        log::info!(
            "seed {seed} {label}: closed {:.3} open inclusion {:.3} ss {:.3}",
            c.accuracy,
            o.text_inclusion,
            o.ss_relative
        );
        if snap == "final" {
            let preds: Vec<serde_json::Value> = open
                .iter()
                .zip(&o.predictions)
                .map(|(t, p)| serde_json::json!({"world": t.world, "split": t.split, "truth": t.truth, "prediction": p}))
                .collect();
            write_file(&dir.join("open_predictions.jsonl"), jsonl(&preds)?.as_bytes())?;
            final_rows.extend(c.rows.iter().cloned());
            final_rows.extend(o.rows.iter().cloned());
        }
        rows.extend(c.rows);
        rows.extend(o.rows);
    }
    write_file(&dir.join("metrics.jsonl"), jsonl(&rows)?.as_bytes())?;
    write_file(&dir.join("tables.csv"), report_tables(&final_rows).as_bytes())
}

/// Hidden states pooled over a fixed two-token prompt.
fn pooled_features(params: &PolicyParams, ctx: &Context) -> Result<Vec<f64>> {
    let prompt = [Tag::Think.open_id(), Tag::Analysis.open_id()];
    let mut acc = vec![0.0; params.dims.d_h];
    for i in 0..=prompt.len() {
        let h = params.last_hidden_state(ctx, &prompt[..i])?;
        acc.iter_mut().zip(h).for_each(|(a, x)| *a += x);
    }
    let n = (prompt.len() + 1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

fn name_embedding(params: &PolicyParams, tokens: &[usize]) -> Vec<f64> {
    let d = params.dims.d_tok;
    let emb = params.token_embed.data();
    let mut out = vec![0.0; d];
    for &t in tokens {
        out.iter_mut().zip(&emb[t * d..(t + 1) * d]).for_each(|(o, e)| *o += e);
    }
    out.iter_mut().for_each(|o| *o /= tokens.len() as f64);
    out
}

fn run_analyze_stage(
    cfg: &ExperimentConfig,
    b: &WorldBundle,
    seed: u64,
    sft_dir: &Path,
    train_dir: &Path,
    dir: &Path,
) -> Result<()> {
    let a = cfg.analysis;
    let models = [
        ("sft", load_params(&sft_dir.join("policy.ckpt"), &b.vocab)?),
        ("final", load_params(&train_dir.join("policy.ckpt"), &b.vocab)?),
    ];
    let n_probe = a.probe_worlds.min(b.worlds.len());
    let mut report = serde_json::Map::new();

    // linear probe on pooled hidden states
    let mut probe = serde_json::Map::new();
    let mut pca = serde_json::Map::new();
    for (name, params) in &models {
        let mut accs = Vec::new();
        let mut seps = Vec::new();
        for w in &b.worlds[..n_probe] {
            let all: Vec<usize> = (0..w.subs.len()).collect();
            let train = sample_images(w, &all, a.probe_train_per_class, Split::SeenTrain, seed, "probe-train")?;
            let test = sample_images(w, &all, a.probe_test_per_class, Split::SeenTest, seed, "probe-test")?;
            let feats = |s: &[ImageSample]| -> Result<Vec<Vec<f64>>> {
                s.iter()
                    .map(|x| pooled_features(params, &Context::new(x.feat.clone(), QUERY_OPEN)))
                    .collect()
            };
            let (tx, vx) = (feats(&train)?, feats(&test)?);
            let ty: Vec<usize> = train.iter().map(|s| s.sub_id).collect();
            let vy: Vec<usize> = test.iter().map(|s| s.sub_id).collect();
            let r = linear_probe(&tx, &ty, &vx, &vy, &a.probe, derive_seed(seed, "analyze", "probe", w.index as u64))?;
            write_file(
                &dir.join(format!("probe_{name}_world{}.csv", w.index)),
                curve_csv(&r).as_bytes(),
            )?;
            accs.push(r.best_test_accuracy);

            // paired correct / hard-negative name representations
            let mut reps = Vec::new();
            let mut labels = Vec::new();
            for s in &test {
                let ctx = Context::new(s.feat.clone(), QUERY_OPEN);
                let neg = w.hardest_negative(s.sub_id, &all)?;
                for (sub, label) in [(s.sub_id, true), (neg, false)] {
                    let mut toks = vec![Tag::Answer.open_id()];
                    toks.extend(b.vocab.encode(&w.subs[sub].name_text())?);
                    reps.push(params.last_hidden_state(&ctx, &toks)?);
                    labels.push(label);
                }
            }
            let pp = pca_pairs(&reps, &labels)?;
            write_file(
                &dir.join(format!("pca_{name}_world{}.csv", w.index)),
                projections_csv(&pp, &labels).as_bytes(),
            )?;
            seps.push(pp.separability);
        }
        probe.insert(name.to_string(), serde_json::json!(accs));
        pca.insert(name.to_string(), serde_json::json!(seps));
    }
    report.insert("probe_best_test_accuracy".into(), probe.into());
    report.insert("pair_pca_separability".into(), pca.into());

    // intra- vs inter-genus similarity of name embeddings
    let mut deltas: Vec<Vec<f64>> = Vec::new();
    for (_, params) in &models {
        let mut all = Vec::new();
        for w in &b.worlds {
            let emb: Vec<Vec<f64>> = w
                .subs
                .iter()
                .map(|s| Ok(name_embedding(params, &b.vocab.encode(&s.name_text())?)))
                .collect::<Result<_>>()?;
            let genus: Vec<usize> = w.subs.iter().map(|s| s.super_id).collect();
            let g = genus_delta_cosine(&emb, &genus, derive_seed(seed, "analyze", "genus", w.index as u64));
            all.extend(g.deltas.iter().map(|d| d.delta));
        }
        deltas.push(all);
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len().max(1) as f64;
    let mut genus = serde_json::json!({
        "sft_mean_delta": mean(&deltas[0]),
        "final_mean_delta": mean(&deltas[1]),
    });
    match welch_t(&deltas[1], &deltas[0]) {
        Ok(t) => genus["welch"] = serde_json::to_value(t)?,
        Err(e) => genus["welch_error"] = e.to_string().into(),
    }
    report.insert("genus_delta".into(), genus);
    write_file(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(report))?.as_bytes(),
    )
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(m)?.as_bytes())
}

/// Runs every stage for every seed, skipping stages already complete, and
/// writes `manifest.json` to the output directory (also on failure).
pub fn run_pipeline(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    let root = opts.stage_root.clone().unwrap_or_else(|| out.join("stages"));
    let hashes = stage_hashes(cfg);
    let until = opts.until.unwrap_or(Stage::Analyze);
    let mut manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA,
        variant: cfg.variant.clone(),
        config_sha256: sha256_json(cfg),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        root_seeds: cfg.seeds.clone(),
        stages: Vec::new(),
        complete: false,
        failure: None,
    };
    write_file(&out.join("config.json"), cfg.to_json_pretty().as_bytes())?;
    let result = run_all(cfg, opts, &root, &out, &hashes, until, &mut manifest);
    match &result {
        Ok(()) => manifest.complete = true,
        Err(e) => manifest.failure = Some(e.to_string()),
    }
    write_manifest(&out.join("manifest.json"), &manifest)?;
    result.map(|()| manifest)
}

fn run_all(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    root: &Path,
    out: &Path,
    h: &StageHashes,
    until: Stage,
    manifest: &mut RunManifest,
) -> Result<()> {
    for &seed in &cfg.seeds {
        let bundle = build_worlds(cfg, seed)?;
        let dirs = [
            (Stage::GenWorld, stage_dir(root, Stage::GenWorld, &h.world, seed), &h.world),
            (Stage::Sft, stage_dir(root, Stage::Sft, &h.sft, seed), &h.sft),
            (Stage::Train, stage_dir(root, Stage::Train, &h.train, seed), &h.train),
            (Stage::Eval, stage_dir(root, Stage::Eval, &h.eval, seed), &h.eval),
            (Stage::Analyze, stage_dir(root, Stage::Analyze, &h.analyze, seed), &h.analyze),
        ];
        let analyze_seed = cfg.analysis.enabled
            && cfg.seeds.iter().position(|&s| s == seed).is_some_and(|i| i < cfg.analysis.seeds);
        for (stage, dir, hash) in &dirs {
            if *stage > until || (*stage == Stage::Analyze && !analyze_seed) {
                continue;
            }
            let start = Instant::now();
            let reused = is_done(dir, hash);
            if !reused {
                log::info!("seed {seed}: running {}", stage.name());
                io(dir, fs::create_dir_all(dir))?;
                let sft_dir = &dirs[1].1;
                let train_dir = &dirs[2].1;
                match stage {
                    Stage::GenWorld => write_world_stage(dir, &bundle)?,
                    Stage::Sft => run_sft_stage(cfg, &bundle, seed, dir)?,
                    Stage::Train => {
                        run_train_stage(cfg, &bundle, seed, sft_dir, dir, opts.interrupt_after_steps)?
                    }
                    Stage::Eval => run_eval_stage(cfg, &bundle, seed, sft_dir, train_dir, dir)?,
                    Stage::Analyze => run_analyze_stage(cfg, &bundle, seed, sft_dir, train_dir, dir)?,
                }
                mark_done(dir, hash)?;
            }
            manifest.stages.push(StageRecord {
                seed,
                stage: *stage,
                dir: dir.strip_prefix(out).unwrap_or(dir).to_string_lossy().into_owned(),
                reused,
                wall_secs: start.elapsed().as_secs_f64(),
                outputs: hash_outputs(dir, out)?,
            });
        }
    }
    Ok(())
}

/// Metric rows of every seed's evaluation stage.
pub fn collect_metrics(manifest: &RunManifest, out: &Path) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for s in manifest.stages.iter().filter(|s| s.stage == Stage::Eval) {
        rows.extend(read_jsonl::<MetricRow>(&out.join(&s.dir).join("metrics.jsonl"))?);
    }
    Ok(rows)
}

/// Tables over the final-snapshot rows of a completed run.
pub fn report(manifest: &RunManifest, out: &Path) -> Result<String> {
    let rows: Vec<MetricRow> = collect_metrics(manifest, out)?
        .into_iter()
        .filter(|r| !r.variant.contains('@'))
        .collect();
    Ok(report_tables(&rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    TrainingMethod,
    Components,
    N1n2,
    CotCount,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "training_method" | "training-method" => Ok(Self::TrainingMethod),
            "components" => Ok(Self::Components),
            "n1n2" => Ok(Self::N1n2),
            "cot_count" | "cot-count" => Ok(Self::CotCount),
            other => Err(format!(
                "unknown ablation axis {other:?}; expected training_method, components, n1n2 or cot_count"
            )),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::TrainingMethod => "training_method",
            Self::Components => "components",
            Self::N1n2 => "n1n2",
            Self::CotCount => "cot_count",
        }
    }
}

/// Variant configs for one axis, sharing seeds and evaluation.
pub fn ablation_variants(base: &ExperimentConfig, axis: AblationAxis) -> Vec<ExperimentConfig> {
    let with = |name: &str, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        c.variant = name.to_string();
        f(&mut c);
        c
    };
    let t = base.tapo.tapo;
    match axis {
        AblationAxis::N1n2 => [(10, 0), (8, 2), (5, 5), (2, 8), (0, 10)]
            .iter()
            .map(|&(n1, n2)| {
                with(&format!("{n1}:{n2}"), &|c| {
                    c.tapo.tapo.n1 = n1;
                    c.tapo.tapo.n2 = n2;
                })
            })
            .collect(),
        AblationAxis::Components => vec![
            with("CoT-SFT-only", &|c| c.tapo.enabled = false),
            with("+DAPO", &|c| c.tapo.tapo = t.dapo()),
            with("+Intra", &|c| {
                c.tapo.tapo.gamma = 0.0;
                c.tapo.tapo.eta1 = 0.0;
                c.tapo.tapo.eta2 = 0.0;
            }),
            with("+Inter", &|c| {
                c.tapo.tapo.n1 = t.n1 + t.n2;
                c.tapo.tapo.n2 = 0;
            }),
            with("+Both", &|_| {}),
        ],
        AblationAxis::TrainingMethod => vec![
            with("SFT-only", &|c| c.tapo.enabled = false),
            with("RL-only", &|c| c.sft.enabled = false),
            with("No-Thinking", &|c| c.sft.style = crate::sft::CotStyle::AnswerOnly),
            with("Full", &|_| {}),
        ],
        AblationAxis::CotCount => (1..=3)
            .map(|k| with(&format!("{k}x"), &|c| c.sft.cot_count = k))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// `(metric:split, value)` means over worlds and seeds.
    pub values: Vec<(String, f64)>,
}

pub const ABLATION_COLUMNS: [(&str, &str); 6] = [
    ("closed_accuracy", "seen"),
    ("closed_accuracy", "unseen"),
    ("open_text_inclusion", "seen"),
    ("open_text_inclusion", "unseen"),
    ("open_ss_relative", "seen"),
    ("open_ss_relative", "unseen"),
];

/// Runs every variant of `axis` under `<output_dir>/ablate-<axis>/<variant>`
/// with a stage cache shared across variants, and writes `comparison.csv`.
pub fn run_ablation(base: &ExperimentConfig, axis: AblationAxis) -> Result<(Vec<AblationRow>, String)> {
    base.validate()?;
    let axis_dir = base.output_dir.join(format!("ablate-{}", axis.name()));
    let opts = RunOptions {
        stage_root: Some(base.output_dir.join("stages")),
        ..Default::default()
    };
    let mut rows = Vec::new();
    for mut v in ablation_variants(base, axis) {
        v.output_dir = axis_dir.join(v.variant.replace(':', "-").replace('+', "plus-"));
        let m = run_pipeline(&v, &opts)?;
        let metrics = collect_metrics(&m, &v.output_dir)?;
        let values = ABLATION_COLUMNS
            .iter()
            .map(|(metric, split)| {
                let xs: Vec<f64> = metrics
                    .iter()
                    .filter(|r| r.variant == v.variant && r.metric == *metric && r.split == *split)
                    .map(|r| r.value)
                    .collect();
                let mean = xs.iter().sum::<f64>() / xs.len().max(1) as f64;
                (format!("{metric}:{split}"), mean)
            })
            .collect();
        rows.push(AblationRow {
            variant: v.variant.clone(),
            values,
        });
    }
    let mut csv = String::from("variant");
    for (m, s) in ABLATION_COLUMNS {
        csv.push_str(&format!(",{m}:{s}"));
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.variant);
        for (_, v) in &r.values {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write_file(&axis_dir.join("comparison.csv"), csv.as_bytes())?;
    Ok((rows, csv))
}
