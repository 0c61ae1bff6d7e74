mod common;

use std::fs;
use std::path::Path;

use common::quick_config;
use fgvr_lab::config::sha256_hex;
use fgvr_lab::pipeline::{
    ablation_variants, run_ablation, run_pipeline, AblationAxis, PipelineError, RunManifest,
    RunOptions, Stage,
};
use fgvr_lab::sft::CoTRecord;

fn file(m: &RunManifest, root: &Path, stage: Stage, name: &str) -> Vec<u8> {
    let seed = m.root_seeds[0];
    fs::read(m.stage_dir(root, seed, stage).unwrap().join(name)).unwrap()
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = run_pipeline(&quick_config(a.path()), &RunOptions::default()).unwrap();
    let mb = run_pipeline(&quick_config(b.path()), &RunOptions::default()).unwrap();
    assert!(ma.complete && mb.complete);
    for (stage, name) in [
        (Stage::Sft, "policy.ckpt"),
        (Stage::Train, "policy.ckpt"),
        (Stage::Train, "train_log.jsonl"),
        (Stage::Eval, "metrics.jsonl"),
        (Stage::Analyze, "report.json"),
    ] {
        assert_eq!(file(&ma, a.path(), stage, name), file(&mb, b.path(), stage, name), "{name}");
    }
    let outs = |m: &RunManifest| m.stages.iter().map(|s| s.outputs.clone()).collect::<Vec<_>>();
    assert_eq!(outs(&ma), outs(&mb));
}

#[test]
fn interrupted_training_resumes_to_same_result() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = run_pipeline(&quick_config(a.path()), &RunOptions::default()).unwrap();
    let cfg = quick_config(b.path());
    let stop = RunOptions { interrupt_after_steps: Some(3), ..Default::default() };
    let err = run_pipeline(&cfg, &stop).unwrap_err();
    assert!(matches!(err, PipelineError::Interrupted(3)), "{err}");
    let failed: RunManifest =
        serde_json::from_slice(&fs::read(b.path().join("manifest.json")).unwrap()).unwrap();
    assert!(!failed.complete && failed.failure.is_some());
    let resumed = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    for (stage, name) in [
        (Stage::Train, "policy.ckpt"),
        (Stage::Train, "train_log.jsonl"),
        (Stage::Eval, "metrics.jsonl"),
    ] {
        assert_eq!(file(&full, a.path(), stage, name), file(&resumed, b.path(), stage, name), "{name}");
    }
    let train = resumed.stage_dir(b.path(), 5, Stage::Train).unwrap();
    assert!(!train.join("ckpt").exists());
}

#[test]
fn completed_stages_are_reused_and_downstream_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    let first = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert!(first.stages.iter().all(|s| !s.reused));
    let again = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert!(again.stages.iter().all(|s| s.reused));
    cfg.tapo.tapo.steps += 1;
    let changed = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    for s in &changed.stages {
        assert_eq!(s.reused, matches!(s.stage, Stage::GenWorld | Stage::Sft), "{:?}", s.stage);
    }
}

#[test]
fn manifest_hashes_match_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_pipeline(&quick_config(dir.path()), &RunOptions::default()).unwrap();
    let on_disk: RunManifest =
        serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk, m);
    assert_eq!(m.stages.len(), Stage::ALL.len());
    for s in &m.stages {
        assert!(!s.outputs.is_empty(), "{:?}", s.stage);
        for f in &s.outputs {
            let bytes = fs::read(dir.path().join(&f.path)).unwrap();
            assert_eq!(sha256_hex(&bytes), f.sha256, "{}", f.path);
        }
    }
}

#[test]
fn until_stops_after_named_stage() {
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { until: Some(Stage::Sft), ..Default::default() };
    let m = run_pipeline(&quick_config(dir.path()), &opts).unwrap();
    let stages: Vec<Stage> = m.stages.iter().map(|s| s.stage).collect();
    assert_eq!(stages, vec![Stage::GenWorld, Stage::Sft]);
}

#[test]
fn invalid_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    cfg.seen_fraction = 1.5;
    assert!(run_pipeline(&cfg, &RunOptions::default()).unwrap_err().is_config());
}

#[test]
fn ablation_axes_have_expected_variants() {
    let cfg = quick_config(Path::new("unused"));
    let names = |axis| ablation_variants(&cfg, axis).into_iter().map(|c| c.variant).collect::<Vec<_>>();
    assert_eq!(names(AblationAxis::N1n2), ["10:0", "8:2", "5:5", "2:8", "0:10"]);
    assert_eq!(names(AblationAxis::Components), ["CoT-SFT-only", "+DAPO", "+Intra", "+Inter", "+Both"]);
    assert_eq!(names(AblationAxis::TrainingMethod), ["SFT-only", "RL-only", "No-Thinking", "Full"]);
    assert_eq!(names(AblationAxis::CotCount), ["1x", "2x", "3x"]);
    for c in ablation_variants(&cfg, AblationAxis::N1n2) {
        assert_eq!(c.tapo.tapo.n1 + c.tapo.tapo.n2, 10);
    }
}

#[test]
fn training_method_ablation_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let (rows, csv) = run_ablation(&cfg, AblationAxis::TrainingMethod).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(csv.lines().count(), 5);
    assert!(rows.iter().all(|r| r.values.len() == 6 && r.values.iter().all(|(_, v)| v.is_finite())));
    let axis = dir.path().join("ablate-training_method");
    assert_eq!(fs::read_to_string(axis.join("comparison.csv")).unwrap(), csv);
    let m: RunManifest =
        serde_json::from_slice(&fs::read(axis.join("No-Thinking").join("manifest.json")).unwrap()).unwrap();
    let cot = fs::read_to_string(m.stage_dir(dir.path(), 5, Stage::Sft).unwrap().join("cot.jsonl")).unwrap();
    let records: Vec<CoTRecord> = cot.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty());
    for r in &records {
        assert!(r.target_text.starts_with("<answer>") && !r.target_text.contains("<think>"), "{}", r.target_text);
    }
}
