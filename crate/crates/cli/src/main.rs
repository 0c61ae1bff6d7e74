use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fgvr_lab::config::{ConfigError, ExperimentConfig};
use fgvr_lab::pipeline::{report, run_ablation, run_pipeline, AblationAxis, PipelineError, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "fgvr-lab", version, about = "CoT fine-tuning and triplet-augmented policy optimization on synthetic recognition worlds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config (`//` comments allowed); built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = "FGVR_LAB_OUT")]
    output_dir: Option<PathBuf>,
    /// Comma-separated root seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    shots: Option<usize>,
    #[arg(long, global = true)]
    seen_fraction: Option<f64>,
    #[arg(long, global = true)]
    sft_epochs: Option<usize>,
    #[arg(long, global = true)]
    sft_lr: Option<f64>,
    #[arg(long, global = true)]
    cot_count: Option<usize>,
    #[arg(long, global = true)]
    tapo_steps: Option<usize>,
    #[arg(long, global = true)]
    tapo_lr: Option<f64>,
    /// Override any config field by dotted path, e.g. `tapo.gamma=0.02`.
    #[arg(long = "set", global = true, value_name = "PATH=JSON")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate worlds, splits and few-shot sets.
    GenWorld,
    /// Run through chain-of-thought fine-tuning.
    Sft,
    /// Run through policy optimization.
    Train,
    /// Run through evaluation.
    Eval,
    /// Run every stage including representation analysis.
    Analyze,
    /// Alias for `analyze`.
    Run,
    /// Run all variants of one ablation axis and write a comparison CSV.
    Ablate {
        /// training_method, components, n1n2 or cot_count
        axis: AblationAxis,
    },
    /// Print metric tables of a completed run.
    Report,
    /// Print the resolved config.
    ShowConfig,
}

fn apply_set(value: &mut serde_json::Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("--set {spec:?}: expected PATH=VALUE")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = value;
    for key in path.split('.') {
        cur = match cur {
            serde_json::Value::Object(m) => m
                .get_mut(key)
                .ok_or_else(|| ConfigError::Invalid(format!("--set: no field {path:?}")))?,
            serde_json::Value::Array(a) => {
                let i: usize = key
                    .parse()
                    .map_err(|_| ConfigError::Invalid(format!("--set: {key:?} is not an index")))?;
                let len = a.len();
                a.get_mut(i)
                    .ok_or_else(|| ConfigError::Invalid(format!("--set: index {i} out of range ({len})")))?
            }
            _ => return Err(ConfigError::Invalid(format!("--set: {path:?} is not a field path"))),
        };
    }
    *cur = parsed;
    Ok(())
}

fn resolve(c: &Common) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &c.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &c.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(v) = &c.variant {
        cfg.variant = v.clone();
    }
    if let Some(v) = c.shots {
        cfg.shots = v;
    }
    if let Some(v) = c.seen_fraction {
        cfg.seen_fraction = v;
    }
    if let Some(v) = c.sft_epochs {
        cfg.sft.epochs = v;
    }
    if let Some(v) = c.sft_lr {
        cfg.sft.lr = v;
    }
    if let Some(v) = c.cot_count {
        cfg.sft.cot_count = v;
    }
    if let Some(v) = c.tapo_steps {
        cfg.tapo.tapo.steps = v;
    }
    if let Some(v) = c.tapo_lr {
        cfg.tapo.tapo.lr = v;
    }
    if !c.sets.is_empty() {
        let mut value = serde_json::to_value(&cfg)?;
        for s in &c.sets {
            apply_set(&mut value, s)?;
        }
        cfg = serde_json::from_value(value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = resolve(&cli.common)?;
    let until = match cli.command {
        Command::GenWorld => Stage::GenWorld,
        Command::Sft => Stage::Sft,
        Command::Train => Stage::Train,
        Command::Eval => Stage::Eval,
        Command::Analyze | Command::Run => Stage::Analyze,
        Command::Ablate { axis } => {
            let (_, csv) = run_ablation(&cfg, axis)?;
            print!("{csv}");
            return Ok(());
        }
        Command::Report => {
            let path = cfg.output_dir.join("manifest.json");
            let bytes = std::fs::read(&path).map_err(|source| PipelineError::Io { path, source })?;
            let manifest = serde_json::from_slice(&bytes)?;
            print!("{}", report(&manifest, &cfg.output_dir)?);
            return Ok(());
        }
        Command::ShowConfig => {
            println!("{}", cfg.to_json_pretty());
            return Ok(());
        }
    };
    let opts = RunOptions {
        until: Some(until),
        ..Default::default()
    };
    let manifest = run_pipeline(&cfg, &opts)?;
    if until >= Stage::Eval {
        print!("{}", report(&manifest, &cfg.output_dir)?);
    }
    log::info!("manifest written to {}", cfg.output_dir.join("manifest.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
