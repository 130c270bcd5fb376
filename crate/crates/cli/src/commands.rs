use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use mycoclip::captions::remote::{HttpTransport, RecordingTransport, ReplayTransport, Transport};
use mycoclip::captions::{caption_stats, fetch_remote_captions, generate_set, CaptionSet};
use mycoclip::config::{PipelineConfig, Precision, Provider};
use mycoclip::dataset::{
    build_dataset, caption_seed, load_dataset, replace_captions, DatasetView, Split, MANIFEST_FILE,
};
use mycoclip::embed::Checkpoint;
use mycoclip::train::{train, EpochMetrics, CHECKPOINT_FILE};
use mycoclip::zeroshot::{build_prototypes, caption_texts, evaluate, EvalReport};
use mycoclip::{Error, Scalar, StageClass};
use serde_json::json;

use crate::{Cli, Command};

pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Runtime(Error::Config(_)) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn resolve_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) if !path.exists() => {
            return Err(CliError::Usage(format!("config file {} not found", path.display())))
        }
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(count) = cli.count {
        cfg.set_total_images(count)?;
    }
    if let Some(epochs) = cli.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(p) = cli.provider {
        cfg.caption.provider = p.into();
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate => "generate",
        Command::Caption => "caption",
        Command::Train => "train",
        Command::Eval { .. } => "eval",
        Command::Pipeline => "pipeline",
    }
}

fn write_status(cfg: &PipelineConfig, command: &str, state: &str, detail: Option<String>) -> CliResult {
    let path = cfg.out.join("status.json");
    let body = json!({ "command": command, "state": state, "detail": detail });
    fs::write(&path, format!("{body:#}\n")).map_err(|e| CliError::Runtime(Error::Io { path, source: e }))
}

pub fn run(cli: &Cli) -> CliResult {
    let cfg = resolve_config(cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    let effective = cfg.out.join("config.toml");
    fs::write(&effective, cfg.to_toml()?).map_err(|e| Error::Io {
        path: effective,
        source: e,
    })?;
    let name = command_name(&cli.command);
    write_status(&cfg, name, "incomplete", None)?;
    let result = match &cli.command {
        Command::Generate => generate(&cfg),
        Command::Caption => caption(&cfg),
        Command::Train => train_cmd(&cfg).map(|_| ()),
        Command::Eval { split, checkpoint } => {
            let split = split.map(Split::from).unwrap_or(cfg.eval.split);
            eval_cmd(&cfg, split, checkpoint.as_deref()).map(|_| ())
        }
        Command::Pipeline => pipeline(&cfg),
    };
    match &result {
        Ok(()) => write_status(&cfg, name, "complete", None)?,
        Err(e) => write_status(&cfg, name, "failed", Some(e.to_string()))?,
    }
    result
}

fn manifest_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.dataset_dir().join(MANIFEST_FILE)
}

fn require_dataset(cfg: &PipelineConfig) -> CliResult<DatasetView> {
    let path = manifest_path(cfg);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "no dataset manifest at {}; run `mycoclip generate` first",
            path.display()
        )));
    }
    Ok(load_dataset(&path)?)
}

fn generate(cfg: &PipelineConfig) -> CliResult {
    let dir = cfg.dataset_dir();
    let manifest = build_dataset(&cfg.dataset, &dir)?;
    let view = load_dataset(&dir.join(MANIFEST_FILE))?;
    println!("dataset: {}", dir.display());
    println!("{:<10}{:>8}{:>8}{:>8}", "class", "train", "val", "test");
    for class in StageClass::ALL {
        print!("{:<10}", class.name());
        for split in Split::ALL {
            print!("{:>8}", manifest.count(split, class));
        }
        println!();
    }
    print!("{:<10}", "total");
    for split in Split::ALL {
        print!("{:>8}", manifest.split_count(split));
    }
    println!();
    println!("images: {}", manifest.images.len());
    println!("manifest sha256: {}", view.manifest_sha256());
    Ok(())
}

fn transport(cfg: &PipelineConfig) -> CliResult<Box<dyn Transport>> {
    let c = &cfg.caption;
    let base: Box<dyn Transport> = match &c.replay_dir {
        Some(dir) => Box::new(ReplayTransport::new(dir.clone())),
        None => Box::new(HttpTransport::new(Duration::from_secs(c.endpoint.timeout_s))?),
    };
    Ok(match &c.record_dir {
        Some(dir) => Box::new(RecordingTransport::new(base, dir.clone())),
        None => base,
    })
}

fn caption(cfg: &PipelineConfig) -> CliResult {
    let path = manifest_path(cfg);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "no dataset manifest at {}; run `mycoclip generate` first",
            path.display()
        )));
    }
    let constraints = &cfg.dataset.captions;
    let sets: Vec<CaptionSet> = match cfg.caption.provider {
        Provider::Template => StageClass::ALL
            .iter()
            .map(|&class| generate_set(class, &cfg.dataset.template, constraints, caption_seed(cfg.seed)))
            .collect::<Result<_, _>>()?,
        Provider::Remote => {
            let endpoint = &cfg.caption.endpoint;
            let key = std::env::var(&endpoint.api_key_env).ok();
            if key.is_none() && cfg.caption.replay_dir.is_none() {
                return Err(CliError::Usage(format!(
                    "remote provider needs an API key in ${}",
                    endpoint.api_key_env
                )));
            }
            let transport = transport(cfg)?;
            StageClass::ALL
                .iter()
                .map(|&class| fetch_remote_captions(class, endpoint, constraints, transport.as_ref(), key.as_deref()))
                .collect::<Result<_, _>>()?
        }
    };
    replace_captions(&path, &sets)?;
    println!("{:<10}{:>8}{:>10}{:>8}  provider", "class", "count", "mean_len", "vocab");
    for set in &sets {
        let s = caption_stats(set);
        println!(
            "{:<10}{:>8}{:>10.2}{:>8}  {}",
            set.class.name(),
            s.count,
            s.mean_len,
            s.vocabulary,
            set.provider
        );
    }
    Ok(())
}

fn print_epoch(m: &EpochMetrics) {
    println!(
        "epoch {:>3}  loss {:.4} (image {:.4}, text {:.4})  tau {:.4}  trainable {:>6}  val R@1 {:.3}",
        m.epoch, m.l_total, m.l_image, m.l_text, m.tau, m.trainable_params, m.val_recall_at_1
    );
}

fn train_typed<F: Scalar>(cfg: &PipelineConfig, view: &DatasetView) -> CliResult<f64> {
    let dir = cfg.model_dir();
    match train::<F>(view, &cfg.train, Some(&dir), print_epoch) {
        Ok(outcome) => {
            let last = outcome.metrics.last().map(|m| m.val_recall_at_1).unwrap_or(0.0);
            println!("checkpoint: {}", dir.join(CHECKPOINT_FILE).display());
            println!("final val Recall@1: {last:.4}");
            Ok(last)
        }
        Err(e @ Error::Diverged { .. }) => {
            eprintln!("last good checkpoint: {}", dir.join(CHECKPOINT_FILE).display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn train_cmd(cfg: &PipelineConfig) -> CliResult<f64> {
    let view = require_dataset(cfg)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &view),
        Precision::F64 => train_typed::<f64>(cfg, &view),
    }
}

fn eval_typed<F: Scalar>(
    cfg: &PipelineConfig,
    view: &DatasetView,
    split: Split,
    checkpoint: &Path,
) -> CliResult<EvalReport> {
    let ckpt = Checkpoint::<F>::load(checkpoint)?;
    ckpt.ensure_manifest(view.manifest_sha256())?;
    let prototypes = build_prototypes(&ckpt.pair, &caption_texts(view), cfg.eval.prototypes)?;
    let report = evaluate(view, split, &ckpt.pair, &prototypes)?;
    let dir = cfg.eval_dir(split);
    let run = json!({
        "checkpoint": checkpoint.display().to_string(),
        "checkpoint_epochs": ckpt.epoch,
        "manifest_sha256": view.manifest_sha256(),
        "prototypes": cfg.eval.prototypes,
        "temperature": ckpt.pair.temperature().as_f64(),
        "config": cfg,
    });
    report.write(&dir, Some(&run))?;
    println!("split {split}: Recall@1 {:.4} ({} of {})", report.recall_at_1, report.samples.len() - report.errors(), report.samples.len());
    println!("{:<10}{:>10}{:>10}{:>10}", "truth\\pred", "spore", "hyphae", "mycelium");
    for class in StageClass::ALL {
        let row = report.confusion[class.ordinal()];
        println!("{:<10}{:>10}{:>10}{:>10}", class.name(), row[0], row[1], row[2]);
    }
    println!("report: {}", dir.display());
    Ok(report)
}

fn eval_cmd(cfg: &PipelineConfig, split: Split, checkpoint: Option<&Path>) -> CliResult<EvalReport> {
    let view = require_dataset(cfg)?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.model_dir().join(CHECKPOINT_FILE));
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, &view, split, &path),
        Precision::F64 => eval_typed::<f64>(cfg, &view, split, &path),
    }
}

fn pipeline(cfg: &PipelineConfig) -> CliResult {
    println!("== generate");
    generate(cfg)?;
    println!("== caption");
    caption(cfg)?;
    println!("== train");
    let val = train_cmd(cfg)?;
    println!("== eval");
    let report = eval_cmd(cfg, cfg.eval.split, None)?;
    println!("== summary");
    println!("seed {}  images {}  epochs {}", cfg.seed, cfg.dataset.total_images(), cfg.train.epochs);
    println!("val Recall@1 {val:.4}  {} Recall@1 {:.4}", cfg.eval.split, report.recall_at_1);
    println!("run directory: {}", cfg.out.display());
    Ok(())
}
