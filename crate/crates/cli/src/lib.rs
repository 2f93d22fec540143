//! Commands behind the `orthotune` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use orthotune::adapters::AdapterMode;
use orthotune::checkpoint::{file_hash, Container};
use orthotune::config::RunConfig;
use orthotune::dataset::{generate_with, harmonic_mean, FewShotSplit};
use orthotune::model::DualEncoder;
use orthotune::pretrain::pretrain;
use orthotune::trainer::{evaluate, finetune, write_metrics, TrainConfig};
use orthotune::{Error, Matrix, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.ocrk";
pub const DATASET_FILE: &str = "dataset.ocrk";
pub const ADAPTERS_FILE: &str = "adapters.ocrk";
pub const MERGED_FILE: &str = "merged.ocrk";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Parser)]
#[command(name = "orthotune", version, about = "Orthogonal adapter finetuning for a toy dual encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and pretrain the frozen model.
    Pretrain(PretrainArgs),
    /// Train adapters on the base-class few-shot set.
    Finetune(FinetuneArgs),
    /// Report base, new and harmonic-mean accuracy.
    Eval(EvalArgs),
    /// Fold adapters into the frozen weights.
    Merge(MergeArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// key = value config file; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Training keys of a config file; flags override them.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub adapter: Option<AdapterMode>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub cutout_min: Option<usize>,
    #[arg(long)]
    pub cutout_max: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds to run, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Use the 5-epoch, lr 1e-5 schedule instead of the desk default.
    #[arg(long)]
    pub reference_schedule: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Adapter file; zero-shot evaluation without it.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub adapters: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 3,
        Error::Compatibility(_) | Error::Format { .. } => 4,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Merge(a) => cmd_merge(&a),
    }
}

/// Record of one command invocation, written as `manifest.txt` in its
/// output directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub entries: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Records an input path and the SHA-256 of its bytes.
    pub fn input(&mut self, name: &str, path: &Path) -> Result<String> {
        let hash = file_hash(path)?;
        self.set(&format!("input.{name}"), path.display());
        self.set(&format!("input.{name}.sha256"), &hash);
        Ok(hash)
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.set(&format!("output.{name}"), path.display());
    }

    pub fn config(&mut self, c: &RunConfig) {
        for line in c.to_text().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                self.set(&format!("config.{k}"), v);
            }
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(MANIFEST_FILE), &self.to_text())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<DualEncoder> {
    let c = Container::read(path)?;
    if c.meta("kind").ok() != Some("checkpoint") {
        return Err(Error::Compatibility(format!("{} is not a model checkpoint", path.display())));
    }
    DualEncoder::from_container(&c)
}

/// Adapter tensors plus the hash of the checkpoint they were trained on.
pub fn adapter_container(model: &DualEncoder, base_hash: &str, mode: AdapterMode) -> Result<Container> {
    let mut c = Container::new();
    for (name, m) in model.adapter_tensors() {
        c.push_matrix(name, &m)?;
    }
    c.manifest.insert("kind".into(), "adapters".into());
    c.manifest.insert("adapter".into(), mode.as_str().into());
    c.manifest.insert("base_sha256".into(), base_hash.into());
    Ok(c)
}

/// Loads `checkpoint` and installs the adapters of `adapters`, checking that
/// they were trained against that exact checkpoint file.
pub fn load_with_adapters(checkpoint: &Path, adapters: &Path) -> Result<DualEncoder> {
    let mut model = load_checkpoint(checkpoint)?;
    let base_hash = file_hash(checkpoint)?;
    let c = Container::read(adapters)?;
    if c.meta("kind").ok() != Some("adapters") {
        return Err(Error::Compatibility(format!("{} is not an adapter file", adapters.display())));
    }
    let expected = c
        .meta("base_sha256")
        .map_err(|_| Error::Compatibility(format!("{} has no base checkpoint hash", adapters.display())))?;
    if expected != base_hash {
        return Err(Error::Compatibility(format!(
            "adapters were trained on checkpoint {expected}, but {} is {base_hash}",
            checkpoint.display()
        )));
    }
    let tensors = c
        .tensors()
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.to_matrix()?)))
        .collect::<Result<BTreeMap<String, Matrix>>>()?;
    model.load_adapter_tensors(&tensors)?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Report {
    pub base: f64,
    pub new: f64,
    pub hm: f64,
    pub trainable_params: usize,
}

pub const REPORT_HEADER: &str = "base,new,hm,trainable_params";

impl Report {
    /// Accuracies in percent.
    pub fn measure(model: &DualEncoder, split: &FewShotSplit) -> Result<Self> {
        let adapted = model.has_adapters();
        let base = 100.0 * evaluate(model, &split.base_test, &split.base_ids, adapted)?;
        let new = 100.0 * evaluate(model, &split.new_test, &split.new_ids, adapted)?;
        Ok(Self {
            base,
            new,
            hm: harmonic_mean(base, new),
            trainable_params: model.trainable_count(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.base, self.new, self.hm, self.trainable_params)
    }
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<String> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let mut manifest = RunManifest::new("pretrain");
    if let Some(p) = &a.config {
        manifest.input("config", p)?;
    }
    manifest.config(&config);
    let split = generate_with(&config.data, config.seed)?;
    let (model, losses) = pretrain(&config.encoder(), &split, &config.pretrain())?;

    let ckpt = a.out.join(CHECKPOINT_FILE);
    let data = a.out.join(DATASET_FILE);
    model.to_container()?.write(&ckpt)?;
    split.write(&data)?;
    manifest.output("checkpoint", &ckpt);
    manifest.set("output.checkpoint.sha256", file_hash(&ckpt)?);
    manifest.output("dataset", &data);
    manifest.set("output.dataset.sha256", file_hash(&data)?);
    manifest.write(&a.out)?;

    let r = Report::measure(&model, &split)?;
    let last = losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "pretrained {} steps, final loss {last:.4}, tau {:.4}\nzero-shot base {:.2} new {:.2} hm {:.2}\n",
        losses.len(),
        model.tau(),
        r.base,
        r.new,
        r.hm
    ))
}

fn finetune_config(a: &FinetuneArgs) -> Result<(RunConfig, TrainConfig)> {
    let mut run = load_config(a.config.as_deref())?;
    if a.reference_schedule {
        let p = TrainConfig::reference();
        run.train.epochs = p.epochs;
        run.train.lr = p.lr;
        run.train.warmup_lr = p.warmup_lr;
        run.train.warmup_epochs = p.warmup_epochs;
        run.train.batch_size = p.batch_size;
    }
    let t = &mut run.train;
    if let Some(m) = a.adapter {
        t.mode = m;
    }
    if let Some(v) = a.lambda1 {
        t.weights.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        t.weights.lambda2 = v;
    }
    if let Some(v) = a.cutout_min {
        t.cutout.k_min = v;
    }
    if let Some(v) = a.cutout_max {
        t.cutout.k_max = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.seed {
        run.seed = v;
    }
    if a.seeds == 0 {
        return Err(Error::contract("--seeds must be at least 1"));
    }
    run.validate()?;
    let train = run.finetune();
    Ok((run, train))
}

pub fn cmd_finetune(a: &FinetuneArgs) -> Result<String> {
    let (run, base_train) = finetune_config(a)?;
    let mut manifest = RunManifest::new("finetune");
    if let Some(p) = &a.config {
        manifest.input("config", p)?;
    }
    let base_hash = manifest.input("checkpoint", &a.checkpoint)?;
    manifest.input("dataset", &a.dataset)?;
    manifest.config(&run);
    manifest.set("seeds", a.seeds);
    if a.reference_schedule {
        manifest.set("schedule", "reference");
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let split = FewShotSplit::read(&a.dataset)?;
    if split.classes != model.config().classes {
        return Err(Error::Compatibility(format!(
            "dataset has {} classes, checkpoint {}",
            split.classes,
            model.config().classes
        )));
    }

    let mut out = String::new();
    let mut summary = format!("seed,{REPORT_HEADER}\n");
    let mut sums = [0.0; 3];
    for s in 0..a.seeds {
        let seed = run.seed + s;
        let config = TrainConfig { seed, ..base_train.clone() };
        let (tuned, rows) = finetune(&model, &split, &config)?;
        let dir = if a.seeds == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("seed-{seed}"))
        };
        let adapters = dir.join(ADAPTERS_FILE);
        let metrics = dir.join(METRICS_FILE);
        adapter_container(&tuned, &base_hash, config.mode)?.write(&adapters)?;
        write_metrics(&metrics, &rows)?;
        manifest.output(&format!("seed.{seed}.adapters"), &adapters);
        manifest.output(&format!("seed.{seed}.metrics"), &metrics);

        let r = Report::measure(&tuned, &split)?;
        sums[0] += r.base;
        sums[1] += r.new;
        sums[2] += r.hm;
        summary.push_str(&format!("{seed},{}\n", r.csv_row()));
        let last = rows.last().map(|r| r.terms.total).unwrap_or(f64::NAN);
        out.push_str(&format!(
            "seed {seed}: {} steps, final loss {last:.4}, base {:.2} new {:.2} hm {:.2}\n",
            rows.len(),
            r.base,
            r.new,
            r.hm
        ));
    }
    if a.seeds > 1 {
        let n = a.seeds as f64;
        out.push_str(&format!(
            "mean over {} seeds: base {:.2} new {:.2} hm {:.2}\n",
            a.seeds,
            sums[0] / n,
            sums[1] / n,
            sums[2] / n
        ));
        let path = a.out.join(SUMMARY_FILE);
        write_text(&path, &summary)?;
        manifest.output("summary", &path);
    }
    manifest.write(&a.out)?;
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let mut manifest = RunManifest::new("eval");
    manifest.input("checkpoint", &a.checkpoint)?;
    manifest.input("dataset", &a.dataset)?;
    let model = match &a.adapters {
        Some(p) => {
            manifest.input("adapters", p)?;
            load_with_adapters(&a.checkpoint, p)?
        }
        None => load_checkpoint(&a.checkpoint)?,
    };
    let split = FewShotSplit::read(&a.dataset)?;
    let r = Report::measure(&model, &split)?;
    let path = a.out.join(REPORT_FILE);
    write_text(&path, &format!("{REPORT_HEADER}\n{}\n", r.csv_row()))?;
    manifest.output("report", &path);
    manifest.write(&a.out)?;
    Ok(format!(
        "base {:.2} new {:.2} hm {:.2} trainable params {}\n",
        r.base, r.new, r.hm, r.trainable_params
    ))
}

pub fn cmd_merge(a: &MergeArgs) -> Result<String> {
    let mut manifest = RunManifest::new("merge");
    manifest.input("checkpoint", &a.checkpoint)?;
    manifest.input("adapters", &a.adapters)?;
    let model = load_with_adapters(&a.checkpoint, &a.adapters)?;
    let merged = model.merged();
    let path = a.out.join(MERGED_FILE);
    merged.to_container()?.write(&path)?;
    manifest.output("merged", &path);
    manifest.set("output.merged.sha256", file_hash(&path)?);
    manifest.write(&a.out)?;
    Ok(format!("merged {} adapter tensors into {}\n", model.adapter_tensors().len(), path.display()))
}
