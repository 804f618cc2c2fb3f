//! Command-line driver.

pub mod checkpoint;
pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

use crate::data::Dataset;
use crate::metrics;
use crate::trainer::{IterationRecord, PretrainRecord, Trainer};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DataSpec, ModelSettings, Settings, Source};

/// Failures of a CLI invocation, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit code 1.
    #[error("usage: {0}")]
    Usage(String),
    /// Exit code 2.
    #[error(transparent)]
    Runtime(#[from] crate::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tdec", about = "Deep embedded image clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Structure-loss pretraining; writes `pretrain.ckpt` and `pretrain.csv`.
    Pretrain(Common),
    /// Joint training; pretrains first unless `--checkpoint` is given.
    Train(Common),
    /// Prints ACC and NMI of a checkpoint on a labeled dataset.
    Eval(Common),
    /// Writes the 2-D clustering-space coordinates and assigned labels.
    Embed(Common),
    /// Trains once per neighbor count in `--list`.
    SweepK {
        #[command(flatten)]
        common: Common,
        /// Comma-separated neighbor counts.
        #[arg(long, value_delimiter = ',', required = true)]
        list: Vec<usize>,
    },
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Pretrain(c) => pretrain(&c),
        Command::Train(c) => train(&c),
        Command::Eval(c) => eval(&c),
        Command::Embed(c) => embed(&c),
        Command::SweepK { common, list } => sweep_k(&common, &list),
    }
}

fn settings(c: &Common) -> Result<Settings, CliError> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut s = Settings::from_file(path)?;
    if let Some(seed) = c.seed {
        s.run.seed = seed;
    }
    Ok(s)
}

fn out_dir(c: &Common, s: &Settings) -> Result<PathBuf, CliError> {
    let dir = c
        .out
        .clone()
        .or_else(|| s.out.clone())
        .ok_or_else(|| CliError::Usage("missing output directory: pass --out or set key `out`".into()))?;
    prepare_out(&dir, c.force)?;
    Ok(dir)
}

/// Creates `dir`, refusing a non-empty one unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| crate::Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    }
    Ok(())
}

fn load_data(s: &Settings) -> Result<Dataset, CliError> {
    let data = s.data.load(s.run.clusters, s.run.seed)?;
    info!("loaded {} images of {}x{}x{}", data.len(), data.channels(), data.height(), data.width());
    Ok(data)
}

fn fresh_trainer(s: &Settings, data: &Dataset) -> Result<Trainer, CliError> {
    let mc = s.model.model_config(data.grid()?, s.run.use_transformer);
    Ok(Trainer::new(mc, s.run.clone())?)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(crate::Error::io(path, e)))
}

fn real(v: f64) -> String {
    format!("{:.16e}", v)
}

fn opt_real(v: Option<f64>) -> String {
    v.map(real).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "iter,loss_total,loss_rec,loss_dim,loss_clu,label_change,acc,nmi";

/// `metrics.csv` contents.
pub fn metrics_csv(records: &[IterationRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.iter,
            real(r.losses.l_total),
            real(r.losses.l_rec),
            real(r.losses.l_dim),
            real(r.losses.l_clu),
            real(r.label_change),
            opt_real(r.acc),
            opt_real(r.nmi)
        );
    }
    s
}

fn pretrain_csv(records: &[PretrainRecord]) -> String {
    let mut s = String::from("epoch,loss_stru,loss_rec,loss_dim\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.epoch,
            real(r.losses.l_stru),
            real(r.losses.l_rec),
            real(r.losses.l_dim)
        );
    }
    s
}

fn labels_csv(labels: &[usize]) -> String {
    let mut s = String::from("index,label\n");
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i, l);
    }
    s
}

fn pretrain(c: &Common) -> Result<(), CliError> {
    let s = settings(c)?;
    let out = out_dir(c, &s)?;
    let data = load_data(&s)?;
    let mut t = fresh_trainer(&s, &data)?;
    let records = t.pretrain(&data)?;
    save_checkpoint(out.join("pretrain.ckpt"), &t.model, &s, &t.rng)?;
    write_file(&out.join("pretrain.csv"), &pretrain_csv(&records))
}

/// Trainer for `s`, resumed from a checkpoint or freshly initialized and pretrained.
fn ready_trainer(s: &Settings, data: &Dataset, checkpoint: Option<&Path>) -> Result<Trainer, CliError> {
    match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.model.config.grid != data.grid()? {
                return Err(CliError::Usage(format!(
                    "checkpoint grid {:?} does not match the dataset",
                    ck.model.config.grid
                )));
            }
            Ok(Trainer::from_parts(ck.model, s.run.clone(), ck.rng)?)
        }
        None => {
            let mut t = fresh_trainer(s, data)?;
            t.pretrain(data)?;
            Ok(t)
        }
    }
}

fn train(c: &Common) -> Result<(), CliError> {
    let s = settings(c)?;
    let out = out_dir(c, &s)?;
    let data = load_data(&s)?;
    let mut t = ready_trainer(&s, &data, c.checkpoint.as_deref())?;
    let report = t.train(&data)?;
    save_checkpoint(out.join("model.ckpt"), &t.model, &s, &t.rng)?;
    write_file(&out.join("metrics.csv"), &metrics_csv(&report.records))?;
    write_file(&out.join("labels.csv"), &labels_csv(&report.labels))?;
    if let Some(last) = report.records.last() {
        println!(
            "iterations {} converged {} acc {} nmi {}",
            last.iter,
            report.converged,
            opt_real(last.acc),
            opt_real(last.nmi)
        );
    }
    Ok(())
}

/// Checkpoint settings, with the dataset from `--config` when given.
fn checkpoint_and_data(c: &Common) -> Result<(Checkpoint, Settings, Dataset), CliError> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    let ck = load_checkpoint(path)?;
    let mut s = match &c.config {
        Some(_) => settings(c)?,
        None => ck.settings.clone(),
    };
    s.run.use_transformer = ck.settings.run.use_transformer;
    let data = load_data(&s)?;
    Ok((ck, s, data))
}

fn eval(c: &Common) -> Result<(), CliError> {
    let (ck, s, data) = checkpoint_and_data(c)?;
    let truth = data
        .labels
        .clone()
        .ok_or_else(|| CliError::Usage("eval needs a labeled dataset".into()))?;
    let t = Trainer::from_parts(ck.model, s.run, ck.rng)?;
    let (_, state) = t.assign(&data)?;
    println!(
        "acc {} nmi {}",
        real(metrics::accuracy(&state.labels, &truth)?),
        real(metrics::nmi(&state.labels, &truth)?)
    );
    Ok(())
}

fn embed(c: &Common) -> Result<(), CliError> {
    let (ck, s, data) = checkpoint_and_data(c)?;
    let out = out_dir(c, &s)?;
    let t = Trainer::from_parts(ck.model, s.run, ck.rng)?;
    let (emb, state) = t.assign(&data)?;
    let mut text = String::from("index,z1,z2,label\n");
    for (i, (z, l)) in emb.z_v.iter_rows().zip(&state.labels).enumerate() {
        let _ = writeln!(text, "{},{},{},{}", i, real(z[0]), real(z[1]), l);
    }
    write_file(&out.join("embeddings.csv"), &text)
}

fn sweep_k(c: &Common, list: &[usize]) -> Result<(), CliError> {
    let s = settings(c)?;
    let out = out_dir(c, &s)?;
    let data = load_data(&s)?;
    // Pretraining does not depend on k, so every entry starts from the same weights.
    let base = ready_trainer(&s, &data, c.checkpoint.as_deref())?;
    let mut text = String::from("k,iterations,loss_total,acc,nmi\n");
    for &k in list {
        let mut t = base.clone();
        t.config.k = k;
        let report = t.train(&data)?;
        let last = report.records.last().expect("training records at least one iteration");
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            k,
            last.iter,
            real(last.losses.l_total),
            opt_real(last.acc),
            opt_real(last.nmi)
        );
        info!("k = {}: acc {}", k, opt_real(last.acc));
    }
    write_file(&out.join("sweep_k.csv"), &text)
}
