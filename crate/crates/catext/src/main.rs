use std::path::{Path, PathBuf};
use std::process::ExitCode;

use catext::commands::{execute, rerun, Command, Manifest};
use catext::error::{CliError, Result};
use catext::files;
use catext::settings::{
    resolve, ConfigFile, EvalSettings, GenSettings, MineSettings, ReportSettings, SplitSettings, TrainSettings,
};
use catext_core::mining::MiningMode;
use catext_core::weights::Strategy;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

/// Multi-dataset detector training with conflict-free losses and
/// uncertainty-aware pseudo-label mining.
#[derive(Parser)]
#[command(name = "catext", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with one table per command, e.g. `[train]`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for outputs and the manifest.
    #[arg(long, global = true, env = "CATEXT_OUT", default_value = "catext-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Move the annotations of some categories of a COCO file into a second view.
    Split(SplitArgs),
    /// Generate a synthetic multi-dataset scenario.
    Gen(GenArgs),
    /// First training phase.
    Train(TrainArgs),
    /// Dropout passes over the training scenes and pseudo-label mining.
    Mine(MineArgs),
    /// Second training phase on ground truth plus mined annotations.
    Retrain(TrainArgs),
    /// Evaluate a model on the scenario's held-out scenes.
    Eval(EvalArgs),
    /// Compare several eval reports in one table.
    Report(ReportArgs),
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Serialize)]
struct SplitArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Comma-separated category names to hold out.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    held: Vec<String>,
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
}

#[derive(Args, Serialize)]
struct GenArgs {
    /// Scenario spec TOML; read after the config file and before flags.
    #[arg(long)]
    #[serde(skip)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images_per_dataset: Option<usize>,
    #[arg(long)]
    eval_images_per_dataset: Option<usize>,
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: catext_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<MiningMode, String> {
    s.parse().map_err(|e: catext_core::Error| e.to_string())
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// `scenario.json` written by `gen`.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Mined annotations (`pseudo.json` from `mine`).
    #[arg(long)]
    pseudo: Option<PathBuf>,
    /// High-recall mined annotations, for safe_negatives.
    #[arg(long)]
    high_recall: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau_s: Option<f64>,
    #[arg(long)]
    pos_iou: Option<f64>,
    #[arg(long)]
    neg_iou: Option<f64>,
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
}

#[derive(Args, Serialize)]
struct MineArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// `clc` scores clusters by class and box agreement, `cc` by class only.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<MiningMode>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    tau_nms: Option<f64>,
    #[arg(long)]
    min_score: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    tau_nms: Option<f64>,
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// `LABEL=PATH` pairs of eval reports.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    runs: Vec<String>,
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
}

#[derive(Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn flags<T: Serialize>(args: &T) -> Map<String, Value> {
    match serde_json::to_value(args) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    }
}

fn config_of(common: &Common) -> Result<ConfigFile> {
    match &common.config {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::default()),
    }
}

enum Job {
    Run { command: Box<Command>, config_files: Vec<PathBuf> },
    Rerun { manifest: PathBuf },
}

fn toml_layer(path: &Path) -> Result<Map<String, Value>> {
    let table: toml::Table = files::read_toml(path)?;
    match serde_json::to_value(table) {
        Ok(Value::Object(m)) => Ok(m),
        _ => Err(CliError::Config(format!("{}: expected a table", path.display()))),
    }
}

/// Resolves settings into a job and its run directory.
fn build(cmd: Cmd) -> Result<(Job, PathBuf)> {
    let no_file = ConfigFile::default();
    let (command, common, config_file) = match cmd {
        Cmd::Rerun(a) => return Ok((Job::Rerun { manifest: a.manifest }, a.common.out)),
        Cmd::Split(a) => {
            let cfg = config_of(&a.common)?;
            let s = resolve(SplitSettings::default(), &cfg, "split", flags(&a))?;
            (Command::Split(s), a.common, cfg.path)
        }
        Cmd::Gen(a) => {
            let cfg = config_of(&a.common)?;
            let mut s: GenSettings = resolve(GenSettings::default(), &cfg, "gen", Map::new())?;
            if let Some(spec) = &a.spec {
                s = resolve(s, &no_file, "gen", toml_layer(spec)?)?;
            }
            s = resolve(s, &no_file, "gen", flags(&a))?;
            let mut used: Vec<PathBuf> = cfg.path.into_iter().collect();
            used.extend(a.spec.clone());
            return Ok((Job::Run { command: Box::new(Command::Gen(s)), config_files: used }, a.common.out));
        }
        Cmd::Train(a) => {
            let cfg = config_of(&a.common)?;
            let s = resolve(TrainSettings::with_strategy(Strategy::ConflictFree), &cfg, "train", flags(&a))?;
            (Command::Train(s), a.common, cfg.path)
        }
        Cmd::Retrain(a) => {
            let cfg = config_of(&a.common)?;
            let s = resolve(TrainSettings::with_strategy(Strategy::OverlapWeighted), &cfg, "retrain", flags(&a))?;
            (Command::Retrain(s), a.common, cfg.path)
        }
        Cmd::Mine(a) => {
            let cfg = config_of(&a.common)?;
            let s = resolve(MineSettings::default(), &cfg, "mine", flags(&a))?;
            (Command::Mine(s), a.common, cfg.path)
        }
        Cmd::Eval(a) => {
            let cfg = config_of(&a.common)?;
            let s = resolve(EvalSettings::default(), &cfg, "eval", flags(&a))?;
            (Command::Eval(s), a.common, cfg.path)
        }
        Cmd::Report(a) => {
            let cfg = config_of(&a.common)?;
            let s = resolve(ReportSettings::default(), &cfg, "report", flags(&a))?;
            (Command::Report(s), a.common, cfg.path)
        }
    };
    let config_files = config_file.into_iter().collect();
    Ok((Job::Run { command: Box::new(command), config_files }, common.out))
}

fn run(cmd: Cmd) -> Result<Manifest> {
    match build(cmd)? {
        (Job::Run { command, config_files }, out) => execute(&command, &out, &config_files),
        (Job::Rerun { manifest }, out) => rerun(&manifest, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(m) => {
            let outputs: Vec<_> = m.outputs.iter().map(|o| o.path.display().to_string()).collect();
            println!("{}", serde_json::json!({ "command": m.command, "outputs": outputs }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}
