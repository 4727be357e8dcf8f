//! Pipeline commands. Each one turns resolved settings into named output
//! files; [`execute`] writes them next to a manifest that is enough to rerun
//! the command.

use std::path::{Path, PathBuf};

use catext_core::dataspace::{split_by_classes, Annotation, Category, CategoryId, DatasetView, ImageRecord, Source};
use catext_core::toydet::{
    evaluate_model, gen_scenario, mc_passes, mine_detections, retrain, LossRecord, Scenario, ToyModel,
};
use catext_core::weights::Strategy;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coco::{self, CocoFile};
use crate::dump;
use crate::error::{CliError, Result};
use crate::files;
use crate::report::{comparison, EvalReport};
use crate::settings::{EvalSettings, GenSettings, MineSettings, ReportSettings, SplitSettings, TrainSettings};

pub const MANIFEST_FILE: &str = "manifest.json";

const TRAIN_STRATEGIES: [Strategy; 3] = [Strategy::Plain, Strategy::ConflictFree, Strategy::DatasetAware];
const RETRAIN_STRATEGIES: [Strategy; 4] = [
    Strategy::OverlapWeighted,
    Strategy::ConflictFree,
    Strategy::SafeNegatives,
    Strategy::AsFullyLabeled,
];

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Split(SplitSettings),
    Gen(GenSettings),
    Train(TrainSettings),
    Mine(MineSettings),
    Retrain(TrainSettings),
    Eval(EvalSettings),
    Report(ReportSettings),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved settings; a rerun uses exactly these.
    pub settings: Value,
    /// Config files that fed the settings, for the record only.
    pub config_files: Vec<FileHash>,
    /// Input files, checked again on rerun.
    pub inputs: Vec<FileHash>,
    /// Outputs, relative to the run directory.
    pub outputs: Vec<FileHash>,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("settings serialize to JSON")
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Split(_) => "split",
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Mine(_) => "mine",
            Command::Retrain(_) => "retrain",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
        }
    }

    pub fn settings(&self) -> Value {
        match self {
            Command::Split(s) => to_value(s),
            Command::Gen(s) => to_value(s),
            Command::Train(s) | Command::Retrain(s) => to_value(s),
            Command::Mine(s) => to_value(s),
            Command::Eval(s) => to_value(s),
            Command::Report(s) => to_value(s),
        }
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        fn parse<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T> {
            serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("manifest settings: {e}")))
        }
        let s = &manifest.settings;
        Ok(match manifest.command.as_str() {
            "split" => Command::Split(parse(s)?),
            "gen" => Command::Gen(parse(s)?),
            "train" => Command::Train(parse(s)?),
            "mine" => Command::Mine(parse(s)?),
            "retrain" => Command::Retrain(parse(s)?),
            "eval" => Command::Eval(parse(s)?),
            "report" => Command::Report(parse(s)?),
            other => return Err(CliError::Config(format!("unknown command `{other}` in manifest"))),
        })
    }

    pub fn inputs(&self) -> Result<Vec<PathBuf>> {
        Ok(match self {
            Command::Split(s) => vec![s.input.clone()],
            Command::Gen(_) => vec![],
            Command::Train(s) | Command::Retrain(s) => {
                let mut v = vec![s.scenario.clone()];
                v.extend(s.pseudo.clone());
                v.extend(s.high_recall.clone());
                v
            }
            Command::Mine(s) => vec![s.scenario.clone(), s.model.clone()],
            Command::Eval(s) => vec![s.scenario.clone(), s.model.clone()],
            Command::Report(s) => s.runs.iter().map(|r| parse_run(r).map(|(_, p)| p)).collect::<Result<_>>()?,
        })
    }

    /// Runs the command and returns its outputs as `(file name, bytes)`.
    pub fn run(&self) -> Result<Vec<(String, Vec<u8>)>> {
        match self {
            Command::Split(s) => run_split(s),
            Command::Gen(s) => run_gen(s),
            Command::Train(s) => run_train(s, false),
            Command::Retrain(s) => run_train(s, true),
            Command::Mine(s) => run_mine(s),
            Command::Eval(s) => run_eval(s),
            Command::Report(s) => run_report(s),
        }
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("outputs serialize to JSON");
    s.push('\n');
    s.into_bytes()
}

fn require_path(p: &Path, what: &str) -> Result<()> {
    if p.as_os_str().is_empty() {
        Err(CliError::Config(format!("missing {what} path")))
    } else {
        Ok(())
    }
}

fn run_split(s: &SplitSettings) -> Result<Vec<(String, Vec<u8>)>> {
    require_path(&s.input, "input")?;
    let stem = s.input.file_stem().and_then(|x| x.to_str()).unwrap_or("dataset");
    let name = s.name.clone().unwrap_or_else(|| stem.to_string());
    let full = coco::load_view(&s.input, &name)?;
    let held: Vec<&str> = s.held.iter().map(String::as_str).collect();
    let (kept, removed) = split_by_classes(&full, &held)?;
    let summary = serde_json::json!({
        "images": full.images.len(),
        "annotations": full.annotations.len(),
        "kept_images": kept.images.len(),
        "kept_annotations": kept.annotations.len(),
        "held_images": removed.images.len(),
        "held_annotations": removed.annotations.len(),
    });
    Ok(vec![
        ("kept.json".into(), json_bytes(&CocoFile::from_view(&kept))),
        ("held.json".into(), json_bytes(&CocoFile::from_view(&removed))),
        ("split_summary.json".into(), json_bytes(&summary)),
    ])
}

/// Union categories of a scenario, ids `0..K`.
fn union_categories(s: &Scenario) -> Vec<Category> {
    s.union
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| Category { id: CategoryId(i), name: n.clone() })
        .collect()
}

fn union_view(s: &Scenario, name: &str, eval: bool, annotations: Vec<Annotation>) -> DatasetView {
    let scenes = if eval { &s.eval_scenes } else { &s.scenes };
    DatasetView {
        name: name.into(),
        images: scenes
            .iter()
            .map(|sc| ImageRecord {
                id: sc.image_id,
                width: s.spec.image_size,
                height: s.spec.image_size,
                file_name: format!("synthetic/{:06}.png", sc.image_id),
            })
            .collect(),
        annotations,
        categories: union_categories(s),
    }
}

fn run_gen(spec: &GenSettings) -> Result<Vec<(String, Vec<u8>)>> {
    let s = gen_scenario(spec)?;
    let mut out = vec![("scenario.json".to_string(), json_bytes(&s))];
    for d in &s.datasets {
        out.push((format!("{}.json", d.name), json_bytes(&CocoFile::from_view(d))));
    }
    let truth = union_view(&s, "truth", false, s.truth.clone());
    let eval_truth = union_view(&s, "eval_truth", true, s.eval_truth.clone());
    out.push(("truth.json".into(), json_bytes(&CocoFile::from_view(&truth))));
    out.push(("eval_truth.json".into(), json_bytes(&CocoFile::from_view(&eval_truth))));
    Ok(out)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    require_path(path, "scenario")?;
    let s: Scenario = files::read_json(path)?;
    s.spec.validate()?;
    Ok(s)
}

pub fn load_model(path: &Path, scenario: &Scenario) -> Result<ToyModel> {
    require_path(path, "model")?;
    let m: ToyModel = files::read_json(path)?;
    let (k, dim) = (scenario.spec.num_classes(), scenario.spec.feature_dim());
    let consistent = m.n_classes == k
        && m.dim == dim
        && m.cls_weights.len() == k * dim
        && m.cls_bias.len() == k
        && m.reg_weights.len() == 4 * dim
        && m.is_finite();
    if !consistent {
        return Err(CliError::Format {
            path: path.to_path_buf(),
            message: format!("model does not fit the scenario ({k} classes, {dim} features)"),
        });
    }
    Ok(m)
}

fn load_mined(path: &Path, scenario: &Scenario) -> Result<Vec<Annotation>> {
    let view = coco::load_view(path, "mined")?;
    let k = scenario.spec.num_classes();
    for a in &view.annotations {
        if a.source != Source::Pseudo || a.category.0 >= k {
            return Err(CliError::Format {
                path: path.to_path_buf(),
                message: format!("annotation {} is not a pseudo annotation of a scenario class", a.id),
            });
        }
    }
    Ok(view.annotations)
}

pub fn loss_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("epoch,L_cls,L_loc,L_total\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.cls, r.loc, r.total));
    }
    s
}

fn run_train(s: &TrainSettings, retraining: bool) -> Result<Vec<(String, Vec<u8>)>> {
    let allowed: &[Strategy] = if retraining { &RETRAIN_STRATEGIES } else { &TRAIN_STRATEGIES };
    if !allowed.contains(&s.strategy) {
        let names: Vec<&str> = allowed.iter().map(|x| x.tag()).collect();
        return Err(CliError::Config(format!(
            "strategy `{}` is not available here; choose one of {}",
            s.strategy,
            names.join(", ")
        )));
    }
    if !retraining && (s.pseudo.is_some() || s.high_recall.is_some()) {
        return Err(CliError::Config("mined annotations are only used by `retrain`".into()));
    }
    if s.strategy == Strategy::SafeNegatives && s.high_recall.is_none() {
        return Err(CliError::Config("safe_negatives needs --high-recall".into()));
    }
    let scenario = load_scenario(&s.scenario)?;
    let pseudo = match &s.pseudo {
        Some(p) => load_mined(p, &scenario)?,
        None => Vec::new(),
    };
    let high_recall = match &s.high_recall {
        Some(p) => load_mined(p, &scenario)?,
        None => Vec::new(),
    };
    let out = retrain(&scenario, &pseudo, &high_recall, &s.train_config())?;
    Ok(vec![
        ("model.json".into(), json_bytes(&out.model)),
        ("loss.csv".into(), loss_csv(&out.trace).into_bytes()),
    ])
}

fn run_mine(s: &MineSettings) -> Result<Vec<(String, Vec<u8>)>> {
    let scenario = load_scenario(&s.scenario)?;
    let model = load_model(&s.model, &scenario)?;
    let config = s.mining_config();
    let dets = mc_passes(&model, &scenario.spec, &scenario.scenes, &config, s.seed)?;
    let mined = mine_detections(&scenario, &dets, &config)?;
    let view = union_view(&scenario, "mined", false, mined);
    Ok(vec![
        ("detections.jsonl".into(), dump::to_jsonl(&dets).into_bytes()),
        ("pseudo.json".into(), json_bytes(&CocoFile::from_view(&view))),
    ])
}

fn run_eval(s: &EvalSettings) -> Result<Vec<(String, Vec<u8>)>> {
    let scenario = load_scenario(&s.scenario)?;
    let model = load_model(&s.model, &scenario)?;
    let eval = evaluate_model(&model, &scenario, s.tau_nms)?;
    Ok(vec![("eval.json".into(), json_bytes(&EvalReport::new(&scenario, &eval)))])
}

fn parse_run(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok((label.to_string(), PathBuf::from(path))),
        _ => Err(CliError::Config(format!("expected LABEL=PATH, got `{spec}`"))),
    }
}

fn run_report(s: &ReportSettings) -> Result<Vec<(String, Vec<u8>)>> {
    if s.runs.is_empty() {
        return Err(CliError::Config("report needs at least one LABEL=PATH run".into()));
    }
    let runs = s
        .runs
        .iter()
        .map(|r| {
            let (label, path) = parse_run(r)?;
            Ok((label, files::read_json::<EvalReport>(&path)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (csv, md) = comparison(&runs);
    Ok(vec![("report.csv".into(), csv.into_bytes()), ("report.md".into(), md.into_bytes())])
}

fn hash_all(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.clone(),
                sha256: files::sha256_file(p)?,
            })
        })
        .collect()
}

fn write_run(command: &Command, out_dir: &Path, config_files: Vec<FileHash>) -> Result<Manifest> {
    let inputs = hash_all(&command.inputs()?)?;
    let outputs = command.run()?;
    let mut hashes = Vec::with_capacity(outputs.len());
    for (name, bytes) in &outputs {
        files::write(&out_dir.join(name), bytes)?;
        hashes.push(FileHash {
            path: PathBuf::from(name),
            sha256: files::sha256_hex(bytes),
        });
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.name().into(),
        settings: command.settings(),
        config_files,
        inputs,
        outputs: hashes,
    };
    files::write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Runs `command`, writes its outputs and `manifest.json` under `out_dir`.
pub fn execute(command: &Command, out_dir: &Path, config_files: &[PathBuf]) -> Result<Manifest> {
    write_run(command, out_dir, hash_all(config_files)?)
}

/// Re-executes a recorded run into `out_dir` after checking that its inputs
/// are unchanged. Config files only shaped the recorded settings, so their
/// recorded hashes are carried over without being read.
pub fn rerun(manifest_path: &Path, out_dir: &Path) -> Result<Manifest> {
    let recorded: Manifest = files::read_json(manifest_path)?;
    for input in &recorded.inputs {
        let found = files::sha256_file(&input.path)?;
        if found != input.sha256 {
            return Err(CliError::HashMismatch {
                path: input.path.clone(),
                expected: input.sha256.clone(),
                found,
            });
        }
    }
    let command = Command::from_manifest(&recorded)?;
    write_run(&command, out_dir, recorded.config_files)
}
