//! `run`: every (acquisition, repetition) pair of an experiment, persisted
//! as a manifest plus per-run CSV logs and member snapshots.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use alens_core::alloop::{self, RunOutput, RunRecord};
use alens_core::data::{make_splits, Dataset};
use alens_core::ensemble::members_to_json;
use alens_core::learner::LabeledSet;
use alens_core::AcquisitionKind;
use serde::{Deserialize, Serialize};

use crate::config::{DataFile, ExperimentConfig};
use crate::error::{io_err, CliError};
use crate::fetch::verify_present;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const ACQUIRED_FILE: &str = "acquired.csv";
pub const MEMBERS_FILE: &str = "members.json";
pub const RECORDS_HEADER: &str = "iteration,labeled_size,test_accuracy,brier,kl_imbalance,wall_seconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub acquisition: AcquisitionKind,
    pub repetition: usize,
    pub seed: u64,
    pub status: RunStatus,
    /// Run directory relative to the output directory.
    pub dir: PathBuf,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default)]
    pub final_labeled_size: Option<usize>,
    /// Smallest unclamped BALD estimate seen during the run.
    #[serde(default)]
    pub bald_raw_min: Option<f64>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub config: ExperimentConfig,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// False until every run has been attempted.
    pub complete: bool,
    pub runs: Vec<RunEntry>,
}

impl RunManifest {
    pub fn load(out_dir: &Path) -> Result<Self, CliError> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
    }

    fn save(&self, out_dir: &Path) -> Result<(), CliError> {
        let path = out_dir.join(MANIFEST_FILE);
        let tmp = out_dir.join(".manifest.json.tmp");
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(&tmp, text + "\n").map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    pub fn failed(&self) -> impl Iterator<Item = &RunEntry> {
        self.runs.iter().filter(|r| r.status == RunStatus::Failed)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn load_dataset(cfg: &ExperimentConfig, name: &str, images: &DataFile, labels: &DataFile) -> Result<Dataset, CliError> {
    let mut ds = Dataset::load(name, &cfg.data.resolve(images), &cfg.data.resolve(labels))?;
    let width = ds.image_shape.0 * ds.image_shape.1;
    let arch = cfg.architecture();
    if width != arch.n_inputs() {
        return Err(CliError::Config(format!(
            "{name} images have {width} pixels but the model expects {} inputs",
            arch.n_inputs()
        )));
    }
    if ds.n_classes > arch.n_classes() {
        return Err(CliError::Config(format!(
            "{name} has {} classes but the model has {} outputs",
            ds.n_classes,
            arch.n_classes()
        )));
    }
    ds.n_classes = arch.n_classes();
    Ok(ds)
}

pub fn run_dir(acquisition: AcquisitionKind, repetition: usize) -> PathBuf {
    PathBuf::from(acquisition.as_str()).join(format!("rep{repetition}"))
}

/// One CSV line per record; floats use the shortest round-trip form.
pub fn record_line(r: &RunRecord) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.iteration, r.labeled_size, r.test_accuracy, r.brier, r.kl_imbalance, r.wall_seconds
    )
}

fn write_acquired(path: &Path, out: &RunOutput, labels: &[usize]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut text = String::from("step,index,label\n");
    for &i in &out.initial {
        text.push_str(&format!("0,{i},{}\n", labels[i]));
    }
    for (step, batch) in out.acquired.iter().enumerate() {
        for &i in batch {
            text.push_str(&format!("{},{i},{}\n", step + 1, labels[i]));
        }
    }
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

struct Inputs {
    train: Dataset,
    test: Dataset,
}

fn run_one(cfg: &ExperimentConfig, inputs: &Inputs, entry: &mut RunEntry, out_dir: &Path) -> Result<(), CliError> {
    let dir = out_dir.join(&entry.dir);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let splits = make_splits(inputs.train.len(), inputs.test.len(), &cfg.split_spec(entry.seed))?;
    let val = LabeledSet::gather(&inputs.train.images, &inputs.train.labels, &splits.val);
    let test = LabeledSet::gather(&inputs.test.images, &inputs.test.labels, &splits.test);
    let loop_cfg = cfg.loop_config(entry.acquisition, entry.seed);

    let records_path = dir.join(RECORDS_FILE);
    let mut records = BufWriter::new(File::create(&records_path).map_err(io_err(&records_path))?);
    writeln!(records, "{RECORDS_HEADER}").map_err(io_err(&records_path))?;
    let mut write_err = None;
    let result = alloop::run_observed(&inputs.train, &splits.pool, &val, &test, &loop_cfg, |r| {
        let res = writeln!(records, "{}", record_line(r)).and_then(|_| records.flush());
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(io_err(&records_path)(e));
    }
    let out = result.map_err(|e| CliError::Run(e.to_string()))?;

    write_acquired(&dir.join(ACQUIRED_FILE), &out, &inputs.train.labels)?;
    let members_path = dir.join(MEMBERS_FILE);
    fs::write(&members_path, members_to_json(&out.members)).map_err(io_err(&members_path))?;

    entry.truncated = out.records.iter().any(|r| r.truncated);
    entry.final_labeled_size = out.records.last().map(|r| r.labeled_size);
    entry.bald_raw_min = out
        .records
        .iter()
        .filter_map(|r| r.bald_raw_min)
        .reduce(f64::min);
    Ok(())
}

/// Runs the whole sweep. The manifest is written before the first run and
/// rewritten after each; it stays `complete: false` if the process dies.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    verify_present(cfg)?;
    let mut cfg = cfg.clone();
    if let Ok(abs) = cfg.data.dir.canonicalize() {
        cfg.data.dir = abs;
    }
    let inputs = Inputs {
        train: load_dataset(&cfg, "train", &cfg.data.train_images, &cfg.data.train_labels)?,
        test: load_dataset(&cfg, "test", &cfg.data.test_images, &cfg.data.test_labels)?,
    };
    let out_dir = cfg.output_dir.clone();
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;

    let runs = cfg
        .acquisitions
        .iter()
        .flat_map(|&acquisition| {
            (0..cfg.repetitions).map(move |repetition| (acquisition, repetition))
        })
        .map(|(acquisition, repetition)| RunEntry {
            acquisition,
            repetition,
            seed: cfg.repetition_seed(repetition),
            status: RunStatus::Pending,
            dir: run_dir(acquisition, repetition),
            truncated: false,
            final_labeled_size: None,
            bald_raw_min: None,
            error: None,
        })
        .collect();
    let mut manifest = RunManifest {
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        started_at: now(),
        finished_at: None,
        complete: false,
        runs,
    };
    manifest.save(&out_dir)?;

    for i in 0..manifest.runs.len() {
        manifest.runs[i].status = RunStatus::Running;
        manifest.save(&out_dir)?;
        let mut entry = manifest.runs[i].clone();
        match run_one(&cfg, &inputs, &mut entry, &out_dir) {
            Ok(()) => entry.status = RunStatus::Complete,
            Err(e) => {
                entry.status = RunStatus::Failed;
                entry.error = Some(e.to_string());
            }
        }
        manifest.runs[i] = entry;
        manifest.save(&out_dir)?;
    }

    manifest.finished_at = Some(now());
    manifest.complete = true;
    manifest.save(&out_dir)?;
    let failed = manifest.failed().count();
    if failed > 0 {
        return Err(CliError::Run(format!(
            "{failed} of {} runs failed; see {}",
            manifest.runs.len(),
            out_dir.join(MANIFEST_FILE).display()
        )));
    }
    Ok(manifest)
}
