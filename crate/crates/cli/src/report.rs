//! `report`: aggregates completed runs into curve and table CSVs and, from
//! the saved members, calibration, uncertainty and OOD diagnostics.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use alens_core::acquisition;
use alens_core::data::{balanced_sample, test_indices, Dataset};
use alens_core::diagnostics::{self, DiagError};
use alens_core::ensemble::{self, members_from_json};
use alens_core::learner::LearnerParams;
use alens_core::{AcquisitionKind, EnsembleConfig, Matrix, Rng};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError};
use crate::runner::{load_dataset, RunEntry, RunManifest, RunStatus, ACQUIRED_FILE, MEMBERS_FILE, RECORDS_FILE};

pub const REPORT_DIR: &str = "report";

const STREAM_SEEN_PROBE: u64 = 100;
const STREAM_UNSEEN_PROBE: u64 = 101;
const STREAM_SCORING: u64 = 102;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub iteration: usize,
    pub labeled_size: usize,
    pub test_accuracy: f64,
    pub brier: f64,
    pub kl_imbalance: f64,
    pub wall_seconds: f64,
}

pub fn read_records(path: &Path) -> Result<Vec<RecordRow>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .collect::<Result<Vec<RecordRow>, _>>()
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

/// `(step, dataset index, label)` rows of an acquired-index log.
pub fn read_acquired(path: &Path) -> Result<Vec<(usize, usize, usize)>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .collect::<Result<Vec<(usize, usize, usize)>, _>>()
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub acquisition: AcquisitionKind,
    pub labeled_size: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_brier: f64,
    pub std_brier: f64,
    pub repetitions: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aligns repetitions by labelled-set size. Every repetition must have
/// followed the same size trajectory.
pub fn aggregate_curves(acquisition: AcquisitionKind, runs: &[Vec<RecordRow>]) -> Result<Vec<CurvePoint>, CliError> {
    let first = runs
        .first()
        .ok_or_else(|| CliError::Run(format!("no completed {acquisition} runs")))?;
    let sizes: Vec<usize> = first.iter().map(|r| r.labeled_size).collect();
    for (rep, run) in runs.iter().enumerate().skip(1) {
        let other: Vec<usize> = run.iter().map(|r| r.labeled_size).collect();
        if other != sizes {
            return Err(CliError::Run(format!(
                "{acquisition}: repetition {rep} has labelled sizes {other:?}, expected {sizes:?}"
            )));
        }
    }
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(i, &labeled_size)| {
            let acc: Vec<f64> = runs.iter().map(|r| r[i].test_accuracy).collect();
            let brier: Vec<f64> = runs.iter().map(|r| r[i].brier).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&acc);
            let (mean_brier, std_brier) = mean_std(&brier);
            CurvePoint {
                acquisition,
                labeled_size,
                mean_accuracy,
                std_accuracy,
                mean_brier,
                std_brier,
                repetitions: runs.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub acquisition: AcquisitionKind,
    pub repetition: usize,
    pub seed: u64,
    pub final_labeled_size: usize,
    pub final_accuracy: f64,
    /// Test Brier score of the configured ensemble, as recorded by the run.
    pub brier: f64,
    /// Same members, one dropout-off pass each.
    pub deterministic_brier: f64,
    pub deterministic_accuracy: f64,
    pub class_counts: Vec<usize>,
    pub kl_imbalance: f64,
    pub max_min_ratio: f64,
    pub calibration_mse: f64,
    /// Rank correlation of bin accuracy against bin uncertainty on the test set.
    pub uncertainty_accuracy_spearman: Option<f64>,
    pub seen_mean_score: Option<f64>,
    pub unseen_mean_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub probe_score: AcquisitionKind,
    pub curves: Vec<CurvePoint>,
    pub runs: Vec<RunDiagnostics>,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn diag(e: DiagError) -> CliError {
    CliError::Run(e.to_string())
}

/// Scores `x` with `kind` using the members' cube.
fn score_rows(
    members: &[LearnerParams],
    x: &Matrix,
    cfg: &EnsembleConfig,
    kind: AcquisitionKind,
    rng: &Rng,
) -> Result<Vec<f64>, DiagError> {
    let cube = ensemble::predict_cube(members, x, cfg, rng).map_err(|e| DiagError::Scoring(e.to_string()))?;
    let scores = acquisition::score(kind, Some(&cube), x.rows(), &mut rng.split(1))
        .map_err(|e| DiagError::Scoring(e.to_string()))?;
    Ok(scores.into_iter().map(|s| s.score).collect())
}

struct ReportData {
    test: Dataset,
    ood: Option<Dataset>,
}

fn diagnose(
    cfg: &ExperimentConfig,
    data: &ReportData,
    entry: &RunEntry,
    records: &[RecordRow],
    run_dir: &Path,
    report_dir: &Path,
) -> Result<RunDiagnostics, CliError> {
    let members_path = run_dir.join(MEMBERS_FILE);
    let text = fs::read_to_string(&members_path).map_err(io_err(&members_path))?;
    let members = members_from_json(&text).map_err(|e| CliError::Run(format!("{}: {e}", members_path.display())))?;
    let acquired = read_acquired(&run_dir.join(ACQUIRED_FILE))?;
    let last = records
        .last()
        .ok_or_else(|| CliError::Run(format!("{}: no records", run_dir.display())))?;

    let n_classes = data.test.n_classes;
    let test_idx = test_indices(data.test.len(), cfg.split.test_size, entry.seed)?;
    let test = data.test.subset(&test_idx);

    let ens_cfg = cfg.ensemble_config();
    let root = Rng::new(entry.seed);
    let cube = ensemble::predict_cube(&members, &test.images, &ens_cfg, &root.split(STREAM_SCORING))
        .map_err(|e| CliError::Run(e.to_string()))?;
    let mean = ensemble::ensemble_mean(&cube);
    let preds = ensemble::classify(&cube);

    let det = ensemble::predict_cube(&members, &test.images, &ens_cfg.deterministic(), &root)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let det_mean = ensemble::ensemble_mean(&det);
    let deterministic_brier = diagnostics::brier(&det_mean, &test.labels).map_err(diag)?;
    let deterministic_accuracy = diagnostics::accuracy(&ensemble::classify(&det), &test.labels).map_err(diag)?;

    let calibration = diagnostics::calibration_curve(&mean, &test.labels, cfg.probes.calibration_bins).map_err(diag)?;
    let confusion = diagnostics::confusion_matrix(&preds, &test.labels, n_classes).map_err(diag)?;
    let kind = cfg.probes.score;
    let scores: Vec<f64> = acquisition::score(kind, Some(&cube), test.len(), &mut root.split(STREAM_SCORING).split(1))
        .map_err(|e| CliError::Run(e.to_string()))?
        .into_iter()
        .map(|s| s.score)
        .collect();
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let edges = diagnostics::equal_width_edges(lo, hi, cfg.probes.histogram_bins).map_err(diag)?;
    let uncertainty =
        diagnostics::uncertainty_histogram(&scores, &edges, Some((&preds, &test.labels))).map_err(diag)?;
    let labels: Vec<usize> = acquired.iter().map(|&(_, _, y)| y).collect();
    let hist = diagnostics::class_histogram(&labels, n_classes).map_err(diag)?;

    let out = report_dir.join(entry.acquisition.as_str()).join(format!("rep{}", entry.repetition));
    write_with(&out.join("calibration.csv"), |w| diagnostics::write_calibration_csv(w, &calibration))?;
    write_with(&out.join("confusion.csv"), |w| diagnostics::write_confusion_csv(w, &confusion))?;
    write_with(&out.join("uncertainty.csv"), |w| diagnostics::write_uncertainty_csv(w, &uncertainty))?;
    write_with(&out.join("class_histogram.csv"), |w| diagnostics::write_class_histogram_csv(w, &hist))?;

    let (mut seen_mean_score, mut unseen_mean_score) = (None, None);
    if let Some(ood) = &data.ood {
        let per_seen = cfg.probes.seen_size / n_classes;
        let per_unseen = cfg.probes.unseen_size / ood.n_classes.max(1);
        let seen_idx = balanced_sample(&test.labels, &(0..test.len()).collect::<Vec<_>>(), n_classes, per_seen, &mut root.split(STREAM_SEEN_PROBE))?;
        let unseen_idx = balanced_sample(&ood.labels, &(0..ood.len()).collect::<Vec<_>>(), ood.n_classes, per_unseen, &mut root.split(STREAM_UNSEEN_PROBE))?;
        // Acquisition only draws from the training file, so no probe index can
        // have been acquired in the test file's index space.
        let acquired_in_test_space: [usize; 0] = [];
        let seen_global: Vec<usize> = seen_idx.iter().map(|&i| test_idx[i]).collect();
        let scoring_rng = root.split(STREAM_SCORING).split(2);
        let report = diagnostics::ood_report(
            |x| score_rows(&members, x, &ens_cfg, kind, &scoring_rng),
            &test.images.select_rows(&seen_idx),
            &seen_global,
            &ood.images.select_rows(&unseen_idx),
            &acquired_in_test_space,
            cfg.probes.histogram_bins,
        )
        .map_err(diag)?;
        write_with(&out.join("ood.csv"), |w| diagnostics::write_ood_csv(w, &report))?;
        seen_mean_score = Some(report.seen_mean);
        unseen_mean_score = Some(report.unseen_mean);
    }

    Ok(RunDiagnostics {
        acquisition: entry.acquisition,
        repetition: entry.repetition,
        seed: entry.seed,
        final_labeled_size: last.labeled_size,
        final_accuracy: last.test_accuracy,
        brier: last.brier,
        deterministic_brier,
        deterministic_accuracy,
        class_counts: hist.counts.clone(),
        kl_imbalance: hist.kl_from_uniform,
        max_min_ratio: hist.max_min_ratio,
        calibration_mse: calibration.mse,
        uncertainty_accuracy_spearman: uncertainty.accuracy_trend(cfg.probes.min_bin_count),
        seen_mean_score,
        unseen_mean_score,
    })
}

type RunRows<'a> = (&'a RunEntry, Vec<RecordRow>);

pub fn cmd_report(out_dir: &Path) -> Result<ReportSummary, CliError> {
    let manifest = RunManifest::load(out_dir)?;
    let cfg = &manifest.config;
    let data = ReportData {
        test: load_dataset(cfg, "test", &cfg.data.test_images, &cfg.data.test_labels)?,
        ood: match cfg.data.ood() {
            Some((images, labels)) => {
                let ds = Dataset::load("ood", &cfg.data.resolve(images), &cfg.data.resolve(labels))?;
                ds.require_shape(28, 28)?;
                Some(ds)
            }
            None => None,
        },
    };
    let report_dir = out_dir.join(crate::report::REPORT_DIR);

    let mut by_kind: BTreeMap<&str, (AcquisitionKind, Vec<RunRows>)> = BTreeMap::new();
    for entry in manifest.runs.iter().filter(|r| r.status == RunStatus::Complete) {
        let records = read_records(&out_dir.join(&entry.dir).join(RECORDS_FILE))?;
        by_kind
            .entry(entry.acquisition.as_str())
            .or_insert_with(|| (entry.acquisition, Vec::new()))
            .1
            .push((entry, records));
    }
    if by_kind.is_empty() {
        return Err(CliError::Run(format!("{}: no completed runs", out_dir.display())));
    }

    let mut curves = Vec::new();
    let mut runs = Vec::new();
    for &kind in &cfg.acquisitions {
        let Some((_, group)) = by_kind.get(kind.as_str()) else {
            continue;
        };
        let records: Vec<Vec<RecordRow>> = group.iter().map(|(_, r)| r.clone()).collect();
        curves.extend(aggregate_curves(kind, &records)?);
        for (entry, recs) in group {
            runs.push(diagnose(cfg, &data, entry, recs, &out_dir.join(&entry.dir), &report_dir)?);
        }
    }

    write_with(&report_dir.join("accuracy_curves.csv"), |w| {
        writeln!(w, "acquisition,labeled_size,mean_accuracy,std_accuracy,mean_brier,std_brier,repetitions")?;
        for c in &curves {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                c.acquisition, c.labeled_size, c.mean_accuracy, c.std_accuracy, c.mean_brier, c.std_brier, c.repetitions
            )?;
        }
        Ok(())
    })?;
    write_with(&report_dir.join("brier.csv"), |w| {
        writeln!(w, "acquisition,repetition,labeled_size,brier,deterministic_brier")?;
        for r in &runs {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.acquisition, r.repetition, r.final_labeled_size, r.brier, r.deterministic_brier
            )?;
        }
        Ok(())
    })?;
    write_with(&report_dir.join("imbalance.csv"), |w| {
        writeln!(w, "acquisition,repetition,kl_imbalance,max_min_ratio")?;
        for r in &runs {
            writeln!(w, "{},{},{},{}", r.acquisition, r.repetition, r.kl_imbalance, r.max_min_ratio)?;
        }
        Ok(())
    })?;
    let summary = ReportSummary {
        probe_score: cfg.probes.score,
        curves,
        runs,
    };
    let path = report_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n")
        .map_err(io_err(&path))?;
    Ok(summary)
}
