use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use alens_cli::config::{DataFile, ExperimentConfig};
use alens_cli::fetch::{cmd_fetch, idx_sha256, quarantine_path, FetchOutcome};
use alens_cli::report::{aggregate_curves, read_records, RecordRow};
use alens_cli::runner::{RunManifest, RunStatus};
use alens_cli::{cmd_report, cmd_run, CliError};
use alens_core::data::{encode_idx, IdxTensor};
use alens_core::{AcquisitionKind, Rng};
use flate2::write::GzEncoder;
use flate2::Compression;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_alens");

/// Ten noisy 28x28 prototypes; the OOD set uses inverted prototypes.
fn synthetic(n: usize, seed: u64, inverted: bool) -> (IdxTensor, IdxTensor) {
    let mut rng = Rng::new(seed);
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        for p in 0..784 {
            let (row, col) = (p / 28, p % 28);
            let on = (row / 3 + class) % 10 < 3 || (col / 3 + 2 * class) % 10 < 2;
            let on = on != inverted;
            let base: f64 = if on { 200.0 } else { 20.0 };
            let v = base + rng.uniform_range(-20.0, 20.0);
            pixels.push(v.clamp(0.0, 255.0) as u8);
        }
        labels.push(class as u8);
    }
    (
        IdxTensor {
            dims: vec![n, 28, 28],
            data: pixels,
        },
        IdxTensor {
            dims: vec![n],
            data: labels,
        },
    )
}

struct Fixture {
    dir: TempDir,
    cfg: ExperimentConfig,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        fs::create_dir_all(&data).unwrap();
        let write = |name: &str, t: &IdxTensor| fs::write(data.join(name), encode_idx(t)).unwrap();
        let (ti, tl) = synthetic(600, 1, false);
        let (si, sl) = synthetic(300, 2, false);
        let (oi, ol) = synthetic(200, 3, true);
        write("train-images", &ti);
        write("train-labels", &tl);
        write("test-images", &si);
        write("test-labels", &sl);
        write("ood-images", &oi);
        write("ood-labels", &ol);

        let file = |name: &str| DataFile {
            path: name.into(),
            url: None,
            sha256: None,
        };
        let mut cfg = ExperimentConfig::default();
        cfg.name = "synthetic".into();
        cfg.output_dir = dir.path().join("out");
        cfg.data.dir = data;
        cfg.data.train_images = file("train-images");
        cfg.data.train_labels = file("train-labels");
        cfg.data.test_images = file("test-images");
        cfg.data.test_labels = file("test-labels");
        cfg.data.ood_images = Some(file("ood-images"));
        cfg.data.ood_labels = Some(file("ood-labels"));
        cfg.acquisitions = vec![AcquisitionKind::Bald, AcquisitionKind::Random];
        cfg.repetitions = 3;
        cfg.split.pool_size = Some(400);
        cfg.split.val_size = 50;
        cfg.split.test_size = Some(200);
        cfg.active.target_size = 40;
        cfg.model.layer_sizes = vec![784, 16, 10];
        cfg.model.dropout_rates = vec![0.25];
        cfg.ensemble.members = 2;
        cfg.ensemble.mc_passes = 3;
        cfg.train.max_epochs = 15;
        cfg.train.patience = 3;
        cfg.probes.seen_size = 100;
        cfg.probes.unseen_size = 100;
        cfg.probes.min_bin_count = 5;
        Fixture { dir, cfg }
    }

    fn write_config(&self) -> PathBuf {
        let path = self.dir.path().join("experiment.toml");
        fs::write(&path, self.cfg.to_toml()).unwrap();
        path
    }
}

fn alens(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ALENS_OUTPUT_DIR")
        .output()
        .unwrap()
}

/// Record CSV with the timing column removed.
fn without_timing(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn run_writes_one_log_pair_per_run_and_reruns_identically() {
    let f = Fixture::new();
    let manifest = cmd_run(&f.cfg).unwrap();
    assert!(manifest.complete);
    assert_eq!(manifest.runs.len(), 6);
    let seeds: Vec<u64> = manifest.runs.iter().filter(|r| r.acquisition == AcquisitionKind::Bald).map(|r| r.seed).collect();
    assert_eq!(seeds, vec![0, 1, 2]);

    let out = &f.cfg.output_dir;
    let mut records = Vec::new();
    for run in &manifest.runs {
        assert_eq!(run.status, RunStatus::Complete);
        assert_eq!(run.final_labeled_size, Some(40));
        let dir = out.join(&run.dir);
        let text = fs::read_to_string(dir.join("records.csv")).unwrap();
        assert!(text.starts_with("iteration,labeled_size,test_accuracy,brier,kl_imbalance,wall_seconds\n"));
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().count(), 4);
        let acquired = fs::read_to_string(dir.join("acquired.csv")).unwrap();
        assert_eq!(acquired.lines().count(), 41);
        assert!(dir.join("members.json").exists());
        records.push(without_timing(&dir.join("records.csv")));
    }

    let mut again = f.cfg.clone();
    again.output_dir = f.dir.path().join("again");
    let second = cmd_run(&again).unwrap();
    for (run, first) in second.runs.iter().zip(&records) {
        let path = again.output_dir.join(&run.dir);
        assert_eq!(&without_timing(&path.join("records.csv")), first);
        assert_eq!(
            fs::read(path.join("acquired.csv")).unwrap(),
            fs::read(out.join(&run.dir).join("acquired.csv")).unwrap()
        );
    }

    let summary = cmd_report(out).unwrap();
    assert_eq!(summary.runs.len(), 6);
    assert!(summary.curves.iter().all(|c| c.repetitions == 3));
    for name in ["accuracy_curves.csv", "brier.csv", "imbalance.csv", "summary.json"] {
        assert!(out.join("report").join(name).exists(), "{name}");
    }
    for file in ["calibration.csv", "confusion.csv", "uncertainty.csv", "class_histogram.csv", "ood.csv"] {
        assert!(out.join("report/bald/rep0").join(file).exists(), "{file}");
    }
    let first_point = &summary.curves[0];
    let rep_values: Vec<f64> = (0..3)
        .map(|r| read_records(&out.join(format!("bald/rep{r}/records.csv"))).unwrap()[0].test_accuracy)
        .collect();
    assert!((first_point.mean_accuracy - rep_values.iter().sum::<f64>() / 3.0).abs() < 1e-15);
}

#[test]
fn single_repetition_report_has_zero_std() {
    let mut f = Fixture::new();
    f.cfg.repetitions = 1;
    f.cfg.acquisitions = vec![AcquisitionKind::MaxEntropy];
    f.cfg.active.target_size = 30;
    cmd_run(&f.cfg).unwrap();
    let summary = cmd_report(&f.cfg.output_dir).unwrap();
    assert!(summary.curves.iter().all(|c| c.std_accuracy == 0.0 && c.std_brier == 0.0));
}

#[test]
fn report_rejects_mismatched_trajectories() {
    let row = |labeled_size| RecordRow {
        iteration: 0,
        labeled_size,
        test_accuracy: 0.5,
        brier: 0.3,
        kl_imbalance: 0.0,
        wall_seconds: 1.0,
    };
    let same = vec![vec![row(20), row(30)]; 3];
    let curves = aggregate_curves(AcquisitionKind::Bald, &same).unwrap();
    assert!(curves.iter().all(|c| c.mean_accuracy == 0.5 && c.std_accuracy == 0.0));
    let mismatched = vec![vec![row(20), row(30)], vec![row(20), row(31)]];
    assert!(aggregate_curves(AcquisitionKind::Bald, &mismatched).is_err());
}

#[test]
fn cli_binary_runs_with_env_output_dir_and_scores() {
    let mut f = Fixture::new();
    f.cfg.repetitions = 1;
    f.cfg.acquisitions = vec![AcquisitionKind::VarRatio];
    f.cfg.active.target_size = 20;
    let config = f.write_config();
    let env_out = f.dir.path().join("from-env");
    let status = Command::new(BIN)
        .args(["run", "--config", config.to_str().unwrap(), "--seed", "5"])
        .env("ALENS_OUTPUT_DIR", &env_out)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest = RunManifest::load(&env_out).unwrap();
    assert_eq!(manifest.runs[0].seed, 5);
    assert_eq!(manifest.config.seed, 5);

    let members = env_out.join("var_ratio/rep0/members.json");
    let scores = f.dir.path().join("scores.csv");
    let out = alens(&[
        "score",
        "--config",
        config.to_str().unwrap(),
        "--members",
        members.to_str().unwrap(),
        "--images",
        f.cfg.data.dir.join("test-images").to_str().unwrap(),
        "--acquisition",
        "bald",
        "--out",
        scores.to_str().unwrap(),
        "--select",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&scores).unwrap();
    assert_eq!(text.lines().count(), 301);
    assert!(text.starts_with("pool_index,score\n"));
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().split(',').count(), 3);
}

#[test]
fn exit_codes_distinguish_config_data_and_run_failures() {
    let f = Fixture::new();
    let bad = f.dir.path().join("bad.toml");
    fs::write(&bad, "repetitions = 0\n").unwrap();
    assert_eq!(alens(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(alens(&["run", "--acquisition", "nope"]).status.code(), Some(2));

    let mut missing = f.cfg.clone();
    missing.data.train_images.path = "absent-images".into();
    let path = f.dir.path().join("missing.toml");
    fs::write(&path, missing.to_toml()).unwrap();
    let out = alens(&["fetch", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent-images"));
    assert_eq!(alens(&["run", "--config", path.to_str().unwrap()]).status.code(), Some(3));

    let mut diverging = f.cfg.clone();
    diverging.repetitions = 1;
    diverging.acquisitions = vec![AcquisitionKind::Random, AcquisitionKind::Bald];
    diverging.train.learning_rate = 1e300;
    diverging.train.batch_size = 4;
    let path = f.dir.path().join("diverging.toml");
    fs::write(&path, diverging.to_toml()).unwrap();
    let out = alens(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let manifest = RunManifest::load(&diverging.output_dir).unwrap();
    assert!(manifest.complete);
    assert_eq!(manifest.failed().count(), 2);
    assert!(manifest.runs.iter().all(|r| r.error.as_deref().unwrap_or("").contains("iteration 0")));
}

#[test]
fn killed_run_leaves_manifest_incomplete() {
    let mut f = Fixture::new();
    f.cfg.repetitions = 2;
    f.cfg.active.target_size = 300;
    f.cfg.split.pool_size = Some(500);
    f.cfg.train.max_epochs = 200;
    f.cfg.train.patience = 50;
    let config = f.write_config();
    let mut child = Command::new(BIN)
        .args(["run", "--config", config.to_str().unwrap()])
        .env_remove("ALENS_OUTPUT_DIR")
        .spawn()
        .unwrap();
    let manifest_path = f.cfg.output_dir.join("manifest.json");
    let deadline = Instant::now() + Duration::from_secs(60);
    while !manifest_path.exists() && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let manifest = RunManifest::load(&f.cfg.output_dir).unwrap();
    assert!(!manifest.complete);
    assert!(manifest.finished_at.is_none());
}

/// Serves `files` over HTTP/1.1, counting requests.
fn serve(files: Vec<(String, Vec<u8>)>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            counter.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request = String::new();
            reader.read_line(&mut request).unwrap();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
            }
            let path = request.split_whitespace().nth(1).unwrap_or("").trim_start_matches('/').to_string();
            match files.iter().find(|(name, _)| *name == path) {
                Some((_, body)) => {
                    write!(stream, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len()).unwrap();
                    stream.write_all(body).unwrap();
                }
                None => {
                    stream
                        .write_all(b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\nConnection: close\r\n\r\n")
                        .unwrap();
                }
            }
        }
    });
    (base, hits)
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

#[test]
fn fetch_downloads_verifies_and_is_idempotent() {
    let f = Fixture::new();
    let names = ["train-images", "train-labels", "test-images", "test-labels", "ood-images", "ood-labels"];
    let bodies: Vec<(String, Vec<u8>)> = names
        .iter()
        .map(|n| (format!("{n}.gz"), gzip(&fs::read(f.cfg.data.dir.join(n)).unwrap())))
        .collect();
    let shas: Vec<String> = names.iter().map(|n| idx_sha256(&f.cfg.data.dir.join(n)).unwrap()).collect();
    let (base, hits) = serve(bodies);

    let mut cfg = f.cfg.clone();
    cfg.data.dir = f.dir.path().join("fetched");
    let files = [
        &mut cfg.data.train_images,
        &mut cfg.data.train_labels,
        &mut cfg.data.test_images,
        &mut cfg.data.test_labels,
    ];
    for (i, file) in files.into_iter().enumerate() {
        file.url = Some(format!("{base}/{}.gz", names[i]));
        file.sha256 = Some(shas[i].clone());
    }
    for (i, file) in [cfg.data.ood_images.as_mut().unwrap(), cfg.data.ood_labels.as_mut().unwrap()]
        .into_iter()
        .enumerate()
    {
        file.url = Some(format!("{base}/{}.gz", names[4 + i]));
    }

    let first = cmd_fetch(&cfg).unwrap();
    assert!(first.iter().all(|r| r.outcome == FetchOutcome::Downloaded));
    assert_eq!(hits.load(Ordering::SeqCst), 6);
    assert_eq!(first[0].sha256, shas[0]);

    let second = cmd_fetch(&cfg).unwrap();
    assert!(second.iter().all(|r| r.outcome == FetchOutcome::Present));
    assert_eq!(hits.load(Ordering::SeqCst), 6);

    let target = cfg.data.resolve(&cfg.data.train_labels);
    let mut bytes = fs::read(f.cfg.data.dir.join("train-labels")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] = (bytes[last] + 1) % 10;
    fs::write(&target, &bytes).unwrap();
    let config = f.dir.path().join("fetch.toml");
    fs::write(&config, cfg.to_toml()).unwrap();
    let out = alens(&["fetch", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum mismatch"));
    assert!(!target.exists());
    assert!(quarantine_path(&target).exists());

    let mut no_server = cfg.clone();
    no_server.data.train_labels.url = Some(format!("{base}/missing.gz"));
    assert!(matches!(cmd_fetch(&no_server), Err(CliError::Data(_))));
}

#[test]
fn idx_checksum_ignores_compression() {
    let f = Fixture::new();
    let raw = f.cfg.data.dir.join("test-labels");
    let gz = f.dir.path().join("test-labels.gz");
    let mut bytes = Vec::new();
    fs::File::open(&raw).unwrap().read_to_end(&mut bytes).unwrap();
    fs::write(&gz, gzip(&bytes)).unwrap();
    assert_eq!(idx_sha256(&raw).unwrap(), idx_sha256(&gz).unwrap());
}
