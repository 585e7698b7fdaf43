//! Downloads configured data files and verifies their checksums.

use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};

use alens_core::data::read_maybe_gzip;
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, DataFile, ExperimentConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchOutcome {
    /// Already on disk (and matched its checksum, if one is configured).
    Present,
    Downloaded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchReport {
    pub path: PathBuf,
    pub outcome: FetchOutcome,
    pub sha256: String,
}

/// SHA-256 of the file's IDX bytes, gunzipped first when compressed.
pub fn idx_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = read_maybe_gzip(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn quarantine_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".quarantine");
    PathBuf::from(name)
}

fn verify(path: &Path, expected: Option<&str>) -> Result<String, CliError> {
    let actual = idx_sha256(path)?;
    if let Some(expected) = expected {
        if !actual.eq_ignore_ascii_case(expected) {
            let q = quarantine_path(path);
            fs::rename(path, &q).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            return Err(CliError::Data(format!(
                "{}: checksum mismatch (expected {expected}, found {actual}); moved to {}",
                path.display(),
                q.display()
            )));
        }
    }
    Ok(actual)
}

fn download(url: &str, dest: &Path) -> Result<(), CliError> {
    let data_err = |e: &dyn std::fmt::Display| CliError::Data(format!("{url}: {e}"));
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent).map_err(|e| data_err(&e))?;
    }
    let response = ureq::get(url).call().map_err(|e| data_err(&e))?;
    let mut part = dest.as_os_str().to_owned();
    part.push(".part");
    let part = PathBuf::from(part);
    let mut out = File::create(&part).map_err(|e| data_err(&e))?;
    io::copy(&mut response.into_body().into_reader(), &mut out).map_err(|e| data_err(&e))?;
    drop(out);
    fs::rename(&part, dest).map_err(|e| data_err(&e))
}

/// Makes one file available locally. Touches the network only when the file
/// is missing.
pub fn fetch_file(data: &DataConfig, file: &DataFile) -> Result<FetchReport, CliError> {
    let path = data.resolve(file);
    let outcome = if path.exists() {
        FetchOutcome::Present
    } else {
        let url = file.url.as_deref().ok_or_else(|| {
            CliError::Data(format!(
                "{} is missing and no url is configured for it",
                path.display()
            ))
        })?;
        download(url, &path)?;
        FetchOutcome::Downloaded
    };
    let sha256 = verify(&path, file.sha256.as_deref())?;
    Ok(FetchReport {
        path,
        outcome,
        sha256,
    })
}

pub fn cmd_fetch(cfg: &ExperimentConfig) -> Result<Vec<FetchReport>, CliError> {
    cfg.data.files().into_iter().map(|f| fetch_file(&cfg.data, f)).collect()
}

/// Checks that every required file exists and matches its checksum, without
/// downloading anything.
pub fn verify_present(cfg: &ExperimentConfig) -> Result<(), CliError> {
    for file in cfg.data.files() {
        let path = cfg.data.resolve(file);
        if !path.exists() {
            return Err(CliError::Data(format!(
                "{} not found; run `alens fetch` first",
                path.display()
            )));
        }
        verify(&path, file.sha256.as_deref())?;
    }
    Ok(())
}
