//! `score`: one-shot acquisition scoring of an IDX image file with saved members.

use std::fs;
use std::path::Path;

use alens_core::acquisition::{self, AcquisitionScore};
use alens_core::data::{normalize, read_idx_file};
use alens_core::ensemble::{self, members_from_json};
use alens_core::{AcquisitionKind, Rng};

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError};

pub fn cmd_score(
    cfg: &ExperimentConfig,
    members_path: &Path,
    images_path: &Path,
    kind: AcquisitionKind,
    seed: u64,
) -> Result<Vec<AcquisitionScore>, CliError> {
    let text = fs::read_to_string(members_path).map_err(io_err(members_path))?;
    let members = members_from_json(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", members_path.display())))?;
    let raw = read_idx_file(images_path)?;
    let images = normalize(&raw).map_err(|e| CliError::Data(format!("{}: {e}", images_path.display())))?;
    if images.cols() != members[0].n_inputs() {
        return Err(CliError::Data(format!(
            "{}: {} pixels per image, members expect {}",
            images_path.display(),
            images.cols(),
            members[0].n_inputs()
        )));
    }
    let rng = Rng::new(seed);
    let cube = if kind.needs_predictions() {
        let ens_cfg = alens_core::EnsembleConfig {
            m_members: members.len(),
            ..cfg.ensemble_config()
        };
        Some(ensemble::predict_cube(&members, &images, &ens_cfg, &rng).map_err(|e| CliError::Run(e.to_string()))?)
    } else {
        None
    };
    acquisition::score(kind, cube.as_ref(), images.rows(), &mut rng.split(1))
        .map_err(|e| CliError::Run(e.to_string()))
}
