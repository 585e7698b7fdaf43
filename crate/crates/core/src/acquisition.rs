//! Uncertainty scores over a [`PredictionCube`] and top-n batch selection.
//!
//! Every score is computed from the cube as a whole, so one implementation
//! covers a single deterministic network (`M = K = 1`), MC-Dropout (`M = 1`),
//! deterministic ensembles (`K = 1`) and stochastic ensembles.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::PredictionCube;
use crate::ndmath::{entropy_of, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum AcquisitionError {
    #[error("cannot select from an empty score list")]
    EmptyScores,
    #[error("n_query must be at least 1")]
    ZeroQuery,
    #[error("unknown acquisition function {0:?} (expected max_entropy, bald, var_ratio or random)")]
    UnknownKind(String),
    #[error("{0} scoring needs a prediction cube")]
    MissingCube(AcquisitionKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    MaxEntropy,
    Bald,
    VarRatio,
    Random,
}

impl AcquisitionKind {
    pub const ALL: [AcquisitionKind; 4] = [
        AcquisitionKind::MaxEntropy,
        AcquisitionKind::Bald,
        AcquisitionKind::VarRatio,
        AcquisitionKind::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AcquisitionKind::MaxEntropy => "max_entropy",
            AcquisitionKind::Bald => "bald",
            AcquisitionKind::VarRatio => "var_ratio",
            AcquisitionKind::Random => "random",
        }
    }

    /// Whether scoring needs model predictions at all.
    pub fn needs_predictions(self) -> bool {
        self != AcquisitionKind::Random
    }
}

impl fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AcquisitionKind {
    type Err = AcquisitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AcquisitionError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScore {
    pub pool_index: usize,
    pub score: f64,
}

fn per_sample<F>(cube: &PredictionCube, f: F) -> Vec<AcquisitionScore>
where
    F: Fn(&PredictionCube, usize, &mut [f64]) -> f64 + Sync,
{
    let c = cube.n_classes();
    (0..cube.n_samples())
        .into_par_iter()
        .map_init(
            || vec![0.0; c],
            |buf, s| AcquisitionScore {
                pool_index: s,
                score: f(cube, s, buf),
            },
        )
        .collect()
}

/// Entropy of the ensemble-mean prediction.
pub fn score_max_entropy(cube: &PredictionCube) -> Vec<AcquisitionScore> {
    per_sample(cube, |cube, s, mean| {
        cube.mean_into(s, mean);
        entropy_of(mean)
    })
}

/// BALD scores together with the smallest value seen before clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct BaldScores {
    pub scores: Vec<AcquisitionScore>,
    /// Minimum of the unclamped mutual-information estimates (0 for an empty cube).
    pub raw_min: f64,
}

/// Mutual information between the label and the model: entropy of the mean
/// minus the mean per-slice entropy, clamped at zero.
pub fn score_bald_detailed(cube: &PredictionCube) -> BaldScores {
    let c = cube.n_classes();
    let raw: Vec<f64> = (0..cube.n_samples())
        .into_par_iter()
        .map_init(
            || vec![0.0; c],
            |mean, s| {
                cube.mean_into(s, mean);
                let slices = cube.sample(s).chunks_exact(c);
                let n_slices = slices.len() as f64;
                let expected: f64 = slices.map(entropy_of).sum::<f64>() / n_slices;
                entropy_of(mean) - expected
            },
        )
        .collect();
    let raw_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    BaldScores {
        scores: raw
            .into_iter()
            .enumerate()
            .map(|(pool_index, v)| AcquisitionScore {
                pool_index,
                score: v.max(0.0),
            })
            .collect(),
        raw_min: if raw_min.is_finite() { raw_min } else { 0.0 },
    }
}

pub fn score_bald(cube: &PredictionCube) -> Vec<AcquisitionScore> {
    score_bald_detailed(cube).scores
}

/// One minus the largest ensemble-mean probability.
pub fn score_var_ratio(cube: &PredictionCube) -> Vec<AcquisitionScore> {
    per_sample(cube, |cube, s, mean| {
        cube.mean_into(s, mean);
        let max = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (1.0 - max).max(0.0)
    })
}

/// I.i.d. uniform scores in `[0, 1)`.
pub fn score_random(n_samples: usize, rng: &mut Rng) -> Vec<AcquisitionScore> {
    (0..n_samples)
        .map(|pool_index| AcquisitionScore {
            pool_index,
            score: rng.uniform(),
        })
        .collect()
}

/// Dispatches on `kind`. `cube` may be `None` only for [`AcquisitionKind::Random`].
pub fn score(
    kind: AcquisitionKind,
    cube: Option<&PredictionCube>,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Vec<AcquisitionScore>, AcquisitionError> {
    Ok(match (kind, cube) {
        (AcquisitionKind::Random, _) => score_random(n_samples, rng),
        (AcquisitionKind::MaxEntropy, Some(c)) => score_max_entropy(c),
        (AcquisitionKind::Bald, Some(c)) => score_bald(c),
        (AcquisitionKind::VarRatio, Some(c)) => score_var_ratio(c),
        (k, None) => return Err(AcquisitionError::MissingCube(k)),
    })
}

/// The `n_query` highest-scoring pool indices in ascending order. Equal
/// scores are ranked by ascending pool index. Returns the whole pool when it
/// holds fewer than `n_query` items.
pub fn select_batch(
    scores: &[AcquisitionScore],
    n_query: usize,
) -> Result<Vec<usize>, AcquisitionError> {
    if n_query == 0 {
        return Err(AcquisitionError::ZeroQuery);
    }
    if scores.is_empty() {
        return Err(AcquisitionError::EmptyScores);
    }
    let mut ranked: Vec<&AcquisitionScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.pool_index.cmp(&b.pool_index))
    });
    let mut chosen: Vec<usize> = ranked
        .into_iter()
        .take(n_query)
        .map(|s| s.pool_index)
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Writes `pool_index,score` rows with a header.
pub fn write_scores_csv<W: Write>(mut out: W, scores: &[AcquisitionScore]) -> io::Result<()> {
    writeln!(out, "pool_index,score")?;
    for s in scores {
        writeln!(out, "{},{}", s.pool_index, s.score)?;
    }
    Ok(())
}
