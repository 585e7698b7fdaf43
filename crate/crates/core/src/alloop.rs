//! The pool-based acquisition loop: train on the labelled set, evaluate,
//! score the pool, move the top batch from the pool to the labelled set.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{self, AcquisitionError, AcquisitionKind};
use crate::data::{balanced_sample, DataError, Dataset};
use crate::diagnostics::{self, DiagError};
use crate::ensemble::{self, EnsembleConfig, EnsembleError, PredictionCube};
use crate::learner::{Architecture, LabeledSet, LearnerParams, TrainConfig};
use crate::ndmath::Rng;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("iteration {iteration}: {source}")]
    Ensemble {
        iteration: usize,
        #[source]
        source: EnsembleError,
    },
    #[error("iteration {iteration}: {source}")]
    Acquisition {
        iteration: usize,
        #[source]
        source: AcquisitionError,
    },
    #[error("iteration {iteration}: {source}")]
    Diagnostics {
        iteration: usize,
        #[source]
        source: DiagError,
    },
    #[error("index {0} is already labelled")]
    AlreadyLabeled(usize),
    #[error("index {0} is not in the pool")]
    NotInPool(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub initial_size: usize,
    pub n_query: usize,
    /// Labelled-set size at which the loop stops.
    pub target_size: usize,
    pub acquisition: AcquisitionKind,
    pub arch: Architecture,
    pub ensemble: EnsembleConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            initial_size: 20,
            n_query: 10,
            target_size: 1000,
            acquisition: AcquisitionKind::Bald,
            arch: Architecture::default(),
            ensemble: EnsembleConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.initial_size == 0 {
            return Err(LoopError::Config("initial_size must be at least 1".into()));
        }
        if self.n_query == 0 {
            return Err(LoopError::Config("n_query must be at least 1".into()));
        }
        if self.initial_size > self.target_size {
            return Err(LoopError::Config(format!(
                "initial_size {} exceeds target_size {}",
                self.initial_size, self.target_size
            )));
        }
        self.arch
            .validate()
            .map_err(|e| LoopError::Config(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| LoopError::Config(e.to_string()))?;
        self.ensemble
            .validate()
            .map_err(|e| LoopError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Labelled indices in acquisition order and the remaining pool, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopState {
    pub labeled: Vec<usize>,
    pub pool: Vec<usize>,
    pub iteration: usize,
}

impl LoopState {
    /// Moves `indices` from the pool to the labelled set and returns their
    /// labels. Nothing is moved if any index is invalid.
    pub fn acquire(&mut self, labels: &[usize], indices: &[usize]) -> Result<Vec<usize>, LoopError> {
        let queried = oracle_label(self, labels, indices)?;
        let taken: BTreeSet<usize> = indices.iter().copied().collect();
        self.pool.retain(|i| !taken.contains(i));
        self.labeled.extend_from_slice(indices);
        Ok(queried)
    }
}

/// Draws `initial_size / C` samples per class from `candidates`; the rest of
/// `candidates` becomes the pool.
pub fn init_balanced(
    dataset: &Dataset,
    candidates: &[usize],
    initial_size: usize,
    rng: &mut Rng,
) -> Result<LoopState, LoopError> {
    let c = dataset.n_classes;
    if initial_size == 0 || c == 0 || !initial_size.is_multiple_of(c) {
        return Err(LoopError::Config(format!(
            "initial_size {initial_size} is not a positive multiple of {c} classes"
        )));
    }
    let labeled = balanced_sample(&dataset.labels, candidates, c, initial_size / c, rng)?;
    let chosen: BTreeSet<usize> = labeled.iter().copied().collect();
    let mut pool: Vec<usize> = candidates.iter().copied().filter(|i| !chosen.contains(i)).collect();
    pool.sort_unstable();
    pool.dedup();
    Ok(LoopState {
        labeled,
        pool,
        iteration: 0,
    })
}

/// The simulated oracle: ground-truth labels for indices currently in the pool.
pub fn oracle_label(state: &LoopState, labels: &[usize], indices: &[usize]) -> Result<Vec<usize>, LoopError> {
    let mut seen = BTreeSet::new();
    for &i in indices {
        if !seen.insert(i) || state.labeled.contains(&i) {
            return Err(LoopError::AlreadyLabeled(i));
        }
        if state.pool.binary_search(&i).is_err() {
            return Err(LoopError::NotInPool(i));
        }
    }
    Ok(indices.iter().map(|&i| labels[i]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    pub labeled_size: usize,
    pub test_accuracy: f64,
    pub brier: f64,
    /// Class counts of the whole labelled set.
    pub acquired_class_histogram: Vec<usize>,
    pub kl_imbalance: f64,
    pub wall_seconds: f64,
    /// The pool ran short of `n_query` before the target size was reached.
    pub truncated: bool,
    /// Smallest unclamped BALD estimate over the pool scored after this
    /// evaluation, when BALD was used.
    pub bald_raw_min: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    /// Labelled indices in acquisition order (initial set first).
    pub initial: Vec<usize>,
    /// One batch of dataset indices per acquisition step.
    pub acquired: Vec<Vec<usize>>,
    pub members: Vec<LearnerParams>,
    pub state: LoopState,
}

/// Evaluates `members` on `test` with the given ensemble config.
pub fn evaluate(
    members: &[LearnerParams],
    test: &LabeledSet,
    cfg: &EnsembleConfig,
    rng: &Rng,
) -> Result<(f64, f64, PredictionCube), EnsembleError> {
    let cube = ensemble::predict_cube(members, &test.inputs, cfg, rng)?;
    let mean = ensemble::ensemble_mean(&cube);
    let preds = ensemble::classify(&cube);
    let acc = diagnostics::accuracy(&preds, &test.labels).map_err(|e| EnsembleError::Cube(e.to_string()))?;
    let brier = diagnostics::brier(&mean, &test.labels).map_err(|e| EnsembleError::Cube(e.to_string()))?;
    Ok((acc, brier, cube))
}

// Stream layout under the run seed: 0 initial draw, 1 training, 2 pool
// predictions, 3 test predictions, 4 random scores; each then split by iteration.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_POOL: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_RANDOM: u64 = 4;

pub fn run(
    dataset: &Dataset,
    candidates: &[usize],
    val: &LabeledSet,
    test: &LabeledSet,
    cfg: &LoopConfig,
) -> Result<RunOutput, LoopError> {
    run_observed(dataset, candidates, val, test, cfg, |_| {})
}

/// [`run`], calling `on_record` as soon as each record is produced.
pub fn run_observed<F>(
    dataset: &Dataset,
    candidates: &[usize],
    val: &LabeledSet,
    test: &LabeledSet,
    cfg: &LoopConfig,
    mut on_record: F,
) -> Result<RunOutput, LoopError>
where
    F: FnMut(&RunRecord),
{
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut state = init_balanced(dataset, candidates, cfg.initial_size, &mut root.split(STREAM_INIT))?;
    let initial = state.labeled.clone();
    let mut acquired = Vec::new();
    let mut records = Vec::new();
    let mut truncated = false;

    loop {
        let started = Instant::now();
        let it = state.iteration;
        let iter_rng = |stream: u64| root.split(stream).split(it as u64);
        let ens_err = |source| LoopError::Ensemble { iteration: it, source };

        let train_set = LabeledSet::gather(&dataset.images, &dataset.labels, &state.labeled);
        let members: Vec<LearnerParams> = ensemble::train_ensemble(
            &train_set,
            val,
            &cfg.arch,
            &cfg.ensemble,
            &cfg.train,
            &iter_rng(STREAM_TRAIN),
        )
        .map_err(ens_err)?
        .into_iter()
        .map(|o| o.params)
        .collect();

        let (test_accuracy, brier, _) =
            evaluate(&members, test, &cfg.ensemble, &iter_rng(STREAM_TEST)).map_err(ens_err)?;
        let hist = diagnostics::class_histogram(&train_set.labels, dataset.n_classes)
            .map_err(|source| LoopError::Diagnostics { iteration: it, source })?;

        let done = state.labeled.len() >= cfg.target_size || state.pool.is_empty();
        if state.pool.is_empty() && state.labeled.len() < cfg.target_size {
            truncated = true;
        }

        let mut bald_raw_min = None;
        let mut batch = Vec::new();
        if !done {
            let n_pool = state.pool.len();
            let acq_err = |source| LoopError::Acquisition { iteration: it, source };
            let scores = if cfg.acquisition.needs_predictions() {
                let pool_x = dataset.images.select_rows(&state.pool);
                let cube = ensemble::predict_cube(&members, &pool_x, &cfg.ensemble, &iter_rng(STREAM_POOL))
                    .map_err(ens_err)?;
                if cfg.acquisition == AcquisitionKind::Bald {
                    let detailed = acquisition::score_bald_detailed(&cube);
                    bald_raw_min = Some(detailed.raw_min);
                    detailed.scores
                } else {
                    acquisition::score(cfg.acquisition, Some(&cube), n_pool, &mut iter_rng(STREAM_RANDOM))
                        .map_err(acq_err)?
                }
            } else {
                acquisition::score(cfg.acquisition, None, n_pool, &mut iter_rng(STREAM_RANDOM)).map_err(acq_err)?
            };
            let positions = acquisition::select_batch(&scores, cfg.n_query).map_err(acq_err)?;
            batch = positions.iter().map(|&p| state.pool[p]).collect();
            if batch.len() < cfg.n_query {
                truncated = true;
            }
        }

        let record = RunRecord {
            iteration: it,
            labeled_size: state.labeled.len(),
            test_accuracy,
            brier,
            acquired_class_histogram: hist.counts,
            kl_imbalance: hist.kl_from_uniform,
            wall_seconds: 0.0,
            truncated,
            bald_raw_min,
        };

        if done {
            let record = RunRecord {
                wall_seconds: started.elapsed().as_secs_f64(),
                ..record
            };
            on_record(&record);
            records.push(record);
            return Ok(RunOutput {
                records,
                initial,
                acquired,
                members,
                state,
            });
        }

        state.acquire(&dataset.labels, &batch)?;
        acquired.push(batch);
        state.iteration += 1;
        let record = RunRecord {
            wall_seconds: started.elapsed().as_secs_f64(),
            ..record
        };
        on_record(&record);
        records.push(record);
    }
}
