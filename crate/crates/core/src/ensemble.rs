//! Deterministic and stochastic ensembles over independently initialised
//! learners, and the prediction cube every acquisition function reads.
//!
//! A deterministic ensemble is a cube with one dropout-off pass per member,
//! so downstream code has a single path for both modes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{
    self, glorot_init, Architecture, DropoutMode, LabeledSet, LearnerError, LearnerParams,
    McConfig, TrainConfig, TrainOutcome,
};
use crate::ndmath::{argmax, Matrix, Rng};

pub const ENSEMBLE_SNAPSHOT_FORMAT: &str = "alens-ensemble-v1";

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble config: {0}")]
    Config(String),
    #[error("ensemble member {index}: {source}")]
    Member {
        index: usize,
        #[source]
        source: LearnerError,
    },
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("member {index} has layer sizes {found:?}, expected {expected:?}")]
    MemberShapes {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid prediction cube: {0}")]
    Cube(String),
    #[error("bad ensemble snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// One dropout-off pass per member.
    Deterministic,
    /// `k_passes` MC-Dropout passes per member.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub m_members: usize,
    pub mode: EnsembleMode,
    pub mc: McConfig,
    /// Rows per prediction shard; bounds memory and sets the RNG stream layout.
    pub shard_size: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            m_members: 3,
            mode: EnsembleMode::Stochastic,
            mc: McConfig { k_passes: 100 },
            shard_size: 1024,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.m_members == 0 {
            return Err(EnsembleError::Config("m_members must be at least 1".into()));
        }
        if self.mode == EnsembleMode::Stochastic && self.mc.k_passes == 0 {
            return Err(EnsembleError::Config(
                "stochastic mode needs k_passes >= 1".into(),
            ));
        }
        if self.shard_size == 0 {
            return Err(EnsembleError::Config("shard_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Passes per member actually drawn by [`predict_cube`].
    pub fn passes(&self) -> usize {
        match self.mode {
            EnsembleMode::Deterministic => 1,
            EnsembleMode::Stochastic => self.mc.k_passes,
        }
    }

    pub fn deterministic(&self) -> Self {
        Self {
            mode: EnsembleMode::Deterministic,
            ..self.clone()
        }
    }
}

/// Class probabilities indexed `(sample, member, pass, class)`, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionCube {
    n_samples: usize,
    m_members: usize,
    k_passes: usize,
    n_classes: usize,
    data: Vec<f64>,
}

impl PredictionCube {
    /// Builds a cube, checking that every slice is a distribution.
    pub fn new(
        n_samples: usize,
        m_members: usize,
        k_passes: usize,
        n_classes: usize,
        data: Vec<f64>,
    ) -> Result<Self, EnsembleError> {
        if m_members == 0 || k_passes == 0 || n_classes == 0 {
            return Err(EnsembleError::Cube("members, passes and classes must be positive".into()));
        }
        if data.len() != n_samples * m_members * k_passes * n_classes {
            return Err(EnsembleError::Cube(format!(
                "{} entries for dims ({n_samples}, {m_members}, {k_passes}, {n_classes})",
                data.len()
            )));
        }
        for (i, slice) in data.chunks_exact(n_classes).enumerate() {
            let sum: f64 = slice.iter().sum();
            if slice.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
                return Err(EnsembleError::Cube(format!(
                    "slice {i} is not a probability vector"
                )));
            }
        }
        Ok(Self {
            n_samples,
            m_members,
            k_passes,
            n_classes,
            data,
        })
    }

    /// Convenience constructor from nested `[sample][member][pass][class]` vectors.
    pub fn from_nested(nested: &[Vec<Vec<Vec<f64>>>]) -> Result<Self, EnsembleError> {
        let n = nested.len();
        let m = nested.first().map_or(1, Vec::len);
        let k = nested
            .first()
            .and_then(|s| s.first())
            .map_or(1, Vec::len);
        let c = nested
            .first()
            .and_then(|s| s.first())
            .and_then(|mm| mm.first())
            .map_or(1, Vec::len);
        let mut data = Vec::with_capacity(n * m * k * c);
        for sample in nested {
            if sample.len() != m || sample.iter().any(|mm| mm.len() != k) {
                return Err(EnsembleError::Cube("ragged nested cube".into()));
            }
            for member in sample {
                for pass in member {
                    if pass.len() != c {
                        return Err(EnsembleError::Cube("ragged nested cube".into()));
                    }
                    data.extend_from_slice(pass);
                }
            }
        }
        Self::new(n, m, k, c, data)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n_samples, self.m_members, self.k_passes, self.n_classes)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// All `M·K` slices for one sample, contiguous.
    #[inline]
    pub fn sample(&self, s: usize) -> &[f64] {
        let block = self.m_members * self.k_passes * self.n_classes;
        &self.data[s * block..(s + 1) * block]
    }

    #[inline]
    pub fn slice(&self, s: usize, m: usize, k: usize) -> &[f64] {
        let start = ((s * self.m_members + m) * self.k_passes + k) * self.n_classes;
        &self.data[start..start + self.n_classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Uniform average over members and passes for sample `s`, written into `out`.
    pub fn mean_into(&self, s: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for slice in self.sample(s).chunks_exact(self.n_classes) {
            for (o, p) in out.iter_mut().zip(slice) {
                *o += p;
            }
        }
        let inv = 1.0 / (self.m_members * self.k_passes) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
    }

    /// Cube restricted to the given members (in the given order).
    pub fn select_members(&self, members: &[usize]) -> Result<Self, EnsembleError> {
        if members.is_empty() || members.iter().any(|&m| m >= self.m_members) {
            return Err(EnsembleError::Cube("member selection out of range".into()));
        }
        let mut data = Vec::with_capacity(self.n_samples * members.len() * self.k_passes * self.n_classes);
        for s in 0..self.n_samples {
            for &m in members {
                for k in 0..self.k_passes {
                    data.extend_from_slice(self.slice(s, m, k));
                }
            }
        }
        Ok(Self {
            n_samples: self.n_samples,
            m_members: members.len(),
            k_passes: self.k_passes,
            n_classes: self.n_classes,
            data,
        })
    }
}

/// The per-member RNG layout: stream 0 initialises, stream 1 seeds training.
fn member_streams(rng: &Rng, index: usize) -> (Rng, u64) {
    let member = rng.split(index as u64);
    let init = member.split(0);
    let train_seed = member.split(1).next_u64();
    (init, train_seed)
}

/// Trains `cfg.m_members` learners on the same data from distinct Glorot
/// initialisations. Members run in parallel; results are ordered by index.
pub fn train_ensemble(
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    arch: &Architecture,
    cfg: &EnsembleConfig,
    train_cfg: &TrainConfig,
    rng: &Rng,
) -> Result<Vec<TrainOutcome>, EnsembleError> {
    cfg.validate()?;
    arch.validate()?;
    if train_set.is_empty() {
        return Err(EnsembleError::Learner(LearnerError::EmptySet("training")));
    }
    (0..cfg.m_members)
        .into_par_iter()
        .map(|index| {
            let (mut init_rng, seed) = member_streams(rng, index);
            let member_cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            glorot_init(arch, &mut init_rng)
                .and_then(|p| learner::train(p, train_set, val_set, &member_cfg))
                .map_err(|source| EnsembleError::Member { index, source })
        })
        .collect()
}

fn check_members(members: &[LearnerParams]) -> Result<(), EnsembleError> {
    let first = members
        .first()
        .ok_or_else(|| EnsembleError::Config("no ensemble members".into()))?;
    for (index, m) in members.iter().enumerate().skip(1) {
        if m.arch.layer_sizes != first.arch.layer_sizes {
            return Err(EnsembleError::MemberShapes {
                index,
                expected: first.arch.layer_sizes.clone(),
                found: m.arch.layer_sizes.clone(),
            });
        }
    }
    Ok(())
}

/// Predicts every row of `batch` with every member. Rows are processed in
/// shards of `cfg.shard_size`; shard `i`, member `m` draws its dropout masks
/// from `rng.split(i).split(m)`, so results do not depend on thread count.
pub fn predict_cube(
    members: &[LearnerParams],
    batch: &Matrix,
    cfg: &EnsembleConfig,
    rng: &Rng,
) -> Result<PredictionCube, EnsembleError> {
    cfg.validate()?;
    check_members(members)?;
    let m_members = members.len();
    let k_passes = cfg.passes();
    let n_classes = members[0].n_classes();
    let n = batch.rows();
    let block = m_members * k_passes * n_classes;

    let starts: Vec<usize> = (0..n).step_by(cfg.shard_size).collect();
    let shards: Vec<Vec<f64>> = starts
        .par_iter()
        .enumerate()
        .map(|(shard_index, &start)| {
            let end = (start + cfg.shard_size).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let x = batch.select_rows(&rows);
            let shard_rng = rng.split(shard_index as u64);
            let mut out = vec![0.0; rows.len() * block];
            for (m, member) in members.iter().enumerate() {
                match cfg.mode {
                    EnsembleMode::Deterministic => {
                        let probs = member.forward(&x, DropoutMode::Off)?;
                        for (s, row) in probs.iter_rows().enumerate() {
                            let at = s * block + m * n_classes;
                            out[at..at + n_classes].copy_from_slice(row);
                        }
                    }
                    EnsembleMode::Stochastic => {
                        let mut member_rng = shard_rng.split(m as u64);
                        let slab = learner::mc_predict(member, &x, cfg.mc, &mut member_rng)?;
                        for s in 0..rows.len() {
                            let at = s * block + m * k_passes * n_classes;
                            let src = &slab.data[s * k_passes * n_classes..(s + 1) * k_passes * n_classes];
                            out[at..at + k_passes * n_classes].copy_from_slice(src);
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_, EnsembleError>>()?;

    Ok(PredictionCube {
        n_samples: n,
        m_members,
        k_passes,
        n_classes,
        data: shards.concat(),
    })
}

/// Uniformly weighted predictive distribution per sample, one row each.
pub fn ensemble_mean(cube: &PredictionCube) -> Matrix {
    let c = cube.n_classes;
    let mut out = Matrix::zeros(cube.n_samples, c);
    for s in 0..cube.n_samples {
        cube.mean_into(s, out.row_mut(s));
    }
    out
}

/// Argmax of the ensemble mean; ties go to the lowest class.
pub fn classify(cube: &PredictionCube) -> Vec<usize> {
    ensemble_mean(cube).iter_rows().map(argmax).collect()
}

#[derive(Serialize, Deserialize)]
struct EnsembleSnapshot {
    format: String,
    members: Vec<serde_json::Value>,
}

pub fn members_to_json(members: &[LearnerParams]) -> String {
    let members = members
        .iter()
        .map(|m| serde_json::from_str(&m.to_snapshot_json()).expect("snapshot is valid json"))
        .collect();
    serde_json::to_string(&EnsembleSnapshot {
        format: ENSEMBLE_SNAPSHOT_FORMAT.into(),
        members,
    })
    .expect("plain data serializes")
}

pub fn members_from_json(text: &str) -> Result<Vec<LearnerParams>, EnsembleError> {
    let snap: EnsembleSnapshot =
        serde_json::from_str(text).map_err(|e| EnsembleError::Snapshot(e.to_string()))?;
    if snap.format != ENSEMBLE_SNAPSHOT_FORMAT {
        return Err(EnsembleError::Snapshot(format!(
            "unknown format tag {:?}",
            snap.format
        )));
    }
    let members = snap
        .members
        .iter()
        .map(|v| LearnerParams::from_snapshot_json(&v.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    check_members(&members)?;
    Ok(members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::train;

    fn toy_problem(seed: u64, n: usize) -> LabeledSet {
        let mut rng = Rng::new(seed);
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let centre = if y == 0 { -1.0 } else { 1.0 };
            rows.push(vec![
                centre + 0.3 * rng.uniform_range(-1.0, 1.0),
                -centre + 0.3 * rng.uniform_range(-1.0, 1.0),
            ]);
            labels.push(y);
        }
        LabeledSet::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    fn small_arch() -> Architecture {
        Architecture::new(vec![2, 8, 2], vec![0.2]).unwrap()
    }

    fn quick_train() -> TrainConfig {
        TrainConfig {
            max_epochs: 20,
            patience: 5,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_member_matches_plain_training() {
        let data = toy_problem(1, 20);
        let cfg = EnsembleConfig {
            m_members: 1,
            ..EnsembleConfig::default()
        };
        let rng = Rng::new(77);
        let out = train_ensemble(&data, &data, &small_arch(), &cfg, &quick_train(), &rng).unwrap();
        let (mut init, seed) = member_streams(&rng, 0);
        let direct = train(
            glorot_init(&small_arch(), &mut init).unwrap(),
            &data,
            &data,
            &TrainConfig {
                seed,
                ..quick_train()
            },
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].params, direct.params);
    }

    #[test]
    fn members_differ_and_repeat_under_same_seed() {
        let data = toy_problem(2, 20);
        let cfg = EnsembleConfig {
            m_members: 3,
            ..EnsembleConfig::default()
        };
        let rng = Rng::new(5);
        let a = train_ensemble(&data, &data, &small_arch(), &cfg, &quick_train(), &rng).unwrap();
        let b = train_ensemble(&data, &data, &small_arch(), &cfg, &quick_train(), &rng).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.params, y.params);
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                let wa: Vec<f64> = a[i].params.weights.iter().flat_map(|w| w.as_slice().to_vec()).collect();
                let wb: Vec<f64> = a[j].params.weights.iter().flat_map(|w| w.as_slice().to_vec()).collect();
                let same = wa.iter().zip(&wb).filter(|(x, y)| x == y).count();
                assert!((same as f64) < 0.01 * wa.len() as f64);
            }
        }
    }

    #[test]
    fn deterministic_single_member_cube_is_forward_pass() {
        let p = glorot_init(&small_arch(), &mut Rng::new(3)).unwrap();
        let x = toy_problem(4, 9).inputs;
        let cfg = EnsembleConfig {
            m_members: 1,
            mode: EnsembleMode::Deterministic,
            shard_size: 4,
            ..EnsembleConfig::default()
        };
        let cube = predict_cube(std::slice::from_ref(&p), &x, &cfg, &Rng::new(0)).unwrap();
        assert_eq!(cube.dims(), (9, 1, 1, 2));
        let fwd = p.forward(&x, DropoutMode::Off).unwrap();
        assert_eq!(cube.as_slice(), fwd.as_slice());
        assert_eq!(ensemble_mean(&cube), fwd);
    }

    #[test]
    fn stochastic_without_dropout_repeats_passes() {
        let arch = Architecture::new(vec![2, 8, 2], vec![0.0]).unwrap();
        let members: Vec<_> = (0..2)
            .map(|s| glorot_init(&arch, &mut Rng::new(s)).unwrap())
            .collect();
        let x = toy_problem(4, 5).inputs;
        let cfg = EnsembleConfig {
            m_members: 2,
            mc: McConfig { k_passes: 4 },
            ..EnsembleConfig::default()
        };
        let cube = predict_cube(&members, &x, &cfg, &Rng::new(0)).unwrap();
        for s in 0..5 {
            for m in 0..2 {
                for k in 1..4 {
                    assert_eq!(cube.slice(s, m, 0), cube.slice(s, m, k));
                }
            }
        }
    }

    #[test]
    fn cube_slices_are_distributions() {
        let members: Vec<_> = (0..3)
            .map(|s| glorot_init(&small_arch(), &mut Rng::new(s)).unwrap())
            .collect();
        let x = toy_problem(4, 11).inputs;
        let cfg = EnsembleConfig {
            mc: McConfig { k_passes: 5 },
            shard_size: 3,
            ..EnsembleConfig::default()
        };
        let cube = predict_cube(&members, &x, &cfg, &Rng::new(0)).unwrap();
        for slice in cube.as_slice().chunks_exact(2) {
            assert!((slice.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // rebuilding through the validating constructor succeeds
        let (n, m, k, c) = cube.dims();
        PredictionCube::new(n, m, k, c, cube.as_slice().to_vec()).unwrap();
    }

    #[test]
    fn mismatched_members_are_rejected() {
        let a = glorot_init(&small_arch(), &mut Rng::new(0)).unwrap();
        let other = Architecture::new(vec![2, 4, 2], vec![0.2]).unwrap();
        let b = glorot_init(&other, &mut Rng::new(0)).unwrap();
        let x = Matrix::zeros(1, 2);
        let err = predict_cube(&[a, b], &x, &EnsembleConfig::default(), &Rng::new(0)).unwrap_err();
        assert!(matches!(err, EnsembleError::MemberShapes { index: 1, .. }));
    }

    #[test]
    fn mean_of_two_members() {
        let cube = PredictionCube::from_nested(&[vec![vec![vec![0.8, 0.2]], vec![vec![0.6, 0.4]]]]).unwrap();
        let mean = ensemble_mean(&cube);
        assert!((mean.get(0, 0) - 0.7).abs() < 1e-15);
        assert!((mean.get(0, 1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn classify_examples() {
        let cube = PredictionCube::from_nested(&[
            vec![vec![vec![0.1, 0.8, 0.1]]],
            vec![vec![vec![0.5, 0.5, 0.0]]],
        ])
        .unwrap();
        assert_eq!(classify(&cube), vec![1, 0]);
    }

    #[test]
    fn cube_constructor_rejects_bad_slices() {
        assert!(PredictionCube::new(1, 1, 1, 2, vec![0.3, 0.3]).is_err());
        assert!(PredictionCube::new(1, 1, 1, 2, vec![0.5]).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let members: Vec<_> = (0..2)
            .map(|s| glorot_init(&small_arch(), &mut Rng::new(s)).unwrap())
            .collect();
        let text = members_to_json(&members);
        assert_eq!(members_from_json(&text).unwrap(), members);
        assert!(members_from_json(&text.replace(ENSEMBLE_SNAPSHOT_FORMAT, "nope")).is_err());
    }
}
