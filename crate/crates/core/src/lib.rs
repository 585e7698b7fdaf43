//! Pool-based deep active learning with stochastic ensembles of MC-Dropout
//! networks.
//!
//! The crate is layered bottom-up: [`ndmath`] (dense math, seeded RNG),
//! [`learner`] (one MLP with dropout, Adam, early stopping), [`ensemble`]
//! (M members times K passes into a [`ensemble::PredictionCube`]),
//! [`acquisition`] (uncertainty scores and batch selection), [`alloop`]
//! (the acquisition loop), [`data`] (IDX loading and splits) and
//! [`diagnostics`] (metrics and CSV export).

pub mod acquisition;
pub mod alloop;
pub mod data;
pub mod diagnostics;
pub mod ensemble;
pub mod learner;
pub mod ndmath;

pub use acquisition::{AcquisitionKind, AcquisitionScore};
pub use alloop::{LoopConfig, LoopState, RunOutput, RunRecord};
pub use data::{Dataset, IdxTensor, SplitSpec, Splits};
pub use ensemble::{EnsembleConfig, EnsembleMode, PredictionCube};
pub use learner::{Architecture, LabeledSet, LearnerParams, McConfig, TrainConfig};
pub use ndmath::{Matrix, ProbVector, Rng};
