//! Cramér–Rao and Van Trees lower bounds on the generalization error of
//! linear regression and two-layer networks trained on noisy labels, plus the
//! random-matrix, Fisher-rank and teacher–student experiments used to check
//! them.
//!
//! The crate root re-exports the types most callers need; the modules hold
//! the rest.

pub mod bounds;
pub mod error;
pub mod experiments;
pub mod fisher;
pub mod linalg;
pub mod model;
pub mod mp_law;
pub mod output;
pub mod quadrature;
pub mod rmt_verify;
pub mod rng;
pub mod stieltjes;

pub use bounds::{BoundKind, BoundReport, RankModel, Warning};
pub use error::{Error, Result};
pub use experiments::{ExperimentResult, SgdConfig, SweepKind, SweepRow};
pub use fisher::{FisherSpectrum, TwoLayerParams};
pub use model::{constants, gauss_expect, snr_db, Activation, GaussConstants, ModelConfig};
pub use mp_law::MPLaw;
pub use rmt_verify::ConvergenceReport;
pub use stieltjes::{BlockMatrixSpec, StieltjesPair};
