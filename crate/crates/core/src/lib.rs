//! Predictive normalized maximum likelihood (pNML) regret for a single-layer
//! softmax classifier, used as a confidence and out-of-distribution score over
//! precomputed embeddings.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: eigendecomposition of the training Gram matrix and the
//!   pseudo-inverse products derived from it;
//! * [`regret`]: the `xᵀg` statistic, genie probabilities, regret and pNML
//!   posterior;
//! * [`erm`]: least-squares softmax fit and the one-sample recursive update;
//! * [`pipeline`]: batch scoring of embedding files;
//! * [`metrics`]: AUROC, TNR at 95% TPR and detection accuracy;
//! * [`io`]: file formats shared with the command-line tool.

pub mod erm;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod regret;

pub use erm::{LabelMatrix, LinearModel, ZTargets};
pub use error::{Error, Result};
pub use linalg::{EigenBasis, EmbeddingMatrix, PnmlStats};
pub use metrics::{DetectionReport, ScoreDirection};
pub use pipeline::{FeatureScaler, GridSpec, MapPoint, PrepareOptions, ScoredBatch};
pub use regret::{GainBranch, ProbVector, RegretScore};
