//! Batch scoring of precomputed embeddings against training statistics.
//!
//! The deep-network path works on penultimate-layer embeddings exported by
//! some pretrained model: training embeddings are L2-normalized and reduced to
//! [`PnmlStats`] once, then every test embedding is scored together with the
//! model's own softmax output for it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::erm::{predict, LinearModel};
use crate::error::{invalid, Result};
use crate::metrics::ScoreDirection;
use crate::linalg::{build_stats, decompose, EmbeddingMatrix, PnmlStats, DEFAULT_RANK_TOL_FACTOR};
use crate::regret::{x_top_g, ProbVector, RegretScore, DEFAULT_ORTH_TOL};

/// Where a batch of scores came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<String>,
    pub stats_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBatch {
    pub scores: Vec<RegretScore>,
    /// Always [`ScoreDirection::HigherIsOod`] for the regret.
    pub direction: ScoreDirection,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareOptions {
    pub normalize: bool,
    pub rank_tol_factor: f64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            rank_tol_factor: DEFAULT_RANK_TOL_FACTOR,
        }
    }
}

/// Scales every row to unit L2 norm and flags the result as normalized.
pub fn l2_normalize(batch: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    batch.l2_normalized()
}

/// Normalizes the training embeddings and precomputes their statistics.
pub fn prepare(train: &EmbeddingMatrix) -> Result<PnmlStats> {
    prepare_with(train, PrepareOptions::default())
}

pub fn prepare_with(train: &EmbeddingMatrix, opts: PrepareOptions) -> Result<PnmlStats> {
    let normalized;
    let train = if opts.normalize {
        normalized = l2_normalize(train)?;
        &normalized
    } else {
        train
    };
    let basis = decompose(train, opts.rank_tol_factor)?;
    Ok(build_stats(basis, train.rows()).with_normalized_inputs(opts.normalize))
}

/// Scores test embeddings given the pretrained model's probabilities.
///
/// Test embeddings are L2-normalized when the stats were built from
/// normalized training embeddings. Samples are scored in parallel on the
/// current rayon pool; output order matches input order.
pub fn score_batch(
    stats: &PnmlStats,
    test: &EmbeddingMatrix,
    erm_probs: &[ProbVector],
) -> Result<ScoredBatch> {
    score_batch_with(stats, test, erm_probs, DEFAULT_ORTH_TOL)
}

pub fn score_batch_with(
    stats: &PnmlStats,
    test: &EmbeddingMatrix,
    erm_probs: &[ProbVector],
    orth_tol: f64,
) -> Result<ScoredBatch> {
    if test.rows() != erm_probs.len() {
        return invalid(format!(
            "{} test embeddings but {} probability vectors",
            test.rows(),
            erm_probs.len()
        ));
    }
    if test.cols() != stats.dim() {
        return invalid(format!(
            "test embeddings have width {}, stats have width {}",
            test.cols(),
            stats.dim()
        ));
    }
    let normalized;
    let test = if stats.normalized_inputs() && !test.is_normalized() {
        normalized = l2_normalize(test)?;
        &normalized
    } else {
        test
    };
    let scores = (0..test.rows())
        .into_par_iter()
        .map(|i| {
            let xtg = x_top_g(test.row(i), stats, orth_tol)?;
            RegretScore::compute(&erm_probs[i], xtg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoredBatch {
        scores,
        direction: ScoreDirection::HigherIsOod,
        provenance: Provenance::default(),
    })
}

/// Max-softmax-probability score (lower means more likely OOD).
pub fn baseline_score(p: &ProbVector) -> f64 {
    p.max()
}

/// Eigenvalues of the training Gram matrix with 1-based indices, largest first.
pub fn spectrum_report(stats: &PnmlStats) -> Vec<(usize, f64)> {
    stats
        .basis()
        .eigvals()
        .iter()
        .enumerate()
        .map(|(i, &v)| (i + 1, v))
        .collect()
}

/// Rectangular lattice over a two-feature input space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    /// Points per axis.
    pub steps: usize,
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return invalid(format!("grid needs at least 2 steps per axis, got {}", self.steps));
        }
        let bounds = [self.x1_min, self.x1_max, self.x2_min, self.x2_max];
        if bounds.iter().any(|v| !v.is_finite()) || self.x1_min > self.x1_max || self.x2_min > self.x2_max {
            return invalid("grid bounds must be finite with min <= max");
        }
        Ok(())
    }

    fn axis(lo: f64, hi: f64, steps: usize, k: usize) -> f64 {
        if k + 1 == steps {
            hi
        } else {
            lo + (hi - lo) * k as f64 / (steps - 1) as f64
        }
    }

    /// Lattice points in row-major order (`x2` outer, `x1` inner).
    pub fn points(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.steps * self.steps);
        for j in 0..self.steps {
            let x2 = Self::axis(self.x2_min, self.x2_max, self.steps, j);
            for i in 0..self.steps {
                out.push([Self::axis(self.x1_min, self.x1_max, self.steps, i), x2]);
            }
        }
        out
    }
}

/// One lattice cell of a regret map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MapPoint {
    pub x1: f64,
    pub x2: f64,
    /// ERM probability of the second class.
    pub p_c2: f64,
    pub regret: f64,
}

/// Per-feature affine standardization `(x - mean) / scale`, fitted on the
/// training set. The model has no bias term, so low-dimensional data that
/// sits far from the origin should be centred before fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl FeatureScaler {
    /// Column means and population standard deviations; constant columns keep
    /// scale 1.
    pub fn fit(train: &EmbeddingMatrix) -> Self {
        let n = train.rows() as f64;
        let m = train.cols();
        let mut mean = vec![0.0; m];
        for row in train.iter_rows() {
            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v / n);
        }
        let mut var = vec![0.0; m];
        for row in train.iter_rows() {
            for k in 0..m {
                var[k] += (row[k] - mean[k]).powi(2) / n;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    pub fn transform_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn transform(&self, e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if e.cols() != self.mean.len() {
            return invalid(format!(
                "matrix has width {}, scaler was fitted on width {}",
                e.cols(),
                self.mean.len()
            ));
        }
        let data = e.iter_rows().flat_map(|r| self.transform_row(r)).collect();
        EmbeddingMatrix::new(e.rows(), e.cols(), data)
    }
}

/// Evaluates the ERM prediction and the regret on every lattice point of a
/// two-feature model.
pub fn regret_map(model: &LinearModel, stats: &PnmlStats, grid: &GridSpec) -> Result<Vec<MapPoint>> {
    regret_map_scaled(model, stats, grid, None)
}

/// Like [`regret_map`], for a model fitted on standardized features. Lattice
/// coordinates (and the emitted `x1`, `x2`) stay in the original units.
pub fn regret_map_scaled(
    model: &LinearModel,
    stats: &PnmlStats,
    grid: &GridSpec,
    scaler: Option<&FeatureScaler>,
) -> Result<Vec<MapPoint>> {
    if model.n_features() != 2 || stats.dim() != 2 {
        return invalid(format!(
            "regret maps need exactly 2 features, got model width {} and stats width {}",
            model.n_features(),
            stats.dim()
        ));
    }
    grid.validate()?;
    grid.points()
        .into_par_iter()
        .map(|pt| {
            let x = match scaler {
                Some(sc) => sc.transform_row(&pt),
                None => pt.to_vec(),
            };
            let p = predict(model, &x)?;
            let xtg = x_top_g(&x, stats, DEFAULT_ORTH_TOL)?;
            let score = RegretScore::compute(&p, xtg)?;
            Ok(MapPoint {
                x1: pt[0],
                x2: pt[1],
                p_c2: p.probs()[1],
                regret: score.regret,
            })
        })
        .collect()
}
