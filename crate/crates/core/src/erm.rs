//! Single-layer softmax model fitted by least squares on inverse-softmax
//! targets, plus the one-sample recursive update used by the genie.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::linalg::{dot, l2_norm, project_orth, EmbeddingMatrix, PnmlStats};
use crate::regret::{GainBranch, ProbVector, DEFAULT_ORTH_TOL};

/// Default target smoothing for [`one_hot_targets`].
pub const DEFAULT_TARGET_EPS: f64 = 0.01;

/// One-hot labels, stored as class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    classes: Vec<usize>,
    n_classes: usize,
}

impl LabelMatrix {
    pub fn from_indices(classes: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return invalid(format!("need at least 2 classes, got {n_classes}"));
        }
        if classes.is_empty() {
            return invalid("label matrix must have at least one row");
        }
        if let Some(i) = classes.iter().position(|&c| c >= n_classes) {
            return invalid(format!(
                "label {} at row {i} is out of range for {n_classes} classes",
                classes[i]
            ));
        }
        Ok(Self { classes, n_classes })
    }

    /// Parses explicit one-hot rows; each row needs exactly one 1 and zeros
    /// elsewhere.
    pub fn from_one_hot<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_classes = rows.first().map_or(0, |r| r.as_ref().len());
        let mut classes = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n_classes {
                return invalid(format!("label row {i} has width {}, expected {n_classes}", row.len()));
            }
            let hot: Vec<usize> = (0..row.len()).filter(|&k| row[k] == 1.0).collect();
            if hot.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return invalid(format!("label row {i} is not one-hot"));
            }
            classes.push(hot[0]);
        }
        Self::from_indices(classes, n_classes)
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Inverse-activation targets, one row per training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ZTargets(DMatrix<f64>);

impl ZTargets {
    pub fn new(targets: DMatrix<f64>) -> Result<Self> {
        if targets.iter().any(|v| !v.is_finite()) {
            return invalid("targets contain non-finite values");
        }
        Ok(Self(targets))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }
}

/// Weights `θ ∈ R^{M x C}`; column `i` scores class `i`. No bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    weights: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.ncols() < 2 || weights.nrows() == 0 {
            return invalid(format!(
                "weights must be M x C with M >= 1 and C >= 2, got {}x{}",
                weights.nrows(),
                weights.ncols()
            ));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return invalid("weights contain non-finite values");
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn n_features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.ncols()
    }

    /// `xᵀθ`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features() {
            return invalid(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.n_features()
            ));
        }
        Ok(self
            .weights
            .column_iter()
            .map(|col| dot(col.as_slice(), x))
            .collect())
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.len() < 2 {
        return invalid(format!("need at least 2 logits, got {}", logits.len()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return invalid("logits contain non-finite values");
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(ProbVector::from_raw(e.into_iter().map(|v| v / s).collect()))
}

/// Finite inverse-softmax targets for one-hot labels: the hot class maps to
/// `ln(1 - eps)` and every other class to `ln(eps / (C - 1))`.
pub fn one_hot_targets(labels: &LabelMatrix, eps: f64) -> Result<ZTargets> {
    let c = labels.n_classes();
    if !(eps > 0.0 && eps < 1.0 / c as f64) {
        return invalid(format!("eps must lie in (0, 1/{c}), got {eps}"));
    }
    let hot = (1.0 - eps).ln();
    let cold = (eps / (c - 1) as f64).ln();
    let z = DMatrix::from_fn(labels.len(), c, |i, k| {
        if labels.classes()[i] == k {
            hot
        } else {
            cold
        }
    });
    ZTargets::new(z)
}

/// Least-squares fit `θ = X⁺Z`, evaluated as `X⁺X⁺ᵀ Xᵀ Z`.
///
/// A degenerate (rank-0) training set yields `θ = 0`.
pub fn fit(train: &EmbeddingMatrix, targets: &ZTargets, stats: &PnmlStats) -> Result<LinearModel> {
    if train.rows() != targets.rows() {
        return invalid(format!(
            "{} training rows but {} target rows",
            train.rows(),
            targets.rows()
        ));
    }
    if train.cols() != stats.dim() {
        return invalid(format!(
            "training width {} does not match stats width {}",
            train.cols(),
            stats.dim()
        ));
    }
    let x = train.to_matrix();
    let xtz = x.tr_mul(targets.matrix());
    LinearModel::new(stats.quad_kernel() * xtz)
}

/// Gain vector `g` of the recursive update with the branch that selected it.
pub fn gain_vector(stats: &PnmlStats, x: &[f64], orth_tol: f64) -> Result<(Vec<f64>, GainBranch)> {
    let orth = project_orth(x, stats)?;
    let norm = l2_norm(x);
    if norm == 0.0 {
        return Ok((vec![0.0; x.len()], GainBranch::Zero));
    }
    let orth_norm = l2_norm(&orth);
    if orth_norm > orth_tol * norm {
        let s = orth_norm * orth_norm;
        return Ok((orth.into_iter().map(|v| v / s).collect(), GainBranch::Orthogonal));
    }
    let kx = stats.kernel_apply(x)?;
    let denom = 1.0 + dot(x, &kx);
    Ok((kx.into_iter().map(|v| v / denom).collect(), GainBranch::RowSpace))
}

/// Absorbs one sample `(x, z_row)`: `θ' = θ + g (z_rowᵀ - xᵀθ)`.
pub fn recursive_update(
    model: &LinearModel,
    stats: &PnmlStats,
    x: &[f64],
    z_row: &[f64],
    orth_tol: f64,
) -> Result<LinearModel> {
    if z_row.len() != model.n_classes() {
        return invalid(format!(
            "target row has width {}, model has {} classes",
            z_row.len(),
            model.n_classes()
        ));
    }
    if z_row.iter().any(|v| !v.is_finite()) {
        return invalid("target row contains non-finite values");
    }
    let current = model.logits(x)?;
    let (g, _) = gain_vector(stats, x, orth_tol)?;
    let innovation = DVector::from_iterator(
        z_row.len(),
        z_row.iter().zip(&current).map(|(z, c)| z - c),
    );
    let g = DVector::from_vec(g);
    LinearModel::new(model.weights() + g * innovation.transpose())
}

/// Softmax of `xᵀθ`.
pub fn predict(model: &LinearModel, x: &[f64]) -> Result<ProbVector> {
    softmax(&model.logits(x)?)
}

/// Genie probability of class `class` (0-based) obtained by explicitly
/// refitting the model with `(x, e_class)` appended.
///
/// The base model is the least-squares fit on `(train, targets)`. The genie
/// target for the assumed class is `ln Σ_j exp(θ_jᵀx)`; the other columns
/// receive zero innovation.
pub fn genie_refit_oracle(
    train: &EmbeddingMatrix,
    targets: &ZTargets,
    x: &[f64],
    class: usize,
    stats: &PnmlStats,
) -> Result<f64> {
    let base = fit(train, targets, stats)?;
    if class >= base.n_classes() {
        return invalid(format!(
            "class {class} is out of range for {} classes",
            base.n_classes()
        ));
    }
    let mut z_row = base.logits(x)?;
    z_row[class] = log_sum_exp(&z_row);
    let genie = recursive_update(&base, stats, x, &z_row, DEFAULT_ORTH_TOL)?;
    Ok(predict(&genie, x)?.probs()[class])
}
