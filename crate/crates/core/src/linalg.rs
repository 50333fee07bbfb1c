//! Dense linear algebra over the training Gram matrix.
//!
//! Everything the regret needs from the training embeddings is derived from a
//! single symmetric eigendecomposition of the `M x M` Gram matrix `XᵀX`:
//!
//! * the quadratic-form kernel `X⁺X⁺ᵀ = (XᵀX)⁺ = Σ u uᵀ / λ`,
//! * the row-space projector `X⁺X = Σ u uᵀ`,
//!
//! with both sums running over the eigenpairs above the rank tolerance. This
//! costs `O(NM² + M³)`, which stays cheap when `N` is large and the embedding
//! width `M` is modest.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Default relative rank tolerance factor (machine epsilon of `f64`).
pub const DEFAULT_RANK_TOL_FACTOR: f64 = f64::EPSILON;

/// Tolerance on the row norms of a matrix flagged as normalized.
const UNIT_NORM_TOL: f64 = 1e-9;

/// Row-per-sample matrix of embeddings, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Builds a matrix from row-major data. Every value must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return invalid(format!("embedding matrix must be non-empty, got {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return invalid(format!(
                "embedding matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!(
                "non-finite value at row {}, column {}",
                pos / cols,
                pos % cols
            ));
        }
        Ok(Self {
            rows,
            cols,
            data,
            normalized: false,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return invalid("embedding matrix must have at least one row");
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return invalid(format!("row {i} has {} columns, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix and flags it as normalized, checking that every row
    /// has unit L2 norm.
    pub fn new_normalized(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(rows, cols, data)?;
        for i in 0..m.rows {
            let norm = l2_norm(m.row(i));
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return invalid(format!("row {i} has norm {norm}, expected 1"));
            }
        }
        m.normalized = true;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Row-major values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// Returns a copy with every row scaled to unit L2 norm. A matrix that is
    /// already flagged as normalized is returned unchanged.
    pub fn l2_normalized(&self) -> Result<Self> {
        if self.normalized {
            return Ok(self.clone());
        }
        let mut data = self.data.clone();
        for (i, row) in data.chunks_exact_mut(self.cols).enumerate() {
            let norm = l2_norm(row);
            if norm == 0.0 {
                return invalid(format!("row {i} is zero and cannot be normalized"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
            normalized: true,
        })
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigendecomposition of `XᵀX`, eigenvalues sorted in nonincreasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    /// Orthonormal eigenvectors stored as columns.
    eigvecs: DMatrix<f64>,
    eigvals: Vec<f64>,
    rank: usize,
}

impl EigenBasis {
    /// Reassembles a basis from stored parts (used when loading stats files).
    pub fn from_parts(eigvecs: DMatrix<f64>, eigvals: Vec<f64>, rank: usize) -> Result<Self> {
        let m = eigvals.len();
        if m == 0 || eigvecs.nrows() != m || eigvecs.ncols() != m {
            return invalid(format!(
                "eigenbasis shape mismatch: {} eigenvalues, {}x{} eigenvectors",
                m,
                eigvecs.nrows(),
                eigvecs.ncols()
            ));
        }
        if rank > m {
            return invalid(format!("rank {rank} exceeds dimension {m}"));
        }
        if eigvals.iter().any(|v| !v.is_finite() || *v < 0.0)
            || eigvecs.iter().any(|v| !v.is_finite())
        {
            return invalid("eigenbasis contains negative or non-finite values");
        }
        if eigvals.windows(2).any(|w| w[0] < w[1]) {
            return invalid("eigenvalues are not sorted in nonincreasing order");
        }
        Ok(Self {
            eigvecs,
            eigvals,
            rank,
        })
    }

    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }
}

/// Eigendecomposition of the Gram matrix of `train`.
///
/// An eigenvalue counts toward the rank when it exceeds
/// `rank_tol_factor * λ_max * max(N, M)`. Negative eigenvalues produced by
/// round-off are clamped to zero and each eigenvector is signed so that its
/// largest-magnitude component is positive.
pub fn decompose(train: &EmbeddingMatrix, rank_tol_factor: f64) -> Result<EigenBasis> {
    if !(rank_tol_factor.is_finite() && rank_tol_factor > 0.0) {
        return invalid(format!("rank tolerance factor must be positive, got {rank_tol_factor}"));
    }
    let x = train.to_matrix();
    let gram = x.tr_mul(&x);
    let m = gram.nrows();
    let eig = SymmetricEigen::try_new(gram, f64::EPSILON, 0)
        .ok_or_else(|| Error::NumericalFailure("symmetric eigensolver did not converge".into()))?;

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut eigvecs = DMatrix::zeros(m, m);
    let mut eigvals = Vec::with_capacity(m);
    for (dst, &src) in order.iter().enumerate() {
        eigvals.push(eig.eigenvalues[src].max(0.0));
        let mut col = eig.eigenvectors.column(src).clone_owned();
        let lead = col.iamax();
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        eigvecs.set_column(dst, &col);
    }
    if eigvals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("eigensolver produced non-finite values".into()));
    }

    let cutoff = rank_tol_factor * eigvals[0] * train.rows().max(train.cols()) as f64;
    let rank = eigvals.iter().take_while(|&&v| v > cutoff).count();
    Ok(EigenBasis {
        eigvecs,
        eigvals,
        rank,
    })
}

/// Precomputed training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PnmlStats {
    basis: EigenBasis,
    quad_kernel: DMatrix<f64>,
    row_proj: DMatrix<f64>,
    n_train: usize,
    normalized: bool,
}

/// Builds `X⁺X⁺ᵀ` and `X⁺X` from the retained eigenpairs.
///
/// A rank-0 basis still yields stats (both matrices zero); check
/// [`PnmlStats::is_degenerate`] or [`PnmlStats::require_nondegenerate`].
pub fn build_stats(basis: EigenBasis, n_train: usize) -> PnmlStats {
    let m = basis.dim();
    let kept = basis.eigvecs.columns(0, basis.rank);
    let mut scaled = kept.clone_owned();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col /= basis.eigvals[k];
    }
    let quad_kernel: DMatrix<f64> = if basis.rank == 0 {
        DMatrix::zeros(m, m)
    } else {
        &scaled * kept.transpose()
    };
    let row_proj: DMatrix<f64> = if basis.rank == 0 {
        DMatrix::zeros(m, m)
    } else {
        kept * kept.transpose()
    };
    // Enforce exact symmetry.
    let quad_kernel = (&quad_kernel + quad_kernel.transpose()) * 0.5;
    let row_proj = (&row_proj + row_proj.transpose()) * 0.5;
    PnmlStats {
        basis,
        quad_kernel,
        row_proj,
        n_train,
        normalized: false,
    }
}

impl PnmlStats {
    /// Records whether the stats were built from L2-normalized embeddings;
    /// test embeddings are normalized the same way before scoring.
    pub fn with_normalized_inputs(mut self, normalized: bool) -> Self {
        self.normalized = normalized;
        self
    }

    pub fn basis(&self) -> &EigenBasis {
        &self.basis
    }

    pub fn quad_kernel(&self) -> &DMatrix<f64> {
        &self.quad_kernel
    }

    pub fn row_proj(&self) -> &DMatrix<f64> {
        &self.row_proj
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn rank(&self) -> usize {
        self.basis.rank
    }

    pub fn normalized_inputs(&self) -> bool {
        self.normalized
    }

    pub fn is_degenerate(&self) -> bool {
        self.basis.rank == 0
    }

    pub fn require_nondegenerate(&self) -> Result<&Self> {
        if self.is_degenerate() {
            Err(Error::DegenerateTraining)
        } else {
            Ok(self)
        }
    }

    pub(crate) fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return invalid(format!(
                "vector has length {}, training embeddings have width {}",
                x.len(),
                self.dim()
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("vector contains non-finite values");
        }
        Ok(())
    }

    /// `xᵀ X⁺X⁺ᵀ x`.
    pub fn quad_form(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let v = DVector::from_column_slice(x);
        // PSD up to round-off
        Ok(v.dot(&(&self.quad_kernel * &v)).max(0.0))
    }

    /// `X⁺X⁺ᵀ x`.
    pub fn kernel_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let v = DVector::from_column_slice(x);
        Ok((&self.quad_kernel * v).as_slice().to_vec())
    }
}

/// Component of `x` orthogonal to the training row space, `(I - X⁺X) x`.
pub fn project_orth(x: &[f64], stats: &PnmlStats) -> Result<Vec<f64>> {
    stats.check_dim(x)?;
    let v = DVector::from_column_slice(x);
    let proj = &stats.row_proj * &v;
    Ok((v - proj).as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    fn stats_of(rows: &[&[f64]]) -> PnmlStats {
        let e = emb(rows);
        build_stats(decompose(&e, DEFAULT_RANK_TOL_FACTOR).unwrap(), e.rows())
    }

    fn assert_mat(a: &DMatrix<f64>, expected: &[f64], tol: f64) {
        let e = DMatrix::from_row_slice(a.nrows(), a.ncols(), expected);
        assert!((a - &e).amax() <= tol, "{a} != {e}");
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(EmbeddingMatrix::new(0, 2, vec![]).is_err());
        assert!(EmbeddingMatrix::new(1, 2, vec![1.0]).is_err());
        assert!(EmbeddingMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(EmbeddingMatrix::new_normalized(1, 2, vec![3.0, 4.0]).is_err());
        assert!(EmbeddingMatrix::new_normalized(1, 2, vec![0.6, 0.8]).is_ok());
    }

    #[test]
    fn decompose_identity() {
        let b = decompose(&emb(&[&[1.0, 0.0], &[0.0, 1.0]]), DEFAULT_RANK_TOL_FACTOR).unwrap();
        assert_eq!(b.eigvals(), &[1.0, 1.0]);
        assert_eq!(b.rank(), 2);
    }

    #[test]
    fn decompose_diagonal_rank_one() {
        let b = decompose(&emb(&[&[2.0, 0.0], &[0.0, 0.0]]), DEFAULT_RANK_TOL_FACTOR).unwrap();
        assert!((b.eigvals()[0] - 4.0).abs() < 1e-12);
        assert_eq!(b.eigvals()[1], 0.0);
        assert_eq!(b.rank(), 1);
        // sign convention makes the leading eigenvector +e1
        assert!((b.eigvecs()[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(b.eigvecs()[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn decompose_tall_with_zero_row() {
        let b = decompose(
            &emb(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]),
            DEFAULT_RANK_TOL_FACTOR,
        )
        .unwrap();
        assert!((b.eigvals()[0] - 1.0).abs() < 1e-12);
        assert!((b.eigvals()[1] - 1.0).abs() < 1e-12);
        assert_eq!(b.rank(), 2);
    }

    #[test]
    fn decompose_rejects_bad_tolerance() {
        let e = emb(&[&[1.0, 0.0]]);
        assert!(matches!(decompose(&e, 0.0), Err(Error::InvalidInput(_))));
        assert!(matches!(decompose(&e, f64::NAN), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn large_rank_tolerance_drops_small_directions() {
        let e = emb(&[&[1.0, 0.0], &[0.0, 0.1]]);
        assert_eq!(decompose(&e, DEFAULT_RANK_TOL_FACTOR).unwrap().rank(), 2);
        // eigenvalues (1, 0.01); cutoff = factor * 1 * 2
        assert_eq!(decompose(&e, 0.004).unwrap().rank(), 2);
        assert_eq!(decompose(&e, 0.006).unwrap().rank(), 1);
    }

    #[test]
    fn stats_identity() {
        let s = stats_of(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_mat(s.quad_kernel(), &[1.0, 0.0, 0.0, 1.0], 1e-12);
        assert_mat(s.row_proj(), &[1.0, 0.0, 0.0, 1.0], 1e-12);
        assert!(!s.is_degenerate());
    }

    #[test]
    fn stats_rank_one_diagonal() {
        let s = stats_of(&[&[2.0, 0.0], &[0.0, 0.0]]);
        assert_mat(s.quad_kernel(), &[0.25, 0.0, 0.0, 0.0], 1e-12);
        assert_mat(s.row_proj(), &[1.0, 0.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn stats_rank_zero_is_flagged() {
        let s = stats_of(&[&[0.0, 0.0]]);
        assert!(s.is_degenerate());
        assert!(matches!(s.require_nondegenerate(), Err(Error::DegenerateTraining)));
        assert_eq!(s.quad_kernel().amax(), 0.0);
        assert_eq!(s.row_proj().amax(), 0.0);
    }

    #[test]
    fn project_orth_examples() {
        let full = stats_of(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = project_orth(&[3.0, 4.0], &full).unwrap();
        assert!(p.iter().all(|v| v.abs() < 1e-12));

        let e1 = stats_of(&[&[1.0, 0.0], &[2.0, 0.0]]);
        let p = project_orth(&[1.0, 1.0], &e1).unwrap();
        assert!(p[0].abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);

        assert_eq!(project_orth(&[0.0, 0.0], &e1).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(project_orth(&[1.0], &e1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn l2_normalized_rows() {
        let e = emb(&[&[3.0, 4.0], &[0.0, 2.0]]).l2_normalized().unwrap();
        assert!(e.is_normalized());
        assert!((e.row(0)[0] - 0.6).abs() < 1e-15 && (e.row(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(e.row(1), &[0.0, 1.0]);
        let err = emb(&[&[1.0, 0.0], &[0.0, 0.0]]).l2_normalized().unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }
}
