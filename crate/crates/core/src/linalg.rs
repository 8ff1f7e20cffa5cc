//! Dense linear-algebra kernels and preprocessing transforms.
//!
//! Everything here is a pure function of its inputs. Factorizations are
//! delegated to `nalgebra`; this module pins down ordering, truncation and
//! sign conventions so that every downstream fit is reproducible bit for bit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major-semantics matrix of `f64`.
pub type Matrix = DMatrix<f64>;

/// Default relative cutoff for singular-value truncation.
pub const DEFAULT_SVD_REL_TOL: f64 = 1e-12;

/// Standard deviations below this are treated as zero variance.
const MIN_SCALE: f64 = 1e-12;

pub(crate) fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite entries")))
    }
}

pub(crate) fn ensure_nonempty(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::invalid(format!(
            "{what} is empty ({}x{})",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// `‖FᵀF − I‖_F` for a matrix with (supposedly) orthonormal columns.
pub fn orthonormality_error(f: &Matrix) -> f64 {
    let gram = f.transpose() * f;
    (gram - Matrix::identity(f.ncols(), f.ncols())).norm()
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Flip column signs so the largest-magnitude entry of each column is
/// positive (ties go to the lowest row index). Returns the flip pattern.
pub fn canonicalize_signs(m: &mut Matrix) -> Vec<bool> {
    let mut flipped = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..m.nrows() {
            let a = m[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        let flip = m[(best, j)] < 0.0;
        if flip {
            m.column_mut(j).neg_mut();
        }
        flipped.push(flip);
    }
    flipped
}

/// A `d × d` matrix on the orthogonal group.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalMap(Matrix);

impl OrthogonalMap {
    /// Tolerance on `‖ΩᵀΩ − I‖_F` accepted by [`OrthogonalMap::new`].
    pub const TOLERANCE: f64 = 1e-10;

    pub fn new(omega: Matrix) -> Result<Self> {
        if omega.nrows() != omega.ncols() {
            return Err(Error::shape(format!(
                "orthogonal map must be square, got {}x{}",
                omega.nrows(),
                omega.ncols()
            )));
        }
        ensure_finite(&omega, "orthogonal map")?;
        let err = orthonormality_error(&omega);
        if err >= Self::TOLERANCE {
            return Err(Error::Numerical(format!(
                "matrix is not orthogonal (‖ΩᵀΩ − I‖ = {err:e})"
            )));
        }
        Ok(Self(omega))
    }

    pub fn identity(d: usize) -> Self {
        Self(Matrix::identity(d, d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// `self · other`, i.e. apply `self` first to row vectors, then `other`.
    pub fn then(&self, other: &OrthogonalMap) -> Self {
        Self(&self.0 * &other.0)
    }

    /// Apply to the rows of `x`: `x · Ω`.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        x * &self.0
    }
}

/// Thin (possibly truncated) singular value decomposition `a ≈ left · diag(singular) · rightᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub left: Matrix,
    pub singular: Vec<f64>,
    pub right: Matrix,
    pub retained_rank: usize,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.left.clone();
        for (j, s) in self.singular.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        scaled * self.right.transpose()
    }
}

/// Full thin SVD sorted by descending singular value, no truncation.
fn sorted_svd(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let v = svd.v_t.expect("right vectors requested").transpose();
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let left = Matrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let right = Matrix::from_fn(v.nrows(), order.len(), |r, c| v[(r, order[c])]);
    let singular = order.iter().map(|&i| s[i].max(0.0)).collect();
    (left, singular, right)
}

/// Thin SVD keeping singular values above `rel_tol · σ_max`, at most `max_rank` of them.
pub fn thin_svd(a: &Matrix, max_rank: Option<usize>, rel_tol: f64) -> Result<SvdResult> {
    ensure_nonempty(a, "svd input")?;
    ensure_finite(a, "svd input")?;
    if !(0.0..1.0).contains(&rel_tol) {
        return Err(Error::invalid(format!("rel_tol {rel_tol} outside [0, 1)")));
    }
    if max_rank == Some(0) {
        return Err(Error::InvalidRank {
            requested: 0,
            available: a.nrows().min(a.ncols()),
        });
    }
    let (mut left, singular, mut right) = sorted_svd(a);
    let sigma_max = singular.first().copied().unwrap_or(0.0);
    let cutoff = rel_tol * sigma_max;
    let mut rank = singular
        .iter()
        .take_while(|&&s| if rel_tol > 0.0 { s > cutoff } else { true })
        .count();
    if let Some(cap) = max_rank {
        rank = rank.min(cap);
    }
    if rank == 0 {
        return Err(Error::RankZero);
    }
    left = left.columns(0, rank).into_owned();
    right = right.columns(0, rank).into_owned();
    let flips = canonicalize_signs(&mut left);
    for (j, flip) in flips.into_iter().enumerate() {
        if flip {
            right.column_mut(j).neg_mut();
        }
    }
    Ok(SvdResult {
        left,
        singular: singular[..rank].to_vec(),
        right,
        retained_rank: rank,
    })
}

/// Relative asymmetry `‖s − sᵀ‖_F / ‖s‖_F`.
fn asymmetry(s: &Matrix) -> f64 {
    let norm = s.norm();
    if norm == 0.0 {
        0.0
    } else {
        (s - s.transpose()).norm() / norm
    }
}

/// The `r` smallest eigenpairs of a symmetric matrix, eigenvalues ascending.
pub fn sym_eig_smallest(s: &Matrix, r: usize) -> Result<(Vec<f64>, Matrix)> {
    ensure_nonempty(s, "eigen input")?;
    ensure_finite(s, "eigen input")?;
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::invalid(format!(
            "eigen input must be square, got {}x{}",
            n,
            s.ncols()
        )));
    }
    let asym = asymmetry(s);
    if asym >= 1e-8 {
        return Err(Error::invalid(format!(
            "matrix is not symmetric (relative asymmetry {asym:e})"
        )));
    }
    if r == 0 || r > n {
        return Err(Error::InvalidRank {
            requested: r,
            available: n,
        });
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]).then(i.cmp(&j)));
    order.truncate(r);
    let values = order.iter().map(|&i| vals[i]).collect();
    let mut vectors = Matrix::from_fn(n, r, |row, c| eig.eigenvectors[(row, order[c])]);
    canonicalize_signs(&mut vectors);
    Ok((values, vectors))
}

/// `argmin_{Ω ∈ O(d)} ‖source · Ω − target‖_F`.
pub fn orthogonal_procrustes(source: &Matrix, target: &Matrix) -> Result<OrthogonalMap> {
    if source.shape() != target.shape() {
        return Err(Error::shape(format!(
            "procrustes operands differ: {:?} vs {:?}",
            source.shape(),
            target.shape()
        )));
    }
    ensure_nonempty(source, "procrustes source")?;
    ensure_finite(source, "procrustes source")?;
    ensure_finite(target, "procrustes target")?;
    let cross = source.transpose() * target;
    let svd = cross.svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");
    Ok(OrthogonalMap(u * v_t))
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// the diagonal of R made positive).
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> OrthogonalMap {
    let g = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    OrthogonalMap(q)
}

/// Per-dimension centering and scaling fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizerState {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

pub fn standardize_fit(x: &Matrix) -> Result<StandardizerState> {
    ensure_nonempty(x, "standardize input")?;
    ensure_finite(x, "standardize input")?;
    let n = x.nrows() as f64;
    let mut mean = Vec::with_capacity(x.ncols());
    let mut scale = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let mu = col.sum() / n;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let sd = var.sqrt();
        mean.push(mu);
        scale.push(if sd > MIN_SCALE { sd } else { 1.0 });
    }
    Ok(StandardizerState { mean, scale })
}

pub fn standardize_apply(state: &StandardizerState, x: &Matrix) -> Result<Matrix> {
    if x.ncols() != state.mean.len() {
        return Err(Error::shape(format!(
            "standardizer fitted on {} dims, input has {}",
            state.mean.len(),
            x.ncols()
        )));
    }
    ensure_finite(x, "standardize input")?;
    Ok(Matrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        (x[(i, j)] - state.mean[j]) / state.scale[j]
    }))
}

/// Centered PCA projection onto the leading principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaState {
    pub mean: Vec<f64>,
    /// `d_in × d_out`, orthonormal columns.
    pub components: Matrix,
    /// Covariance eigenvalues (unbiased) of the retained directions.
    pub explained_variance: Vec<f64>,
}

pub fn pca_fit(x: &Matrix, d_out: usize) -> Result<PcaState> {
    ensure_nonempty(x, "pca input")?;
    ensure_finite(x, "pca input")?;
    let (n, d_in) = x.shape();
    let available = (n.saturating_sub(1)).min(d_in);
    if d_out == 0 || d_out > available {
        return Err(Error::InvalidRank {
            requested: d_out,
            available,
        });
    }
    let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n as f64).collect();
    let centered = Matrix::from_fn(n, d_in, |i, j| x[(i, j)] - mean[j]);
    let (_, singular, right) = sorted_svd(&centered);
    let mut components = right.columns(0, d_out).into_owned();
    canonicalize_signs(&mut components);
    let explained_variance = singular[..d_out]
        .iter()
        .map(|s| s * s / (n as f64 - 1.0))
        .collect();
    Ok(PcaState {
        mean,
        components,
        explained_variance,
    })
}

pub fn pca_apply(state: &PcaState, x: &Matrix) -> Result<Matrix> {
    if x.ncols() != state.mean.len() {
        return Err(Error::shape(format!(
            "pca fitted on {} dims, input has {}",
            state.mean.len(),
            x.ncols()
        )));
    }
    let centered = Matrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - state.mean[j]);
    Ok(centered * &state.components)
}

/// Rows with norm below `eps` are returned unchanged and flagged `true`.
pub fn row_normalize(x: &Matrix, eps: f64) -> (Matrix, Vec<bool>) {
    let mut out = x.clone();
    let mut flags = vec![false; x.nrows()];
    for (i, flag) in flags.iter_mut().enumerate() {
        let norm = x.row(i).norm();
        if norm < eps {
            *flag = true;
        } else {
            out.row_mut(i).unscale_mut(norm);
        }
    }
    (out, flags)
}

/// Row-wise ℓ₂ norms.
pub fn row_norms(x: &Matrix) -> DVector<f64> {
    DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn svd_of_diagonal_sorts_values() {
        let a = Matrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let svd = thin_svd(&a, None, DEFAULT_SVD_REL_TOL).unwrap();
        assert_eq!(svd.singular, vec![3.0, 2.0, 1.0]);
        assert_eq!(svd.retained_rank, 3);
    }

    #[test]
    fn svd_of_identity_respects_max_rank() {
        let svd = thin_svd(&Matrix::identity(4, 4), Some(2), DEFAULT_SVD_REL_TOL).unwrap();
        assert_eq!(svd.singular, vec![1.0, 1.0]);
        assert!(orthonormality_error(&svd.left) < 1e-10);
        assert!(orthonormality_error(&svd.right) < 1e-10);
        assert_eq!(svd.left.ncols(), 2);
    }

    #[test]
    fn svd_reconstructs_random_matrix() {
        let a = gaussian(20, 6, 3);
        let svd = thin_svd(&a, None, DEFAULT_SVD_REL_TOL).unwrap();
        assert!(relative_error(&svd.reconstruct(), &a) < 1e-8);
    }

    #[test]
    fn svd_truncates_rank_deficient_input() {
        let b = gaussian(10, 2, 5);
        let c = gaussian(2, 5, 6);
        let a = b * c;
        let svd = thin_svd(&a, None, DEFAULT_SVD_REL_TOL).unwrap();
        assert_eq!(svd.retained_rank, 2);
        assert!(relative_error(&svd.reconstruct(), &a) < 1e-8);
    }

    #[test]
    fn svd_errors() {
        let z = Matrix::zeros(3, 3);
        assert!(matches!(thin_svd(&z, None, 1e-12), Err(Error::RankZero)));
        let mut bad = Matrix::identity(2, 2);
        bad[(0, 1)] = f64::NAN;
        assert!(matches!(thin_svd(&bad, None, 1e-12), Err(Error::InvalidInput(_))));
        assert!(thin_svd(&Matrix::identity(2, 2), None, 1.0).is_err());
    }

    #[test]
    fn eig_smallest_of_diagonal() {
        let s = Matrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let (vals, vecs) = sym_eig_smallest(&s, 2).unwrap();
        assert_eq!(vals, vec![1.0, 2.0]);
        let expected = Matrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!((vecs - expected).norm() < 1e-12);
    }

    #[test]
    fn eig_of_identity_is_orthonormal() {
        let (vals, vecs) = sym_eig_smallest(&Matrix::identity(5, 5), 3).unwrap();
        assert!(vals.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(orthonormality_error(&vecs) < 1e-10);
    }

    #[test]
    fn eig_residuals_on_random_symmetric() {
        let g = gaussian(8, 8, 11);
        let s = &g + g.transpose();
        let (vals, vecs) = sym_eig_smallest(&s, 8).unwrap();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        for (j, lambda) in vals.iter().enumerate() {
            let v = vecs.column(j);
            assert!((&s * v - v * *lambda).norm() < 1e-8);
            let (imax, _) = v
                .iter()
                .enumerate()
                .fold((0, -1.0), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
            assert!(v[imax] > 0.0);
        }
    }

    #[test]
    fn eig_errors() {
        let mut s = Matrix::identity(3, 3);
        s[(0, 1)] = 1.0;
        assert!(matches!(sym_eig_smallest(&s, 1), Err(Error::InvalidInput(_))));
        assert!(matches!(
            sym_eig_smallest(&Matrix::identity(3, 3), 4),
            Err(Error::InvalidRank { .. })
        ));
    }

    #[test]
    fn procrustes_cases() {
        let x = gaussian(30, 5, 1);
        let same = orthogonal_procrustes(&x, &x).unwrap();
        assert!((same.matrix() - Matrix::identity(5, 5)).norm() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_orthogonal(5, &mut rng);
        let rotated = r.apply(&x);
        let rec = orthogonal_procrustes(&x, &rotated).unwrap();
        assert!((rec.matrix() - r.matrix()).norm() < 1e-8);
        assert!(orthonormality_error(rec.matrix()) < 1e-10);

        let sign = orthogonal_procrustes(
            &Matrix::from_element(1, 1, 2.0),
            &Matrix::from_element(1, 1, -3.0),
        )
        .unwrap();
        assert!((sign.matrix()[(0, 0)] + 1.0).abs() < 1e-15);

        assert!(matches!(
            orthogonal_procrustes(&x, &gaussian(30, 4, 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn standardize_clamps_constant_columns() {
        let mut x = gaussian(12, 3, 4);
        x.column_mut(1).fill(7.5);
        let st = standardize_fit(&x).unwrap();
        assert_eq!(st.scale[1], 1.0);
        let y = standardize_apply(&st, &x).unwrap();
        assert!(y.column(1).iter().all(|v| *v == 0.0));
        for col in y.column_iter() {
            assert!((col.sum() / 12.0).abs() < 1e-10);
        }
    }

    #[test]
    fn standardize_uses_train_statistics_on_held_out_rows() {
        let train = gaussian(40, 4, 8);
        let held = gaussian(10, 4, 9).add_scalar(3.0);
        let st = standardize_fit(&train).unwrap();
        let y = standardize_apply(&st, &held).unwrap();
        let own = standardize_fit(&held).unwrap();
        for j in 0..4 {
            let expected = (held[(0, j)] - st.mean[j]) / st.scale[j];
            assert_eq!(y[(0, j)], expected);
            assert!((st.mean[j] - own.mean[j]).abs() > 1e-3);
        }
    }

    #[test]
    fn pca_recovers_affine_subspace() {
        let coords = gaussian(25, 2, 20);
        let basis = gaussian(2, 6, 21);
        let x = (coords * basis).add_scalar(1.5);
        let pca = pca_fit(&x, 2).unwrap();
        assert!(orthonormality_error(&pca.components) < 1e-10);
        let proj = pca_apply(&pca, &x).unwrap();
        let back = &proj * pca.components.transpose();
        let centered = Matrix::from_fn(25, 6, |i, j| x[(i, j)] - pca.mean[j]);
        assert!((back - &centered).norm() / centered.norm() < 1e-8);
    }

    #[test]
    fn pca_full_rank_preserves_distances() {
        let x = gaussian(15, 4, 30);
        let pca = pca_fit(&x, 4).unwrap();
        let y = pca_apply(&pca, &x).unwrap();
        for i in 0..15 {
            for k in 0..15 {
                let dx = (x.row(i) - x.row(k)).norm();
                let dy = (y.row(i) - y.row(k)).norm();
                assert!((dx - dy).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_captured_variance_matches_covariance_spectrum() {
        let x = gaussian(50, 8, 31) * gaussian(8, 8, 32);
        let pca = pca_fit(&x, 3).unwrap();
        let y = pca_apply(&pca, &x).unwrap();
        let captured: f64 = y.column_iter().map(|c| c.norm_squared()).sum::<f64>() / 49.0;

        // Oracle: eigenvalues of the sample covariance.
        let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / 50.0).collect();
        let centered = Matrix::from_fn(50, 8, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / 49.0;
        let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let top3: f64 = eig[..3].iter().sum();
        assert!((captured - top3).abs() / top3 < 1e-10);
        assert!(pca_fit(&x, 9).is_err());
    }

    #[test]
    fn row_normalize_cases() {
        let x = Matrix::from_row_slice(3, 2, &[3.0, 4.0, 0.0, 0.0, 0.6, 0.8]);
        let (y, flags) = row_normalize(&x, 1e-12);
        assert_eq!(flags, vec![false, true, false]);
        assert!((y[(0, 0)] - 0.6).abs() < 1e-15 && (y[(0, 1)] - 0.8).abs() < 1e-15);
        assert_eq!(y.row(1), x.row(1));
        assert!((y.row(2) - x.row(2)).norm() < 1e-12);
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for d in [1, 3, 16, 40] {
            let q = random_orthogonal(d, &mut rng);
            assert!(orthonormality_error(q.matrix()) < 1e-10);
        }
    }
}
