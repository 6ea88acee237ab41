//! Small dense linear-algebra helpers shared by the solver, statistics and estimator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenvalues below this fraction of the largest eigenvalue are treated as zero.
pub const RANK_RTOL: f64 = 1e-10;

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Columns of the returned matrix are the matching unit eigenvectors. The sign of each
/// eigenvector is fixed so that its largest-magnitude entry is positive, which keeps
/// downstream null-space computations reproducible.
pub fn sym_eigen_desc(matrix: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = matrix.nrows();
    let eig = SymmetricEigen::new(symmetrized(matrix));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let pivot = v.iter().copied().fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.neg_mut();
        }
        vectors.set_column(col, &v);
    }
    (values, vectors)
}

/// Absolute threshold below which an eigenvalue counts as zero.
pub fn rank_threshold(values: &DVector<f64>) -> f64 {
    let largest = values.iter().copied().fold(0.0_f64, f64::max);
    RANK_RTOL * largest
}

/// Numerical rank of a symmetric PSD matrix.
pub fn numerical_rank(matrix: &DMatrix<f64>) -> usize {
    let (values, _) = sym_eigen_desc(matrix);
    let tol = rank_threshold(&values);
    values.iter().filter(|&&v| v > tol).count()
}

pub fn symmetrized(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    (matrix + matrix.transpose()) * 0.5
}

pub fn submatrix(matrix: &DMatrix<f64>, index: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(index.len(), index.len(), |r, c| matrix[(index[r], index[c])])
}

pub fn subvector(vector: &DVector<f64>, index: &[usize]) -> DVector<f64> {
    DVector::from_iterator(index.len(), index.iter().map(|&i| vector[i]))
}

/// Inverse of a symmetric positive definite matrix.
///
/// Falls back to adding `1e-12 * tr(A) / p` to the diagonal when the Cholesky
/// factorization fails; the returned flag reports whether the jitter was needed.
pub fn spd_inverse_with_jitter(matrix: &DMatrix<f64>) -> Option<(DMatrix<f64>, bool)> {
    let sym = symmetrized(matrix);
    if let Some(chol) = sym.clone().cholesky() {
        return Some((chol.inverse(), false));
    }
    let p = sym.nrows().max(1) as f64;
    let jitter = 1e-12 * sym.trace().abs() / p;
    if jitter <= 0.0 {
        return None;
    }
    let mut shifted = sym;
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += jitter;
    }
    shifted.cholesky().map(|chol| (chol.inverse(), true))
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Dot product accumulated in twice the working precision (Ogita, Rump and Oishi's `Dot2`).
pub fn dot2(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut err) = (0.0_f64, 0.0_f64);
    for (x, y) in a.into_iter().zip(b) {
        let p = x * y;
        let pe = x.mul_add(y, -p);
        let t = sum + p;
        let z = t - sum;
        err += (sum - (t - z)) + (p - z) + pe;
        sum = t;
    }
    sum + err
}

/// Improves `x` for `A x = b` with residuals from [`dot2`], reusing a factorization via `solve`.
pub fn refine(a: &DMatrix<f64>, b: &DVector<f64>, mut x: DVector<f64>, solve: impl Fn(&DVector<f64>) -> DVector<f64>) -> DVector<f64> {
    for _ in 0..3 {
        let r = DVector::from_fn(b.len(), |i, _| {
            dot2(a.row(i).iter().map(|v| -v).chain([1.0]), x.iter().copied().chain([b[i]]))
        });
        if r.iter().all(|v| *v == 0.0) {
            break;
        }
        x += solve(&r);
    }
    x
}
