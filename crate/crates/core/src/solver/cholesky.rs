use nalgebra::{DMatrix, DVector};

/// Cholesky factor of a principal submatrix that grows and shrinks one index at a time.
#[derive(Debug, Clone, Default)]
pub(crate) struct IncrementalCholesky {
    l: DMatrix<f64>,
}

/// Pivot below `PIVOT_RTOL * J_jj` means the extended system is singular.
const PIVOT_RTOL: f64 = 1e-11;

impl IncrementalCholesky {
    pub fn len(&self) -> usize {
        self.l.nrows()
    }

    /// Appends a row/column with off-diagonal part `cross` (against current members) and
    /// diagonal `diag`. Returns `false`, leaving the factor unchanged, if the extension is singular.
    pub fn push(&mut self, cross: &DVector<f64>, diag: f64) -> bool {
        let k = self.len();
        let y = if k == 0 {
            DVector::zeros(0)
        } else {
            match self.l.solve_lower_triangular(cross) {
                Some(y) => y,
                None => return false,
            }
        };
        let pivot_sq = diag - y.norm_squared();
        if !(pivot_sq > PIVOT_RTOL * diag.abs()) || !pivot_sq.is_finite() {
            return false;
        }
        let mut l = std::mem::take(&mut self.l).resize(k + 1, k + 1, 0.0);
        for c in 0..k {
            l[(k, c)] = y[c];
        }
        l[(k, k)] = pivot_sq.sqrt();
        self.l = l;
        true
    }

    /// Removes member `pos`, restoring triangular form with Givens rotations.
    pub fn remove(&mut self, pos: usize) {
        let k = self.len();
        let mut l = std::mem::take(&mut self.l).remove_row(pos);
        // Rows pos..k-1 now carry a superdiagonal entry in column r + 1.
        for r in pos..k - 1 {
            let a = l[(r, r)];
            let b = l[(r, r + 1)];
            let h = a.hypot(b);
            if h == 0.0 {
                continue;
            }
            let (c, s) = (a / h, b / h);
            for i in r..k - 1 {
                let x = l[(i, r)];
                let y = l[(i, r + 1)];
                l[(i, r)] = c * x + s * y;
                l[(i, r + 1)] = -s * x + c * y;
            }
        }
        self.l = l.remove_column(k - 1);
        // Keep a positive diagonal.
        for r in 0..k - 1 {
            if self.l[(r, r)] < 0.0 {
                for i in r..k - 1 {
                    self.l[(i, r)] = -self.l[(i, r)];
                }
            }
        }
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        if self.len() == 0 {
            return DVector::zeros(0);
        }
        let y = self.l.solve_lower_triangular(rhs).expect("nonzero pivots");
        self.l.tr_solve_lower_triangular(&y).expect("nonzero pivots")
    }
}
