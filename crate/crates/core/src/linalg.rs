//! Small dense linear-algebra kernels used by the code and key constructions.
//!
//! Everything here operates on row-major `f64` matrices of desk-scale size
//! (tens of rows), so plain Gaussian elimination and Jacobi sweeps are both
//! adequate and easy to audit. Pivot and rank thresholds are pinned because
//! construction validity checks depend on them.

use thiserror::Error;

/// Pivot is treated as zero when smaller than this fraction of its row scale.
pub const PIVOT_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("singular system: no usable pivot in column {col}")]
    Singular { col: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat {
            rows: r,
            cols: c,
            data: rows.concat(),
        }
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "flat data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    let v = out.get(r, c) + a * other.get(k, c);
                    out.set(r, c, v);
                }
            }
        }
        out
    }

    /// `row_vec * self`, returning a vector of length `cols`.
    pub fn left_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "left_mul_vec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &x) in v.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for c in 0..self.cols {
                out[c] += x * self.get(r, c);
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                s[c] += self.get(r, c);
            }
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

/// Solve the square system `a x = b` by Gaussian elimination with scaled
/// partial pivoting. A pivot below `PIVOT_REL_TOL` times its row's largest
/// entry is treated as zero.
pub fn solve_square(a: &Mat, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::DimMismatch(format!(
            "expected square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.len() != a.rows() {
        return Err(LinalgError::DimMismatch(format!(
            "rhs length {} != {}",
            b.len(),
            a.rows()
        )));
    }
    solve_rect(a, b)
}

/// Solve a consistent, possibly overdetermined system `a x = b` with
/// `a` of shape n x m, n >= m. Elimination selects m pivot equations; the
/// remaining equations are assumed consistent (callers verify the product
/// afterwards where that matters).
pub fn solve_overdetermined(a: &Mat, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if a.rows() < a.cols() {
        return Err(LinalgError::DimMismatch(format!(
            "underdetermined: {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.len() != a.rows() {
        return Err(LinalgError::DimMismatch(format!(
            "rhs length {} != {}",
            b.len(),
            a.rows()
        )));
    }
    solve_rect(a, b)
}

fn solve_rect(a: &Mat, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let n = a.rows();
    let m = a.cols();
    // Augmented working copy.
    let mut w = Mat::zeros(n, m + 1);
    for r in 0..n {
        for c in 0..m {
            w.set(r, c, a.get(r, c));
        }
        w.set(r, m, b[r]);
    }
    let scale: Vec<f64> = (0..n)
        .map(|r| a.row(r).iter().fold(0.0f64, |s, v| s.max(v.abs())))
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..m {
        // Pick the row with the largest scaled pivot.
        let mut best = col;
        let mut best_mag = -1.0;
        for r in col..n {
            let s = scale[perm[r]];
            let mag = if s > 0.0 {
                w.get(perm[r], col).abs() / s
            } else {
                0.0
            };
            if mag > best_mag {
                best_mag = mag;
                best = r;
            }
        }
        perm.swap(col, best);
        let p = perm[col];
        let pivot = w.get(p, col);
        if pivot.abs() < PIVOT_REL_TOL * scale[p].max(f64::MIN_POSITIVE) {
            return Err(LinalgError::Singular { col });
        }
        for r in col + 1..n {
            let q = perm[r];
            let factor = w.get(q, col) / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in col..=m {
                let v = w.get(q, c) - factor * w.get(p, c);
                w.set(q, c, v);
            }
        }
    }

    let mut x = vec![0.0; m];
    for col in (0..m).rev() {
        let p = perm[col];
        let mut acc = w.get(p, m);
        for c in col + 1..m {
            acc -= w.get(p, c) * x[c];
        }
        x[col] = acc / w.get(p, col);
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Singular values and rank
// ---------------------------------------------------------------------------

/// Singular values of `a`, sorted descending, via a cyclic Jacobi
/// eigendecomposition of the smaller Gram matrix.
pub fn singular_values(a: &Mat) -> Vec<f64> {
    let gram = if a.rows() <= a.cols() {
        a.matmul(&a.transpose())
    } else {
        a.transpose().matmul(a)
    };
    let mut eig = jacobi_eigenvalues(&gram);
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig.iter().map(|&l| l.max(0.0).sqrt()).collect()
}

/// Number of singular values above `rel_tol` times the largest.
pub fn numerical_rank(a: &Mat, rel_tol: f64) -> usize {
    let sv = singular_values(a);
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(s: &Mat) -> Vec<f64> {
    let n = s.rows();
    assert_eq!(n, s.cols(), "jacobi needs a square matrix");
    let mut a = s.clone();
    let norm = a.max_abs();
    if norm == 0.0 || n < 2 {
        return (0..n).map(|i| a.get(i, i)).collect();
    }
    let tol = 1e-14 * norm;
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(a.get(p, q).abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
            }
        }
    }
    (0..n).map(|i| a.get(i, i)).collect()
}

// ---------------------------------------------------------------------------
// Compensated summation
// ---------------------------------------------------------------------------

/// Compensated accumulator (Kahan summation, Neumaier variant). Keeps
/// cancellation error near one ulp of the true sum even when terms are
/// orders of magnitude larger than the result, which is exactly the
/// situation when large secret keys cancel.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Coordinate-wise compensated sum of `coeff * row` over all pairs.
pub fn kahan_weighted_sum<'a, I>(terms: I, dim: usize) -> Vec<f64>
where
    I: IntoIterator<Item = (f64, &'a [f64])>,
{
    let mut acc = vec![KahanSum::new(); dim];
    for (coeff, row) in terms {
        assert_eq!(row.len(), dim, "weighted sum dimension mismatch");
        for (a, &v) in acc.iter_mut().zip(row) {
            a.add(coeff * v);
        }
    }
    acc.iter().map(KahanSum::value).collect()
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
