//! Small dense linear-algebra helpers shared by the GP and clustering code.
//!
//! The GP conditioning path needs an appendable Cholesky factorization with
//! explicit jitter control, which the off-the-shelf factorizations do not
//! expose, so we keep a minimal lower-triangular implementation here.

use nalgebra::DMatrix;

/// Relative jitter ladder applied to Gram diagonals before factorization:
/// start at 1e-8 * mean(diag) and escalate x10 up to 1e-4 * mean(diag).
pub const JITTER_LADDER: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix,
/// supporting row/column appends for incremental GP conditioning.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    /// Row-major lower triangle, row i holding i+1 entries.
    rows: Vec<Vec<f64>>,
}

impl CholeskyFactor {
    /// Factor `a` (symmetric, size n) after adding `jitter` to its diagonal.
    /// Returns `None` if a non-positive pivot is hit.
    pub fn factor(a: &DMatrix<f64>, jitter: f64) -> Option<Self> {
        let n = a.nrows();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = vec![0.0; i + 1];
            for j in 0..=i {
                let mut s = a[(i, j)];
                if i == j {
                    s += jitter;
                    for k in 0..j {
                        s -= row[k] * row[k];
                    }
                    if s <= 0.0 || !s.is_finite() {
                        return None;
                    }
                    row[j] = s.sqrt();
                } else {
                    for k in 0..j {
                        s -= row[k] * rows[j][k];
                    }
                    row[j] = s / rows[j][j];
                }
            }
            rows.push(row);
        }
        Some(Self { rows })
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Append one row/column: `col` = covariances against existing points,
    /// `diag` = new diagonal entry (jitter already included by the caller).
    /// Returns false (leaving self untouched) if the pivot is non-positive.
    pub fn append(&mut self, col: &[f64], diag: f64) -> bool {
        let n = self.dim();
        debug_assert_eq!(col.len(), n);
        let v = self.solve_lower(col);
        let pivot = diag - v.iter().map(|x| x * x).sum::<f64>();
        if pivot <= 0.0 || !pivot.is_finite() {
            return false;
        }
        let mut row = v;
        row.push(pivot.sqrt());
        self.rows.push(row);
        true
    }

    /// Solve L x = b.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim().min(b.len());
        let mut x = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.rows[i][k] * x[k];
            }
            x[i] = s / self.rows[i][i];
        }
        x
    }

    /// Solve Lᵀ x = b.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.rows[k][i] * x[k];
            }
            x[i] = s / self.rows[i][i];
        }
        x
    }

    /// Solve (L Lᵀ) x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// log det(L Lᵀ) = 2 Σ log L_ii.
    pub fn log_det(&self) -> f64 {
        2.0 * self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| r[i].ln())
            .sum::<f64>()
    }

    /// Dense lower triangle, row i padded with zeros above the diagonal.
    pub fn dense_lower(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        self.rows
            .iter()
            .map(|r| {
                let mut row = r.clone();
                row.resize(n, 0.0);
                row
            })
            .collect()
    }
}

/// Factor with the escalating jitter ladder; returns the factor and the
/// absolute jitter that succeeded.
pub fn factor_with_jitter(a: &DMatrix<f64>) -> Option<(CholeskyFactor, f64)> {
    let n = a.nrows();
    if n == 0 {
        return Some((CholeskyFactor { rows: Vec::new() }, 0.0));
    }
    let mean_diag = (0..n).map(|i| a[(i, i)].abs()).sum::<f64>() / n as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    for rel in JITTER_LADDER {
        let jitter = rel * scale;
        if let Some(f) = CholeskyFactor::factor(a, jitter) {
            return Some((f, jitter));
        }
    }
    None
}

/// Symmetric inverse via Cholesky with the jitter ladder. Used where an
/// explicit inverse is required (d x d precision-style matrices).
pub fn sym_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let (f, _) = factor_with_jitter(a)?;
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let x = f.solve(&e);
        for i in 0..n {
            inv[(i, j)] = x[i];
        }
    }
    // symmetrize against round-off
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = m;
            inv[(j, i)] = m;
        }
    }
    Some(inv)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    #[test]
    fn factor_solve_roundtrip() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let (f, jit) = factor_with_jitter(&a).unwrap();
        assert!(jit < 1e-6);
        let b = [1.0, 2.0, 3.0];
        let x = f.solve(&b);
        let ax = &a * DVector::from_column_slice(&x);
        for i in 0..3 {
            assert_relative_eq!(ax[i], b[i], max_relative = 1e-6);
        }
    }

    #[test]
    fn append_matches_full_factor() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let top = a.view((0, 0), (2, 2)).into_owned();
        let mut f = CholeskyFactor::factor(&top, 0.0).unwrap();
        assert!(f.append(&[a[(0, 2)], a[(1, 2)]], a[(2, 2)]));
        let full = CholeskyFactor::factor(&a, 0.0).unwrap();
        let b = [0.3, -1.0, 2.0];
        let x1 = f.solve(&b);
        let x2 = full.solve(&b);
        for i in 0..3 {
            assert_relative_eq!(x1[i], x2[i], max_relative = 1e-10);
        }
        assert_relative_eq!(f.log_det(), full.log_det(), max_relative = 1e-10);
    }
}
