//! Small dense helpers: a growable packed lower-triangular factor and a
//! jittered Cholesky for sampling.

use crate::error::{Error, Result};

/// Diagonal jitter ladder used when factoring covariance matrices for sampling.
pub const JITTER_LADDER: [f64; 7] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Lower-triangular matrix stored row by row; row `i` holds `i + 1` entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct PackedLower {
    n: usize,
    data: Vec<f64>,
}

impl PackedLower {
    pub fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.data[start..start + i + 1]
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.row(i)[i]
    }

    /// Appends row `n` given its off-diagonal part and diagonal entry.
    pub fn push_row(&mut self, off: &[f64], diag: f64) {
        debug_assert_eq!(off.len(), self.n);
        self.data.extend_from_slice(off);
        self.data.push(diag);
        self.n += 1;
    }

    /// Solves `L x = b` for the leading `b.len()` rows.
    pub fn forward_solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(b.len());
        for (i, bi) in b.iter().enumerate() {
            let row = self.row(i);
            let s = dot(&row[..i], &x);
            x.push((bi - s) / row[i]);
        }
        x
    }

    /// Re-solves `L x = b` in place from row `from` onward, keeping `x[..from]`.
    pub fn forward_solve_from(&self, b: &[f64], x: &mut [f64], from: usize) {
        for i in from..b.len() {
            let row = self.row(i);
            let s = dot(&row[..i], &x[..i]);
            x[i] = (b[i] - s) / row[i];
        }
    }

    /// Factors a symmetric positive-definite row-major matrix.
    pub fn factor(a: &[f64], n: usize) -> Option<Self> {
        let mut l = PackedLower::default();
        let mut off = Vec::with_capacity(n);
        for i in 0..n {
            off.clear();
            for j in 0..i {
                let s = a[i * n + j] - dot(&l.row(j)[..j], &off[..j]);
                off.push(s / l.diag(j));
            }
            let d = a[i * n + i] - dot(&off, &off);
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            l.push_row(&off, d.sqrt());
        }
        Some(l)
    }

    /// Row-major square copy with zeros above the diagonal.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            out[i * n..i * n + i + 1].copy_from_slice(self.row(i));
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Full row-major lower factor of `a + jitter * I`, escalating the jitter along
/// [`JITTER_LADDER`]. Returns the factor and the jitter that succeeded.
pub(crate) fn jittered_cholesky(a: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let mut work = a.to_vec();
    let mut applied = 0.0;
    for &jitter in &JITTER_LADDER {
        for i in 0..n {
            work[i * n + i] += jitter - applied;
        }
        applied = jitter;
        if let Some(l) = dense_cholesky(&work, n) {
            return Ok((l, jitter));
        }
    }
    Err(Error::numerical(format!(
        "covariance of size {n} not positive definite even with jitter {:e}",
        JITTER_LADDER[JITTER_LADDER.len() - 1]
    )))
}

fn dense_cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = a[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// `L z` for a full row-major lower factor.
pub(crate) fn lower_mul(l: &[f64], n: usize, z: &[f64]) -> Vec<f64> {
    (0..n).map(|i| dot(&l[i * n..i * n + i + 1], &z[..=i])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_factor_reconstructs() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let l = PackedLower::factor(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..=i {
                let v = dot(&l.row(i)[..=j], &l.row(j)[..=j]);
                assert!((v - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        let x = l.forward_solve(&[1.0, 2.0, 3.0]);
        let back: Vec<f64> = (0..3).map(|i| dot(l.row(i), &x[..=i])).collect();
        for (b, e) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((b - e).abs() < 1e-12);
        }
    }

    #[test]
    fn not_pd_detected() {
        assert!(PackedLower::factor(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn jitter_rescues_singular() {
        // rank one
        let a = [1.0, 1.0, 1.0, 1.0];
        let (l, jitter) = jittered_cholesky(&a, 2).unwrap();
        assert!(jitter > 0.0);
        assert!(l[3] > 0.0);
        assert!(jittered_cholesky(&[-1.0], 1).is_err());
    }
}
