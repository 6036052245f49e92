//! Quadratic forms for pairwise and per-dimension squared distances.
//!
//! With `c = vec(C)`, the squared Euclidean distance between vectors `i` and
//! `j` is `cᴴ E_{i,j} c` and the squared gap in dimension `k` is
//! `cᴴ B_{i,j,k} c`. Both matrices are real, symmetric, and have entries in
//! `{-1, 0, +1}`.
//!
//! The solver works over the realified vector `z = [Re(c); Im(c)]`, where a
//! real symmetric `A` acts as `blockdiag(A, A)`. Forms are evaluated from
//! their index structure alone; [`build_e`] and [`build_b`] materialize the
//! matrices for inspection and testing.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Which distance a quadratic form measures. Indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FormKind {
    /// `‖x_i - x_j‖²`.
    EuclideanPair { i: usize, j: usize },
    /// `|x_{i,k} - x_{j,k}|²`.
    Elementwise { i: usize, j: usize, k: usize },
}

/// A quadratic form over a constellation of shape `(K, M)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuadFormIndex {
    pub kind: FormKind,
    pub dims: usize,
    pub size: usize,
}

impl QuadFormIndex {
    pub fn euclidean_pair(i: usize, j: usize, dims: usize, size: usize) -> Result<Self> {
        check_pair(i, j, size)?;
        check_dims(dims)?;
        Ok(Self { kind: FormKind::EuclideanPair { i, j }, dims, size })
    }

    pub fn elementwise(i: usize, j: usize, k: usize, dims: usize, size: usize) -> Result<Self> {
        check_pair(i, j, size)?;
        check_dims(dims)?;
        if k >= dims {
            return Err(Error::Index(format!("dimension {k} out of range for K={dims}")));
        }
        Ok(Self { kind: FormKind::Elementwise { i, j, k }, dims, size })
    }

    /// Length of the realified vector, `2KM`.
    pub fn real_len(&self) -> usize {
        2 * self.dims * self.size
    }

    /// Pairs of complex positions `(p, q)` whose difference the form squares.
    fn position_pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        let k_dim = self.dims;
        let (i, j, range) = match self.kind {
            FormKind::EuclideanPair { i, j } => (i, j, 0..k_dim),
            FormKind::Elementwise { i, j, k } => (i, j, k..k + 1),
        };
        range.map(move |k| (i * k_dim + k, j * k_dim + k))
    }

    /// `zᵀ blockdiag(A, A) z`.
    pub fn value(&self, z: &RealVector) -> Result<f64> {
        self.check_len(z)?;
        Ok(self.value_unchecked(z.as_slice()))
    }

    pub(crate) fn value_unchecked(&self, z: &[f64]) -> f64 {
        let half = z.len() / 2;
        self.position_pairs()
            .map(|(p, q)| {
                let dr = z[p] - z[q];
                let di = z[half + p] - z[half + q];
                dr * dr + di * di
            })
            .sum()
    }

    /// `2 blockdiag(A, A) z`, dense.
    pub fn gradient(&self, z: &RealVector) -> Result<RealVector> {
        self.check_len(z)?;
        let mut g = vec![0.0; z.len()];
        for (idx, v) in self.sparse_gradient_unchecked(z.as_slice()) {
            g[idx] += v;
        }
        Ok(RealVector(g))
    }

    /// Nonzero entries of the gradient: `4K` for a pair form, 4 for an
    /// element-wise form.
    pub fn sparse_gradient(&self, z: &RealVector) -> Result<Vec<(usize, f64)>> {
        self.check_len(z)?;
        Ok(self.sparse_gradient_unchecked(z.as_slice()))
    }

    pub(crate) fn sparse_gradient_unchecked(&self, z: &[f64]) -> Vec<(usize, f64)> {
        let half = z.len() / 2;
        let mut out = Vec::with_capacity(4 * self.dims);
        for (p, q) in self.position_pairs() {
            let dr = 2.0 * (z[p] - z[q]);
            let di = 2.0 * (z[half + p] - z[half + q]);
            out.push((p, dr));
            out.push((q, -dr));
            out.push((half + p, di));
            out.push((half + q, -di));
        }
        out
    }

    /// The complex-domain matrix `A` (order `KM`).
    pub fn to_matrix(&self) -> SparseSymMatrix {
        let mut entries = Vec::new();
        for (p, q) in self.position_pairs() {
            entries.push((p, p, 1.0));
            entries.push((q, q, 1.0));
            entries.push((p, q, -1.0));
            entries.push((q, p, -1.0));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        SparseSymMatrix { order: self.dims * self.size, entries }
    }

    fn check_len(&self, z: &RealVector) -> Result<()> {
        if z.len() != self.real_len() {
            return Err(Error::Dimension(format!(
                "realified vector has length {}, expected {}",
                z.len(),
                self.real_len()
            )));
        }
        Ok(())
    }
}

fn check_pair(i: usize, j: usize, size: usize) -> Result<()> {
    if i >= j || j >= size {
        return Err(Error::Index(format!("need 0 ≤ i < j < M, got i={i}, j={j}, M={size}")));
    }
    Ok(())
}

fn check_dims(dims: usize) -> Result<()> {
    if dims == 0 {
        return Err(Error::Dimension("K must be at least 1".into()));
    }
    Ok(())
}

/// Builds `E_{i,j}` for a `(K, M)` constellation.
pub fn build_e(i: usize, j: usize, dims: usize, size: usize) -> Result<SparseSymMatrix> {
    Ok(QuadFormIndex::euclidean_pair(i, j, dims, size)?.to_matrix())
}

/// Builds `B_{i,j,k}` for a `(K, M)` constellation.
pub fn build_b(i: usize, j: usize, k: usize, dims: usize, size: usize) -> Result<SparseSymMatrix> {
    Ok(QuadFormIndex::elementwise(i, j, k, dims, size)?.to_matrix())
}

/// Symmetric matrix with `±1` entries stored as a coordinate list sorted
/// by `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix {
    pub order: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseSymMatrix {
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries.iter().filter(|&&(r, c, _)| r == row && c == col).map(|&(_, _, v)| v).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.order]; self.order];
        for &(r, c, v) in &self.entries {
            d[r][c] += v;
        }
        d
    }

    /// `cᴴ A c` for complex `c`.
    pub fn quad_complex(&self, c: &[Complex64]) -> f64 {
        self.entries.iter().map(|&(r, col, v)| (c[r].conj() * c[col] * v).re).sum()
    }

    /// `zᵀ blockdiag(A, A) z` for realified `z`.
    pub fn quad_real(&self, z: &RealVector) -> f64 {
        let n = self.order;
        let z = z.as_slice();
        self.entries.iter().map(|&(r, c, v)| v * (z[r] * z[c] + z[n + r] * z[n + c])).sum()
    }

    /// Renders the matrix with `+`, `-` and `0`, one row per line.
    pub fn pattern(&self) -> String {
        self.to_dense()
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| match v {
                        v if v > 0.0 => "+",
                        v if v < 0.0 => "-",
                        _ => "0",
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Realified constellation vector `[Re(c); Im(c)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealVector(pub Vec<f64>);

impl RealVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Inverse of [`realify`].
    pub fn to_complex(&self) -> Vec<Complex64> {
        let half = self.0.len() / 2;
        (0..half).map(|p| Complex64::new(self.0[p], self.0[half + p])).collect()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn realify(c: &[Complex64]) -> RealVector {
    RealVector(c.iter().map(|z| z.re).chain(c.iter().map(|z| z.im)).collect())
}

/// Every pair form and element-wise form of a `(K, M)` constellation, in
/// pair-major order.
pub fn all_forms(dims: usize, size: usize) -> (Vec<QuadFormIndex>, Vec<QuadFormIndex>) {
    let mut pair_forms = Vec::new();
    let mut ew_forms = Vec::new();
    for (i, j) in crate::constellation::pairs(size) {
        pair_forms.push(QuadFormIndex { kind: FormKind::EuclideanPair { i, j }, dims, size });
        for k in 0..dims {
            ew_forms.push(QuadFormIndex { kind: FormKind::Elementwise { i, j, k }, dims, size });
        }
    }
    (pair_forms, ew_forms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_c(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n).map(|_| Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect()
    }

    #[test]
    fn e12_pattern_for_k2_m4() {
        let e = build_e(0, 1, 2, 4).unwrap();
        let expected = "\
+ 0 - 0 0 0 0 0
0 + 0 - 0 0 0 0
- 0 + 0 0 0 0 0
0 - 0 + 0 0 0 0
0 0 0 0 0 0 0 0
0 0 0 0 0 0 0 0
0 0 0 0 0 0 0 0
0 0 0 0 0 0 0 0";
        assert_eq!(e.pattern(), expected);
        assert_eq!(e.nnz(), 4 * 2);
    }

    #[test]
    fn b121_pattern_for_k2_m4() {
        let b = build_b(0, 1, 0, 2, 4).unwrap();
        let expected = "\
+ 0 - 0 0 0 0 0
0 0 0 0 0 0 0 0
- 0 + 0 0 0 0 0
0 0 0 0 0 0 0 0
0 0 0 0 0 0 0 0
0 0 0 0 0 0 0 0
0 0 0 0 0 0 0 0
0 0 0 0 0 0 0 0";
        assert_eq!(b.pattern(), expected);
        assert_eq!(b.nnz(), 4);
    }

    #[test]
    fn invalid_indices() {
        assert!(build_e(1, 1, 2, 4).is_err());
        assert!(build_e(2, 1, 2, 4).is_err());
        assert!(build_e(0, 4, 2, 4).is_err());
        assert!(build_b(0, 1, 2, 2, 4).is_err());
    }

    #[test]
    fn rows_sum_to_zero_and_b_sums_to_e() {
        let (dims, size) = (3, 5);
        for (i, j) in crate::constellation::pairs(size) {
            let e = build_e(i, j, dims, size).unwrap().to_dense();
            for row in &e {
                assert_eq!(row.iter().sum::<f64>(), 0.0);
            }
            let mut acc = vec![vec![0.0; dims * size]; dims * size];
            for k in 0..dims {
                let b = build_b(i, j, k, dims, size).unwrap().to_dense();
                for r in 0..acc.len() {
                    for c in 0..acc.len() {
                        acc[r][c] += b[r][c];
                    }
                }
            }
            assert_eq!(acc, e);
        }
    }

    #[test]
    fn forms_match_direct_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (dims, size) = (2, 4);
        for _ in 0..100 {
            let c = random_c(&mut rng, dims * size);
            let z = realify(&c);
            for (i, j) in crate::constellation::pairs(size) {
                let direct: f64 = (0..dims).map(|k| (c[i * dims + k] - c[j * dims + k]).norm_sqr()).sum();
                let e = build_e(i, j, dims, size).unwrap();
                assert!((e.quad_complex(&c) - direct).abs() < 1e-10);
                let idx = QuadFormIndex::euclidean_pair(i, j, dims, size).unwrap();
                assert!((idx.value(&z).unwrap() - direct).abs() < 1e-10);
                for k in 0..dims {
                    let d = (c[i * dims + k] - c[j * dims + k]).norm_sqr();
                    let b = build_b(i, j, k, dims, size).unwrap();
                    assert!((b.quad_complex(&c) - d).abs() < 1e-12);
                    assert!((b.quad_real(&z) - d).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn simple_value() {
        // x₁ = (1, 0), x₂ = (0, 1)
        let c = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
        ];
        let idx = QuadFormIndex::euclidean_pair(0, 1, 2, 2).unwrap();
        assert_eq!(idx.value(&realify(&c)).unwrap(), 2.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (dims, size) = (3, 4);
        let z = realify(&random_c(&mut rng, dims * size));
        let (pf, ef) = all_forms(dims, size);
        for idx in pf.iter().chain(&ef) {
            let g = idx.gradient(&z).unwrap();
            for p in 0..z.len() {
                let h = 1e-6;
                let mut zp = z.clone();
                zp.0[p] += h;
                let mut zm = z.clone();
                zm.0[p] -= h;
                let fd = (idx.value(&zp).unwrap() - idx.value(&zm).unwrap()) / (2.0 * h);
                assert!((fd - g.0[p]).abs() < 1e-6, "{idx:?} p={p}");
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let idx = QuadFormIndex::euclidean_pair(0, 1, 2, 4).unwrap();
        assert!(matches!(idx.value(&RealVector(vec![0.0; 5])), Err(Error::Dimension(_))));
        assert!(idx.gradient(&RealVector(vec![0.0; 15])).is_err());
    }

    #[test]
    fn matrices_are_psd_with_eigenvalues_zero_or_two() {
        let (dims, size) = (2, 3);
        let (pf, ef) = all_forms(dims, size);
        for idx in pf.iter().chain(&ef) {
            let d = idx.to_matrix().to_dense();
            let n = d.len();
            let m = DMatrix::from_fn(n, n, |r, c| d[r][c]);
            assert_eq!(m, m.transpose());
            for ev in m.symmetric_eigenvalues().iter() {
                assert!(ev.abs() < 1e-12 || (ev - 2.0).abs() < 1e-12, "{ev}");
            }
        }
    }

    #[test]
    fn realify_roundtrip() {
        let c = vec![Complex64::new(1.0, -2.0), Complex64::new(3.5, 0.25)];
        let z = realify(&c);
        assert_eq!(z.0, vec![1.0, 3.5, -2.0, 0.25]);
        assert_eq!(z.to_complex(), c);
    }
}
