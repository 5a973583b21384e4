//! Dense complex linear algebra over labeled tensor-product spaces.
//!
//! Everything in scope is desk-scale (total dimension at most a few
//! hundred), so matrices are dense, row-major and immutable once built.
//! Equality is max-entry difference; validity predicates (unitarity,
//! Hermiticity, ...) use Frobenius-norm comparisons.

use num_complex::Complex64;
use std::fmt;

/// Comparison threshold for floating-point algebra.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub eps: f64,
}

impl Tolerance {
    pub fn new(eps: f64) -> Self {
        assert!(eps > 0.0, "tolerance must be positive");
        Tolerance { eps }
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { eps: 1e-9 }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("expected a normalized vector (norm = {0})")]
    NotNormalized(f64),
    #[error("expected a Hermitian matrix")]
    NotHermitian,
}

pub type C64 = Complex64;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Dense complex matrix, row-major. Column vectors are `cols == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} entries for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(ComplexMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, cr(1.0));
        }
        m
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        ComplexMatrix::new(r, c, data).expect("from_rows")
    }

    /// Column vector from complex amplitudes.
    pub fn col(amps: &[C64]) -> Self {
        ComplexMatrix::new(amps.len(), 1, amps.to_vec()).expect("column vector")
    }

    /// Column vector from real amplitudes.
    pub fn col_real(amps: &[f64]) -> Self {
        Self::col(&amps.iter().map(|&a| cr(a)).collect::<Vec<_>>())
    }

    /// Standard basis column vector `e_i` in dimension `dim`.
    pub fn basis_vector(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim, 1);
        v.set(i, 0, cr(1.0));
        v
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: C64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn trace(&self) -> C64 {
        assert!(self.is_square(), "trace of a non-square matrix");
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j).conj());
            }
        }
        out
    }

    pub fn scale(&self, k: C64) -> Self {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * k).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik.norm_sqr() == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    let v = out.get(i, j) + aik * other.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        let mut out = vec![C64::new(0.0, 0.0); self.rows];
        for i in 0..self.rows {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..self.cols {
                acc += self.get(i, k) * v[k];
            }
            out[i] = acc;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_entry_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Matrix equality: max entry difference below `tol.eps`.
    pub fn approx_eq(&self, other: &Self, tol: Tolerance) -> bool {
        (self.rows, self.cols) == (other.rows, other.cols)
            && self.max_entry_diff(other) < tol.eps
    }

    pub fn is_unitary(&self, tol: Tolerance) -> bool {
        if !self.is_square() {
            return false;
        }
        let prod = self.adjoint().matmul(self);
        prod.sub(&Self::identity(self.rows)).frobenius_norm() < tol.eps
    }

    pub fn is_hermitian(&self, tol: Tolerance) -> bool {
        if !self.is_square() {
            return false;
        }
        self.sub(&self.adjoint()).frobenius_norm() < tol.eps
    }

    pub fn is_trace_one(&self, tol: Tolerance) -> bool {
        self.is_square() && (self.trace() - cr(1.0)).norm() < tol.eps
    }

    /// Positive semidefiniteness for (near-)Hermitian matrices: all
    /// eigenvalues of the Hermitian part are above `-eps`.
    pub fn is_psd(&self, tol: Tolerance) -> bool {
        if !self.is_hermitian(tol) {
            return false;
        }
        let (eigs, _) = hermitian_eigen(self);
        eigs.iter().all(|&l| l > -tol.eps)
    }

    pub fn is_density_operator(&self, tol: Tolerance) -> bool {
        self.is_hermitian(tol) && self.is_trace_one(tol) && self.is_psd(tol)
    }

    /// Vector 2-norm of a column vector.
    pub fn vec_norm(&self) -> f64 {
        assert_eq!(self.cols, 1);
        self.frobenius_norm()
    }

    /// Inner product of column vectors, conjugate-linear in `self`.
    pub fn vec_inner(&self, other: &Self) -> C64 {
        assert_eq!(self.cols, 1);
        assert_eq!(other.cols, 1);
        assert_eq!(self.rows, other.rows);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }
}

impl fmt::Display for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            for j in 0..self.cols {
                let z = self.get(i, j);
                if j > 0 {
                    write!(f, "  ")?;
                }
                if z.im.abs() < 1e-12 {
                    write!(f, "{:+.6}", z.re)?;
                } else {
                    write!(f, "{:+.6}{:+.6}i", z.re, z.im)?;
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Kronecker product: dims multiply, bilinear in both arguments.
pub fn tensor(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let mut out = ComplexMatrix::zeros(rows, cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a.get(i, j);
            if aij.norm_sqr() == 0.0 {
                continue;
            }
            for k in 0..b.rows {
                for l in 0..b.cols {
                    out.set(i * b.rows + k, j * b.cols + l, aij * b.get(k, l));
                }
            }
        }
    }
    out
}

pub fn tensor_all(factors: &[ComplexMatrix]) -> ComplexMatrix {
    assert!(!factors.is_empty());
    let mut acc = factors[0].clone();
    for f in &factors[1..] {
        acc = tensor(&acc, f);
    }
    acc
}

/// Index helpers for mixed-radix tensor indices (first factor is the
/// most significant digit, matching Kronecker ordering).
pub fn index_to_digits(mut idx: usize, dims: &[usize]) -> Vec<usize> {
    let mut digits = vec![0usize; dims.len()];
    for (k, &d) in dims.iter().enumerate().rev() {
        digits[k] = idx % d;
        idx /= d;
    }
    digits
}

pub fn digits_to_index(digits: &[usize], dims: &[usize]) -> usize {
    let mut idx = 0usize;
    for (k, &d) in dims.iter().enumerate() {
        idx = idx * d + digits[k];
    }
    idx
}

/// Partial trace of `rho` over the factors *not* in `keep`.
///
/// `dims` are the per-factor dimensions; `keep` is an increasing list of
/// factor indices. The trace and Hermiticity are preserved.
pub fn partial_trace(
    rho: &ComplexMatrix,
    dims: &[usize],
    keep: &[usize],
) -> Result<ComplexMatrix, LinalgError> {
    let total: usize = dims.iter().product();
    if !rho.is_square() || rho.rows != total {
        return Err(LinalgError::DimensionMismatch(format!(
            "operator is {}x{}, factors give {}",
            rho.rows, rho.cols, total
        )));
    }
    if keep.iter().any(|&k| k >= dims.len()) {
        return Err(LinalgError::DimensionMismatch(
            "keep index out of range".into(),
        ));
    }
    let mut keep_sorted = keep.to_vec();
    keep_sorted.sort_unstable();
    keep_sorted.dedup();
    let trace_out: Vec<usize> = (0..dims.len()).filter(|k| !keep_sorted.contains(k)).collect();
    let keep_dims: Vec<usize> = keep_sorted.iter().map(|&k| dims[k]).collect();
    let out_dim: usize = keep_dims.iter().product();
    let env_dims: Vec<usize> = trace_out.iter().map(|&k| dims[k]).collect();
    let env_total: usize = env_dims.iter().product::<usize>().max(1);

    let mut out = ComplexMatrix::zeros(out_dim, out_dim);
    let mut row_digits = vec![0usize; dims.len()];
    let mut col_digits = vec![0usize; dims.len()];
    for i in 0..out_dim {
        let kd_i = index_to_digits(i, &keep_dims);
        for j in 0..out_dim {
            let kd_j = index_to_digits(j, &keep_dims);
            let mut acc = C64::new(0.0, 0.0);
            for e in 0..env_total {
                let ed = index_to_digits(e, &env_dims);
                for (pos, &f) in keep_sorted.iter().enumerate() {
                    row_digits[f] = kd_i[pos];
                    col_digits[f] = kd_j[pos];
                }
                for (pos, &f) in trace_out.iter().enumerate() {
                    row_digits[f] = ed[pos];
                    col_digits[f] = ed[pos];
                }
                let r = digits_to_index(&row_digits, dims);
                let c = digits_to_index(&col_digits, dims);
                acc += rho.get(r, c);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Rank-one projector `v v†` of a normalized column vector.
pub fn projector(v: &ComplexMatrix) -> Result<ComplexMatrix, LinalgError> {
    if v.cols != 1 {
        return Err(LinalgError::DimensionMismatch(
            "projector expects a column vector".into(),
        ));
    }
    let n = v.vec_norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(LinalgError::NotNormalized(n));
    }
    let mut out = ComplexMatrix::zeros(v.rows, v.rows);
    for i in 0..v.rows {
        for j in 0..v.rows {
            out.set(i, j, v.get(i, 0) * v.get(j, 0).conj());
        }
    }
    Ok(out)
}

/// Eigendecomposition of a Hermitian matrix by cyclic complex Jacobi
/// rotations. Returns eigenvalues (descending) with matching
/// orthonormal eigenvectors as columns.
pub fn hermitian_eigen(m: &ComplexMatrix) -> (Vec<f64>, ComplexMatrix) {
    assert!(m.is_square(), "eigendecomposition of a non-square matrix");
    let n = m.rows;
    let mut a = m.clone();
    let mut v = ComplexMatrix::identity(n);
    let jacobi_tol = 1e-12;
    let max_sweeps = 100;

    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q).norm_sqr();
            }
        }
        if off.sqrt() < jacobi_tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.norm() < jacobi_tol * 1e-3 {
                    continue;
                }
                let app = a.get(p, p).re;
                let aqq = a.get(q, q).re;
                let phase = apq / cr(apq.norm());
                // Rotation angle zeroing the (p,q) entry of the 2x2
                // block: tan(2θ) = 2|apq| / (app - aqq).
                let tau = (app - aqq) / (2.0 * apq.norm());
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let cth = 1.0 / (1.0 + t * t).sqrt();
                let sth = t * cth;
                // A <- J† A J with J[p,p]=J[q,q]=c, J[p,q]=-s·phase,
                // J[q,p]=s·conj(phase).
                let (cpx, sph) = (cr(cth), cr(sth) * phase);
                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, aip * cpx + aiq * sph.conj());
                    a.set(i, q, aiq * cpx - aip * sph);
                }
                for j in 0..n {
                    let apj = a.get(p, j);
                    let aqj = a.get(q, j);
                    a.set(p, j, apj * cpx + aqj * sph);
                    a.set(q, j, aqj * cpx - apj * sph.conj());
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, vip * cpx + viq * sph.conj());
                    v.set(i, q, viq * cpx - vip * sph);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eigvals: Vec<f64> = (0..n).map(|i| a.get(i, i).re).collect();
    order.sort_by(|&i, &j| eigvals[j].partial_cmp(&eigvals[i]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| eigvals[i]).collect();
    let mut sorted_vecs = ComplexMatrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            sorted_vecs.set(i, new_col, v.get(i, old_col));
        }
    }
    (sorted_vals, sorted_vecs)
}

/// Orthonormal eigenvectors of `rho` with eigenvalue above `tol.eps`;
/// they span the operator's range.
pub fn support_basis(
    rho: &ComplexMatrix,
    tol: Tolerance,
) -> Result<Vec<ComplexMatrix>, LinalgError> {
    if !rho.is_hermitian(Tolerance::new(tol.eps.max(1e-9) * 10.0)) {
        return Err(LinalgError::NotHermitian);
    }
    let (vals, vecs) = hermitian_eigen(rho);
    let mut out = Vec::new();
    for (k, &l) in vals.iter().enumerate() {
        if l > tol.eps {
            let mut col = ComplexMatrix::zeros(rho.rows, 1);
            for i in 0..rho.rows {
                col.set(i, 0, vecs.get(i, k));
            }
            out.push(col);
        }
    }
    Ok(out)
}

/// Rank of the column span of `vectors` (unit-norm columns expected),
/// counted as eigenvalues of the Gram matrix above `tol.eps`.
pub fn span_rank(vectors: &[ComplexMatrix], tol: Tolerance) -> usize {
    if vectors.is_empty() {
        return 0;
    }
    let k = vectors.len();
    let mut gram = ComplexMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            gram.set(i, j, vectors[i].vec_inner(&vectors[j]));
        }
    }
    let (vals, _) = hermitian_eigen(&gram);
    vals.iter().filter(|&&l| l > tol.eps).count()
}

/// Reorders the tensor factors of a square operator.
///
/// `perm[k]` names the old factor position that moves to new position
/// `k`; `dims` are the old per-factor dimensions.
pub fn permute_factors(m: &ComplexMatrix, dims: &[usize], perm: &[usize]) -> ComplexMatrix {
    let total: usize = dims.iter().product();
    assert_eq!(m.rows, total);
    assert_eq!(m.cols, total);
    let new_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let mut out = ComplexMatrix::zeros(total, total);
    for r in 0..total {
        let rd = index_to_digits(r, dims);
        let nr: Vec<usize> = perm.iter().map(|&p| rd[p]).collect();
        let nri = digits_to_index(&nr, &new_dims);
        for c in 0..total {
            let cd = index_to_digits(c, dims);
            let nc: Vec<usize> = perm.iter().map(|&p| cd[p]).collect();
            let nci = digits_to_index(&nc, &new_dims);
            out.set(nri, nci, m.get(r, c));
        }
    }
    out
}

/// Common 2x2 gates used by protocol files and tests.
pub mod gates {
    use super::*;

    pub fn hadamard() -> ComplexMatrix {
        let s = 1.0 / 2.0_f64.sqrt();
        ComplexMatrix::from_rows(&[vec![cr(s), cr(s)], vec![cr(s), cr(-s)]])
    }

    pub fn pauli_x(dim: usize, shift: usize) -> ComplexMatrix {
        let mut m = ComplexMatrix::zeros(dim, dim);
        for i in 0..dim {
            m.set((i + shift) % dim, i, cr(1.0));
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plus() -> ComplexMatrix {
        ComplexMatrix::col_real(&[1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()])
    }

    fn fail_vec() -> ComplexMatrix {
        // (e0 + e3) / sqrt(2) on a 2x2-factor space
        ComplexMatrix::col_real(&[1.0 / 2f64.sqrt(), 0.0, 0.0, 1.0 / 2f64.sqrt()])
    }

    #[test]
    fn tensor_identity_case() {
        let i2 = ComplexMatrix::identity(2);
        assert!(tensor(&i2, &i2).approx_eq(&ComplexMatrix::identity(4), Tolerance::default()));
    }

    #[test]
    fn tensor_basis_case() {
        let e0 = ComplexMatrix::basis_vector(2, 0);
        let t = tensor(&e0, &e0);
        assert!(t.approx_eq(&ComplexMatrix::basis_vector(4, 0), Tolerance::default()));
    }

    #[test]
    fn tensor_superposition_case() {
        // Kronecker product expanded by hand:
        // (e0+e1)/sqrt(2) (x) e0 = (e00 + e10)/sqrt(2)
        let t = tensor(&plus(), &ComplexMatrix::basis_vector(2, 0));
        let expected =
            ComplexMatrix::col_real(&[1.0 / 2f64.sqrt(), 0.0, 1.0 / 2f64.sqrt(), 0.0]);
        assert!(t.approx_eq(&expected, Tolerance::default()));
    }

    #[test]
    fn projector_on_basis_vector() {
        let p = projector(&ComplexMatrix::basis_vector(2, 0)).unwrap();
        let expected = ComplexMatrix::from_rows(&[vec![cr(1.0), cr(0.0)], vec![cr(0.0), cr(0.0)]]);
        assert!(p.approx_eq(&expected, Tolerance::default()));
    }

    #[test]
    fn projector_on_plus() {
        let p = projector(&plus()).unwrap();
        let h = cr(0.5);
        let expected = ComplexMatrix::from_rows(&[vec![h, h], vec![h, h]]);
        assert!(p.approx_eq(&expected, Tolerance::default()));
    }

    #[test]
    fn projector_on_correlated_pair() {
        // Outer product of (e0+e3)/sqrt(2): one half at the four corners.
        let p = projector(&fail_vec()).unwrap();
        let mut expected = ComplexMatrix::zeros(4, 4);
        for &(i, j) in &[(0, 0), (0, 3), (3, 0), (3, 3)] {
            expected.set(i, j, cr(0.5));
        }
        assert!(p.approx_eq(&expected, Tolerance::default()));
    }

    #[test]
    fn projector_rejects_unnormalized() {
        let v = ComplexMatrix::col_real(&[1.0, 1.0]);
        assert!(matches!(projector(&v), Err(LinalgError::NotNormalized(_))));
    }

    #[test]
    fn partial_trace_of_correlated_pair() {
        let rho = projector(&fail_vec()).unwrap();
        let reduced = partial_trace(&rho, &[2, 2], &[0]).unwrap();
        let expected = ComplexMatrix::identity(2).scale(cr(0.5));
        assert!(reduced.approx_eq(&expected, Tolerance::default()));
    }

    #[test]
    fn partial_trace_of_product_state() {
        let a = projector(&plus()).unwrap();
        let b = projector(&ComplexMatrix::basis_vector(2, 1)).unwrap();
        let joint = tensor(&a, &b);
        let kept = partial_trace(&joint, &[2, 2], &[0]).unwrap();
        assert!(kept.approx_eq(&a, Tolerance::default()));
    }

    #[test]
    fn partial_trace_keep_second_factor() {
        let rho = projector(&ComplexMatrix::basis_vector(4, 0)).unwrap();
        let kept = partial_trace(&rho, &[2, 2], &[1]).unwrap();
        let expected = projector(&ComplexMatrix::basis_vector(2, 0)).unwrap();
        assert!(kept.approx_eq(&expected, Tolerance::default()));
    }

    #[test]
    fn partial_trace_dimension_error() {
        let rho = ComplexMatrix::identity(3);
        assert!(partial_trace(&rho, &[2, 2], &[0]).is_err());
    }

    #[test]
    fn predicate_verdicts() {
        let tol = Tolerance::default();
        assert!(gates::hadamard().is_unitary(tol));
        let half = ComplexMatrix::identity(2).scale(cr(0.5));
        assert!(half.is_psd(tol));
        assert!(half.is_trace_one(tol));
        let nilpotent =
            ComplexMatrix::from_rows(&[vec![cr(0.0), cr(1.0)], vec![cr(0.0), cr(0.0)]]);
        assert!(!nilpotent.is_hermitian(tol));
    }

    #[test]
    fn support_of_diagonal_mixture() {
        let tol = Tolerance::default();
        let half = ComplexMatrix::identity(2).scale(cr(0.5));
        let basis = support_basis(&half, tol).unwrap();
        assert_eq!(basis.len(), 2);
        assert_eq!(span_rank(&basis, tol), 2);
    }

    #[test]
    fn support_of_pure_state() {
        let tol = Tolerance::default();
        let rho = projector(&ComplexMatrix::basis_vector(2, 0)).unwrap();
        let basis = support_basis(&rho, tol).unwrap();
        assert_eq!(basis.len(), 1);
        assert!((basis[0].get(0, 0).norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn support_of_classical_pair_mixture() {
        // Eigendecomposition by hand: eigenvectors e0 and e3.
        let tol = Tolerance::default();
        let mut rho = ComplexMatrix::zeros(4, 4);
        rho.set(0, 0, cr(0.5));
        rho.set(3, 3, cr(0.5));
        let basis = support_basis(&rho, tol).unwrap();
        assert_eq!(basis.len(), 2);
        for v in &basis {
            // up to phase/order, each eigenvector sits on e0 or e3
            let m0 = v.get(0, 0).norm();
            let m3 = v.get(3, 0).norm();
            assert!((m0 - 1.0).abs() < 1e-9 || (m3 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn eigen_reconstructs_hermitian_matrix() {
        let m = ComplexMatrix::from_rows(&[
            vec![cr(2.0), c(0.0, -1.0), cr(0.5)],
            vec![c(0.0, 1.0), cr(1.0), c(0.25, 0.25)],
            vec![cr(0.5), c(0.25, -0.25), cr(-1.0)],
        ]);
        let (vals, vecs) = hermitian_eigen(&m);
        assert!(vecs.is_unitary(Tolerance::new(1e-9)));
        let mut lam = ComplexMatrix::zeros(3, 3);
        for (i, &l) in vals.iter().enumerate() {
            lam.set(i, i, cr(l));
        }
        let rebuilt = vecs.matmul(&lam).matmul(&vecs.adjoint());
        assert!(rebuilt.approx_eq(&m, Tolerance::new(1e-8)));
    }

    #[test]
    fn permute_factors_swaps_qubits() {
        let x = gates::pauli_x(2, 1);
        let i2 = ComplexMatrix::identity(2);
        let xi = tensor(&x, &i2);
        let ix = tensor(&i2, &x);
        let swapped = permute_factors(&xi, &[2, 2], &[1, 0]);
        assert!(swapped.approx_eq(&ix, Tolerance::default()));
    }
}
