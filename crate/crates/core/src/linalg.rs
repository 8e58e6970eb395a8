//! Dense row-major matrices and a one-sided Jacobi SVD.
//!
//! The SVD works on the tall orientation of its input (transposing wide
//! matrices), orthogonalizes column pairs with Givens rotations until every
//! pair is orthogonal to a relative tolerance, then completes `U` to a full
//! orthonormal basis. Results are sorted by descending singular value and
//! sign-normalized so that repeated calls are bit-identical.

use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Default relative off-diagonal tolerance for [`svd`].
pub const SVD_TOL: f64 = 1e-12;

/// Maximum number of Jacobi sweeps before [`svd`] gives up.
pub const SVD_MAX_SWEEPS: usize = 100;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("Matrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_raw(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(shape_err("hstack", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(shape_err("vstack", "column counts differ"));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Matrix::from_raw(rows, cols, data))
    }
}

/// Standard product `a · b`. Each output entry accumulates over the inner
/// index in increasing order, so results are deterministic.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_tn", format!("({}x{})ᵀ · {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let (n, m) = (a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (o, &bkj) in out[i * m..(i + 1) * m].iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", format!("{}x{} · ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols)));
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum()))
}

/// Full singular value decomposition `A = U · diag(sigma) · Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// rows × rows, orthogonal.
    pub u: Matrix,
    /// min(rows, cols) values, non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// cols × cols, orthogonal.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank_limit(&self) -> usize {
        self.sigma.len()
    }

    /// `U · diag(sigma) · Vᵀ` with the rectangular diagonal.
    pub fn reconstruct(&self) -> Matrix {
        let (m, n) = (self.u.rows(), self.vt.cols());
        let mut scaled = Matrix::zeros(m, n);
        for (i, &s) in self.sigma.iter().enumerate() {
            for r in 0..m {
                scaled.set(r, i, self.u.get(r, i) * s);
            }
        }
        // Only the first sigma.len() columns are nonzero.
        let k = self.sigma.len();
        matmul(&scaled.columns(0, k), &self.vt.row_range(0, k)).expect("svd shapes agree")
    }
}

/// Rank-k cascaded factor pair: `w1 = U_k·Σ_k` (C_in×k) and `w2 = V_kᵀ` (k×C_out).
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedFactors {
    pub w1: Matrix,
    pub w2: Matrix,
    pub k: usize,
}

impl TruncatedFactors {
    pub fn param_count(&self) -> usize {
        self.k * (self.w1.rows() + self.w2.cols())
    }

    pub fn product(&self) -> Matrix {
        matmul(&self.w1, &self.w2).expect("factor shapes agree")
    }
}

/// Computes the full SVD with the default tolerance.
pub fn svd_default(a: &Matrix) -> Result<SvdResult> {
    svd(a, SVD_TOL)
}

/// One-sided Jacobi SVD. `tol` bounds the relative off-diagonal measure
/// `|aᵢ·aⱼ| / (‖aᵢ‖‖aⱼ‖)` over all column pairs at convergence.
pub fn svd(a: &Matrix, tol: f64) -> Result<SvdResult> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Config(format!("svd tolerance must be positive, got {tol}")));
    }
    if let Some(index) = a.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let (m, n) = a.shape();
    if m >= n {
        let (u, sigma, v) = jacobi_tall(a, tol)?;
        Ok(finish(u, sigma, v.transpose()))
    } else {
        // Aᵀ = U' Σ V'ᵀ  =>  A = V' Σ U'ᵀ
        let (u_t, sigma, v_t) = jacobi_tall(&a.transpose(), tol)?;
        Ok(finish(v_t, sigma, u_t.transpose()))
    }
}

/// Column-major working copy for the rotation loop.
struct Columns {
    len: usize,
    cols: Vec<Vec<f64>>,
}

impl Columns {
    fn of(a: &Matrix) -> Self {
        let cols = (0..a.cols).map(|c| (0..a.rows).map(|r| a.get(r, c)).collect()).collect();
        Self { len: a.rows, cols }
    }

    fn identity(n: usize) -> Self {
        let cols = (0..n).map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect()).collect();
        Self { len: n, cols }
    }

    fn rotate(&mut self, p: usize, q: usize, c: f64, s: f64) {
        let (left, right) = self.cols.split_at_mut(q);
        let (cp, cq) = (&mut left[p], &mut right[0]);
        for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
            let (xp, xq) = (*x, *y);
            *x = c * xp - s * xq;
            *y = s * xp + c * xq;
        }
    }

    fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.len, self.cols.len(), |r, c| self.cols[c][r])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `(U full m×m, sigma unsorted length n, V n×n)` for m ≥ n.
fn jacobi_tall(a: &Matrix, tol: f64) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    let mut w = Columns::of(a);
    let mut v = Columns::identity(n);
    // Columns whose norm falls below this are treated as exact zeros.
    let negligible = f64::EPSILON * a.frobenius_norm() * (m.max(n) as f64);
    let negligible_sq = negligible * negligible;

    let mut converged = n < 2;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps == SVD_MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, residual });
        }
        sweeps += 1;
        residual = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&w.cols[p], &w.cols[p]);
                let beta = dot(&w.cols[q], &w.cols[q]);
                if alpha <= negligible_sq || beta <= negligible_sq {
                    continue;
                }
                let gamma = dot(&w.cols[p], &w.cols[q]);
                let off = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                w.rotate(p, q, c, s);
                v.rotate(p, q, c, s);
            }
        }
        converged = residual <= tol;
    }

    let mut sigma = Vec::with_capacity(n);
    let mut basis: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for col in &w.cols {
        let norm = dot(col, col).sqrt();
        if norm <= negligible {
            sigma.push(0.0);
            basis.push(None);
        } else {
            sigma.push(norm);
            basis.push(Some(col.iter().map(|x| x / norm).collect()));
        }
    }
    let u = complete_basis(m, basis);
    Ok((u.to_matrix(), sigma, v.to_matrix()))
}

/// Fills `None` slots (and appends columns up to `m`) with unit vectors
/// orthogonal to everything already present, chosen deterministically from
/// the standard basis by largest residual.
fn complete_basis(m: usize, mut basis: Vec<Option<Vec<f64>>>) -> Columns {
    basis.resize(m, None);
    let mut known: Vec<Vec<f64>> = basis.iter().flatten().cloned().collect();
    for slot in basis.iter_mut().filter(|s| s.is_none()) {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            // Two Gram-Schmidt passes keep the result orthogonal to working precision.
            for _ in 0..2 {
                for k in &known {
                    let proj = dot(&cand, k);
                    for (c, kv) in cand.iter_mut().zip(k) {
                        *c -= proj * kv;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b + 1e-12) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("m > 0 whenever a slot is empty");
        let unit: Vec<f64> = cand.iter().map(|x| x / norm).collect();
        known.push(unit.clone());
        *slot = Some(unit);
    }
    Columns { len: m, cols: basis.into_iter().map(|c| c.expect("filled")).collect() }
}

/// Sorts by descending sigma (stable), then flips signs so the
/// largest-magnitude entry of each `u` column is non-negative.
fn finish(u: Matrix, sigma: Vec<f64>, vt: Matrix) -> SvdResult {
    let k = sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));

    let m = u.rows();
    let n = vt.cols();
    let mut u_sorted = Matrix::zeros(m, m);
    let mut vt_sorted = Matrix::zeros(n, n);
    let mut sigma_sorted = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        sigma_sorted.push(sigma[src]);
        for r in 0..m {
            u_sorted.set(r, dst, u.get(r, src));
        }
        vt_sorted.row_mut(dst).copy_from_slice(vt.row(src));
    }
    for extra in k..m {
        for r in 0..m {
            u_sorted.set(r, extra, u.get(r, extra));
        }
    }
    for extra in k..n {
        vt_sorted.row_mut(extra).copy_from_slice(vt.row(extra));
    }

    for c in 0..m {
        let mut pivot = 0;
        for r in 1..m {
            if u_sorted.get(r, c).abs() > u_sorted.get(pivot, c).abs() {
                pivot = r;
            }
        }
        if u_sorted.get(pivot, c) < 0.0 {
            for r in 0..m {
                u_sorted.set(r, c, -u_sorted.get(r, c));
            }
            if c < n {
                for v in vt_sorted.row_mut(c) {
                    *v = -*v;
                }
            }
        }
    }
    SvdResult { u: u_sorted, sigma: sigma_sorted, vt: vt_sorted }
}

/// Keeps the `k` leading singular triplets, absorbing sigma into the first
/// factor.
pub fn truncate_to_factors(s: &SvdResult, k: usize) -> Result<TruncatedFactors> {
    check_rank(s, k)?;
    let m = s.u.rows();
    let w1 = Matrix::from_fn(m, k, |r, c| s.u.get(r, c) * s.sigma[c]);
    let w2 = s.vt.row_range(0, k);
    Ok(TruncatedFactors { w1, w2, k })
}

/// Frobenius distance between the matrix and its rank-`k` truncation,
/// `sqrt(sum of sigma[i]^2 for i >= k)`.
pub fn reconstruction_error(s: &SvdResult, k: usize) -> Result<f64> {
    check_rank(s, k)?;
    Ok(s.sigma[k..].iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn check_rank(s: &SvdResult, k: usize) -> Result<()> {
    let max = s.sigma.len();
    if k == 0 || k > max {
        return Err(Error::RankOutOfRange { k, max });
    }
    Ok(())
}
