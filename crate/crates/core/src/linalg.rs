//! Dense real linear algebra in 64-bit floats: SVD via one-sided Jacobi,
//! symmetric eigendecomposition, low-rank reconstruction, and orthonormal
//! projections.
//!
//! Everything here is sized for analysis work: matrices up to a few hundred
//! on a side, plus tall-thin "few rows, huge row length" shapes that are
//! reduced through their Gram matrix instead of ever forming anything
//! row-length squared.

use rayon::prelude::*;
use thiserror::Error;

use crate::kernels::{dot64, gemm_nn};

/// Sweep cap for the Jacobi iterations.
const MAX_SWEEPS: usize = 60;
/// A rotation is applied while |a_pq| exceeds this, relative to
/// sqrt(a_pp * a_qq).
const JACOBI_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("svd of {rows}x{cols} matrix did not converge after {sweeps} sweeps")]
    NonConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },
    #[error("rank {requested} out of range (maximum {available})")]
    RankOutOfRange { requested: usize, available: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols, "data length");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Mat {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn identity(n: usize) -> Mat {
        Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Checked construction from model tensors: entries must be finite.
    pub fn from_tensor(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        what: &str,
    ) -> Result<Mat, LinalgError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(what.to_string()));
        }
        Ok(Mat::from_vec(rows, cols, data))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "inner dimensions");
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm_nn(
            &mut out.data,
            &self.data,
            &other.data,
            self.rows,
            self.cols,
            other.cols,
        );
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot64(&self.data, &self.data).sqrt()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// First k columns as a new matrix.
    pub fn left_columns(&self, k: usize) -> Mat {
        assert!(k <= self.cols);
        let mut out = Mat::zeros(self.rows, k);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[..k]);
        }
        out
    }
}

/// Thin singular value decomposition: `a = u * diag(s) * vt` with
/// `r = min(rows, cols)` columns in `u`, values in `s` (descending,
/// non-negative), and rows in `vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Mat,
    pub s: Vec<f64>,
    pub vt: Mat,
}

impl SvdResult {
    /// `u[:, :k] * diag(s[:k]) * vt[:k, :]`.
    pub fn truncated(&self, k: usize) -> Mat {
        let (m, n) = (self.u.rows, self.vt.cols);
        let mut us = Mat::zeros(m, k);
        for i in 0..m {
            for j in 0..k {
                us.data[i * k + j] = self.u.get(i, j) * self.s[j];
            }
        }
        let mut out = Mat::zeros(m, n);
        gemm_nn(&mut out.data, &us.data, &self.vt.data[..k * n], m, k, n);
        out
    }
}

/// Column-major working matrix for the one-sided Jacobi sweep.
struct Columns {
    m: usize,
    n: usize,
    data: Vec<f64>, // column j at data[j*m .. (j+1)*m]
}

impl Columns {
    fn identity(n: usize) -> Columns {
        let mut data = vec![0.0; n * n];
        for j in 0..n {
            data[j * n + j] = 1.0;
        }
        Columns { m: n, n, data }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.m..(j + 1) * self.m]
    }

    fn col_pair_mut(&mut self, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
        assert!(p < q);
        let (a, b) = self.data.split_at_mut(q * self.m);
        (&mut a[p * self.m..(p + 1) * self.m], &mut b[..self.m])
    }
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (cp, cq) = cols.col_pair_mut(p, q);
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// One-sided Jacobi: orthogonalize the columns of `work` in place,
/// accumulating the right rotations. `shape` is only used for diagnostics.
fn jacobi_orthogonalize(work: &mut Columns, shape: (usize, usize)) -> Result<Columns, LinalgError> {
    let n = work.n;
    let mut v = Columns::identity(n);
    if n < 2 {
        return Ok(v);
    }
    // Inner products below machine noise (relative to the rotation-invariant
    // Frobenius norm) cannot be reduced further and are treated as zero.
    let frob2 = dot64(&work.data, &work.data);
    let floor = f64::EPSILON * frob2;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let app = dot64(work.col(p), work.col(p));
                let aqq = dot64(work.col(q), work.col(q));
                let apq = dot64(work.col(p), work.col(q));
                if app == 0.0 || aqq == 0.0 {
                    continue;
                }
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() || apq.abs() <= floor {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(work, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            return Ok(v);
        }
    }
    Err(LinalgError::NonConvergence {
        rows: shape.0,
        cols: shape.1,
        sweeps: MAX_SWEEPS,
    })
}

/// Fill zero-norm columns of `u` with unit vectors orthogonal to all other
/// columns (deterministic completion from standard basis candidates).
fn complete_orthonormal(u: &mut Columns, zero_cols: &[usize]) {
    for &j in zero_cols {
        let m = u.m;
        let mut cand = 0usize;
        loop {
            assert!(cand < m, "no orthogonal completion found");
            let mut vec = vec![0.0; m];
            vec[cand] = 1.0;
            for other in 0..u.n {
                if other == j {
                    continue;
                }
                let proj = dot64(&vec, u.col(other));
                for (vv, uu) in vec.iter_mut().zip(u.col(other).iter()) {
                    *vv -= proj * uu;
                }
            }
            let norm = dot64(&vec, &vec).sqrt();
            if norm > 0.5 {
                let col = &mut u.data[j * m..(j + 1) * m];
                for (dst, vv) in col.iter_mut().zip(vec.iter()) {
                    *dst = vv / norm;
                }
                break;
            }
            cand += 1;
        }
    }
}

/// Thin SVD by one-sided Jacobi on the thin orientation (the matrix is
/// transposed first when rows < cols). Deterministic given the input bits.
///
/// Sign convention: each right-singular vector's entry of largest magnitude
/// is made positive (the left vector flips with it).
pub fn svd(a: &Mat) -> Result<SvdResult, LinalgError> {
    if a.rows == 0 || a.cols == 0 {
        return Err(LinalgError::Degenerate("empty matrix".into()));
    }
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite(format!(
            "{}x{} svd input",
            a.rows, a.cols
        )));
    }
    let transposed = a.rows < a.cols;
    let (m, n) = if transposed {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    // Column-major copy of the thin orientation: columns of length m.
    let mut work = Columns {
        m,
        n,
        data: vec![0.0; m * n],
    };
    for i in 0..a.rows {
        for j in 0..a.cols {
            let (r, c) = if transposed { (j, i) } else { (i, j) };
            work.data[c * m + r] = a.get(i, j);
        }
    }
    let v = jacobi_orthogonalize(&mut work, (a.rows, a.cols))?;

    // Singular values, in descending order.
    let raw: Vec<f64> = (0..n)
        .map(|j| dot64(work.col(j), work.col(j)).sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| raw[j].partial_cmp(&raw[i]).unwrap());
    let s: Vec<f64> = order.iter().map(|&j| raw[j]).collect();

    // Normalized left vectors (thin orientation), zero columns completed.
    let mut u = Columns {
        m,
        n,
        data: vec![0.0; m * n],
    };
    let mut zero_cols = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let sv = s[dst];
        if sv == 0.0 {
            zero_cols.push(dst);
            continue;
        }
        for (i, &val) in work.col(src).iter().enumerate() {
            u.data[dst * m + i] = val / sv;
        }
    }
    complete_orthonormal(&mut u, &zero_cols);

    // Right vectors, reordered.
    let mut vn = Columns {
        m: n,
        n,
        data: vec![0.0; n * n],
    };
    for (dst, &src) in order.iter().enumerate() {
        vn.data[dst * n..(dst + 1) * n].copy_from_slice(v.col(src));
    }

    // Back to the original orientation: a = U S Vt. The thin orientation
    // satisfied thin = u S vn^T with thin either a or a^T.
    let r = n;
    let (mut u_mat, mut vt_mat) = if !transposed {
        let mut um = Mat::zeros(m, r);
        for j in 0..r {
            for i in 0..m {
                um.data[i * r + j] = u.data[j * m + i];
            }
        }
        let mut vtm = Mat::zeros(r, n);
        for j in 0..r {
            vtm.row_mut(j).copy_from_slice(vn.col(j));
        }
        (um, vtm)
    } else {
        let mut um = Mat::zeros(n, r);
        for j in 0..r {
            for i in 0..n {
                um.data[i * r + j] = vn.data[j * n + i];
            }
        }
        let mut vtm = Mat::zeros(r, m);
        for j in 0..r {
            for i in 0..m {
                vtm.data[j * m + i] = u.data[j * m + i];
            }
        }
        (um, vtm)
    };

    // Sign convention on right-singular vectors.
    for j in 0..r {
        let row = vt_mat.row(j);
        let mut best = 0usize;
        for (idx, val) in row.iter().enumerate() {
            if val.abs() > row[best].abs() {
                best = idx;
            }
        }
        if row[best] < 0.0 {
            for val in vt_mat.row_mut(j) {
                *val = -*val;
            }
            for i in 0..u_mat.rows {
                let flipped = -u_mat.get(i, j);
                u_mat.set(i, j, flipped);
            }
        }
    }

    Ok(SvdResult {
        u: u_mat,
        s,
        vt: vt_mat,
    })
}

/// Best rank-k approximation in Frobenius norm (Eckart-Young).
pub fn low_rank(a: &Mat, k: usize) -> Result<Mat, LinalgError> {
    let full = a.rows.min(a.cols);
    if k > full {
        return Err(LinalgError::RankOutOfRange {
            requested: k,
            available: full,
        });
    }
    if k == 0 {
        return Ok(Mat::zeros(a.rows, a.cols));
    }
    Ok(svd(a)?.truncated(k))
}

/// Symmetric eigendecomposition by cyclic two-sided Jacobi.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// matrix columns.
pub fn sym_eigen(g: &Mat) -> Result<(Vec<f64>, Mat), LinalgError> {
    assert_eq!(g.rows, g.cols, "symmetric eigen needs a square matrix");
    let n = g.rows;
    let mut a = g.clone();
    let mut v = Mat::identity(n);
    if n > 1 {
        let floor = f64::EPSILON * g.frobenius_norm();
        let mut converged = false;
        for _sweep in 0..MAX_SWEEPS * 2 {
            let mut rotated = false;
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let apq = a.get(p, q);
                    let (app, aqq) = (a.get(p, p), a.get(q, q));
                    let scale = (app.abs() * aqq.abs()).sqrt().max(f64::MIN_POSITIVE);
                    if apq.abs() <= JACOBI_TOL * scale || apq.abs() <= floor {
                        continue;
                    }
                    rotated = true;
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..n {
                        let aip = a.get(i, p);
                        let aiq = a.get(i, q);
                        a.set(i, p, c * aip - s * aiq);
                        a.set(i, q, s * aip + c * aiq);
                    }
                    for j in 0..n {
                        let apj = a.get(p, j);
                        let aqj = a.get(q, j);
                        a.set(p, j, c * apj - s * aqj);
                        a.set(q, j, s * apj + c * aqj);
                    }
                    for i in 0..n {
                        let vip = v.get(i, p);
                        let viq = v.get(i, q);
                        v.set(i, p, c * vip - s * viq);
                        v.set(i, q, s * vip + c * viq);
                    }
                }
            }
            if !rotated {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(LinalgError::NonConvergence {
                rows: n,
                cols: n,
                sweeps: MAX_SWEEPS * 2,
            });
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (a.get(i, i), i)).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let evals: Vec<f64> = pairs.iter().map(|&(e, _)| e).collect();
    let mut evecs = Mat::zeros(n, n);
    for (dst, &(_, src)) in pairs.iter().enumerate() {
        for i in 0..n {
            evecs.set(i, dst, v.get(i, src));
        }
    }
    Ok((evals, evecs))
}

/// Orthonormal top-k right-singular directions of a short-and-wide matrix,
/// via eigendecomposition of its m-by-m Gram matrix.
#[derive(Debug, Clone)]
pub struct GramDirs {
    /// Column j is the j-th direction (rows = input row length).
    pub dirs: Mat,
    /// All m singular values of the input, descending.
    pub singular_values: Vec<f64>,
}

pub fn gram_top_dirs(rows: &Mat, k: usize) -> Result<GramDirs, LinalgError> {
    let (m, d) = (rows.rows, rows.cols);
    if k > m {
        return Err(LinalgError::RankOutOfRange {
            requested: k,
            available: m,
        });
    }
    if rows.data.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite(format!("{m}x{d} gram input")));
    }
    if rows.data.iter().all(|&v| v == 0.0) {
        return Err(LinalgError::Degenerate("all rows are zero".into()));
    }

    // Gram matrix, parallel over rows (each element computed once).
    let mut gram = Mat::zeros(m, m);
    gram.data
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, grow)| {
            for j in i..m {
                grow[j] = dot64(rows.row(i), rows.row(j));
            }
        });
    for i in 0..m {
        for j in 0..i {
            let val = gram.get(j, i);
            gram.set(i, j, val);
        }
    }

    let (evals, evecs) = sym_eigen(&gram)?;
    let singular_values: Vec<f64> = evals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let smax = singular_values[0];
    let available = singular_values
        .iter()
        .filter(|&&s| s > smax * 1e-13)
        .count();
    if k > available {
        return Err(LinalgError::RankOutOfRange {
            requested: k,
            available,
        });
    }

    // dirs[:, j] = rows^T * u_j / s_j, coordinate-parallel.
    let mut dirs = Mat::zeros(d, k);
    let coord_chunk = 512usize;
    dirs.data
        .par_chunks_mut(k * coord_chunk)
        .enumerate()
        .for_each(|(chunk_idx, chunk)| {
            let c0 = chunk_idx * coord_chunk;
            for i in 0..m {
                let urow: Vec<f64> = (0..k).map(|j| evecs.get(i, j)).collect();
                let rrow = rows.row(i);
                for (ci, out) in chunk.chunks_mut(k).enumerate() {
                    let rv = rrow[c0 + ci];
                    for (o, u) in out.iter_mut().zip(urow.iter()) {
                        *o += rv * u;
                    }
                }
            }
            for out in chunk.chunks_mut(k) {
                for (o, s) in out.iter_mut().zip(singular_values.iter()) {
                    *o /= s;
                }
            }
        });

    // Re-orthonormalize so orthonormality holds at working precision even
    // when trailing singular values are relatively small.
    mgs_columns(&mut dirs, 1e-12).map_err(|_| LinalgError::RankOutOfRange {
        requested: k,
        available,
    })?;

    // Sign convention: largest-magnitude entry positive.
    for j in 0..k {
        let mut best = 0usize;
        let mut bestv = 0.0f64;
        for i in 0..d {
            let v = dirs.get(i, j).abs();
            if v > bestv {
                bestv = v;
                best = i;
            }
        }
        if dirs.get(best, j) < 0.0 {
            for i in 0..d {
                let v = -dirs.get(i, j);
                dirs.set(i, j, v);
            }
        }
    }

    Ok(GramDirs {
        dirs,
        singular_values,
    })
}

/// In-place modified Gram-Schmidt on the columns. Errors if a column's
/// residual drops below `tol`.
fn mgs_columns(mat: &mut Mat, tol: f64) -> Result<(), LinalgError> {
    let (d, k) = (mat.rows, mat.cols);
    for j in 0..k {
        for prev in 0..j {
            let mut proj = 0.0f64;
            for i in 0..d {
                proj += mat.get(i, prev) * mat.get(i, j);
            }
            for i in 0..d {
                let v = mat.get(i, j) - proj * mat.get(i, prev);
                mat.set(i, j, v);
            }
        }
        let mut norm2 = 0.0f64;
        for i in 0..d {
            let v = mat.get(i, j);
            norm2 += v * v;
        }
        let norm = norm2.sqrt();
        if norm < tol {
            return Err(LinalgError::Degenerate(format!(
                "column {j} dependent during orthonormalization"
            )));
        }
        for i in 0..d {
            let v = mat.get(i, j) / norm;
            mat.set(i, j, v);
        }
    }
    Ok(())
}

/// Orthonormalize the union of several orthonormal bases (columns) with
/// modified Gram-Schmidt, dropping columns whose residual falls below `tol`.
pub fn union_basis(bases: &[&Mat], tol: f64) -> Result<Mat, LinalgError> {
    if bases.is_empty() {
        return Ok(Mat::zeros(0, 0));
    }
    let d = bases[0].rows;
    for b in bases {
        if b.rows != d {
            return Err(LinalgError::DimensionMismatch(format!(
                "basis row count {} vs {}",
                b.rows, d
            )));
        }
    }
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for b in bases {
        for j in 0..b.cols {
            let mut col = b.column(j);
            for prev in &kept {
                let proj = dot64(prev, &col);
                for (c, p) in col.iter_mut().zip(prev.iter()) {
                    *c -= proj * p;
                }
            }
            let norm = dot64(&col, &col).sqrt();
            if norm > tol {
                for c in col.iter_mut() {
                    *c /= norm;
                }
                kept.push(col);
            }
        }
    }
    let k = kept.len();
    let mut out = Mat::zeros(d, k);
    for (j, col) in kept.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

fn check_basis_dims(v: &[f64], basis: &Mat) -> Result<(), LinalgError> {
    if basis.rows != v.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "vector length {} vs basis rows {}",
            v.len(),
            basis.rows
        )));
    }
    Ok(())
}

/// B * (B^T v): the orthogonal projection of `v` onto the column span of an
/// orthonormal basis.
pub fn project_onto(v: &[f64], basis: &Mat) -> Result<Vec<f64>, LinalgError> {
    check_basis_dims(v, basis)?;
    let (d, k) = (basis.rows, basis.cols);
    let mut coef = vec![0.0f64; k];
    for i in 0..d {
        let row = basis.row(i);
        let vi = v[i];
        for (c, b) in coef.iter_mut().zip(row.iter()) {
            *c += b * vi;
        }
    }
    let mut out = vec![0.0f64; d];
    out.par_chunks_mut(4096).enumerate().for_each(|(ci, chunk)| {
        let start = ci * 4096;
        for (off, val) in chunk.iter_mut().enumerate() {
            *val = dot64(basis.row(start + off), &coef);
        }
    });
    Ok(out)
}

/// v - B * (B^T v): the component of `v` orthogonal to the basis columns.
pub fn project_out(v: &[f64], basis: &Mat) -> Result<Vec<f64>, LinalgError> {
    let mut onto = project_onto(v, basis)?;
    for (o, &orig) in onto.iter_mut().zip(v.iter()) {
        *o = orig - *o;
    }
    Ok(onto)
}
