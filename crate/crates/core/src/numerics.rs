//! Dense linear algebra and finite-difference kernels.
//!
//! Everything here is a pure function of its inputs. Matrices are small
//! (desk scale, at most a few hundred rows), so the algorithms favour
//! accuracy and simplicity: cyclic Jacobi for symmetric eigenproblems,
//! one-sided Jacobi for singular values and a complete orthogonal
//! decomposition (pivoted QR followed by an RQ-style reduction) for
//! minimum-norm least squares.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Sweep cap for the cyclic Jacobi eigensolver.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Default central-difference step for gradients.
pub const FD_GRADIENT_STEP: f64 = 1e-5;
/// Default step for second differences.
pub const FD_HESSIAN_STEP: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("eigensolver did not converge after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("function evaluation is not finite near coordinate {coordinate}")]
    NonFinite { coordinate: usize },
}

/// Seeded generator used by every randomized routine in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(NumericsError::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if x.len() != self.cols {
            return Err(NumericsError::Dimension(format!(
                "vector of length {} against {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if x.len() != self.rows {
            return Err(NumericsError::Dimension(format!(
                "vector of length {} against {} rows",
                x.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            if *xr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += xr * a;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self, NumericsError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self, NumericsError> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &DenseMatrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, NumericsError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumericsError::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(M + Mᵀ)/2`.
    pub fn symmetrized(&self) -> Result<Self, NumericsError> {
        if !self.is_square() {
            return Err(NumericsError::Dimension(format!(
                "symmetrizing a non-square {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let mut s = self.clone();
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(s)
    }

    /// Principal sub-matrix on the given index list (rows and columns alike).
    pub fn principal_submatrix(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), idx.len());
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out[(a, b)] = self[(i, j)];
            }
        }
        out
    }

    /// `xᵀ M x`.
    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64, NumericsError> {
        Ok(dot(x, &self.matvec(x)?))
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

// Serialized as a list of rows.
impl Serialize for DenseMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DenseMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        DenseMatrix::from_rows(&rows).map_err(D::Error::custom)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Pairwise (cascade) sum. The reduction tree depends only on the length.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// Element-wise pairwise sum of equal-length vectors.
pub fn pairwise_sum_vectors(vectors: &[Vec<f64>]) -> Vec<f64> {
    match vectors.len() {
        0 => Vec::new(),
        1 => vectors[0].clone(),
        n => {
            let (lo, hi) = vectors.split_at(n / 2);
            let mut a = pairwise_sum_vectors(lo);
            let b = pairwise_sum_vectors(hi);
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            a
        }
    }
}

/// Pairwise sum of the `rows` consecutive rows of a flat buffer, in the
/// same association order as [`pairwise_sum_vectors`]. Overwrites `buf`.
pub fn pairwise_sum_rows(buf: &mut [f64], rows: usize, cols: usize) -> Vec<f64> {
    fn reduce(buf: &mut [f64], lo: usize, hi: usize, cols: usize) {
        let n = hi - lo;
        if n <= 1 {
            return;
        }
        let mid = lo + n / 2;
        reduce(buf, lo, mid, cols);
        reduce(buf, mid, hi, cols);
        let (head, tail) = buf.split_at_mut(mid * cols);
        for (x, y) in head[lo * cols..(lo + 1) * cols]
            .iter_mut()
            .zip(&tail[..cols])
        {
            *x += y;
        }
    }
    if rows == 0 {
        return Vec::new();
    }
    reduce(buf, 0, rows, cols);
    buf[..cols].to_vec()
}

/// Eigen-decomposition of a symmetric matrix; `vectors` holds eigenvectors
/// as columns, matched to ascending `values`.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

impl SymEigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k)
    }
}

/// Cyclic Jacobi eigensolver. The input is symmetrized before iterating.
pub fn sym_eigen(m: &DenseMatrix, tol: f64) -> Result<SymEigen, NumericsError> {
    let mut a = m.symmetrized()?;
    let n = a.rows();
    let mut v = DenseMatrix::identity(n);
    let scale = a.frobenius_norm();
    let floor = 1e-18 * scale;

    let mut converged = n <= 1 || scale == 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                if apq.abs() <= floor || apq.abs() <= 1e-17 * (app.abs() * aqq.abs()).sqrt() {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate_columns(&mut a, p, q, c, s);
                rotate_rows(&mut a, p, q, c, s);
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    order.sort_by(|&i, &j| diag[i].total_cmp(&diag[j]));
    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, new)] = v[(r, old)];
        }
    }

    let sym = m.symmetrized()?;
    let residual = eigen_residual(&sym, &values, &vectors);
    let radius = values.iter().fold(0.0f64, |r, v| r.max(v.abs()));
    if !converged || residual > tol * (1.0 + radius) {
        return Err(NumericsError::NoConvergence { sweeps, residual });
    }
    Ok(SymEigen { values, vectors })
}

fn rotate_columns(a: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..a.rows() {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
}

fn rotate_rows(a: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.cols();
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
}

/// `max |M V − V diag(λ)|`.
pub fn eigen_residual(m: &DenseMatrix, values: &[f64], vectors: &DenseMatrix) -> f64 {
    let n = m.rows();
    let mv = m.matmul(vectors).expect("square operands");
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            worst = worst.max((mv[(r, c)] - vectors[(r, c)] * values[c]).abs());
        }
    }
    worst
}

/// Counts of negative, zero and positive eigenvalues at a zero tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inertia {
    pub n_neg: usize,
    pub n_zero: usize,
    pub n_pos: usize,
    pub zero_tolerance: f64,
}

impl Inertia {
    pub fn dimension(&self) -> usize {
        self.n_neg + self.n_zero + self.n_pos
    }

    /// True when every count of `self` is at least the matching count of `other`.
    pub fn dominates(&self, other: &Inertia) -> bool {
        self.n_neg >= other.n_neg && self.n_zero >= other.n_zero && self.n_pos >= other.n_pos
    }
}

pub fn inertia_of(eigenvalues: &[f64], zero_tol: f64) -> Inertia {
    let mut inertia = Inertia {
        n_neg: 0,
        n_zero: 0,
        n_pos: 0,
        zero_tolerance: zero_tol,
    };
    for &l in eigenvalues {
        if l < -zero_tol {
            inertia.n_neg += 1;
        } else if l > zero_tol {
            inertia.n_pos += 1;
        } else {
            inertia.n_zero += 1;
        }
    }
    inertia
}

/// Minimum-norm least-squares solution of `A x ≈ b`.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    pub solution: Vec<f64>,
    pub residual_norm: f64,
    /// Rank detected by the pivoted QR.
    pub rank: usize,
}

const QR_RANK_RTOL: f64 = 1e-11;

/// Householder reflector for `x`: returns `(v, beta)` with
/// `(I − beta v vᵀ) x = ∓‖x‖ e₁` and `v[0] = 1`.
fn householder(x: &[f64]) -> (Vec<f64>, f64) {
    let sigma: f64 = x[1..].iter().map(|v| v * v).sum();
    let mut v = x.to_vec();
    v[0] = 1.0;
    if sigma == 0.0 {
        return (v, 0.0);
    }
    let mu = (x[0] * x[0] + sigma).sqrt();
    let v0 = if x[0] <= 0.0 {
        x[0] - mu
    } else {
        -sigma / (x[0] + mu)
    };
    let beta = 2.0 * v0 * v0 / (sigma + v0 * v0);
    for vi in v[1..].iter_mut() {
        *vi /= v0;
    }
    (v, beta)
}

fn apply_reflector(v: &[f64], beta: f64, target: &mut [f64]) {
    if beta == 0.0 {
        return;
    }
    let w = beta * dot(v, target);
    for (t, vi) in target.iter_mut().zip(v) {
        *t -= w * vi;
    }
}

/// Least squares through a complete orthogonal decomposition: QR with column
/// pivoting fixes the rank, then the trapezoidal factor is reduced once more
/// so the returned solution has minimum Euclidean norm.
pub fn least_squares_solve(a: &DenseMatrix, b: &[f64]) -> Result<LeastSquares, NumericsError> {
    let (m, n) = (a.rows(), a.cols());
    if b.len() != m {
        return Err(NumericsError::Dimension(format!(
            "right-hand side of length {} for {m} rows",
            b.len()
        )));
    }
    if n == 0 {
        return Ok(LeastSquares {
            solution: vec![],
            residual_norm: norm2(b),
            rank: 0,
        });
    }
    // column-major working copy
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut qtb = b.to_vec();
    let steps = m.min(n);
    let mut r_diag_max = 0.0f64;
    let mut rank = 0;
    for k in 0..steps {
        let (pivot, pivot_norm) = (k..n)
            .map(|j| (j, cols[j][k..].iter().map(|v| v * v).sum::<f64>()))
            .fold(
                (k, -1.0),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        if k == 0 {
            r_diag_max = pivot_norm.sqrt();
        }
        if pivot_norm.sqrt() <= QR_RANK_RTOL * r_diag_max || pivot_norm == 0.0 {
            break;
        }
        cols.swap(k, pivot);
        perm.swap(k, pivot);
        let (v, beta) = householder(&cols[k][k..]);
        for col in cols.iter_mut().skip(k) {
            apply_reflector(&v, beta, &mut col[k..]);
        }
        apply_reflector(&v, beta, &mut qtb[k..]);
        rank = k + 1;
    }

    // T = [R11 R12] is rank x n; reduce Tᵀ (n x rank) = Z U with Householder.
    let mut tt: Vec<Vec<f64>> = (0..rank)
        .map(|i| (0..n).map(|j| cols[j][i]).collect())
        .collect();
    let mut reflectors = Vec::with_capacity(rank);
    for k in 0..rank {
        let (v, beta) = householder(&tt[k][k..]);
        for col in tt.iter_mut().skip(k) {
            apply_reflector(&v, beta, &mut col[k..]);
        }
        reflectors.push((v, beta));
    }
    // U is upper triangular with U[i][k] = tt[k][i]; solve Uᵀ w = c.
    let mut w = vec![0.0; rank];
    for i in 0..rank {
        let mut acc = qtb[i];
        for (k, wk) in w.iter().enumerate().take(i) {
            acc -= tt[i][k] * wk;
        }
        w[i] = acc / tt[i][i];
    }
    let mut y = vec![0.0; n];
    y[..rank].copy_from_slice(&w);
    for k in (0..rank).rev() {
        let (v, beta) = &reflectors[k];
        apply_reflector(v, *beta, &mut y[k..]);
    }
    let mut solution = vec![0.0; n];
    for (i, &p) in perm.iter().enumerate() {
        solution[p] = y[i];
    }
    let ax = a.matvec(&solution)?;
    let residual_norm = norm2(&ax.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>());
    Ok(LeastSquares {
        solution,
        residual_norm,
        rank,
    })
}

/// Singular values (descending) by one-sided Jacobi rotations.
pub fn singular_values(a: &DenseMatrix) -> Vec<f64> {
    let work = if a.rows() < a.cols() {
        a.clone()
    } else {
        a.transpose()
    };
    // rows of `work` are the vectors being orthogonalized
    let mut vecs: Vec<Vec<f64>> = work.to_rows();
    let k = vecs.len();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..k {
            for j in i + 1..k {
                let alpha = dot(&vecs[i], &vecs[i]);
                let beta = dot(&vecs[j], &vecs[j]);
                let gamma = dot(&vecs[i], &vecs[j]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = vecs.split_at_mut(j);
                for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                    let (xi, yj) = (*x, *y);
                    *x = c * xi - s * yj;
                    *y = s * xi + c * yj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = vecs.iter().map(|v| norm2(v)).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Number of singular values above `tol · (σ_max + 1)`.
pub fn numeric_rank(a: &DenseMatrix, tol: f64) -> usize {
    let sv = singular_values(a);
    let threshold = tol * (sv.first().copied().unwrap_or(0.0) + 1.0);
    sv.iter().filter(|&&s| s > threshold).count()
}

fn checked(v: f64, coordinate: usize) -> Result<f64, NumericsError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NumericsError::NonFinite { coordinate })
    }
}

/// Central-difference gradient `(f(x+h eᵢ) − f(x−h eᵢ)) / 2h`.
pub fn central_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>, NumericsError>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = checked(f(&probe), i)?;
        probe[i] = x[i] - h;
        let minus = checked(f(&probe), i)?;
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Second central differences of a scalar field.
pub fn central_diff_hessian<F>(f: F, x: &[f64], h: f64) -> Result<DenseMatrix, NumericsError>
where
    F: Fn(&[f64]) -> f64,
{
    let n = x.len();
    let mut out = DenseMatrix::zeros(n, n);
    let mut probe = x.to_vec();
    let eval = |probe: &[f64], i: usize| checked(f(probe), i);
    for i in 0..n {
        for j in i..n {
            let mut corner = |si: f64, sj: f64| {
                probe.copy_from_slice(x);
                probe[i] += si * h;
                probe[j] += sj * h;
                eval(&probe, i)
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                + corner(-1.0, -1.0)?)
                / (4.0 * h * h);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}
