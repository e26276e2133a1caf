//! Dense `f64` kernel for the Levenberg-Marquardt normal equations.
//!
//! Only what the trainers need is here: products, Cholesky solves of damped
//! symmetric systems and `tr(H⁻¹)`. Matrices are row-major.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty matrix {rows}x{cols}")));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.values[i * n + i] = *d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn column(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(n, 1, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        t
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self · v` for a plain vector.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ · v` without materializing the transpose.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::Shape(format!(
                "({}x{})ᵀ times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &s) in v.iter().enumerate() {
            if s != 0.0 {
                axpy(s, self.row(r), &mut out);
            }
        }
        Ok(out)
    }

    /// `self · selfᵀ` (rows × rows).
    pub fn gram_rows(&self) -> Matrix {
        let n = self.rows;
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dot(self.row(i), self.row(j));
                g.values[i * n + j] = v;
                g.values[j * n + i] = v;
            }
        }
        g
    }

    /// `selfᵀ · self` (cols × cols).
    pub fn gram_cols(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let out = &mut g.values[i * n..(i + 1) * n];
                axpy(ri, row, out);
            }
        }
        g
    }

    /// Adds `c` to every diagonal entry.
    pub fn add_diagonal(&mut self, c: f64) {
        assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            self.values[i * n + i] += c;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "{}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.values[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, b.row(k), orow);
            }
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `H = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(h: &Matrix) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::Shape(format!(
                "cholesky of non-square {}x{}",
                h.rows, h.cols
            )));
        }
        let n = h.rows;
        let mut l = h.values.clone();
        for j in 0..n {
            let (head, tail) = l.split_at_mut((j + 1) * n);
            let row_j = &mut head[j * n..];
            let d = row_j[j] - dot(&row_j[..j], &row_j[..j]);
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let d = d.sqrt();
            row_j[j] = d;
            row_j[j + 1..].iter_mut().for_each(|v| *v = 0.0);
            let row_j = &*row_j;
            for row_i in tail.chunks_exact_mut(n) {
                row_i[j] = (row_i[j] - dot(&row_i[..j], &row_j[..j])) / d;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `L·Lᵀ·x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        let l = &self.lower;
        for i in 0..n {
            let s = dot(&l[i * n..i * n + i], &b[..i]);
            b[i] = (b[i] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// `tr(H⁻¹)` from `n` unit-vector solves.
    pub fn trace_inverse(&self) -> f64 {
        let n = self.n;
        let mut e = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[i] = 1.0;
            self.solve_in_place(&mut e);
            total += e[i];
        }
        total
    }
}

fn check_symmetric(h: &Matrix) -> Result<()> {
    if !h.is_square() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            h.rows, h.cols
        )));
    }
    let n = h.rows;
    let scale = h.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (h.get(i, j), h.get(j, i));
            if (a - b).abs() > 1e-9 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::Shape(format!(
                    "matrix not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }
    Ok(())
}

/// Solves `h·x = rhs` for symmetric positive definite `h`.
pub fn solve_spd(h: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    check_symmetric(h)?;
    if rhs.cols != 1 || rhs.rows != h.rows {
        return Err(Error::Shape(format!(
            "rhs must be a {}x1 column, got {}x{}",
            h.rows, rhs.rows, rhs.cols
        )));
    }
    let chol = Cholesky::factor(h)?;
    Matrix::column(chol.solve(&rhs.values))
}

pub fn trace_inverse(h: &Matrix) -> Result<f64> {
    check_symmetric(h)?;
    Ok(Cholesky::factor(h)?.trace_inverse())
}

/// Factorization of `H = β·JᵀJ + c·I` for a Jacobian `J` (samples × params).
///
/// When `J` has fewer rows than columns, `H` is never formed: solves go
/// through the `rows × rows` matrix `K = c·I + β·J·Jᵀ` using
/// `H⁻¹·Jᵀ = Jᵀ·K⁻¹` and `H⁻¹ = (I − β·Jᵀ·K⁻¹·J) / c`. Otherwise `H` itself
/// is factored. `c` must be positive.
#[derive(Debug, Clone)]
pub struct DampedNormal<'a> {
    j: &'a Matrix,
    beta: f64,
    c: f64,
    route: Route,
}

#[derive(Debug, Clone)]
enum Route {
    Samples { gram: Matrix, chol: Cholesky },
    Params(Cholesky),
}

impl<'a> DampedNormal<'a> {
    pub fn new(j: &'a Matrix, beta: f64, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::NotPositiveDefinite { pivot: 0, value: c });
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::NonFinite(format!("damped system with beta = {beta}")));
        }
        let route = if j.rows < j.cols {
            let gram = j.gram_rows();
            let mut k = gram.clone();
            k.scale(beta);
            k.add_diagonal(c);
            Route::Samples {
                chol: Cholesky::factor(&k)?,
                gram,
            }
        } else {
            let mut h = j.gram_cols();
            h.scale(beta);
            h.add_diagonal(c);
            Route::Params(Cholesky::factor(&h)?)
        };
        Ok(Self { j, beta, c, route })
    }

    /// `H⁻¹·g`
    pub fn solve(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.j.cols {
            return Err(Error::Shape(format!(
                "vector of length {} for {} parameters",
                g.len(),
                self.j.cols
            )));
        }
        match &self.route {
            Route::Samples { chol, .. } => {
                let mut jg = self.j.mul_vec(g)?;
                chol.solve_in_place(&mut jg);
                let back = self.j.tr_mul_vec(&jg)?;
                Ok(g.iter()
                    .zip(&back)
                    .map(|(gi, bi)| (gi - self.beta * bi) / self.c)
                    .collect())
            }
            Route::Params(chol) => Ok(chol.solve(g)),
        }
    }

    /// `H⁻¹·Jᵀ·r` for a vector `r` over samples.
    pub fn solve_jt(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.j.rows {
            return Err(Error::Shape(format!(
                "vector of length {} for {} samples",
                r.len(),
                self.j.rows
            )));
        }
        match &self.route {
            Route::Samples { chol, .. } => self.j.tr_mul_vec(&chol.solve(r)),
            Route::Params(chol) => Ok(chol.solve(&self.j.tr_mul_vec(r)?)),
        }
    }

    /// `c·tr(H⁻¹)`. On the sample route this is `N − β·tr(K⁻¹·J·Jᵀ)`.
    pub fn trace_term(&self) -> f64 {
        match &self.route {
            Route::Samples { gram, chol } => {
                let r = self.j.rows;
                let mut col = vec![0.0; r];
                let mut tr = 0.0;
                for i in 0..r {
                    col.copy_from_slice(gram.row(i));
                    chol.solve_in_place(&mut col);
                    tr += col[i];
                }
                self.j.cols as f64 - self.beta * tr
            }
            Route::Params(chol) => self.c * chol.trace_inverse(),
        }
    }
}
