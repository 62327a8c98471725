//! Small dense linear algebra: 2-vectors, 2x2 matrices, and a row-major
//! dense matrix with a Cholesky factorization.
//!
//! Desk-scale meshes stay in the low hundreds of vertices, so dense storage
//! and an O(n^3) factorization are the simplest thing that works. The solver
//! factors once per constraint configuration and back-substitutes per frame.

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// 2D point or direction.
pub type Vec2<T> = [T; 2];

/// Row-major 2x2 matrix; `m[r][c]` is row `r`, column `c`.
pub type Mat2<T> = [[T; 2]; 2];

#[inline]
pub fn add2<T: Real>(a: Vec2<T>, b: Vec2<T>) -> Vec2<T> {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub2<T: Real>(a: Vec2<T>, b: Vec2<T>) -> Vec2<T> {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale2<T: Real>(a: Vec2<T>, s: T) -> Vec2<T> {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn dot2<T: Real>(a: Vec2<T>, b: Vec2<T>) -> T {
    a[0] * b[0] + a[1] * b[1]
}

/// z-component of the 3D cross product of two in-plane vectors.
#[inline]
pub fn cross2<T: Real>(a: Vec2<T>, b: Vec2<T>) -> T {
    a[0] * b[1] - a[1] * b[0]
}

/// Counter-clockwise quarter turn.
#[inline]
pub fn perp2<T: Real>(a: Vec2<T>) -> Vec2<T> {
    [-a[1], a[0]]
}

#[inline]
pub fn norm2<T: Real>(a: Vec2<T>) -> T {
    dot2(a, a).sqrt()
}

pub const MAT2_ZERO_F64: Mat2<f64> = [[0.0, 0.0], [0.0, 0.0]];

#[inline]
pub fn mat2_zero<T: Real>() -> Mat2<T> {
    [[T::zero(); 2]; 2]
}

#[inline]
pub fn mat2_identity<T: Real>() -> Mat2<T> {
    [[T::one(), T::zero()], [T::zero(), T::one()]]
}

#[inline]
pub fn mat2_add<T: Real>(a: Mat2<T>, b: Mat2<T>) -> Mat2<T> {
    [
        [a[0][0] + b[0][0], a[0][1] + b[0][1]],
        [a[1][0] + b[1][0], a[1][1] + b[1][1]],
    ]
}

#[inline]
pub fn mat2_sub<T: Real>(a: Mat2<T>, b: Mat2<T>) -> Mat2<T> {
    [
        [a[0][0] - b[0][0], a[0][1] - b[0][1]],
        [a[1][0] - b[1][0], a[1][1] - b[1][1]],
    ]
}

#[inline]
pub fn mat2_scale<T: Real>(a: Mat2<T>, s: T) -> Mat2<T> {
    [[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]]
}

/// Matrix-vector product `a * v`.
#[inline]
pub fn mat2_mul_vec<T: Real>(a: Mat2<T>, v: Vec2<T>) -> Vec2<T> {
    [
        a[0][0] * v[0] + a[0][1] * v[1],
        a[1][0] * v[0] + a[1][1] * v[1],
    ]
}

/// Outer product `col * row^T`.
#[inline]
pub fn outer2<T: Real>(col: Vec2<T>, row: Vec2<T>) -> Mat2<T> {
    [
        [col[0] * row[0], col[0] * row[1]],
        [col[1] * row[0], col[1] * row[1]],
    ]
}

/// Squared Frobenius norm of `a - b`.
#[inline]
pub fn mat2_dist_sq<T: Real>(a: Mat2<T>, b: Mat2<T>) -> T {
    let mut s = T::zero();
    for r in 0..2 {
        for c in 0..2 {
            let d = a[r][c] - b[r][c];
            s += d * d;
        }
    }
    s
}

#[inline]
pub fn mat2_frob_sq<T: Real>(a: Mat2<T>) -> T {
    mat2_dist_sq(a, mat2_zero())
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows in dense matrix"));
        }
        Ok(DenseMat {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * v` for a vector of length `cols`.
    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cols, "matvec dimension mismatch");
        let mut out = vec![T::zero(); self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = T::zero();
            for c in 0..self.cols {
                acc += row[c] * v[c];
            }
            out[r] = acc;
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &DenseMat<T>) -> DenseMat<T> {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = DenseMat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for c in 0..other.cols {
                    out_row[c] += a * orow[c];
                }
            }
        }
        out
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`; zero for symmetric input.
    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for r in 0..self.rows {
            for c in (r + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(r, c)] - self[(c, r)]).abs());
            }
        }
        worst
    }

    /// Cholesky factorization `A = G G^T` for symmetric positive definite
    /// input; fails with a diagnostic when a pivot drops below a tiny
    /// positive floor (singular or indefinite system).
    pub fn cholesky(&self) -> Result<Cholesky<T>> {
        if self.rows != self.cols {
            return Err(Error::invalid("cholesky requires a square matrix"));
        }
        let n = self.rows;
        let mut g = vec![T::zero(); n * n];
        let floor = real::<T>(1e-30);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= g[j * n + k] * g[j * n + k];
            }
            if !(d > floor) {
                return Err(Error::numeric(format!(
                    "cholesky pivot {j} is non-positive ({:?}); system is singular or indefinite",
                    d.to_f64()
                )));
            }
            let dj = d.sqrt();
            g[j * n + j] = dj;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= g[i * n + k] * g[j * n + k];
                }
                g[i * n + j] = s / dj;
            }
        }
        Ok(Cholesky { n, g })
    }
}

impl<T: Real> std::ops::Index<(usize, usize)> for DenseMat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T: Real> std::ops::IndexMut<(usize, usize)> for DenseMat<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    n: usize,
    g: Vec<T>,
}

impl<T: Real> Cholesky<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` by forward then backward substitution.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        assert_eq!(b.len(), self.n, "cholesky solve dimension mismatch");
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.g[i * n + k] * x[k];
            }
            x[i] = s / self.g[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.g[k * n + i] * x[k];
            }
            x[i] = s / self.g[i * n + i];
        }
        x
    }

    /// Dense inverse, column by column.
    pub fn inverse(&self) -> DenseMat<T> {
        let n = self.n;
        let mut inv = DenseMat::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for c in 0..n {
            e[c] = T::one();
            let col = self.solve(&e);
            e[c] = T::zero();
            for r in 0..n {
                inv[(r, c)] = col[r];
            }
        }
        inv
    }
}
