//! Small dense matrix kernel: vectorization operators, Cholesky factors and
//! their differentials.
//!
//! Matrices here are tiny (order ≤ 10 in practice), so everything is dense and
//! column-major with no blocking. The elimination, duplication and commutation
//! operators are implemented as index maps and never materialized.

use crate::error::{Result, RvbError};
use crate::scalar::Real;

/// Number of entries on and below the diagonal of an `r × r` matrix.
#[inline]
pub fn tri_len(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Position of `(i, j)`, `i ≥ j`, in the half-vectorized (column-wise lower) order.
#[inline]
pub fn packed_index(r: usize, i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i < r);
    // column j starts after sum_{k<j} (r - k) entries
    j * (2 * r + 1 - j) / 2 + (i - j)
}

/// Dense square matrix stored column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix<T> {
    order: usize,
    data: Vec<T>,
}

impl<T: Real> SquareMatrix<T> {
    pub fn zeros(order: usize) -> Self {
        Self { order, data: vec![T::zero(); order * order] }
    }

    pub fn identity(order: usize) -> Self {
        let mut m = Self::zeros(order);
        for i in 0..order {
            m.set(i, i, T::one());
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    /// Builds a matrix from column-major entries.
    pub fn from_col_major(order: usize, data: Vec<T>) -> Result<Self> {
        if order == 0 {
            return Err(RvbError::InvalidData("matrix order must be at least 1".into()));
        }
        if data.len() != order * order {
            return Err(RvbError::LengthMismatch { expected: order * order, got: data.len() });
        }
        Ok(Self { order, data })
    }

    /// Builds a matrix from rows, which reads naturally in tests and literals.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let mut m = Self::zeros(r);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != r {
                return Err(RvbError::LengthMismatch { expected: r, got: row.len() });
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        if r == 0 {
            return Err(RvbError::InvalidData("matrix order must be at least 1".into()));
        }
        Ok(m)
    }

    pub fn from_fn(order: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(order);
        for j in 0..order {
            for i in 0..order {
                m.data[j * order + i] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[j * self.order + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[j * self.order + i] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: T) {
        self.data[j * self.order + i] += v;
    }

    pub fn as_col_major(&self) -> &[T] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.order, |i, j| self.get(j, i))
    }

    pub fn symmetrized(&self) -> Self {
        let half = T::lit(0.5);
        Self::from_fn(self.order, |i, j| half * (self.get(i, j) + self.get(j, i)))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let r = self.order;
        debug_assert_eq!(r, other.order);
        let mut out = Self::zeros(r);
        for j in 0..r {
            for k in 0..r {
                let b = other.get(k, j);
                if b == T::zero() {
                    continue;
                }
                for i in 0..r {
                    out.data[j * r + i] += self.data[k * r + i] * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let r = self.order;
        let mut out = vec![T::zero(); r];
        for (j, &xj) in x.iter().enumerate().take(r) {
            for i in 0..r {
                out[i] += self.data[j * r + i] * xj;
            }
        }
        out
    }

    pub fn quad_form(&self, x: &[T]) -> T {
        crate::scalar::dot(x, &self.mul_vec(x))
    }

    pub fn add(&self, other: &Self) -> Self {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Self { order: self.order, data }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Self { order: self.order, data }
    }

    pub fn scale(&self, s: T) -> Self {
        Self { order: self.order, data: self.data.iter().map(|&a| a * s).collect() }
    }

    /// `self += s · x yᵀ`.
    pub fn add_outer(&mut self, s: T, x: &[T], y: &[T]) {
        let r = self.order;
        for j in 0..r {
            let sy = s * y[j];
            for i in 0..r {
                self.data[j * r + i] += x[i] * sy;
            }
        }
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.order).map(|i| self.get(i, i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        crate::scalar::max_abs(&self.data)
    }
}

/// Lower-triangular matrix stored packed in half-vectorized order.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular<T> {
    order: usize,
    data: Vec<T>,
}

impl<T: Real> LowerTriangular<T> {
    pub fn zeros(order: usize) -> Self {
        Self { order, data: vec![T::zero(); tri_len(order)] }
    }

    pub fn identity(order: usize) -> Self {
        Self::scaled_identity(order, T::one())
    }

    pub fn scaled_identity(order: usize, s: T) -> Self {
        let mut l = Self::zeros(order);
        for i in 0..order {
            l.set(i, i, s);
        }
        l
    }

    pub fn from_packed(order: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != tri_len(order) {
            return Err(RvbError::LengthMismatch { expected: tri_len(order), got: data.len() });
        }
        Ok(Self { order, data })
    }

    /// Rebuilds a factor from its log-diagonal parameterization: diagonal
    /// entries are exponentiated, the rest copied.
    pub fn from_log_diag(order: usize, packed: &[T]) -> Result<Self> {
        let mut l = Self::from_packed(order, packed.to_vec())?;
        for i in 0..order {
            let k = packed_index(order, i, i);
            l.data[k] = l.data[k].exp();
        }
        Ok(l)
    }

    /// Inverse of [`from_log_diag`](Self::from_log_diag).
    pub fn to_log_diag(&self) -> Vec<T> {
        let mut out = self.data.clone();
        for i in 0..self.order {
            let k = packed_index(self.order, i, i);
            out[k] = out[k].ln();
        }
        out
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn packed(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        if i < j {
            T::zero()
        } else {
            self.data[packed_index(self.order, i, j)]
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        assert!(i >= j, "superdiagonal entry of a lower-triangular matrix");
        let k = packed_index(self.order, i, j);
        self.data[k] = v;
    }

    #[inline]
    pub fn diag(&self, i: usize) -> T {
        self.data[packed_index(self.order, i, i)]
    }

    pub fn to_square(&self) -> SquareMatrix<T> {
        SquareMatrix::from_fn(self.order, |i, j| self.get(i, j))
    }

    /// `L x`.
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let r = self.order;
        let mut out = vec![T::zero(); r];
        let mut k = 0;
        for j in 0..r {
            let xj = x[j];
            for o in out.iter_mut().skip(j) {
                *o += self.data[k] * xj;
                k += 1;
            }
        }
        out
    }

    /// `Lᵀ x`.
    pub fn t_mul_vec(&self, x: &[T]) -> Vec<T> {
        let r = self.order;
        let mut out = vec![T::zero(); r];
        let mut k = 0;
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for &xi in x.iter().take(r).skip(j) {
                acc += self.data[k] * xi;
                k += 1;
            }
            *o = acc;
        }
        out
    }

    /// Solves `L x = b` by forward substitution.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let r = self.order;
        let mut x = b.to_vec();
        let mut k = 0;
        for j in 0..r {
            x[j] /= self.data[k];
            let xj = x[j];
            k += 1;
            for xi in x.iter_mut().take(r).skip(j + 1) {
                *xi -= self.data[k] * xj;
                k += 1;
            }
        }
        x
    }

    /// Solves `Lᵀ x = b` by back substitution.
    pub fn solve_t(&self, b: &[T]) -> Vec<T> {
        let r = self.order;
        let mut x = b.to_vec();
        for j in (0..r).rev() {
            let start = packed_index(r, j, j);
            let mut acc = x[j];
            for i in (j + 1)..r {
                acc -= self.data[start + (i - j)] * x[i];
            }
            x[j] = acc / self.data[start];
        }
        x
    }

    pub fn inverse(&self) -> Result<Self> {
        let r = self.order;
        if (0..r).any(|i| self.diag(i) == T::zero() || !self.diag(i).is_finite()) {
            return Err(RvbError::Singular);
        }
        let mut inv = Self::zeros(r);
        let mut e = vec![T::zero(); r];
        for j in 0..r {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = self.solve(&e);
            for (i, &v) in col.iter().enumerate().skip(j) {
                inv.set(i, j, v);
            }
        }
        Ok(inv)
    }

    /// `L Lᵀ`.
    pub fn gram(&self) -> SquareMatrix<T> {
        let r = self.order;
        SquareMatrix::from_fn(r, |i, j| {
            let mut acc = T::zero();
            for k in 0..=i.min(j) {
                acc += self.get(i, k) * self.get(j, k);
            }
            acc
        })
    }

    /// `log |L|`, the sum of log-diagonal entries.
    pub fn log_det(&self) -> T {
        (0..self.order).map(|i| self.diag(i).ln()).sum()
    }

    /// `L A` for a dense `A`.
    pub fn mul_square(&self, a: &SquareMatrix<T>) -> SquareMatrix<T> {
        let r = self.order;
        SquareMatrix::from_fn(r, |i, j| {
            let mut acc = T::zero();
            for k in 0..=i {
                acc += self.get(i, k) * a.get(k, j);
            }
            acc
        })
    }

    /// `L A Lᵀ` for a dense `A`.
    pub fn sandwich(&self, a: &SquareMatrix<T>) -> SquareMatrix<T> {
        self.mul_square(&self.mul_square(a).transpose()).transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Half-vector `v(A)`: the on-and-below-diagonal entries in column order.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfVec<T> {
    order: usize,
    values: Vec<T>,
}

impl<T: Real> HalfVec<T> {
    pub fn new(order: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != tri_len(order) {
            return Err(RvbError::LengthMismatch { expected: tri_len(order), got: values.len() });
        }
        Ok(Self { order, values })
    }

    pub fn zeros(order: usize) -> Self {
        Self { order, values: vec![T::zero(); tri_len(order)] }
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

/// `vec(A)`: columns stacked left to right.
pub fn vec<T: Real>(a: &SquareMatrix<T>) -> Vec<T> {
    a.as_col_major().to_vec()
}

/// `v(A)`: `vec(A)` with superdiagonal entries removed.
pub fn halfvec<T: Real>(a: &SquareMatrix<T>) -> HalfVec<T> {
    let r = a.order();
    let mut values = Vec::with_capacity(tri_len(r));
    for j in 0..r {
        for i in j..r {
            values.push(a.get(i, j));
        }
    }
    HalfVec { order: r, values }
}

fn check_square_len(len: usize, r: usize) -> Result<()> {
    if len != r * r {
        return Err(RvbError::LengthMismatch { expected: r * r, got: len });
    }
    Ok(())
}

/// `E_r x`.
pub fn elim_apply<T: Real>(x: &[T], r: usize) -> Result<HalfVec<T>> {
    check_square_len(x.len(), r)?;
    let mut values = Vec::with_capacity(tri_len(r));
    for j in 0..r {
        for i in j..r {
            values.push(x[j * r + i]);
        }
    }
    Ok(HalfVec { order: r, values })
}

/// `E_rᵀ h`: scatters a half-vector into a lower-triangular `vec`.
pub fn elim_t_apply<T: Real>(h: &HalfVec<T>) -> Vec<T> {
    let r = h.order;
    let mut out = vec![T::zero(); r * r];
    let mut k = 0;
    for j in 0..r {
        for i in j..r {
            out[j * r + i] = h.values[k];
            k += 1;
        }
    }
    out
}

/// `D_r h`: the `vec` of the symmetric matrix whose half-vector is `h`.
pub fn dup_apply<T: Real>(h: &HalfVec<T>) -> Vec<T> {
    let r = h.order;
    let mut out = vec![T::zero(); r * r];
    let mut k = 0;
    for j in 0..r {
        for i in j..r {
            out[j * r + i] = h.values[k];
            out[i * r + j] = h.values[k];
            k += 1;
        }
    }
    out
}

/// `K_r x`: maps `vec(A)` to `vec(Aᵀ)`.
pub fn comm_apply<T: Real>(x: &[T], r: usize) -> Result<Vec<T>> {
    check_square_len(x.len(), r)?;
    let mut out = vec![T::zero(); r * r];
    for j in 0..r {
        for i in 0..r {
            out[i * r + j] = x[j * r + i];
        }
    }
    Ok(out)
}

/// `N_r x = (K_r + I) x / 2`.
pub fn sym_apply<T: Real>(x: &[T], r: usize) -> Result<Vec<T>> {
    let kx = comm_apply(x, r)?;
    let half = T::lit(0.5);
    Ok(x.iter().zip(kx).map(|(&a, b)| half * (a + b)).collect())
}

/// Diagonal part of `A`.
pub fn dg<T: Real>(a: &SquareMatrix<T>) -> SquareMatrix<T> {
    SquareMatrix::from_diag(&a.diag())
}

/// Lower triangle of `A` (superdiagonal set to zero).
pub fn tri_lower<T: Real>(a: &SquareMatrix<T>) -> LowerTriangular<T> {
    LowerTriangular { order: a.order(), data: halfvec(a).values }
}

/// `k(A)`: lower triangle of `A` with the diagonal halved.
pub fn k_op<T: Real>(a: &SquareMatrix<T>) -> LowerTriangular<T> {
    let mut l = tri_lower(a);
    let half = T::lit(0.5);
    for i in 0..a.order() {
        let k = packed_index(a.order(), i, i);
        l.data[k] *= half;
    }
    l
}

/// Cholesky factor of the symmetric part of `s`.
pub fn cholesky<T: Real>(s: &SquareMatrix<T>) -> Result<LowerTriangular<T>> {
    let r = s.order();
    let a = s.symmetrized();
    let mut l = LowerTriangular::zeros(r);
    for j in 0..r {
        let mut d = a.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            d -= v * v;
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(RvbError::NotPositiveDefinite { pivot: j });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..r {
            let mut acc = a.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, acc / djj);
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive definite matrix together with the
/// Cholesky factor of the matrix itself.
pub fn spd_inverse<T: Real>(s: &SquareMatrix<T>) -> Result<(SquareMatrix<T>, LowerTriangular<T>)> {
    let l = cholesky(s)?;
    let linv = l.inverse()?;
    // S⁻¹ = L⁻ᵀ L⁻¹
    let r = s.order();
    let inv = SquareMatrix::from_fn(r, |i, j| {
        let mut acc = T::zero();
        for k in i.max(j)..r {
            acc += linv.get(k, i) * linv.get(k, j);
        }
        acc
    });
    Ok((inv, l))
}

/// Differential of the Cholesky factor: given `L = chol(S)` and a symmetric
/// perturbation `dS`, returns `dL = L k(L⁻¹ dS L⁻ᵀ)`.
pub fn chol_diff<T: Real>(l: &LowerTriangular<T>, ds: &SquareMatrix<T>) -> Result<LowerTriangular<T>> {
    let r = l.order();
    if ds.order() != r {
        return Err(RvbError::LengthMismatch { expected: r, got: ds.order() });
    }
    let linv = l.inverse()?;
    let a = linv.sandwich(ds);
    let k = k_op(&a).to_square();
    Ok(tri_lower(&l.mul_square(&k)))
}

/// Chain-rule scaling for the log-diagonal parameterization: `M_ii` on the
/// diagonal positions of the half-vector, one elsewhere.
pub fn dweight<T: Real>(m: &LowerTriangular<T>) -> HalfVec<T> {
    let r = m.order();
    let mut values = vec![T::one(); tri_len(r)];
    for i in 0..r {
        values[packed_index(r, i, i)] = m.diag(i);
    }
    HalfVec { order: r, values }
}
