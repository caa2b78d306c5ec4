// Copyright 2026 The vlgrape Authors
// SPDX-License-Identifier: Apache-2.0

//! Dense complex linear algebra.
//!
//! Every operator in the crate (propagators, Hamiltonians, Van Loan block
//! generators, ladder and Pauli operators) is a [`CMatrix`]: a square,
//! row-major matrix of `Complex64`. Products go through the `matrixmultiply`
//! zgemm kernel; everything else is plain loops.
//!
//! The matrix exponential is Higham's scaling-and-squaring algorithm with
//! diagonal Padé approximants of degree 3, 5, 7, 9 or 13 chosen from the
//! 1-norm. [`expm_frechet`] evaluates the same rational function together
//! with its exact Fréchet derivative (Al-Mohy & Higham), so that analytic
//! gradients agree with finite differences of [`expm`] to rounding error.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Complex double.
pub type C64 = Complex64;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Square dense complex matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct CMatrix {
    dim: usize,
    data: Vec<C64>,
}

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMatrix {}x{} [", self.dim, self.dim)?;
        for i in 0..self.dim.min(8) {
            write!(f, "  ")?;
            for j in 0..self.dim.min(8) {
                let z = self[(i, j)];
                write!(f, "{:>+.4e}{:+.4e}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl CMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![ZERO; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = ONE;
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(f(i, j));
            }
        }
        Self { dim, data }
    }

    /// Builds a matrix from row-major entries; the length must be a perfect square.
    pub fn from_row_slice(entries: &[C64]) -> Result<Self> {
        let dim = (entries.len() as f64).sqrt().round() as usize;
        if dim * dim != entries.len() || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} entries do not form a non-empty square matrix",
                entries.len()
            )));
        }
        Ok(Self { dim, data: entries.to_vec() })
    }

    /// Real row-major entries.
    pub fn from_real(dim: usize, entries: &[f64]) -> Self {
        assert_eq!(entries.len(), dim * dim, "entry count must equal dim^2");
        Self { dim, data: entries.iter().map(|&x| C64::new(x, 0.0)).collect() }
    }

    pub fn from_diag(diag: &[C64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &z) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = z;
        }
        m
    }

    pub fn from_real_diag(diag: &[f64]) -> Self {
        Self::from_diag(&diag.iter().map(|&x| C64::new(x, 0.0)).collect::<Vec<_>>())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn diag(&self) -> Vec<C64> {
        (0..self.dim).map(|i| self.data[i * self.dim + i]).collect()
    }

    pub fn adjoint(&self) -> Self {
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.data[i * n + j].conj();
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn conj(&self) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|z| z.conj()).collect() }
    }

    pub fn scale(&self, alpha: C64) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|&z| z * alpha).collect() }
    }

    pub fn scale_real(&self, alpha: f64) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|&z| z * alpha).collect() }
    }

    pub fn scale_mut(&mut self, alpha: C64) {
        for z in &mut self.data {
            *z *= alpha;
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: C64, other: &CMatrix) {
        assert_eq!(self.dim, other.dim, "axpy dimension mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// `self += alpha * other` for a real coefficient.
    pub fn axpy_real(&mut self, alpha: f64, other: &CMatrix) {
        assert_eq!(self.dim, other.dim, "axpy dimension mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * alpha;
        }
    }

    pub fn add_identity(&mut self, alpha: C64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += alpha;
        }
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(self.dim);
        gemm(ONE, self, other, ZERO, &mut out);
        out
    }

    /// `self† * other` without materializing the adjoint in the caller.
    pub fn adjoint_matmul(&self, other: &CMatrix) -> CMatrix {
        self.adjoint().matmul(other)
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self.data[i * self.dim + i]).sum()
    }

    /// `Tr(self * other)` in O(n²).
    pub fn trace_product(&self, other: &CMatrix) -> C64 {
        assert_eq!(self.dim, other.dim, "trace_product dimension mismatch");
        let n = self.dim;
        let mut acc = ZERO;
        for i in 0..n {
            let row = &self.data[i * n..(i + 1) * n];
            for (j, &a) in row.iter().enumerate() {
                acc += a * other.data[j * n + i];
            }
        }
        acc
    }

    /// `Σ_ij |A_ij|² = Tr(A†A)`.
    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        let n = self.dim;
        let mut cols = vec![0.0; n];
        for i in 0..n {
            for (j, c) in cols.iter_mut().enumerate() {
                *c += self.data[i * n + j].norm();
            }
        }
        cols.into_iter().fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `‖A − A†‖_F`.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.dim;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += (self.data[i * n + j] - self.data[j * n + i].conj()).norm_sqr();
            }
        }
        acc.sqrt()
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol
    }

    /// `‖A†A − 𝟙‖_F`.
    pub fn unitarity_error(&self) -> f64 {
        let mut g = self.adjoint_matmul(self);
        g.add_identity(-ONE);
        g.frob_norm()
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_error() <= tol
    }

    /// `[self, other] = self·other − other·self`.
    pub fn commutator(&self, other: &CMatrix) -> CMatrix {
        let mut out = self.matmul(other);
        gemm(-ONE, other, self, ONE, &mut out);
        out
    }

    /// Square sub-block `(bi, bj)` of size `bs`.
    pub fn block(&self, bi: usize, bj: usize, bs: usize) -> CMatrix {
        let n = self.dim;
        assert!((bi + 1) * bs <= n && (bj + 1) * bs <= n, "block index out of range");
        let mut out = CMatrix::zeros(bs);
        for r in 0..bs {
            let src = (bi * bs + r) * n + bj * bs;
            out.data[r * bs..(r + 1) * bs].copy_from_slice(&self.data[src..src + bs]);
        }
        out
    }

    pub fn set_block(&mut self, bi: usize, bj: usize, value: &CMatrix) {
        let n = self.dim;
        let bs = value.dim;
        assert!((bi + 1) * bs <= n && (bj + 1) * bs <= n, "block index out of range");
        for r in 0..bs {
            let dst = (bi * bs + r) * n + bj * bs;
            self.data[dst..dst + bs].copy_from_slice(&value.data[r * bs..(r + 1) * bs]);
        }
    }

    /// Assembles a `k×k` grid of equally sized blocks; `None` marks a zero block.
    pub fn from_blocks(blocks: &[Vec<Option<&CMatrix>>]) -> Result<CMatrix> {
        let k = blocks.len();
        if k == 0 || blocks.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidArgument("block grid must be square and non-empty".into()));
        }
        let bs = blocks
            .iter()
            .flatten()
            .flatten()
            .map(|b| b.dim)
            .next()
            .ok_or_else(|| Error::InvalidArgument("block grid has no non-zero block".into()))?;
        let mut out = CMatrix::zeros(k * bs);
        for (bi, row) in blocks.iter().enumerate() {
            for (bj, b) in row.iter().enumerate() {
                if let Some(b) = b {
                    if b.dim != bs {
                        return Err(Error::DimensionMismatch(format!(
                            "block ({bi},{bj}) has dim {} but expected {bs}",
                            b.dim
                        )));
                    }
                    out.set_block(bi, bj, b);
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// `‖self − other‖_F`.
    pub fn frob_dist(&self, other: &CMatrix) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt()
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{what}: matrix has non-finite entries")))
        }
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.dim + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.dim + j]
    }
}

impl Add for &CMatrix {
    type Output = CMatrix;
    fn add(self, rhs: &CMatrix) -> CMatrix {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl Sub for &CMatrix {
    type Output = CMatrix;
    fn sub(self, rhs: &CMatrix) -> CMatrix {
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl AddAssign<&CMatrix> for CMatrix {
    fn add_assign(&mut self, rhs: &CMatrix) {
        assert_eq!(self.dim, rhs.dim, "add dimension mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

impl SubAssign<&CMatrix> for CMatrix {
    fn sub_assign(&mut self, rhs: &CMatrix) {
        assert_eq!(self.dim, rhs.dim, "sub dimension mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
    }
}

impl Neg for &CMatrix {
    type Output = CMatrix;
    fn neg(self) -> CMatrix {
        self.scale_real(-1.0)
    }
}

impl Mul for &CMatrix {
    type Output = CMatrix;
    fn mul(self, rhs: &CMatrix) -> CMatrix {
        self.matmul(rhs)
    }
}

impl Mul<C64> for &CMatrix {
    type Output = CMatrix;
    fn mul(self, rhs: C64) -> CMatrix {
        self.scale(rhs)
    }
}

impl Mul<f64> for &CMatrix {
    type Output = CMatrix;
    fn mul(self, rhs: f64) -> CMatrix {
        self.scale_real(rhs)
    }
}

/// `c ← alpha·a·b + beta·c`.
pub fn gemm(alpha: C64, a: &CMatrix, b: &CMatrix, beta: C64, c: &mut CMatrix) {
    let n = a.dim;
    assert!(b.dim == n && c.dim == n, "gemm dimension mismatch");
    if n == 0 {
        return;
    }
    // SAFETY: Complex64 is #[repr(C)] {re, im}, layout-identical to [f64; 2];
    // all three buffers hold n*n elements with row stride n and unit column stride.
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            n,
            n,
            n,
            [alpha.re, alpha.im],
            a.data.as_ptr() as *const [f64; 2],
            n as isize,
            1,
            b.data.as_ptr() as *const [f64; 2],
            n as isize,
            1,
            [beta.re, beta.im],
            c.data.as_mut_ptr() as *mut [f64; 2],
            n as isize,
            1,
        );
    }
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (na, nb) = (a.dim, b.dim);
    let n = na * nb;
    let mut out = CMatrix::zeros(n);
    for i in 0..na {
        for j in 0..na {
            let aij = a.data[i * na + j];
            if aij == ZERO {
                continue;
            }
            for k in 0..nb {
                let row = (i * nb + k) * n + j * nb;
                for l in 0..nb {
                    out.data[row + l] = aij * b.data[k * nb + l];
                }
            }
        }
    }
    out
}

/// Kronecker product of a list of factors, left to right.
pub fn kron_all(factors: &[&CMatrix]) -> CMatrix {
    let mut it = factors.iter();
    let first = it.next().expect("kron_all needs at least one factor");
    it.fold((*first).clone(), |acc, f| kron(&acc, f))
}

pub fn frob_norm_sq(a: &CMatrix) -> f64 {
    a.frob_norm_sq()
}

/// Truncated annihilation and creation operators on `levels` Fock states.
pub fn ladder_ops(levels: usize) -> Result<(CMatrix, CMatrix)> {
    if levels < 2 {
        return Err(Error::InvalidArgument(format!("ladder_ops needs at least 2 levels, got {levels}")));
    }
    let mut a = CMatrix::zeros(levels);
    for n in 1..levels {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    let ad = a.adjoint();
    Ok((a, ad))
}

pub fn sigma_x() -> CMatrix {
    CMatrix::from_real(2, &[0.0, 1.0, 1.0, 0.0])
}

pub fn sigma_y() -> CMatrix {
    CMatrix::from_row_slice(&[ZERO, -I, I, ZERO]).expect("2x2")
}

pub fn sigma_z() -> CMatrix {
    CMatrix::from_real(2, &[1.0, 0.0, 0.0, -1.0])
}

/// Pauli words `{𝟙, σx, σy, σz}^{⊗n}` in lexicographic order (identity first).
pub fn pauli_basis(qubits: usize) -> Vec<CMatrix> {
    let single = [CMatrix::identity(2), sigma_x(), sigma_y(), sigma_z()];
    let mut words = vec![CMatrix::identity(1)];
    for _ in 0..qubits {
        words = words.iter().flat_map(|w| single.iter().map(move |p| kron(w, p))).collect();
    }
    words
}

/// `C ← alpha·A·B + C` on row-major sub-blocks (`A` is `m×k`, `B` is `k×n`).
///
/// # Safety
/// The pointers must address valid, non-overlapping (for `c`) regions of the
/// given shapes and row strides.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    alpha: C64,
    a: *const C64,
    lda: usize,
    b: *const C64,
    ldb: usize,
    c: *mut C64,
    ldc: usize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    matrixmultiply::zgemm(
        matrixmultiply::CGemmOption::Standard,
        matrixmultiply::CGemmOption::Standard,
        m,
        k,
        n,
        [alpha.re, alpha.im],
        a as *const [f64; 2],
        lda as isize,
        1,
        b as *const [f64; 2],
        ldb as isize,
        1,
        [1.0, 0.0],
        c as *mut [f64; 2],
        ldc as isize,
        1,
    );
}

const LU_BLOCK: usize = 32;

/// LU factorization with partial pivoting (blocked, right-looking).
pub struct Lu {
    n: usize,
    lu: Vec<C64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &CMatrix) -> Result<Lu> {
        let n = a.dim;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut k0 = 0;
        while k0 < n {
            let kb = LU_BLOCK.min(n - k0);
            // unblocked factorization of the panel columns k0..k0+kb
            for k in k0..k0 + kb {
                let mut p = k;
                let mut best = lu[k * n + k].norm();
                for i in k + 1..n {
                    let v = lu[i * n + k].norm();
                    if v > best {
                        best = v;
                        p = i;
                    }
                }
                if best == 0.0 || !best.is_finite() {
                    return Err(Error::InvalidArgument("singular matrix in LU factorization".into()));
                }
                if p != k {
                    for j in 0..n {
                        lu.swap(k * n + j, p * n + j);
                    }
                    perm.swap(k, p);
                }
                let inv_pivot = lu[k * n + k].inv();
                let (head, tail) = lu.split_at_mut((k + 1) * n);
                let pivot_row = &head[k * n + k + 1..k * n + k0 + kb];
                for i in 0..n - k - 1 {
                    let row = &mut tail[i * n..(i + 1) * n];
                    let l = row[k] * inv_pivot;
                    row[k] = l;
                    if l != ZERO {
                        for (x, &u) in row[k + 1..k0 + kb].iter_mut().zip(pivot_row) {
                            *x -= l * u;
                        }
                    }
                }
            }
            let rest = n - k0 - kb;
            if rest > 0 {
                // U12 = L11⁻¹ A12
                for i in k0 + 1..k0 + kb {
                    for k in k0..i {
                        let l = lu[i * n + k];
                        if l != ZERO {
                            for j in k0 + kb..n {
                                let u = lu[k * n + j];
                                lu[i * n + j] -= l * u;
                            }
                        }
                    }
                }
                // A22 -= L21 U12
                let base = lu.as_mut_ptr();
                // SAFETY: L21 (rows k0+kb.., cols k0..k0+kb), U12 (rows k0..k0+kb,
                // cols k0+kb..) and A22 (rows k0+kb.., cols k0+kb..) are disjoint
                // regions of the n×n buffer.
                unsafe {
                    gemm_view(
                        rest,
                        kb,
                        rest,
                        -ONE,
                        base.add((k0 + kb) * n + k0),
                        n,
                        base.add(k0 * n + k0 + kb),
                        n,
                        base.add((k0 + kb) * n + k0 + kb),
                        n,
                    );
                }
            }
            k0 += kb;
        }
        Ok(Lu { n, lu, perm })
    }

    /// Solves `A X = B` for a square right-hand side.
    pub fn solve(&self, b: &CMatrix) -> CMatrix {
        let n = self.n;
        assert_eq!(b.dim, n, "LU solve dimension mismatch");
        let mut x = CMatrix::zeros(n);
        for (i, &p) in self.perm.iter().enumerate() {
            x.data[i * n..(i + 1) * n].copy_from_slice(&b.data[p * n..(p + 1) * n]);
        }
        let lu = self.lu.as_ptr();
        // forward substitution with the unit lower factor, one row block at a time
        let mut i0 = 0;
        while i0 < n {
            let ib = LU_BLOCK.min(n - i0);
            let xp = x.data.as_mut_ptr();
            // SAFETY: rows 0..i0 of X are read, rows i0..i0+ib written; disjoint.
            unsafe { gemm_view(ib, i0, n, -ONE, lu.add(i0 * n), n, xp, n, xp.add(i0 * n), n) };
            for i in i0 + 1..i0 + ib {
                let (done, rest) = x.data.split_at_mut(i * n);
                let row = &mut rest[..n];
                for k in i0..i {
                    let l = self.lu[i * n + k];
                    if l != ZERO {
                        for (r, &s) in row.iter_mut().zip(&done[k * n..(k + 1) * n]) {
                            *r -= l * s;
                        }
                    }
                }
            }
            i0 += ib;
        }
        // back substitution, bottom row block first
        let mut i1 = n;
        while i1 > 0 {
            let ib = LU_BLOCK.min(i1);
            let i0 = i1 - ib;
            let xp = x.data.as_mut_ptr();
            // SAFETY: rows i1..n of X are read, rows i0..i1 written; disjoint.
            unsafe {
                gemm_view(ib, n - i1, n, -ONE, lu.add(i0 * n + i1), n, xp.add(i1 * n), n, xp.add(i0 * n), n)
            };
            for i in (i0..i1).rev() {
                let (head, rest) = x.data.split_at_mut((i + 1) * n);
                let row = &mut head[i * n..];
                for k in i + 1..i1 {
                    let u = self.lu[i * n + k];
                    if u != ZERO {
                        for (r, &s) in row.iter_mut().zip(&rest[(k - i - 1) * n..(k - i) * n]) {
                            *r -= u * s;
                        }
                    }
                }
                let inv = self.lu[i * n + i].inv();
                for r in row.iter_mut() {
                    *r *= inv;
                }
            }
            i1 = i0;
        }
        x
    }
}

pub fn solve(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    Ok(Lu::factor(a)?.solve(b))
}

const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA_13: f64 = 5.371920351148152e0;

fn pade_coefficients(m: usize) -> &'static [f64] {
    match m {
        3 => &[120.0, 60.0, 12.0, 1.0],
        5 => &[30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0],
        7 => &[17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0],
        9 => &[
            17643225600.0,
            8821612800.0,
            2075673600.0,
            302702400.0,
            30270240.0,
            2162160.0,
            110880.0,
            3960.0,
            90.0,
            1.0,
        ],
        13 => &[
            64764752532480000.0,
            32382376266240000.0,
            7771770303897600.0,
            1187353796428800.0,
            129060195264000.0,
            10559470521600.0,
            670442572800.0,
            33522128640.0,
            1323241920.0,
            40840800.0,
            960960.0,
            16380.0,
            182.0,
            1.0,
        ],
        _ => unreachable!("unsupported Padé degree {m}"),
    }
}

/// Padé degree and number of squarings selected from the 1-norm.
fn select_degree(norm1: f64) -> (usize, u32) {
    for &(m, theta) in &THETA {
        if norm1 <= theta {
            return (m, 0);
        }
    }
    let s = (norm1 / THETA_13).log2().ceil().max(0.0) as u32;
    (13, s)
}

/// Linear combination `Σ c_k M_k` plus `c_id·𝟙`.
fn lincomb(dim: usize, c_id: f64, terms: &[(f64, &CMatrix)]) -> CMatrix {
    let mut out = CMatrix::zeros(dim);
    for &(c, m) in terms {
        out.axpy_real(c, m);
    }
    if c_id != 0.0 {
        out.add_identity(C64::new(c_id, 0.0));
    }
    out
}

/// Shared scaling-and-squaring kernel; evaluates the Fréchet derivative along `dir` when given.
fn pade_exp(a: &CMatrix, dir: Option<&CMatrix>) -> (CMatrix, Option<CMatrix>) {
    let n = a.dim;
    // e^A = e^μ·e^{A−μ𝟙} with μ = tr(A)/n lowers the norm at no accuracy cost
    let mu = a.trace() / n as f64;
    let shifted;
    let a = if mu != ZERO {
        let mut t = a.clone();
        t.add_identity(-mu);
        shifted = t;
        &shifted
    } else {
        a
    };
    let (m, s) = select_degree(a.norm1());
    let scale = 0.5f64.powi(s as i32);
    let a = if s > 0 { a.scale_real(scale) } else { a.clone() };
    let e = dir.map(|e| if s > 0 { e.scale_real(scale) } else { e.clone() });
    let b = pade_coefficients(m);

    let (u, v, lu_lv) = if m == 13 {
        let a2 = a.matmul(&a);
        let a4 = a2.matmul(&a2);
        let a6 = a2.matmul(&a4);
        let w1 = lincomb(n, 0.0, &[(b[13], &a6), (b[11], &a4), (b[9], &a2)]);
        let w2 = lincomb(n, b[1], &[(b[7], &a6), (b[5], &a4), (b[3], &a2)]);
        let z1 = lincomb(n, 0.0, &[(b[12], &a6), (b[10], &a4), (b[8], &a2)]);
        let z2 = lincomb(n, b[0], &[(b[6], &a6), (b[4], &a4), (b[2], &a2)]);
        let mut w = w2.clone();
        gemm(ONE, &a6, &w1, ONE, &mut w);
        let u = a.matmul(&w);
        let mut v = z2.clone();
        gemm(ONE, &a6, &z1, ONE, &mut v);
        let lu_lv = e.as_ref().map(|e| {
            let mut m2 = a.matmul(e);
            gemm(ONE, e, &a, ONE, &mut m2);
            let mut m4 = a2.matmul(&m2);
            gemm(ONE, &m2, &a2, ONE, &mut m4);
            let mut m6 = a4.matmul(&m2);
            gemm(ONE, &m4, &a2, ONE, &mut m6);
            let lw1 = lincomb(n, 0.0, &[(b[13], &m6), (b[11], &m4), (b[9], &m2)]);
            let lw2 = lincomb(n, 0.0, &[(b[7], &m6), (b[5], &m4), (b[3], &m2)]);
            let lz1 = lincomb(n, 0.0, &[(b[12], &m6), (b[10], &m4), (b[8], &m2)]);
            let lz2 = lincomb(n, 0.0, &[(b[6], &m6), (b[4], &m4), (b[2], &m2)]);
            let mut lw = lw2;
            gemm(ONE, &a6, &lw1, ONE, &mut lw);
            gemm(ONE, &m6, &w1, ONE, &mut lw);
            let mut lu = a.matmul(&lw);
            gemm(ONE, e, &w, ONE, &mut lu);
            let mut lv = lz2;
            gemm(ONE, &a6, &lz1, ONE, &mut lv);
            gemm(ONE, &m6, &z1, ONE, &mut lv);
            (lu, lv)
        });
        (u, v, lu_lv)
    } else {
        // even powers A^0, A^2, ..., A^{m-1} and their directional derivatives
        let half = (m - 1) / 2;
        let mut pows = vec![CMatrix::identity(n)];
        let mut dpows: Vec<CMatrix> = Vec::new();
        if half >= 1 {
            pows.push(a.matmul(&a));
        }
        for k in 2..=half {
            let next = pows[k - 1].matmul(&pows[1]);
            pows.push(next);
        }
        if let Some(e) = e.as_ref() {
            dpows.push(CMatrix::zeros(n));
            if half >= 1 {
                let mut m2 = a.matmul(e);
                gemm(ONE, e, &a, ONE, &mut m2);
                dpows.push(m2);
            }
            for k in 2..=half {
                let mut mk = pows[1].matmul(&dpows[k - 1]);
                gemm(ONE, &dpows[1], &pows[k - 1], ONE, &mut mk);
                dpows.push(mk);
            }
        }
        let mut w = CMatrix::zeros(n);
        let mut v = CMatrix::zeros(n);
        for k in 0..=half {
            w.axpy_real(b[2 * k + 1], &pows[k]);
            v.axpy_real(b[2 * k], &pows[k]);
        }
        let u = a.matmul(&w);
        let lu_lv = e.as_ref().map(|e| {
            let mut lw = CMatrix::zeros(n);
            let mut lv = CMatrix::zeros(n);
            for k in 1..=half {
                lw.axpy_real(b[2 * k + 1], &dpows[k]);
                lv.axpy_real(b[2 * k], &dpows[k]);
            }
            let mut lu = a.matmul(&lw);
            gemm(ONE, e, &w, ONE, &mut lu);
            (lu, lv)
        });
        (u, v, lu_lv)
    };

    let q = &v - &u;
    let p = &v + &u;
    let lu_q = Lu::factor(&q).expect("Padé denominator is nonsingular for the selected degree");
    let mut r = lu_q.solve(&p);
    let mut l = lu_lv.map(|(lu, lv)| {
        // L = Q⁻¹ (Lu + Lv + (Lu − Lv) R)
        let mut rhs = &lu + &lv;
        let diff = &lu - &lv;
        gemm(ONE, &diff, &r, ONE, &mut rhs);
        lu_q.solve(&rhs)
    });
    for _ in 0..s {
        if let Some(l) = l.as_mut() {
            let mut next = r.matmul(l);
            gemm(ONE, l, &r, ONE, &mut next);
            *l = next;
        }
        r = r.matmul(&r);
    }
    if mu != ZERO {
        let phase = mu.exp();
        r.scale_mut(phase);
        if let Some(l) = l.as_mut() {
            l.scale_mut(phase);
        }
    }
    (r, l)
}

/// Matrix exponential `e^A`.
pub fn expm(a: &CMatrix) -> Result<CMatrix> {
    if a.dim == 0 {
        return Err(Error::InvalidArgument("expm of an empty matrix".into()));
    }
    a.check_finite("expm")?;
    Ok(pade_exp(a, None).0)
}

/// `e^A` and its Fréchet derivative `L(A, E)` along `E`.
///
/// The derivative is exact for the rational approximant that [`expm`]
/// evaluates, so `(expm(A + hE) − expm(A − hE)) / 2h → L(A, E)`.
pub fn expm_frechet(a: &CMatrix, e: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    if a.dim != e.dim {
        return Err(Error::DimensionMismatch(format!(
            "expm_frechet: A is {}x{} but E is {}x{}",
            a.dim, a.dim, e.dim, e.dim
        )));
    }
    if a.dim == 0 {
        return Err(Error::InvalidArgument("expm of an empty matrix".into()));
    }
    a.check_finite("expm_frechet")?;
    e.check_finite("expm_frechet")?;
    let (x, l) = pade_exp(a, Some(e));
    Ok((x, l.expect("direction supplied")))
}

/// `e^{-i·dt·H}` for a Hermitian `H`.
pub fn propagator(h: &CMatrix, dt: f64) -> CMatrix {
    pade_exp(&h.scale(C64::new(0.0, -dt)), None).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_matrix(n: usize, seed: u64, scale: f64) -> CMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        CMatrix::from_fn(n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale)
    }

    fn random_hermitian(n: usize, seed: u64, scale: f64) -> CMatrix {
        let a = random_matrix(n, seed, scale);
        (&a + &a.adjoint()).scale_real(0.5)
    }

    /// Truncated Taylor series with many terms; an independent reference for small norms.
    fn taylor_exp(a: &CMatrix) -> CMatrix {
        let mut term = CMatrix::identity(a.dim());
        let mut sum = term.clone();
        for k in 1..60 {
            term = term.matmul(a).scale_real(1.0 / k as f64);
            sum += &term;
        }
        sum
    }

    #[test]
    fn expm_zero_is_identity() {
        for n in [1, 2, 5, 17] {
            let e = expm(&CMatrix::zeros(n)).unwrap();
            assert!(e.max_abs_diff(&CMatrix::identity(n)) < 1e-15);
        }
    }

    #[test]
    fn expm_diagonal_phases() {
        let thetas = [0.3, -1.2, 2.9, 7.5, -40.0];
        let a = CMatrix::from_diag(&thetas.iter().map(|&t| c(0.0, t)).collect::<Vec<_>>());
        let e = expm(&a).unwrap();
        for (k, &t) in thetas.iter().enumerate() {
            assert!((e[(k, k)] - C64::from_polar(1.0, t)).norm() < 1e-12, "entry {k}");
        }
        assert!(e.unitarity_error() < 1e-12);
    }

    #[test]
    fn expm_pauli_x_quarter_turn() {
        let a = sigma_x().scale(c(0.0, -std::f64::consts::FRAC_PI_2));
        let e = expm(&a).unwrap();
        let expected = sigma_x().scale(-I);
        assert!(e.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn expm_matches_taylor_for_moderate_norms() {
        for (seed, scale) in [(1, 0.001), (2, 0.05), (3, 0.2), (4, 0.5), (5, 1.0)] {
            let a = random_matrix(6, seed, scale);
            let e = expm(&a).unwrap();
            let t = taylor_exp(&a);
            assert!(e.frob_dist(&t) < 1e-12 * t.frob_norm(), "scale {scale}");
        }
    }

    #[test]
    fn expm_rejects_non_finite() {
        let mut a = CMatrix::zeros(3);
        a[(1, 2)] = c(f64::NAN, 0.0);
        assert!(expm(&a).is_err());
        assert!(CMatrix::from_row_slice(&[ONE, ONE, ONE]).is_err());
    }

    #[test]
    fn skew_hermitian_exponential_is_unitary() {
        for (n, scale) in [(4, 1.0), (16, 5.0), (72, 3.0), (256, 1.0)] {
            let h = random_hermitian(n, n as u64, scale);
            let u = expm(&h.scale(-I)).unwrap();
            assert!(u.unitarity_error() < 1e-12, "n={n}: {}", u.unitarity_error());
        }
    }

    #[test]
    fn expm_inverse_pair() {
        // skew-Hermitian at the norm bound, and general matrices with a Hermitian part
        let sized = |a: CMatrix, norm: f64| a.scale_real(norm / a.frob_norm());
        let mut cases = Vec::new();
        for seed in 0..4 {
            let h = random_hermitian(10, 40 + seed, 1.0);
            cases.push(sized(h.scale(I), 50.0));
            let g = random_matrix(10, 60 + seed, 1.0);
            cases.push(sized(g.clone(), 5.0));
            cases.push(sized(&sized(h.scale(I), 49.0) + &sized(g, 1.0), 50.0));
        }
        for a in cases {
            assert!(a.frob_norm() <= 50.0 + 1e-9);
            let p = expm(&a).unwrap().matmul(&expm(&a.scale_real(-1.0)).unwrap());
            let err = p.frob_dist(&CMatrix::identity(10));
            assert!(err < 1e-10, "norm {}: error {err:.3e}", a.frob_norm());
        }
    }

    #[test]
    fn frechet_matches_central_differences() {
        // every Padé branch, including scaling
        for (seed, scale) in [(11, 0.002), (12, 0.03), (13, 0.1), (14, 0.3), (15, 0.45), (16, 3.0)] {
            let a = random_matrix(5, seed, scale);
            let e = random_matrix(5, seed + 100, 1.0);
            let (x, l) = expm_frechet(&a, &e).unwrap();
            assert!(x.max_abs_diff(&expm(&a).unwrap()) == 0.0, "value path must be identical");
            let h = 1e-6;
            let mut ap = a.clone();
            ap.axpy_real(h, &e);
            let mut am = a.clone();
            am.axpy_real(-h, &e);
            let fd = (&expm(&ap).unwrap() - &expm(&am).unwrap()).scale_real(0.5 / h);
            assert!(fd.frob_dist(&l) < 1e-7 * l.frob_norm().max(1.0), "scale {scale}");
        }
    }

    #[test]
    fn frechet_matches_block_augmentation() {
        // L(A,E) is the (1,2) block of exp([[A, E], [0, A]])
        let a = random_matrix(4, 21, 1.5);
        let e = random_matrix(4, 22, 0.7);
        let (_, l) = expm_frechet(&a, &e).unwrap();
        let big = CMatrix::from_blocks(&[vec![Some(&a), Some(&e)], vec![None, Some(&a)]]).unwrap();
        let block = expm(&big).unwrap().block(0, 1, 4);
        assert!(block.frob_dist(&l) < 1e-12 * l.frob_norm());
    }

    #[test]
    fn frechet_trace_adjoint_identity() {
        // Tr(L(A,E) Λ) = Tr(E L(A,Λ)) holds for the computed approximant
        let a = random_matrix(6, 31, 2.0);
        let e = random_matrix(6, 32, 1.0);
        let lam = random_matrix(6, 33, 1.0);
        let (_, le) = expm_frechet(&a, &e).unwrap();
        let (_, ll) = expm_frechet(&a, &lam).unwrap();
        let lhs = le.trace_product(&lam);
        let rhs = e.trace_product(&ll);
        assert!((lhs - rhs).norm() < 1e-12 * lhs.norm().max(1.0));
    }

    #[test]
    fn kron_examples() {
        assert_eq!(kron(&CMatrix::identity(2), &CMatrix::identity(3)), CMatrix::identity(6));
        let zi = kron(&sigma_z(), &CMatrix::identity(2));
        assert_eq!(zi, CMatrix::from_real_diag(&[1.0, 1.0, -1.0, -1.0]));
        let xx = kron(&sigma_x(), &sigma_x());
        // column 0 of XX is e_{11}
        assert_eq!(xx[(3, 0)], ONE);
        assert_eq!((0..4).filter(|&i| xx[(i, 0)] != ZERO).count(), 1);
    }

    #[test]
    fn kron_mixed_product_and_associativity() {
        let a = random_matrix(2, 41, 1.0);
        let b = random_matrix(3, 42, 1.0);
        let cm = random_matrix(2, 43, 1.0);
        let d = random_matrix(3, 44, 1.0);
        let lhs = kron(&a, &b).matmul(&kron(&cm, &d));
        let rhs = kron(&a.matmul(&cm), &b.matmul(&d));
        assert!(lhs.max_abs_diff(&rhs) < 1e-14);
        let e = random_matrix(2, 45, 1.0);
        assert!(kron(&kron(&a, &b), &e).max_abs_diff(&kron(&a, &kron(&b, &e))) < 1e-15);
    }

    #[test]
    fn frob_norm_examples() {
        assert_eq!(frob_norm_sq(&CMatrix::zeros(3)), 0.0);
        assert_eq!(frob_norm_sq(&CMatrix::identity(7)), 7.0);
        assert_eq!(frob_norm_sq(&sigma_y()), 2.0);
    }

    #[test]
    fn ladder_operator_examples() {
        let (a, _) = ladder_ops(2).unwrap();
        assert_eq!(a, CMatrix::from_real(2, &[0.0, 1.0, 0.0, 0.0]));
        let (a, ad) = ladder_ops(3).unwrap();
        assert!(ad.matmul(&a).max_abs_diff(&CMatrix::from_real_diag(&[0.0, 1.0, 2.0])) < 1e-15);
        let (a, ad) = ladder_ops(6).unwrap();
        let comm = a.commutator(&ad);
        for k in 0..5 {
            assert!((comm[(k, k)] - ONE).norm() < 1e-14);
        }
        assert!((comm[(5, 5)] - c(-5.0, 0.0)).norm() < 1e-14);
        assert!(ladder_ops(1).is_err());
    }

    #[test]
    fn pauli_basis_is_orthogonal() {
        let basis = pauli_basis(2);
        assert_eq!(basis.len(), 16);
        assert_eq!(basis[0], CMatrix::identity(4));
        for (i, p) in basis.iter().enumerate() {
            for (j, q) in basis.iter().enumerate() {
                let t = p.trace_product(q);
                let expected = if i == j { 4.0 } else { 0.0 };
                assert!((t - c(expected, 0.0)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn lu_solve_recovers_rhs() {
        // sizes below, at and across several factorization blocks
        for n in [9, 32, 70, 101] {
            let a = random_matrix(n, 51 + n as u64, 1.0);
            let x = random_matrix(n, 52 + n as u64, 1.0);
            let b = a.matmul(&x);
            let err = solve(&a, &b).unwrap().max_abs_diff(&x);
            assert!(err < 1e-9, "n={n}: {err:.3e}");
        }
        assert!(Lu::factor(&CMatrix::zeros(3)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn frob_norm_is_unitarily_invariant(seed in 0u64..10_000, scale in 0.1f64..4.0) {
            let a = random_matrix(5, seed, 1.0);
            let u = expm(&random_hermitian(5, seed + 1, scale).scale(-I)).unwrap();
            let rotated = u.matmul(&a).matmul(&u.adjoint());
            let (n0, n1) = (a.frob_norm_sq(), rotated.frob_norm_sq());
            prop_assert!((n0 - n1).abs() <= 1e-10 * n0);
        }

        #[test]
        fn exp_of_skew_hermitian_is_unitary(seed in 0u64..10_000, scale in 0.01f64..30.0) {
            let h = random_hermitian(8, seed, scale);
            let u = expm(&h.scale(-I)).unwrap();
            prop_assert!(u.unitarity_error() < 1e-10);
        }
    }
}
