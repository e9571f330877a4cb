//! Small dense matrices on the stack and a pivoted Gaussian solver.
//!
//! Production-destruction models in practice have a handful of species, so
//! everything here is sized by [`MAX_DIM`] and never allocates.

use std::fmt;
use std::ops::{Index, IndexMut};

/// Largest state (and control) dimension supported.
pub const MAX_DIM: usize = 8;

#[derive(Clone, Copy, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: [[f64; MAX_DIM]; MAX_DIM],
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n <= MAX_DIM, "matrix dimension {n} exceeds MAX_DIM");
        SquareMatrix {
            n,
            data: [[0.0; MAX_DIM]; MAX_DIM],
        }
    }

    pub fn filled(n: usize, value: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i][j] = value;
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i][i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n, "row {i} has wrong length");
            m.data[i][..n].copy_from_slice(row);
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Resets to an `n × n` zero matrix, reusing the storage.
    #[inline]
    pub fn reset(&mut self, n: usize) {
        debug_assert!(n <= MAX_DIM);
        self.n = n;
        for row in self.data.iter_mut().take(n) {
            row[..n].fill(0.0);
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i][..self.n]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.data[j][i] = self.data[i][j];
            }
        }
        t
    }

    pub fn hadamard(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        let mut out = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.data[i][j] = self.data[i][j] * other.data[i][j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i][k];
                for j in 0..n {
                    out.data[i][j] += a * other.data[k][j];
                }
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.data[i][i]).sum()
    }

    /// `Σ_i M_ij` for every column j.
    pub fn column_sums(&self) -> [f64; MAX_DIM] {
        let mut sums = [0.0; MAX_DIM];
        for i in 0..self.n {
            for (j, s) in sums.iter_mut().enumerate().take(self.n) {
                *s += self.data[i][j];
            }
        }
        sums
    }

    /// `M e`, the vector of row sums.
    pub fn row_sums(&self) -> [f64; MAX_DIM] {
        let mut sums = [0.0; MAX_DIM];
        for (s, row) in sums.iter_mut().zip(self.data.iter()).take(self.n) {
            *s = row[..self.n].iter().sum();
        }
        sums
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.n)
            .flat_map(|i| self.data[i][..self.n].iter().copied())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Index<(usize, usize)> for SquareMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.n && j < self.n);
        &self.data[i][j]
    }
}

impl IndexMut<(usize, usize)> for SquareMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.n && j < self.n);
        &mut self.data[i][j]
    }
}

impl fmt::Debug for SquareMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries((0..self.n).map(|i| &self.data[i][..self.n]))
            .finish()
    }
}

/// A pivot smaller than this (relative to the matrix scale) is singular.
const PIVOT_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularMatrix {
    pub column: usize,
    pub pivot: f64,
}

/// Solves `A y = b` in place by Gaussian elimination with partial pivoting.
///
/// Rows are swapped only when another candidate is strictly larger than the
/// diagonal entry. For strictly column diagonally dominant matrices (all MPE
/// systems) this never swaps, and elimination then preserves the sign
/// pattern of an M-matrix exactly in floating point.
pub fn solve_in_place(
    a: &mut SquareMatrix,
    b: &mut [f64; MAX_DIM],
) -> Result<(), SingularMatrix> {
    match a.n {
        1 => solve_fixed::<1>(a, b),
        2 => solve_fixed::<2>(a, b),
        3 => solve_fixed::<3>(a, b),
        4 => solve_fixed::<4>(a, b),
        5 => solve_fixed::<5>(a, b),
        6 => solve_fixed::<6>(a, b),
        7 => solve_fixed::<7>(a, b),
        8 => solve_fixed::<8>(a, b),
        _ => Ok(()), // n = 0
    }
}

#[inline(always)]
fn solve_fixed<const N: usize>(a: &mut SquareMatrix, b: &mut [f64; MAX_DIM]) -> Result<(), SingularMatrix> {
    let n = N;
    for k in 0..n {
        let mut piv = k;
        let mut best = a.data[k][k].abs();
        for i in (k + 1)..n {
            let v = a.data[i][k].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if !(best > PIVOT_FLOOR) {
            return Err(SingularMatrix {
                column: k,
                pivot: a.data[piv][k],
            });
        }
        if piv != k {
            a.data.swap(piv, k);
            b.swap(piv, k);
        }
        let pivot = a.data[k][k];
        for i in (k + 1)..n {
            let factor = a.data[i][k] / pivot;
            if factor == 0.0 {
                continue;
            }
            a.data[i][k] = 0.0;
            for j in (k + 1)..n {
                a.data[i][j] -= factor * a.data[k][j];
            }
            b[i] -= factor * b[k];
        }
    }
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in (i + 1)..n {
            acc -= a.data[i][j] * b[j];
        }
        b[i] = acc / a.data[i][i];
    }
    Ok(())
}
