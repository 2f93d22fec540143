//! LU factorization with partial pivoting.

use super::Matrix;
use crate::error::{Error, Result};

/// Pivots at or below this magnitude are treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Packed `PA = LU` factors of a square matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    // L below the diagonal (unit diagonal implied), U on and above.
    packed: Vec<f64>,
    perm: Vec<usize>,
    swaps: usize,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let (n, m) = a.shape();
        if n != m {
            return Err(Error::dim("lu", format!("{n}x{m} is not square")));
        }
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > PIVOT_TOLERANCE) {
                return Err(Error::Singular {
                    pivot: k,
                    magnitude: best,
                });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                swaps += 1;
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self {
            n,
            packed: lu,
            perm,
            swaps,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn determinant(&self) -> f64 {
        let n = self.n;
        let diag: f64 = (0..n).map(|i| self.packed[i * n + i]).product();
        if self.swaps.is_multiple_of(2) {
            diag
        } else {
            -diag
        }
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.n;
        if b.rows() != n {
            return Err(Error::dim("solve", format!("{n}x{n} system with {} rhs rows", b.rows())));
        }
        let m = b.cols();
        let mut x = Matrix::zeros(n, m);
        for (i, &p) in self.perm.iter().enumerate() {
            x.row_mut(i).copy_from_slice(b.row(p));
        }
        let xd = x.data_mut();
        // forward: L y = P b
        for i in 0..n {
            for k in 0..i {
                let l = self.packed[i * n + k];
                if l != 0.0 {
                    for j in 0..m {
                        xd[i * m + j] -= l * xd[k * m + j];
                    }
                }
            }
        }
        // backward: U x = y
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.packed[i * n + k];
                if u != 0.0 {
                    for j in 0..m {
                        xd[i * m + j] -= u * xd[k * m + j];
                    }
                }
            }
            let d = self.packed[i * n + i];
            for j in 0..m {
                xd[i * m + j] /= d;
            }
        }
        Ok(x)
    }

    /// Solves `Aᵀ X = B` reusing the factors of `A`.
    pub fn solve_transpose(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.n;
        if b.rows() != n {
            return Err(Error::dim("solve_transpose", format!("{n}x{n} system with {} rhs rows", b.rows())));
        }
        let m = b.cols();
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ z = b, then Lᵀ w = z, then x = Pᵀ w.
        let mut w = b.clone();
        let wd = w.data_mut();
        for i in 0..n {
            for k in 0..i {
                let u = self.packed[k * n + i];
                if u != 0.0 {
                    for j in 0..m {
                        wd[i * m + j] -= u * wd[k * m + j];
                    }
                }
            }
            let d = self.packed[i * n + i];
            for j in 0..m {
                wd[i * m + j] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let l = self.packed[k * n + i];
                if l != 0.0 {
                    for j in 0..m {
                        wd[i * m + j] -= l * wd[k * m + j];
                    }
                }
            }
        }
        let mut x = Matrix::zeros(n, m);
        for (i, &p) in self.perm.iter().enumerate() {
            x.row_mut(p).copy_from_slice(w.row(i));
        }
        Ok(x)
    }
}

/// Solves `a x = b` for square, nonsingular `a`.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Lu::factor(a)?.solve(b)
}

pub fn determinant(a: &Matrix) -> Result<f64> {
    match Lu::factor(a) {
        Ok(lu) => Ok(lu.determinant()),
        Err(Error::Singular { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}
