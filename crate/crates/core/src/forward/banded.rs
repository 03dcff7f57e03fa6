//! Banded matrices and a direct LU factorization for the forward solvers.
//!
//! Storage keeps `kl` extra superdiagonals so that partial pivoting can fill
//! in without reallocation (same layout idea as LAPACK's `gbtrf`).

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.ku {
            0.0
        } else {
            self.data[self.offset(i, j)]
        }
    }

    /// Accumulates `value` into entry `(i, j)`; the entry must lie inside the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        assert!(
            j + self.kl >= i && j <= i + self.ku,
            "entry ({i}, {j}) outside band"
        );
        let k = self.offset(i, j);
        self.data[k] += value;
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(
            j + self.kl >= i && j <= i + self.ku,
            "entry ({i}, {j}) outside band"
        );
        let k = self.offset(i, j);
        self.data[k] = value;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku + 1).min(self.n);
                (lo..hi).map(|j| self.data[self.offset(i, j)] * x[j]).sum()
            })
            .collect()
    }

    /// Factorizes in place. Without pivoting the elimination is only safe for
    /// matrices that are diagonally dominant or symmetric positive definite;
    /// a vanishing pivot is reported as a singular system in either mode.
    pub fn factor(mut self, pivoting: bool) -> Result<BandLu> {
        let n = self.n;
        let kl = self.kl;
        let upper = if pivoting { kl + self.ku } else { self.ku };
        let mut piv = vec![0usize; n];
        let scale = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let tiny = scale * f64::EPSILON * (n as f64);
        for k in 0..n {
            let last_row = (k + kl + 1).min(n);
            let mut p = k;
            if pivoting {
                let mut best = self.data[self.offset(k, k)].abs();
                for i in k + 1..last_row {
                    let v = self.data[self.offset(i, k)].abs();
                    if v > best {
                        best = v;
                        p = i;
                    }
                }
            }
            piv[k] = p;
            let last_col = (k + upper + 1).min(n);
            if p != k {
                for j in k..last_col {
                    let a = self.offset(k, j);
                    let b = self.offset(p, j);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.offset(k, k)];
            if !(pivot.abs() > tiny) {
                return Err(Error::Singular(format!("zero pivot at row {k}")));
            }
            let inv = 1.0 / pivot;
            for i in k + 1..last_row {
                let ik = self.offset(i, k);
                let l = self.data[ik] * inv;
                self.data[ik] = l;
                if l == 0.0 {
                    continue;
                }
                let row_k = self.offset(k, k);
                let row_i = ik;
                for c in 1..last_col - k {
                    self.data[row_i + c] -= l * self.data[row_k + c];
                }
            }
        }
        Ok(BandLu {
            lu: self,
            piv,
            upper,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    lu: BandMatrix,
    piv: Vec<usize>,
    upper: usize,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let a = &self.lu;
        let n = a.n;
        assert_eq!(b.len(), n);
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..(k + a.kl + 1).min(n) {
                    b[i] -= a.data[a.offset(i, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let row = a.offset(k, k);
            let mut s = b[k];
            for c in 1..(self.upper + 1).min(n - k) {
                s -= a.data[row + c] * b[k + c];
            }
            b[k] = s / a.data[row];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
