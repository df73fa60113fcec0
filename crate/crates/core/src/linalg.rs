//! Banded LU factorization without pivoting.
//!
//! The time-stepping matrices `I/Δt + θA` are diagonally dominant M-matrix
//! perturbations for the step sizes used here, so pivoting is unnecessary;
//! a vanishing pivot is still detected and reported.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    // row-major, `(2*bw + 1)` slots per row, column `j` of row `i` at `i*w + j + bw - i`
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.bw, "entry ({i}, {j}) outside band {}", self.bw);
        i * (2 * self.bw + 1) + j + self.bw - i
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.bw {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.bw);
                let hi = (i + self.bw + 1).min(self.n);
                (lo..hi).map(|j| self.data[self.slot(i, j)] * x[j]).sum()
            })
            .collect()
    }

    /// In-place Doolittle factorization; `level` tags breakdown diagnostics.
    pub fn factor(mut self, level: usize) -> Result<BandLu> {
        let (n, bw) = (self.n, self.bw);
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..n {
            let pivot = self.data[self.slot(k, k)];
            if !(pivot.abs() > 1e-14 * scale) {
                return Err(Error::Breakdown {
                    level,
                    message: format!("pivot {pivot:e} at row {k}"),
                });
            }
            let hi = (k + bw + 1).min(n);
            for i in k + 1..hi {
                let sik = self.slot(i, k);
                let l = self.data[sik] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.data[sik] = l;
                for j in k + 1..hi {
                    let skj = self.slot(k, j);
                    let sij = self.slot(i, j);
                    self.data[sij] -= l * self.data[skj];
                }
            }
        }
        Ok(BandLu { m: self })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
}

impl BandLu {
    pub fn n(&self) -> usize {
        self.m.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw) = (self.m.n, self.m.bw);
        let m = &self.m;
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = b[i];
            for j in lo..i {
                s -= m.data[m.slot(i, j)] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let mut s = b[i];
            for j in i + 1..hi {
                s -= m.data[m.slot(i, j)] * b[j];
            }
            b[i] = s / m.data[m.slot(i, i)];
        }
    }

    /// Solves `Aᵀx = b` with the same factors.
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        let (n, bw) = (self.m.n, self.m.bw);
        let m = &self.m;
        // Uᵀ z = b
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = b[i];
            for j in lo..i {
                s -= m.data[m.slot(j, i)] * b[j];
            }
            b[i] = s / m.data[m.slot(i, i)];
        }
        // Lᵀ x = z
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let mut s = b[i];
            for j in i + 1..hi {
                s -= m.data[m.slot(j, i)] * b[j];
            }
            b[i] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_band(n: usize, bw: usize, seed: u64) -> BandMatrix {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut m = BandMatrix::zeros(n, bw);
        for i in 0..n {
            for j in i.saturating_sub(bw)..(i + bw + 1).min(n) {
                m.add(i, j, next());
            }
            m.add(i, i, 2.0 * bw as f64 + 1.0);
        }
        m
    }

    #[test]
    fn singular_matrix_breaks_down() {
        let m = BandMatrix::zeros(3, 1);
        assert!(matches!(m.factor(7), Err(Error::Breakdown { level: 7, .. })));
    }

    proptest! {
        #[test]
        fn solves_and_transpose_solves(n in 1usize..40, bw in 0usize..6, seed in 0u64..1000) {
            let m = random_band(n, bw, seed);
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let b = m.matvec(&x);
            let lu = m.clone().factor(0).unwrap();
            let mut y = b.clone();
            lu.solve_in_place(&mut y);
            for (a, e) in y.iter().zip(&x) {
                prop_assert!((a - e).abs() < 1e-10);
            }
            // Aᵀ x via the band entries
            let bt: Vec<f64> = (0..n)
                .map(|j| (0..n).map(|i| m.get(i, j) * x[i]).sum())
                .collect();
            let mut y = bt;
            lu.solve_transpose_in_place(&mut y);
            for (a, e) in y.iter().zip(&x) {
                prop_assert!((a - e).abs() < 1e-10);
            }
        }
    }
}
