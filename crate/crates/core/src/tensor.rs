//! Minimal dense row-major matrix used throughout the model code.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec shape mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros_like(other: &Mat) -> Self {
        Self::zeros(other.rows, other.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · w` where `w` is `[self.cols × out]`.
    pub fn matmul(&self, w: &Mat) -> Mat {
        debug_assert_eq!(self.cols, w.rows);
        let mut out = Mat::zeros(self.rows, w.cols);
        for i in 0..self.rows {
            let x = self.row(i);
            let o = out.row_mut(i);
            for (k, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = w.row(k);
                for (ov, &wv) in o.iter_mut().zip(wr) {
                    *ov += xv * wv;
                }
            }
        }
        out
    }

    /// `self · wᵀ` where `w` is `[out × self.cols]`.
    pub fn matmul_t(&self, w: &Mat) -> Mat {
        debug_assert_eq!(self.cols, w.cols);
        let mut out = Mat::zeros(self.rows, w.rows);
        for i in 0..self.rows {
            let x = self.row(i);
            for j in 0..w.rows {
                out.data[i * w.rows + j] = dot(x, w.row(j));
            }
        }
        out
    }

    /// Accumulates `selfᵀ · dy` into `acc` (`[self.cols × dy.cols]`).
    pub fn t_matmul_acc(&self, dy: &Mat, acc: &mut Mat) {
        debug_assert_eq!(self.rows, dy.rows);
        debug_assert_eq!(acc.shape(), (self.cols, dy.cols));
        for t in 0..self.rows {
            let x = self.row(t);
            let d = dy.row(t);
            for (k, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let a = acc.row_mut(k);
                for (av, &dv) in a.iter_mut().zip(d) {
                    *av += xv * dv;
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Plain left-to-right dot product. Every score in the crate goes through
/// this so that algebraically equal routes stay bit-identical.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
