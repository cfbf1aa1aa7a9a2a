//! Dense row-major matrices and the numeric kernels shared by the tape, the
//! full-sequence forward pass and incremental decoding. Every reduction runs
//! sequentially in index order, so a row computed alone matches the same row
//! computed inside a larger batch bit for bit.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn column(values: Vec<f64>) -> Tensor {
        let n = values.len();
        Tensor::from_vec(n, 1, values)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Tensor::zeros(a.rows, b.cols);
    matmul_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimension");
    let (m, n) = (a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for p in 0..a.rows {
        let arow = a.row(p);
        let brow = b.row(p);
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Normalizes one row in place into `out`; returns `(mean, 1/std)`.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let rstd = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Softmax over `row[..=last]`; entries past `last` become 0.
pub fn causal_softmax_row(row: &[f64], last: usize, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in &row[..=last] {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for j in 0..=last {
        let e = (row[j] - max).exp();
        out[j] = e;
        sum += e;
    }
    for o in &mut out[..=last] {
        *o /= sum;
    }
    for o in &mut out[last + 1..] {
        *o = 0.0;
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `[softplus(x) + softplus(-x)] / 2 + ln 2`
pub fn softabs(x: f64) -> f64 {
    (softplus(x) + softplus(-x)) / 2.0 + std::f64::consts::LN_2
}

pub fn softabs_grad(x: f64) -> f64 {
    (0.5 * x).tanh() / 2.0
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row[argmax(row)];
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row[argmax(row)];
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let b = Tensor::from_vec(3, 2, vec![0.5, 1.0, -2.0, 0.0, 1.0, 3.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![-0.5, 10.0, 0.5, 5.0]);
        let bt = Tensor::from_vec(2, 3, vec![0.5, -2.0, 1.0, 1.0, 0.0, 3.0]);
        assert_eq!(matmul_bt(&a, &bt).data, c.data);
        let at = Tensor::from_vec(3, 2, vec![1.0, -1.0, 2.0, 0.5, 3.0, 2.0]);
        assert_eq!(matmul_at(&at, &b).data, c.data);
    }

    #[test]
    fn softabs_values() {
        assert!((softabs(0.0) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softabs(3.7), softabs(-3.7));
        assert!((softabs(100.0) - (50.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        let h = 1e-6;
        for x in [-3.0, -0.2, 0.0, 0.7, 5.0] {
            let fd = (softabs(x + h) - softabs(x - h)) / (2.0 * h);
            assert!((fd - softabs_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn gelu_derivative() {
        let h = 1e-6;
        for x in [-4.0, -1.0, -0.1, 0.0, 0.3, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn argmax_lowest_index_ties() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut out = vec![9.0; 4];
        causal_softmax_row(&[1.0, 1.0, 50.0, 50.0], 1, &mut out);
        assert_eq!(out, vec![0.5, 0.5, 0.0, 0.0]);
    }
}
