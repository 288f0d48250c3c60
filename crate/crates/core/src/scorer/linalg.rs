//! Row-major dense kernels used by the scorer's forward and backward passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `y[t][o] = sum_i x[t][i] * w[o][i]` for `x: rows x inp`, `w: out x inp`.
pub fn matmul_wt(x: &[f64], w: &[f64], rows: usize, inp: usize, out: usize) -> Vec<f64> {
    assert_eq!(x.len(), rows * inp);
    assert_eq!(w.len(), out * inp);
    let mut y = vec![0.0; rows * out];
    // SAFETY: the slice lengths match the stated shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            inp,
            out,
            1.0,
            x.as_ptr(),
            inp as isize,
            1,
            w.as_ptr(),
            1,
            inp as isize,
            0.0,
            y.as_mut_ptr(),
            out as isize,
            1,
        );
    }
    y
}

/// `dw[o][i] += sum_t dy[t][o] * x[t][i]`.
pub fn acc_outer(dw: &mut [f64], dy: &[f64], x: &[f64], inp: usize, out: usize) {
    let rows = dy.len() / out;
    assert_eq!(dw.len(), out * inp);
    assert_eq!(dy.len(), rows * out);
    assert_eq!(x.len(), rows * inp);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            out,
            rows,
            inp,
            1.0,
            dy.as_ptr(),
            1,
            out as isize,
            x.as_ptr(),
            inp as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            inp as isize,
            1,
        );
    }
}

/// `dx[t][i] += sum_o dy[t][o] * w[o][i]`.
pub fn acc_matmul(dx: &mut [f64], dy: &[f64], w: &[f64], inp: usize, out: usize) {
    let rows = dy.len() / out;
    assert_eq!(dx.len(), rows * inp);
    assert_eq!(dy.len(), rows * out);
    assert_eq!(w.len(), out * inp);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            out,
            inp,
            1.0,
            dy.as_ptr(),
            out as isize,
            1,
            w.as_ptr(),
            inp as isize,
            1,
            1.0,
            dx.as_mut_ptr(),
            inp as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = (a.chunks_exact(4), a.chunks_exact(4).remainder());
    for (x, y) in ca.zip(b.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra
        .iter()
        .zip(&b[a.len() - ra.len()..])
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Small dense matrix for the public adapter API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        (0..n).for_each(|i| m.data[i * n + i] = 1.0);
        m
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|r| dot(r, x))
            .collect()
    }
}

/// Low-rank adapted linear map `y = W x + (alpha / r) B (A x)`.
///
/// `dropout` is `(rate, keep_mask)`: when given, the adapter input is
/// multiplied elementwise by the mask scaled by `1 / (1 - rate)`. Evaluation
/// passes `None`.
pub fn lora_forward(
    x: &[f64],
    w: &Matrix,
    a: &Matrix,
    b: &Matrix,
    alpha: f64,
    dropout: Option<(f64, &[bool])>,
) -> Result<Vec<f64>> {
    let r = a.rows;
    if r == 0 {
        return Err(Error::invalid("adapter rank must be at least 1"));
    }
    if w.cols != x.len() || a.cols != x.len() || b.rows != w.rows || b.cols != r {
        return Err(Error::invalid(format!(
            "shape mismatch: x {}, W {}x{}, A {}x{}, B {}x{}",
            x.len(),
            w.rows,
            w.cols,
            a.rows,
            a.cols,
            b.rows,
            b.cols
        )));
    }
    let mut y = w.matvec(x);
    let xd: Vec<f64> = match dropout {
        Some((rate, keep)) => {
            if keep.len() != x.len() || !(0.0..1.0).contains(&rate) {
                return Err(Error::invalid("dropout mask or rate invalid"));
            }
            let s = 1.0 / (1.0 - rate);
            x.iter()
                .zip(keep)
                .map(|(v, &k)| if k { v * s } else { 0.0 })
                .collect()
        }
        None => x.to_vec(),
    };
    let h = a.matvec(&xd);
    let update = b.matvec(&h);
    let scale = alpha / r as f64;
    y.iter_mut()
        .zip(update)
        .for_each(|(yi, u)| *yi += scale * u);
    Ok(y)
}
