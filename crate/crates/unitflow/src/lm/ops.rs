//! Dense math kernels for the language model. Generic over the float type:
//! training and checkpoints run at f32, the gradient-check oracle at f64.

use num_traits::Float;

pub trait Real:
    Float + Send + Sync + std::fmt::Debug + std::iter::Sum + Default + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// out = a (m x k) * b (k x n)
pub fn mm<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(a.rows, b.cols);
    mm_acc(&mut out, a, b, T::one());
    out
}

/// out += s * a (m x k) * b (k x n)
pub fn mm_acc<T: Real>(out: &mut Mat<T>, a: &Mat<T>, b: &Mat<T>, s: T) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(out.rows, a.rows);
    assert_eq!(out.cols, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let f = s * a_ik;
            if f == T::zero() {
                continue;
            }
            let b_row = b.row(kk);
            for j in 0..n {
                out_row[j] = out_row[j] + f * b_row[j];
            }
        }
    }
}

/// out = a (m x k) * b^T where b is (n x k)
pub fn mm_abt<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(a.rows, b.rows);
    mm_abt_acc(&mut out, a, b, T::one());
    out
}

/// out += s * a * b^T
pub fn mm_abt_acc<T: Real>(out: &mut Mat<T>, a: &Mat<T>, b: &Mat<T>, s: T) {
    assert_eq!(a.cols, b.cols);
    assert_eq!(out.rows, a.rows);
    assert_eq!(out.cols, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for j in 0..b.rows {
            let b_row = b.row(j);
            let mut acc = T::zero();
            for kk in 0..a.cols {
                acc = acc + a_row[kk] * b_row[kk];
            }
            out_row[j] = out_row[j] + s * acc;
        }
    }
}

/// out (k x n) += s * a^T * b, where a is (m x k), b is (m x n)
pub fn mm_atb_acc<T: Real>(out: &mut Mat<T>, a: &Mat<T>, b: &Mat<T>, s: T) {
    assert_eq!(a.rows, b.rows);
    assert_eq!(out.rows, a.cols);
    assert_eq!(out.cols, b.cols);
    let n = b.cols;
    for m in 0..a.rows {
        let a_row = a.row(m);
        let b_row = b.row(m);
        for (kk, &a_mk) in a_row.iter().enumerate() {
            let f = s * a_mk;
            if f == T::zero() {
                continue;
            }
            let out_row = out.row_mut(kk);
            for j in 0..n {
                out_row[j] = out_row[j] + f * b_row[j];
            }
        }
    }
}

pub fn add_into<T: Real>(out: &mut Mat<T>, src: &Mat<T>) {
    assert_eq!(out.data.len(), src.data.len());
    for (o, s) in out.data.iter_mut().zip(src.data.iter()) {
        *o = *o + *s;
    }
}

pub const LN_EPS: f64 = 1e-5;

/// LayerNorm with scale and bias. Returns y and caches xhat, 1/std per row.
pub fn ln_forward<T: Real>(x: &Mat<T>, g: &[T], b: &[T]) -> (Mat<T>, Mat<T>, Vec<T>) {
    let d = x.cols;
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = vec![T::zero(); x.rows];
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    for i in 0..x.rows {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let r = (var + eps).sqrt().recip();
        rstd[i] = r;
        let xh = xhat.row_mut(i);
        let yr = y.row_mut(i);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xh[j] = h;
            yr[j] = h * g[j] + b[j];
        }
    }
    (y, xhat, rstd)
}

/// Backward through LayerNorm. Accumulates dg/db, returns dx.
pub fn ln_backward<T: Real>(
    dy: &Mat<T>,
    xhat: &Mat<T>,
    rstd: &[T],
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Mat<T> {
    let d = dy.cols;
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = Mat::zeros(dy.rows, d);
    for i in 0..dy.rows {
        let dyr = dy.row(i);
        let xh = xhat.row(i);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dg[j] = dg[j] + dyr[j] * xh[j];
            db[j] = db[j] + dyr[j];
            mean_dxhat = mean_dxhat + dxh;
            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh[j];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let dxr = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dxr[j] = rstd[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_prime<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}
