//! Dense kernels shared by the forward and backward passes.
//!
//! Matrices are row-major slices; [`View`] describes a strided window so
//! per-head blocks and transposes need no copies.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub const LN_EPS: f64 = 1e-5;

pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    /// # Safety
    /// All views must lie inside their buffers and `c` must not alias `a`/`b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(x: f64) -> f32 {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(x: f64) -> f64 {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// A strided `rows × cols` window starting at `offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self::at(0, rows, cols, cols)
    }

    pub fn at(offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            row_stride,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
    }
}

/// `c ← alpha · a·b + beta · c` over views. With `beta == 0`, `c` is not read.
pub fn gemm<T: Scalar>(alpha: T, a: &[T], av: View, b: &[T], bv: View, beta: T, c: &mut [T], cv: View) {
    assert_eq!(av.cols, bv.rows, "inner dimensions differ");
    assert_eq!((cv.rows, cv.cols), (av.rows, bv.cols), "output shape mismatch");
    assert!(av.end() <= a.len() && bv.end() <= b.len() && cv.end() <= c.len(), "view out of bounds");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: bounds checked above; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        )
    }
}

/// `out[N×n] = x[N×k] · w[k×n] + bias`.
pub fn linear<T: Scalar>(x: &[T], w: &[T], bias: &[T], rows: usize, k: usize, n: usize, out: &mut [T]) {
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    gemm(T::one(), x, View::dense(rows, k), w, View::dense(k, n), T::one(), out, View::dense(rows, n));
}

/// Backward of [`linear`]: accumulates `dw`, `db`, and (optionally) writes `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    rows: usize,
    k: usize,
    n: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    gemm(T::one(), x, View::dense(rows, k).t(), dout, View::dense(rows, n), T::one(), dw, View::dense(k, n));
    for row in dout.chunks_exact(n) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += *g;
        }
    }
    if let Some(dx) = dx {
        gemm(T::one(), dout, View::dense(rows, n), w, View::dense(k, n).t(), T::zero(), dx, View::dense(rows, k));
    }
}

#[derive(Clone, Debug, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], dim: usize, out: &mut [T]) -> LnCache<T> {
    let rows = x.len() / dim;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_n = T::of(1.0 / dim as f64);
    let eps = T::of(LN_EPS);
    for r in 0..rows {
        let xs = &x[r * dim..(r + 1) * dim];
        let mean = xs.iter().copied().sum::<T>() * inv_n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        let xh = &mut xhat[r * dim..(r + 1) * dim];
        let o = &mut out[r * dim..(r + 1) * dim];
        for i in 0..dim {
            xh[i] = (xs[i] - mean) * rs;
            o[i] = xh[i] * gain[i] + bias[i];
        }
    }
    LnCache { xhat, rstd }
}

/// Accumulates gain/bias grads and adds the input gradient into `dx`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LnCache<T>,
    gain: &[T],
    dy: &[T],
    dim: usize,
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let inv_n = T::of(1.0 / dim as f64);
    let mut dxhat = vec![T::zero(); dim];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let g = &dy[r * dim..(r + 1) * dim];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in 0..dim {
            dgain[i] += g[i] * xh[i];
            dbias[i] += g[i];
            dxhat[i] = g[i] * gain[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d *= inv_n;
        mean_dx *= inv_n;
        let out = &mut dx[r * dim..(r + 1) * dim];
        for i in 0..dim {
            out[i] += rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let x2 = x * x;
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x2 * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x2);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// In-place softmax of `row`; returns the log-sum-exp.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
    max + sum.ln()
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}
